fn main() {
    std::process::exit(footwatch_cli::run(std::env::args_os()));
}
