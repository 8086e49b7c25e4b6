//! Batch runner behind the `footwatch` binary.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on bad usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use walkdir::WalkDir;

use footwatch_core::baselines::{self, BaselineMethod, BocpdConfig, DEFAULT_HARMONICS};
use footwatch_core::detector::{self, FitConfig, NullDistribution};
use footwatch_core::evaluation::{self, EvalReport, DEFAULT_PERMUTATIONS};
use footwatch_core::report::{self, DetectionRecord, Record, MLE_METHOD};
use footwatch_core::scene_store::{self, Band, Manifest, SceneSeries};
use footwatch_core::spectral::{self, ProbMapSeries};
use footwatch_core::synthgen::{self, SyntheticSpec};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const RANKING_FILE: &str = "ranking.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<footwatch_core::Error> for CliError {
    fn from(e: footwatch_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "footwatch",
    version,
    about = "Detect footprint expansion in probability-map time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Generate a labeled synthetic benchmark.
    Synth(SynthArgs),
    /// Turn a scene stack (or a confidence stack) into a smoothed probability stack.
    Segment(SegmentArgs),
    /// Fit every probability stack under a root and rank the locations.
    Detect(DetectArgs),
    /// Run the scalar changepoint baselines over every location under a root.
    Baseline(BaselineArgs),
    /// Score a report stream against labels.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "static", default_value_t = synthgen::DEFAULT_N_STATIC)]
    pub n_static: usize,
    #[arg(long = "expanded", default_value_t = synthgen::DEFAULT_N_EXPANDED)]
    pub n_expanded: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Standard deviation of the probability noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Skip writing the reflectance scene stacks.
    #[arg(long)]
    pub no_scenes: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = spectral::DEFAULT_GAIN)]
    pub gain: f64,
    #[arg(long, default_value_t = spectral::DEFAULT_CENTER)]
    pub center: f64,
    #[arg(long, default_value_t = spectral::DEFAULT_KERNEL)]
    pub kernel: usize,
    /// Input is a single-band CONF stack of raw segmenter confidences.
    #[arg(long)]
    pub from_confidences: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = FitConfig::default().max_iterations)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = FitConfig::default().step_size)]
    pub step_size: f64,
    #[arg(long, default_value_t = FitConfig::default().momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = FitConfig::default().convergence_tol)]
    pub convergence_tol: f64,
    #[arg(long, default_value_t = FitConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = FitConfig::default().restarts)]
    pub restarts: usize,
    #[arg(long, default_value_t = FitConfig::default().sparsity)]
    pub sparsity: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// Root searched recursively for probability stacks.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Root of probability stacks of presumed-static locations used to
    /// calibrate null percentiles.
    #[arg(long)]
    pub null_from: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    BcpNdvi,
    BcpPixels,
    BfastNdvi,
    BfastPixels,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<BaselineMethod> {
        match self {
            MethodArg::BcpNdvi => vec![BaselineMethod::BcpNdvi],
            MethodArg::BcpPixels => vec![BaselineMethod::BcpPixelCount],
            MethodArg::BfastNdvi => vec![BaselineMethod::BfastNdvi],
            MethodArg::BfastPixels => vec![BaselineMethod::BfastPixelCount],
            MethodArg::All => BaselineMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    /// Root searched recursively for scene and probability stacks.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::All)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Constant changepoint hazard; defaults to 1/T per series.
    #[arg(long)]
    pub hazard: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_HARMONICS)]
    pub harmonics: usize,
    /// Probability at or above which a pixel counts toward the pixel count.
    #[arg(long, default_value_t = spectral::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }?;
    let out = match command {
        Command::Synth(a) => &a.out,
        Command::Segment(a) => &a.out,
        Command::Detect(a) => &a.out,
        Command::Baseline(a) => &a.out,
        Command::Evaluate(a) => &a.out,
    };
    write_run_config(out, command)
}

#[derive(Serialize)]
struct RunConfig<'a> {
    version: &'static str,
    #[serde(flatten)]
    command: &'a Command,
}

fn write_run_config(out: &Path, command: &Command) -> CliResult<()> {
    let config = RunConfig {
        version: env!("CARGO_PKG_VERSION"),
        command,
    };
    write_json(&out.join(RUN_CONFIG_FILE), &config)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return usage(format!("{what} {} is not a directory", path.display()));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return usage(format!("{what} {} does not exist", path.display()));
    }
    Ok(())
}

fn thread_pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    if threads == 0 {
        return usage("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    if a.n_static + a.n_expanded == 0 {
        return usage("benchmark needs at least one location (--static + --expanded > 0)");
    }
    let mut template = SyntheticSpec::default();
    if let Some(noise) = a.noise {
        template.noise = noise;
    }
    if let Some(w) = a.width {
        template.width = w;
    }
    if let Some(h) = a.height {
        template.height = h;
    }
    if let Some(t) = a.frames {
        template.n_frames = t;
    }
    // Each location draws its own sheds.
    template.base_sheds.clear();
    if let Err(e) = template.validate() {
        return usage(e.to_string());
    }
    create_dir(&a.out)?;
    let manifest = synthgen::generate_benchmark(a.n_static, a.n_expanded, &template, a.seed, &a.out, !a.no_scenes)?;
    println!("wrote {} locations to {}", manifest.locations.len(), a.out.display());
    Ok(())
}

pub fn cmd_segment(a: &SegmentArgs) -> CliResult<()> {
    require_dir(&a.input, "--input")?;
    if a.kernel == 0 || a.kernel.is_multiple_of(2) {
        return usage(format!("--kernel must be odd and positive, got {}", a.kernel));
    }
    if !(a.gain.is_finite() && a.gain > 0.0) || !a.center.is_finite() {
        return usage("--gain must be positive and --center finite");
    }
    let probs = if a.from_confidences {
        let (manifest, confs) = spectral::read_confidence_stack(&a.input)?;
        let maps = confs
            .iter()
            .zip(&manifest.timestamps)
            .map(|(c, &ts)| spectral::confidences_to_probs(c, ts).and_then(|pm| spectral::smooth(&pm, a.kernel)))
            .collect::<footwatch_core::Result<Vec<_>>>()?;
        ProbMapSeries::new(manifest.location_id, maps, manifest.pixel_size_m)?
    } else {
        let scene = scene_store::read_scene_stack(&a.input)?;
        spectral::segment_series(&scene, a.gain, a.center, a.kernel)?
    };
    create_dir(&a.out)?;
    spectral::write_prob_stack(&probs, &a.out)?;
    println!("wrote {} probability maps to {}", probs.len(), a.out.display());
    Ok(())
}

#[derive(Default)]
struct Stacks {
    prob: Option<PathBuf>,
    scene: Option<PathBuf>,
}

/// Stack directories under `root`, keyed by location id.
fn find_stacks(root: &Path) -> CliResult<BTreeMap<String, Stacks>> {
    let mut out: BTreeMap<String, Stacks> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| io_err(root, e))?;
        if entry.file_type().is_file() && entry.file_name() == scene_store::MANIFEST_FILE {
            entries.push(entry.path().parent().unwrap_or(root).to_path_buf());
        }
    }
    for dir in entries {
        let manifest = Manifest::read(&dir)?;
        let slot = out.entry(manifest.location_id.clone()).or_default();
        let target = if manifest.bands == [Band::Prob] {
            &mut slot.prob
        } else if manifest.bands.contains(&Band::Red) && manifest.bands.contains(&Band::Nir) {
            &mut slot.scene
        } else {
            continue;
        };
        if let Some(previous) = target {
            return Err(CliError::Runtime(format!(
                "location {} has two stacks of the same kind: {} and {}",
                manifest.location_id,
                previous.display(),
                dir.display()
            )));
        }
        *target = Some(dir);
    }
    Ok(out)
}

fn prob_stacks(root: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let stacks: Vec<(String, PathBuf)> = find_stacks(root)?
        .into_iter()
        .filter_map(|(id, s)| s.prob.map(|p| (id, p)))
        .collect();
    if stacks.is_empty() {
        return Err(CliError::Runtime(format!(
            "no probability stacks under {}",
            root.display()
        )));
    }
    Ok(stacks)
}

fn fit_config(a: &DetectArgs) -> CliResult<FitConfig> {
    let config = FitConfig {
        max_iterations: a.fit.max_iterations,
        step_size: a.fit.step_size,
        momentum: a.fit.momentum,
        convergence_tol: a.fit.convergence_tol,
        alpha: a.fit.alpha,
        restarts: a.fit.restarts,
        seed: a.seed,
        sparsity: a.fit.sparsity,
    };
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    Ok(config)
}

fn detect_all(
    pool: &rayon::ThreadPool,
    stacks: &[(String, PathBuf)],
    config: &FitConfig,
    null: Option<&NullDistribution>,
) -> CliResult<Vec<detector::DetectionReport>> {
    pool.install(|| {
        stacks
            .par_iter()
            .map(|(id, dir)| {
                let series = spectral::read_prob_stack(dir)?;
                detector::detect(&series, config, null).map_err(|e| CliError::Runtime(format!("location {id}: {e}")))
            })
            .collect()
    })
}

/// Rewrites the report stream with `fresh` replacing every record of the
/// same methods. Records are ordered by method (detector first), then
/// location id, so the file depends only on its contents.
fn merge_reports(path: &Path, fresh: Vec<Record>) -> CliResult<()> {
    let methods: Vec<&str> = fresh.iter().map(|r| r.method()).collect();
    let mut records: Vec<Record> = if path.is_file() {
        report::read_records(path)?
            .into_iter()
            .filter(|r| !methods.contains(&r.method()))
            .collect()
    } else {
        Vec::new()
    };
    records.extend(fresh);
    let rank = |m: &str| {
        if m == MLE_METHOD {
            0
        } else {
            1 + BaselineMethod::ALL
                .iter()
                .position(|b| b.tag() == m)
                .unwrap_or(BaselineMethod::ALL.len())
        }
    };
    records.sort_by(|a, b| {
        rank(a.method())
            .cmp(&rank(b.method()))
            .then_with(|| a.location_id().cmp(b.location_id()))
    });
    report::write_records(path, &records)?;
    Ok(())
}

pub fn cmd_detect(a: &DetectArgs) -> CliResult<()> {
    require_dir(&a.input, "--input")?;
    if let Some(null_dir) = &a.null_from {
        require_dir(null_dir, "--null-from")?;
    }
    let config = fit_config(a)?;
    let pool = thread_pool(a.threads)?;
    let stacks = prob_stacks(&a.input)?;

    let null = match &a.null_from {
        Some(dir) => {
            let null_reports = detect_all(&pool, &prob_stacks(dir)?, &config, None)?;
            Some(detector::calibrate_null(&null_reports)?)
        }
        None => None,
    };
    let reports = detect_all(&pool, &stacks, &config, null.as_ref())?;

    create_dir(&a.out)?;
    let records = reports
        .iter()
        .map(|r| Record::Detection(DetectionRecord::from(r)))
        .collect();
    merge_reports(&a.out.join(REPORTS_FILE), records)?;
    report::write_ranking_csv(a.out.join(RANKING_FILE), &reports)?;
    if let Some(null) = &null {
        write_json(&a.out.join("null.json"), null)?;
    }
    println!("detected {} locations; reports in {}", reports.len(), a.out.display());
    Ok(())
}

fn baseline_location(
    id: &str,
    stacks: &Stacks,
    methods: &[BaselineMethod],
    a: &BaselineArgs,
) -> footwatch_core::Result<Vec<Record>> {
    let needs = |source| methods.iter().any(|m| m.source() == source);
    let ndvi = match (&stacks.scene, needs(baselines::SeriesSource::MeanNdvi)) {
        (Some(dir), true) => {
            let scene: SceneSeries = scene_store::read_scene_stack(dir)?;
            Some(baselines::series_from_scene(&scene)?)
        }
        _ => None,
    };
    let pixels = match (&stacks.prob, needs(baselines::SeriesSource::PixelCount)) {
        (Some(dir), true) => Some(baselines::series_from_probmaps(
            &spectral::read_prob_stack(dir)?,
            a.threshold,
        )?),
        _ => None,
    };
    let config = BocpdConfig {
        hazard: a.hazard,
        prior: None,
    };
    methods
        .iter()
        .map(|&m| {
            baselines::run_baseline(m, ndvi.as_ref(), pixels.as_ref(), &config, a.harmonics)
                .map(Record::Baseline)
                .map_err(|e| footwatch_core::Error::InvalidArgument(format!("location {id}: {e}")))
        })
        .collect()
}

pub fn cmd_baseline(a: &BaselineArgs) -> CliResult<()> {
    require_dir(&a.input, "--input")?;
    if let Some(h) = a.hazard {
        if !(h > 0.0 && h < 1.0) {
            return usage(format!("--hazard must lie in (0, 1), got {h}"));
        }
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return usage(format!("--threshold must lie in [0, 1], got {}", a.threshold));
    }
    let pool = thread_pool(a.threads)?;
    let methods = a.method.methods();
    let stacks: Vec<(String, Stacks)> = find_stacks(&a.input)?.into_iter().collect();
    if stacks.is_empty() {
        return Err(CliError::Runtime(format!("no stacks under {}", a.input.display())));
    }
    let per_location: Vec<Vec<Record>> = pool.install(|| {
        stacks
            .par_iter()
            .map(|(id, s)| baseline_location(id, s, &methods, a))
            .collect::<footwatch_core::Result<_>>()
    })?;
    create_dir(&a.out)?;
    let records: Vec<Record> = per_location.into_iter().flatten().collect();
    let n = records.len();
    merge_reports(&a.out.join(REPORTS_FILE), records)?;
    println!("wrote {n} baseline records to {}", a.out.join(REPORTS_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct TableRow<'a> {
    method: &'a str,
    auc: f64,
    balanced_accuracy: f64,
    f1: f64,
    pearson_r: Option<f64>,
    pearson_p: Option<f64>,
    false_positives_to_find_all: usize,
    random_search_false_positives: f64,
    cost_reduction: f64,
}

#[derive(Serialize)]
struct RocRow {
    fpr: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct CostRow {
    expansions_found: usize,
    false_positives: usize,
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

fn table_row<'a>(method: &'a str, e: &EvalReport) -> TableRow<'a> {
    let found_all = e.cost_curve.last().copied().unwrap_or(0);
    TableRow {
        method,
        auc: e.auc,
        balanced_accuracy: e.best_balanced_accuracy.value,
        f1: e.best_f1.value,
        pearson_r: e.size_correlation.map(|c| c.r),
        pearson_p: e.size_correlation.map(|c| c.p_value),
        false_positives_to_find_all: found_all,
        random_search_false_positives: e.random_cost.false_positives,
        cost_reduction: 1.0 - found_all as f64 / e.random_cost.false_positives,
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    require_file(&a.reports, "--reports")?;
    require_file(&a.labels, "--labels")?;
    let records = report::read_records(&a.reports)?;
    let labels = evaluation::read_labels(&a.labels)?;
    let grouped = report::scores_by_method(&records, &labels)?;
    if grouped.is_empty() {
        return Err(CliError::Runtime(format!("no records in {}", a.reports.display())));
    }
    create_dir(&a.out)?;

    let mut evals: BTreeMap<&str, EvalReport> = BTreeMap::new();
    for (method, scores) in &grouped {
        let e = evaluation::evaluate(scores, a.permutations, a.seed)
            .map_err(|err| CliError::Runtime(format!("{method}: {err}")))?;
        let dir = a.out.join(method);
        create_dir(&dir)?;
        write_json(&dir.join("eval.json"), &e)?;
        write_csv(
            &dir.join("roc.csv"),
            e.roc_points.iter().map(|&(fpr, tpr)| RocRow { fpr, tpr }),
        )?;
        write_csv(
            &dir.join("cost_curve.csv"),
            e.cost_curve.iter().enumerate().map(|(k, &fp)| CostRow {
                expansions_found: k + 1,
                false_positives: fp,
            }),
        )?;
        evals.insert(method, e);
    }
    write_json(&a.out.join("eval.json"), &evals)?;

    // Detector first, then the rest by descending AUC.
    let mut order: Vec<&str> = evals.keys().copied().collect();
    order.sort_by(|x, y| {
        (*y == MLE_METHOD)
            .cmp(&(*x == MLE_METHOD))
            .then_with(|| evals[y].auc.total_cmp(&evals[x].auc))
            .then_with(|| x.cmp(y))
    });
    let rows: Vec<TableRow> = order.iter().map(|m| table_row(m, &evals[m])).collect();
    println!(
        "{:<18} {:>7} {:>9} {:>7} {:>9} {:>9} {:>10}",
        "method", "AUC", "bal.acc", "F1", "pearson", "perm.p", "FP(all)"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for r in &rows {
        println!(
            "{:<18} {:>7.3} {:>9.3} {:>7.3} {:>9} {:>9} {:>10}",
            r.method,
            r.auc,
            r.balanced_accuracy,
            r.f1,
            opt(r.pearson_r),
            opt(r.pearson_p),
            r.false_positives_to_find_all
        );
    }
    write_csv(&a.out.join("comparison.csv"), rows)?;
    Ok(())
}
