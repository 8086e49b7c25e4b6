#![allow(dead_code)]

use chrono::NaiveDate;
use footwatch_core::spectral::{ProbMap, ProbMapSeries};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn day(d: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + chrono::Days::new(d)
}

/// Uniform probabilities, each pixel masked with probability `mask_rate`.
pub fn random_series(rng: &mut ChaCha8Rng, w: usize, h: usize, t: usize, mask_rate: f64) -> ProbMapSeries {
    let maps = (0..t)
        .map(|k| {
            let values: Vec<f32> = (0..w * h).map(|_| rng.gen::<f32>()).collect();
            let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(mask_rate)).collect();
            ProbMap::new(w, h, values, mask, day(10 * k as u64)).unwrap()
        })
        .collect();
    ProbMapSeries::new("rand", maps, 3.0).unwrap()
}

/// Series whose frame `t` (1-based) is `before` for `t < switch` and `after`
/// from then on.
pub fn switching_series(w: usize, h: usize, t: usize, before: &[f32], after: &[f32], switch: usize) -> ProbMapSeries {
    let maps = (1..=t)
        .map(|k| {
            let v = if k < switch { before } else { after };
            ProbMap::new(w, h, v.to_vec(), vec![false; w * h], day(7 * k as u64)).unwrap()
        })
        .collect();
    ProbMapSeries::new("switch", maps, 3.0).unwrap()
}
