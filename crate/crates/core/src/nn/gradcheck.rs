//! Central finite-difference oracle for tape gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries sampled per parameter tensor (all entries if the tensor is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_param: 4,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares `analytic` (indexed by parameter id) against
/// `(f(p + h) - f(p - h)) / 2h` on sampled entries of every parameter.
pub fn check_gradients(
    params: &ParamStore,
    f: impl Fn(&ParamStore) -> f64,
    analytic: &[Option<Array2<f64>>],
    cfg: &GradCheck,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for id in 0..params.len() {
        let n = params.get(id).len();
        let picks: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for flat in picks {
            let orig = params.get(id).as_slice().expect("standard layout")[flat];
            work.get_mut(id).as_slice_mut().unwrap()[flat] = orig + cfg.step;
            let up = f(&work);
            work.get_mut(id).as_slice_mut().unwrap()[flat] = orig - cfg.step;
            let down = f(&work);
            work.get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic
                .get(id)
                .and_then(|g| g.as_ref())
                .map_or(0.0, |g| g.iter().nth(flat).copied().unwrap_or(0.0));
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                if rel >= report.max_rel_error {
                    report.worst = Some((params.name(id).to_string(), flat, a, numeric));
                }
            }
        }
    }
    report
}
