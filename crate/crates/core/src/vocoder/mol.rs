//! Discretized mixture of logistics over the 65536-point sample grid.
//!
//! Grid point `k` sits at `-1 + 2k / 65535`, so 16-bit code `c` maps to
//! `(2c + 1) / 65535`. Each point owns the interval `x +- 1/65535`; the two
//! end points absorb the tails.

use ndarray::{Array1, ArrayView1};
use rand::Rng;

use crate::nn::{sigmoid, softplus};
use crate::{Error, Result};

pub const GRID_POINTS: usize = 65536;
const HALF_BIN: f64 = 1.0 / 65535.0;
/// Sampling keeps `u` inside `[EPS, 1 - EPS]`.
const SAMPLE_EPS: f64 = 3e-5;

pub fn code_to_grid(code: i16) -> f64 {
    (2.0 * code as f64 + 1.0) / 65535.0
}

pub fn grid_index(x: f64) -> f64 {
    (x + 1.0) * 65535.0 / 2.0
}

pub fn grid_point(k: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / 65535.0
}

/// Nearest grid point to any finite `x` (clamped to `[-1, 1]`).
pub fn snap_to_grid(x: f64) -> f64 {
    grid_point(grid_index(x.clamp(-1.0, 1.0)).round() as usize)
}

pub fn grid_to_code(x: f64) -> i16 {
    (grid_index(snap_to_grid(x)).round() as i64 - 32768) as i16
}

/// Waveform float (`code / 32768`) to grid value.
pub fn wave_to_grid(x: f32) -> f64 {
    code_to_grid(crate::features::quantize_16bit(x as f64).unwrap_or(0))
}

pub fn grid_to_wave(x: f64) -> f32 {
    (grid_to_code(x) as f64 / 32768.0) as f32
}

fn checked_index(x: f64) -> Result<usize> {
    let k = grid_index(x);
    if !x.is_finite() || (k - k.round()).abs() > 1e-6 || k.round() < 0.0 || k.round() > 65535.0 {
        return Err(Error::OffGrid(x));
    }
    Ok(k.round() as usize)
}

/// Per-sample mixture parameters. `log_scales` are already floored.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOfLogisticsParams {
    pub logit_weights: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MixtureOfLogisticsParams {
    /// Splits a raw `3K` network output row `[logits | means | log_scales]`
    /// and applies the log-scale floor.
    pub fn from_raw(row: ArrayView1<f64>, log_scale_floor: f64) -> Self {
        let k = row.len() / 3;
        MixtureOfLogisticsParams {
            logit_weights: row.slice(ndarray::s![..k]).to_vec(),
            means: row.slice(ndarray::s![k..2 * k]).to_vec(),
            log_scales: row
                .slice(ndarray::s![2 * k..])
                .iter()
                .map(|&v| v.max(log_scale_floor))
                .collect(),
        }
    }

    pub fn n_mixtures(&self) -> usize {
        self.means.len()
    }

    fn log_weights(&self) -> Vec<f64> {
        log_softmax(&self.logit_weights)
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(sigma(a) - sigma(b))` for `d = a - b > 0`, without cancellation;
/// `d` is passed separately because it is known more accurately than `a - b`.
fn log_sigmoid_diff(a: f64, b: f64, d: f64) -> f64 {
    let log_expm1 = if d > 30.0 { d + (-(-d).exp()).ln_1p() } else { d.exp_m1().ln() };
    b + log_expm1 - softplus(a) - softplus(b)
}

fn log_sigmoid_prime(z: f64) -> f64 {
    -softplus(z) - softplus(-z)
}

enum Bin {
    Lowest,
    Highest,
    Interior,
}

fn bin_kind(k: usize) -> Bin {
    match k {
        0 => Bin::Lowest,
        k if k == GRID_POINTS - 1 => Bin::Highest,
        _ => Bin::Interior,
    }
}

/// Log mass one logistic component puts on the bin of grid point `x`.
fn component_log_mass(x: f64, bin: &Bin, mean: f64, log_scale: f64) -> f64 {
    let inv_s = (-log_scale).exp();
    let a = (x + HALF_BIN - mean) * inv_s;
    let b = (x - HALF_BIN - mean) * inv_s;
    match bin {
        Bin::Lowest => -softplus(-a),
        Bin::Highest => -softplus(b),
        Bin::Interior => log_sigmoid_diff(a, b, 2.0 * HALF_BIN * inv_s),
    }
}

/// Log probability of grid value `x` under the mixture.
pub fn mol_log_prob(x: f64, params: &MixtureOfLogisticsParams) -> Result<f64> {
    let k = checked_index(x)?;
    let bin = bin_kind(k);
    let lw = params.log_weights();
    let terms: Vec<f64> = (0..params.n_mixtures())
        .map(|i| lw[i] + component_log_mass(x, &bin, params.means[i], params.log_scales[i]))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Negative log-likelihood of `x` and its gradient w.r.t. the raw `3K`
/// output row (the log-scale floor passes no gradient below it).
pub fn mol_nll_grad(raw: ArrayView1<f64>, x: f64, log_scale_floor: f64) -> (f64, Array1<f64>) {
    let k = raw.len() / 3;
    let idx = grid_index(x).round().clamp(0.0, 65535.0) as usize;
    let bin = bin_kind(idx);
    let logits = raw.slice(ndarray::s![..k]).to_vec();
    let lw = log_softmax(&logits);
    let mut grad = Array1::zeros(3 * k);
    let mut terms = vec![0.0; k];
    let mut dlogm_dmean = vec![0.0; k];
    let mut dlogm_dls = vec![0.0; k];
    for i in 0..k {
        let mean = raw[k + i];
        let raw_ls = raw[2 * k + i];
        let ls = raw_ls.max(log_scale_floor);
        let inv_s = (-ls).exp();
        let a = (x + HALF_BIN - mean) * inv_s;
        let b = (x - HALF_BIN - mean) * inv_s;
        let logm = component_log_mass(x, &bin, mean, ls);
        terms[i] = lw[i] + logm;
        // d mass / d mean and d mass / d log_scale, divided by the mass.
        let (dm, dl) = match bin {
            Bin::Lowest => {
                let ra = (log_sigmoid_prime(a) - logm).exp();
                (-ra * inv_s, -a * ra)
            }
            Bin::Highest => {
                let rb = (log_sigmoid_prime(b) - logm).exp();
                (rb * inv_s, b * rb)
            }
            Bin::Interior => {
                let ra = (log_sigmoid_prime(a) - logm).exp();
                let rb = (log_sigmoid_prime(b) - logm).exp();
                (-(ra - rb) * inv_s, -(a * ra - b * rb))
            }
        };
        dlogm_dmean[i] = dm;
        dlogm_dls[i] = if raw_ls > log_scale_floor { dl } else { 0.0 };
    }
    let logp = log_sum_exp(&terms);
    for i in 0..k {
        let resp = (terms[i] - logp).exp();
        grad[i] = -(resp - lw[i].exp());
        grad[k + i] = -resp * dlogm_dmean[i];
        grad[2 * k + i] = -resp * dlogm_dls[i];
    }
    (-logp, grad)
}

/// Draws a component from the weights, then a logistic variate by inverse
/// CDF, clamped to `[-1, 1]`.
pub fn sample_mol(params: &MixtureOfLogisticsParams, rng: &mut impl Rng) -> f64 {
    let lw = params.log_weights();
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = lw.len() - 1;
    for (i, l) in lw.iter().enumerate() {
        acc += l.exp();
        if r < acc {
            pick = i;
            break;
        }
    }
    let u: f64 = rng.random_range(SAMPLE_EPS..1.0 - SAMPLE_EPS);
    let s = params.log_scales[pick].exp();
    (params.means[pick] + s * (u.ln() - (1.0 - u).ln())).clamp(-1.0, 1.0)
}

/// Mean of the heaviest component: the deterministic stand-in for sampling.
pub fn most_likely_mean(params: &MixtureOfLogisticsParams) -> f64 {
    let i = params
        .logit_weights
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &w)| if w > best.1 { (i, w) } else { best })
        .0;
    params.means[i].clamp(-1.0, 1.0)
}

/// Logistic CDF, used by tests and the statistical sampling check.
pub fn logistic_cdf(x: f64, mean: f64, log_scale: f64) -> f64 {
    sigmoid((x - mean) * (-log_scale).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut impl Rng, k: usize) -> MixtureOfLogisticsParams {
        MixtureOfLogisticsParams {
            logit_weights: (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
            means: (0..k).map(|_| rng.random_range(-1.2..1.2)).collect(),
            log_scales: (0..k).map(|_| rng.random_range(-7.0..0.5)).collect(),
        }
    }

    #[test]
    fn grid_mapping() {
        assert_eq!(code_to_grid(-32768), -1.0);
        assert_eq!(code_to_grid(32767), 1.0);
        for c in [-32768i16, -1, 0, 1, 1234, 32767] {
            assert_eq!(grid_to_code(code_to_grid(c)), c);
            assert!(checked_index(code_to_grid(c)).is_ok());
        }
        assert!(matches!(mol_log_prob(0.0, &random_params(&mut ChaCha8Rng::seed_from_u64(0), 2)), Err(Error::OffGrid(_))));
    }

    #[test]
    fn single_component_is_plain_discretized_logistic() {
        let p = MixtureOfLogisticsParams {
            logit_weights: vec![0.3],
            means: vec![0.1],
            log_scales: vec![-3.0],
        };
        let x = code_to_grid(2000);
        let direct = (logistic_cdf(x + HALF_BIN, 0.1, -3.0) - logistic_cdf(x - HALF_BIN, 0.1, -3.0)).ln();
        assert!((mol_log_prob(x, &p).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn mirror_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_params(&mut rng, 1);
            let q = MixtureOfLogisticsParams {
                means: vec![-p.means[0]],
                ..p.clone()
            };
            let x = code_to_grid(rng.random());
            let d = mol_log_prob(x, &p).unwrap() - mol_log_prob(-x, &q).unwrap();
            assert!(d.abs() < 1e-10, "{d}");
        }
    }

    #[test]
    fn nll_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let floor = -7.0;
        for case in 0..30 {
            let raw = Array1::from_shape_fn(30, |_| rng.random_range(-2.0..1.0));
            let x = match case {
                0 => -1.0,
                1 => 1.0,
                _ => code_to_grid(rng.random()),
            };
            let (_, g) = mol_nll_grad(raw.view(), x, floor);
            for j in 0..30 {
                let h = 1e-6;
                let mut up = raw.clone();
                up[j] += h;
                let mut dn = raw.clone();
                dn[j] -= h;
                let num = (mol_nll_grad(up.view(), x, floor).0 - mol_nll_grad(dn.view(), x, floor).0) / (2.0 * h);
                let err = (g[j] - num).abs();
                assert!(err < 1e-9 + 1e-4 * num.abs(), "case {case} j {j}: {} vs {num}", g[j]);
            }
        }
    }

    #[test]
    fn nll_agrees_with_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Array1::from_shape_fn(30, |_| rng.random_range(-2.0..1.0));
        let p = MixtureOfLogisticsParams::from_raw(raw.view(), -7.0);
        for c in [-32768i16, -5, 77, 32767] {
            let x = code_to_grid(c);
            let (nll, _) = mol_nll_grad(raw.view(), x, -7.0);
            assert!((nll + mol_log_prob(x, &p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_mixture_samples_near_its_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MixtureOfLogisticsParams {
            logit_weights: vec![50.0, 0.0, 0.0],
            means: vec![0.3, -0.5, 0.8],
            log_scales: vec![-7.0; 3],
        };
        for _ in 0..20000 {
            assert!((sample_mol(&p, &mut rng) - 0.3).abs() < 0.01);
        }
        assert!((most_likely_mean(&p) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let p = random_params(&mut ChaCha8Rng::seed_from_u64(6), 10);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_mol(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }
}
