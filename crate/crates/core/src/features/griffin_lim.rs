use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{mel_filterbank, stft_magnitude, Stft};
use super::{AudioConfig, MelSpectrogram};
use crate::Result;

const NNLS_ITERS: usize = 200;

/// Non-negative least-squares estimate of the linear magnitude spectrogram
/// (`T x n_bins`) behind a log-mel spectrogram, via multiplicative updates.
pub fn mel_to_linear_magnitude(mel: &MelSpectrogram, config: &AudioConfig) -> Array2<f64> {
    let fb = mel_filterbank(config);
    // Energy at the floor is treated as silence.
    let floor = config.log_floor;
    let target = mel.frames.mapv(|v| (v.exp() - floor).max(0.0));
    let numer = target.dot(&fb);
    let gram = fb.t().dot(&fb);
    let mut power = numer.clone();
    for _ in 0..NNLS_ITERS {
        let denom = power.dot(&gram);
        ndarray::Zip::from(&mut power)
            .and(&numer)
            .and(&denom)
            .for_each(|p, &n, &d| {
                *p = if d > 0.0 { *p * n / d } else { 0.0 };
            });
    }
    power.mapv(f64::sqrt)
}

/// Relative Frobenius error between the STFT magnitude of `samples` and
/// `target`, over the frames both cover.
pub fn spectral_error(samples: &[f64], target: &Array2<f64>, config: &AudioConfig) -> f64 {
    let mag = stft_magnitude(samples, config);
    let t = mag.nrows().min(target.nrows());
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..t {
        for k in 0..target.ncols() {
            let d = mag[[i, k]] - target[[i, k]];
            num += d * d;
            den += target[[i, k]] * target[[i, k]];
        }
    }
    (num / den.max(1e-300)).sqrt()
}

/// Iterative phase reconstruction. `n_iters = 0` returns the inverse STFT of
/// the estimated magnitude with the (seeded) random initial phase.
pub fn griffin_lim(mel: &MelSpectrogram, config: &AudioConfig, n_iters: usize) -> Result<Vec<f32>> {
    config.validate()?;
    let mag = mel_to_linear_magnitude(mel, config);
    let stft = Stft::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut spectra: Vec<Vec<Complex<f64>>> = mag
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .map(|&m| Complex::from_polar(m, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut signal = stft.inverse(&spectra);
    for _ in 0..n_iters {
        let est = stft.forward(&signal);
        for (t, row) in spectra.iter_mut().enumerate() {
            for (k, c) in row.iter_mut().enumerate() {
                let e = est[t][k];
                let norm = e.norm();
                let phase = if norm > 1e-12 { e / norm } else { Complex::new(1.0, 0.0) };
                *c = phase * mag[[t, k]];
            }
        }
        signal = stft.inverse(&spectra);
    }
    Ok(signal.into_iter().map(|v| v as f32).collect())
}
