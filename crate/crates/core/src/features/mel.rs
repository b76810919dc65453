use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioConfig, MelSpectrogram};
use crate::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn mel_points_hz(config: &AudioConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax);
    let n = config.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Peak frequency of each triangular filter.
pub fn filter_centers_hz(config: &AudioConfig) -> Vec<f64> {
    let p = mel_points_hz(config);
    p[1..p.len() - 1].to_vec()
}

/// `n_mels x (n_fft/2 + 1)` triangular filters, unit peak, HTK mel spacing.
pub fn mel_filterbank(config: &AudioConfig) -> Array2<f64> {
    let pts = mel_points_hz(config);
    let n_bins = config.n_bins();
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    Array2::from_shape_fn((config.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        let rise = (f - l) / (c - l);
        let fall = (r - f) / (r - c);
        rise.min(fall).max(0.0)
    })
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

pub(super) struct Stft {
    pub window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n_fft: usize,
    win: usize,
    hop: usize,
}

impl Stft {
    pub fn new(config: &AudioConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann_window(config.win),
            fwd: planner.plan_fft_forward(config.n_fft),
            inv: planner.plan_fft_inverse(config.n_fft),
            n_fft: config.n_fft,
            win: config.win,
            hop: config.hop,
        }
    }

    /// Complex spectra, one row of `n_fft/2 + 1` bins per frame.
    pub fn forward(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n_frames = if samples.len() < self.win {
            0
        } else {
            1 + (samples.len() - self.win) / self.hop
        };
        let n_bins = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        (0..n_frames)
            .map(|t| {
                let start = t * self.hop;
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (i, (x, w)) in samples[start..start + self.win]
                    .iter()
                    .zip(&self.window)
                    .enumerate()
                {
                    buf[i] = Complex::new(x * w, 0.0);
                }
                self.fwd.process(&mut buf);
                buf[..n_bins].to_vec()
            })
            .collect()
    }

    /// Windowed overlap-add inverse, normalised by the summed squared window.
    pub fn inverse(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        if spectra.is_empty() {
            return Vec::new();
        }
        let len = (spectra.len() - 1) * self.hop + self.win;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (t, spec) in spectra.iter().enumerate() {
            let n_bins = spec.len();
            buf[..n_bins].copy_from_slice(spec);
            for k in n_bins..self.n_fft {
                buf[k] = spec[self.n_fft - k].conj();
            }
            self.inv.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.win {
                let w = self.window[i];
                out[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// `T x (n_fft/2 + 1)` magnitude spectrogram.
pub fn stft_magnitude(samples: &[f64], config: &AudioConfig) -> Array2<f64> {
    let spectra = Stft::new(config).forward(samples);
    let n_bins = config.n_bins();
    let mut out = Array2::zeros((spectra.len(), n_bins));
    for (t, row) in spectra.iter().enumerate() {
        for (k, c) in row.iter().enumerate() {
            out[[t, k]] = c.norm();
        }
    }
    out
}

/// Log mel power: `log(max(mel . |STFT|^2, log_floor))`, Hann window, no
/// centre padding, so `T = 1 + (len - win) / hop`.
pub fn mel_spectrogram(samples: &[f32], config: &AudioConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if samples.len() < config.win {
        return Err(Error::AudioTooShort {
            len: samples.len(),
            min: config.win,
        });
    }
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let mag = stft_magnitude(&x, config);
    let power = mag.mapv(|m| m * m);
    let fb = mel_filterbank(config);
    let floor = config.log_floor;
    let frames = power.dot(&fb.t()).mapv(|v| v.max(floor).ln());
    Ok(MelSpectrogram {
        frames,
        hop_s: config.hop_s(),
    })
}
