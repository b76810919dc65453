//! Audio I/O, log-mel features and the Griffin-Lim fallback synthesizer.

mod griffin_lim;
mod mel;
mod wav;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use griffin_lim::{griffin_lim, mel_to_linear_magnitude, spectral_error};
pub use mel::{
    filter_centers_hz, hann_window, hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz,
    stft_magnitude,
};
pub use wav::{dequantize, load_wav, quantize_16bit, save_wav};

/// Analysis parameters shared by every stage that touches mel frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_fft: 1024,
            win: 800,
            hop: 200,
            n_mels: 80,
            fmin: 80.0,
            fmax: 7600.0,
            log_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hop > 0
            && self.hop <= self.win
            && self.win <= self.n_fft
            && self.n_mels > 0
            && 0.0 <= self.fmin
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid audio config {self:?}")))
        }
    }

    pub fn hop_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win {
            0
        } else {
            1 + (n_samples - self.win) / self.hop
        }
    }

    /// Offset of the audio span that lines up sample-for-sample with the
    /// frame-repeated conditioning track: frame `t` is centred on the middle
    /// of samples `[offset + t*hop, offset + (t+1)*hop)`.
    pub fn vocoder_offset(&self) -> usize {
        (self.win - self.hop) / 2
    }
}

/// `T x n_mels` natural-log mel power.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub hop_s: f64,
}

#[derive(Serialize, Deserialize)]
struct MelHeader {
    frames: usize,
    n_mels: usize,
    hop_s: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    /// Writes row-major little-endian `f32` data to `path` and the
    /// `{frames, n_mels, hop_s}` header next to it as `.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(self.frames.len() * 4);
        for &v in self.frames.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        let header = MelHeader {
            frames: self.n_frames(),
            n_mels: self.n_mels(),
            hop_s: self.hop_s,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_vec(&header)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header: MelHeader =
            serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let bytes = std::fs::read(path)?;
        if bytes.len() != header.frames * header.n_mels * 4 {
            return Err(Error::Shape(format!(
                "mel file {} has {} bytes, header promises {}x{}",
                path.display(),
                bytes.len(),
                header.frames,
                header.n_mels
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let frames = Array2::from_shape_vec((header.frames, header.n_mels), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(MelSpectrogram {
            frames,
            hop_s: header.hop_s,
        })
    }
}
