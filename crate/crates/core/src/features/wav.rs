use std::path::Path;

use crate::{Error, Result};

const SCALE: f64 = 32768.0;

pub fn quantize_16bit(x: f64) -> Result<i16> {
    if x.is_nan() {
        return Err(Error::NonFinite("cannot quantize NaN".into()));
    }
    Ok((x * SCALE).round().clamp(-32768.0, 32767.0) as i16)
}

pub fn dequantize(code: i16) -> f64 {
    code as f64 / SCALE
}

/// Reads a mono 16 kHz 16-bit PCM file into floats in `[-1, 1)`.
pub fn load_wav(path: impl AsRef<Path>, sample_rate: u32) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let found = format!(
        "{} Hz, {}-bit {:?}, {} channel(s)",
        spec.sample_rate, spec.bits_per_sample, spec.sample_format, spec.channels
    );
    if spec.sample_rate != sample_rate
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
        || spec.channels != 1
    {
        return Err(Error::WavFormat {
            expected: format!("{sample_rate} Hz, 16-bit Int, 1 channel(s)"),
            found,
        });
    }
    reader
        .into_samples::<i16>()
        .map(|s| Ok((s? as f64 / SCALE) as f32))
        .collect()
}

pub fn save_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(quantize_16bit(s as f64)?)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_edges() {
        assert_eq!(quantize_16bit(0.0).unwrap(), 0);
        assert_eq!(dequantize(0), 0.0);
        assert_eq!(quantize_16bit(1.0).unwrap(), 32767);
        assert_eq!(quantize_16bit(-1.0).unwrap(), -32768);
        assert_eq!(dequantize(-32768), -1.0);
        assert!(quantize_16bit(f64::NAN).is_err());
    }

    #[test]
    fn wav_round_trip_and_format_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        save_wav(&p, &[0.0; 100], 16000).unwrap();
        assert!(load_wav(&p, 16000).unwrap().iter().all(|&x| x == 0.0));

        let p = dir.path().join("min.wav");
        save_wav(&p, &[-1.0, 0.5], 16000).unwrap();
        assert_eq!(load_wav(&p, 16000).unwrap(), vec![-1.0, 0.5]);

        let p = dir.path().join("cd.wav");
        save_wav(&p, &[0.0; 10], 44100).unwrap();
        match load_wav(&p, 16000) {
            Err(Error::WavFormat { expected, found }) => {
                assert!(expected.contains("16000"));
                assert!(found.contains("44100"));
            }
            other => panic!("{other:?}"),
        }
    }
}
