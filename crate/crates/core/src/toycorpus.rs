//! Synthetic two-language corpus: every letter token is a 100 ms tone at
//! the centre frequency of a mel filter, so within one language the mel
//! argmax of a frame identifies the token being spoken. Both languages draw
//! on the same set of tones but assign them to letters differently.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus_prep::{write_manifest, Utterance};
use crate::features::{filter_centers_hz, save_wav, AudioConfig};
use crate::frontend::{syllable_to_letters, Lang};
use crate::{Error, Result};

pub const INITIALS: [&str; 8] = ["b", "d", "g", "m", "n", "l", "s", "h"];
pub const VOWELS: [&str; 5] = ["a", "i", "u", "e", "o"];
pub const TONES: [u8; 4] = [1, 2, 3, 4];

pub const TOKEN_SECONDS: f64 = 0.1;
pub const EDGE_PAD_SAMPLES: usize = 400;
pub const AMPLITUDE: f64 = 0.1;

/// All letter symbols of the toy inventory in vocabulary order.
pub fn symbols() -> Vec<String> {
    let mut v: Vec<String> = TONES.iter().map(|t| format!("<t{t}>")).collect();
    v.extend(INITIALS.iter().chain(VOWELS.iter()).map(|s| s.to_string()));
    v.sort();
    v
}

/// First mel filter of the shared bank; symbols take every other filter.
const BANK_START: usize = 6;
/// The second language pronounces symbol `i` like the first language's
/// symbol `i + SHDIA_ROTATION`: the same sound inventory, with every letter
/// read differently.
const SHDIA_ROTATION: usize = 7;

/// Mel filter assigned to `(lang, symbol)`.
pub fn token_bin(lang: Lang, symbol: &str) -> Option<usize> {
    let syms = symbols();
    let i = syms.iter().position(|s| s == symbol)?;
    let slot = match lang {
        Lang::Mand => i,
        Lang::Shdia => (i + SHDIA_ROTATION) % syms.len(),
    };
    Some(BANK_START + 2 * slot)
}

pub fn token_frequency(lang: Lang, symbol: &str, config: &AudioConfig) -> Option<f64> {
    token_bin(lang, symbol).map(|b| filter_centers_hz(config)[b])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub n_utts: usize,
    /// Share of utterances in the second language.
    pub shdia_fraction: f64,
    pub seed: u64,
    pub min_syllables: usize,
    pub max_syllables: usize,
    /// Long recordings: phrases separated by pauses, occasionally a phrase
    /// longer than the segmentation cap.
    pub long_form: bool,
    pub id_prefix: String,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_utts: 10,
            shdia_fraction: 0.0,
            seed: 0,
            min_syllables: 1,
            max_syllables: 3,
            long_form: false,
            id_prefix: "toy".into(),
        }
    }
}

fn random_syllable(rng: &mut impl Rng) -> String {
    format!(
        "{}{}{}",
        INITIALS.choose(rng).expect("non-empty"),
        VOWELS.choose(rng).expect("non-empty"),
        TONES.choose(rng).expect("non-empty")
    )
}

/// Phase-continuous tone sequence for the letters of `syllables`, without
/// edge padding.
pub fn render_tokens(lang: Lang, syllables: &[String], config: &AudioConfig) -> Result<Vec<f32>> {
    let per_token = (TOKEN_SECONDS * config.sample_rate as f64).round() as usize;
    let mut out = Vec::new();
    let mut phase = 0.0f64;
    for syl in syllables {
        for letter in syllable_to_letters(syl)? {
            let f = token_frequency(lang, &letter, config)
                .ok_or_else(|| Error::OutOfVocabulary(format!("{lang}:{letter}")))?;
            let step = std::f64::consts::TAU * f / config.sample_rate as f64;
            for _ in 0..per_token {
                out.push((AMPLITUDE * phase.sin()) as f32);
                phase = (phase + step) % std::f64::consts::TAU;
            }
        }
    }
    Ok(out)
}

/// One padded utterance: silence, tones, silence.
pub fn render_utterance(lang: Lang, syllables: &[String], config: &AudioConfig) -> Result<Vec<f32>> {
    let mut out = vec![0.0; EDGE_PAD_SAMPLES];
    out.extend(render_tokens(lang, syllables, config)?);
    out.extend(std::iter::repeat_n(0.0, EDGE_PAD_SAMPLES));
    Ok(out)
}

/// Long recording: phrases of 1..=6 syllables separated by 0.35–0.6 s
/// pauses, totalling roughly 8–20 s; one in five recordings contains a
/// pause-free run longer than 7 s.
fn render_long_form(rng: &mut impl Rng, lang: Lang, config: &AudioConfig) -> Result<(Vec<String>, Vec<f32>)> {
    let sr = config.sample_rate as f64;
    let target = rng.random_range(8.0..20.0) * sr;
    let mut syllables = Vec::new();
    let mut audio = vec![0.0f32; EDGE_PAD_SAMPLES];
    let run_on = rng.random_bool(0.2);
    let mut first = true;
    while (audio.len() as f64) < target {
        let n = if run_on && first { 26 } else { rng.random_range(1..=6) };
        first = false;
        let phrase: Vec<String> = (0..n).map(|_| random_syllable(rng)).collect();
        audio.extend(render_tokens(lang, &phrase, config)?);
        syllables.extend(phrase);
        let gap = (rng.random_range(0.35..0.6) * sr) as usize;
        audio.extend(std::iter::repeat_n(0.0, gap));
    }
    audio.truncate(audio.len().saturating_sub(1));
    audio.extend(std::iter::repeat_n(0.0, EDGE_PAD_SAMPLES));
    Ok((syllables, audio))
}

/// Writes `wavs/*.wav` and `manifest.jsonl` under `out_dir`.
pub fn gen_toycorpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<Vec<Utterance>> {
    if spec.n_utts == 0 {
        return Err(Error::InvalidArgument("n_utts must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.shdia_fraction) || spec.min_syllables == 0 || spec.min_syllables > spec.max_syllables
    {
        return Err(Error::InvalidArgument(format!("invalid toy corpus spec {spec:?}")));
    }
    let config = AudioConfig::default();
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_b = (spec.n_utts as f64 * spec.shdia_fraction).round() as usize;
    let mut utts = Vec::with_capacity(spec.n_utts);
    for k in 0..spec.n_utts {
        let lang = if k < spec.n_utts - n_b { Lang::Mand } else { Lang::Shdia };
        let (syllables, audio) = if spec.long_form {
            render_long_form(&mut rng, lang, &config)?
        } else {
            let n = rng.random_range(spec.min_syllables..=spec.max_syllables);
            let syl: Vec<String> = (0..n).map(|_| random_syllable(&mut rng)).collect();
            let audio = render_utterance(lang, &syl, &config)?;
            (syl, audio)
        };
        let id = format!("{}_{lang}_{k:04}", spec.id_prefix);
        let rel = format!("wavs/{id}.wav");
        save_wav(out_dir.join(&rel), &audio, config.sample_rate)?;
        utts.push(Utterance {
            id,
            wav_path: rel,
            lang,
            syllables,
            duration_s: audio.len() as f64 / config.sample_rate as f64,
            approximate: false,
        });
    }
    write_manifest(out_dir.join("manifest.jsonl"), &utts)?;
    Ok(utts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mel_spectrogram;

    #[test]
    fn languages_share_sounds_but_not_letters() {
        let c = AudioConfig::default();
        let bank = |lang| -> Vec<usize> { symbols().iter().map(|s| token_bin(lang, s).unwrap()).collect() };
        let (mand, shdia) = (bank(Lang::Mand), bank(Lang::Shdia));
        let mut sorted = shdia.clone();
        sorted.sort();
        assert_eq!(sorted, mand);
        sorted.dedup();
        assert_eq!(sorted.len(), mand.len());
        assert!(mand.iter().zip(&shdia).all(|(a, b)| a != b));
        assert!(*mand.last().unwrap() < c.n_mels);
    }

    #[test]
    fn five_tokens_last_half_a_second_plus_padding() {
        let c = AudioConfig::default();
        let syl = vec!["ba1".to_string(), "mo".to_string()];
        let audio = render_utterance(Lang::Mand, &syl, &c).unwrap();
        assert_eq!(audio.len(), 8000 + 2 * EDGE_PAD_SAMPLES);
    }

    #[test]
    fn mel_argmax_follows_tokens() {
        let c = AudioConfig::default();
        let syl = vec!["gu3".to_string(), "sa4".to_string()];
        for lang in [Lang::Mand, Lang::Shdia] {
            let audio = render_tokens(lang, &syl, &c).unwrap();
            let mel = mel_spectrogram(&audio, &c).unwrap();
            let letters: Vec<String> = syl.iter().flat_map(|s| syllable_to_letters(s).unwrap()).collect();
            for (i, letter) in letters.iter().enumerate() {
                let start = i * 1600;
                let end = start + 1600;
                // Frames lying entirely inside the token.
                for t in 0..mel.n_frames() {
                    let (a, b) = (t * c.hop, t * c.hop + c.win);
                    if a >= start && b <= end {
                        let row = mel.frames.row(t);
                        let arg = (0..row.len()).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
                        assert_eq!(Some(arg), token_bin(lang, letter), "{lang} {letter} frame {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            n_utts: 4,
            shdia_fraction: 0.5,
            seed: 3,
            ..Default::default()
        };
        let ua = gen_toycorpus(&spec, a.path()).unwrap();
        let ub = gen_toycorpus(&spec, b.path()).unwrap();
        assert_eq!(ua, ub);
        assert_eq!(ua.iter().filter(|u| u.lang == Lang::Shdia).count(), 2);
        for f in ["manifest.jsonl", &ua[3].wav_path] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
}
