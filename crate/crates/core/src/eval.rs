//! Objective diagnostics: mel-cepstral distortion, attention alignment
//! scores and whole-corpus synthesis reports.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::acoustic::{AcousticModel, Alignments};
use crate::corpus_prep::Utterance;
use crate::features::{griffin_lim, load_wav, mel_spectrogram, save_wav, AudioConfig, MelSpectrogram};
use crate::frontend::{encode_transcript, TagMode, Vocabulary};
use crate::vocoder::{upsample_conditioning, WaveNet};
use crate::{Error, Result};

pub const MCD_COEFFS: usize = 13;

/// Orthonormal DCT-II matrix, `n x n`, rows are basis functions.
fn dct_matrix(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
    })
}

/// Mel-cepstra `c_1..c_13` (orthonormal DCT-II of each log-mel frame).
pub fn mel_cepstra(mel: &MelSpectrogram) -> Array2<f64> {
    let n = mel.n_mels();
    let d = dct_matrix(n);
    let k = MCD_COEFFS.min(n.saturating_sub(1));
    mel.frames.dot(&d.slice(ndarray::s![1..=k, ..]).t())
}

/// Mean over frames of `(10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2)`,
/// `d = 1..13`.
pub fn mcd(reference: &MelSpectrogram, hypothesis: &MelSpectrogram) -> Result<f64> {
    if reference.frames.dim() != hypothesis.frames.dim() {
        return Err(Error::Shape(format!(
            "mel shapes differ: {:?} vs {:?}",
            reference.frames.dim(),
            hypothesis.frames.dim()
        )));
    }
    let t = reference.n_frames();
    if t == 0 {
        return Err(Error::Shape("empty mel".into()));
    }
    let diff = mel_cepstra(reference) - mel_cepstra(hypothesis);
    let k = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;
    let total: f64 = diff.rows().into_iter().map(|r| k * r.dot(&r).sqrt()).sum();
    Ok(total / t as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    /// Share of decoder steps whose attention peak is at or after the
    /// previous peak minus one.
    pub monotonicity: f64,
    /// Share of encoder positions receiving weight above 0.1 at some step.
    pub coverage: f64,
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn alignment_diagnostics(a: &Alignments) -> AlignmentScores {
    let m = &a.0;
    let peaks: Vec<usize> = m.rows().into_iter().map(argmax).collect();
    let monotonicity = if peaks.len() < 2 {
        1.0
    } else {
        let ok = peaks.windows(2).filter(|w| w[1] + 1 >= w[0]).count();
        ok as f64 / (peaks.len() - 1) as f64
    };
    let coverage = if m.ncols() == 0 {
        0.0
    } else {
        let covered = m
            .columns()
            .into_iter()
            .filter(|c| c.fold(f64::NEG_INFINITY, |x, &v| x.max(v)) > 0.1)
            .count();
        covered as f64 / m.ncols() as f64
    };
    AlignmentScores { monotonicity, coverage }
}

/// Waveform back-end used by reports and the command line.
#[derive(Clone, Debug)]
pub enum VocoderChoice {
    WaveNet { model: WaveNet, seed: u64 },
    GriffinLim { iterations: usize },
}

/// Renders `mel` to a waveform; `index` decorrelates sampling streams.
pub fn vocode(choice: &VocoderChoice, mel: &MelSpectrogram, audio: &AudioConfig, index: u64) -> Result<Vec<f32>> {
    match choice {
        VocoderChoice::WaveNet { model, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            model.generate(&upsample_conditioning(mel, audio.hop), &mut rng)
        }
        VocoderChoice::GriffinLim { iterations } => griffin_lim(mel, audio, *iterations),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub utt_id: String,
    pub mcd_db: Option<f64>,
    pub monotonicity: Option<f64>,
    pub coverage: Option<f64>,
    pub stopped: Option<bool>,
    /// `ok` or the error that stopped this utterance.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregate {
    pub utterances: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub mean_mcd_db: Option<f64>,
    pub mean_monotonicity: Option<f64>,
    pub mean_coverage: Option<f64>,
    pub stopped_naturally: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub aggregate: ReportAggregate,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let ok: Vec<&ReportRow> = rows.iter().filter(|r| r.status == "ok").collect();
        let aggregate = ReportAggregate {
            utterances: rows.len(),
            succeeded: ok.len(),
            failed: rows.len() - ok.len(),
            mean_mcd_db: mean(ok.iter().filter_map(|r| r.mcd_db)),
            mean_monotonicity: mean(ok.iter().filter_map(|r| r.monotonicity)),
            mean_coverage: mean(ok.iter().filter_map(|r| r.coverage)),
            stopped_naturally: ok.iter().filter(|r| r.stopped == Some(true)).count(),
        };
        EvalReport { rows, aggregate }
    }

    /// `report.csv` and `report.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(["utt_id", "mcd_db", "monotonicity", "coverage", "stopped", "status"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.utt_id.clone(),
                opt(r.mcd_db),
                opt(r.monotonicity),
                opt(r.coverage),
                r.stopped.map(|s| s.to_string()).unwrap_or_default(),
                r.status.clone(),
            ])?;
        }
        w.flush()?;
        let json = serde_json::to_string_pretty(&self.aggregate)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        Ok(())
    }
}

/// Acoustic model plus the token mapping it was trained with.
#[derive(Clone, Debug)]
pub struct SynthesisFrontend<'a> {
    pub model: &'a AcousticModel,
    pub vocab: &'a Vocabulary,
    pub tag_mode: TagMode,
}

fn report_one(
    u: &Utterance,
    index: usize,
    fe: &SynthesisFrontend<'_>,
    vocoder: &VocoderChoice,
    audio: &AudioConfig,
    out_dir: &Path,
) -> Result<ReportRow> {
    let toks = encode_transcript(&u.syllables, fe.tag_mode.effective_lang(u.lang), fe.vocab, false)?;
    let syn = fe.model.synthesize_mel(&toks, audio.hop_s())?;
    let scores = alignment_diagnostics(&syn.alignments);
    let wave = vocode(vocoder, &syn.mel, audio, index as u64)?;
    save_wav(out_dir.join(format!("{}.wav", u.id)), &wave, audio.sample_rate)?;
    syn.alignments.write_csv(out_dir.join(format!("{}.align.csv", u.id)))?;
    // Distortion against the recording, frame-aligned by teacher forcing.
    let gt = mel_spectrogram(&load_wav(&u.wav_path, audio.sample_rate)?, audio)?;
    let pred = fe.model.teacher_forced_predict(&toks, &gt)?;
    Ok(ReportRow {
        utt_id: u.id.clone(),
        mcd_db: Some(mcd(&gt, &pred)?),
        monotonicity: Some(scores.monotonicity),
        coverage: Some(scores.coverage),
        stopped: Some(syn.stopped_naturally),
        status: "ok".into(),
    })
}

/// Synthesizes every utterance (WAV and alignment CSV per utterance) and
/// writes the report. Failures are recorded per row, never propagated.
/// `jobs` worker threads share the utterances; results do not depend on it.
pub fn synth_report(
    utts: &[Utterance],
    fe: &SynthesisFrontend<'_>,
    vocoder: &VocoderChoice,
    audio: &AudioConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<EvalReport> {
    std::fs::create_dir_all(out_dir)?;
    let run = |i: usize| {
        let u = &utts[i];
        report_one(u, i, fe, vocoder, audio, out_dir).unwrap_or_else(|e| {
            warn!(utt = %u.id, error = %e, "synthesis failed");
            ReportRow {
                utt_id: u.id.clone(),
                mcd_db: None,
                monotonicity: None,
                coverage: None,
                stopped: None,
                status: format!("failed: {e}"),
            }
        })
    };
    let jobs = jobs.max(1);
    let rows: Vec<ReportRow> = if jobs == 1 {
        (0..utts.len()).map(run).collect()
    } else {
        let mut slots: Vec<Option<ReportRow>> = vec![None; utts.len()];
        std::thread::scope(|s| {
            let chunk = utts.len().div_ceil(jobs).max(1);
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let run = &run;
                s.spawn(move || {
                    for (j, slot) in part.iter_mut().enumerate() {
                        *slot = Some(run(c * chunk + j));
                    }
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every slot filled")).collect()
    };
    let report = EvalReport::from_rows(rows);
    report.write(out_dir)?;
    Ok(report)
}
