//! Corpus re-segmentation: silence detection, length-capped segmentation,
//! letter-rate filtering and utterance length histograms.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::frontend::Lang;
use crate::{Error, Result};

/// One training utterance as stored in a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    #[serde(rename = "wav")]
    pub wav_path: String,
    pub lang: Lang,
    #[serde(with = "space_separated")]
    pub syllables: Vec<String>,
    #[serde(rename = "dur")]
    pub duration_s: f64,
    /// Set when the transcript was apportioned automatically after a cut.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub approximate: bool,
}

impl Utterance {
    /// Letter-level token count: every letter and every tone digit is one token.
    pub fn token_count(&self) -> usize {
        self.syllables.iter().map(|s| s.chars().count()).sum()
    }

    /// Resolves `wav_path` against the directory holding the manifest.
    pub fn resolve_wav(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.wav_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }
}

mod space_separated {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[String], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.split_whitespace().map(str::to_string).collect())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SilenceInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl SilenceInterval {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    fn to_samples(self, sample_rate: u32) -> (usize, usize) {
        let sr = sample_rate as f64;
        (
            (self.start_s * sr).round() as usize,
            (self.end_s * sr).round() as usize,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SilenceParams {
    pub frame_ms: f64,
    pub threshold_db: f64,
    pub min_silence_ms: f64,
}

impl Default for SilenceParams {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            threshold_db: -40.0,
            min_silence_ms: 300.0,
        }
    }
}

fn frame_len(sample_rate: u32, frame_ms: f64) -> usize {
    ((frame_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
}

/// Frame energies in dBFS with frame length == hop. The last frame may be
/// partial. Digital silence is `-inf`.
pub fn frame_energies_db(samples: &[f32], frame: usize) -> Vec<f64> {
    samples
        .chunks(frame)
        .map(|c| {
            let ms = c.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / c.len() as f64;
            10.0 * ms.log10()
        })
        .collect()
}

/// Finds runs of frames whose RMS energy is below `threshold_db` and that
/// last at least `min_silence_ms`.
pub fn detect_silence(
    samples: &[f32],
    sample_rate: u32,
    params: &SilenceParams,
) -> Result<Vec<SilenceInterval>> {
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if !(params.frame_ms > 0.0) || params.min_silence_ms < params.frame_ms {
        return Err(Error::InvalidArgument(format!(
            "frame_ms must be > 0 and <= min_silence_ms (got {} / {})",
            params.frame_ms, params.min_silence_ms
        )));
    }
    let frame = frame_len(sample_rate, params.frame_ms);
    let min_len = (params.min_silence_ms * sample_rate as f64 / 1000.0).round() as usize;
    let energies = frame_energies_db(samples, frame);
    let sr = sample_rate as f64;

    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (j, &e) in energies.iter().chain(std::iter::once(&f64::INFINITY)).enumerate() {
        let silent = e < params.threshold_db;
        match (silent, run_start) {
            (true, None) => run_start = Some(j),
            (false, Some(s)) => {
                let start = s * frame;
                let end = (j * frame).min(samples.len());
                if end - start >= min_len {
                    out.push(SilenceInterval {
                        start_s: start as f64 / sr,
                        end_s: end as f64 / sr,
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    pub max_len_s: f64,
    /// Frame length used to score forced-cut candidates.
    pub frame_ms: f64,
    /// Half-width of the window searched around the ideal forced cut.
    pub forced_search_s: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            max_len_s: 7.0,
            frame_ms: 25.0,
            forced_search_s: 0.5,
        }
    }
}

/// One output piece of [`segment_utterance`], with its span in the parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub utterance: Utterance,
    pub start: usize,
    pub end: usize,
    /// The cut ending this segment was forced inside continuous speech.
    pub forced_cut: bool,
}

/// Splits an utterance into pieces no longer than `max_len_s`.
///
/// Cuts are placed greedily at the furthest silence midpoint that keeps the
/// current piece under the cap. Speech runs longer than the cap with no
/// usable silence are split into equal parts, each cut moved to the
/// lowest-energy frame near its ideal position. Syllables are shared out in
/// proportion to each piece's non-silent duration and the pieces are marked
/// `approximate`.
pub fn segment_utterance(
    utt: &Utterance,
    samples: &[f32],
    sample_rate: u32,
    silences: &[SilenceInterval],
    params: &SegmentParams,
) -> Result<Vec<Segment>> {
    if !(params.max_len_s > 0.0) {
        return Err(Error::InvalidArgument("max_len_s must be > 0".into()));
    }
    let n = samples.len();
    let max_len = (params.max_len_s * sample_rate as f64).floor() as usize;
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len_s below one sample".into()));
    }
    let spans: Vec<(usize, usize)> = silences
        .iter()
        .map(|s| {
            let (a, b) = s.to_samples(sample_rate);
            (a.min(n), b.min(n))
        })
        .collect();
    if n <= max_len {
        return Ok(vec![Segment {
            utterance: utt.clone(),
            start: 0,
            end: n,
            forced_cut: false,
        }]);
    }

    // Midpoints of silences strictly inside the audio.
    let mut candidates: Vec<usize> = spans
        .iter()
        .filter(|(a, b)| *a > 0 && *b < n)
        .map(|(a, b)| (a + b) / 2)
        .collect();
    candidates.sort_unstable();
    candidates.dedup();

    let frame = frame_len(sample_rate, params.frame_ms);
    let energies = frame_energies_db(samples, frame);
    let radius = (params.forced_search_s * sample_rate as f64).round() as usize;

    let mut cuts: Vec<(usize, bool)> = Vec::new();
    let mut start = 0usize;
    while n - start > max_len {
        let limit = start + max_len;
        if let Some(&c) = candidates.iter().rev().find(|&&c| c > start && c <= limit) {
            cuts.push((c, false));
            start = c;
            continue;
        }
        let region_end = candidates
            .iter()
            .copied()
            .find(|&c| c > limit)
            .unwrap_or(n);
        let len = region_end - start;
        let pieces = len.div_ceil(max_len);
        let ideal = start + len / pieces;
        let lo = (region_end.saturating_sub((pieces - 1) * max_len)).max(ideal.saturating_sub(radius));
        let hi = limit.min(ideal + radius);
        let cut = min_energy_cut(&energies, frame, lo, hi, ideal);
        warn!(
            id = %utt.id,
            at_s = cut as f64 / sample_rate as f64,
            "no silence within the length cap; forcing a cut inside speech"
        );
        cuts.push((cut, true));
        start = cut;
    }

    let mut bounds = vec![0usize];
    bounds.extend(cuts.iter().map(|(c, _)| *c));
    bounds.push(n);

    let speech: Vec<usize> = bounds
        .windows(2)
        .map(|w| (w[1] - w[0]) - overlap(&spans, w[0], w[1]))
        .collect();
    let total_speech: usize = speech.iter().sum();
    let n_syl = utt.syllables.len();
    let mut syl_bounds = vec![0usize];
    let mut acc = 0usize;
    for (k, s) in speech.iter().enumerate() {
        acc += s;
        let b = if k + 1 == speech.len() {
            n_syl
        } else if total_speech == 0 {
            0
        } else {
            ((n_syl as f64) * acc as f64 / total_speech as f64).round() as usize
        };
        syl_bounds.push(b.min(n_syl));
    }

    let stem = utt
        .wav_path
        .strip_suffix(".wav")
        .unwrap_or(&utt.wav_path)
        .to_string();
    let sr = sample_rate as f64;
    Ok(bounds
        .windows(2)
        .enumerate()
        .map(|(k, w)| Segment {
            utterance: Utterance {
                id: format!("{}_{:03}", utt.id, k),
                wav_path: format!("{stem}_{k:03}.wav"),
                lang: utt.lang,
                syllables: utt.syllables[syl_bounds[k]..syl_bounds[k + 1]].to_vec(),
                duration_s: (w[1] - w[0]) as f64 / sr,
                approximate: true,
            },
            start: w[0],
            end: w[1],
            forced_cut: cuts.get(k).is_some_and(|c| c.1),
        })
        .collect())
}

fn overlap(spans: &[(usize, usize)], a: usize, b: usize) -> usize {
    spans
        .iter()
        .map(|&(s, e)| e.min(b).saturating_sub(s.max(a)))
        .sum()
}

/// Lowest-energy frame whose centre lies in `[lo, hi]`; ties go to the frame
/// closest to `ideal`, then the earlier one. Falls back to `ideal`.
fn min_energy_cut(energies: &[f64], frame: usize, lo: usize, hi: usize, ideal: usize) -> usize {
    let mut best: Option<(f64, usize, usize)> = None;
    for (j, &e) in energies.iter().enumerate() {
        let centre = j * frame + frame / 2;
        if centre < lo || centre > hi {
            continue;
        }
        let dist = centre.abs_diff(ideal);
        let better = match best {
            None => true,
            Some((be, bd, _)) => e < be || (e == be && dist < bd),
        };
        if better {
            best = Some((e, dist, centre));
        }
    }
    best.map_or(ideal, |b| b.2)
}

/// Partitions utterances by letter rate: kept iff
/// `min_rate <= tokens / duration <= max_rate`.
pub fn filter_by_rate(
    manifest: &[Utterance],
    min_rate: f64,
    max_rate: f64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for u in manifest {
        if !(u.duration_s > 0.0) {
            return Err(Error::NonPositiveDuration {
                id: u.id.clone(),
                duration_s: u.duration_s,
            });
        }
        let rate = u.token_count() as f64 / u.duration_s;
        if (min_rate..=max_rate).contains(&rate) {
            kept.push(u.clone());
        } else {
            dropped.push(u.clone());
        }
    }
    Ok((kept, dropped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthHistogram {
    pub bin_width_s: f64,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl LengthHistogram {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_start_s", "count"])?;
        for (k, c) in self.counts.iter().enumerate() {
            w.write_record([format!("{}", k as f64 * self.bin_width_s), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn length_histogram(manifest: &[Utterance], bin_width_s: f64) -> Result<LengthHistogram> {
    if !(bin_width_s > 0.0) {
        return Err(Error::InvalidArgument("bin_width_s must be > 0".into()));
    }
    let mut counts: Vec<usize> = Vec::new();
    for u in manifest {
        let k = (u.duration_s / bin_width_s).floor().max(0.0) as usize;
        if counts.len() <= k {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
    }
    Ok(LengthHistogram {
        bin_width_s,
        counts,
        total: manifest.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: u32 = 16000;

    fn tone(secs: f64, amp: f32) -> Vec<f32> {
        let n = (secs * SR as f64) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / SR as f32).sin())
            .collect()
    }

    fn utt(id: &str, dur: f64, syl: &[&str]) -> Utterance {
        Utterance {
            id: id.into(),
            wav_path: format!("{id}.wav"),
            lang: Lang::Mand,
            syllables: syl.iter().map(|s| s.to_string()).collect(),
            duration_s: dur,
            approximate: false,
        }
    }

    #[test]
    fn all_zero_audio_is_one_silence() {
        let s = vec![0.0f32; 5 * SR as usize];
        let iv = detect_silence(&s, SR, &SilenceParams::default()).unwrap();
        assert_eq!(iv, vec![SilenceInterval { start_s: 0.0, end_s: 5.0 }]);
    }

    #[test]
    fn loud_tone_has_no_silence() {
        let s = tone(1.0, 0.5);
        assert!(detect_silence(&s, SR, &SilenceParams::default()).unwrap().is_empty());
    }

    #[test]
    fn empty_audio_errors() {
        assert!(matches!(
            detect_silence(&[], SR, &SilenceParams::default()),
            Err(Error::EmptyAudio)
        ));
    }

    #[test]
    fn gap_between_tones_matches_framewise_scan() {
        let mut s = tone(2.0, 0.5);
        s.extend(std::iter::repeat_n(0.0, SR as usize));
        s.extend(tone(2.0, 0.5));
        let p = SilenceParams::default();
        let iv = detect_silence(&s, SR, &p).unwrap();

        // Oracle: naive per-frame RMS scan.
        let frame = 400;
        let silent: Vec<bool> = s
            .chunks(frame)
            .map(|c| (c.iter().map(|x| x * x).sum::<f32>() / c.len() as f32).sqrt() < 0.01)
            .collect();
        let first = silent.iter().position(|&b| b).unwrap();
        let last = silent.iter().rposition(|&b| b).unwrap();
        assert_eq!(iv.len(), 1);
        assert!((iv[0].start_s - (first * frame) as f64 / 16000.0).abs() < 1e-9);
        assert!((iv[0].end_s - ((last + 1) * frame) as f64 / 16000.0).abs() < 1e-9);
        assert!((iv[0].start_s - 2.0).abs() <= 0.025);
        assert!((iv[0].end_s - 3.0).abs() <= 0.025);
    }

    #[test]
    fn short_utterance_is_untouched() {
        let u = utt("a", 3.0, &["ba1"]);
        let s = tone(3.0, 0.5);
        let segs = segment_utterance(&u, &s, SR, &[], &SegmentParams::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].utterance, u);
    }

    #[test]
    fn greedy_packing_at_silence_midpoints() {
        let s = tone(20.0, 0.5);
        let u = utt("long", 20.0, &["ba1"; 20]);
        let sil = [
            SilenceInterval { start_s: 5.8, end_s: 6.2 },
            SilenceInterval { start_s: 12.8, end_s: 13.2 },
        ];
        let segs = segment_utterance(&u, &s, SR, &sil, &SegmentParams::default()).unwrap();
        let durs: Vec<f64> = segs.iter().map(|s| s.utterance.duration_s).collect();
        assert_eq!(durs, vec![6.0, 7.0, 7.0]);
        assert!(segs.iter().all(|s| !s.forced_cut && s.utterance.approximate));
        let n: usize = segs.iter().map(|s| s.utterance.syllables.len()).sum();
        assert_eq!(n, 20);
    }

    #[test]
    fn forced_cut_at_min_energy_frame_near_middle() {
        let mut s = tone(9.0, 0.5);
        // Dip in energy at 4.3 s, inside the +-0.5 s search window.
        for x in &mut s[(4.3 * 16000.0) as usize..(4.3 * 16000.0) as usize + 400] {
            *x *= 0.1;
        }
        let u = utt("c", 9.0, &["ba1"; 9]);
        let segs = segment_utterance(&u, &s, SR, &[], &SegmentParams::default()).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs[0].forced_cut);

        // Exhaustive oracle over frames in the window.
        let e = frame_energies_db(&s, 400);
        let (lo, hi, ideal) = (4.0 * 16000.0, 5.0 * 16000.0, 4.5 * 16000.0);
        let best = (0..e.len())
            .filter(|j| {
                let c = (j * 400 + 200) as f64;
                c >= lo && c <= hi
            })
            .min_by(|&a, &b| {
                e[a].partial_cmp(&e[b]).unwrap().then(
                    ((a * 400 + 200) as f64 - ideal)
                        .abs()
                        .partial_cmp(&((b * 400 + 200) as f64 - ideal).abs())
                        .unwrap(),
                )
            })
            .unwrap();
        assert_eq!(segs[0].end, best * 400 + 200);
        assert!(segs.iter().all(|s| s.utterance.duration_s <= 7.0));
    }

    #[test]
    fn rate_filter_examples() {
        let fast = utt("f", 2.0, &["abcdefghij"; 4]);
        assert_eq!(fast.token_count(), 40);
        let (k, d) = filter_by_rate(&[fast], 2.0, 12.0).unwrap();
        assert!(k.is_empty() && d.len() == 1);

        let ok = utt("o", 5.0, &["abcd1"; 5]);
        let (k, d) = filter_by_rate(&[ok], 2.0, 12.0).unwrap();
        assert!(k.len() == 1 && d.is_empty());

        let (k, d) = filter_by_rate(&[], 2.0, 12.0).unwrap();
        assert!(k.is_empty() && d.is_empty());

        let bad = utt("zero", 0.0, &["a"]);
        match filter_by_rate(&[bad], 2.0, 12.0) {
            Err(Error::NonPositiveDuration { id, .. }) => assert_eq!(id, "zero"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn histogram_examples() {
        let m = vec![utt("a", 0.5, &[]), utt("b", 1.5, &[]), utt("c", 1.7, &[])];
        let h = length_histogram(&m, 1.0).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.total, 3);
        let h = length_histogram(&[], 1.0).unwrap();
        assert!(h.counts.is_empty());
        assert_eq!(h.total, 0);
    }

    #[test]
    fn manifest_line_format() {
        let u = utt("x1", 1.25, &["ba1", "da4"]);
        let line = serde_json::to_string(&u).unwrap();
        assert_eq!(
            line,
            r#"{"id":"x1","wav":"x1.wav","lang":"mand","syllables":"ba1 da4","dur":1.25}"#
        );
        let back: Utterance = serde_json::from_str(&line).unwrap();
        assert_eq!(back, u);
    }
}
