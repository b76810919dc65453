use lowres_tts::acoustic::Alignments;
use lowres_tts::corpus_prep::{
    detect_silence, filter_by_rate, segment_utterance, SegmentParams, SilenceParams, Utterance,
};
use lowres_tts::eval::{alignment_diagnostics, mcd};
use lowres_tts::features::{dequantize, mel_spectrogram, quantize_16bit, AudioConfig, MelSpectrogram};
use lowres_tts::frontend::{
    build_vocab, decode_transcript, encode_transcript, Lang, LetterToken, TagMode, TokenLang,
};
use lowres_tts::vocoder::mol::{grid_point, logistic_cdf, GRID_POINTS};
use lowres_tts::vocoder::{mol_log_prob, sample_mol, upsample_conditioning, MixtureOfLogisticsParams};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 16000;

fn syllable() -> impl Strategy<Value = String> {
    ("[a-z]{1,5}", proptest::option::of(0u8..=5)).prop_map(|(s, t)| match t {
        Some(t) => format!("{s}{t}"),
        None => s,
    })
}

fn utterance(id: &str, lang: Lang, syllables: Vec<String>, duration_s: f64) -> Utterance {
    Utterance {
        id: id.to_string(),
        wav_path: format!("{id}.wav"),
        lang,
        syllables,
        duration_s,
        approximate: false,
    }
}

fn mel(frames: Array2<f64>) -> MelSpectrogram {
    MelSpectrogram { frames, hop_s: 0.0125 }
}

fn random_mel(seed: u64, t: usize) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mel(Array2::from_shape_simple_fn((t, 80), || rng.random_range(-11.5..2.0)))
}

/// Blocks of noise and digital silence, `(speech, seconds)` each.
fn block_audio(blocks: &[(bool, f64)], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &(speech, secs) in blocks {
        let n = (secs * SR as f64) as usize;
        out.extend((0..n).map(|_| if speech { rng.random_range(-0.3f32..0.3) } else { 0.0 }));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mol_mass_sums_to_one(
        comps in proptest::collection::vec((-3.0f64..3.0, -1.2f64..1.2, -7.0f64..0.0), 1..4)
    ) {
        let params = MixtureOfLogisticsParams {
            logit_weights: comps.iter().map(|c| c.0).collect(),
            means: comps.iter().map(|c| c.1).collect(),
            log_scales: comps.iter().map(|c| c.2).collect(),
        };
        let total: f64 = (0..GRID_POINTS)
            .map(|k| mol_log_prob(grid_point(k), &params).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "total mass {total}");
    }

    #[test]
    fn logistic_sampling_matches_cdf(mean in -0.5f64..0.5, log_scale in -5.0f64..-2.0, seed in 0u64..1000) {
        // One-sample Kolmogorov-Smirnov test at alpha = 0.001.
        let params = MixtureOfLogisticsParams {
            logit_weights: vec![0.0],
            means: vec![mean],
            log_scales: vec![log_scale],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_mol(&params, &mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let d = xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
            let f = logistic_cdf(x, mean, log_scale);
            d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs())
        });
        prop_assert!(d < 1.95 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn transcript_round_trip(
        syllables in proptest::collection::vec(syllable(), 1..12),
        shdia in any::<bool>(),
        pauses in any::<bool>(),
    ) {
        let lang = if shdia { Lang::Shdia } else { Lang::Mand };
        let vocab = build_vocab(&[utterance("u", lang, syllables.clone(), 1.0)], TagMode::Tagged).unwrap();
        let seq = encode_transcript(&syllables, lang, &vocab, pauses).unwrap();
        prop_assert!(seq.ids.iter().all(|&id| id < vocab.len()));
        prop_assert_eq!(seq.ids[0], vocab.special_id("BOS"));
        prop_assert_eq!(*seq.ids.last().unwrap(), vocab.special_id("EOS"));
        // Syllables without a tone only regroup at a boundary token.
        if pauses || syllables.iter().all(|s| s.ends_with(|c: char| c.is_ascii_digit())) {
            prop_assert_eq!(decode_transcript(&seq, &vocab).unwrap(), syllables);
        }
    }

    #[test]
    fn tagged_languages_never_share_ids(syllables in proptest::collection::vec(syllable(), 1..10)) {
        let vocab = build_vocab(
            &[
                utterance("a", Lang::Mand, syllables.clone(), 1.0),
                utterance("b", Lang::Shdia, syllables.clone(), 1.0),
            ],
            TagMode::Tagged,
        )
        .unwrap();
        for tok in vocab.tokens().iter().filter(|t| t.lang == TokenLang::Mand) {
            let other = LetterToken { lang: TokenLang::Shdia, symbol: tok.symbol.clone() };
            prop_assert_ne!(vocab.id(tok), vocab.id(&other));
            prop_assert!(vocab.id(&other).is_some());
        }
    }

    #[test]
    fn vocab_ignores_manifest_order(
        utts in proptest::collection::vec((proptest::collection::vec(syllable(), 1..5), any::<bool>()), 1..6),
        seed in any::<u64>(),
    ) {
        let manifest: Vec<Utterance> = utts
            .iter()
            .enumerate()
            .map(|(i, (s, shdia))| {
                utterance(&format!("u{i}"), if *shdia { Lang::Shdia } else { Lang::Mand }, s.clone(), 1.0)
            })
            .collect();
        let mut shuffled = manifest.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for mode in [TagMode::Tagged, TagMode::Shared] {
            prop_assert_eq!(build_vocab(&manifest, mode).unwrap(), build_vocab(&shuffled, mode).unwrap());
        }
    }

    #[test]
    fn quantization_within_one_lsb(x in -1.0f64..1.0) {
        let back = dequantize(quantize_16bit(x).unwrap());
        prop_assert!((back - x).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn mel_frame_count_formula(extra in 0usize..4000) {
        let cfg = AudioConfig::default();
        let n = cfg.win + extra;
        let audio: Vec<f32> = (0..n).map(|i| (i as f32 * 0.05).sin() * 0.1).collect();
        let m = mel_spectrogram(&audio, &cfg).unwrap();
        prop_assert_eq!(m.n_frames(), 1 + (n - cfg.win) / cfg.hop);
        prop_assert!(m.frames.iter().all(|v| v.is_finite() && *v >= cfg.log_floor.ln() - 1e-12));
    }

    #[test]
    fn mel_is_scale_covariant(seed in any::<u64>(), amp in 0.01f32..0.4) {
        let cfg = AudioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio: Vec<f32> = (0..4000).map(|_| rng.random_range(-amp..amp)).collect();
        let doubled: Vec<f32> = audio.iter().map(|x| 2.0 * x).collect();
        let a = mel_spectrogram(&audio, &cfg).unwrap();
        let b = mel_spectrogram(&doubled, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            if *x > floor + 1e-9 {
                prop_assert!((y - x - 2.0 * 2f64.ln()).abs() < 1e-6, "{x} -> {y}");
            }
        }
    }

    #[test]
    fn mcd_is_symmetric_and_zero_on_identity(s1 in any::<u64>(), s2 in any::<u64>(), t in 1usize..20) {
        let a = random_mel(s1, t);
        let b = random_mel(s2, t);
        prop_assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        let ab = mcd(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mcd(&b, &a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn mcd_grows_with_perturbation(seed in any::<u64>(), t in 1usize..10, bin in 0usize..80, eps in 1e-3f64..2.0) {
        let a = random_mel(seed, t);
        let bump = |k: f64| {
            let mut m = a.clone();
            m.frames[[0, bin]] += k * eps;
            m
        };
        prop_assert!(mcd(&a, &bump(2.0)).unwrap() >= mcd(&a, &bump(1.0)).unwrap());
    }

    #[test]
    fn alignment_scores_survive_renormalization(
        seed in any::<u64>(), t in 1usize..30, l in 1usize..20, scale in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_simple_fn((t, l), || rng.random_range(0.0..1.0) + 1e-3);
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let mut scaled = &m * scale;
        for mut row in scaled.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let a = alignment_diagnostics(&Alignments(m));
        let b = alignment_diagnostics(&Alignments(scaled));
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a.monotonicity) && (0.0..=1.0).contains(&a.coverage));
    }

    #[test]
    fn rate_filter_partitions(
        rows in proptest::collection::vec((proptest::collection::vec(syllable(), 1..20), 0.2f64..10.0), 0..20),
        lo in 0.0f64..5.0, width in 0.0f64..20.0,
    ) {
        let manifest: Vec<Utterance> = rows
            .iter()
            .enumerate()
            .map(|(i, (s, d))| utterance(&format!("u{i}"), Lang::Mand, s.clone(), *d))
            .collect();
        let (kept, dropped) = filter_by_rate(&manifest, lo, lo + width).unwrap();
        prop_assert_eq!(kept.len() + dropped.len(), manifest.len());
        for u in &kept {
            let r = u.token_count() as f64 / u.duration_s;
            prop_assert!(r >= lo && r <= lo + width);
        }
    }

    #[test]
    fn upsampled_length_is_frames_times_hop(t in 1usize..50, hop in 1usize..300) {
        let track = upsample_conditioning(&mel(Array2::zeros((t, 4))), hop);
        prop_assert_eq!(track.len(), t * hop);
        prop_assert_eq!(track.frame_index(t * hop - 1), t - 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn segmentation_respects_cap_and_keeps_speech(
        blocks in proptest::collection::vec((any::<bool>(), 0.2f64..6.0), 1..8),
        seed in any::<u64>(),
    ) {
        let audio = block_audio(&blocks, seed);
        prop_assume!(!audio.is_empty());
        let duration = audio.len() as f64 / SR as f64;
        let silences = detect_silence(&audio, SR, &SilenceParams::default()).unwrap();
        let silent: f64 = silences.iter().map(|s| s.duration_s()).sum();
        let syllables: Vec<String> = (0..30).map(|i| format!("ba{}", i % 5)).collect();
        let utt = utterance("long", Lang::Mand, syllables, duration);
        let segs = segment_utterance(&utt, &audio, SR, &silences, &SegmentParams::default()).unwrap();
        let lens: Vec<f64> = segs.iter().map(|s| (s.end - s.start) as f64 / SR as f64).collect();
        let total: f64 = lens.iter().sum();
        prop_assert!(lens.iter().all(|&l| l <= 7.0), "{lens:?}");
        prop_assert!(total <= duration + 1e-9);
        prop_assert!(total >= duration - silent - 1e-9, "total {total}, duration {duration}, silence {silent}");
    }

    #[test]
    fn silence_detection_follows_gain(
        blocks in proptest::collection::vec((any::<bool>(), 0.2f64..2.0), 1..6),
        seed in any::<u64>(),
    ) {
        let audio = block_audio(&blocks, seed);
        let halved: Vec<f32> = audio.iter().map(|x| 0.5 * x).collect();
        let p = SilenceParams::default();
        let shifted = SilenceParams { threshold_db: p.threshold_db - 20.0 * 2f64.log10(), ..p };
        let a = detect_silence(&audio, SR, &p).unwrap();
        let b = detect_silence(&halved, SR, &shifted).unwrap();
        prop_assert_eq!(a.len(), b.len());
        let frame = p.frame_ms / 1000.0;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.start_s - y.start_s).abs() <= frame + 1e-9);
            prop_assert!((x.end_s - y.end_s).abs() <= frame + 1e-9);
        }
    }
}
