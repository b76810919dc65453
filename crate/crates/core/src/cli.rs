//! Command-line front end. Every artifact is written under the work
//! directory (`--workdir`, else `LOWRES_TTS_WORKDIR`, else `./work`); inputs
//! are never modified.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::acoustic::AMConfig;
use crate::corpus_prep::{
    detect_silence, filter_by_rate, length_histogram, segment_utterance, write_manifest,
    SegmentParams, SilenceParams, Utterance,
};
use crate::eval::{synth_report, vocode, SynthesisFrontend, VocoderChoice};
use crate::features::{load_wav, mel_spectrogram, save_wav, AudioConfig};
use crate::frontend::{build_vocab, encode_transcript, Lang, TagMode, Vocabulary};
use crate::toycorpus::{gen_toycorpus, ToyCorpusSpec};
use crate::transfer::{
    finetune, load_checkpoint, load_corpora, save_checkpoint, Checkpoint, Conditioning, FinetuneOptions, ModelKind,
    Stage, TrainPlan, TrainSetup,
};
use crate::vocoder::{upsample_conditioning, VocoderConfig, WaveNet};
use crate::Error;

/// Everything a pipeline run needs besides its inputs; `--config` loads it
/// from JSON, missing fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub audio: AudioConfig,
    pub acoustic: AMConfig,
    pub vocoder: VocoderConfig,
    pub silence: SilenceParams,
    pub segment: SegmentParams,
    /// Letter-rate bounds (tokens per second) for `prep`.
    pub min_rate: f64,
    pub max_rate: f64,
    pub histogram_bin_s: f64,
    pub tag_mode: TagMode,
    pub insert_pauses: bool,
    pub am_batch_size: usize,
    pub voc_batch_size: usize,
    pub voc_window: usize,
    pub griffin_lim_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            audio: AudioConfig::default(),
            acoustic: AMConfig::default(),
            vocoder: VocoderConfig::default(),
            silence: SilenceParams::default(),
            segment: SegmentParams::default(),
            min_rate: 1.0,
            max_rate: 30.0,
            histogram_bin_s: 0.5,
            tag_mode: TagMode::Tagged,
            insert_pauses: false,
            am_batch_size: 4,
            voc_batch_size: 2,
            voc_window: 2000,
            griffin_lim_iters: 60,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lowres-tts", version, about = "Low-resource text-to-speech pipeline")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// PipelineConfig JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for prep, features and report.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory (default: $LOWRES_TTS_WORKDIR or ./work).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment long recordings, filter by letter rate, write a length histogram.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build the token inventory over one or more manifests.
    Vocab {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Extract log-mel features for every utterance.
    Features {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the average acoustic model.
    TrainAm(TrainArgs),
    /// Fine-tune an acoustic model on a target corpus.
    FinetuneAm(TrainArgs),
    /// Write predicted mels (teacher-forced, or free-running with --free).
    SynthMel {
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        free: bool,
    },
    /// Train the average vocoder.
    TrainVoc(TrainArgs),
    /// Fine-tune a vocoder on a target corpus.
    FinetuneVoc(TrainArgs),
    /// Synthesize a transcript to a WAV file.
    Tts {
        #[arg(long)]
        text: String,
        #[arg(long, value_parser = parse_lang)]
        lang: Lang,
        #[arg(long)]
        am: PathBuf,
        #[arg(long, value_enum, default_value_t = VocoderKind::Griffinlim)]
        vocoder: VocoderKind,
        #[arg(long)]
        voc: Option<PathBuf>,
        #[arg(long, default_value = "tts.wav")]
        out: PathBuf,
    },
    /// Synthesize a whole manifest and write an evaluation report.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        am: PathBuf,
        #[arg(long, value_enum, default_value_t = VocoderKind::Griffinlim)]
        vocoder: VocoderKind,
        #[arg(long)]
        voc: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Generate the synthetic tone-burst corpus.
    GenToycorpus {
        #[arg(long, default_value_t = 10)]
        n_utts: usize,
        #[arg(long, default_value_t = 0.0)]
        shdia_fraction: f64,
        #[arg(long)]
        long_form: bool,
        #[arg(long, default_value = "toy")]
        id_prefix: String,
        #[arg(long, default_value = "toycorpus")]
        out: PathBuf,
    },
    /// Measure vocoder generation speed.
    Bench {
        #[arg(long)]
        voc: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TrainPlan JSON; overrides the plan flags below.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: u64,
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint to fine-tune.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Acoustic checkpoint providing teacher-forced vocoder conditioning.
    #[arg(long)]
    am: Option<PathBuf>,
    /// Token inventory (default: <workdir>/vocab.txt).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Keep second-language utterances in average training.
    #[arg(long)]
    include_target_lang: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VocoderKind {
    Wavenet,
    Griffinlim,
}

fn parse_lang(s: &str) -> Result<Lang, String> {
    s.parse::<Lang>().map_err(|e| e.to_string())
}

struct Ctx {
    seed: u64,
    jobs: usize,
    workdir: PathBuf,
    config: PipelineConfig,
}

impl Ctx {
    fn out(&self, p: &Path) -> anyhow::Result<PathBuf> {
        let path = if p.is_absolute() { p.to_path_buf() } else { self.workdir.join(p) };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn vocab(&self, path: Option<&PathBuf>) -> anyhow::Result<Vocabulary> {
        let p = path.cloned().unwrap_or_else(|| self.workdir.join("vocab.txt"));
        Vocabulary::load(&p).with_context(|| format!("loading vocabulary {} (run `vocab` first)", p.display()))
    }
}

/// Exit code for an error: 1 for problems with the user's inputs, 2 for
/// internal failures.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Diverged(_) | Error::Shape(_) | Error::NonFinite(_) => 2,
                Error::InUtterance { source, .. } if matches!(**source, Error::Diverged(_) | Error::Shape(_)) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
    }
    2
}

/// Runs one command; returns the process exit code.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => {
            let f = std::fs::File::open(p).with_context(|| format!("opening config {}", p.display()))?;
            serde_json::from_reader(f).map_err(Error::from).context("parsing config")?
        }
        None => PipelineConfig::default(),
    };
    let workdir = cli
        .workdir
        .clone()
        .or_else(|| std::env::var_os("LOWRES_TTS_WORKDIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("work"));
    std::fs::create_dir_all(&workdir).with_context(|| format!("creating {}", workdir.display()))?;
    let ctx = Ctx {
        seed: cli.seed,
        jobs: cli.jobs.max(1),
        workdir,
        config,
    };
    match cli.command {
        Command::Prep { manifest } => prep(&ctx, &manifest),
        Command::Vocab { manifests } => vocab(&ctx, &manifests),
        Command::Features { manifest } => features(&ctx, &manifest),
        Command::TrainAm(a) => train(&ctx, &a, ModelKind::Acoustic, Stage::Average),
        Command::FinetuneAm(a) => train(&ctx, &a, ModelKind::Acoustic, Stage::Finetune),
        Command::TrainVoc(a) => train(&ctx, &a, ModelKind::Vocoder, Stage::Average),
        Command::FinetuneVoc(a) => train(&ctx, &a, ModelKind::Vocoder, Stage::Finetune),
        Command::SynthMel { am, manifest, free } => synth_mel(&ctx, &am, &manifest, free),
        Command::Tts {
            text,
            lang,
            am,
            vocoder,
            voc,
            out,
        } => tts(&ctx, &text, lang, &am, vocoder, voc.as_deref(), &out),
        Command::Report {
            manifest,
            am,
            vocoder,
            voc,
            out,
        } => report(&ctx, &manifest, &am, vocoder, voc.as_deref(), &out),
        Command::GenToycorpus {
            n_utts,
            shdia_fraction,
            long_form,
            id_prefix,
            out,
        } => {
            let spec = ToyCorpusSpec {
                n_utts,
                shdia_fraction,
                seed: ctx.seed,
                long_form,
                id_prefix,
                ..Default::default()
            };
            let dir = ctx.out(&out)?;
            let utts = gen_toycorpus(&spec, &dir)?;
            info!(utterances = utts.len(), dir = %dir.display(), "toy corpus written");
            Ok(())
        }
        Command::Bench { voc, seconds } => bench(&ctx, voc.as_deref(), seconds),
    }
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn prep(ctx: &Ctx, manifest: &Path) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let utts = load_corpora(&[manifest.to_path_buf()])?;
    let out_dir = ctx.out(Path::new("prep/wavs/x"))?.parent().expect("has parent").parent().expect("prep").to_path_buf();
    let sr = cfg.audio.sample_rate;
    let results = parallel_map(&utts, ctx.jobs, |u| -> crate::Result<Vec<Utterance>> {
        let samples = load_wav(&u.wav_path, sr).map_err(|e| Error::in_utterance(&u.id, e))?;
        let silences = detect_silence(&samples, sr, &cfg.silence).map_err(|e| Error::in_utterance(&u.id, e))?;
        let segs = segment_utterance(u, &samples, sr, &silences, &cfg.segment)?;
        let mut out = Vec::with_capacity(segs.len());
        for seg in segs {
            let rel = format!("wavs/{}.wav", seg.utterance.id);
            save_wav(out_dir.join(&rel), &samples[seg.start..seg.end], sr)?;
            out.push(Utterance {
                wav_path: rel,
                ..seg.utterance
            });
        }
        Ok(out)
    });
    let mut segments = Vec::new();
    for r in results {
        segments.extend(r?);
    }
    let (kept, dropped) = filter_by_rate(&segments, cfg.min_rate, cfg.max_rate)?;
    write_manifest(out_dir.join("manifest.jsonl"), &kept)?;
    write_manifest(out_dir.join("dropped.jsonl"), &dropped)?;
    length_histogram(&kept, cfg.histogram_bin_s)?.write_csv(out_dir.join("length_histogram.csv"))?;
    info!(input = utts.len(), segments = segments.len(), kept = kept.len(), "prep done");
    Ok(())
}

fn vocab(ctx: &Ctx, manifests: &[PathBuf]) -> anyhow::Result<()> {
    let utts = load_corpora(manifests)?;
    let v = build_vocab(&utts, ctx.config.tag_mode)?;
    v.save(ctx.out(Path::new("vocab.txt"))?)?;
    info!(tokens = v.len(), "vocabulary written");
    Ok(())
}

fn features(ctx: &Ctx, manifest: &Path) -> anyhow::Result<()> {
    let utts = load_corpora(&[manifest.to_path_buf()])?;
    let dir = ctx.out(Path::new("features/x"))?.parent().expect("has parent").to_path_buf();
    let audio = &ctx.config.audio;
    let results = parallel_map(&utts, ctx.jobs, |u| -> crate::Result<()> {
        let samples = load_wav(&u.wav_path, audio.sample_rate).map_err(|e| Error::in_utterance(&u.id, e))?;
        let mel = mel_spectrogram(&samples, audio).map_err(|e| Error::in_utterance(&u.id, e))?;
        mel.save(dir.join(format!("{}.mel", u.id)))
    });
    for r in results {
        r?;
    }
    info!(utterances = utts.len(), "features written");
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs, kind: ModelKind, stage: Stage) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut plan = match &a.plan {
        Some(p) => TrainPlan::load(p).with_context(|| format!("loading plan {}", p.display()))?,
        None => TrainPlan {
            stage,
            corpora: a.manifests.clone(),
            steps: a.steps,
            learning_rate: a.lr,
            seed: ctx.seed,
            init_from: a.init.clone(),
            batch_size: match kind {
                ModelKind::Acoustic => cfg.am_batch_size,
                ModelKind::Vocoder => cfg.voc_batch_size,
            },
            languages: None,
        },
    };
    if plan.stage != stage {
        bail!(Error::InvalidArgument(format!("plan stage {:?} does not match this command", plan.stage)));
    }
    // The target language stays out of average training unless requested.
    if stage == Stage::Average && !a.include_target_lang && plan.languages.is_none() {
        plan.languages = Some(vec![Lang::Mand]);
    }
    plan.validate()?;
    let conditioning = match &a.am {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            let (model, vocab) = ck.acoustic_model()?;
            Conditioning::TeacherForced {
                model,
                vocab,
                tag_mode: ck.meta.tag_mode.unwrap_or(cfg.tag_mode),
            }
        }
        None => Conditioning::GroundTruth,
    };
    let outcome = match stage {
        Stage::Average => {
            let setup = match kind {
                ModelKind::Acoustic => TrainSetup::Acoustic {
                    config: cfg.acoustic.clone(),
                    vocab: ctx.vocab(a.vocab.as_ref())?,
                    tag_mode: cfg.tag_mode,
                    audio: cfg.audio.clone(),
                },
                ModelKind::Vocoder => TrainSetup::Vocoder {
                    config: cfg.vocoder.clone(),
                    conditioning,
                    audio: cfg.audio.clone(),
                    window: cfg.voc_window,
                },
            };
            crate::transfer::train_average(&plan, &setup)?
        }
        _ => {
            let opts = FinetuneOptions {
                tag_mode: cfg.tag_mode,
                audio: cfg.audio.clone(),
                conditioning,
                window: cfg.voc_window,
            };
            finetune(&plan, kind, &opts)?
        }
    };
    let default_name = format!(
        "{}_{}.ckpt",
        if kind == ModelKind::Acoustic { "am" } else { "voc" },
        if stage == Stage::Average { "average" } else { "finetune" }
    );
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new(&default_name)))?;
    save_checkpoint(&outcome.checkpoint, &out)?;
    let mut w = csv::Writer::from_path(out.with_extension("loss.csv")).map_err(Error::from)?;
    w.write_record(["step", "loss"]).map_err(Error::from)?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.6}")]).map_err(Error::from)?;
    }
    w.flush()?;
    info!(checkpoint = %out.display(), final_loss = ?outcome.losses.last(), "training done");
    Ok(())
}

fn load_am(path: &Path) -> anyhow::Result<(crate::acoustic::AcousticModel, Vocabulary, Option<TagMode>)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let (m, v) = ck.acoustic_model()?;
    Ok((m, v, ck.meta.tag_mode))
}

fn vocoder_choice(ctx: &Ctx, kind: VocoderKind, voc: Option<&Path>) -> anyhow::Result<VocoderChoice> {
    Ok(match kind {
        VocoderKind::Griffinlim => VocoderChoice::GriffinLim {
            iterations: ctx.config.griffin_lim_iters,
        },
        VocoderKind::Wavenet => {
            let Some(p) = voc else {
                bail!(Error::InvalidArgument("--vocoder wavenet needs --voc <checkpoint>".into()));
            };
            let ck: Checkpoint = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            VocoderChoice::WaveNet {
                model: ck.vocoder_model()?,
                seed: ctx.seed,
            }
        }
    })
}

fn synth_mel(ctx: &Ctx, am: &Path, manifest: &Path, free: bool) -> anyhow::Result<()> {
    let (model, vocab, tag) = load_am(am)?;
    let tag = tag.unwrap_or(ctx.config.tag_mode);
    let audio = &ctx.config.audio;
    let dir = ctx.out(Path::new("mels/x"))?.parent().expect("has parent").to_path_buf();
    for u in load_corpora(&[manifest.to_path_buf()])? {
        let toks = encode_transcript(&u.syllables, tag.effective_lang(u.lang), &vocab, ctx.config.insert_pauses)
            .map_err(|e| Error::in_utterance(&u.id, e))?;
        let mel = if free {
            let s = model.synthesize_mel(&toks, audio.hop_s())?;
            if !s.stopped_naturally {
                warn!(utt = %u.id, "decoder hit its step limit");
            }
            s.mel
        } else {
            let gt = mel_spectrogram(&load_wav(&u.wav_path, audio.sample_rate)?, audio)?;
            model.teacher_forced_predict(&toks, &gt)?
        };
        mel.save(dir.join(format!("{}.mel", u.id)))?;
    }
    Ok(())
}

fn tts(
    ctx: &Ctx,
    text: &str,
    lang: Lang,
    am: &Path,
    kind: VocoderKind,
    voc: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let (model, vocab, tag) = load_am(am)?;
    let tag = tag.unwrap_or(ctx.config.tag_mode);
    let syllables: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    if syllables.is_empty() {
        bail!(Error::InvalidArgument("empty --text".into()));
    }
    let toks = encode_transcript(&syllables, tag.effective_lang(lang), &vocab, ctx.config.insert_pauses)?;
    let audio = &ctx.config.audio;
    let syn = model.synthesize_mel(&toks, audio.hop_s())?;
    if !syn.stopped_naturally {
        warn!("decoder hit its step limit without a stop decision");
    }
    let choice = vocoder_choice(ctx, kind, voc)?;
    let wave = vocode(&choice, &syn.mel, audio, 0)?;
    let path = ctx.out(out)?;
    save_wav(&path, &wave, audio.sample_rate)?;
    info!(path = %path.display(), frames = syn.mel.n_frames(), "wrote waveform");
    Ok(())
}

fn report(
    ctx: &Ctx,
    manifest: &Path,
    am: &Path,
    kind: VocoderKind,
    voc: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let (model, vocab, tag) = load_am(am)?;
    let fe = SynthesisFrontend {
        model: &model,
        vocab: &vocab,
        tag_mode: tag.unwrap_or(ctx.config.tag_mode),
    };
    let choice = vocoder_choice(ctx, kind, voc)?;
    let utts = load_corpora(&[manifest.to_path_buf()])?;
    let dir = ctx.out(&out.join("x"))?.parent().expect("has parent").to_path_buf();
    let rep = synth_report(&utts, &fe, &choice, &ctx.config.audio, &dir, ctx.jobs)?;
    info!(?rep.aggregate, "report written");
    Ok(())
}

fn bench(ctx: &Ctx, voc: Option<&Path>, seconds: f64) -> anyhow::Result<()> {
    let model = match voc {
        Some(p) => load_checkpoint(p)?.vocoder_model()?,
        None => WaveNet::new(ctx.config.vocoder.clone(), ctx.seed)?,
    };
    let audio = &ctx.config.audio;
    let frames = ((seconds * audio.sample_rate as f64) / audio.hop as f64).ceil().max(1.0) as usize;
    let mel = crate::features::MelSpectrogram {
        frames: ndarray::Array2::from_elem((frames, model.config.conditioning_channels), audio.log_floor.ln()),
        hop_s: audio.hop_s(),
    };
    let track = upsample_conditioning(&mel, audio.hop);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let t = Instant::now();
    let wave = model.generate(&track, &mut rng)?;
    let elapsed = t.elapsed().as_secs_f64();
    let sps = wave.len() as f64 / elapsed;
    let rtf = elapsed / (wave.len() as f64 / audio.sample_rate as f64);
    let path = ctx.out(Path::new("bench.csv"))?;
    std::fs::write(&path, format!("samples_per_second,rtf\n{sps:.1},{rtf:.3}\n"))?;
    println!("samples_per_second={sps:.1} rtf={rtf:.3}");
    Ok(())
}
