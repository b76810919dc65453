//! Average-speaker workflow: pool corpora, train an average acoustic model
//! and vocoder, then fine-tune every parameter on the low-resource target.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::acoustic::{AMConfig, AMTrainer, AcousticModel, LossComponents};
use crate::corpus_prep::{read_manifest, Utterance};
use crate::features::{load_wav, mel_spectrogram, AudioConfig, MelSpectrogram};
use crate::frontend::{encode_transcript, Lang, TagMode, TokenSequence, Vocabulary};
use crate::nn::ParamStore;
use crate::vocoder::{VocoderClip, VocoderConfig, VocoderTrainConfig, VocoderTrainer, WaveNet};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LRTTSCKP";

/// Copies `source` into `target`, requiring identical names and shapes.
pub fn adopt_params(target: &mut ParamStore, source: ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::CheckpointTensor {
            name: "*".into(),
            detail: format!("expected {} tensors, found {}", target.len(), source.len()),
        });
    }
    for (name, value) in source.iter() {
        let id = target.id(name).ok_or_else(|| Error::CheckpointTensor {
            name: name.to_string(),
            detail: "unknown tensor".into(),
        })?;
        if target.get(id).dim() != value.dim() {
            return Err(Error::CheckpointTensor {
                name: name.to_string(),
                detail: format!("expected shape {:?}, found {:?}", target.get(id).dim(), value.dim()),
            });
        }
        target.get_mut(id).assign(value);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Acoustic,
    Vocoder,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Acoustic => "acoustic",
            ModelKind::Vocoder => "vocoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelConfig {
    Acoustic(AMConfig),
    Vocoder(VocoderConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Acoustic(_) => ModelKind::Acoustic,
            ModelConfig::Vocoder(_) => ModelKind::Vocoder,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Average,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub stage: Stage,
    pub steps: u64,
    pub corpora: Vec<String>,
    pub seed: u64,
    pub learning_rate: f64,
    pub final_loss: Option<f64>,
    /// Language tagging the acoustic model was trained with.
    pub tag_mode: Option<TagMode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub meta: TrainingMeta,
    /// Token inventory of acoustic models.
    pub vocabulary: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ModelKind,
    config: ModelConfig,
    meta: TrainingMeta,
    vocabulary: Option<String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn acoustic(model: &AcousticModel, vocab: &Vocabulary, meta: TrainingMeta) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: ModelConfig::Acoustic(model.config.clone()),
            params: model.params.clone(),
            meta,
            vocabulary: Some(vocab.clone()),
        }
    }

    pub fn vocoder(model: &WaveNet, meta: TrainingMeta) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: ModelConfig::Vocoder(model.config.clone()),
            params: model.params.clone(),
            meta,
            vocabulary: None,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind() == expected {
            Ok(())
        } else {
            Err(Error::CheckpointKind {
                expected: expected.to_string(),
                found: self.kind().to_string(),
            })
        }
    }

    pub fn acoustic_model(&self) -> Result<(AcousticModel, Vocabulary)> {
        self.expect_kind(ModelKind::Acoustic)?;
        let ModelConfig::Acoustic(cfg) = &self.config else { unreachable!() };
        let vocab = self
            .vocabulary
            .clone()
            .ok_or_else(|| Error::CorruptCheckpoint("acoustic checkpoint without vocabulary".into()))?;
        Ok((AcousticModel::from_params(cfg.clone(), self.params.clone())?, vocab))
    }

    pub fn vocoder_model(&self) -> Result<WaveNet> {
        self.expect_kind(ModelKind::Vocoder)?;
        let ModelConfig::Vocoder(cfg) = &self.config else { unreachable!() };
        WaveNet::from_params(cfg.clone(), self.params.clone())
    }

    fn validate(&self) -> Result<()> {
        match &self.config {
            ModelConfig::Acoustic(_) => self.acoustic_model().map(|_| ()),
            ModelConfig::Vocoder(_) => self.vocoder_model().map(|_| ()),
        }
    }
}

/// Single file: magic, header length (u64 LE), JSON header, then raw
/// little-endian `f32` tensor data in directory order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0;
    for (name, value) in ckpt.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            offset,
        });
        offset += value.len() * 4;
    }
    let header = Header {
        version: ckpt.format_version,
        kind: ckpt.kind(),
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        vocabulary: ckpt.vocabulary.as_ref().map(Vocabulary::to_text),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, value) in ckpt.params.iter() {
        for &v in value.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint signature"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header without version"))? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    if header.kind != header.config.kind() {
        return Err(corrupt("kind disagrees with config"));
    }
    let data = &bytes[hend..];
    let mut params = ParamStore::new();
    let mut expected_len = 0;
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + 4 * n;
        if end > data.len() {
            return Err(corrupt(&format!("tensor {} runs past the end of the file", t.name)));
        }
        let vals: Vec<f64> = data[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), vals).map_err(|e| corrupt(&e.to_string()))?;
        if params.id(&t.name).is_some() {
            return Err(corrupt(&format!("duplicate tensor {}", t.name)));
        }
        params.add(t.name.clone(), arr);
        expected_len = expected_len.max(end);
    }
    if expected_len != data.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    let vocabulary = header.vocabulary.as_deref().map(Vocabulary::from_text).transpose()?;
    let ckpt = Checkpoint {
        format_version: version,
        config: header.config,
        params,
        meta: header.meta,
        vocabulary,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub corpora: Vec<PathBuf>,
    pub steps: u64,
    /// Defaults: 1e-3 for average training, 1e-4 for fine-tuning.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Restricts training to these languages; `None` keeps every utterance.
    #[serde(default)]
    pub languages: Option<Vec<Lang>>,
}

fn default_batch() -> usize {
    4
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Finetune && self.init_from.is_none() {
            return Err(Error::InvalidArgument("a fine-tuning plan needs init_from".into()));
        }
        if self.stage == Stage::Init {
            return Err(Error::InvalidArgument("plan stage must be average or finetune".into()));
        }
        if self.corpora.is_empty() {
            return Err(Error::InvalidArgument("plan lists no corpora".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Finetune => 1e-4,
            _ => 1e-3,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: TrainPlan = serde_json::from_reader(File::open(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Merged corpora restricted to the plan's languages.
    pub fn utterances(&self) -> Result<Vec<Utterance>> {
        let mut utts = load_corpora(&self.corpora)?;
        if let Some(langs) = &self.languages {
            utts.retain(|u| langs.contains(&u.lang));
        }
        if utts.is_empty() {
            return Err(Error::InvalidArgument("the plan selects no utterances".into()));
        }
        Ok(utts)
    }

    fn corpus_names(&self) -> Vec<String> {
        self.corpora
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect()
    }
}

/// Concatenates manifests in order; ids must be globally unique.
pub fn merge_corpora(manifests: &[Vec<Utterance>]) -> Result<Vec<Utterance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for m in manifests {
        for u in m {
            if !seen.insert(u.id.clone()) {
                return Err(Error::DuplicateId(u.id.clone()));
            }
            out.push(u.clone());
        }
    }
    Ok(out)
}

/// Reads and merges manifests, making WAV paths absolute.
pub fn load_corpora(paths: &[PathBuf]) -> Result<Vec<Utterance>> {
    let mut all = Vec::new();
    for p in paths {
        let dir = p.parent().unwrap_or(Path::new("."));
        let mut m = read_manifest(p)?;
        for u in &mut m {
            u.wav_path = u.resolve_wav(dir).to_string_lossy().into_owned();
        }
        all.push(m);
    }
    merge_corpora(&all)
}

/// Tokenised transcripts with ground-truth mels, sorted by utterance id.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticData {
    pub ids: Vec<String>,
    pub tokens: Vec<TokenSequence>,
    pub mels: Vec<MelSpectrogram>,
    pub audio: Vec<Vec<f32>>,
}

impl AcousticData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Loads audio, extracts mels and encodes transcripts. Every OOV token of
/// every utterance is reported together.
pub fn prepare_acoustic_data(
    utts: &[Utterance],
    vocab: &Vocabulary,
    tag_mode: TagMode,
    audio: &AudioConfig,
) -> Result<AcousticData> {
    let mut sorted: Vec<&Utterance> = utts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut missing = Vec::new();
    let mut data = AcousticData {
        ids: Vec::new(),
        tokens: Vec::new(),
        mels: Vec::new(),
        audio: Vec::new(),
    };
    for u in sorted {
        match encode_transcript(&u.syllables, tag_mode.effective_lang(u.lang), vocab, false) {
            Ok(t) => data.tokens.push(t),
            Err(Error::OutOfVocabulary(list)) => {
                for tok in list.split(", ") {
                    if !missing.iter().any(|m: &String| m == tok) {
                        missing.push(tok.to_string());
                    }
                }
                continue;
            }
            Err(e) => return Err(Error::in_utterance(&u.id, e)),
        }
        let samples = load_wav(&u.wav_path, audio.sample_rate).map_err(|e| Error::in_utterance(&u.id, e))?;
        data.mels.push(mel_spectrogram(&samples, audio).map_err(|e| Error::in_utterance(&u.id, e))?);
        data.audio.push(samples);
        data.ids.push(u.id.clone());
    }
    if !missing.is_empty() {
        return Err(Error::OutOfVocabulary(format!(
            "{}; rebuild the vocabulary over every corpus (with language tags) before average training",
            missing.join(", ")
        )));
    }
    Ok(data)
}

/// Trains for `steps` on seeded random batches; returns per-step losses.
pub fn run_acoustic_training(
    trainer: &mut AMTrainer,
    data: &AcousticData,
    steps: u64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<LossComponents>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let pick: Vec<usize> = if batch_size >= data.len() {
            idx.clone()
        } else {
            idx.choose_multiple(&mut rng, batch_size).copied().collect()
        };
        let toks: Vec<&TokenSequence> = pick.iter().map(|&i| &data.tokens[i]).collect();
        let mels: Vec<&MelSpectrogram> = pick.iter().map(|&i| &data.mels[i]).collect();
        let l = trainer.train_step(&toks, &mels)?;
        if step % 50 == 0 {
            debug!(step, total = l.total, "acoustic training");
        }
        losses.push(l);
    }
    Ok(losses)
}

/// Mean teacher-forced loss (no dropout) over a data set.
pub fn validation_loss(model: &AcousticModel, data: &AcousticData) -> Result<f64> {
    let mut total = 0.0;
    for (t, m) in data.tokens.iter().zip(&data.mels) {
        total += model.batch_loss(&[t], &[m], None, false)?.0.total;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Where the vocoder's conditioning comes from.
#[derive(Clone, Debug)]
pub enum Conditioning {
    GroundTruth,
    /// Teacher-forced predictions of an acoustic model.
    TeacherForced {
        model: AcousticModel,
        vocab: Vocabulary,
        tag_mode: TagMode,
    },
}

pub fn prepare_vocoder_clips(utts: &[Utterance], cond: &Conditioning, audio: &AudioConfig) -> Result<Vec<VocoderClip>> {
    let mut sorted: Vec<&Utterance> = utts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut clips = Vec::with_capacity(sorted.len());
    for u in sorted {
        let samples = load_wav(&u.wav_path, audio.sample_rate).map_err(|e| Error::in_utterance(&u.id, e))?;
        let gt = mel_spectrogram(&samples, audio).map_err(|e| Error::in_utterance(&u.id, e))?;
        let mel = match cond {
            Conditioning::GroundTruth => gt,
            Conditioning::TeacherForced { model, vocab, tag_mode } => {
                let toks = encode_transcript(&u.syllables, tag_mode.effective_lang(u.lang), vocab, false)
                    .map_err(|e| Error::in_utterance(&u.id, e))?;
                model.teacher_forced_predict(&toks, &gt)?
            }
        };
        clips.push(VocoderClip::new(&samples, &mel, audio)?);
    }
    Ok(clips)
}

#[derive(Clone, Debug)]
pub enum TrainSetup {
    Acoustic {
        config: AMConfig,
        vocab: Vocabulary,
        tag_mode: TagMode,
        audio: AudioConfig,
    },
    Vocoder {
        config: VocoderConfig,
        conditioning: Conditioning,
        audio: AudioConfig,
        window: usize,
    },
}

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub tag_mode: TagMode,
    pub audio: AudioConfig,
    /// Vocoder fine-tuning only.
    pub conditioning: Conditioning,
    pub window: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            tag_mode: TagMode::Tagged,
            audio: AudioConfig::default(),
            conditioning: Conditioning::GroundTruth,
            window: VocoderTrainConfig::default().window,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Per-step total loss (acoustic) or NLL (vocoder).
    pub losses: Vec<f64>,
}

fn meta(plan: &TrainPlan, losses: &[f64], tag_mode: Option<TagMode>) -> TrainingMeta {
    TrainingMeta {
        stage: plan.stage,
        steps: plan.steps,
        corpora: plan.corpus_names(),
        seed: plan.seed,
        learning_rate: plan.learning_rate(),
        final_loss: losses.last().copied(),
        tag_mode,
    }
}

fn train_acoustic(
    model: AcousticModel,
    vocab: &Vocabulary,
    plan: &TrainPlan,
    tag_mode: TagMode,
    audio: &AudioConfig,
) -> Result<TrainOutcome> {
    let utts = plan.utterances()?;
    let data = prepare_acoustic_data(&utts, vocab, tag_mode, audio)?;
    info!(utterances = data.len(), steps = plan.steps, "training acoustic model");
    let mut trainer = AMTrainer::new(model, plan.learning_rate(), 1.0, plan.seed);
    let losses: Vec<f64> = run_acoustic_training(&mut trainer, &data, plan.steps, plan.batch_size, plan.seed)?
        .iter()
        .map(|l| l.total)
        .collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::acoustic(&trainer.model, vocab, meta(plan, &losses, Some(tag_mode))),
        losses,
    })
}

fn train_vocoder(
    model: WaveNet,
    plan: &TrainPlan,
    cond: &Conditioning,
    audio: &AudioConfig,
    window: usize,
) -> Result<TrainOutcome> {
    let utts = plan.utterances()?;
    let clips = prepare_vocoder_clips(&utts, cond, audio)?;
    info!(clips = clips.len(), steps = plan.steps, "training vocoder");
    let cfg = VocoderTrainConfig {
        learning_rate: plan.learning_rate(),
        clip_norm: 1.0,
        window,
        batch_size: plan.batch_size,
        seed: plan.seed,
    };
    let mut trainer = VocoderTrainer::new(model, cfg);
    let mut losses = Vec::with_capacity(plan.steps as usize);
    for step in 0..plan.steps {
        let l = trainer.train_step(&clips)?;
        if step % 50 == 0 {
            debug!(step, nll = l, "vocoder training");
        }
        losses.push(l);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::vocoder(&trainer.model, meta(plan, &losses, None)),
        losses,
    })
}

/// Trains a freshly initialised model (seeded by `plan.seed`) on the merged
/// corpora.
pub fn train_average(plan: &TrainPlan, setup: &TrainSetup) -> Result<TrainOutcome> {
    plan.validate()?;
    if plan.stage != Stage::Average {
        return Err(Error::InvalidArgument("train_average needs an average-stage plan".into()));
    }
    match setup {
        TrainSetup::Acoustic {
            config,
            vocab,
            tag_mode,
            audio,
        } => {
            let config = AMConfig {
                vocab_size: vocab.len(),
                ..config.clone()
            };
            let model = AcousticModel::new(config, plan.seed)?;
            train_acoustic(model, vocab, plan, *tag_mode, audio)
        }
        TrainSetup::Vocoder {
            config,
            conditioning,
            audio,
            window,
        } => {
            let model = WaveNet::new(config.clone(), plan.seed)?;
            train_vocoder(model, plan, conditioning, audio, *window)
        }
    }
}

/// Continues training every parameter of `plan.init_from` on the target
/// corpora.
pub fn finetune(plan: &TrainPlan, kind: ModelKind, opts: &FinetuneOptions) -> Result<TrainOutcome> {
    plan.validate()?;
    if plan.stage != Stage::Finetune {
        return Err(Error::InvalidArgument("finetune needs a finetune-stage plan".into()));
    }
    let init = load_checkpoint(plan.init_from.as_ref().expect("validated"))?;
    match kind {
        ModelKind::Acoustic => {
            let (model, vocab) = init.acoustic_model()?;
            train_acoustic(model, &vocab, plan, opts.tag_mode, &opts.audio)
        }
        ModelKind::Vocoder => {
            let model = init.vocoder_model()?;
            train_vocoder(model, plan, &opts.conditioning, &opts.audio, opts.window)
        }
    }
}
