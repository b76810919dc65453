//! Python bindings: vocabulary, checkpoints, synthesis and diagnostics.
//!
//! Arrays cross the boundary as nested lists (`frames x mels`).

use std::path::PathBuf;

use lowres_tts::acoustic::{AcousticModel, Alignments};
use lowres_tts::eval::{self, VocoderChoice};
use lowres_tts::features::{self, AudioConfig, MelSpectrogram};
use lowres_tts::frontend::{self, Lang, TagMode, TokenSequence, Vocabulary};
use lowres_tts::toycorpus::{gen_toycorpus as gen_corpus, ToyCorpusSpec};
use lowres_tts::transfer::load_checkpoint;
use lowres_tts::vocoder::{self, MixtureOfLogisticsParams, VocoderConfig, WaveNet};
use lowres_tts::{corpus_prep, Error};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Diverged(_) | Error::NonFinite(_) | Error::Shape(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_lang(s: &str) -> PyResult<Lang> {
    s.parse().map_err(to_py)
}

fn parse_tag_mode(s: &str) -> PyResult<TagMode> {
    match s {
        "tagged" => Ok(TagMode::Tagged),
        "shared" => Ok(TagMode::Shared),
        _ => Err(PyValueError::new_err(format!("tag_mode must be 'tagged' or 'shared', got {s:?}"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn mel_from(rows: Vec<Vec<f64>>) -> PyResult<MelSpectrogram> {
    Ok(MelSpectrogram {
        frames: matrix(rows)?,
        hop_s: AudioConfig::default().hop_s(),
    })
}

#[pyclass(name = "Vocabulary", module = "lowres_tts_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Builds the token inventory over JSON-lines manifests.
    #[staticmethod]
    #[pyo3(signature = (manifests, tag_mode = "tagged"))]
    fn from_manifests(manifests: Vec<PathBuf>, tag_mode: &str) -> PyResult<Self> {
        let mode = parse_tag_mode(tag_mode)?;
        let mut utts = Vec::new();
        for m in &manifests {
            utts.extend(corpus_prep::read_manifest(m).map_err(to_py)?);
        }
        Ok(Self {
            inner: frontend::build_vocab(&utts, mode).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Vocabulary::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Tokens as `lang:symbol`, in id order.
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().iter().map(|t| t.to_string()).collect()
    }

    #[pyo3(signature = (syllables, lang, insert_pauses = false))]
    fn encode(&self, syllables: Vec<String>, lang: &str, insert_pauses: bool) -> PyResult<Vec<usize>> {
        let seq = frontend::encode_transcript(&syllables, parse_lang(lang)?, &self.inner, insert_pauses)
            .map_err(to_py)?;
        Ok(seq.ids)
    }

    fn decode(&self, ids: Vec<usize>, lang: &str) -> PyResult<Vec<String>> {
        let seq = TokenSequence {
            ids,
            lang: parse_lang(lang)?,
        };
        frontend::decode_transcript(&seq, &self.inner).map_err(to_py)
    }
}

#[pyclass(name = "AcousticModel", module = "lowres_tts_py")]
struct PyAcousticModel {
    model: AcousticModel,
    vocab: Vocabulary,
}

#[pymethods]
impl PyAcousticModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, vocab) = load_checkpoint(path).and_then(|c| c.acoustic_model()).map_err(to_py)?;
        Ok(Self { model, vocab })
    }

    fn vocabulary(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.vocab.clone(),
        }
    }

    /// Free-running synthesis. Returns `(mel, alignments, stopped)`.
    #[pyo3(signature = (syllables, lang, tag_mode = "tagged"))]
    fn synthesize(
        &self,
        py: Python<'_>,
        syllables: Vec<String>,
        lang: &str,
        tag_mode: &str,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, bool)> {
        let lang = parse_tag_mode(tag_mode)?.effective_lang(parse_lang(lang)?);
        let ids = frontend::encode_transcript(&syllables, lang, &self.vocab, false).map_err(to_py)?;
        let hop_s = AudioConfig::default().hop_s();
        let out = py.detach(|| self.model.synthesize_mel(&ids, hop_s)).map_err(to_py)?;
        Ok((rows(&out.mel.frames), rows(&out.alignments.0), out.stopped_naturally))
    }
}

#[pyclass(name = "WaveNet", module = "lowres_tts_py")]
struct PyWaveNet {
    model: WaveNet,
}

#[pymethods]
impl PyWaveNet {
    /// Freshly initialised network; `tiny` selects the test-sized config.
    #[new]
    #[pyo3(signature = (seed = 0, tiny = false))]
    fn new(seed: u64, tiny: bool) -> PyResult<Self> {
        let cfg = if tiny {
            VocoderConfig {
                conditioning_channels: AudioConfig::default().n_mels,
                ..VocoderConfig::tiny()
            }
        } else {
            VocoderConfig::default()
        };
        Ok(Self {
            model: WaveNet::new(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            model: load_checkpoint(path).and_then(|c| c.vocoder_model()).map_err(to_py)?,
        })
    }

    #[getter]
    fn receptive_field(&self) -> usize {
        self.model.receptive_field()
    }

    /// Samples a waveform in `[-1, 1]` from a log-mel (frames x 80).
    #[pyo3(signature = (mel, seed = 0))]
    fn generate(&self, py: Python<'_>, mel: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<f32>> {
        let mel = mel_from(mel)?;
        let choice = VocoderChoice::WaveNet {
            model: self.model.clone(),
            seed,
        };
        py.detach(|| eval::vocode(&choice, &mel, &AudioConfig::default(), 0)).map_err(to_py)
    }
}

#[pyfunction]
fn syllable_to_letters(syllable: &str) -> PyResult<Vec<String>> {
    frontend::syllable_to_letters(syllable).map_err(to_py)
}

#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<Vec<f32>> {
    features::load_wav(path, AudioConfig::default().sample_rate).map_err(to_py)
}

#[pyfunction]
fn save_wav(path: PathBuf, samples: Vec<f32>) -> PyResult<()> {
    features::save_wav(path, &samples, AudioConfig::default().sample_rate).map_err(to_py)
}

/// 80-band natural-log mel spectrogram of 16 kHz audio.
#[pyfunction]
fn mel_spectrogram(samples: Vec<f32>) -> PyResult<Vec<Vec<f64>>> {
    let m = features::mel_spectrogram(&samples, &AudioConfig::default()).map_err(to_py)?;
    Ok(rows(&m.frames))
}

#[pyfunction]
#[pyo3(signature = (mel, iterations = 60))]
fn griffin_lim(mel: Vec<Vec<f64>>, iterations: usize) -> PyResult<Vec<f32>> {
    features::griffin_lim(&mel_from(mel)?, &AudioConfig::default(), iterations).map_err(to_py)
}

/// Mel-cepstral distortion in dB between equal-length log-mels.
#[pyfunction]
fn mcd(reference: Vec<Vec<f64>>, hypothesis: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::mcd(&mel_from(reference)?, &mel_from(hypothesis)?).map_err(to_py)
}

/// `(monotonicity, coverage)` of a decoder-steps x encoder-steps matrix.
#[pyfunction]
fn alignment_scores(alignments: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let s = eval::alignment_diagnostics(&Alignments(matrix(alignments)?));
    Ok((s.monotonicity, s.coverage))
}

/// Log probability of grid value `x` under a discretized logistic mixture.
#[pyfunction]
fn mol_log_prob(x: f64, logit_weights: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>) -> PyResult<f64> {
    let params = MixtureOfLogisticsParams {
        logit_weights,
        means,
        log_scales,
    };
    vocoder::mol_log_prob(x, &params).map_err(to_py)
}

/// Writes the synthetic tone-burst corpus; returns the number of utterances.
#[pyfunction]
#[pyo3(signature = (out_dir, n_utts = 20, seed = 0, shdia_fraction = 0.0, long_form = false))]
fn gen_toycorpus(out_dir: PathBuf, n_utts: usize, seed: u64, shdia_fraction: f64, long_form: bool) -> PyResult<usize> {
    let spec = ToyCorpusSpec {
        n_utts,
        seed,
        shdia_fraction,
        long_form,
        ..Default::default()
    };
    Ok(gen_corpus(&spec, &out_dir).map_err(to_py)?.len())
}

/// Runs the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("lowres-tts".to_string()).chain(args).collect();
    py.detach(|| lowres_tts::cli::run_command(argv))
}

#[pymodule]
fn lowres_tts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyAcousticModel>()?;
    m.add_class::<PyWaveNet>()?;
    m.add_function(wrap_pyfunction!(syllable_to_letters, m)?)?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(griffin_lim, m)?)?;
    m.add_function(wrap_pyfunction!(mcd, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_scores, m)?)?;
    m.add_function(wrap_pyfunction!(mol_log_prob, m)?)?;
    m.add_function(wrap_pyfunction!(gen_toycorpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("GRID_POINTS", vocoder::mol::GRID_POINTS)?;
    Ok(())
}
