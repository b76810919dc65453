//! Conditional WaveNet vocoder with a discretized mixture-of-logistics head.
//!
//! Layer 0 is the causal input convolution: its taps see only strictly
//! past samples. Layers `1..layers` are gated residual blocks
//! `tanh(W_f * h + V_f * c) . sigmoid(W_g * h + V_g * c)` with residual and
//! skip 1x1 projections. Output position `t` therefore depends on samples
//! `t - (kernel-1) * sum(dilations) .. t-1` and on conditioning at `t`.

mod incremental;
pub mod mol;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{AudioConfig, MelSpectrogram};
use crate::nn::{glorot, Adam, Graph, Linear, ParamId, ParamStore, Var};
use crate::{Error, Result};

pub use incremental::{Generation, Sampling};
pub use mol::{mol_log_prob, sample_mol, MixtureOfLogisticsParams};

/// `ln(1e-5)`, the log floor of the default feature extractor.
pub const DEFAULT_CONDITIONING_FLOOR: f64 = -11.512925464970229;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocoderConfig {
    pub layers: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub conditioning_channels: usize,
    pub n_mixtures: usize,
    pub sample_rate: u32,
    pub log_scale_floor: f64,
    /// Log-mel value mapped to 0 before conditioning; 0 maps to 1.
    pub conditioning_floor: f64,
    /// Initial bias of the log-scale outputs.
    pub initial_log_scale: f64,
    /// Factor applied to past samples before the input layer; speech sits
    /// around 0.1 of full scale.
    pub input_gain: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        let dilations: Vec<usize> = (0..3).flat_map(|_| (0..8).map(|i| 1 << i)).collect();
        Self {
            layers: dilations.len(),
            kernel: 2,
            dilations,
            residual_channels: 32,
            skip_channels: 64,
            conditioning_channels: 80,
            n_mixtures: 10,
            sample_rate: 16000,
            log_scale_floor: -7.0,
            conditioning_floor: DEFAULT_CONDITIONING_FLOOR,
            initial_log_scale: -2.0,
            input_gain: 10.0,
        }
    }
}

impl VocoderConfig {
    /// Small network for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            layers: 4,
            kernel: 2,
            dilations: vec![1, 1, 2, 4],
            residual_channels: 4,
            skip_channels: 6,
            conditioning_channels: 3,
            n_mixtures: 2,
            sample_rate: 16000,
            log_scale_floor: -7.0,
            conditioning_floor: DEFAULT_CONDITIONING_FLOOR,
            initial_log_scale: -2.0,
            input_gain: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.layers >= 2
            && self.dilations.len() == self.layers
            && self.dilations.iter().all(|&d| d >= 1)
            && self.kernel >= 2
            && self.residual_channels > 0
            && self.skip_channels > 0
            && self.conditioning_channels > 0
            && self.n_mixtures >= 1
            && self.conditioning_floor < 0.0
            && self.input_gain.is_finite()
            && self.input_gain > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid vocoder config {self:?}")))
        }
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self)
    }

    pub fn output_channels(&self) -> usize {
        3 * self.n_mixtures
    }
}

/// `1 + (kernel - 1) * sum(dilations)`, counting the predicted sample.
pub fn receptive_field(config: &VocoderConfig) -> usize {
    1 + (config.kernel - 1) * config.dilations.iter().sum::<usize>()
}

/// Frame-repeated conditioning: sample `k` sees frame `(offset + k) / hop`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningTrack {
    frames: Array2<f64>,
    hop: usize,
    offset: usize,
    len: usize,
}

pub fn upsample_conditioning(mel: &MelSpectrogram, hop: usize) -> ConditioningTrack {
    ConditioningTrack {
        frames: mel.frames.clone(),
        hop,
        offset: 0,
        len: mel.n_frames() * hop,
    }
}

impl ConditioningTrack {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_index(&self, k: usize) -> usize {
        (self.offset + k) / self.hop
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn row(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.frames.row(self.frame_index(k))
    }

    /// Explicit `len x channels` matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len).map(|k| self.frame_index(k)).collect();
        self.frames.select(ndarray::Axis(0), &idx)
    }

    pub fn slice(&self, start: usize, len: usize) -> ConditioningTrack {
        assert!(start + len <= self.len, "slice beyond track");
        ConditioningTrack {
            frames: self.frames.clone(),
            hop: self.hop,
            offset: self.offset + start,
            len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualLayer {
    dilation: usize,
    conv: Linear,
    cond: ParamId,
    skip: Linear,
    res: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    input: Linear,
    layers: Vec<ResidualLayer>,
    out1: Linear,
    out2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveNet {
    pub config: VocoderConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl WaveNet {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (r, sk, c, k) = (
            config.residual_channels,
            config.skip_channels,
            config.conditioning_channels,
            config.kernel,
        );
        let input = Linear::new(&mut ps, &mut rng, "input", k - 1, r, true);
        let mut layers = Vec::new();
        for i in 1..config.layers {
            let name = format!("layer{i:02}");
            let conv = Linear::new(&mut ps, &mut rng, &format!("{name}.conv"), k * r, 2 * r, true);
            let cond = ps.add(format!("{name}.cond.w"), glorot(&mut rng, c, 2 * r));
            let skip = Linear::new(&mut ps, &mut rng, &format!("{name}.skip"), r, sk, true);
            let res = (i + 1 < config.layers)
                .then(|| Linear::new(&mut ps, &mut rng, &format!("{name}.res"), r, r, true));
            layers.push(ResidualLayer {
                dilation: config.dilations[i],
                conv,
                cond,
                skip,
                res,
            });
        }
        let out1 = Linear::new(&mut ps, &mut rng, "out1", sk, sk, true);
        let out2 = Linear::new(&mut ps, &mut rng, "out2", sk, config.output_channels(), true);
        let km = config.n_mixtures;
        ps.get_mut(out2.b.expect("out2 has a bias"))
            .slice_mut(s![.., 2 * km..])
            .fill(config.initial_log_scale);
        Ok(WaveNet {
            config,
            params: ps,
            layout: Layout {
                input,
                layers,
                out1,
                out2,
            },
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: VocoderConfig, params: ParamStore) -> Result<Self> {
        let mut model = WaveNet::new(config, 0)?;
        crate::transfer::adopt_params(&mut model.params, params)?;
        Ok(model)
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    /// Log-mels rescaled so the floor maps to 0 and 0 dB to 1; raw values
    /// around -11 would saturate the gates.
    fn conditioning_input(&self, frames: &Array2<f64>) -> Array2<f64> {
        let floor = self.config.conditioning_floor;
        frames.mapv(|v| (v - floor) / -floor)
    }

    /// Raw `N x 3K` head output for `segment`-long windows stacked in
    /// `audio`; `cond_index[n]` picks the row of `cond_frames` for sample `n`.
    fn build(
        &self,
        g: &mut Graph,
        audio: &[f64],
        segment: usize,
        cond_frames: &Array2<f64>,
        cond_index: &[usize],
    ) -> Var {
        let cfg = &self.config;
        let k = cfg.kernel;
        let gain = cfg.input_gain;
        let x = g.constant(Array2::from_shape_vec((audio.len(), 1), audio.iter().map(|v| v * gain).collect()).expect("shape"));
        let d0 = cfg.dilations[0];
        let taps: Vec<Var> = (1..k).rev().map(|j| g.shift_rows(x, j * d0, segment)).collect();
        let taps = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps) };
        let mut h = self.layout.input.forward(g, taps);

        let frames = g.constant(self.conditioning_input(cond_frames));
        let mut skips = Vec::with_capacity(self.layout.layers.len());
        for layer in &self.layout.layers {
            let mut parts: Vec<Var> = (1..k)
                .rev()
                .map(|j| g.shift_rows(h, j * layer.dilation, segment))
                .collect();
            parts.push(h);
            let stacked = g.concat_cols(&parts);
            let a = layer.conv.forward(g, stacked);
            let cw = g.param(layer.cond);
            let cproj = g.matmul(frames, cw);
            let cproj = g.gather_rows(cproj, cond_index.to_vec());
            let a = g.add(a, cproj);
            let r = cfg.residual_channels;
            let filt = g.slice_cols(a, 0, r);
            let filt = g.tanh(filt);
            let gate = g.slice_cols(a, r, r);
            let gate = g.sigmoid(gate);
            let z = g.mul(filt, gate);
            skips.push(layer.skip.forward(g, z));
            if let Some(res) = &layer.res {
                let out = res.forward(g, z);
                let sum = g.add(h, out);
                h = g.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
            }
        }
        let skip = g.add_all(&skips);
        let y = g.relu(skip);
        let y = self.layout.out1.forward(g, y);
        let y = g.relu(y);
        self.layout.out2.forward(g, y)
    }

    /// Distribution parameters for every position of `audio_in` (grid
    /// values). Row `t` is the prediction for `audio_in[t]`; log-scale
    /// columns are floored.
    pub fn forward_parallel(&self, audio_in: &[f64], cond: &ConditioningTrack) -> Result<Array2<f64>> {
        if audio_in.len() != cond.len() {
            return Err(Error::Shape(format!(
                "audio has {} samples, conditioning {}",
                audio_in.len(),
                cond.len()
            )));
        }
        if cond.channels() != self.config.conditioning_channels {
            return Err(Error::Shape(format!(
                "conditioning has {} channels, model expects {}",
                cond.channels(),
                self.config.conditioning_channels
            )));
        }
        let mut g = Graph::new(&self.params);
        let idx: Vec<usize> = (0..audio_in.len()).map(|k| cond.frame_index(k)).collect();
        let out = self.build(&mut g, audio_in, audio_in.len().max(1), cond.frames(), &idx);
        let mut raw = g.value(out).clone();
        self.floor_log_scales(&mut raw);
        Ok(raw)
    }

    fn floor_log_scales(&self, raw: &mut Array2<f64>) {
        let k = self.config.n_mixtures;
        let floor = self.config.log_scale_floor;
        raw.slice_mut(s![.., 2 * k..]).mapv_inplace(|v| v.max(floor));
    }

    /// Mean negative log-likelihood (nats/sample) of a clip.
    pub fn nll(&self, clip: &VocoderClip) -> Result<f64> {
        let window = Window {
            clip,
            start: 0,
            len: clip.len(),
        };
        let (loss, _) = self.loss_and_grads(&[window], false)?;
        Ok(loss)
    }

    fn loss_and_grads(
        &self,
        windows: &[Window<'_>],
        want_grads: bool,
    ) -> Result<(f64, Option<Vec<Option<Array2<f64>>>>)> {
        let seg = windows[0].len;
        if windows.iter().any(|w| w.len != seg) {
            return Err(Error::Shape("windows in a batch must share a length".into()));
        }
        let mut audio = Vec::with_capacity(seg * windows.len());
        let mut index = Vec::with_capacity(seg * windows.len());
        let mut frames: Vec<Array2<f64>> = Vec::new();
        let mut frame_base = 0;
        for w in windows {
            let first = w.clip.track.frame_index(w.start);
            let last = w.clip.track.frame_index(w.start + seg - 1);
            frames.push(w.clip.track.frames().slice(s![first..=last, ..]).to_owned());
            for n in 0..seg {
                index.push(frame_base + w.clip.track.frame_index(w.start + n) - first);
            }
            frame_base += last - first + 1;
            audio.extend_from_slice(&w.clip.samples[w.start..w.start + seg]);
        }
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let cond = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;

        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, &audio, seg, &cond, &index);
        let raw = g.value(out);
        let n = audio.len() as f64;
        let mut total = 0.0;
        let mut grad = Array2::zeros(raw.raw_dim());
        for (t, &x) in audio.iter().enumerate() {
            let (nll, gr) = mol::mol_nll_grad(raw.row(t), x, self.config.log_scale_floor);
            total += nll;
            grad.row_mut(t).assign(&(gr / n));
        }
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("vocoder NLL is {loss}")));
        }
        if !want_grads {
            return Ok((loss, None));
        }
        let l = g.loss(out, loss, grad);
        Ok((loss, Some(g.backward(l))))
    }
}

/// Grid-valued audio paired with its conditioning track, sample for sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VocoderClip {
    pub samples: Vec<f64>,
    pub track: ConditioningTrack,
}

impl VocoderClip {
    /// Aligns `audio` with `mel` (ground truth or teacher-forced prediction
    /// with the same frame count): the clip covers `T * hop` samples starting
    /// at [`AudioConfig::vocoder_offset`].
    pub fn new(audio: &[f32], mel: &MelSpectrogram, audio_cfg: &AudioConfig) -> Result<Self> {
        let off = audio_cfg.vocoder_offset();
        let len = mel.n_frames() * audio_cfg.hop;
        if len == 0 || audio.len() < off + len {
            return Err(Error::Shape(format!(
                "{} samples cannot cover {} frames of hop {}",
                audio.len(),
                mel.n_frames(),
                audio_cfg.hop
            )));
        }
        Ok(VocoderClip {
            samples: audio[off..off + len].iter().map(|&x| mol::wave_to_grid(x)).collect(),
            track: upsample_conditioning(mel, audio_cfg.hop),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy)]
struct Window<'a> {
    clip: &'a VocoderClip,
    start: usize,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct VocoderTrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub window: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            clip_norm: 1.0,
            window: 2000,
            batch_size: 2,
            seed: 0,
        }
    }
}

/// Owns the model being trained together with optimiser and window RNG.
pub struct VocoderTrainer {
    pub model: WaveNet,
    pub config: VocoderTrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl VocoderTrainer {
    pub fn new(model: WaveNet, config: VocoderTrainConfig) -> Self {
        let opt = Adam::new(&model.params, config.learning_rate, Some(config.clip_norm));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            model,
            config,
            opt,
            rng,
        }
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// One optimiser step on random windows; returns the batch NLL before
    /// the update.
    pub fn train_step(&mut self, clips: &[VocoderClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("no vocoder training clips".into()));
        }
        let shortest = clips.iter().map(VocoderClip::len).min().unwrap_or(0);
        let len = self.config.window.min(shortest);
        let windows: Vec<Window<'_>> = (0..self.config.batch_size)
            .map(|_| {
                let clip = &clips[self.rng.random_range(0..clips.len())];
                let start = self.rng.random_range(0..=clip.len() - len);
                Window { clip, start, len }
            })
            .collect();
        let (loss, grads) = self.model.loss_and_grads(&windows, true)?;
        self.opt.step(&mut self.model.params, &grads.expect("grads requested"))?;
        Ok(loss)
    }
}

/// Loss of the whole clip and gradients for every parameter, for
/// gradient checks.
pub fn clip_loss_and_grads(model: &WaveNet, clip: &VocoderClip) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    let w = Window {
        clip,
        start: 0,
        len: clip.len(),
    };
    let (l, g) = model.loss_and_grads(&[w], true)?;
    Ok((l, g.expect("grads requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, GradCheck};

    fn random_clip(cfg: &VocoderConfig, frames: usize, hop: usize, seed: u64) -> VocoderClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mel = MelSpectrogram {
            frames: Array2::from_shape_fn((frames, cfg.conditioning_channels), |_| rng.random_range(-2.0..2.0)),
            hop_s: 0.0125,
        };
        let track = upsample_conditioning(&mel, hop);
        let samples = (0..track.len())
            .map(|_| mol::code_to_grid(rng.random_range(-3000..3000)))
            .collect();
        VocoderClip { samples, track }
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(VocoderConfig::default().receptive_field(), 766);
        let one = VocoderConfig {
            layers: 1,
            dilations: vec![1],
            ..VocoderConfig::default()
        };
        assert_eq!(receptive_field(&one), 2);
        let two = VocoderConfig {
            layers: 2,
            dilations: vec![1, 2],
            ..VocoderConfig::default()
        };
        assert_eq!(receptive_field(&two), 4);
    }

    #[test]
    fn upsampling_repeats_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mel = MelSpectrogram {
            frames: Array2::from_shape_fn((3, 80), |_| rng.random()),
            hop_s: 0.0125,
        };
        let track = upsample_conditioning(&mel, 200);
        assert_eq!(track.len(), 600);
        let dense = track.to_dense();
        for _ in 0..50 {
            let k = rng.random_range(0..600);
            assert_eq!(dense.row(k), mel.frames.row(k / 200));
        }
        let flat = MelSpectrogram {
            frames: Array2::from_elem((4, 80), 1.5),
            hop_s: 0.0125,
        };
        assert!(upsample_conditioning(&flat, 200).to_dense().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn shapes_and_length_mismatch() {
        let cfg = VocoderConfig::tiny();
        let model = WaveNet::new(cfg.clone(), 1).unwrap();
        let clip = random_clip(&cfg, 4, 10, 2);
        let out = model.forward_parallel(&clip.samples, &clip.track).unwrap();
        assert_eq!(out.dim(), (40, 6));
        assert!(matches!(
            model.forward_parallel(&clip.samples[..39], &clip.track),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_weights_give_finite_output() {
        let cfg = VocoderConfig::tiny();
        let mut model = WaveNet::new(cfg.clone(), 1).unwrap();
        for id in 0..model.params.len() {
            model.params.get_mut(id).fill(0.0);
        }
        let clip = random_clip(&cfg, 4, 10, 2);
        let zeros = vec![0.0; clip.len()];
        let out = model.forward_parallel(&zeros, &clip.track).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out.slice(s![.., ..2]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_causality_probe() {
        let cfg = VocoderConfig::tiny();
        let rf = cfg.receptive_field();
        assert_eq!(rf, 9);
        let model = WaveNet::new(cfg.clone(), 3).unwrap();
        let clip = random_clip(&cfg, 3, 10, 4);
        let base = model.forward_parallel(&clip.samples, &clip.track).unwrap();
        let t = 20;
        for off in 0..=t {
            let mut x = clip.samples.clone();
            x[t - off] += 0.05;
            let out = model.forward_parallel(&x, &clip.track).unwrap();
            let changed = out.row(t) != base.row(t);
            assert_eq!(changed, (1..rf).contains(&off), "offset {off}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = VocoderConfig::tiny();
        let model = WaveNet::new(cfg.clone(), 5).unwrap();
        let clip = random_clip(&cfg, 3, 8, 6);
        let (_, grads) = clip_loss_and_grads(&model, &clip).unwrap();
        let report = check_gradients(
            &model.params,
            |p| {
                let m = WaveNet {
                    params: p.clone(),
                    ..model.clone()
                };
                m.nll(&clip).unwrap()
            },
            &grads,
            &GradCheck::default(),
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
