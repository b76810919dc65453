//! Attention-based sequence-to-sequence acoustic model: letter tokens to
//! log-mel frames, one frame per decoder step, terminated by a stop head.
//!
//! Encoder: embedding, a stack of masked 1-D convolutions, and a
//! bidirectional LSTM. Decoder: prenet with dropout, an attention LSTM,
//! location-sensitive additive attention, a decoder LSTM, and linear frame
//! and stop projections. A convolutional postnet adds a residual correction.
//!
//! Batches are padded; every padded position is masked so that a batched
//! forward pass gives the same per-utterance results as an unbatched one.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::MelSpectrogram;
use crate::frontend::TokenSequence;
use crate::nn::{uniform, Adam, Graph, Linear, LstmCell, ParamId, ParamStore, Var};
use crate::{Error, Result};

const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AMConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub attention_dim: usize,
    pub attention_location_filters: usize,
    pub attention_location_kernel: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub n_mels: usize,
    /// `None`: ten decoder steps per input token.
    pub max_decoder_steps: Option<usize>,
    pub stop_threshold: f64,
    pub teacher_forcing_ratio: f64,
}

impl Default for AMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_dim: 64,
            decoder_dim: 128,
            attention_dim: 64,
            attention_location_filters: 8,
            attention_location_kernel: 15,
            prenet_dims: vec![64, 64],
            prenet_dropout: 0.5,
            postnet_layers: 3,
            postnet_channels: 64,
            postnet_kernel: 5,
            n_mels: 80,
            max_decoder_steps: None,
            stop_threshold: 0.5,
            teacher_forcing_ratio: 1.0,
        }
    }
}

impl AMConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    /// Small network for tests and gradient checks.
    pub fn tiny(vocab_size: usize, n_mels: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 4,
            encoder_conv_layers: 1,
            encoder_kernel: 3,
            encoder_dim: 4,
            decoder_dim: 4,
            attention_dim: 3,
            attention_location_filters: 2,
            attention_location_kernel: 3,
            prenet_dims: vec![3],
            prenet_dropout: 0.5,
            postnet_layers: 2,
            postnet_channels: 3,
            postnet_kernel: 3,
            n_mels,
            max_decoder_steps: None,
            stop_threshold: 0.5,
            teacher_forcing_ratio: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.embed_dim,
            self.encoder_conv_layers,
            self.encoder_dim,
            self.decoder_dim,
            self.attention_dim,
            self.attention_location_filters,
            self.postnet_layers,
            self.postnet_channels,
            self.n_mels,
        ];
        let odd = |k: usize| k % 2 == 1;
        let ok = dims.iter().all(|&d| d > 0)
            && self.encoder_dim % 2 == 0
            && odd(self.encoder_kernel)
            && odd(self.attention_location_kernel)
            && odd(self.postnet_kernel)
            && !self.prenet_dims.is_empty()
            && self.prenet_dims.iter().all(|&d| d > 0)
            && (0.0..1.0).contains(&self.prenet_dropout)
            && self.stop_threshold > 0.0
            && self.stop_threshold < 1.0
            && (0.0..=1.0).contains(&self.teacher_forcing_ratio)
            && self.max_decoder_steps != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid acoustic model config {self:?}")))
        }
    }

    pub fn max_steps_for(&self, n_tokens: usize) -> usize {
        self.max_decoder_steps.unwrap_or(10 * n_tokens.max(1))
    }
}

/// Attention weights, decoder steps x encoder steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignments(pub Array2<f64>);

impl Alignments {
    pub fn decoder_steps(&self) -> usize {
        self.0.nrows()
    }

    pub fn encoder_steps(&self) -> usize {
        self.0.ncols()
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.0.rows() {
            w.write_record(row.iter().map(|v| format!("{v:.6}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AMOutput {
    pub mel_pre: Array2<f64>,
    pub mel_post: Array2<f64>,
    pub stop_logits: Vec<f64>,
    pub alignments: Alignments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub alignments: Alignments,
    /// False when decoding hit the step limit without a stop decision.
    pub stopped_naturally: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mel_pre: f64,
    pub mel_post: f64,
    pub stop: f64,
    pub total: f64,
}

/// Recurrent decoder state for a single utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub attention_h: Array1<f64>,
    pub attention_c: Array1<f64>,
    pub decoder_h: Array1<f64>,
    pub decoder_c: Array1<f64>,
    pub context: Array1<f64>,
    pub alignment: Array1<f64>,
    /// Sum of all alignments so far, including the initial one.
    pub cumulative: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    pub frame: Array1<f64>,
    pub stop_logit: f64,
    pub state: DecoderState,
    pub alignment: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: ParamId,
    encoder_convs: Vec<Linear>,
    encoder_fwd: LstmCell,
    encoder_bwd: LstmCell,
    query: Linear,
    memory: Linear,
    location_conv: ParamId,
    location_dense: Linear,
    score: Linear,
    prenet: Vec<Linear>,
    attention_rnn: LstmCell,
    decoder_rnn: LstmCell,
    frame: Linear,
    stop: Linear,
    postnet: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    pub config: AMConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Encoder outputs and attention inputs shared by every decoder step.
struct Memory {
    memory: Var,
    projected: Var,
    mask_add: Var,
    batch: usize,
    len: usize,
}

#[derive(Clone, Copy)]
struct StepVars {
    att_h: Var,
    att_c: Var,
    dec_h: Var,
    dec_c: Var,
    context: Var,
    alignment: Var,
    cumulative: Var,
}

struct BatchVars {
    /// `(B * T) x n_mels`, utterance-major.
    mel_pre: Var,
    mel_post: Var,
    stop: Var,
    alignments: Vec<Array2<f64>>,
}

/// Padded batch of utterances.
struct Batch {
    ids: Vec<Vec<usize>>,
    token_lens: Vec<usize>,
    max_len: usize,
}

impl Batch {
    fn new(seqs: &[&TokenSequence], vocab_size: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Shape("empty token sequence".into()));
            }
            if let Some(&id) = seq.ids.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, size: vocab_size });
            }
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let ids = seqs
            .iter()
            .map(|s| {
                let mut v = s.ids.clone();
                v.resize(max_len, crate::frontend::PAD_ID);
                v
            })
            .collect();
        Ok(Batch {
            ids,
            token_lens: seqs.iter().map(|s| s.len()).collect(),
            max_len,
        })
    }

    fn size(&self) -> usize {
        self.ids.len()
    }

    /// `(B * L) x 1` validity mask.
    fn token_mask(&self) -> Array2<f64> {
        let l = self.max_len;
        Array2::from_shape_fn((self.size() * l, 1), |(r, _)| (r % l < self.token_lens[r / l]) as u8 as f64)
    }
}

impl AcousticModel {
    pub fn new(config: AMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mut emb = uniform(&mut rng, c.vocab_size, c.embed_dim, (3.0 / c.embed_dim as f64).sqrt());
        emb.row_mut(crate::frontend::PAD_ID).fill(0.0);
        let embedding = ps.add("encoder.embedding", emb);
        let encoder_convs = (0..c.encoder_conv_layers)
            .map(|i| {
                Linear::new(
                    &mut ps,
                    &mut rng,
                    &format!("encoder.conv{i}"),
                    c.encoder_kernel * c.embed_dim,
                    c.embed_dim,
                    true,
                )
            })
            .collect();
        let half = c.encoder_dim / 2;
        let encoder_fwd = LstmCell::new(&mut ps, &mut rng, "encoder.lstm_fwd", c.embed_dim, half);
        let encoder_bwd = LstmCell::new(&mut ps, &mut rng, "encoder.lstm_bwd", c.embed_dim, half);
        let a = c.attention_dim;
        let query = Linear::new(&mut ps, &mut rng, "attention.query", c.decoder_dim, a, false);
        let memory = Linear::new(&mut ps, &mut rng, "attention.memory", c.encoder_dim, a, true);
        let location_conv = ps.add(
            "attention.location_conv.w",
            crate::nn::glorot(&mut rng, 2 * c.attention_location_kernel, c.attention_location_filters),
        );
        let location_dense = Linear::new(
            &mut ps,
            &mut rng,
            "attention.location_dense",
            c.attention_location_filters,
            a,
            false,
        );
        let score = Linear::new(&mut ps, &mut rng, "attention.score", a, 1, false);
        let mut prenet = Vec::new();
        let mut fan_in = c.n_mels;
        for (i, &d) in c.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(&mut ps, &mut rng, &format!("decoder.prenet{i}"), fan_in, d, true));
            fan_in = d;
        }
        let attention_rnn = LstmCell::new(
            &mut ps,
            &mut rng,
            "decoder.attention_lstm",
            fan_in + c.encoder_dim,
            c.decoder_dim,
        );
        let decoder_rnn = LstmCell::new(
            &mut ps,
            &mut rng,
            "decoder.decoder_lstm",
            c.decoder_dim + c.encoder_dim,
            c.decoder_dim,
        );
        let proj_in = c.decoder_dim + c.encoder_dim;
        let frame = Linear::new(&mut ps, &mut rng, "decoder.frame", proj_in, c.n_mels, true);
        let stop = Linear::new(&mut ps, &mut rng, "decoder.stop", proj_in, 1, true);
        let mut postnet = Vec::new();
        let mut ch = c.n_mels;
        for i in 0..c.postnet_layers {
            let out = if i + 1 == c.postnet_layers { c.n_mels } else { c.postnet_channels };
            postnet.push(Linear::new(
                &mut ps,
                &mut rng,
                &format!("postnet.conv{i}"),
                c.postnet_kernel * ch,
                out,
                true,
            ));
            ch = out;
        }
        Ok(AcousticModel {
            config,
            params: ps,
            layout: Layout {
                embedding,
                encoder_convs,
                encoder_fwd,
                encoder_bwd,
                query,
                memory,
                location_conv,
                location_dense,
                score,
                prenet,
                attention_rnn,
                decoder_rnn,
                frame,
                stop,
                postnet,
            },
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: AMConfig, params: ParamStore) -> Result<Self> {
        let mut model = AcousticModel::new(config, 0)?;
        crate::transfer::adopt_params(&mut model.params, params)?;
        Ok(model)
    }

    pub fn stop_bias_id(&self) -> ParamId {
        self.layout.stop.b.expect("stop head has a bias")
    }

    fn encode_graph(&self, g: &mut Graph, batch: &Batch) -> Var {
        let c = &self.config;
        let (b, l) = (batch.size(), batch.max_len);
        let mask = g.constant(batch.token_mask());
        let flat: Vec<usize> = batch.ids.iter().flatten().copied().collect();
        let emb = g.param(self.layout.embedding);
        let mut x = g.gather_rows(emb, flat);
        x = g.mul_col(x, mask);
        for conv in &self.layout.encoder_convs {
            let patches = g.seq_im2col(x, l, c.encoder_kernel);
            let y = conv.forward(g, patches);
            let y = g.relu(y);
            x = g.mul_col(y, mask);
        }
        let half = c.encoder_dim / 2;
        let zeros = g.constant(Array2::zeros((b, half)));
        let rows_at = |t: usize| (0..b).map(|i| i * l + t).collect::<Vec<_>>();
        let mut fwd = Vec::with_capacity(l);
        let (mut h, mut cell) = (zeros, zeros);
        for t in 0..l {
            let xt = g.gather_rows(x, rows_at(t));
            (h, cell) = self.layout.encoder_fwd.step(g, xt, h, cell);
            fwd.push(h);
        }
        let mut bwd = vec![zeros; l];
        let (mut h, mut cell) = (zeros, zeros);
        for t in (0..l).rev() {
            let xt = g.gather_rows(x, rows_at(t));
            let (hn, cn) = self.layout.encoder_bwd.step(g, xt, h, cell);
            if batch.token_lens.iter().all(|&n| t < n) {
                (h, cell) = (hn, cn);
            } else {
                let m = Array2::from_shape_fn((b, 1), |(i, _)| (t < batch.token_lens[i]) as u8 as f64);
                let keep = g.constant(m.mapv(|v| 1.0 - v));
                let m = g.constant(m);
                h = blend(g, hn, h, m, keep);
                cell = blend(g, cn, cell, m, keep);
            }
            bwd[t] = h;
        }
        let steps: Vec<Var> = (0..l).map(|t| g.concat_cols(&[fwd[t], bwd[t]])).collect();
        let time_major = g.concat_rows(&steps);
        let order: Vec<usize> = (0..b * l).map(|r| (r % l) * b + r / l).collect();
        let memory = g.gather_rows(time_major, order);
        g.mul_col(memory, mask)
    }

    fn memory_graph(&self, g: &mut Graph, memory: Var, token_lens: &[usize], len: usize) -> Memory {
        let projected = self.layout.memory.forward(g, memory);
        let batch = token_lens.len();
        let mask_add = Array2::from_shape_fn((batch, len), |(b, t)| if t < token_lens[b] { 0.0 } else { MASK_NEG });
        Memory {
            memory,
            projected,
            mask_add: g.constant(mask_add),
            batch,
            len,
        }
    }

    /// Location features convolve both the previous and the cumulative
    /// alignment.
    fn attend(&self, g: &mut Graph, mem: &Memory, query: Var, prev_alignment: Var, cumulative: Var) -> (Var, Var) {
        let c = &self.config;
        let (b, l) = (mem.batch, mem.len);
        let q = self.layout.query.forward(g, query);
        let q = g.repeat_rows(q, l);
        let prev = g.reshape(prev_alignment, b * l, 1);
        let prev = g.seq_im2col(prev, l, c.attention_location_kernel);
        let cum = g.reshape(cumulative, b * l, 1);
        let cum = g.seq_im2col(cum, l, c.attention_location_kernel);
        let patches = g.concat_cols(&[prev, cum]);
        let kernel = g.param(self.layout.location_conv);
        let loc = g.matmul(patches, kernel);
        let loc = self.layout.location_dense.forward(g, loc);
        let e = g.add(q, mem.projected);
        let e = g.add(e, loc);
        let e = g.tanh(e);
        let scores = self.layout.score.forward(g, e);
        let scores = g.reshape(scores, b, l);
        let scores = g.add(scores, mem.mask_add);
        let alignment = g.softmax_rows(scores);
        let context = g.weighted_sum(alignment, mem.memory);
        (context, alignment)
    }

    fn initial_state(&self, g: &mut Graph, b: usize, l: usize) -> StepVars {
        let c = &self.config;
        let zeros = g.constant(Array2::zeros((b, c.decoder_dim)));
        let mut align = Array2::zeros((b, l));
        align.column_mut(0).fill(1.0);
        let cumulative = g.constant(align.clone());
        StepVars {
            att_h: zeros,
            att_c: zeros,
            dec_h: zeros,
            dec_c: zeros,
            context: g.constant(Array2::zeros((b, c.encoder_dim))),
            alignment: g.constant(align),
            cumulative,
        }
    }

    fn decode_graph(
        &self,
        g: &mut Graph,
        mem: &Memory,
        prev_frame: Var,
        s: StepVars,
        dropout: Option<&[Array2<f64>]>,
    ) -> (Var, Var, StepVars) {
        let mut x = prev_frame;
        for (i, layer) in self.layout.prenet.iter().enumerate() {
            let y = layer.forward(g, x);
            x = g.relu(y);
            if let Some(masks) = dropout {
                let m = g.constant(masks[i].clone());
                x = g.mul(x, m);
            }
        }
        let inp = g.concat_cols(&[x, s.context]);
        let (att_h, att_c) = self.layout.attention_rnn.step(g, inp, s.att_h, s.att_c);
        let (context, alignment) = self.attend(g, mem, att_h, s.alignment, s.cumulative);
        let cumulative = g.add(s.cumulative, alignment);
        let inp = g.concat_cols(&[att_h, context]);
        let (dec_h, dec_c) = self.layout.decoder_rnn.step(g, inp, s.dec_h, s.dec_c);
        let out = g.concat_cols(&[dec_h, context]);
        let frame = self.layout.frame.forward(g, out);
        let stop = self.layout.stop.forward(g, out);
        (
            frame,
            stop,
            StepVars {
                att_h,
                att_c,
                dec_h,
                dec_c,
                context,
                alignment,
                cumulative,
            },
        )
    }

    /// Postnet residual over utterance-major `(B * T) x n_mels` frames.
    fn postnet_graph(&self, g: &mut Graph, mel_pre: Var, seq_len: usize, frame_mask: Var) -> Var {
        let k = self.config.postnet_kernel;
        let mut x = g.mul_col(mel_pre, frame_mask);
        let last = self.layout.postnet.len() - 1;
        for (i, conv) in self.layout.postnet.iter().enumerate() {
            let patches = g.seq_im2col(x, seq_len, k);
            let y = conv.forward(g, patches);
            x = if i < last { g.tanh(y) } else { y };
            x = g.mul_col(x, frame_mask);
        }
        g.add(mel_pre, x)
    }

    fn dropout_masks(&self, rng: &mut ChaCha8Rng, b: usize) -> Vec<Array2<f64>> {
        let p = self.config.prenet_dropout;
        self.config
            .prenet_dims
            .iter()
            .map(|&d| Array2::from_shape_simple_fn((b, d), || if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }))
            .collect()
    }

    /// Teacher-forced pass over a padded batch. `targets[i]` is `T_i x n_mels`.
    fn forward_batch(
        &self,
        g: &mut Graph,
        seqs: &[&TokenSequence],
        targets: &[&Array2<f64>],
        dropout_seed: Option<u64>,
    ) -> Result<(BatchVars, Array2<f64>)> {
        let c = &self.config;
        let batch = Batch::new(seqs, c.vocab_size)?;
        let b = batch.size();
        let l = batch.max_len;
        for t in targets {
            if t.nrows() == 0 {
                return Err(Error::Shape("zero-length target mel".into()));
            }
            if t.ncols() != c.n_mels {
                return Err(Error::Shape(format!("target has {} mel channels, expected {}", t.ncols(), c.n_mels)));
            }
        }
        let frame_lens: Vec<usize> = targets.iter().map(|t| t.nrows()).collect();
        let t_max = *frame_lens.iter().max().expect("non-empty batch");

        let memory = self.encode_graph(g, &batch);
        let mem = self.memory_graph(g, memory, &batch.token_lens, l);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut tf_rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0) ^ 0x7f4a_7c15);
        let mut state = self.initial_state(g, b, l);
        let mut prev = g.constant(Array2::zeros((b, c.n_mels)));
        let mut frames = Vec::with_capacity(t_max);
        let mut stops = Vec::with_capacity(t_max);
        let mut aligns: Vec<Array2<f64>> = vec![Array2::zeros((t_max, l)); b];
        for t in 0..t_max {
            let masks = rng.as_mut().map(|r| self.dropout_masks(r, b));
            let (frame, stop, next) = self.decode_graph(g, &mem, prev, state, masks.as_deref());
            let a = g.value(next.alignment);
            for (i, al) in aligns.iter_mut().enumerate() {
                al.row_mut(t).assign(&a.row(i));
            }
            frames.push(frame);
            stops.push(stop);
            state = next;
            let own = c.teacher_forcing_ratio < 1.0 && tf_rng.random::<f64>() >= c.teacher_forcing_ratio;
            prev = if own {
                g.constant(g.value(frame).clone())
            } else {
                let gt = Array2::from_shape_fn((b, c.n_mels), |(i, m)| {
                    if t < frame_lens[i] {
                        targets[i][[t, m]]
                    } else {
                        0.0
                    }
                });
                g.constant(gt)
            };
        }
        let order: Vec<usize> = (0..b * t_max).map(|r| (r % t_max) * b + r / t_max).collect();
        let mel_pre = g.concat_rows(&frames);
        let mel_pre = g.gather_rows(mel_pre, order.clone());
        let stop = g.concat_rows(&stops);
        let stop = g.gather_rows(stop, order);
        let frame_mask = Array2::from_shape_fn((b * t_max, 1), |(r, _)| (r % t_max < frame_lens[r / t_max]) as u8 as f64);
        let fm = g.constant(frame_mask.clone());
        let mel_post = self.postnet_graph(g, mel_pre, t_max, fm);
        for (i, al) in aligns.iter_mut().enumerate() {
            *al = al.slice(s![..frame_lens[i], ..batch.token_lens[i]]).to_owned();
        }
        Ok((
            BatchVars {
                mel_pre,
                mel_post,
                stop,
                alignments: aligns,
            },
            frame_mask,
        ))
    }

    /// Masked training loss of a batch and, on request, its gradients.
    pub fn batch_loss(
        &self,
        seqs: &[&TokenSequence],
        mels: &[&MelSpectrogram],
        dropout_seed: Option<u64>,
        want_grads: bool,
    ) -> Result<(LossComponents, Option<Vec<Option<Array2<f64>>>>)> {
        if seqs.len() != mels.len() {
            return Err(Error::Shape("token and mel batch sizes differ".into()));
        }
        let targets: Vec<&Array2<f64>> = mels.iter().map(|m| &m.frames).collect();
        let mut g = Graph::new(&self.params);
        let (vars, frame_mask) = self.forward_batch(&mut g, seqs, &targets, dropout_seed)?;
        let n_mels = self.config.n_mels;
        let t_max = targets.iter().map(|t| t.nrows()).max().unwrap_or(0);
        let b = targets.len();
        let mut target = Array2::zeros((b * t_max, n_mels));
        let mut stop_target = Array2::zeros((b * t_max, 1));
        for (i, t) in targets.iter().enumerate() {
            target.slice_mut(s![i * t_max..i * t_max + t.nrows(), ..]).assign(t);
            stop_target[[i * t_max + t.nrows() - 1, 0]] = 1.0;
        }
        let n_frames = frame_mask.sum();
        let mel_mask = Array2::from_shape_fn((b * t_max, n_mels), |(r, _)| frame_mask[[r, 0]]);
        let denom = n_frames * n_mels as f64;
        let l_pre = g.masked_mse(vars.mel_pre, &target, &mel_mask, denom);
        let l_post = g.masked_mse(vars.mel_post, &target, &mel_mask, denom);
        let l_stop = g.masked_bce_logits(vars.stop, &stop_target, &frame_mask, n_frames);
        let total = g.add_all(&[l_pre, l_post, l_stop]);
        let comps = LossComponents {
            mel_pre: g.scalar(l_pre),
            mel_post: g.scalar(l_post),
            stop: g.scalar(l_stop),
            total: g.scalar(total),
        };
        if !comps.total.is_finite() {
            return Err(Error::Diverged(format!("acoustic loss is {} ({comps:?})", comps.total)));
        }
        Ok((comps, want_grads.then(|| g.backward(total))))
    }

    /// Encoder outputs, `L x encoder_dim`.
    pub fn encode_tokens(&self, ids: &TokenSequence) -> Result<Array2<f64>> {
        let batch = Batch::new(&[ids], self.config.vocab_size)?;
        let mut g = Graph::new(&self.params);
        let m = self.encode_graph(&mut g, &batch);
        Ok(g.value(m).clone())
    }

    /// One location-sensitive attention step over `memory` (`L x encoder_dim`).
    pub fn attention_step(
        &self,
        query: ArrayView1<f64>,
        memory: &Array2<f64>,
        prev_alignment: ArrayView1<f64>,
        cumulative: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let mut g = Graph::new(&self.params);
        let l = memory.nrows();
        let mv = g.constant(memory.clone());
        let mem = self.memory_graph(&mut g, mv, &[l], l);
        let q = g.constant(query.to_owned().insert_axis(Axis(0)));
        let prev = g.constant(prev_alignment.to_owned().insert_axis(Axis(0)));
        let cum = g.constant(cumulative.to_owned().insert_axis(Axis(0)));
        let (ctx, al) = self.attend(&mut g, &mem, q, prev, cum);
        (g.value(ctx).row(0).to_owned(), g.value(al).row(0).to_owned())
    }

    pub fn initial_decoder_state(&self, encoder_steps: usize) -> DecoderState {
        let c = &self.config;
        let mut alignment = Array1::zeros(encoder_steps);
        alignment[0] = 1.0;
        DecoderState {
            attention_h: Array1::zeros(c.decoder_dim),
            attention_c: Array1::zeros(c.decoder_dim),
            decoder_h: Array1::zeros(c.decoder_dim),
            decoder_c: Array1::zeros(c.decoder_dim),
            context: Array1::zeros(c.encoder_dim),
            cumulative: alignment.clone(),
            alignment,
        }
    }

    /// One inference decoder step (no dropout).
    pub fn decode_step(&self, prev_frame: ArrayView1<f64>, state: &DecoderState, memory: &Array2<f64>) -> DecodeStep {
        let mut g = Graph::new(&self.params);
        let l = memory.nrows();
        let mv = g.constant(memory.clone());
        let mem = self.memory_graph(&mut g, mv, &[l], l);
        let row = |g: &mut Graph, v: &Array1<f64>| g.constant(v.clone().insert_axis(Axis(0)));
        let s = StepVars {
            att_h: row(&mut g, &state.attention_h),
            att_c: row(&mut g, &state.attention_c),
            dec_h: row(&mut g, &state.decoder_h),
            dec_c: row(&mut g, &state.decoder_c),
            context: row(&mut g, &state.context),
            alignment: row(&mut g, &state.alignment),
            cumulative: row(&mut g, &state.cumulative),
        };
        let prev = g.constant(prev_frame.to_owned().insert_axis(Axis(0)));
        let (frame, stop, n) = self.decode_graph(&mut g, &mem, prev, s, None);
        let get = |v: Var| g.value(v).row(0).to_owned();
        let alignment = get(n.alignment);
        DecodeStep {
            frame: get(frame),
            stop_logit: g.value(stop)[[0, 0]],
            state: DecoderState {
                attention_h: get(n.att_h),
                attention_c: get(n.att_c),
                decoder_h: get(n.dec_h),
                decoder_c: get(n.dec_c),
                context: get(n.context),
                alignment: alignment.clone(),
                cumulative: get(n.cumulative),
            },
            alignment,
        }
    }

    /// Applies the postnet to a `T x n_mels` pre-net prediction.
    pub fn postnet(&self, mel_pre: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(mel_pre.clone());
        let mask = g.constant(Array2::ones((mel_pre.nrows(), 1)));
        let y = self.postnet_graph(&mut g, x, mel_pre.nrows(), mask);
        g.value(y).clone()
    }

    /// Teacher-forced outputs for one utterance, time-aligned with `gt_mel`.
    pub fn forward_teacher_forced(&self, ids: &TokenSequence, gt_mel: &MelSpectrogram) -> Result<AMOutput> {
        let mut g = Graph::new(&self.params);
        let (vars, _) = self.forward_batch(&mut g, &[ids], &[&gt_mel.frames], None)?;
        Ok(AMOutput {
            mel_pre: g.value(vars.mel_pre).clone(),
            mel_post: g.value(vars.mel_post).clone(),
            stop_logits: g.value(vars.stop).column(0).to_vec(),
            alignments: Alignments(vars.alignments.into_iter().next().expect("one utterance")),
        })
    }

    /// Post-net mel predicted with ground-truth previous frames.
    pub fn teacher_forced_predict(&self, ids: &TokenSequence, gt_mel: &MelSpectrogram) -> Result<MelSpectrogram> {
        let out = self.forward_teacher_forced(ids, gt_mel)?;
        Ok(MelSpectrogram {
            frames: out.mel_post,
            hop_s: gt_mel.hop_s,
        })
    }

    /// Free-running synthesis; stops once `sigmoid(stop) > stop_threshold`
    /// (that frame included) or at the step limit.
    pub fn synthesize_mel(&self, ids: &TokenSequence, hop_s: f64) -> Result<Synthesis> {
        let memory = self.encode_tokens(ids)?;
        let max_steps = self.config.max_steps_for(ids.len());
        let mut state = self.initial_decoder_state(memory.nrows());
        let mut prev = Array1::zeros(self.config.n_mels);
        let mut frames = Vec::new();
        let mut aligns = Vec::new();
        let mut stopped = false;
        while frames.len() < max_steps {
            let step = self.decode_step(prev.view(), &state, &memory);
            frames.push(step.frame.clone());
            aligns.push(step.alignment);
            prev = step.frame;
            state = step.state;
            if crate::nn::sigmoid(step.stop_logit) > self.config.stop_threshold {
                stopped = true;
                break;
            }
        }
        assert!(frames.len() <= max_steps, "decoder exceeded its step limit");
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let mel_pre = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let views: Vec<_> = aligns.iter().map(|a| a.view()).collect();
        let alignments = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Synthesis {
            mel: MelSpectrogram {
                frames: self.postnet(&mel_pre),
                hop_s,
            },
            alignments: Alignments(alignments),
            stopped_naturally: stopped,
        })
    }
}

fn blend(g: &mut Graph, new: Var, old: Var, m: Var, keep: Var) -> Var {
    let a = g.mul_col(new, m);
    let b = g.mul_col(old, keep);
    g.add(a, b)
}

/// Model, optimiser and dropout RNG for acoustic-model training.
pub struct AMTrainer {
    pub model: AcousticModel,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl AMTrainer {
    pub fn new(model: AcousticModel, learning_rate: f64, clip_norm: f64, seed: u64) -> Self {
        let opt = Adam::new(&model.params, learning_rate, Some(clip_norm));
        AMTrainer {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// One optimiser step; returns the loss before the update.
    pub fn train_step(&mut self, seqs: &[&TokenSequence], mels: &[&MelSpectrogram]) -> Result<LossComponents> {
        let seed = self.rng.random();
        let (loss, grads) = self.model.batch_loss(seqs, mels, Some(seed), true)?;
        self.opt.step(&mut self.model.params, &grads.expect("grads requested"))?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Lang;
    use crate::nn::gradcheck::{check_gradients, GradCheck};

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            lang: Lang::Mand,
        }
    }

    fn mel(rng: &mut ChaCha8Rng, t: usize, m: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: Array2::from_shape_simple_fn((t, m), || rng.random_range(-1.0..1.0)),
            hop_s: 0.0125,
        }
    }

    fn tiny(seed: u64) -> AcousticModel {
        AcousticModel::new(AMConfig::tiny(9, 5), seed).unwrap()
    }

    #[test]
    fn encoder_shapes_purity_and_sensitivity() {
        let m = AcousticModel::new(AMConfig::new(20), 1).unwrap();
        let ids: Vec<usize> = (1..14).collect();
        let a = m.encode_tokens(&seq(&ids)).unwrap();
        assert_eq!(a.dim(), (13, 64));
        assert_eq!(a, m.encode_tokens(&seq(&ids)).unwrap());
        let mut swapped = ids.clone();
        swapped.swap(4, 8);
        let b = m.encode_tokens(&seq(&swapped)).unwrap();
        assert_ne!(a.row(4), b.row(4));
        assert_ne!(a.row(8), b.row(8));
        assert!(matches!(
            m.encode_tokens(&seq(&[1, 20])),
            Err(Error::TokenOutOfRange { id: 20, size: 20 })
        ));
    }

    #[test]
    fn attention_properties() {
        let m = AcousticModel::new(AMConfig::new(20), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Array1::from_shape_simple_fn(128, || rng.random_range(-1.0..1.0));
        let single = Array2::from_shape_simple_fn((1, 64), || rng.random_range(-1.0..1.0));
        let (ctx, al) = m.attention_step(q.view(), &single, ndarray::aview1(&[1.0]), ndarray::aview1(&[1.0]));
        assert_eq!(al.to_vec(), vec![1.0]);
        assert_eq!(ctx, single.row(0));
        let mem = Array2::from_shape_simple_fn((7, 64), || rng.random_range(-1.0..1.0));
        let prev = Array1::from_elem(7, 1.0 / 7.0);
        let (_, al) = m.attention_step(q.view(), &mem, prev.view(), prev.view());
        assert!((al.sum() - 1.0).abs() < 1e-6);
        assert!(al.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn context_is_memory_row_under_one_hot_alignment() {
        let m = AcousticModel::new(AMConfig::new(20), 2).unwrap();
        let mut g = Graph::new(&m.params);
        let mem = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let mv = g.constant(mem.clone());
        let mut a = Array2::zeros((1, 5));
        a[[0, 3]] = 1.0;
        let av = g.constant(a);
        let ctx = g.weighted_sum(av, mv);
        assert_eq!(g.value(ctx).row(0), mem.row(3));
    }

    #[test]
    fn decode_step_is_deterministic_and_finite() {
        let m = AcousticModel::new(AMConfig::new(20), 4).unwrap();
        let memory = m.encode_tokens(&seq(&[3, 4, 5, 6])).unwrap();
        let state = m.initial_decoder_state(4);
        let prev = Array1::zeros(80);
        let a = m.decode_step(prev.view(), &state, &memory);
        let b = m.decode_step(prev.view(), &state, &memory);
        assert_eq!(a, b);
        assert_eq!(a.frame.len(), 80);
        assert!(a.frame.iter().all(|v| v.is_finite()));
        assert!((a.alignment.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_stop_logits_give_ln2() {
        let mut m = tiny(5);
        let sid = m.layout.stop.w;
        m.params.get_mut(sid).fill(0.0);
        let bid = m.stop_bias_id();
        m.params.get_mut(bid).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = mel(&mut rng, 1, 5);
        let (loss, _) = m.batch_loss(&[&seq(&[3, 4])], &[&target], None, false).unwrap();
        assert!((loss.stop - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn padding_does_not_change_loss() {
        let m = tiny(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s1, s2, s3) = (seq(&[3, 4, 5]), seq(&[6, 7, 8, 3, 4]), seq(&[5, 6, 7, 8, 3, 4, 5, 6, 7, 8]));
        let (m1, m2, m3) = (mel(&mut rng, 4, 5), mel(&mut rng, 6, 5), mel(&mut rng, 12, 5));
        let (pair, _) = m.batch_loss(&[&s1, &s2], &[&m1, &m2], None, false).unwrap();
        let (a, _) = m.batch_loss(&[&s1], &[&m1], None, false).unwrap();
        let (b, _) = m.batch_loss(&[&s2], &[&m2], None, false).unwrap();
        let frames = 10.0;
        let expect = (a.mel_pre * 4.0 + b.mel_pre * 6.0) / frames;
        assert!((pair.mel_pre - expect).abs() < 1e-12);
        let expect = (a.stop * 4.0 + b.stop * 6.0) / frames;
        assert!((pair.stop - expect).abs() < 1e-12);
        // Longer companion: more padding on the short utterance.
        let (x, _) = m.batch_loss(&[&s1, &s3], &[&m1, &m3], None, false).unwrap();
        let (c, _) = m.batch_loss(&[&s3], &[&m3], None, false).unwrap();
        let expect = (a.mel_post * 4.0 + c.mel_post * 12.0) / 16.0;
        assert!((x.mel_post - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = tiny(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Zero biases put relu inputs exactly on the kink at the all-zero
        // first decoder input; move them off it.
        for id in 0..m.params.len() {
            let noise = uniform(&mut rng, m.params.get(id).nrows(), m.params.get(id).ncols(), 0.1);
            *m.params.get_mut(id) += &noise;
        }
        let (s1, s2) = (seq(&[3, 4, 5]), seq(&[6, 7]));
        let (m1, m2) = (mel(&mut rng, 4, 5), mel(&mut rng, 3, 5));
        let loss = |p: &ParamStore| {
            let mm = AcousticModel {
                params: p.clone(),
                ..m.clone()
            };
            mm.batch_loss(&[&s1, &s2], &[&m1, &m2], Some(11), false).unwrap().0.total
        };
        let (_, grads) = m.batch_loss(&[&s1, &s2], &[&m1, &m2], Some(11), true).unwrap();
        let report = check_gradients(&m.params, loss, &grads.unwrap(), &GradCheck::default());
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn forced_non_stop_runs_to_limit() {
        let mut m = tiny(9);
        let bid = m.stop_bias_id();
        m.params.get_mut(bid).fill(-1e6);
        let s = seq(&[3, 4, 5]);
        let out = m.synthesize_mel(&s, 0.0125).unwrap();
        assert_eq!(out.mel.n_frames(), 30);
        assert!(!out.stopped_naturally);
        for row in out.alignments.0.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        assert_eq!(out, m.synthesize_mel(&s, 0.0125).unwrap());
    }

    #[test]
    fn teacher_forced_shapes_and_errors() {
        let m = tiny(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = mel(&mut rng, 7, 5);
        let p = m.teacher_forced_predict(&seq(&[3, 4]), &gt).unwrap();
        assert_eq!(p.frames.dim(), (7, 5));
        let empty = MelSpectrogram {
            frames: Array2::zeros((0, 5)),
            hop_s: 0.0125,
        };
        assert!(m.teacher_forced_predict(&seq(&[3]), &empty).is_err());
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let cfg = AMConfig {
            decoder_dim: 32,
            encoder_dim: 16,
            embed_dim: 16,
            prenet_dims: vec![16, 16],
            ..AMConfig::new(9)
        };
        let cfg = AMConfig { n_mels: 8, ..cfg };
        let mut trainer = AMTrainer::new(AcousticModel::new(cfg, 1).unwrap(), 1e-3, 1.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s1, s2) = (seq(&[3, 4, 5]), seq(&[6, 7]));
        let (m1, m2) = (mel(&mut rng, 12, 8), mel(&mut rng, 8, 8));
        let first = trainer.train_step(&[&s1, &s2], &[&m1, &m2]).unwrap().total;
        let mut last = first;
        for _ in 1..200 {
            last = trainer.train_step(&[&s1, &s2], &[&m1, &m2]).unwrap().total;
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }
}
