//! Frame encoder, shot pooling, task heads and video-level predictors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{OptimizerState, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const WS_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const ROTATION_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    BatchNorm,
    /// Group normalization with standardized convolution weights.
    GroupNormWs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    PairMlp,
    Recurrent,
    OrderMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub shots: usize,
    pub mlp_hidden: usize,
    pub mlp_output: usize,
    pub recurrent_hidden: usize,
    pub recurrent_layers: usize,
    pub horizon: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Recurrent,
            shots: 4,
            mlp_hidden: 64,
            mlp_output: 32,
            recurrent_hidden: 64,
            recurrent_layers: 2,
            horizon: 1,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("predictor horizon must be >= 1".into()));
        }
        match self.kind {
            PredictorKind::PairMlp if self.shots != 2 => {
                Err(Error::Config("pair-mlp predictor requires exactly 2 shots".into()))
            }
            PredictorKind::Recurrent if self.shots < 2 || self.horizon >= self.shots => Err(
                Error::Config("recurrent predictor requires shots >= 2 and horizon < shots".into()),
            ),
            PredictorKind::OrderMlp if self.shots < 2 => {
                Err(Error::Config("order predictor requires shots >= 2".into()))
            }
            _ if self.mlp_hidden == 0 || self.mlp_output == 0 || self.recurrent_hidden == 0 => {
                Err(Error::Config("predictor widths must be >= 1".into()))
            }
            _ if self.recurrent_layers == 0 => Err(Error::Config("recurrent_layers must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub width_multiplier: usize,
    pub norm: NormKind,
    pub groups: usize,
    pub embed_dim: usize,
    pub exemplar_outputs: usize,
    pub video_projection_dim: usize,
    /// 0 disables the supervised classifier head.
    pub classifier_outputs: usize,
    pub predictor: PredictorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            channels: vec![16, 32, 64, 128],
            width_multiplier: 1,
            norm: NormKind::BatchNorm,
            groups: 8,
            embed_dim: 128,
            exemplar_outputs: 64,
            video_projection_dim: 64,
            classifier_outputs: 0,
            predictor: PredictorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_size,
            self.input_channels,
            self.width_multiplier,
            self.embed_dim,
            self.exemplar_outputs,
            self.video_projection_dim,
        ];
        if dims.iter().any(|&d| d == 0) || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.input_size >> self.channels.len() == 0 {
            return Err(Error::Config(format!(
                "input size {} too small for {} stride-2 blocks",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.norm == NormKind::GroupNormWs {
            if let Some(c) = self.widths().into_iter().find(|c| c % self.groups != 0) {
                return Err(Error::Config(format!(
                    "group count {} does not divide channel width {c}",
                    self.groups
                )));
            }
        }
        self.predictor.validate()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c * self.width_multiplier).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm; running averages are updated by the caller.
    Train,
    /// Frozen running statistics; a pure function of parameters and input.
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Exemplar,
    Rotation,
    Classifier,
    VideoProjection,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Pair { phi1: Mlp, phi2: Mlp },
    Recurrent { layers: Vec<Linear>, out: Linear },
    Order(Mlp),
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<ConvBlock>,
    fc: Linear,
    exemplar: Linear,
    rotation: Linear,
    projection: Linear,
    classifier: Option<Linear>,
    predictor: Predictor,
}

/// Parameters of the encoder, heads and predictor, plus their wiring.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Encoder output on a tape, with the batch-norm nodes whose statistics feed
/// the running averages.
pub struct Encoded {
    pub prelogits: Var,
    norm_nodes: Vec<(usize, Var)>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect(),
    )
}

fn add_linear<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Linear {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Linear {
        w: store.add(format!("{name}/w"), uniform(rng, &[fan_in, fan_out], bound), true),
        b: store.add(format!("{name}/b"), Tensor::zeros(&[fan_out]), false),
    }
}

fn add_mlp<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, hidden: usize, out: usize) -> Mlp {
    Mlp {
        hidden: add_linear(store, rng, &format!("{name}/hidden"), fan_in, hidden),
        out: add_linear(store, rng, &format!("{name}/out"), hidden, out),
    }
}

impl<T: Real> ModelBundle<T> {
    /// Builds a freshly initialized model: fan-in-scaled uniform weights,
    /// zero biases, unit norm scales, forget-gate bias 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut cin = config.input_channels;
        for (i, &c) in config.widths().iter().enumerate() {
            let fan_in = 9 * cin;
            let w = store.add(
                format!("encoder/block{i}/conv"),
                uniform(&mut rng, &[3, 3, cin, c], (6.0 / fan_in as f64).sqrt()),
                true,
            );
            let gamma = store.add(format!("encoder/block{i}/norm/gamma"), Tensor::full(&[c], T::one()), false);
            let beta = store.add(format!("encoder/block{i}/norm/beta"), Tensor::zeros(&[c]), false);
            let (running_mean, running_var) = if config.norm == NormKind::BatchNorm {
                (
                    Some(store.add_buffer(format!("encoder/block{i}/norm/running_mean"), Tensor::zeros(&[c]))),
                    Some(store.add_buffer(
                        format!("encoder/block{i}/norm/running_var"),
                        Tensor::full(&[c], T::one()),
                    )),
                )
            } else {
                (None, None)
            };
            blocks.push(ConvBlock {
                w,
                gamma,
                beta,
                running_mean,
                running_var,
            });
            cin = c;
        }
        let d = config.embed_dim;
        let fc = add_linear(&mut store, &mut rng, "encoder/fc", cin, d);
        let exemplar = add_linear(&mut store, &mut rng, "head/exemplar", d, config.exemplar_outputs);
        let rotation = add_linear(&mut store, &mut rng, "head/rotation", d, ROTATION_CLASSES);
        let projection = add_linear(&mut store, &mut rng, "head/video_projection", d, config.video_projection_dim);
        let classifier = (config.classifier_outputs > 0)
            .then(|| add_linear(&mut store, &mut rng, "head/classifier", d, config.classifier_outputs));

        let p = &config.predictor;
        let dv = config.video_projection_dim;
        let predictor = match p.kind {
            PredictorKind::PairMlp => Predictor::Pair {
                phi1: add_mlp(&mut store, &mut rng, "predictor/phi1", dv, p.mlp_hidden, p.mlp_output),
                phi2: add_mlp(&mut store, &mut rng, "predictor/phi2", dv, p.mlp_hidden, p.mlp_output),
            },
            PredictorKind::Recurrent => {
                let h = p.recurrent_hidden;
                let mut layers = Vec::new();
                for l in 0..p.recurrent_layers {
                    let input = if l == 0 { dv } else { h };
                    let cell = add_linear(&mut store, &mut rng, &format!("predictor/lstm{l}"), input + h, 4 * h);
                    // gate order i, f, g, o
                    let b = store.value_mut(cell.b).data_mut();
                    b[h..2 * h].iter_mut().for_each(|v| *v = T::one());
                    layers.push(cell);
                }
                let out = add_linear(&mut store, &mut rng, "predictor/out", h, dv);
                Predictor::Recurrent { layers, out }
            }
            PredictorKind::OrderMlp => Predictor::Order(add_mlp(
                &mut store,
                &mut rng,
                "predictor/order",
                p.shots * dv,
                p.mlp_hidden,
                1,
            )),
        };
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                blocks,
                fc,
                exemplar,
                rotation,
                projection,
                classifier,
                predictor,
            },
        })
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn predictor(&self) -> &Predictor {
        &self.layout.predictor
    }

    pub fn head_linear(&self, head: Head) -> Result<Linear> {
        match head {
            Head::Exemplar => Ok(self.layout.exemplar),
            Head::Rotation => Ok(self.layout.rotation),
            Head::VideoProjection => Ok(self.layout.projection),
            Head::Classifier => self
                .layout
                .classifier
                .ok_or_else(|| Error::invalid("model has no classifier head")),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Parameter ids of the convolution kernels, in depth order.
    pub fn conv_kernels(&self) -> Vec<ParamId> {
        self.layout.blocks.iter().map(|b| b.w).collect()
    }

    pub fn encoder_fc(&self) -> Linear {
        self.layout.fc
    }

    /// Parameters touched only by the video-level branch (projection head and predictor).
    pub fn video_branch_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.layout.projection.w, self.layout.projection.b];
        let mut push = |l: &Linear| ids.extend([l.w, l.b]);
        match &self.layout.predictor {
            Predictor::Pair { phi1, phi2 } => {
                for m in [phi1, phi2] {
                    push(&m.hidden);
                    push(&m.out);
                }
            }
            Predictor::Recurrent { layers, out } => {
                layers.iter().for_each(&mut push);
                push(out);
            }
            Predictor::Order(m) => {
                push(&m.hidden);
                push(&m.out);
            }
        }
        ids
    }

    /// Encoder trunk: frames `[B, H, W, C]` to pre-logits `[B, D]`.
    pub fn encode(&self, tape: &mut Tape<T>, frames: Var, mode: Mode) -> Result<Encoded> {
        let s = tape.shape(frames).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != size || s[2] != size || s[3] != self.config.input_channels {
            return Err(Error::Shape {
                op: "encode",
                lhs: s,
                rhs: vec![0, size, size, self.config.input_channels],
            });
        }
        let batch = s[0];
        let mut h = frames;
        let mut norm_nodes = Vec::new();
        for (i, block) in self.layout.blocks.iter().enumerate() {
            let w = tape.param(&self.params, block.w);
            let gamma = tape.param(&self.params, block.gamma);
            let beta = tape.param(&self.params, block.beta);
            h = match self.config.norm {
                NormKind::GroupNormWs => {
                    let ws = tape.weight_standardize(w, WS_EPS)?;
                    let y = tape.conv2d(h, ws, 2, 1)?;
                    let y = tape.group_norm(y, self.config.groups, NORM_EPS)?;
                    tape.channel_affine(y, gamma, beta)?
                }
                NormKind::BatchNorm => {
                    let y = tape.conv2d(h, w, 2, 1)?;
                    match mode {
                        Mode::Train => {
                            let n = tape.channel_norm(y, NORM_EPS)?;
                            norm_nodes.push((i, n));
                            tape.channel_affine(n, gamma, beta)?
                        }
                        Mode::Inference => {
                            let (scale, shift) = self.frozen_bn_affine(block);
                            let scale = tape.input(scale);
                            let shift = tape.input(shift);
                            let y = tape.channel_affine(y, scale, shift)?;
                            tape.channel_affine(y, gamma, beta)?
                        }
                    }
                }
            };
            h = tape.relu(h)?;
        }
        let hs = tape.shape(h).to_vec();
        let (spatial, c) = (hs[1] * hs[2], hs[3]);
        let pooled = tape.mean_axis(h, batch, spatial, c, vec![batch, c])?;
        let fc = self.layout.fc;
        let (w, b) = (tape.param(&self.params, fc.w), tape.param(&self.params, fc.b));
        let prelogits = tape.linear(pooled, w, b)?;
        Ok(Encoded { prelogits, norm_nodes })
    }

    /// Normalization by running statistics, as a per-channel affine map.
    fn frozen_bn_affine(&self, block: &ConvBlock) -> (Tensor<T>, Tensor<T>) {
        let rm = self.params.value(block.running_mean.expect("batch norm block")).data();
        let rv = self.params.value(block.running_var.expect("batch norm block")).data();
        let scale: Vec<T> = rv.iter().map(|&v| T::one() / (v + T::of(NORM_EPS)).sqrt()).collect();
        let shift: Vec<T> = rm.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
        let c = scale.len();
        (Tensor::new(vec![c], scale), Tensor::new(vec![c], shift))
    }

    /// Folds the batch statistics of a training-mode forward into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, encoded: &Encoded) {
        let m = T::of(BN_MOMENTUM);
        for &(i, node) in &encoded.norm_nodes {
            let block = self.layout.blocks[i];
            let Some((mean, var)) = tape.norm_stats(node) else { continue };
            for (id, batch) in [(block.running_mean, mean), (block.running_var, var)] {
                let Some(id) = id else { continue };
                for (r, b) in self.params.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
    }

    /// Linear head on `[rows, D]` inputs. The exemplar head is L2-normalized.
    pub fn apply_head(&self, tape: &mut Tape<T>, x: Var, head: Head) -> Result<Var> {
        let lin = self.head_linear(head)?;
        let y = self.linear(tape, x, lin)?;
        match head {
            Head::Exemplar => tape.l2_normalize_rows(y),
            _ => Ok(y),
        }
    }

    pub fn linear(&self, tape: &mut Tape<T>, x: Var, lin: Linear) -> Result<Var> {
        let w = tape.param(&self.params, lin.w);
        let b = tape.param(&self.params, lin.b);
        let expected = self.params.value(lin.w).shape()[0];
        if tape.value(x).cols() != expected {
            return Err(Error::Shape {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: self.params.value(lin.w).shape().to_vec(),
            });
        }
        tape.linear(x, w, b)
    }

    pub fn mlp(&self, tape: &mut Tape<T>, x: Var, mlp: &Mlp) -> Result<Var> {
        let h = self.linear(tape, x, mlp.hidden)?;
        let h = tape.relu(h)?;
        self.linear(tape, h, mlp.out)
    }

    /// Score matrix `φ1(pred_rows) · φ2(target_rows)ᵀ` for the pair predictor.
    pub fn pair_scores(&self, tape: &mut Tape<T>, context: Var, targets: Var) -> Result<Var> {
        let Predictor::Pair { phi1, phi2 } = &self.layout.predictor else {
            return Err(Error::invalid("model predictor is not pair-mlp"));
        };
        let (phi1, phi2) = (*phi1, *phi2);
        let a = self.mlp(tape, context, &phi1)?;
        let b = self.mlp(tape, targets, &phi2)?;
        tape.matmul(a, b, true)
    }

    /// Runs the recurrent predictor over `steps` consecutive inputs per video.
    ///
    /// `shots` is `[videos·K, D']` ordered video-major. Returns predictions
    /// `[videos·steps, D']` (video-major), where row `(i, s)` depends only on
    /// shots `0..=s` of video `i` and predicts shot `s + horizon`.
    pub fn predict_sequence(&self, tape: &mut Tape<T>, shots: Var, videos: usize, k: usize) -> Result<Var> {
        let Predictor::Recurrent { layers, out } = &self.layout.predictor else {
            return Err(Error::invalid("model predictor is not recurrent"));
        };
        let horizon = self.config.predictor.horizon;
        if k < 2 || horizon >= k {
            return Err(Error::invalid(format!(
                "sequence prediction needs K >= 2 and horizon < K (K = {k}, horizon = {horizon})"
            )));
        }
        let dv = tape.value(shots).cols();
        if tape.value(shots).rows() != videos * k {
            return Err(Error::Shape {
                op: "predict_sequence",
                lhs: tape.shape(shots).to_vec(),
                rhs: vec![videos * k, dv],
            });
        }
        let h = self.config.predictor.recurrent_hidden;
        let seq = tape.reshape(shots, vec![videos, k * dv])?;
        let zeros = tape.input(Tensor::zeros(&[videos, h]));
        let mut state: Vec<(Var, Var)> = vec![(zeros, zeros); layers.len()];
        let steps = k - horizon;
        let mut outputs = Vec::with_capacity(steps);
        for s in 0..steps {
            let mut x = tape.slice_cols(seq, s * dv, dv)?;
            for (l, cell) in layers.iter().enumerate() {
                let (hp, cp) = state[l];
                let (hn, cn) = self.lstm_step(tape, *cell, x, hp, cp, h)?;
                state[l] = (hn, cn);
                x = hn;
            }
            outputs.push(self.linear(tape, x, *out)?);
        }
        let cat = tape.concat(&outputs)?;
        tape.reshape(cat, vec![videos * steps, dv])
    }

    /// One LSTM cell update; gates ordered input, forget, cell, output.
    pub fn lstm_step(&self, tape: &mut Tape<T>, cell: Linear, x: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
        let xh = tape.concat(&[x, h])?;
        let gates = self.linear(tape, xh, cell)?;
        let i = tape.slice_cols(gates, 0, hidden)?;
        let f = tape.slice_cols(gates, hidden, hidden)?;
        let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Order logits for `[videos, K·D']` rows of concatenated shot embeddings.
    pub fn order_logits(&self, tape: &mut Tape<T>, concatenated: Var) -> Result<Var> {
        let Predictor::Order(mlp) = &self.layout.predictor else {
            return Err(Error::invalid("model predictor is not order-mlp"));
        };
        let mlp = *mlp;
        let expected = self.config.predictor.shots * self.config.video_projection_dim;
        if tape.value(concatenated).cols() != expected {
            return Err(Error::Shape {
                op: "order_logit",
                lhs: tape.shape(concatenated).to_vec(),
                rhs: vec![expected],
            });
        }
        let y = self.mlp(tape, concatenated, &mlp)?;
        let n = tape.value(y).len();
        tape.reshape(y, vec![n])
    }

    /// Inference-mode pre-logits for a batch of frames, `[B, D]`.
    pub fn encode_frames(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.try_input(frames.clone())?;
        let enc = self.encode(&mut tape, x, Mode::Inference)?;
        Ok(tape.value(enc.prelogits).clone())
    }

    /// Inference-mode pre-logits for many frames, processed in chunks.
    pub fn encode_frames_chunked(&self, frames: &[T], count: usize, chunk: usize) -> Result<Tensor<T>> {
        let size = self.config.input_size;
        let per = size * size * self.config.input_channels;
        if frames.len() != count * per {
            return Err(Error::Shape {
                op: "encode_frames",
                lhs: vec![frames.len()],
                rhs: vec![count, size, size, self.config.input_channels],
            });
        }
        let d = self.embed_dim();
        let mut out = Vec::with_capacity(count * d);
        for start in (0..count).step_by(chunk.max(1)) {
            let n = chunk.min(count - start);
            let t = Tensor::new(
                vec![n, size, size, self.config.input_channels],
                frames[start * per..(start + n) * per].to_vec(),
            );
            out.extend_from_slice(self.encode_frames(&t)?.data());
        }
        Ok(Tensor::new(vec![count, d], out))
    }

    /// Single-frame embedding (inference mode).
    pub fn encode_frame(&self, frame: &Tensor<T>) -> Result<Vec<T>> {
        let s = frame.shape();
        let batch = frame.clone().reshaped(std::iter::once(1).chain(s.iter().copied()).collect());
        Ok(self.encode_frames(&batch)?.into_data())
    }

    /// Snapshot of every parameter plus (optionally) optimizer state.
    pub fn to_checkpoint(&self, optimizer: Option<&OptimizerState<T>>, extra: serde_json::Value) -> Checkpoint {
        let mut records: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.cast()))
            .collect();
        let mut meta = serde_json::json!({
            "model": self.config,
            "params": self.params.len(),
            "extra": extra,
        });
        if let Some(opt) = optimizer {
            meta["optimizer"] = serde_json::json!({
                "step": opt.step,
                "base_lr": opt.base_lr,
                "momentum": opt.momentum,
                "weight_decay": opt.weight_decay,
            });
            for ((_, p), buf) in self.params.iter().zip(&opt.momentum_buffers) {
                records.push((format!("momentum/{}", p.name), buf.cast()));
            }
        }
        Checkpoint { meta, records }
    }

    /// Restores a model (and optimizer state if present) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<OptimizerState<T>>)> {
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))?;
        let mut bundle = Self::new(config, 0)?;
        bundle.load_params(ck)?;
        let opt = match ck.meta.get("optimizer") {
            Some(o) => {
                let mut state = OptimizerState::new(
                    &bundle.params,
                    o["base_lr"].as_f64().unwrap_or(0.0),
                    o["momentum"].as_f64().unwrap_or(0.0),
                    o["weight_decay"].as_f64().unwrap_or(0.0),
                );
                state.step = o["step"].as_u64().unwrap_or(0);
                for (i, (_, p)) in bundle.params.iter().enumerate() {
                    let name = format!("momentum/{}", p.name);
                    let t = ck.get(&name).ok_or_else(|| Error::ParamMismatch {
                        name: name.clone(),
                        expected: format!("{:?}", p.tensor.shape()),
                        found: "missing".into(),
                    })?;
                    state.momentum_buffers[i] = t.cast();
                }
                Some(state)
            }
            None => None,
        };
        Ok((bundle, opt))
    }

    /// Copies parameter values out of a checkpoint, failing on the first
    /// name or shape that does not match this model.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        let saved: Vec<&(String, Tensor<f32>)> = ck
            .records
            .iter()
            .filter(|(n, _)| !n.starts_with("momentum/"))
            .collect();
        for (i, (_, p)) in self.params.iter().enumerate() {
            match saved.get(i) {
                Some((name, t)) if *name == p.name && t.shape() == p.tensor.shape() => {}
                Some((name, t)) => {
                    return Err(Error::ParamMismatch {
                        name: p.name.clone(),
                        expected: format!("{} {:?}", p.name, p.tensor.shape()),
                        found: format!("{name} {:?}", t.shape()),
                    })
                }
                None => {
                    return Err(Error::ParamMismatch {
                        name: p.name.clone(),
                        expected: format!("{:?}", p.tensor.shape()),
                        found: "missing".into(),
                    })
                }
            }
        }
        if saved.len() != self.params.len() {
            return Err(Error::ParamMismatch {
                name: saved[self.params.len()].0.clone(),
                expected: "absent".into(),
                found: "extra parameter".into(),
            });
        }
        let ids: Vec<ParamId> = self.params.ids().collect();
        for (id, (_, t)) in ids.into_iter().zip(saved) {
            *self.params.value_mut(id) = t.cast();
        }
        Ok(())
    }
}

/// Mean over the frame axis: `[L, D]` frame embeddings to a `D` shot embedding.
pub fn pool_shot<T: Real>(frame_embeddings: &Tensor<T>) -> Result<Vec<T>> {
    if frame_embeddings.shape().len() != 2 {
        return Err(Error::invalid("pool_shot expects [L, D] input"));
    }
    let d = frame_embeddings.cols();
    let l = frame_embeddings.rows();
    let mut tape = Tape::new();
    let x = tape.input(frame_embeddings.clone());
    let y = tape.mean_axis(x, 1, l, d, vec![d])?;
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(norm: NormKind) -> ModelConfig {
        ModelConfig {
            input_size: 16,
            channels: vec![8, 8, 16],
            norm,
            embed_dim: 12,
            exemplar_outputs: 6,
            video_projection_dim: 5,
            classifier_outputs: 3,
            ..ModelConfig::default()
        }
    }

    fn frames(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * size * size * 3;
        Tensor::new(vec![n, size, size, 3], (0..len).map(|_| rng.gen()).collect())
    }

    #[test]
    fn identical_frames_identical_embeddings_and_batch_consistency() {
        let m = ModelBundle::<f64>::new(small(NormKind::BatchNorm), 1).unwrap();
        let f = frames(3, 16, 2);
        let batch = m.encode_frames(&f).unwrap();
        for i in 0..3 {
            let single = Tensor::new(vec![16, 16, 3], f.data()[i * 768..(i + 1) * 768].to_vec());
            let e = m.encode_frame(&single).unwrap();
            assert_eq!(e.as_slice(), batch.row(i));
            assert_eq!(e, m.encode_frame(&single).unwrap());
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_embedding() {
        let mut m = ModelBundle::<f64>::new(small(NormKind::GroupNormWs), 1).unwrap();
        let fc = m.encoder_fc();
        for id in [fc.w, fc.b] {
            m.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = m.encode_frames(&frames(2, 16, 3)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_frame_shape_is_rejected() {
        let m = ModelBundle::<f64>::new(small(NormKind::BatchNorm), 1).unwrap();
        assert!(matches!(
            m.encode_frames(&frames(1, 8, 0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pool_shot_examples() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pool_shot(&x).unwrap(), vec![0.5, 0.5]);
        let one = Tensor::<f64>::from_f64(&[1, 3], &[0.25, -2.0, 7.0]);
        assert_eq!(pool_shot(&one).unwrap(), vec![0.25, -2.0, 7.0]);
    }

    #[test]
    fn heads() {
        let m = ModelBundle::<f64>::new(small(NormKind::BatchNorm), 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[2, 12], &(0..24).map(|i| i as f64 * 0.1 - 1.0).collect::<Vec<_>>()));
        let e = m.apply_head(&mut tape, x, Head::Exemplar).unwrap();
        for r in 0..2 {
            let n: f64 = tape.value(e).row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        let r = m.apply_head(&mut tape, x, Head::Rotation).unwrap();
        assert_eq!(tape.shape(r), &[2, 4]);

        let mut cfg = small(NormKind::BatchNorm);
        cfg.classifier_outputs = 0;
        let no_cls = ModelBundle::<f64>::new(cfg, 4).unwrap();
        assert!(no_cls.apply_head(&mut tape, x, Head::Classifier).is_err());
    }

    #[test]
    fn predictor_config_validation() {
        let mut p = PredictorConfig {
            kind: PredictorKind::PairMlp,
            shots: 4,
            ..PredictorConfig::default()
        };
        assert!(p.validate().is_err());
        p.shots = 2;
        assert!(p.validate().is_ok());
        p.kind = PredictorKind::Recurrent;
        p.shots = 1;
        assert!(p.validate().is_err());
        p.shots = 2;
        p.horizon = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn group_norm_requires_divisible_widths() {
        let mut cfg = small(NormKind::GroupNormWs);
        cfg.channels = vec![8, 12, 16];
        assert!(cfg.validate().is_err());
    }
}
