//! The upstream optimization loop.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{OptimizerState, Schedule, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossToggles, LossWeights, NegativeSet};
use crate::model::{Head, ModelBundle, ModelConfig, Mode, NormKind, PredictorKind};
use crate::pipeline::augment::{augment, AugmentConfig};
use crate::pipeline::sampler::{BatchSpec, Sampler};
use crate::pipeline::Prefetcher;
use crate::rng::{stream_rng, streams};
use crate::videogen::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Ssl,
    Cotrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameLoss {
    Exemplar,
    Rotation,
}

/// Where exemplar views come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExemplarSource {
    /// The `L` sampled frames of a shot, each augmented once.
    Shot,
    /// One frame augmented `exemplars` times.
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VideoLoss {
    Infonce,
    Order,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub frame_loss: FrameLoss,
    pub exemplar_source: ExemplarSource,
    pub video_loss: VideoLoss,
    pub negatives: NegativeSet,
    pub lr: f64,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub lr_schedule: String,
    pub momentum: f64,
    pub wd: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub margin: f64,
    /// Videos per batch (N).
    pub videos: usize,
    /// Consecutive shots per video (K).
    pub shots: usize,
    /// Consecutive frames per shot (L).
    pub frames: usize,
    /// Required value of N·K.
    pub nk_product: usize,
    pub image_batch_size: usize,
    /// Size of the labeled image set drawn for co-training.
    pub labeled_images: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// When false the wallclock column is written as 0, making metric files
    /// byte-comparable across runs.
    pub record_wallclock: bool,
    pub workers: usize,
    pub queue_depth: usize,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ssl,
            frame_loss: FrameLoss::Exemplar,
            exemplar_source: ExemplarSource::Shot,
            video_loss: VideoLoss::Infonce,
            negatives: NegativeSet::AllShots,
            lr: 0.08,
            iterations: 2000,
            warmup_iterations: 100,
            lr_schedule: "x0.1@1500;1800".into(),
            momentum: 0.9,
            wd: 1e-4,
            lambda: 0.04,
            gamma: 1.0,
            margin: 0.5,
            videos: 8,
            shots: 4,
            frames: 8,
            nk_product: 32,
            image_batch_size: 32,
            labeled_images: 2000,
            eval_every: 0,
            checkpoint_every: 0,
            record_wallclock: true,
            workers: 1,
            queue_depth: 4,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            n: self.videos,
            k: self.shots,
            l: self.frames,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.warmup_iterations,
            self.iterations,
            Schedule::parse_decay(&self.lr_schedule)?,
        )
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            margin: self.margin,
            enabled: LossToggles {
                shot: true,
                video: self.video_loss != VideoLoss::None,
                supervised: self.mode == TrainMode::Cotrain,
            },
        }
    }

    /// Views per shot that go through the encoder.
    pub fn views_per_shot(&self) -> usize {
        match (self.frame_loss, self.exemplar_source) {
            (FrameLoss::Exemplar, ExemplarSource::Frame) => self.augment.exemplar_frames,
            _ => self.frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.batch_spec().validate(self.nk_product)?;
        self.schedule()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.loss_weights().validate(self.frame_loss == FrameLoss::Exemplar)?;
        if !(self.lr > 0.0) || !(self.momentum >= 0.0) || !(self.wd >= 0.0) {
            return bad("lr must be > 0, momentum and wd >= 0");
        }
        if self.frame_loss == FrameLoss::Exemplar {
            match self.exemplar_source {
                ExemplarSource::Shot if self.frames != self.augment.exemplar_frames => {
                    return bad("shot exemplars need frames == augment.exemplar_frames");
                }
                ExemplarSource::Frame if self.frames != 1 => {
                    return bad("frame exemplars sample one frame per shot (frames = 1)");
                }
                _ => {}
            }
        }
        let p = &self.model.predictor;
        match self.video_loss {
            VideoLoss::Order => {
                if self.shots != 2 || p.kind != PredictorKind::OrderMlp || p.shots != 2 {
                    return bad("order loss requires shots = 2 and an order-mlp predictor over 2 shots");
                }
            }
            VideoLoss::Infonce => {
                if p.kind == PredictorKind::OrderMlp || p.shots != self.shots {
                    return bad("infonce needs a pair-mlp or recurrent predictor with predictor.shots = shots");
                }
                if self.videos < 2 {
                    return bad("infonce needs at least 2 videos per batch");
                }
            }
            VideoLoss::None => {}
        }
        if self.mode == TrainMode::Cotrain {
            if self.model.classifier_outputs == 0 || self.model.norm != NormKind::GroupNormWs {
                return bad("co-training requires a classifier head and the group-norm encoder");
            }
            if self.image_batch_size == 0 {
                return bad("image_batch_size must be >= 1");
            }
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        Ok(())
    }
}

/// The three upstream objectives compared in transfer experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Exemplar triplets over augmented copies of single frames.
    FrameExemplar,
    /// Exemplar triplets over frames of the same shot.
    ShotExemplar,
    /// Shot exemplars plus InfoNCE over K consecutive shots.
    ShotInfonce,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FrameExemplar, Method::ShotExemplar, Method::ShotInfonce];

    pub fn name(self) -> &'static str {
        match self {
            Method::FrameExemplar => "frame-exemplar",
            Method::ShotExemplar => "shot-exemplar",
            Method::ShotInfonce => "shot-infonce",
        }
    }

    /// Rewrites the batch shape and objective of `base`, keeping N·K·L fixed.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let m = base.augment.exemplar_frames;
        let nk = base.nk_product;
        let mut cfg = base.clone();
        cfg.frame_loss = FrameLoss::Exemplar;
        match self {
            Method::FrameExemplar => {
                cfg.exemplar_source = ExemplarSource::Frame;
                cfg.video_loss = VideoLoss::None;
                (cfg.videos, cfg.shots, cfg.frames) = (nk, 1, 1);
            }
            Method::ShotExemplar => {
                cfg.exemplar_source = ExemplarSource::Shot;
                cfg.video_loss = VideoLoss::None;
                (cfg.videos, cfg.shots, cfg.frames) = (nk, 1, m);
            }
            Method::ShotInfonce => {
                let k = base.model.predictor.shots;
                cfg.exemplar_source = ExemplarSource::Shot;
                cfg.video_loss = VideoLoss::Infonce;
                (cfg.videos, cfg.shots, cfg.frames) = (nk / k, k, m);
            }
        }
        cfg
    }
}

/// Labeled images for co-training, `count × H × W × C` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub size: usize,
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    /// `count` random frames of `corpus` labeled with their video's class.
    pub fn from_corpus(corpus: &Corpus, count: usize, seed: u64) -> Result<Self> {
        let first = corpus
            .videos
            .first()
            .ok_or_else(|| Error::invalid("labeled corpus is empty"))?;
        let mut rng = stream_rng(seed, streams::LABELED, u64::MAX);
        let mut set = Self {
            size: first.height,
            channels: first.channels,
            images: Vec::with_capacity(count * first.frame_len()),
            labels: Vec::with_capacity(count),
            classes: corpus.videos.iter().map(|v| v.label as usize + 1).max().unwrap_or(0),
        };
        for _ in 0..count {
            let v = &corpus.videos[rng.gen_range(0..corpus.len())];
            let t = rng.gen_range(0..v.num_frames());
            set.images.extend(v.frame(t).iter().map(|&p| f32::from(p) / 255.0));
            set.labels.push(v.label as usize);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_v: f64,
    pub loss_sup: f64,
    pub loss_total: f64,
    pub wallclock_ms: u64,
}

impl std::fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} lr={} loss_s={} loss_v={} loss_sup={} loss_total={}",
            self.step, self.lr, self.loss_s, self.loss_v, self.loss_sup, self.loss_total
        )
    }
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::io(path, e.into())))
        .collect()
}

/// One step's worth of encoder input, a pure function of (seed, step).
struct PreparedBatch {
    frames: Vec<f32>,
    rows: usize,
    classes: Vec<usize>,
    reversed: Vec<bool>,
    labeled: Option<(Vec<f32>, Vec<usize>)>,
}

#[derive(Clone)]
struct BatchSource {
    cfg: TrainConfig,
    seed: u64,
    corpus: Arc<Corpus>,
    labeled: Option<Arc<LabeledSet>>,
}

impl BatchSource {
    fn prepare(&self, step: usize) -> Result<PreparedBatch> {
        let cfg = &self.cfg;
        let step = step as u64;
        let sampler = Sampler::new(&self.corpus, cfg.batch_spec())?;
        let batch = sampler.sample(&mut stream_rng(self.seed, streams::SAMPLE, step));
        let (n, c) = (batch.height, batch.channels);
        let frame_len = batch.frame_len();
        let shots = cfg.videos * cfg.shots;
        let views = cfg.views_per_shot();
        let mut frames = if views == cfg.frames {
            batch.frames
        } else {
            batch
                .frames
                .chunks(frame_len)
                .flat_map(|f| std::iter::repeat(f).take(views).flatten().copied())
                .collect()
        };
        augment(&mut frames, n, c, &cfg.augment, &mut stream_rng(self.seed, streams::AUGMENT, step));
        let reversed = if cfg.video_loss == VideoLoss::Order {
            let mut rng = stream_rng(self.seed, streams::ORDER, step);
            (0..cfg.videos).map(|_| rng.gen_bool(0.5)).collect()
        } else {
            Vec::new()
        };
        let labeled = match (&self.labeled, cfg.mode) {
            (Some(set), TrainMode::Cotrain) => {
                let mut rng = stream_rng(self.seed, streams::LABELED, step);
                let per = set.size * set.size * set.channels;
                let mut idx: Vec<usize> = (0..set.len()).collect();
                idx.shuffle(&mut rng);
                let picks: Vec<usize> = (0..cfg.image_batch_size).map(|i| idx[i % idx.len()]).collect();
                let mut images: Vec<f32> = picks
                    .iter()
                    .flat_map(|&i| set.images[i * per..(i + 1) * per].iter().copied())
                    .collect();
                augment(&mut images, set.size, set.channels, &cfg.augment, &mut rng);
                Some((images, picks.iter().map(|&i| set.labels[i]).collect()))
            }
            _ => None,
        };
        Ok(PreparedBatch {
            frames,
            rows: shots * views,
            classes: (0..shots * views).map(|r| r / views).collect(),
            reversed,
            labeled,
        })
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub model: ModelBundle<f32>,
    pub opt: OptimizerState<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Gradient norm of the projection head and predictor, per executed step.
    pub video_grad_norms: Vec<f64>,
    /// Number of order-loss sequences presented reversed, and presented in total.
    pub reversed: (usize, usize),
    /// Where periodic checkpoints go (`checkpoint_every > 0`).
    pub checkpoint_dir: Option<PathBuf>,
    source: BatchSource,
    schedule: Schedule,
    started: Instant,
}

/// Checkpoint written by [`Trainer::checkpoint`] at `step`.
pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.ckpt"))
}

impl Trainer {
    pub fn new(cfg: TrainConfig, seed: u64, corpus: Arc<Corpus>, labeled: Option<Arc<LabeledSet>>) -> Result<Self> {
        let init_seed = stream_rng(seed, streams::INIT, 0).gen::<u64>();
        let model = ModelBundle::new(cfg.model.clone(), init_seed)?;
        let opt = OptimizerState::new(&model.params, cfg.lr, cfg.momentum, cfg.wd);
        Self::assemble(cfg, seed, corpus, labeled, model, opt)
    }

    /// Continues a run from a checkpoint written by the same configuration.
    pub fn from_checkpoint(
        cfg: TrainConfig,
        seed: u64,
        corpus: Arc<Corpus>,
        labeled: Option<Arc<LabeledSet>>,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let mut model = ModelBundle::new(cfg.model.clone(), 0)?;
        model.load_params(ck)?;
        let (_, opt) = ModelBundle::<f32>::from_checkpoint(ck)?;
        let opt = opt.ok_or_else(|| Error::invalid("checkpoint has no optimizer state"))?;
        Self::assemble(cfg, seed, corpus, labeled, model, opt)
    }

    fn assemble(
        cfg: TrainConfig,
        seed: u64,
        corpus: Arc<Corpus>,
        labeled: Option<Arc<LabeledSet>>,
        model: ModelBundle<f32>,
        opt: OptimizerState<f32>,
    ) -> Result<Self> {
        cfg.validate()?;
        let first = corpus
            .videos
            .first()
            .ok_or_else(|| Error::invalid("training corpus is empty"))?;
        if first.height != cfg.model.input_size || first.channels != cfg.model.input_channels {
            return Err(Error::Config(format!(
                "corpus frames are {}x{}x{}, model expects {}x{}x{}",
                first.height,
                first.width,
                first.channels,
                cfg.model.input_size,
                cfg.model.input_size,
                cfg.model.input_channels
            )));
        }
        Sampler::new(&corpus, cfg.batch_spec())?;
        if cfg.mode == TrainMode::Cotrain {
            let set = labeled
                .as_ref()
                .ok_or_else(|| Error::invalid("co-training needs a labeled image set"))?;
            if set.is_empty() || set.classes > cfg.model.classifier_outputs {
                return Err(Error::invalid("labeled set is empty or has more classes than the classifier"));
            }
        }
        let schedule = cfg.schedule()?;
        Ok(Self {
            source: BatchSource {
                cfg: cfg.clone(),
                seed,
                corpus,
                labeled,
            },
            cfg,
            seed,
            model,
            opt,
            metrics: Vec::new(),
            video_grad_norms: Vec::new(),
            reversed: (0, 0),
            checkpoint_dir: None,
            schedule,
            started: Instant::now(),
        })
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.opt.step as usize
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(
            Some(&self.opt),
            serde_json::json!({"seed": self.seed, "train": self.cfg}),
        )
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.iterations, &mut |_, _| Ok(()))
    }

    /// Runs steps `step()+1 ..= last`, calling `hook` after each one.
    pub fn run_until(&mut self, last: usize, hook: &mut dyn FnMut(&Trainer, &MetricsRow) -> Result<()>) -> Result<()> {
        let last = last.min(self.cfg.iterations);
        let first = self.step() + 1;
        if first > last {
            return Ok(());
        }
        let source = self.source.clone();
        let batches = Prefetcher::new(
            self.cfg.workers,
            self.cfg.queue_depth,
            first,
            last + 1,
            Arc::new(move |s| source.prepare(s)),
        );
        for (step, batch) in (first..=last).zip(batches) {
            let row = self.train_step(step, batch?)?;
            if let Some(dir) = &self.checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                    self.checkpoint().save(&checkpoint_path(dir, step))?;
                }
            }
            hook(self, &row)?;
        }
        Ok(())
    }

    fn diverged(&self, step: usize) -> Error {
        Error::Diverged {
            step,
            last_row: self
                .metrics
                .last()
                .map_or_else(|| "no completed steps".to_string(), |r| r.to_string()),
        }
    }

    fn train_step(&mut self, step: usize, batch: PreparedBatch) -> Result<MetricsRow> {
        let cfg = &self.cfg;
        let lr = self.schedule.lr_at_step(cfg.lr, step)?;
        let weights = cfg.loss_weights();
        let size = cfg.model.input_size;
        let ch = cfg.model.input_channels;
        let model = &self.model;
        let mut tape = Tape::<f32>::new();

        let forward = |tape: &mut Tape<f32>| -> Result<_> {
            let shots = cfg.videos * cfg.shots;
            let views = cfg.views_per_shot();
            let frames = Tensor::new(vec![batch.rows, size, size, ch], batch.frames.clone());
            let (ls, encoded, rows) = match cfg.frame_loss {
                FrameLoss::Exemplar => {
                    let x = tape.try_input(frames)?;
                    let enc = model.encode(tape, x, Mode::Train)?;
                    let emb = model.apply_head(tape, enc.prelogits, Head::Exemplar)?;
                    let ls = losses::triplet_semihard_loss(tape, emb, &batch.classes, cfg.margin)?;
                    let rows = enc.prelogits;
                    (ls, enc, rows)
                }
                FrameLoss::Rotation => {
                    let out = losses::rotation_loss(model, tape, &frames, Mode::Train, 0)?;
                    let d = model.embed_dim();
                    let wide = tape.reshape(out.encoded.prelogits, vec![4, batch.rows * d])?;
                    let first = tape.slice_cols(wide, 0, batch.rows * d)?;
                    let rows = tape.reshape(first, vec![batch.rows, d])?;
                    (out.loss, out.encoded, rows)
                }
            };
            let lv: Option<Var> = match cfg.video_loss {
                VideoLoss::None => None,
                kind => {
                    let d = model.embed_dim();
                    let pooled = tape.mean_axis(rows, shots, views, d, vec![shots, d])?;
                    let proj = model.apply_head(tape, pooled, Head::VideoProjection)?;
                    Some(match kind {
                        VideoLoss::Infonce => {
                            losses::video_infonce(model, tape, proj, cfg.videos, cfg.shots, cfg.negatives)?
                        }
                        _ => losses::order_loss(model, tape, proj, cfg.videos, cfg.shots, &batch.reversed)?,
                    })
                }
            };
            let lsup = match &batch.labeled {
                Some((images, labels)) => {
                    let imgs = Tensor::new(vec![labels.len(), size, size, ch], images.clone());
                    Some(losses::supervised_ce_loss(model, tape, &imgs, labels, Mode::Train)?.0)
                }
                None => None,
            };
            let total = losses::combine_total(tape, Some(ls), lv, lsup, &weights)?;
            Ok((ls, lv, lsup, total, encoded))
        };
        let (ls, lv, lsup, total, encoded) = match forward(&mut tape) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(self.diverged(step)),
            Err(e) => return Err(e),
        };
        let value = |v: Option<Var>| v.map_or(0.0, |v| f64::from(tape.scalar(v)));
        let row = MetricsRow {
            step,
            lr,
            loss_s: value(Some(ls)),
            loss_v: value(lv),
            loss_sup: value(lsup),
            loss_total: value(Some(total)),
            wallclock_ms: if cfg.record_wallclock {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if !row.loss_total.is_finite() {
            return Err(self.diverged(step));
        }
        let grads = match tape.backward(total, &self.model.params) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(self.diverged(step)),
            Err(e) => return Err(e),
        };
        self.video_grad_norms
            .push(grads.norm_over(&self.model.video_branch_params()));
        self.reversed.0 += batch.reversed.iter().filter(|&&r| r).count();
        self.reversed.1 += batch.reversed.len();
        self.model.update_running_stats(&tape, &encoded);
        if let Err(e) = self.opt.step(&mut self.model.params, &grads, lr) {
            return Err(match e {
                Error::NonFiniteGradient(_) => self.diverged(step),
                e => e,
            });
        }
        self.metrics.push(row.clone());
        Ok(row)
    }
}

/// Trains from scratch for the configured number of iterations.
pub fn train(
    cfg: &TrainConfig,
    seed: u64,
    corpus: Arc<Corpus>,
    labeled: Option<Arc<LabeledSet>>,
) -> Result<(ModelBundle<f32>, Vec<MetricsRow>)> {
    let mut t = Trainer::new(cfg.clone(), seed, corpus, labeled)?;
    t.run()?;
    Ok((t.model, t.metrics))
}
