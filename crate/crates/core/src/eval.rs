//! Downstream transfer protocol, PM-k robustness metric and report files.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::supervised_ce_loss;
use crate::model::{Head, ModelBundle, Mode};
use crate::rng::{stream_rng, streams};
use crate::videogen::{generate_corpus, Corpus, GenConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    LinearProbe,
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: TransferMode,
    /// Videos generated for downstream tasks, disjoint from the upstream corpus.
    pub heldout_videos: usize,
    /// Train + validation examples per task.
    pub examples_per_task: usize,
    pub val_fraction: f64,
    pub test_examples: usize,
    pub orientation_bins: usize,
    pub runs: usize,
    pub learning_rates: Vec<f64>,
    pub short_epochs: usize,
    pub long_epochs: usize,
    pub batch_size: usize,
    pub pmk_k: usize,
    pub pmk_anchors_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: TransferMode::LinearProbe,
            heldout_videos: 160,
            examples_per_task: 200,
            val_fraction: 0.2,
            test_examples: 1000,
            orientation_bins: 4,
            runs: 3,
            learning_rates: vec![0.1, 0.01],
            short_epochs: 20,
            long_epochs: 60,
            batch_size: 32,
            pmk_k: 10,
            pmk_anchors_per_video: 2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.heldout_videos < 4 {
            return bad("eval.heldout_videos must be >= 4");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("eval.val_fraction must be in (0, 1)");
        }
        let val = (self.examples_per_task as f64 * self.val_fraction).round() as usize;
        if val == 0 || val >= self.examples_per_task || self.test_examples == 0 {
            return bad("eval splits must all be non-empty");
        }
        if self.orientation_bins < 2 || self.runs == 0 || self.batch_size == 0 {
            return bad("eval.orientation_bins >= 2, runs >= 1 and batch_size >= 1 required");
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&l| !(l > 0.0)) {
            return bad("eval.learning_rates must be positive and non-empty");
        }
        if self.short_epochs == 0 || self.long_epochs < self.short_epochs {
            return bad("eval epochs must satisfy 0 < short_epochs <= long_epochs");
        }
        Ok(())
    }

    /// The sweep grid: every learning rate × {short, long}.
    pub fn sweep(&self) -> Vec<Hyper> {
        self.learning_rates
            .iter()
            .flat_map(|&lr| [self.short_epochs, self.long_epochs].map(|epochs| Hyper { lr, epochs }))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Natural,
    Structured,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Natural => "natural",
            TaskKind::Structured => "structured",
        }
    }
}

/// Frames with labels, `count × H × W × C` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub frames: Vec<f32>,
    pub labels: Vec<usize>,
    /// `(video_id, frame index)` of every example.
    pub sources: Vec<(u32, usize)>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Test split whose labels can only be read through a counting accessor.
#[derive(Debug)]
pub struct TestSplit {
    pub frames: Vec<f32>,
    pub sources: Vec<(u32, usize)>,
    labels: Vec<usize>,
    reads: AtomicUsize,
}

impl TestSplit {
    pub fn new(frames: Vec<f32>, labels: Vec<usize>, sources: Vec<(u32, usize)>) -> Self {
        Self {
            frames,
            sources,
            labels,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    /// How many times the labels were read.
    pub fn label_reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

impl Clone for TestSplit {
    fn clone(&self) -> Self {
        Self::new(self.frames.clone(), self.labels.clone(), self.sources.clone())
    }
}

#[derive(Clone, Debug)]
pub struct DownstreamTask {
    pub name: String,
    pub kind: TaskKind,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub train: Split,
    pub val: Split,
    pub test: TestSplit,
}

/// Held-out videos for downstream tasks; ids start after the upstream corpus.
pub fn heldout_corpus(data: &GenConfig, eval: &EvalConfig, seed: u64) -> Result<Corpus> {
    let cfg = GenConfig {
        videos: eval.heldout_videos,
        first_id: data.first_id + data.videos as u32,
        ..data.clone()
    };
    generate_corpus(&cfg, stream_rng(seed, streams::TASKS, 0).gen())
}

pub fn orientation_bin(deg: f32, bins: usize) -> usize {
    ((deg.rem_euclid(360.0) as f64 / 360.0 * bins as f64) as usize).min(bins - 1)
}

fn meta(v: &crate::videogen::VideoRecord) -> Result<&crate::videogen::VideoMeta> {
    v.meta
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("video {} has no metadata", v.video_id)))
}

type Labeler<'a> = Box<dyn Fn(&crate::videogen::VideoRecord, usize) -> Result<usize> + 'a>;

/// Shape (natural-analog), object count and orientation bin (structured-analog)
/// tasks. Train/validation examples and test examples come from disjoint
/// halves of the held-out videos.
pub fn build_downstream_tasks(heldout: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<Vec<DownstreamTask>> {
    cfg.validate()?;
    if heldout.len() < 4 {
        return Err(Error::invalid(format!("need at least 4 held-out videos, have {}", heldout.len())));
    }
    let first = &heldout.videos[0];
    let classes = heldout.videos.iter().map(|v| v.label as usize + 1).max().unwrap_or(0);
    let bins = cfg.orientation_bins;
    let tasks: Vec<(&str, TaskKind, usize, Labeler)> = vec![
        ("shape", TaskKind::Natural, classes, Box::new(|v, _| Ok(v.label as usize))),
        (
            "count",
            TaskKind::Structured,
            crate::videogen::MAX_OBJECTS,
            Box::new(move |v, _| Ok(meta(v)?.object_count - 1)),
        ),
        (
            "orientation",
            TaskKind::Structured,
            bins,
            Box::new(move |v, t| Ok(orientation_bin(meta(v)?.orientation_deg[t], bins))),
        ),
    ];
    let mut order: Vec<usize> = (0..heldout.len()).collect();
    order.shuffle(&mut stream_rng(seed, streams::TASKS, 1));
    let (pool_a, pool_b) = order.split_at(heldout.len() / 2);
    let frame_len = first.frame_len();
    let mut out = Vec::new();
    for (ti, (name, kind, nclass, label)) in tasks.into_iter().enumerate() {
        let mut rng = stream_rng(seed, streams::TASKS, 10 + ti as u64);
        let draw = |pool: &[usize], count: usize, rng: &mut ChaCha8Rng| -> Result<Split> {
            let total: usize = pool.iter().map(|&i| heldout.videos[i].num_frames()).sum();
            if count > total {
                return Err(Error::invalid(format!("task {name}: {count} examples requested, {total} frames available")));
            }
            let mut picks = std::collections::BTreeSet::new();
            let mut split = Split {
                frames: Vec::with_capacity(count * frame_len),
                labels: Vec::with_capacity(count),
                sources: Vec::with_capacity(count),
            };
            while split.len() < count {
                let v = &heldout.videos[pool[rng.gen_range(0..pool.len())]];
                let t = rng.gen_range(0..v.num_frames());
                if !picks.insert((v.video_id, t)) {
                    continue;
                }
                split.frames.extend(v.frame(t).iter().map(|&p| f32::from(p) / 255.0));
                split.labels.push(label(v, t)?);
                split.sources.push((v.video_id, t));
            }
            Ok(split)
        };
        let all = draw(pool_a, cfg.examples_per_task, &mut rng)?;
        let test = draw(pool_b, cfg.test_examples, &mut rng)?;
        let n_val = (cfg.examples_per_task as f64 * cfg.val_fraction).round() as usize;
        let n_train = cfg.examples_per_task - n_val;
        let cut = n_train * frame_len;
        let train = Split {
            frames: all.frames[..cut].to_vec(),
            labels: all.labels[..n_train].to_vec(),
            sources: all.sources[..n_train].to_vec(),
        };
        let val = Split {
            frames: all.frames[cut..].to_vec(),
            labels: all.labels[n_train..].to_vec(),
            sources: all.sources[n_train..].to_vec(),
        };
        out.push(DownstreamTask {
            name: name.to_string(),
            kind,
            classes: nclass,
            size: first.height,
            channels: first.channels,
            train,
            val,
            test: TestSplit::new(test.frames, test.labels, test.sources),
        });
    }
    Ok(out)
}

/// Multinomial logistic regression on standardized features, trained by
/// minibatch SGD with momentum.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub dim: usize,
    pub classes: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[f64], labels: &[usize], dim: usize, classes: usize, hp: Hyper, batch: usize, seed: u64) -> Self {
        let n = labels.len();
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m) / n as f64;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect();
        let mut rng = stream_rng(seed, streams::PROBE, 0);
        let mut probe = Self {
            dim,
            classes,
            mean,
            inv_std,
            w: (0..dim * classes).map(|_| rng.gen_range(-0.01..0.01)).collect(),
            b: vec![0.0; classes],
        };
        let x: Vec<f64> = features.chunks(dim).flat_map(|r| probe.standardize(r)).collect();
        let mut vw = vec![0.0; dim * classes];
        let mut vb = vec![0.0; classes];
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..hp.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut gw = vec![0.0; dim * classes];
                let mut gb = vec![0.0; classes];
                for &i in chunk {
                    let xi = &x[i * dim..(i + 1) * dim];
                    let mut p = probe.logits_std(xi);
                    softmax(&mut p);
                    p[labels[i]] -= 1.0;
                    for (d, &xv) in xi.iter().enumerate() {
                        for c in 0..classes {
                            gw[d * classes + c] += xv * p[c];
                        }
                    }
                    gb.iter_mut().zip(&p).for_each(|(g, v)| *g += v);
                }
                let scale = 1.0 / chunk.len() as f64;
                for (((w, v), g), _) in probe.w.iter_mut().zip(&mut vw).zip(&gw).zip(0..) {
                    *v = 0.9 * *v + g * scale;
                    *w -= hp.lr * *v;
                }
                for ((b, v), g) in probe.b.iter_mut().zip(&mut vb).zip(&gb) {
                    *v = 0.9 * *v + g * scale;
                    *b -= hp.lr * *v;
                }
            }
        }
        probe
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (d, &xv) in x.iter().enumerate() {
            for c in 0..self.classes {
                out[c] += xv * self.w[d * self.classes + c];
            }
        }
        out
    }

    pub fn predict(&self, features: &[f64]) -> Vec<usize> {
        features
            .chunks(self.dim)
            .map(|r| argmax(&self.logits_std(&self.standardize(r))))
            .collect()
    }
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub name: String,
    pub kind: TaskKind,
    /// Test accuracy of every run, in seed order.
    pub runs: Vec<f64>,
    pub median: f64,
    /// Hyper-parameters selected in every run.
    pub chosen_hp: Vec<Hyper>,
    pub seeds: Vec<u64>,
}

/// Moments in [`transfer_evaluate`] that an observer can hook into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Hyper-parameters for run `i` are chosen; no test label has been read yet in that run.
    Selected(usize),
    /// Run `i` finished its test evaluation.
    Tested(usize),
}

/// Frozen-encoder features (`count × D`, f64) for frames.
pub fn features(bundle: &ModelBundle<f32>, frames: &[f32], count: usize) -> Result<Vec<f64>> {
    Ok(bundle
        .encode_frames_chunked(frames, count, 128)?
        .data()
        .iter()
        .map(|&v| f64::from(v))
        .collect())
}

struct Prepared<'a> {
    task: &'a DownstreamTask,
    train: Vec<f64>,
    val: Vec<f64>,
    test: Vec<f64>,
}

fn check_task(task: &DownstreamTask) -> Result<()> {
    let first = task.train.labels.first();
    if task.train.labels.iter().all(|l| Some(l) == first) {
        return Err(Error::invalid(format!("task {} has a single class in its training split", task.name)));
    }
    Ok(())
}

/// Runs the sweep/selection/retrain protocol on every task and returns one
/// result per task. Hyper-parameters are selected by validation accuracy
/// averaged over tasks; test labels are read only after selection.
pub fn transfer_evaluate(
    bundle: &ModelBundle<f32>,
    tasks: &[DownstreamTask],
    cfg: &EvalConfig,
    seed: u64,
    observer: &mut dyn FnMut(Phase),
) -> Result<Vec<TransferResult>> {
    cfg.validate()?;
    for t in tasks {
        check_task(t)?;
    }
    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|r| seed.wrapping_add(r)).collect();
    let mut runs: Vec<Vec<(f64, Hyper)>> = vec![Vec::new(); tasks.len()];
    match cfg.mode {
        TransferMode::LinearProbe => {
            let prepared = tasks
                .iter()
                .map(|t| {
                    Ok(Prepared {
                        task: t,
                        train: features(bundle, &t.train.frames, t.train.len())?,
                        val: features(bundle, &t.val.frames, t.val.len())?,
                        test: features(bundle, &t.test.frames, t.test.len())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let d = bundle.embed_dim();
            for (r, &s) in seeds.iter().enumerate() {
                let hp = select(cfg, |hp| {
                    prepared
                        .iter()
                        .map(|p| {
                            let probe =
                                LinearProbe::fit(&p.train, &p.task.train.labels, d, p.task.classes, hp, cfg.batch_size, s);
                            accuracy(&probe.predict(&p.val), &p.task.val.labels)
                        })
                        .sum::<f64>()
                        / prepared.len() as f64
                });
                observer(Phase::Selected(r));
                for (ti, p) in prepared.iter().enumerate() {
                    let (x, y) = joined(&p.train, &p.val, &p.task.train.labels, &p.task.val.labels);
                    let probe = LinearProbe::fit(&x, &y, d, p.task.classes, hp, cfg.batch_size, s);
                    runs[ti].push((accuracy(&probe.predict(&p.test), p.task.test.labels()), hp));
                }
                observer(Phase::Tested(r));
            }
        }
        TransferMode::FineTune => {
            for (r, &s) in seeds.iter().enumerate() {
                let mut err = None;
                let hp = select(cfg, |hp| {
                    let mut acc = 0.0;
                    for t in tasks {
                        let f = fine_tune(bundle, t, &t.train.frames, &t.train.labels, hp, cfg.batch_size, s)
                            .and_then(|m| predict_classifier(&m, &t.val.frames, t.val.len()));
                        match f {
                            Ok(pred) => acc += accuracy(&pred, &t.val.labels),
                            Err(e) => err = Some(e),
                        }
                    }
                    acc / tasks.len() as f64
                });
                if let Some(e) = err {
                    return Err(e);
                }
                observer(Phase::Selected(r));
                for (ti, t) in tasks.iter().enumerate() {
                    let mut frames = t.train.frames.clone();
                    frames.extend(&t.val.frames);
                    let mut labels = t.train.labels.clone();
                    labels.extend(&t.val.labels);
                    let m = fine_tune(bundle, t, &frames, &labels, hp, cfg.batch_size, s)?;
                    let pred = predict_classifier(&m, &t.test.frames, t.test.len())?;
                    runs[ti].push((accuracy(&pred, t.test.labels()), hp));
                }
                observer(Phase::Tested(r));
            }
        }
    }
    Ok(tasks
        .iter()
        .zip(runs)
        .map(|(t, r)| {
            let accs: Vec<f64> = r.iter().map(|x| x.0).collect();
            TransferResult {
                name: t.name.clone(),
                kind: t.kind,
                median: median(&accs),
                runs: accs,
                chosen_hp: r.iter().map(|x| x.1).collect(),
                seeds: seeds.clone(),
            }
        })
        .collect())
}

fn select(cfg: &EvalConfig, mut score: impl FnMut(Hyper) -> f64) -> Hyper {
    let mut best: Option<(f64, Hyper)> = None;
    for hp in cfg.sweep() {
        let s = score(hp);
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, hp));
        }
    }
    best.expect("sweep is non-empty").1
}

fn joined(a: &[f64], b: &[f64], la: &[usize], lb: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut x = a.to_vec();
    x.extend_from_slice(b);
    let mut y = la.to_vec();
    y.extend_from_slice(lb);
    (x, y)
}

/// Copies the encoder into a model with a fresh classifier and trains all
/// parameters with the upstream optimizer.
fn fine_tune(
    bundle: &ModelBundle<f32>,
    task: &DownstreamTask,
    frames: &[f32],
    labels: &[usize],
    hp: Hyper,
    batch: usize,
    seed: u64,
) -> Result<ModelBundle<f32>> {
    let mut cfg = bundle.config.clone();
    cfg.classifier_outputs = task.classes;
    let mut model = ModelBundle::<f32>::new(cfg, stream_rng(seed, streams::PROBE, 1).gen())?;
    let names: Vec<(crate::autodiff::ParamId, String)> =
        model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in names {
        if name.starts_with("encoder/") {
            let src = bundle.params.id(&name).expect("same encoder layout");
            *model.params.value_mut(id) = bundle.params.value(src).clone();
        }
    }
    let mut opt = OptimizerState::new(&model.params, hp.lr, 0.9, 0.0);
    let mut rng = stream_rng(seed, streams::PROBE, 2);
    let per = task.size * task.size * task.channels;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let imgs: Vec<f32> = chunk
                .iter()
                .flat_map(|&i| frames[i * per..(i + 1) * per].iter().copied())
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = Tensor::new(vec![chunk.len(), task.size, task.size, task.channels], imgs);
            let (loss, enc) = supervised_ce_loss(&model, &mut tape, &x, &y, Mode::Train)?;
            let grads = tape.backward(loss, &model.params)?;
            model.update_running_stats(&tape, &enc);
            opt.step(&mut model.params, &grads, hp.lr)?;
        }
    }
    Ok(model)
}

/// Argmax of the classifier head (inference mode).
pub fn predict_classifier(model: &ModelBundle<f32>, frames: &[f32], count: usize) -> Result<Vec<usize>> {
    let size = model.config.input_size;
    let ch = model.config.input_channels;
    let per = size * size * ch;
    let mut out = Vec::with_capacity(count);
    for start in (0..count).step_by(128) {
        let n = 128.min(count - start);
        let mut tape = Tape::new();
        let x = tape.try_input(Tensor::new(vec![n, size, size, ch], frames[start * per..(start + n) * per].to_vec()))?;
        let enc = model.encode(&mut tape, x, Mode::Inference)?;
        let logits = model.apply_head(&mut tape, enc.prelogits, Head::Classifier)?;
        let v = tape.value(logits);
        out.extend(v.data().chunks(v.cols()).map(|r| {
            let r: Vec<f64> = r.iter().map(|&x| f64::from(x)).collect();
            argmax(&r)
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmkResult {
    pub anchor_accuracy: f64,
    pub pmk_accuracy: f64,
    pub delta: f64,
    pub evaluated: usize,
    /// Anchors dropped because their ±k neighborhood leaves the video.
    pub excluded: usize,
}

/// Anchor accuracy versus PM-k accuracy, where an anchor only counts if it and
/// all frames within ±k are predicted correctly.
pub fn pmk_accuracy(predictions: &[Vec<usize>], truths: &[Vec<usize>], anchors: &[(usize, usize)], k: usize) -> Result<PmkResult> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid("predictions and truths cover different videos"));
    }
    let (mut n, mut excluded, mut hits, mut robust) = (0usize, 0usize, 0usize, 0usize);
    for &(v, t) in anchors {
        let (p, y) = match (predictions.get(v), truths.get(v)) {
            (Some(p), Some(y)) if p.len() == y.len() => (p, y),
            _ => return Err(Error::invalid(format!("anchor video {v} missing or inconsistent"))),
        };
        if t < k || t + k >= y.len() {
            excluded += 1;
            continue;
        }
        n += 1;
        if p[t] == y[t] {
            hits += 1;
            if (t - k..=t + k).all(|i| p[i] == y[i]) {
                robust += 1;
            }
        }
    }
    let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let (a, r) = (frac(hits), frac(robust));
    Ok(PmkResult {
        anchor_accuracy: a,
        pmk_accuracy: r,
        delta: a - r,
        evaluated: n,
        excluded,
    })
}

/// PM-k robustness of a linear probe fitted on `task`'s train+val split,
/// measured on every frame of the videos behind its test split.
pub fn robustness_eval(
    bundle: &ModelBundle<f32>,
    heldout: &Corpus,
    task: &DownstreamTask,
    hp: Hyper,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<PmkResult> {
    check_task(task)?;
    let d = bundle.embed_dim();
    let mut x = features(bundle, &task.train.frames, task.train.len())?;
    x.extend(features(bundle, &task.val.frames, task.val.len())?);
    let mut y = task.train.labels.clone();
    y.extend(&task.val.labels);
    let probe = LinearProbe::fit(&x, &y, d, task.classes, hp, cfg.batch_size, seed);
    let ids: std::collections::BTreeSet<u32> = task.test.sources.iter().map(|s| s.0).collect();
    let videos: Vec<&crate::videogen::VideoRecord> =
        heldout.videos.iter().filter(|v| ids.contains(&v.video_id)).collect();
    let mut rng = stream_rng(seed, streams::PROBE, 3);
    let (mut preds, mut truths, mut anchors) = (Vec::new(), Vec::new(), Vec::new());
    for (i, v) in videos.iter().enumerate() {
        let n = v.num_frames();
        let frames: Vec<f32> = v.frames.iter().map(|&p| f32::from(p) / 255.0).collect();
        preds.push(probe.predict(&features(bundle, &frames, n)?));
        let label = match task.name.as_str() {
            "shape" => vec![v.label as usize; n],
            "count" => vec![meta(v)?.object_count - 1; n],
            _ => meta(v)?
                .orientation_deg
                .iter()
                .map(|&o| orientation_bin(o, cfg.orientation_bins))
                .collect(),
        };
        truths.push(label);
        for _ in 0..cfg.pmk_anchors_per_video {
            anchors.push((i, rng.gen_range(0..n)));
        }
    }
    pmk_accuracy(&preds, &truths, &anchors, cfg.pmk_k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub tasks: Vec<TransferResult>,
    /// Mean of task medians per category; empty categories are absent.
    pub category_means: BTreeMap<String, f64>,
    pub overall_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<PmkResult>,
}

impl MethodReport {
    pub fn new(method: impl Into<String>, tasks: Vec<TransferResult>) -> Self {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in &tasks {
            groups.entry(t.kind.name().to_string()).or_default().push(t.median);
        }
        let category_means = groups
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let overall_mean = tasks.iter().map(|t| t.median).sum::<f64>() / tasks.len().max(1) as f64;
        Self {
            method: method.into(),
            tasks,
            category_means,
            overall_mean,
            robustness: None,
        }
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Writes `report.json` (array of method reports) and `report.csv`
/// (one row per method × task).
pub fn emit_report(results: &[MethodReport], dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::invalid("no results to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(results).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    w.write_record(["method", "task", "kind", "median"])
        .map_err(|e| Error::io(&csv_path, e.into()))?;
    for m in results {
        for t in &m.tasks {
            w.write_record([m.method.as_str(), &t.name, t.kind.name(), &t.median.to_string()])
                .map_err(|e| Error::io(&csv_path, e.into()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn read_report(dir: &Path) -> Result<Vec<MethodReport>> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        record: "report".into(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmk_examples() {
        let truth = vec![vec![1; 30]; 3];
        let mut pred = truth.clone();
        let anchors = [(0, 15), (1, 15), (2, 15)];
        let r = pmk_accuracy(&pred, &truth, &anchors, 10).unwrap();
        assert_eq!((r.anchor_accuracy, r.pmk_accuracy, r.delta), (1.0, 1.0, 0.0));
        pred[1][15] = 0;
        pred[2][20] = 0;
        let r = pmk_accuracy(&pred, &truth, &anchors, 10).unwrap();
        assert!((r.anchor_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.pmk_accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.delta - 1.0 / 3.0).abs() < 1e-15);
        let r = pmk_accuracy(&pred, &truth, &[(0, 3), (0, 15)], 10).unwrap();
        assert_eq!((r.evaluated, r.excluded), (1, 1));
    }

    #[test]
    fn category_means_skip_empty() {
        let t = TransferResult {
            name: "shape".into(),
            kind: TaskKind::Natural,
            runs: vec![0.5, 0.7, 0.6],
            median: 0.6,
            chosen_hp: vec![],
            seeds: vec![0, 1, 2],
        };
        let m = MethodReport::new("m", vec![t]);
        assert_eq!(m.category_means.len(), 1);
        assert_eq!(m.category_means["natural"], 0.6);
    }

    #[test]
    fn median_is_order_free() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[0.2, 0.3, 0.1]), 0.2);
    }

    #[test]
    fn orientation_bins() {
        assert_eq!(orientation_bin(0.0, 4), 0);
        assert_eq!(orientation_bin(89.9, 4), 0);
        assert_eq!(orientation_bin(90.0, 4), 1);
        assert_eq!(orientation_bin(359.99, 4), 3);
    }

    #[test]
    fn probe_separates_separable_data() {
        let mut rng = stream_rng(0, 0, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            x.extend([c as f64 * 2.0 - 1.0 + rng.gen_range(-0.3..0.3), rng.gen_range(-1.0..1.0)]);
            y.push(c);
        }
        let p = LinearProbe::fit(&x, &y, 2, 2, Hyper { lr: 0.1, epochs: 20 }, 16, 0);
        assert!(accuracy(&p.predict(&x), &y) > 0.95);
    }
}
