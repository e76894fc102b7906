//! Frame/shot-level, video-level and supervised losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Encoded, Head, ModelBundle, Mode, Predictor};
use crate::pipeline::augment::rotate90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub shot: bool,
    pub video: bool,
    pub supervised: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            shot: true,
            video: true,
            supervised: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub margin: f64,
    pub enabled: LossToggles,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.04,
            gamma: 1.0,
            margin: 0.5,
            enabled: LossToggles::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self, uses_triplet: bool) -> Result<()> {
        let e = &self.enabled;
        if !(e.shot || e.video || e.supervised) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("lambda and gamma must be >= 0".into()));
        }
        if uses_triplet && e.shot && !(self.margin > 0.0) {
            return Err(Error::Config("triplet margin must be > 0".into()));
        }
        Ok(())
    }
}

/// One mined triplet: anchor, positive and the selected negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Semi-hard mining over a squared-distance matrix.
///
/// For every ordered anchor-positive pair the negative is the closest one
/// with `d(a,p) < d(a,n) < d(a,p) + margin`. Without such a negative the
/// closest one at or beyond the band is used; if every negative is closer
/// than the positive, the farthest negative is used. Ties go to the lowest
/// index.
pub fn mine_semihard<T: Real>(dist: &[T], classes: &[usize], margin: T) -> Result<Vec<Triplet>> {
    let n = classes.len();
    if dist.len() != n * n {
        return Err(Error::Shape {
            op: "triplet_semihard_loss",
            lhs: vec![dist.len()],
            rhs: vec![n, n],
        });
    }
    let first = classes.first().copied();
    if classes.iter().all(|&c| Some(c) == first) {
        return Err(Error::invalid("triplet loss needs at least two classes in the batch"));
    }
    let mut triplets = Vec::new();
    for a in 0..n {
        let row = &dist[a * n..(a + 1) * n];
        for p in 0..n {
            if p == a || classes[p] != classes[a] {
                continue;
            }
            let dap = row[p];
            let mut semi: Option<usize> = None;
            let mut beyond: Option<usize> = None;
            let mut farthest: Option<usize> = None;
            for (m, &d) in row.iter().enumerate() {
                if classes[m] == classes[a] {
                    continue;
                }
                if d > dap && d < dap + margin {
                    if semi.map_or(true, |s| d < row[s]) {
                        semi = Some(m);
                    }
                } else if d >= dap + margin {
                    if beyond.map_or(true, |s| d < row[s]) {
                        beyond = Some(m);
                    }
                }
                if farthest.map_or(true, |s| d > row[s]) {
                    farthest = Some(m);
                }
            }
            let negative = semi.or(beyond).or(farthest).expect("two classes present");
            triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    if triplets.is_empty() {
        return Err(Error::invalid("triplet loss needs a class with at least two members"));
    }
    Ok(triplets)
}

/// Mean over anchor-positive pairs of `max(0, d(a,p) − d(a,n) + margin)` with
/// squared Euclidean distances and semi-hard negatives.
pub fn triplet_semihard_loss<T: Real>(tape: &mut Tape<T>, embeddings: Var, classes: &[usize], margin: f64) -> Result<Var> {
    if tape.value(embeddings).rows() != classes.len() {
        return Err(Error::Shape {
            op: "triplet_semihard_loss",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![classes.len()],
        });
    }
    let n = classes.len();
    let d = tape.pairwise_sq_dist(embeddings)?;
    let triplets = mine_semihard(tape.value(d).data(), classes, T::of(margin))?;
    let ap: Vec<usize> = triplets.iter().map(|t| t.anchor * n + t.positive).collect();
    let an: Vec<usize> = triplets.iter().map(|t| t.anchor * n + t.negative).collect();
    let dap = tape.gather(d, &ap)?;
    let dan = tape.gather(d, &an)?;
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, T::of(margin))?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Scalar evaluation of [`triplet_semihard_loss`] on `[rows, dim]` data.
pub fn triplet_semihard_value(embeddings: &[f64], dim: usize, classes: &[usize], margin: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.try_input(Tensor::new(vec![classes.len(), dim], embeddings.to_vec()))?;
    let l = triplet_semihard_loss(&mut tape, x, classes, margin)?;
    Ok(tape.scalar(l))
}

/// InfoNCE over a square score matrix whose diagonal holds the positive pairs:
/// `−(1/N) Σ_i log( exp(s_ii) / ((1/N) Σ_j exp(s_ij)) )`.
pub fn infonce_loss<T: Real>(tape: &mut Tape<T>, scores: Var) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape {
            op: "infonce_loss",
            lhs: s,
            rhs: vec![],
        });
    }
    if s[0] < 2 {
        return Err(Error::invalid("InfoNCE needs at least two rows (one negative)"));
    }
    let positives: Vec<usize> = (0..s[0]).collect();
    tape.info_nce(scores, &positives, None)
}

/// Scalar evaluation of [`infonce_loss`] for an `n × n` row-major matrix.
pub fn infonce_value(scores: &[f64], n: usize) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.try_input(Tensor::new(vec![n, n], scores.to_vec()))?;
    let l = infonce_loss(&mut tape, x)?;
    Ok(tape.scalar(l))
}

/// Which true shot embeddings enter the InfoNCE denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSet {
    /// Every shot of every other video.
    AllShots,
    /// Only the other videos' shots at the predicted step.
    SameStep,
}

/// Future-shot prediction loss for `[videos·K, D']` projected shot embeddings,
/// averaged over prediction steps.
pub fn video_infonce<T: Real>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    shots: Var,
    videos: usize,
    k: usize,
    negatives: NegativeSet,
) -> Result<Var> {
    if videos < 2 {
        return Err(Error::invalid("InfoNCE needs at least two videos"));
    }
    let horizon = model.config.predictor.horizon;
    let dv = tape.value(shots).cols();
    let (scores, steps) = match model.predictor() {
        Predictor::Pair { .. } => {
            if k != 2 || horizon != 1 {
                return Err(Error::invalid("pair-mlp prediction requires K = 2"));
            }
            let wide = tape.reshape(shots, vec![videos, k * dv])?;
            let context = tape.slice_cols(wide, 0, dv)?;
            (model.pair_scores(tape, context, shots)?, 1)
        }
        Predictor::Recurrent { .. } => {
            let preds = model.predict_sequence(tape, shots, videos, k)?;
            (tape.matmul(preds, shots, true)?, k - horizon)
        }
        Predictor::Order(_) => return Err(Error::invalid("order predictor cannot score futures")),
    };
    let cols = videos * k;
    let mut positives = Vec::with_capacity(videos * steps);
    let mut mask = Vec::with_capacity(videos * steps * cols);
    for i in 0..videos {
        for s in 0..steps {
            let target = s + horizon;
            let pos = i * k + target;
            positives.push(pos);
            for j in 0..videos {
                for t in 0..k {
                    let col = j * k + t;
                    mask.push(match negatives {
                        NegativeSet::AllShots => j != i || col == pos,
                        NegativeSet::SameStep => t == target,
                    });
                }
            }
        }
    }
    tape.info_nce(scores, &positives, Some(&mask))
}

/// Shot-order loss: sequences flagged in `reversed` are presented back to
/// front and labeled 1.
pub fn order_loss<T: Real>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    shots: Var,
    videos: usize,
    k: usize,
    reversed: &[bool],
) -> Result<Var> {
    let dv = tape.value(shots).cols();
    if reversed.len() != videos || tape.value(shots).rows() != videos * k {
        return Err(Error::Shape {
            op: "order_loss",
            lhs: tape.shape(shots).to_vec(),
            rhs: vec![videos, k],
        });
    }
    let mut idx = Vec::with_capacity(videos * k * dv);
    for (i, &rev) in reversed.iter().enumerate() {
        for t in 0..k {
            let src = if rev { k - 1 - t } else { t };
            idx.extend((0..dv).map(|d| (i * k + src) * dv + d));
        }
    }
    let flat = tape.gather(shots, &idx)?;
    let rows = tape.reshape(flat, vec![videos, k * dv])?;
    let logits = model.order_logits(tape, rows)?;
    let labels: Vec<f64> = reversed.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    order_prediction_loss(tape, logits, &labels)
}

/// Mean sigmoid binary cross-entropy.
pub fn order_prediction_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[f64]) -> Result<Var> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("order labels must be 0 or 1"));
    }
    tape.sigmoid_bce(logits, labels)
}

pub struct RotationOutput {
    pub loss: Var,
    /// Encoder output for all `4B` rows; rows `0..B` are the unrotated frames.
    pub encoded: Encoded,
}

/// Four-way rotation prediction over the batch plus its three rotated copies.
///
/// Copy `r` (rotated by `r · 90°`) is labeled `(r + label_offset) mod 4`, so a
/// batch pre-rotated by `q · 90°` with `label_offset = q` yields the same set
/// of labeled examples.
pub fn rotation_loss<T: Real>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    frames: &Tensor<T>,
    mode: Mode,
    label_offset: usize,
) -> Result<RotationOutput> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "rotation_loss",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h != w {
        return Err(Error::invalid(format!("rotation needs square frames, got {h}x{w}")));
    }
    let per = h * w * c;
    let mut data = Vec::with_capacity(4 * frames.len());
    let mut targets = Vec::with_capacity(4 * b);
    for r in 0..4 {
        for f in frames.data().chunks(per) {
            data.extend(rotate90(f, h, c, r));
            targets.push((r + label_offset) % 4);
        }
    }
    let x = tape.try_input(Tensor::new(vec![4 * b, h, w, c], data))?;
    let encoded = model.encode(tape, x, mode)?;
    let logits = model.apply_head(tape, encoded.prelogits, Head::Rotation)?;
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok(RotationOutput { loss, encoded })
}

/// Mean softmax cross-entropy of the classifier head on labeled images.
pub fn supervised_ce_loss<T: Real>(
    model: &ModelBundle<T>,
    tape: &mut Tape<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
) -> Result<(Var, Encoded)> {
    let classes = model.config.classifier_outputs;
    if classes == 0 {
        return Err(Error::invalid("model has no classifier head"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let x = tape.try_input(images.clone())?;
    let encoded = model.encode(tape, x, mode)?;
    let logits = model.apply_head(tape, encoded.prelogits, Head::Classifier)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((loss, encoded))
}

/// `L_S + λ·L_V (+ γ·L_SUP)`; every enabled term must be present.
pub fn combine_total<T: Real>(
    tape: &mut Tape<T>,
    shot: Option<Var>,
    video: Option<Var>,
    supervised: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let e = &w.enabled;
    let need = |on: bool, v: Option<Var>, name: &str| -> Result<Option<Var>> {
        match (on, v) {
            (true, None) => Err(Error::invalid(format!("enabled loss term `{name}` is missing"))),
            (true, Some(v)) => Ok(Some(v)),
            (false, _) => Ok(None),
        }
    };
    let shot = need(e.shot, shot, "shot")?;
    let video = need(e.video, video, "video")?;
    let supervised = need(e.supervised, supervised, "supervised")?;
    let mut total = match shot {
        Some(v) => v,
        None => tape.input(Tensor::scalar(T::zero())),
    };
    if let Some(v) = video {
        let scaled = tape.scale(v, T::of(w.lambda))?;
        total = tape.add(total, scaled)?;
    }
    if let Some(v) = supervised {
        let scaled = tape.scale(v, T::of(w.gamma))?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PredictorConfig, PredictorKind};

    #[test]
    fn triplet_one_dimensional_example() {
        // a = 0.0, p = 0.1 (class 0); n1 = 0.3, n2 = 2.0 (class 1)
        let emb: [f64; 4] = [0.0, 0.1, 0.3, 2.0];
        let classes = [0, 0, 1, 1];
        let d = crate::autodiff::tape::pairwise_sq_dist(&emb, 4, 1);
        let t = mine_semihard(&d, &classes, 0.5).unwrap();
        let first = t.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
        assert_eq!(first.negative, 2);
        let term = d[1] - d[2] + 0.5;
        assert!((term - 0.42).abs() < 1e-12);
    }

    #[test]
    fn triplet_zero_when_classes_are_separated() {
        let emb = [0.0, 0.01, 5.0, 5.01, 10.0, 10.02];
        let l = triplet_semihard_value(&emb, 1, &[0, 0, 1, 1, 2, 2], 0.5).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn triplet_rejects_single_class() {
        assert!(triplet_semihard_value(&[0.0, 1.0], 1, &[3, 3], 0.5).is_err());
    }

    #[test]
    fn infonce_examples() {
        assert_eq!(infonce_value(&[2.5; 9], 3).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let expected = ((e + 1.0) / 2.0).ln() - 1.0;
        let got = infonce_value(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got + 0.37989).abs() < 1e-5);
        assert!(infonce_value(&[1.0], 1).is_err());
    }

    #[test]
    fn order_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::zeros(&[4]));
        let l = order_prediction_loss(&mut tape, z, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let z = tape.input(Tensor::scalar(20.0));
        let l = order_prediction_loss(&mut tape, z, &[1.0]).unwrap();
        assert!((tape.scalar(l) - 2.06e-9).abs() < 1e-10);
        // mixed case against the direct formula
        let logits = [0.5, -1.2, 2.0];
        let labels = [1.0, 0.0, 0.0];
        let z = tape.input(Tensor::from_f64(&[3], &logits));
        let l = order_prediction_loss(&mut tape, z, &labels).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = logits
            .iter()
            .zip(labels)
            .map(|(&x, y)| -(y * sig(x).ln() + (1.0 - y) * (1.0 - sig(x)).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn combine_total_examples() {
        let mut tape = Tape::<f64>::new();
        let ls = tape.input(Tensor::scalar(1.0));
        let lv = tape.input(Tensor::scalar(0.5));
        let lsup = tape.input(Tensor::scalar(2.0));
        let mut w = LossWeights {
            lambda: 0.04,
            ..LossWeights::default()
        };
        let t = combine_total(&mut tape, Some(ls), Some(lv), None, &w).unwrap();
        assert!((tape.scalar(t) - 1.02).abs() < 1e-12);
        w.lambda = 0.0;
        let t = combine_total(&mut tape, Some(ls), Some(lv), None, &w).unwrap();
        assert_eq!(tape.scalar(t), 1.0);
        w.enabled.supervised = true;
        assert!(combine_total(&mut tape, Some(ls), Some(lv), None, &w).is_err());
        w.gamma = 1.0;
        let t = combine_total(&mut tape, Some(ls), Some(lv), Some(lsup), &w).unwrap();
        assert_eq!(tape.scalar(t), 3.0);
    }

    fn tiny(kind: PredictorKind, shots: usize) -> ModelConfig {
        ModelConfig {
            input_size: 8,
            channels: vec![8, 8],
            embed_dim: 6,
            exemplar_outputs: 4,
            video_projection_dim: 3,
            classifier_outputs: 3,
            predictor: PredictorConfig {
                kind,
                shots,
                mlp_hidden: 5,
                mlp_output: 4,
                recurrent_hidden: 4,
                ..PredictorConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rotation_loss_with_zero_head_is_ln4() {
        let mut m = ModelBundle::<f64>::new(tiny(PredictorKind::Recurrent, 4), 0).unwrap();
        let head = m.head_linear(Head::Rotation).unwrap();
        for id in [head.w, head.b] {
            m.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let frames = Tensor::full(&[2, 8, 8, 3], 0.3);
        let mut tape = Tape::new();
        let out = rotation_loss(&m, &mut tape, &frames, Mode::Train, 0).unwrap();
        assert!((tape.scalar(out.loss) - 4f64.ln()).abs() < 1e-12);
        let bad = Tensor::full(&[1, 8, 4, 3], 0.3);
        assert!(rotation_loss(&m, &mut tape, &bad, Mode::Train, 0).is_err());
    }

    #[test]
    fn supervised_ce_label_range() {
        let m = ModelBundle::<f64>::new(tiny(PredictorKind::Recurrent, 4), 0).unwrap();
        let mut tape = Tape::new();
        let imgs = Tensor::full(&[2, 8, 8, 3], 0.5);
        assert!(supervised_ce_loss(&m, &mut tape, &imgs, &[0, 3], Mode::Train).is_err());
        assert!(supervised_ce_loss(&m, &mut tape, &imgs, &[0, 2], Mode::Train).is_ok());
    }
}
