//! Finite-difference checks over every differentiable primitive and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_store, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{self, LossWeights, NegativeSet};
use crate::model::{Head, ModelBundle, ModelConfig, Mode, NormKind, PredictorConfig, PredictorKind};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Parameter elements sampled per tensor in the model-level checks.
const MODEL_SAMPLES: usize = 4;

fn fixed(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect())
}

/// `Σ y ⊙ R` for a fixed random `R`, so linear ops get a non-trivial upstream gradient.
fn wsum(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let r = t.input(fixed(t.shape(y), 77));
    let p = t.mul(y, r)?;
    t.sum(p)
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Tape<f64>, &[Var]) -> Result<Var>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1], false)?;
            wsum(t, y)
        }),
        ("matmul_trans_b", vec![vec![3, 4], vec![5, 4]], |t, v| {
            let y = t.matmul(v[0], v[1], true)?;
            wsum(t, y)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            wsum(t, y)
        }),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            wsum(t, y)
        }),
        ("channel_affine", vec![vec![2, 3, 3, 4], vec![4], vec![4]], |t, v| {
            let y = t.channel_affine(v[0], v[1], v[2])?;
            wsum(t, y)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            wsum(t, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            wsum(t, y)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            wsum(t, y)
        }),
        ("scale", vec![vec![3, 4]], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            wsum(t, y)
        }),
        ("add_scalar", vec![vec![3, 4]], |t, v| {
            let y = t.add_scalar(v[0], 0.3)?;
            let y = t.mul(y, y)?;
            wsum(t, y)
        }),
        ("relu", vec![vec![4, 5]], |t, v| {
            let y = t.relu(v[0])?;
            wsum(t, y)
        }),
        ("sigmoid", vec![vec![4, 5]], |t, v| {
            let y = t.sigmoid(v[0])?;
            wsum(t, y)
        }),
        ("tanh", vec![vec![4, 5]], |t, v| {
            let y = t.tanh(v[0])?;
            wsum(t, y)
        }),
        ("conv2d_same", vec![vec![2, 5, 5, 3], vec![3, 3, 3, 4]], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            wsum(t, y)
        }),
        ("conv2d_stride2", vec![vec![2, 6, 6, 2], vec![3, 3, 2, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            wsum(t, y)
        }),
        ("group_norm", vec![vec![2, 3, 3, 4]], |t, v| {
            let y = t.group_norm(v[0], 2, 1e-5)?;
            wsum(t, y)
        }),
        ("channel_norm", vec![vec![3, 2, 2, 4]], |t, v| {
            let y = t.channel_norm(v[0], 1e-5)?;
            wsum(t, y)
        }),
        ("weight_standardize", vec![vec![3, 3, 2, 4]], |t, v| {
            let y = t.weight_standardize(v[0], 1e-5)?;
            wsum(t, y)
        }),
        ("mean_axis", vec![vec![3, 4, 2]], |t, v| {
            let y = t.mean_axis(v[0], 3, 4, 2, vec![3, 2])?;
            wsum(t, y)
        }),
        ("reshape", vec![vec![3, 4]], |t, v| {
            let y = t.reshape(v[0], vec![2, 6])?;
            wsum(t, y)
        }),
        ("sum", vec![vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }),
        ("mean", vec![vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        ("softmax_cross_entropy", vec![vec![4, 5]], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
        }),
        ("log_sum_exp_rows", vec![vec![3, 4]], |t, v| {
            let mask = [true, false, true, true, true, true, false, true, false, true, true, true];
            let y = t.log_sum_exp_rows(v[0], Some(&mask))?;
            wsum(t, y)
        }),
        ("info_nce", vec![vec![3, 4]], |t, v| {
            let mask = [true, false, true, true, true, true, false, true, false, true, true, true];
            t.info_nce(v[0], &[0, 1, 3], Some(&mask))
        }),
        ("sigmoid_bce", vec![vec![5]], |t, v| t.sigmoid_bce(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0])),
        ("l2_normalize_rows", vec![vec![3, 4]], |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            wsum(t, y)
        }),
        ("concat", vec![vec![3, 2], vec![3, 4]], |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            wsum(t, y)
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v| {
            let y = t.slice_cols(v[0], 1, 3)?;
            wsum(t, y)
        }),
        ("gather", vec![vec![3, 4]], |t, v| {
            let y = t.gather(v[0], &[0, 5, 5, 11, 2])?;
            wsum(t, y)
        }),
        ("pairwise_sq_dist", vec![vec![4, 3]], |t, v| {
            let y = t.pairwise_sq_dist(v[0])?;
            wsum(t, y)
        }),
    ]
}

fn small_model(norm: NormKind, predictor: PredictorKind, shots: usize) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        input_channels: 3,
        channels: vec![4, 8],
        width_multiplier: 1,
        norm,
        groups: 2,
        embed_dim: 8,
        exemplar_outputs: 6,
        video_projection_dim: 5,
        classifier_outputs: 3,
        predictor: PredictorConfig {
            kind: predictor,
            shots,
            mlp_hidden: 6,
            mlp_output: 4,
            recurrent_hidden: 4,
            recurrent_layers: 2,
            horizon: 1,
        },
    }
}

fn frames(count: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = count * 8 * 8 * 3;
    Tensor::new(vec![count, 8, 8, 3], (0..n).map(|_| rng.gen::<f64>()).collect())
}

fn model_check<F>(name: &str, cfg: ModelConfig, seed: u64, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ModelBundle<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut model = ModelBundle::<f64>::new(cfg, seed)?;
    let shadow = model.clone();
    grad_check_store(name, &mut model.params, tolerance, Some(MODEL_SAMPLES), seed, |tape, store| {
        let mut m = shadow.clone();
        m.params = store.clone();
        build(&m, tape)
    })
}

/// Shot embeddings for `videos × k` shots of `views` frames each, pooled and projected.
fn projected_shots(m: &ModelBundle<f64>, t: &mut Tape<f64>, videos: usize, k: usize, views: usize) -> Result<Var> {
    let shots = videos * k;
    let x = t.input(frames(shots * views, 11));
    let enc = m.encode(t, x, Mode::Train)?;
    let d = m.embed_dim();
    let pooled = t.mean_axis(enc.prelogits, shots, views, d, vec![shots, d])?;
    m.apply_head(t, pooled, Head::VideoProjection)
}

fn loss_checks(tolerance: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let classes = [0usize, 0, 1, 1, 2, 2, 3, 3];
    out.push(grad_check("triplet_semihard", &[&[8, 3]], seed, tolerance, |t, v| {
        losses::triplet_semihard_loss(t, v[0], &classes, 0.5)
    })?);
    out.push(grad_check("infonce_scores", &[&[5, 5]], seed, tolerance, |t, v| losses::infonce_loss(t, v[0]))?);
    out.push(grad_check("order_bce", &[&[6]], seed, tolerance, |t, v| {
        losses::order_prediction_loss(t, v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    })?);
    out.push(grad_check("combined_total", &[&[1], &[1], &[1]], seed, tolerance, |t, v| {
        let sq: Vec<Var> = v.iter().map(|&x| t.mul(x, x)).collect::<Result<_>>()?;
        let s: Vec<Var> = sq.iter().map(|&x| t.sum(x)).collect::<Result<_>>()?;
        let mut w = LossWeights {
            lambda: 0.04,
            gamma: 1.0,
            ..LossWeights::default()
        };
        w.enabled.supervised = true;
        losses::combine_total(t, Some(s[0]), Some(s[1]), Some(s[2]), &w)
    })?);

    out.push(model_check(
        "exemplar_triplet_model",
        small_model(NormKind::BatchNorm, PredictorKind::Recurrent, 4),
        seed,
        tolerance,
        |m, t| {
            let x = t.input(frames(8, 3));
            let enc = m.encode(t, x, Mode::Train)?;
            let e = m.apply_head(t, enc.prelogits, Head::Exemplar)?;
            losses::triplet_semihard_loss(t, e, &classes, 0.5)
        },
    )?);
    out.push(model_check(
        "rotation_ce_model",
        small_model(NormKind::GroupNormWs, PredictorKind::Recurrent, 4),
        seed,
        tolerance,
        |m, t| Ok(losses::rotation_loss(m, t, &frames(2, 4), Mode::Train, 0)?.loss),
    )?);
    out.push(model_check(
        "supervised_ce_model",
        small_model(NormKind::GroupNormWs, PredictorKind::Recurrent, 4),
        seed,
        tolerance,
        |m, t| Ok(losses::supervised_ce_loss(m, t, &frames(4, 5), &[0, 2, 1, 2], Mode::Train)?.0),
    )?);
    out.push(model_check(
        "infonce_recurrent_model",
        small_model(NormKind::BatchNorm, PredictorKind::Recurrent, 4),
        seed,
        tolerance,
        |m, t| {
            let p = projected_shots(m, t, 3, 4, 2)?;
            losses::video_infonce(m, t, p, 3, 4, NegativeSet::AllShots)
        },
    )?);
    out.push(model_check(
        "infonce_pair_model",
        small_model(NormKind::BatchNorm, PredictorKind::PairMlp, 2),
        seed,
        tolerance,
        |m, t| {
            let p = projected_shots(m, t, 3, 2, 2)?;
            losses::video_infonce(m, t, p, 3, 2, NegativeSet::SameStep)
        },
    )?);
    out.push(model_check(
        "order_bce_model",
        small_model(NormKind::BatchNorm, PredictorKind::OrderMlp, 2),
        seed,
        tolerance,
        |m, t| {
            let p = projected_shots(m, t, 3, 2, 2)?;
            losses::order_loss(m, t, p, 3, 2, &[true, false, true])
        },
    )?);
    out.push(model_check(
        "combined_total_model",
        small_model(NormKind::GroupNormWs, PredictorKind::Recurrent, 2),
        seed,
        tolerance,
        |m, t| {
            let x = t.input(frames(4, 6));
            let enc = m.encode(t, x, Mode::Train)?;
            let e = m.apply_head(t, enc.prelogits, Head::Exemplar)?;
            let ls = losses::triplet_semihard_loss(t, e, &[0, 0, 1, 1], 0.5)?;
            let p = projected_shots(m, t, 2, 2, 2)?;
            let lv = losses::video_infonce(m, t, p, 2, 2, NegativeSet::AllShots)?;
            let (lsup, _) = losses::supervised_ce_loss(m, t, &frames(3, 7), &[0, 1, 2], Mode::Train)?;
            let mut w = LossWeights {
                lambda: 0.5,
                gamma: 0.7,
                ..LossWeights::default()
            };
            w.enabled.supervised = true;
            losses::combine_total(t, Some(ls), Some(lv), Some(lsup), &w)
        },
    )?);
    Ok(out)
}

/// Runs the full suite; every report carries its own pass flag.
pub fn run_suite(tolerance: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (i, (name, shapes, build)) in primitive_cases().into_iter().enumerate() {
        let shapes: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        out.push(grad_check(name, &shapes, seed.wrapping_add(i as u64), tolerance, build)?);
    }
    out.extend(loss_checks(tolerance, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let reports = run_suite(DEFAULT_TOLERANCE, 0).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
