//! Central finite-difference verification of analytic gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
const DEGENERATE: f64 = 1e-12;
/// Denominator floor: central differences at `FD_STEP` resolve gradients only
/// to about 1e-11, so smaller magnitudes are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with the degenerate case (both magnitudes tiny) mapped to 0
/// and the denominator floored at [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < DEGENERATE {
        0.0
    } else {
        (analytic - numeric).abs() / denom.max(ABS_FLOOR)
    }
}

/// Checks a scalar function of freshly drawn inputs, uniform in `[-1, 1]`.
pub fn grad_check<F>(name: &str, shapes: &[&[usize]], seed: u64, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            store.add(format!("input{i}"), Tensor::new(shape.to_vec(), data), false)
        })
        .collect();
    grad_check_store(name, &mut store, tolerance, None, seed, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        build(tape, &vars)
    })
}

/// Checks every trainable element of `store` (or a seeded sample of at most
/// `max_per_param` elements of each parameter).
pub fn grad_check_store<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    tolerance: f64,
    max_per_param: Option<usize>,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut max_err = 0f64;
    let mut checked = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).len();
        let elems: Vec<usize> = match max_per_param {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for e in elems {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + FD_STEP;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[e] = orig - FD_STEP;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.get(id).data()[e];
            max_err = max_err.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_err,
        checked,
        tolerance,
        passed: max_err <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_passes() {
        let r = grad_check("linear", &[&[3, 4], &[4, 2], &[2]], 1, 1e-4, |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 12 + 8 + 2);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let r = grad_check("bad_sin", &[&[6]], 3, 1e-4, |t, v| {
            let y = t.map(v[0], |x| x.sin(), |x| 1.1 * x.cos())?;
            t.sum(y)
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn degenerate_denominator_counts_as_pass() {
        assert_eq!(relative_error(1e-13, -1e-13), 0.0);
        assert!(relative_error(1.0, 1.1) > 0.09);
        assert!(relative_error(3e-12, 2e-12) <= 1e-4);
        assert!(relative_error(3e-5, 2e-5) > 0.3);
    }
}
