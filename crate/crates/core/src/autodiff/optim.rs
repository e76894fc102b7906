use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub momentum_buffers: Vec<Tensor<T>>,
    pub step: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum_buffers: store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
                .collect(),
            step: 0,
            base_lr,
            momentum,
            weight_decay,
        }
    }

    /// One update at learning rate `lr`:
    /// `buf ← momentum·buf + grad (+ wd·param)`, `param ← param − lr·buf`.
    ///
    /// Gradients are validated before anything is mutated, so a non-finite
    /// gradient leaves parameters and buffers untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if grads.len() != store.len() || self.momentum_buffers.len() != store.len() {
            return Err(Error::invalid("gradient/parameter count mismatch"));
        }
        for (id, g) in grads.iter() {
            let p = store.get(id);
            if g.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "sgd_momentum_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if p.trainable && !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = p.weight_decay && self.weight_decay != 0.0;
            let buf = self.momentum_buffers[id.index()].data_mut();
            let values = p.tensor.data_mut();
            for ((b, w), &gv) in buf.iter_mut().zip(values.iter_mut()).zip(g.data()) {
                let mut grad = gv;
                if decay {
                    grad += wd * *w;
                }
                *b = mu * *b + grad;
                *w = *w - lr * *b;
            }
            if !p.tensor.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Linear warmup followed by piecewise-constant decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay_points: Vec<(usize, f64)>,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, decay_points: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self {
            warmup_steps,
            total_steps,
            decay_points,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        let mut prev = None;
        for &(step, factor) in &self.decay_points {
            if step > self.total_steps || prev.is_some_and(|p| step <= p) {
                return Err(Error::Config(format!(
                    "decay points must be strictly increasing and <= {}",
                    self.total_steps
                )));
            }
            if !(factor > 0.0) {
                return Err(Error::Config(format!("decay factor must be positive, got {factor}")));
            }
            prev = Some(step);
        }
        Ok(())
    }

    /// Parses the `x0.1@90000;110000` notation (one factor, several steps).
    pub fn parse_decay(text: &str) -> Result<Vec<(usize, f64)>> {
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(Vec::new());
        }
        let bad = || Error::Config(format!("cannot parse lr schedule `{text}`"));
        let rest = text
            .strip_prefix('x')
            .or_else(|| text.strip_prefix('×'))
            .ok_or_else(bad)?;
        let (factor, steps) = rest.split_once('@').ok_or_else(bad)?;
        let factor: f64 = factor.trim().parse().map_err(|_| bad())?;
        steps
            .split(';')
            .map(|s| {
                let s = s.trim();
                let n = match s.strip_suffix('k') {
                    Some(k) => k.parse::<usize>().map(|v| v * 1000),
                    None => s.parse::<usize>(),
                };
                n.map(|n| (n, factor)).map_err(|_| bad())
            })
            .collect()
    }

    pub fn lr_at_step(&self, base_lr: f64, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(base_lr * step as f64 / self.warmup_steps as f64);
        }
        let factor: f64 = self
            .decay_points
            .iter()
            .filter(|(s, _)| *s <= step)
            .map(|(_, f)| f)
            .product();
        Ok(base_lr * factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v), true);
        s
    }

    fn grad(store: &ParamStore<f64>, v: f64) -> Gradients<f64> {
        let mut g = Gradients::zeros_like(store);
        g.accumulate(store.id("p").unwrap(), &Tensor::scalar(v));
        g
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = single(1.0);
        let mut opt = OptimizerState::new(&s, 0.1, 0.0, 0.0);
        let g = grad(&s, 1.0);
        opt.step(&mut s, &g, 0.1).unwrap();
        assert!((s.value(s.id("p").unwrap()).item() - 0.9).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = single(1.0);
        let mut opt = OptimizerState::new(&s, 0.1, 0.9, 0.0);
        let g = grad(&s, 1.0);
        opt.step(&mut s, &g, 0.1).unwrap();
        assert!((s.value(s.id("p").unwrap()).item() - 0.9).abs() < 1e-12);
        opt.step(&mut s, &g, 0.1).unwrap();
        // buffer 1.9 after the second step
        assert!((s.value(s.id("p").unwrap()).item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_scales_buffers_only() {
        let mut s = single(2.0);
        let mut opt = OptimizerState::new(&s, 0.1, 0.9, 0.0);
        opt.momentum_buffers[0] = Tensor::scalar(1.0);
        let g = grad(&s, 0.0);
        opt.step(&mut s, &g, 0.0).unwrap();
        assert_eq!(s.value(s.id("p").unwrap()).item(), 2.0);
        assert!((opt.momentum_buffers[0].item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut s = single(1.0);
        let mut opt = OptimizerState::new(&s, 0.1, 0.9, 0.0);
        let g = grad(&s, f64::NAN);
        let err = opt.step(&mut s, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.value(s.id("p").unwrap()).item(), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn paper_schedule_values() {
        let decay = Schedule::parse_decay("x0.1@90k;110k").unwrap();
        let s = Schedule::new(5000, 120_000, decay).unwrap();
        assert!((s.lr_at_step(0.8, 100_000).unwrap() - 0.08).abs() < 1e-12);
        assert!((s.lr_at_step(0.8, 115_000).unwrap() - 0.008).abs() < 1e-12);
        assert_eq!(s.lr_at_step(0.8, 0).unwrap(), 0.0);
        assert!((s.lr_at_step(0.8, 2500).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(
            s.lr_at_step(0.8, 120_001),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(10, 10, vec![]).is_err());
        assert!(Schedule::new(1, 10, vec![(5, 0.1), (5, 0.1)]).is_err());
        assert!(Schedule::new(1, 10, vec![(11, 0.1)]).is_err());
    }
}
