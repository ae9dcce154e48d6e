//! AdamW with decoupled weight decay, and the learning-rate and momentum
//! schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Teacher momentum: cosine ramp from `start` at step 0 to `end` at `total`.
pub fn mu_at(start: f64, end: f64, step: usize, total: usize) -> Result<f64> {
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if step == total {
        return Ok(end);
    }
    let progress = (1.0 - (PI * step as f64 / total as f64).cos()) / 2.0;
    Ok(start + (end - start) * progress)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: i32,
}

/// Adam moments are kept per `group/name`; parameters with fewer than two
/// dimensions (biases, norms, mask tokens) are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Names (as `group/name`) that carry optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.state.keys()
    }

    pub fn step(
        &mut self,
        group: &str,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let st = self
                .state
                .entry(format!("{group}/{name}"))
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(g.shape()),
                    v: Tensor::zeros(g.shape()),
                    steps: 0,
                });
            st.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(st.steps);
            let bc2 = 1.0 - self.beta2.powi(st.steps);
            let decay = if p.ndim() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        assert_eq!(lr_at(0, 100, 10, 3e-3), 0.0);
        assert!((lr_at(10, 100, 10, 3e-3) - 3e-3).abs() < 1e-18);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!(lr_at(100, 100, 10, 1.0).abs() < 1e-15);
    }

    #[test]
    fn momentum_endpoints() {
        assert_eq!(mu_at(0.999, 1.0, 0, 1000).unwrap(), 0.999);
        assert_eq!(mu_at(0.999, 1.0, 1000, 1000).unwrap(), 1.0);
        assert!((mu_at(0.999, 1.0, 500, 1000).unwrap() - 0.9995).abs() < 1e-12);
        assert!(matches!(
            mu_at(0.999, 1.0, 1001, 1000),
            Err(Error::StepOutOfRange {
                step: 1001,
                total: 1000
            })
        ));
        assert_eq!(mu_at(0.999, 1.0, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 2], vec![1.0, -1.0]));
        p.insert("b", Tensor::new(&[2], vec![0.0, 0.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1, 2], vec![0.5, -3.0]));
        g.insert("b".to_string(), Tensor::new(&[2], vec![2.0, 0.0]));
        let mut opt = AdamW::new(0.1);
        opt.step("s", &mut p, &g, 0.01);
        // bias-corrected first step is lr * sign(g), plus decay on matrices
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.01 * (1.0 + 0.1))).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 0.01 * (1.0 + 0.1))).abs() < 1e-9);
        let b = p.get("b").unwrap().data();
        assert!((b[0] + 0.01).abs() < 1e-9);
        assert_eq!(b[1], 0.0);
        assert_eq!(
            opt.tracked().cloned().collect::<Vec<_>>(),
            vec!["s/b", "s/w"]
        );
    }
}
