//! Adam with bias correction and a linear learning-rate decay to zero.

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Schedule horizon: `lr(t) = base_lr * max(0, 1 - t / total_steps)`.
    pub total_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            base_lr: 0.001,
            total_steps: 10_000,
        }
    }
}

/// First/second moment estimates, aligned with the store's parameter order.
pub struct OptimState {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Completed steps.
    pub t: usize,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, store: &ParamStore<f32>) -> Self {
        let m = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let v = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        OptimState { cfg, m, v, t: 0 }
    }

    /// Learning rate before step `t` (so `lr(0)` drives the first update).
    pub fn lr(&self, t: usize) -> f32 {
        let frac = 1.0 - t as f64 / self.cfg.total_steps as f64;
        (self.cfg.base_lr * frac.max(0.0)) as f32
    }

    /// One bias-corrected Adam update over every trainable parameter.
    /// Parameters without a gradient entry this step contribute a zero
    /// gradient. When `clip` is set, all gradients are jointly rescaled so
    /// their global L2 norm does not exceed it.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &Gradients<f32>,
        clip: Option<f64>,
    ) -> Result<()> {
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        if names.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                names.len()
            )));
        }

        let clip_scale: f32 = match clip {
            Some(c) => {
                let mut sq = 0.0f64;
                for name in &names {
                    if let Some(gt) = grads.get(name) {
                        for &g in gt.data() {
                            sq += (g as f64) * (g as f64);
                        }
                    }
                }
                let norm = sq.sqrt();
                if norm > c {
                    (c / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let lr = self.lr(self.t);
        let t1 = (self.t + 1) as i32;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let bc1 = 1.0 - (self.cfg.beta1 as f32).powi(t1);
        let bc2 = 1.0 - (self.cfg.beta2 as f32).powi(t1);
        let eps = self.cfg.eps as f32;

        for (i, name) in names.iter().enumerate() {
            let param = store.get(name)?.clone();
            let zero;
            let grad = match grads.get(name) {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "gradient for `{name}`: {:?} vs {:?}",
                            g.shape(),
                            param.shape()
                        )));
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(param.shape());
                    &zero
                }
            };
            let m = &self.m[i];
            let v = &self.v[i];
            let mut new_m = Vec::with_capacity(param.numel());
            let mut new_v = Vec::with_capacity(param.numel());
            let mut new_p = Vec::with_capacity(param.numel());
            for j in 0..param.numel() {
                let g = grad.data()[j] * clip_scale;
                let mj = b1 * m.data()[j] + (1.0 - b1) * g;
                let vj = b2 * v.data()[j] + (1.0 - b2) * g * g;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                new_m.push(mj);
                new_v.push(vj);
                new_p.push(param.data()[j] - lr * mhat / (vhat.sqrt() + eps));
            }
            self.m[i] = Tensor::new(param.shape().to_vec(), new_m)?;
            self.v[i] = Tensor::new(param.shape().to_vec(), new_v)?;
            store.set(name, Tensor::new(param.shape().to_vec(), new_p)?)?;
        }
        self.t += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn store_one(value: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(value)).unwrap();
        s
    }

    fn grads_one(g: f32) -> Gradients<f32> {
        // Build a gradient map through a real backward pass: loss = g * p.
        let mut graph = Graph::<f32>::new();
        let p = graph.param("p", &Tensor::scalar(1.0)).unwrap();
        let scaled = graph.scale(p, g).unwrap();
        graph.backward(scaled).unwrap()
    }

    #[test]
    fn schedule_is_exact() {
        let state = OptimState::new(
            AdamConfig {
                total_steps: 10_000,
                ..AdamConfig::default()
            },
            &store_one(0.0),
        );
        assert_eq!(state.lr(0), 0.001);
        assert_eq!(state.lr(5_000), 0.0005);
        assert_eq!(state.lr(10_000), 0.0);
        assert_eq!(state.lr(12_000), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = store_one(0.75);
        let mut state = OptimState::new(AdamConfig::default(), &store);
        let grads = grads_one(0.0);
        state.step(&mut store, &grads, None).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 0.75);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn constant_gradient_matches_hand_rolled_recurrence() {
        let g = 0.3f32;
        let mut store = store_one(1.0);
        let cfg = AdamConfig::default();
        let mut state = OptimState::new(cfg.clone(), &store);
        for _ in 0..3 {
            let grads = grads_one(g);
            state.step(&mut store, &grads, None).unwrap();
        }

        // Scalar Adam recurrence, spelled out.
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
        let (mut m, mut v, mut p) = (0.0f32, 0.0f32, 1.0f32);
        for t in 0..3 {
            let lr = (cfg.base_lr * (1.0 - t as f64 / cfg.total_steps as f64)) as f32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t + 1));
            let vhat = v / (1.0 - b2.powi(t + 1));
            p -= lr * mhat / (vhat.sqrt() + eps);
        }
        let got = store.get("p").unwrap().data()[0];
        assert!((got - p).abs() < 1e-10, "got {got}, expected {p}");
    }

    #[test]
    fn parameters_freeze_at_schedule_end() {
        let mut store = store_one(0.5);
        let mut state = OptimState::new(
            AdamConfig {
                total_steps: 2,
                ..AdamConfig::default()
            },
            &store,
        );
        state.t = 2; // lr is 0 from here on
        let grads = grads_one(1.7);
        state.step(&mut store, &grads, None).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 0.5);
        assert_eq!(state.t, 3);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let mut a = store_one(1.0);
        let mut b = store_one(1.0);
        let mut sa = OptimState::new(AdamConfig::default(), &a);
        let mut sb = OptimState::new(AdamConfig::default(), &b);
        // Norm 200 clipped to 100 halves the gradient.
        sa.step(&mut a, &grads_one(200.0), Some(100.0)).unwrap();
        sb.step(&mut b, &grads_one(100.0), None).unwrap();
        assert_eq!(a.get("p").unwrap().data()[0], b.get("p").unwrap().data()[0]);
    }
}
