use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily,
/// zero-initialized, the first time a parameter receives an update.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    /// Frozen parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.decay { c.lr * c.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w -= decay * *w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales `grads` of trainable parameters so their global L2 norm is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &ParamStore, grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .filter(|(n, _)| store.param(n).is_some_and(|p| p.trainable))
        .map(|(_, g)| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![v]).unwrap(), trainable, true).unwrap();
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, &grad(1.0));
        let p = s.get("p").unwrap().data()[0];
        assert!((p - 0.9).abs() < 1e-7, "{p}");
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = scalar_store(0.7, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut s, &grad(0.0));
        }
        assert_eq!(s.get("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn frozen_is_never_updated() {
        let mut s = scalar_store(0.7, false);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut s, &grad(3.0));
        }
        assert_eq!(s.get("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = scalar_store(2.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s, &grad(0.0));
        assert!((s.get("p").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let s = scalar_store(0.0, true);
        let mut g = grad(4.0);
        let n = clip_grad_norm(&s, &mut g, 1.0);
        assert_eq!(n, 4.0);
        assert!((g["p"].data()[0] - 1.0).abs() < 1e-12);
    }
}
