//! SGD with momentum and AdamW over named parameters.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

impl OptimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimKind::Sgd),
            "adamw" => Some(OptimKind::AdamW),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr", "learning rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Step decay: the base rate until 60% of the epochs, ×0.1 until 80%, ×0.01
/// afterwards.
pub fn step_decay_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let e = epoch as f64;
    let total = epochs as f64;
    if e >= 0.8 * total {
        base * 0.01
    } else if e >= 0.6 * total {
        base * 0.1
    } else {
        base
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    /// SGD: `[velocity]`; AdamW: `[first moment, second moment]`.
    pub buffers: BTreeMap<String, Vec<Tensor<T>>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
            step: 0,
        }
    }

    fn slots(&self) -> usize {
        match self.config.kind {
            OptimKind::Sgd => 1,
            OptimKind::AdamW => 2,
        }
    }

    /// Updates every bound parameter that received a gradient on `tape`.
    pub fn step(&mut self, params: &mut ModelParams<T>, tape: &Tape<T>, lr: f64) -> Result<()> {
        let grads: Vec<(String, Tensor<T>)> = params
            .grads(tape)
            .into_iter()
            .filter_map(|(n, g)| g.map(|g| (n, g.clone())))
            .collect();
        self.step += 1;
        let c = self.config;
        let slots = self.slots();
        let (lr_t, wd) = (T::of(lr), T::of(c.weight_decay));
        for (name, grad) in grads {
            if !grad.is_finite() {
                return Err(Error::NonFinite(alloc::format!("gradient of `{name}`")));
            }
            let p = params.get_mut(&name)?;
            let bufs = self
                .buffers
                .entry(name)
                .or_insert_with(|| (0..slots).map(|_| Tensor::zeros(p.shape())).collect());
            match c.kind {
                OptimKind::Sgd => {
                    let mu = T::of(c.momentum);
                    let v = bufs[0].data_mut();
                    for ((pv, vv), &g) in p.data_mut().iter_mut().zip(v).zip(grad.data()) {
                        let g = g + wd * *pv;
                        *vv = mu * *vv + g;
                        *pv = *pv - lr_t * *vv;
                    }
                }
                OptimKind::AdamW => {
                    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
                    let bc1 = T::one() - T::of(libm::pow(c.beta1, self.step as f64));
                    let bc2 = T::one() - T::of(libm::pow(c.beta2, self.step as f64));
                    let eps = T::of(c.eps);
                    let (m, v) = bufs.split_at_mut(1);
                    let (m, v) = (m[0].data_mut(), v[0].data_mut());
                    for (((pv, mv), vv), &g) in p.data_mut().iter_mut().zip(m).zip(v).zip(grad.data()) {
                        *mv = b1 * *mv + (T::one() - b1) * g;
                        *vv = b2 * *vv + (T::one() - b2) * g * g;
                        let update = (*mv / bc1) / ((*vv / bc2).sqrt() + eps) + wd * *pv;
                        *pv = *pv - lr_t * update;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_step(kind: OptimKind, lr: f64) -> (Tensor<f64>, Tensor<f64>) {
        let mut params = ModelParams::<f64>::new(0);
        params.insert("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let before = params.get("w").unwrap().clone();
        let mut opt = OptimState::new(OptimConfig {
            kind,
            ..OptimConfig::default()
        });
        for _ in 0..3 {
            let mut tape = Tape::new();
            params.bind(&mut tape, true);
            let w = params.var("w").unwrap();
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            opt.step(&mut params, &tape, lr).unwrap();
        }
        (before, params.get("w").unwrap().clone())
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        for kind in [OptimKind::Sgd, OptimKind::AdamW] {
            let (before, after) = quadratic_step(kind, 0.0);
            assert_eq!(before, after);
        }
    }

    #[test]
    fn steps_descend_a_quadratic() {
        for kind in [OptimKind::Sgd, OptimKind::AdamW] {
            let (before, after) = quadratic_step(kind, 0.05);
            let norm = |t: &Tensor<f64>| t.data().iter().map(|x| x * x).sum::<f64>();
            assert!(norm(&after) < norm(&before));
        }
    }

    #[test]
    fn schedule_decays_at_sixty_and_eighty_percent() {
        assert_eq!(step_decay_lr(0.1, 0, 10), 0.1);
        assert_eq!(step_decay_lr(0.1, 5, 10), 0.1);
        assert!((step_decay_lr(0.1, 6, 10) - 0.01).abs() < 1e-15);
        assert!((step_decay_lr(0.1, 8, 10) - 0.001).abs() < 1e-15);
    }
}
