//! Adam with coupled L2, global-norm clipping and a plateau schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{config_err, contract_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) || self.eps <= 0.0 {
            return Err(config_err!("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Moment buffers for every trainable tensor of one store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = trainable(store).map(|(_, n)| n).collect();
        Ok(Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

fn trainable(store: &ParamStore) -> impl Iterator<Item = (crate::autodiff::ParamId, usize)> + '_ {
    store
        .ids()
        .filter(|&id| store.get(id).requires_grad())
        .map(|id| (id, store.get(id).numel()))
}

/// Global L2 norm over all gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales all buffers by `max_norm / n` when their joint norm `n` exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    n
}

/// One update of every trainable tensor in `store` from its stored
/// gradient: `g' = g + λθ`, optional clipping of `g'`, then the
/// bias-corrected Adam step. Returns the pre-clip gradient norm.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, max_norm: Option<f64>) -> Result<f64> {
    let ids: Vec<_> = trainable(store).collect();
    if ids.len() != state.m.len() {
        return Err(contract_err!(
            "optimizer tracks {} tensors, store has {} trainable",
            state.m.len(),
            ids.len()
        ));
    }
    let lambda = state.config.weight_decay;
    let mut grads = Vec::with_capacity(ids.len());
    for (k, &(id, n)) in ids.iter().enumerate() {
        if state.m[k].len() != n {
            return Err(contract_err!("optimizer buffer {k} has {} elements, tensor has {n}", state.m[k].len()));
        }
        let t = store.get(id);
        let g = match t.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        grads.push(
            g.iter()
                .zip(t.data())
                .map(|(g, th)| g + lambda * th)
                .collect::<Vec<f64>>(),
        );
    }
    let norm = match max_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }

    state.t += 1;
    let AdamConfig {
        lr, beta1, beta2, eps, ..
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (k, &(id, _)) in ids.iter().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = store.get_mut(id).data_mut();
        for i in 0..theta.len() {
            let g = grads[k][i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub rel_threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-5,
            rel_threshold: 1e-4,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(config_err!("scheduler factor must lie in (0, 1)"));
        }
        if !(self.min_lr > 0.0) || !(self.rel_threshold >= 0.0) {
            return Err(config_err!("scheduler min_lr must be positive and rel_threshold non-negative"));
        }
        Ok(())
    }
}

/// Reduce-on-plateau driven by validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub wait: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lr: lr.max(config.min_lr),
            config,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64) -> Result<f64> {
        if val_loss.is_nan() {
            return Err(Error::Divergence("validation loss is NaN".into()));
        }
        if val_loss < self.best * (1.0 - self.config.rel_threshold) || self.best == f64::INFINITY {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.wait = 0;
            }
        }
        Ok(self.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn store_with(theta: &[f64], grad: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[theta.len()], theta.to_vec()).unwrap());
        s.get_mut(id).grad_mut().copy_from_slice(grad);
        s
    }

    fn first(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.data()[0]
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g in [3.7, -0.02] {
            let mut s = store_with(&[0.5], &[g]);
            let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
            adam_step(&mut s, &mut st, None).unwrap();
            let delta = first(&s) - 0.5;
            let expect = -1e-3 * g.signum();
            assert!(((delta - expect) / expect).abs() < 1e-6, "{delta}");
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn zero_gradient_cases() {
        let mut s = store_with(&[0.5], &[0.0]);
        let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
        adam_step(&mut s, &mut st, Some(1.0)).unwrap();
        assert_eq!(first(&s), 0.5);

        let cfg = AdamConfig {
            weight_decay: 1e-2,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s, cfg).unwrap();
        adam_step(&mut s, &mut st, Some(1.0)).unwrap();
        assert!(first(&s) < 0.5);
    }

    #[test]
    fn buffers_are_skipped_and_shape_mismatch_is_rejected() {
        let mut s = store_with(&[1.0, 2.0], &[1.0, 1.0]);
        s.add_buffer("running", Tensor::new(&[1], vec![7.0]).unwrap());
        let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
        assert_eq!(st.m.len(), 1);
        adam_step(&mut s, &mut st, None).unwrap();
        assert_eq!(s.get(s.find("running").unwrap()).data(), &[7.0]);

        let mut other = store_with(&[1.0, 2.0, 3.0], &[0.0; 3]);
        assert!(matches!(adam_step(&mut other, &mut st, None), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut s = store_with(&[0.0], &[0.3]);
        let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut s, &mut st, None).unwrap();
            let now = first(&s);
            step = prev - now;
            prev = now;
        }
        assert!((step - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![0.3, 0.4]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.5);
        assert_eq!(g, vec![vec![0.3, 0.4]]);
        let mut g = vec![vec![2.0, 0.0]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![vec![1.0, 0.0]]);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut s = store_with(&[0.0], &[f64::NAN]);
        let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
        assert!(matches!(adam_step(&mut s, &mut st, Some(1.0)), Err(Error::Divergence(_))));
    }

    proptest! {
        #[test]
        fn clipping_bounds_norm_and_keeps_direction(
            grads in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..6), 1..4),
            max_norm in 0.01f64..10.0,
        ) {
            let mut g = grads.clone();
            let before = clip_global_norm(&mut g, max_norm);
            prop_assert!(global_norm(&g) <= max_norm + 1e-12);
            if before > 0.0 {
                let s = global_norm(&g) / before;
                for (a, b) in grads.iter().flatten().zip(g.iter().flatten()) {
                    prop_assert!((a * s - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }

        #[test]
        fn second_moment_stays_non_negative(gs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let mut s = store_with(&[0.1], &[0.0]);
            let mut st = AdamState::new(&s, AdamConfig { weight_decay: 1e-3, ..AdamConfig::default() }).unwrap();
            for (k, g) in gs.iter().enumerate() {
                s.zero_grad();
                let id = s.find("w").unwrap();
                s.get_mut(id).grad_mut()[0] = *g;
                adam_step(&mut s, &mut st, Some(1.0)).unwrap();
                prop_assert_eq!(st.t, k as u64 + 1);
                prop_assert!(st.v[0][0] >= 0.0);
            }
        }

        #[test]
        fn scheduler_is_monotone_and_floored(losses in prop::collection::vec(0.0f64..5.0, 0..80)) {
            let mut a = PlateauScheduler::new(PlateauConfig::default(), 1e-3).unwrap();
            let mut b = a.clone();
            let mut prev = a.lr;
            for l in &losses {
                let lr = a.step(*l).unwrap();
                prop_assert!(lr <= prev && lr >= 1e-5);
                prev = lr;
                prop_assert_eq!(b.step(*l).unwrap(), lr);
            }
        }
    }

    #[test]
    fn scheduler_examples() {
        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-3).unwrap();
        for l in [1.0, 0.9, 0.8] {
            assert_eq!(s.step(l).unwrap(), 1e-3);
        }

        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-3).unwrap();
        let lrs: Vec<f64> = [1.0; 5].iter().map(|&l| s.step(l).unwrap()).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 5e-4]);

        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-3).unwrap();
        for _ in 0..200 {
            s.step(1.0).unwrap();
        }
        assert_eq!(s.lr, 1e-5);
        assert!(matches!(s.step(f64::NAN), Err(Error::Divergence(_))));
    }
}
