use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::real::{DType, Real};

const PAPER_EPOCHS: usize = 2800;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Window over which the deep level weights anneal to their floor.
    pub eta_decay_start: usize,
    pub eta_decay_end: usize,
    pub seed: u64,
    pub precision: DType,
    /// Training window `[height, width]`.
    pub patch: [usize; 2],
    pub positive_center_prob: f64,
    /// Random horizontal/vertical flips of each patch.
    pub flip: bool,
    /// Validate every this many epochs (and after the last one); 0 disables.
    pub val_every: usize,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            lr_decay_factor: 0.3,
            lr_milestones: vec![1000, 1800, 2400, 2410],
            epochs: PAPER_EPOCHS,
            batch_size: 2,
            eta_decay_start: 1000,
            eta_decay_end: 2400,
            seed: 0,
            precision: DType::F32,
            patch: [512, 384],
            positive_center_prob: 0.5,
            flip: true,
            val_every: 50,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Default schedule compressed to `epochs`, on 128x128 windows, with
    /// gradient clipping.
    pub fn desk(epochs: usize) -> Self {
        let mut c = Self::default().rescaled(epochs);
        c.patch = [128, 128];
        c.grad_clip = Some(1.0);
        c.val_every = (epochs / 10).max(1);
        c
    }

    /// Scales milestones and the annealing window proportionally to a new
    /// epoch count, keeping milestones strictly increasing and below it.
    pub fn rescaled(&self, epochs: usize) -> Self {
        let scale = |e: usize| ((e as f64) * epochs as f64 / self.epochs as f64).round() as usize;
        let mut milestones: Vec<usize> = Vec::new();
        for &m in &self.lr_milestones {
            let mut v = scale(m).max(1);
            if let Some(&last) = milestones.last() {
                v = v.max(last + 1);
            }
            if v < epochs {
                milestones.push(v);
            }
        }
        Self {
            lr_milestones: milestones,
            epochs,
            eta_decay_start: scale(self.eta_decay_start),
            eta_decay_end: scale(self.eta_decay_end),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1]"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr_milestones", "must be strictly increasing"));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::config("lr_milestones", format!("must be below epochs ({})", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eta_decay_start > self.eta_decay_end {
            return Err(Error::config("eta_decay_start", "must not exceed eta_decay_end"));
        }
        if self.patch.iter().any(|&p| p == 0 || p % crate::model::CLS_DOWNSAMPLE != 0) {
            return Err(Error::config(
                "patch",
                format!("{:?} is not a multiple of {}", self.patch, crate::model::CLS_DOWNSAMPLE),
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("grad_clip", "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.positive_center_prob) {
            return Err(Error::config("positive_center_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `lr0 * factor^k`, where `k` counts milestones at or before `epoch`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let passed = config.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    config.lr0 * config.lr_decay_factor.powi(passed as i32)
}

/// Level weights for every level in `weights.eta`. Level 0 is constant;
/// deeper levels fall linearly from `eta[d]` at `eta_decay_start` to
/// `eta_floor_fraction * eta[d]` at `eta_decay_end`.
pub fn eta_at_epoch(weights: &LossWeights, epoch: usize, config: &TrainConfig) -> Vec<f64> {
    let (start, end) = (config.eta_decay_start, config.eta_decay_end);
    let t = if epoch <= start {
        0.0
    } else if epoch >= end {
        1.0
    } else {
        (epoch - start) as f64 / (end - start) as f64
    };
    let shrink = 1.0 - t * (1.0 - weights.eta_floor_fraction);
    weights.eta.iter().enumerate().map(|(d, &e)| if d == 0 { e } else { e * shrink }).collect()
}

/// `v = momentum * v + g; p -= lr * v`, elementwise.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    debug_assert!(params.len() == grads.len() && grads.len() == velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_milestones() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 0.01);
        assert_eq!(lr_at_epoch(&c, 999), 0.01);
        assert_eq!(lr_at_epoch(&c, 1000), 0.01 * 0.3);
        assert_eq!(lr_at_epoch(&c, 2799), 0.01 * 0.3f64.powi(4));
        assert!((lr_at_epoch(&c, 2799) - 8.1e-5).abs() < 1e-15);
    }

    #[test]
    fn eta_endpoints_and_midpoint() {
        let c = TrainConfig::default();
        let w = LossWeights::default();
        assert_eq!(eta_at_epoch(&w, 0, &c), vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);
        let end = eta_at_epoch(&w, 2400, &c);
        for (a, b) in end.iter().zip([1.0, 0.0075, 0.010, 0.0125, 0.015, 0.0175]) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(eta_at_epoch(&w, 2799, &c), end);
        let mid = eta_at_epoch(&w, 1700, &c);
        assert_eq!(mid[0], 1.0);
        for d in 1..6 {
            assert!((mid[d] - (w.eta[d] + end[d]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_plain_step_and_fixed_point() {
        let mut p = vec![1.5f64, -2.0];
        let g = p.clone();
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &g, &mut v, 1.0, 0.0);
        assert_eq!(p, vec![0.0, 0.0]);

        let mut p = vec![0.3f64, 0.7];
        let mut v = vec![0.0; 2];
        for _ in 0..10 {
            sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9);
        }
        assert_eq!(p, vec![0.3, 0.7]);
    }

    #[test]
    fn sgd_momentum_matches_scalar_recursion() {
        let (lr, m, g) = (0.1f64, 0.9, 0.5);
        let mut p = vec![2.0];
        let mut v = vec![0.0];
        let (mut sp, mut sv) = (2.0f64, 0.0f64);
        for _ in 0..5 {
            sgd_step(&mut p, &[g], &mut v, lr, m);
            sv = m * sv + g;
            sp -= lr * sv;
            assert_eq!(p[0], sp);
        }
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g], &mut v, lr, m);
        sgd_step(&mut p, &[g], &mut v, lr, m);
        assert!((p[0] + lr * (1.0 + 1.9) * g).abs() < 1e-15);
    }

    #[test]
    fn rescaled_schedule_is_valid() {
        for e in [2, 5, 20, 200, 2800] {
            let c = TrainConfig::desk(e);
            c.validate().unwrap();
            assert!(c.eta_decay_start <= c.eta_decay_end && c.eta_decay_end <= e);
        }
        let c = TrainConfig::desk(200);
        assert_eq!(c.lr_milestones, vec![71, 129, 171, 172]);
        assert_eq!((c.eta_decay_start, c.eta_decay_end), (71, 171));
        assert_eq!(TrainConfig::default().rescaled(2800), TrainConfig::default());
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = TrainConfig { lr_milestones: vec![10, 5], ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "lr_milestones"));
        let bad = TrainConfig { patch: [100, 128], ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "patch"));
        let bad = TrainConfig { lr_milestones: vec![2800], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
