//! The hybrid deep-supervision objective.
//!
//! `total = sum_d eta_d * J_seg(d) + alpha * sum_d eta_d * J_cls(d) + lambda * reg`,
//! where `J_seg` is the pixel-averaged two-class cross-entropy, `J_cls` the
//! sparse MIL cost of the level's probabilistic map, and `reg` the squared
//! L2 norm of every decay-flagged parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HdsOutputs, Parameter, PROB_EPS};
use crate::real::Real;
use crate::tensor::{
    add, affine, clamp, log, reduce_max_spatial, reduce_sum, scalar_mul, softmax_cross_entropy_2class, sum_squares,
    Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the classification sum relative to segmentation.
    pub alpha: f64,
    /// Weight of the L2 term.
    pub lambda: f64,
    /// Weight of the MIL sparsity term.
    pub mu: f64,
    /// Level weights, indexed by level.
    pub eta: Vec<f64>,
    /// Fraction of `eta[d]` (d >= 1) reached at the end of annealing.
    pub eta_floor_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.03, lambda: 0.0005, mu: 1e-6, eta: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5], eta_floor_fraction: 0.005 }
    }
}

impl LossWeights {
    pub fn validate(&self, supervision_levels: &[usize]) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.eta_floor_fraction) {
            return Err(Error::config("eta_floor_fraction", "must lie in [0, 1]"));
        }
        if let Some(bad) = self.eta.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::config("eta", format!("{bad} must be finite and non-negative")));
        }
        if let Some(&d) = supervision_levels.iter().find(|&&d| d >= self.eta.len()) {
            return Err(Error::config("eta", format!("no weight for supervised level {d}")));
        }
        Ok(())
    }

    /// Base weights of the supervised levels, in supervision order.
    pub fn eta_for(&self, levels: &[usize]) -> Vec<f64> {
        levels.iter().map(|&d| self.eta[d]).collect()
    }
}

/// Scalar components of one evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_per_level: Vec<f64>,
    pub cls_per_level: Vec<f64>,
    pub l_seg: f64,
    pub l_cls: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the components with the given weights.
    pub fn reassemble(&self, alpha: f64, lambda: f64) -> f64 {
        self.l_seg + alpha * self.l_cls + lambda * self.reg
    }
}

/// Objective value as a differentiable tensor plus its scalar breakdown.
pub struct HdsLoss<T: Real> {
    pub total: Tensor<T>,
    pub breakdown: LossBreakdown,
}

/// Pixel-averaged two-class cross-entropy; `mask` is `[N, H, W]` flattened, values in {0, 1}.
pub fn seg_cross_entropy<T: Real>(logits: &Tensor<T>, mask: &[u8]) -> Result<Tensor<T>> {
    softmax_cross_entropy_2class(logits, mask)
}

/// Sparse MIL cost, averaged over the batch:
/// `-log p(y = y_I | I) + mu * sum_ij r_ij` with `p(y = 1 | I) = max_ij r_ij`
/// and `p(y = 0 | I) = 1 - max_ij r_ij`.
pub fn mil_cls_loss<T: Real>(cls_map: &Tensor<T>, labels: &[u8], mu: f64) -> Result<Tensor<T>> {
    let (n, c, _, _) = cls_map.dims4("mil_cls_loss")?;
    if c != 1 {
        return Err(Error::shape("mil_cls_loss", format!("expected 1 channel, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::shape("mil_cls_loss", format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("image label must be 0 or 1, found {bad}")));
    }
    let p_pos = reduce_max_spatial(cls_map)?;
    // y = 1 -> p, y = 0 -> 1 - p
    let scale = labels.iter().map(|&y| if y == 1 { T::one() } else { -T::one() }).collect();
    let shift = labels.iter().map(|&y| if y == 1 { T::zero() } else { T::one() }).collect();
    let p_true = clamp(&affine(&p_pos, scale, shift)?, T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS));
    let nll = scalar_mul(&reduce_sum(&log(&p_true)?), -T::one());
    let sparsity = scalar_mul(&reduce_sum(cls_map), T::lit(mu));
    let inv_n = T::one() / T::from_usize(n).expect("batch");
    Ok(scalar_mul(&add(&nll, &sparsity)?, inv_n))
}

/// Sum of squares of the decay-flagged parameters.
pub fn l2_reg<T: Real>(params: &[Parameter<T>]) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for p in params.iter().filter(|p| p.decay) {
        let s = sum_squares(&p.tensor);
        acc = Some(match acc {
            Some(a) => add(&a, &s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::scalar(T::zero())))
}

/// Full objective for one batch. `eta_now` holds the current level weights in
/// the order of `outputs.levels`; `seg_target` is the `[N, H, W]` mask and
/// `cls_target` the image labels.
pub fn hds_total<T: Real>(
    outputs: &HdsOutputs<T>,
    seg_target: &[u8],
    cls_target: &[u8],
    weights: &LossWeights,
    eta_now: &[f64],
    params: &[Parameter<T>],
) -> Result<HdsLoss<T>> {
    if eta_now.len() != outputs.levels.len() {
        return Err(Error::shape(
            "hds_total",
            format!("{} level weights for {} supervised levels", eta_now.len(), outputs.levels.len()),
        ));
    }
    let mut bd = LossBreakdown::default();
    let mut seg_sum: Option<Tensor<T>> = None;
    let mut cls_sum: Option<Tensor<T>> = None;
    let accumulate = |slot: &mut Option<Tensor<T>>, term: Tensor<T>| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(s) => add(&s, &term)?,
            None => term,
        });
        Ok(())
    };
    for (level, &eta) in outputs.levels.iter().zip(eta_now) {
        if let Some(logits) = &level.seg_logits {
            let j = seg_cross_entropy(logits, seg_target)?;
            bd.seg_per_level.push(j.item().as_f64());
            accumulate(&mut seg_sum, scalar_mul(&j, T::lit(eta)))?;
        }
        if let Some(map) = &level.cls_map {
            let j = mil_cls_loss(map, cls_target, weights.mu)?;
            bd.cls_per_level.push(j.item().as_f64());
            accumulate(&mut cls_sum, scalar_mul(&j, T::lit(eta)))?;
        }
    }
    let reg = l2_reg(params)?;
    bd.reg = reg.item().as_f64();

    let mut total = scalar_mul(&reg, T::lit(weights.lambda));
    if let Some(s) = seg_sum {
        bd.l_seg = s.item().as_f64();
        total = add(&s, &total)?;
    }
    if let Some(c) = cls_sum {
        bd.l_cls = c.item().as_f64();
        total = add(&total, &scalar_mul(&c, T::lit(weights.alpha)))?;
    }
    bd.total = total.item().as_f64();
    Ok(HdsLoss { total, breakdown: bd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig, LevelOutput, Mode, ParamGroup, UResNet};
    use crate::rng::RngState;

    fn map(h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(&[1, 1, h, w], v).unwrap()
    }

    #[test]
    fn mil_hand_evaluated_cases() {
        // y = 0, max r = 0.5, sum r = 2.0
        let m = map(2, 3, vec![0.5, 0.5, 0.25, 0.25, 0.25, 0.25]);
        let l = mil_cls_loss(&m, &[0], 1e-6).unwrap().item();
        assert!((l - (-(0.5f64).ln() + 2.0e-6)).abs() < 1e-12);
        assert!((l - 0.693149).abs() < 1e-6);

        // y = 1, uniform 0.9 on 3x4
        let m = map(3, 4, vec![0.9; 12]);
        let l = mil_cls_loss(&m, &[1], 1e-6).unwrap().item();
        assert!((l - (-(0.9f64).ln() + 12.0 * 0.9e-6)).abs() < 1e-12);
        assert!((l - 0.105372).abs() < 1e-6);
    }

    #[test]
    fn mil_confident_negative_tends_to_zero() {
        let m = map(4, 3, vec![PROB_EPS; 12]);
        let l = mil_cls_loss(&m, &[0], 1e-6).unwrap().item();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn mil_rejects_bad_labels() {
        assert!(mil_cls_loss(&map(1, 1, vec![0.5]), &[2], 0.0).is_err());
        assert!(mil_cls_loss(&map(1, 1, vec![0.5]), &[0, 1], 0.0).is_err());
    }

    #[test]
    fn sparsity_increases_with_non_max_cells() {
        let base = vec![0.2, 0.9, 0.1, 0.3];
        let l0 = mil_cls_loss(&map(2, 2, base.clone()), &[1], 1e-3).unwrap().item();
        let mut bumped = base;
        bumped[2] += 0.5;
        let l1 = mil_cls_loss(&map(2, 2, bumped), &[1], 1e-3).unwrap().item();
        assert!(l1 > l0);
        assert!((l1 - l0 - 0.5e-3).abs() < 1e-12);
    }

    #[test]
    fn l2_hand_arithmetic() {
        let w = Tensor::leaf(&[2], vec![3.0f64, 4.0]).unwrap();
        let b = Tensor::leaf(&[1], vec![100.0f64]).unwrap();
        let params = vec![
            Parameter { name: "w".into(), tensor: w, decay: true, group: ParamGroup::Main },
            Parameter { name: "b".into(), tensor: b, decay: false, group: ParamGroup::Main },
        ];
        assert_eq!(l2_reg(&params).unwrap().item(), 25.0);
        assert_eq!(l2_reg::<f64>(&[]).unwrap().item(), 0.0);
    }

    #[test]
    fn l2_matches_flat_loop() {
        let m: UResNet<f64> = build_model(&ArchConfig::tiny(), &mut RngState::new(3)).unwrap();
        let mut want = 0.0;
        for p in m.parameters() {
            if p.decay {
                for v in p.tensor.data().iter() {
                    want += v * v;
                }
            }
        }
        let got = l2_reg(m.parameters()).unwrap().item();
        assert!((got - want).abs() <= 1e-12 * want);
    }

    fn random_outputs(levels: usize, seed: u64, seg: bool, cls: bool) -> HdsOutputs<f64> {
        let mut rng = RngState::new(seed);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
        HdsOutputs {
            levels: (0..levels)
                .map(|d| LevelOutput {
                    level: d,
                    seg_logits: seg.then(|| Tensor::new(&[2, 2, 4, 4], v(64)).unwrap()),
                    cls_map: cls.then(|| {
                        Tensor::new(&[2, 1, 2, 1], v(4).into_iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
                            .unwrap()
                    }),
                })
                .collect(),
        }
    }

    #[test]
    fn degenerate_single_level_equals_cross_entropy() {
        let out = random_outputs(1, 1, true, false);
        let mask: Vec<u8> = (0..32).map(|i| (i % 3 == 0) as u8).collect();
        let w = LossWeights { alpha: 0.0, lambda: 0.0, ..LossWeights::default() };
        let l = hds_total(&out, &mask, &[0, 1], &w, &[1.0], &[]).unwrap();
        let ce = seg_cross_entropy(out.levels[0].seg_logits.as_ref().unwrap(), &mask).unwrap().item();
        assert_eq!(l.breakdown.total, ce);
    }

    #[test]
    fn reassembly_and_scaling() {
        let out = random_outputs(2, 7, true, true);
        let mask: Vec<u8> = (0..32).map(|i| (i % 5 == 0) as u8).collect();
        let m: UResNet<f64> = build_model(&ArchConfig::tiny(), &mut RngState::new(3)).unwrap();
        let w = LossWeights::default();
        let l = hds_total(&out, &mask, &[0, 1], &w, &[1.0, 1.5], m.parameters()).unwrap();
        let bd = &l.breakdown;
        let want = bd.seg_per_level[0] + 1.5 * bd.seg_per_level[1]
            + w.alpha * (bd.cls_per_level[0] + 1.5 * bd.cls_per_level[1])
            + w.lambda * bd.reg;
        assert!((bd.total - want).abs() <= 1e-6 * want.abs());
        assert!((bd.total - bd.reassemble(w.alpha, w.lambda)).abs() <= 1e-12 * bd.total.abs());

        let l3 = hds_total(&out, &mask, &[0, 1], &w, &[3.0, 4.5], m.parameters()).unwrap();
        assert!((l3.breakdown.l_seg - 3.0 * bd.l_seg).abs() < 1e-12);
        assert!((l3.breakdown.l_cls - 3.0 * bd.l_cls).abs() < 1e-12);
        assert_eq!(l3.breakdown.reg, bd.reg);
    }

    #[test]
    fn seg_only_has_no_cls_term() {
        let out = random_outputs(2, 2, true, false);
        let mask = vec![0u8; 32];
        let m: UResNet<f64> = build_model(&ArchConfig::tiny().with_mode(Mode::SegOnly), &mut RngState::new(3)).unwrap();
        let w = LossWeights::default();
        let l = hds_total(&out, &mask, &[0, 0], &w, &[1.0, 1.5], m.parameters()).unwrap();
        assert_eq!(l.breakdown.l_cls, 0.0);
        assert!((l.breakdown.total - (l.breakdown.l_seg + w.lambda * l.breakdown.reg)).abs() < 1e-12);
    }

    #[test]
    fn level_count_mismatch_rejected() {
        let out = random_outputs(2, 2, true, true);
        assert!(hds_total(&out, &[0; 32], &[0, 0], &LossWeights::default(), &[1.0], &[]).is_err());
    }

    #[test]
    fn cross_entropy_matches_per_pixel_loop() {
        let mut rng = RngState::new(19);
        let logits: Vec<f64> = (0..32).map(|_| 3.0 * rng.normal()).collect();
        let mask: Vec<u8> = (0..16).map(|_| rng.bernoulli(0.4) as u8).collect();
        let got = seg_cross_entropy(&Tensor::new(&[1, 2, 4, 4], logits.clone()).unwrap(), &mask).unwrap().item();
        let mut want = 0.0;
        for p in 0..16 {
            let (l0, l1) = (logits[p], logits[16 + p]);
            let z = l0.exp() + l1.exp();
            let pt = if mask[p] == 1 { l1.exp() / z } else { l0.exp() / z };
            want += -pt.ln();
        }
        want /= 16.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
