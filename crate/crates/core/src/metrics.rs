//! Segmentation (DSC, SE, FPI) and classification (ACC, AUC, F1,
//! precision, recall) metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Segmentation scores over a set of images. `dsc` and `sensitivity` are
/// averaged over images whose ground truth contains a mass (NaN when there
/// are none); `fpi` is averaged over all images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEval {
    pub dsc: f64,
    pub sensitivity: f64,
    pub fpi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsEval {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// `2 |P ∩ G| / (|P| + |G|)`, and 1.0 when both masks are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt, "dsc")?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0, b != 0);
        p += usize::from(a);
        g += usize::from(b);
        inter += usize::from(a && b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Pixel-level `|P ∩ G| / |G|`; undefined for an empty ground truth.
pub fn sensitivity(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt, "sensitivity")?;
    let g = gt.count();
    if g == 0 {
        return Err(Error::UndefinedMetric("sensitivity with empty ground truth".into()));
    }
    let inter = pred.data.iter().zip(&gt.data).filter(|(&a, &b)| a != 0 && b != 0).count();
    Ok(inter as f64 / g as f64)
}

/// 8-connected component labels (0 = background, components numbered from
/// 1 in raster order of their first pixel) and the component count.
pub fn label_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    // parent[0] is a placeholder so labels index directly.
    let mut parent: Vec<u32> = vec![0];
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    let mut labels = vec![0u32; h * w];
    // First pass: provisional labels from the already-visited neighbours.
    for y in 0..h {
        for x in 0..w {
            if mask.at(y, x) == 0 {
                continue;
            }
            let mut best: Option<u32> = None;
            let neighbours = [
                (y > 0 && x > 0).then(|| (y - 1) * w + x - 1),
                (y > 0).then(|| (y - 1) * w + x),
                (y > 0 && x + 1 < w).then(|| (y - 1) * w + x + 1),
                (x > 0).then(|| y * w + x - 1),
            ];
            for n in neighbours.into_iter().flatten() {
                let l = labels[n];
                if l == 0 {
                    continue;
                }
                match best {
                    None => best = Some(l),
                    Some(b) => {
                        let (ra, rb) = (find(&mut parent, b), find(&mut parent, l));
                        if ra != rb {
                            let (lo, hi) = (ra.min(rb), ra.max(rb));
                            parent[hi as usize] = lo;
                        }
                    }
                }
            }
            labels[y * w + x] = match best {
                Some(l) => l,
                None => {
                    let id = parent.len() as u32;
                    parent.push(id);
                    id
                }
            };
        }
    }
    // Second pass: resolve to dense labels in raster order.
    let mut dense = vec![0u32; parent.len()];
    let mut next = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if dense[root] == 0 {
            next += 1;
            dense[root] = next;
        }
        *l = dense[root];
    }
    (labels, next as usize)
}

/// Number of 8-connected predicted components that do not touch the ground truth.
pub fn fpi(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt, "fpi")?;
    let (labels, n) = label_components(pred);
    let mut hits = vec![false; n + 1];
    for (&l, &g) in labels.iter().zip(&gt.data) {
        if l != 0 && g != 0 {
            hits[l as usize] = true;
        }
    }
    Ok(hits[1..].iter().filter(|&&h| !h).count() as f64)
}

/// Aggregates per-image segmentation metrics over a set.
pub fn seg_suite(preds: &[Mask], gts: &[Mask]) -> Result<SegEval> {
    if preds.len() != gts.len() {
        return Err(Error::shape("seg_suite", format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let (mut d, mut s, mut massy, mut fp) = (0.0, 0.0, 0usize, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        fp += fpi(p, g)?;
        if g.any() {
            d += dsc(p, g)?;
            s += sensitivity(p, g)?;
            massy += 1;
        }
    }
    let mean = |v: f64| if massy == 0 { f64::NAN } else { v / massy as f64 };
    let n = preds.len().max(1) as f64;
    Ok(SegEval { dsc: mean(d), sensitivity: mean(s), fpi: fp / n })
}

fn check_binary(labels: &[u8]) -> Result<(usize, usize)> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney AUC: `P(s+ > s-) + P(s+ = s-) / 2`, via mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores".into()));
    }
    let (pos, neg) = check_binary(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share the mid-rank
        let mid = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Confusion-matrix metrics at `threshold` (score >= threshold is positive)
/// plus AUC. Precision is 0 when nothing is predicted positive; F1 is 0
/// when precision + recall is 0.
pub fn cls_suite(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClsEval> {
    let auc = roc_auc(scores, labels)?;
    Ok(ClsEval { auc, ..threshold_metrics(scores, labels, threshold)? })
}

/// The confusion-matrix part of [`cls_suite`], defined even when only one
/// class is present; `auc` is left NaN.
pub fn threshold_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClsEval> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold", format!("{threshold} outside (0, 1)")));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("cls_suite", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_binary(labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ClsEval { acc: ratio(tp + tn, scores.len()), auc: f64::NAN, f1, precision, recall })
}

/// Image score from a per-pixel mass-probability map: its maximum.
pub fn seg_to_cls_score(prob_map: &[f64]) -> f64 {
    prob_map.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::verify::oracle;

    fn mask(h: usize, w: usize, bits: &[u8]) -> Mask {
        Mask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let a = mask(2, 2, &[1, 1, 0, 0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(2, 2, &[0, 0, 1, 1])).unwrap(), 0.0);
        let e = mask(2, 2, &[0; 4]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        // |P| = 6, |G| = 4, overlap 3
        let p = mask(2, 5, &[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        let g = mask(2, 5, &[0, 0, 0, 1, 1, 1, 1, 0, 0, 0]);
        assert!((dsc(&p, &g).unwrap() - 0.6).abs() < 1e-15);
        assert!(dsc(&p, &mask(1, 2, &[0, 0])).is_err());
    }

    #[test]
    fn sensitivity_cases() {
        let g = mask(1, 4, &[1, 1, 0, 0]);
        assert_eq!(sensitivity(&mask(1, 4, &[1, 1, 1, 0]), &g).unwrap(), 1.0);
        assert_eq!(sensitivity(&mask(1, 4, &[0, 0, 1, 1]), &g).unwrap(), 0.0);
        assert_eq!(sensitivity(&mask(1, 4, &[1, 0, 0, 0]), &g).unwrap(), 0.5);
        assert!(matches!(sensitivity(&g, &mask(1, 4, &[0; 4])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn fpi_cases() {
        let gt = mask(3, 5, &[1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(fpi(&mask(3, 5, &[0; 15]), &gt).unwrap(), 0.0);
        let two_blobs = mask(3, 5, &[1, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0]);
        assert_eq!(fpi(&two_blobs, &gt).unwrap(), 1.0);
        // diagonal neighbours join under 8-connectivity
        let diag = mask(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(label_components(&diag).1, 1);
    }

    #[test]
    fn components_match_flood_fill_on_random_masks() {
        let mut rng = RngState::new(5);
        for _ in 0..200 {
            let (h, w) = (1 + rng.below(9), 1 + rng.below(9));
            let m = Mask::new(h, w, (0..h * w).map(|_| rng.bernoulli(0.45) as u8).collect()).unwrap();
            let g = Mask::new(h, w, (0..h * w).map(|_| rng.bernoulli(0.2) as u8).collect()).unwrap();
            assert_eq!(label_components(&m).1, oracle::count_components(&m));
            assert_eq!(fpi(&m, &g).unwrap(), oracle::fpi(&m, &g));
        }
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        let mut rng = RngState::new(2);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..20).map(|_| (rng.below(6) as f64) / 5.0).collect();
            let mut labels: Vec<u8> = (0..20).map(|_| rng.bernoulli(0.5) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let got = roc_auc(&scores, &labels).unwrap();
            assert!((got - oracle::auc_all_pairs(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let s = [0.3, 0.1, 0.7, 0.2, 0.9, 0.4];
        let y = [0, 0, 1, 1, 1, 0];
        let t: Vec<f64> = s.iter().map(|v: &f64| (5.0 * v).exp() - 2.0).collect();
        assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
    }

    #[test]
    fn cls_suite_cases() {
        let perfect = cls_suite(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((perfect.acc, perfect.f1, perfect.precision, perfect.recall), (1.0, 1.0, 1.0, 1.0));

        let all_pos = cls_suite(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!(all_pos.precision, 0.5);
        assert_eq!(all_pos.recall, 1.0);
        assert!((all_pos.f1 - 2.0 / 3.0).abs() < 1e-15);

        let scores = [0.9, 0.2, 0.6, 0.4, 0.7];
        let y = [1, 0, 0, 1, 1];
        let inv: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let a = cls_suite(&scores, &y, 0.5).unwrap().acc;
        let b = cls_suite(&scores, &inv, 0.5).unwrap().acc;
        assert!((a + b - 1.0).abs() < 1e-15);
        assert!(cls_suite(&scores, &y, 1.0).is_err());
    }

    #[test]
    fn seg_score_is_max() {
        assert_eq!(seg_to_cls_score(&[0.3; 6]), 0.3);
        assert_eq!(seg_to_cls_score(&[0.1, 0.99, 0.2]), 0.99);
    }

    #[test]
    fn seg_suite_averages_massy_images() {
        let gt = vec![mask(1, 4, &[1, 1, 0, 0]), mask(1, 4, &[0; 4])];
        let pr = vec![mask(1, 4, &[1, 0, 0, 0]), mask(1, 4, &[0, 0, 1, 1])];
        let e = seg_suite(&pr, &gt).unwrap();
        assert!((e.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.sensitivity, 0.5);
        assert_eq!(e.fpi, 0.5);
    }

    proptest::proptest! {
        #[test]
        fn dsc_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 35), b in proptest::collection::vec(0u8..2, 35)) {
            let (a, b) = (mask(5, 7, &a), mask(5, 7, &b));
            let d = dsc(&a, &b).unwrap();
            proptest::prop_assert_eq!(d, dsc(&b, &a).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
            if b.any() {
                let hit = a.data.iter().zip(&b.data).filter(|(x, y)| **x == 1 && **y == 1).count();
                proptest::prop_assert_eq!(sensitivity(&a, &b).unwrap(), hit as f64 / b.count() as f64);
            }
        }
    }
}
