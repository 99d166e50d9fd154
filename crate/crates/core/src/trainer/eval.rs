//! Whole-image inference and evaluation.

use crate::data::{normalize, NormStats, Sample};
use crate::error::{Error, Result};
use crate::metrics::{cls_suite, seg_suite, seg_to_cls_score, threshold_metrics, ClsEval, SegEval};
use crate::model::{image_probability, UResNet};
use crate::raster::{Image, Mask};
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::{no_grad, Tensor};

/// Decision threshold for masks and image labels.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Pixels whose mass logit exceeds the background logit, from the
    /// finest supervised level with a segmentation head.
    pub mask: Option<Mask>,
    /// Per-pixel mass probability for the same level.
    pub probability: Option<Image>,
    /// Image-level mass probability.
    pub score: f64,
    /// `(level, height, width)` of every classification map.
    pub cls_map_shapes: Vec<(usize, usize, usize)>,
}

/// Runs the model on one already-normalised image.
pub fn predict<T: Real>(model: &UResNet<T>, image: &Image) -> Result<Prediction> {
    let (h, w) = image.dims();
    let x = Tensor::new(&[1, 1, h, w], image.data.iter().map(|&v| T::lit(v as f64)).collect())?;
    let out = no_grad(|| model.forward(&x, false, &mut RngState::new(0)))?;

    let mut mask = None;
    let mut probability = None;
    if let Some(logits) = out.seg_logits().next() {
        let data = logits.data();
        let (bg, fg) = data.split_at(h * w);
        let mut m = Mask::filled(h, w, 0);
        let mut p = Image::filled(h, w, 0.0);
        for i in 0..h * w {
            let z = (fg[i] - bg[i]).as_f64();
            m.data[i] = u8::from(z > 0.0);
            p.data[i] = (1.0 / (1.0 + (-z).exp())) as f32;
        }
        mask = Some(m);
        probability = Some(p);
    }

    let cls_map_shapes = out
        .levels
        .iter()
        .filter_map(|l| l.cls_map.as_ref().map(|c| (l.level, c.shape()[2], c.shape()[3])))
        .collect();
    let score = match (out.cls_maps().next(), &probability) {
        (Some(map), _) => image_probability(map)?.item().as_f64(),
        (None, Some(p)) => seg_to_cls_score(&p.data.iter().map(|&v| v as f64).collect::<Vec<_>>()),
        (None, None) => return Err(Error::config("mode", "model has neither head")),
    };
    Ok(Prediction { mask, probability, score, cls_map_shapes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub seg: Option<SegEval>,
    /// AUC is NaN when the set holds a single class.
    pub cls: ClsEval,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub masks: Vec<Option<Mask>>,
}

impl Evaluation {
    /// Model-selection score: mean of the defined DSC and accuracy.
    pub fn selection_score(&self) -> f64 {
        let mut v = vec![self.cls.acc];
        if let Some(s) = self.seg.filter(|s| !s.dsc.is_nan()) {
            v.push(s.dsc);
        }
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Whole-image evaluation of preprocessed (not yet normalised) samples.
pub fn evaluate<T: Real>(model: &UResNet<T>, samples: &[Sample], stats: &NormStats) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut ids = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(model, &normalize(&s.image, stats)?)?;
        ids.push(s.id.clone());
        scores.push(p.score);
        masks.push(p.mask);
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let seg = if model.config().mode.has_seg() {
        let preds: Vec<Mask> = masks.iter().map(|m| m.clone().expect("seg head present")).collect();
        let gts: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
        Some(seg_suite(&preds, &gts)?)
    } else {
        None
    };
    let cls = match cls_suite(&scores, &labels, THRESHOLD) {
        Err(Error::UndefinedMetric(_)) => threshold_metrics(&scores, &labels, THRESHOLD)?,
        r => r?,
    };
    Ok(Evaluation { seg, cls, ids, scores, masks })
}
