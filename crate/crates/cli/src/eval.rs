use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use hds_core::data::{normalize, read_image, reflect_pad, write_mask, SplitTag};
use hds_core::metrics::{ClsEval, SegEval};
use hds_core::raster::{Image, Mask};
use hds_core::trainer::{evaluate, load_model, predict, prepare, read_checkpoint, CheckpointInfo, THRESHOLD};
use hds_core::{DType, Real};
use image::{Rgb, RgbImage};

use crate::manifest::RunManifest;
use crate::train::{load_data, SplitIds};
use crate::{invalid, OutArgs, Weights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory written by `hds train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "best")]
    pub weights: Weights,
    /// Also write one PNG per image with ground truth (red) and predicted
    /// (green) mass boundaries.
    #[arg(long)]
    pub overlay: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale PNG.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "best")]
    pub weights: Weights,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Pixels of `m` with a 4-neighbour outside the mask or the image.
pub fn boundary(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    let mut out = Mask::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            if m.at(y, x) == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || m.at(y - 1, x) == 0
                || m.at(y + 1, x) == 0
                || m.at(y, x - 1) == 0
                || m.at(y, x + 1) == 0;
            out.set(y, x, u8::from(edge));
        }
    }
    out
}

/// Grayscale image with the ground-truth outline in red and the predicted
/// outline in green; pixels on both are yellow.
pub fn overlay(image: &Image, truth: &Mask, pred: Option<&Mask>) -> RgbImage {
    let (h, w) = image.dims();
    let (lo, hi) = image.min_max();
    let range = if hi > lo { hi - lo } else { 1.0 };
    let gt = boundary(truth);
    let pr = pred.map(boundary);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = (((image.at(y, x) - lo) / range) * 255.0).round() as u8;
        let on_gt = gt.at(y, x) == 1;
        let on_pr = pr.as_ref().is_some_and(|p| p.at(y, x) == 1);
        match (on_gt, on_pr) {
            (true, true) => Rgb([255, 255, 0]),
            (true, false) => Rgb([255, 0, 0]),
            (false, true) => Rgb([0, 255, 0]),
            (false, false) => Rgb([g, g, g]),
        }
    })
}

fn fmt_seg(s: Option<SegEval>) -> [String; 3] {
    match s {
        Some(s) => [s.dsc, s.sensitivity, s.fpi].map(|v| v.to_string()),
        None => Default::default(),
    }
}

fn fmt_cls(c: &ClsEval) -> [String; 5] {
    [c.acc, c.auc, c.f1, c.precision, c.recall].map(|v| v.to_string())
}

fn eval_with<T: Real>(a: &EvalArgs, info: &CheckpointInfo, out: &Path) -> Result<()> {
    let (_, model, weights) = load_model::<T>(&a.checkpoint, matches!(a.weights, Weights::Best))?;
    let mut data = load_data(&a.data)?;
    if a.split != SplitArg::All {
        let tag = match a.split {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Val => SplitTag::Val,
            _ => SplitTag::Test,
        };
        let ids = SplitIds::read(&a.checkpoint)?;
        let wanted: HashSet<&String> = ids.get(tag).iter().collect();
        data.retain(|s| wanted.contains(&s.id));
        if data.len() != wanted.len() {
            return Err(invalid(format!(
                "the dataset holds {} of the {} {tag} images the checkpoint was split with",
                data.len(),
                wanted.len()
            )));
        }
    }
    if data.is_empty() {
        return Err(invalid(format!("no images in the {:?} split", a.split)));
    }
    let prepared = prepare(&data, &info.config.data)?;
    let ev = evaluate(&model, &prepared, &info.stats)?;

    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(["split", "images", "dsc", "sensitivity", "fpi", "acc", "auc", "f1", "precision", "recall"])?;
    let split = format!("{:?}", a.split).to_lowercase();
    let mut row = vec![split.clone(), prepared.len().to_string()];
    row.extend(fmt_seg(ev.seg));
    row.extend(fmt_cls(&ev.cls));
    w.write_record(&row)?;
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["id", "label", "score", "predicted", "predicted_pixels"])?;
    for (s, (score, mask)) in prepared.iter().zip(ev.scores.iter().zip(&ev.masks)) {
        let px = mask.as_ref().map(|m| m.count().to_string()).unwrap_or_default();
        w.write_record([s.id.clone(), s.label.to_string(), score.to_string(), u8::from(*score > THRESHOLD).to_string(), px])?;
    }
    w.flush()?;

    if a.overlay {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir)?;
        for (s, mask) in prepared.iter().zip(&ev.masks) {
            overlay(&s.image, &s.mask, mask.as_ref()).save(dir.join(format!("{}.png", s.id)))?;
        }
    }

    println!("{split}: {} images, weights {}", prepared.len(), weights.display());
    if let Some(s) = ev.seg {
        println!("  DSC {:.4}  SE {:.4}  FPI {:.3}", s.dsc, s.sensitivity, s.fpi);
    }
    let c = ev.cls;
    println!("  ACC {:.4}  AUC {:.4}  F1 {:.4}  Prec {:.4}  Recl {:.4}", c.acc, c.auc, c.f1, c.precision, c.recall);
    Ok(())
}

pub fn run_eval(a: &EvalArgs) -> Result<()> {
    let info = read_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let out = a.out.prepare()?;
    match info.config.train.precision {
        DType::F32 => eval_with::<f32>(a, &info, out)?,
        DType::F64 => eval_with::<f64>(a, &info, out)?,
    }
    let mut m = RunManifest::new("eval", serde_json::to_value(&info.config)?, out);
    m.seed = Some(info.config.train.seed);
    m.write()?;
    Ok(())
}

fn predict_with<T: Real>(a: &PredictArgs, out: &Path) -> Result<CheckpointInfo> {
    let (info, model, _) = load_model::<T>(&a.checkpoint, matches!(a.weights, Weights::Best))?;
    let image = read_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let (h, w) = image.dims();
    let m = info.config.arch.input_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = (ph, pw) != (h, w);
    if padded {
        println!("padded {h}x{w} to {ph}x{pw} by reflection; outputs cropped back to {h}x{w}");
    }
    let x = normalize(&reflect_pad(&image, ph, pw), &info.stats)?;
    let p = predict(&model, &x)?;
    println!("mass probability: {:.6}", p.score);
    for (level, ch, cw) in &p.cls_map_shapes {
        println!("level {level} classification map: {ch}x{cw}");
    }
    if let Some(mask) = &p.mask {
        let mask = mask.crop(0, 0, h, w);
        write_mask(&out.join("mask.png"), &mask)?;
        println!("mask: {}x{}, {} mass pixels -> {}", h, w, mask.count(), out.join("mask.png").display());
    }
    fs::write(out.join("score.txt"), format!("{}\n", p.score))?;
    Ok(info)
}

pub fn run_predict(a: &PredictArgs) -> Result<()> {
    let info = read_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let out = a.out.prepare()?;
    let info = match info.config.train.precision {
        DType::F32 => predict_with::<f32>(a, out)?,
        DType::F64 => predict_with::<f64>(a, out)?,
    };
    RunManifest::new("predict", serde_json::to_value(&info.config)?, out).write()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_of_a_square_is_its_ring() {
        let mut m = Mask::filled(6, 6, 0);
        for y in 1..5 {
            for x in 1..5 {
                m.set(y, x, 1);
            }
        }
        let b = boundary(&m);
        assert_eq!(b.count(), 12);
        assert_eq!(b.at(2, 2), 0);
        assert_eq!(b.at(1, 3), 1);
    }

    #[test]
    fn overlay_colours() {
        let img = Image::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let gt = Mask::new(1, 3, vec![1, 1, 0]).unwrap();
        let pr = Mask::new(1, 3, vec![0, 1, 1]).unwrap();
        let o = overlay(&img, &gt, Some(&pr));
        assert_eq!(o.get_pixel(0, 0), &Rgb([255, 0, 0]));
        assert_eq!(o.get_pixel(1, 0), &Rgb([255, 255, 0]));
        assert_eq!(o.get_pixel(2, 0), &Rgb([0, 255, 0]));
        let plain = overlay(&img, &Mask::filled(1, 3, 0), None);
        assert_eq!(plain.get_pixel(2, 0), &Rgb([255, 255, 255]));
    }
}
