use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Sample, Split, SplitTag};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::rng::RngState;

/// Fraction of the intensity range below which a column counts as blank.
pub const BLANK_THRESHOLD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Cropped {
    pub sample: Sample,
    /// First kept column in the input.
    pub left: usize,
    /// True when every column was blank; the sample is then returned as is.
    pub fully_blank: bool,
}

/// Trims blank columns from the left and right edges of image and mask.
pub fn crop_blank(sample: &Sample) -> Cropped {
    let img = &sample.image;
    let (h, w) = img.dims();
    let (lo, hi) = img.min_max();
    let range = if hi > lo { hi - lo } else { 0.0 };
    let thresh = lo + BLANK_THRESHOLD * range;
    let blank = |x: usize| range == 0.0 || (0..h).all(|y| img.at(y, x) < thresh);
    let Some(left) = (0..w).find(|&x| !blank(x)) else {
        log::warn!("{}: image is blank, not cropped", sample.id);
        return Cropped { sample: sample.clone(), left: 0, fully_blank: true };
    };
    let right = (0..w).rev().find(|&x| !blank(x)).unwrap_or(left) + 1;
    let cw = right - left;
    let mut out = sample.clone();
    out.image = img.crop(0, left, h, cw);
    out.mask = sample.mask.crop(0, left, h, cw);
    out.label = u8::from(out.mask.any());
    Cropped { sample: out, left, fully_blank: false }
}

/// Bilinear (half-pixel centres, edge clamped) resampling of the image and
/// nearest-neighbour resampling of the mask. The label is recomputed.
pub fn resize_to(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(Error::config("size", "resize target must be nonzero"));
    }
    let (h, w) = sample.image.dims();
    let mut out = sample.clone();
    if (h, w) == (height, width) {
        return Ok(out);
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let tap = |dst: usize, scale: f64, n: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..width).map(|x| tap(x, sx, w)).collect();
    let mut image = Image::filled(height, width, 0.0);
    let mut mask = Mask::filled(height, width, 0);
    for y in 0..height {
        let (y0, y1, fy) = tap(y, sy, h);
        let my = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = sample.image.at(y0, x0) * (1.0 - fx) + sample.image.at(y0, x1) * fx;
            let bot = sample.image.at(y1, x0) * (1.0 - fx) + sample.image.at(y1, x1) * fx;
            image.set(y, x, top * (1.0 - fy) + bot * fy);
            let mx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            mask.set(y, x, sample.mask.at(my, mx));
        }
    }
    out.label = u8::from(mask.any());
    out.image = image;
    out.mask = mask;
    Ok(out)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let i = i % period;
    if i < n {
        i
    } else {
        period - i
    }
}

/// Extends `image` to `height x width` by mirroring it past its bottom and
/// right edges. The original occupies the top-left corner.
pub fn reflect_pad(image: &Image, height: usize, width: usize) -> Image {
    let (h, w) = image.dims();
    assert!(height >= h && width >= w, "padding cannot shrink {h}x{w} to {height}x{width}");
    let mut out = Image::filled(height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            out.set(y, x, image.at(reflect(y, h), reflect(x, w)));
        }
    }
    out
}

/// Pooled pixel statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// Ids of the samples the statistics were computed from.
    pub train_ids: BTreeSet<String>,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0, train_ids: BTreeSet::new() }
    }
}

pub fn compute_stats(split: Split<'_>) -> Result<NormStats> {
    if split.tag != SplitTag::Train {
        return Err(Error::Data(format!("normalisation statistics requested from the {} split", split.tag)));
    }
    let n: usize = split.samples.iter().map(|s| s.image.data.len()).sum();
    if n == 0 {
        return Err(Error::Data("normalisation statistics of an empty split".into()));
    }
    let mean = split.samples.iter().flat_map(|s| &s.image.data).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = split
        .samples
        .iter()
        .flat_map(|s| &s.image.data)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std.is_nan() || std <= 0.0 {
        return Err(Error::Data("training split has zero intensity variance".into()));
    }
    Ok(NormStats { mean, std, train_ids: split.samples.iter().map(|s| s.id.clone()).collect() })
}

pub fn normalize(image: &Image, stats: &NormStats) -> Result<Image> {
    if stats.std.is_nan() || stats.std <= 0.0 {
        return Err(Error::config("std", "normalisation std must be positive"));
    }
    let mut out = image.clone();
    for v in &mut out.data {
        *v = ((*v as f64 - stats.mean) / stats.std) as f32;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub image: Image,
    pub mask: Mask,
    pub label: u8,
    pub top: usize,
    pub left: usize,
    /// The window was centred on a mass pixel.
    pub positive_centered: bool,
}

/// Draws a training window. With probability `positive_center_prob`, when
/// the image has masses, the window is centred on a uniformly chosen mass
/// pixel (shifted to stay in bounds); otherwise its position is uniform.
pub fn sample_patch(
    sample: &Sample,
    rng: &mut RngState,
    patch: (usize, usize),
    positive_center_prob: f64,
) -> Result<PatchSample> {
    let (ph, pw) = patch;
    let (h, w) = sample.image.dims();
    if ph == 0 || pw == 0 || ph % crate::model::CLS_DOWNSAMPLE != 0 || pw % crate::model::CLS_DOWNSAMPLE != 0 {
        return Err(Error::config(
            "patch",
            format!("{ph}x{pw} is not a multiple of {}", crate::model::CLS_DOWNSAMPLE),
        ));
    }
    if ph > h || pw > w {
        return Err(Error::Data(format!("{}: patch {ph}x{pw} larger than image {h}x{w}", sample.id)));
    }
    let positive = sample.mask.any() && rng.bernoulli(positive_center_prob);
    let (top, left) = if positive {
        let px = sample.mask.positives();
        let (cy, cx) = px[rng.below(px.len())];
        (cy.saturating_sub(ph / 2).min(h - ph), cx.saturating_sub(pw / 2).min(w - pw))
    } else {
        (rng.below(h - ph + 1), rng.below(w - pw + 1))
    };
    let mask = sample.mask.crop(top, left, ph, pw);
    Ok(PatchSample {
        image: sample.image.crop(top, left, ph, pw),
        label: u8::from(mask.any()),
        mask,
        top,
        left,
        positive_centered: positive,
    })
}

/// Flips image and mask together, each axis independently with probability 0.5.
pub fn flip_augment(image: &Image, mask: &Mask, rng: &mut RngState) -> (Image, Mask) {
    let (mut image, mut mask) = (image.clone(), mask.clone());
    if rng.bernoulli(0.5) {
        image = image.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    if rng.bernoulli(0.5) {
        image = image.flip_vertical();
        mask = mask.flip_vertical();
    }
    (image, mask)
}
