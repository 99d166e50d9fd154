//! Synthetic mammogram-like images: a half-ellipse of textured tissue
//! against a blank background, with zero to two bright masses.

use serde::{Deserialize, Serialize};

use super::{Provenance, Sample};
use crate::error::{Error, Result};
use crate::metrics::label_components;
use crate::raster::{Image, Mask};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Chance that an image contains masses.
    pub mass_probability: f64,
    pub min_masses: usize,
    pub max_masses: usize,
    /// Mass radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Upper bound on total mass area as a fraction of the image.
    pub max_mass_fraction: f64,
    /// Width range of the blank band opposite the chest wall, as a fraction of the width.
    pub min_blank: f64,
    pub max_blank: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 410,
            height: 1024,
            width: 512,
            mass_probability: 0.26,
            min_masses: 1,
            max_masses: 2,
            min_radius: 12.0,
            max_radius: 48.0,
            max_mass_fraction: 0.05,
            min_blank: 0.0,
            max_blank: 0.15,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Small images for CPU-scale experiments.
    pub fn desk() -> Self {
        Self { height: 256, width: 128, min_radius: 6.0, max_radius: 12.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("size", "images must be at least 16x16"));
        }
        if !(0.0..=1.0).contains(&self.mass_probability) {
            return Err(Error::config("mass_probability", "must lie in [0, 1]"));
        }
        if self.min_masses == 0 || self.min_masses > self.max_masses {
            return Err(Error::config("min_masses", "need 1 <= min_masses <= max_masses"));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("min_radius", "need 1 <= min_radius <= max_radius"));
        }
        if !(self.max_mass_fraction > 0.0 && self.max_mass_fraction <= 1.0) {
            return Err(Error::config("max_mass_fraction", "must lie in (0, 1]"));
        }
        if !(0.0 <= self.min_blank && self.min_blank <= self.max_blank && self.max_blank < 0.5) {
            return Err(Error::config("max_blank", "need 0 <= min_blank <= max_blank < 0.5"));
        }
        Ok(())
    }
}

/// Smoothly interpolated lattice noise with `octaves` halvings of `cell`.
fn value_noise(h: usize, w: usize, cell: f64, octaves: usize, rng: &mut RngState) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    let mut amp = 1.0;
    let mut cell = cell.max(2.0);
    let mut norm = 0.0;
    for _ in 0..octaves {
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let fy = y as f64 / cell;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / cell;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let v00 = lattice[iy * gw + ix];
                let v01 = lattice[iy * gw + ix + 1];
                let v10 = lattice[(iy + 1) * gw + ix];
                let v11 = lattice[(iy + 1) * gw + ix + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[y * w + x] += (amp * (top + (bot - top) * ty)) as f32;
            }
        }
        norm += amp;
        amp *= 0.5;
        cell /= 2.0;
    }
    out.iter_mut().for_each(|v| *v /= norm as f32);
    out
}

struct Blob {
    centres: Vec<(f64, f64, f64, f64)>, // (cy, cx, sigma, weight)
}

impl Blob {
    fn field(&self, y: f64, x: f64) -> f64 {
        self.centres
            .iter()
            .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    }
}

/// Thresholded superposition of Gaussians, restricted to the connected
/// region containing the centre pixel and to the tissue.
fn draw_mass(cy: f64, cx: f64, radius: f64, tissue: &Mask, rng: &mut RngState) -> (Mask, Blob) {
    let (h, w) = tissue.dims();
    let mut centres = vec![(cy, cx, 0.6 * radius, 1.0)];
    for _ in 0..2 + rng.below(2) {
        let ang = rng.uniform() * std::f64::consts::TAU;
        let off = 0.45 * radius * rng.uniform();
        centres.push((cy + off * ang.sin(), cx + off * ang.cos(), (0.3 + 0.2 * rng.uniform()) * radius, 0.5 + 0.4 * rng.uniform()));
    }
    let blob = Blob { centres };
    // At threshold exp(-1/2) of the main lobe the support reaches ~radius.
    let thresh = (-0.5f64 / 0.36).exp();
    let reach = (2.0 * radius).ceil() as usize;
    let (y0, y1) = ((cy as usize).saturating_sub(reach), (cy as usize + reach + 1).min(h));
    let (x0, x1) = ((cx as usize).saturating_sub(reach), (cx as usize + reach + 1).min(w));
    let mut raw = Mask::filled(h, w, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            if tissue.at(y, x) != 0 && blob.field(y as f64, x as f64) >= thresh {
                raw.set(y, x, 1);
            }
        }
    }
    let (labels, _) = label_components(&raw);
    let keep = labels[cy as usize * w + cx as usize];
    let mut mask = Mask::filled(h, w, 0);
    if keep != 0 {
        for (m, &l) in mask.data.iter_mut().zip(&labels) {
            *m = u8::from(l == keep);
        }
    }
    (mask, blob)
}

/// Generates one sample; `index` selects an independent stream so any
/// prefix of a dataset is reproducible on its own.
pub fn generate_one(config: &SynthConfig, index: usize) -> Sample {
    let (h, w) = (config.height, config.width);
    let mut rng = RngState::new(config.seed).fork(index as u64);

    // Tissue: half-ellipse against the chest wall on a random side.
    let chest_left = rng.bernoulli(0.5);
    let blank = config.min_blank + (config.max_blank - config.min_blank) * rng.uniform();
    let depth = (1.0 - blank) * w as f64;
    let cy = h as f64 * (0.45 + 0.1 * rng.uniform());
    let ry = h as f64 * (0.55 + 0.1 * rng.uniform());
    let mut tissue = Mask::filled(h, w, 0);
    let mut image = Image::filled(h, w, 0.0);
    let texture = value_noise(h, w, (h.min(w) as f64) / 4.0, 3, &mut rng);
    let grain = value_noise(h, w, (h.min(w) as f64) / 24.0, 2, &mut rng);
    for y in 0..h {
        let t = ((y as f64 + 0.5 - cy) / ry).abs();
        if t >= 1.0 {
            continue;
        }
        let extent = depth * (1.0 - t * t).sqrt();
        for x in 0..w {
            let d = if chest_left { x as f64 + 0.5 } else { w as f64 - x as f64 - 0.5 };
            if d > extent {
                continue;
            }
            tissue.set(y, x, 1);
            // Density falls off towards the skin line.
            let edge = ((extent - d) / (0.15 * depth)).min(1.0);
            let v = 0.30 + 0.12 * texture[y * w + x] as f64 + 0.05 * grain[y * w + x] as f64;
            image.set(y, x, (v * (0.6 + 0.4 * edge)) as f32);
        }
    }

    let mut mask = Mask::filled(h, w, 0);
    let has_mass = rng.bernoulli(config.mass_probability) && tissue.any();
    if has_mass {
        let n = config.min_masses + rng.below(config.max_masses - config.min_masses + 1);
        let budget = config.max_mass_fraction * (h * w) as f64;
        let mut placed = 0;
        let mut attempts = 0;
        while placed < n && attempts < 200 {
            attempts += 1;
            let mut radius = config.min_radius + (config.max_radius - config.min_radius) * rng.uniform();
            let (my, mx) = (rng.below(h), rng.below(w));
            if tissue.at(my, mx) == 0 {
                continue;
            }
            let mut candidate;
            loop {
                candidate = draw_mass(my as f64 + 0.5, mx as f64 + 0.5, radius, &tissue, &mut rng);
                let area = (mask.count() + candidate.0.count()) as f64;
                if area <= budget || radius <= 1.0 {
                    break;
                }
                radius *= 0.8;
            }
            let (m, blob) = candidate;
            if m.count() < 4 || (mask.count() + m.count()) as f64 > budget {
                continue;
            }
            let amp = 0.30 + 0.15 * rng.uniform();
            let peak = blob.field(my as f64 + 0.5, mx as f64 + 0.5).max(1e-6);
            for y in 0..h {
                for x in 0..w {
                    if m.at(y, x) != 0 {
                        let f = (blob.field(y as f64, x as f64) / peak).min(1.0);
                        let v = image.at(y, x) as f64 + amp * (0.7 + 0.3 * f);
                        image.set(y, x, v as f32);
                        mask.set(y, x, 1);
                    }
                }
            }
            placed += 1;
        }
    }

    // Acquisition noise inside the tissue only, so the background stays blank.
    if config.noise_std > 0.0 {
        for (v, &t) in image.data.iter_mut().zip(&tissue.data) {
            if t != 0 {
                *v = (*v as f64 + config.noise_std * rng.normal()) as f32;
            }
        }
    }
    image.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let label = u8::from(mask.any());
    Sample {
        id: format!("synth-{:016x}-{index:05}", config.seed),
        image,
        mask,
        label,
        provenance: Provenance::Synthetic { seed: config.seed, index },
    }
}

/// Deterministic synthetic dataset of `config.count` samples.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    Ok((0..config.count).map(|i| generate_one(config, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, p: f64, seed: u64) -> SynthConfig {
        SynthConfig { count, mass_probability: p, seed, ..SynthConfig::desk() }
    }

    #[test]
    fn degenerate_probabilities() {
        for s in generate_synthetic(&small(10, 0.0, 1)).unwrap() {
            assert_eq!(s.label, 0);
            assert!(!s.mask.any());
        }
        for s in generate_synthetic(&small(10, 1.0, 1)).unwrap() {
            assert_eq!(s.label, 1);
            assert!(s.mask.any());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(3, 0.5, 9)).unwrap();
        let b = generate_synthetic(&small(3, 0.5, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(3, 0.5, 10)).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn mass_area_bounded_and_masses_are_brighter() {
        for s in generate_synthetic(&small(20, 1.0, 4)).unwrap() {
            let frac = s.mask.count() as f64 / (s.mask.height * s.mask.width) as f64;
            assert!(frac <= 0.05, "{frac}");
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for (&v, &m) in s.image.data.iter().zip(&s.mask.data) {
                if m != 0 {
                    inside += v as f64;
                    ni += 1;
                } else if v > 0.0 {
                    outside += v as f64;
                    no += 1;
                }
            }
            assert!(inside / ni as f64 > outside / no as f64 + 0.15);
        }
    }

    #[test]
    fn has_blank_columns_on_one_side() {
        let cfg = SynthConfig { min_blank: 0.1, max_blank: 0.15, ..small(4, 0.0, 2) };
        for s in generate_synthetic(&cfg).unwrap() {
            let col_max = |x: usize| (0..s.image.height).map(|y| s.image.at(y, x)).fold(0f32, f32::max);
            assert!(col_max(0) == 0.0 || col_max(s.image.width - 1) == 0.0);
        }
    }
}
