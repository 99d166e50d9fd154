//! On-disk datasets: a CSV manifest indexing grayscale PNG image/mask pairs.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{Provenance, Sample};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: String,
    pub mask_path: String,
    pub label: u8,
}

/// Writes 16-bit images, 0/255 masks and `manifest.csv` under `dir`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    // An empty dataset still gets a header.
    if samples.is_empty() {
        w.write_record(["id", "image_path", "mask_path", "label"])?;
    }
    for s in samples {
        let row = ManifestRow {
            id: s.id.clone(),
            image_path: format!("images/{}.png", s.id),
            mask_path: format!("masks/{}.png", s.id),
            label: s.label,
        };
        let (h, w_) = s.image.dims();
        let pixels: Vec<u16> = s.image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        ImageBuffer::<Luma<u16>, _>::from_raw(w_ as u32, h as u32, pixels)
            .expect("buffer matches dimensions")
            .save(dir.join(&row.image_path))?;
        write_mask(&dir.join(&row.mask_path), &s.mask)?;
        w.serialize(&row)?;
    }
    w.flush()?;
    Ok(manifest)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Grayscale intensities scaled to [0, 1] from 8- or 16-bit PNGs.
fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            log::warn!("{}: not grayscale, converting", path.display());
            other.into_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
    };
    Ok((h, w, data))
}

/// Reads an 8- or 16-bit grayscale PNG as intensities in [0, 1].
pub fn read_image(path: &Path) -> Result<Image> {
    let (h, w, data) = load_gray(path)?;
    Image::new(h, w, data)
}

/// Writes a mask as an 8-bit PNG with mass pixels at 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dims();
    let px: Vec<u8> = mask.data.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions").save(path)?;
    Ok(())
}

/// Reads a manifest and its image/mask pairs. A label that disagrees with
/// its mask is rejected.
pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ManifestRow = row?;
        let (h, w, data) = load_gray(&resolve(base, &row.image_path))?;
        let (mh, mw, mdata) = load_gray(&resolve(base, &row.mask_path))?;
        let image = Image::new(h, w, data)?;
        let mask = Mask::new(mh, mw, mdata.into_iter().map(|v| u8::from(v >= 0.5)).collect())?;
        let s = Sample::new(
            row.id.clone(),
            image,
            mask,
            Provenance::File { image_path: row.image_path.clone(), mask_path: row.mask_path.clone() },
        )?;
        if s.label != row.label {
            return Err(Error::Data(format!(
                "{}: manifest label {} but mask {} positive pixels",
                row.id,
                row.label,
                if s.mask.any() { "has" } else { "has no" }
            )));
        }
        out.push(s);
    }
    Ok(out)
}
