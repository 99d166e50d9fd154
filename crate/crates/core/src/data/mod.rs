//! Dataset generation, preprocessing, augmentation and splits.

mod io;
mod preprocess;
mod synth;

pub use io::{read_image, read_manifest, write_dataset, write_mask, ManifestRow, MANIFEST};
pub use preprocess::{
    compute_stats, crop_blank, flip_augment, normalize, reflect_pad, resize_to, sample_patch, Cropped, NormStats, PatchSample,
    BLANK_THRESHOLD,
};
pub use synth::{generate_one, generate_synthetic, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64, index: usize },
    File { image_path: String, mask_path: String },
}

/// One grayscale image with its binary mass mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub label: u8,
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask, provenance: Provenance) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Data(format!(
                "image is {:?} but mask is {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        let label = u8::from(mask.any());
        Ok(Self { id: id.into(), image, mask, label, provenance })
    }

    /// Label agrees with the mask.
    pub fn is_consistent(&self) -> bool {
        self.label == u8::from(self.mask.any()) && self.image.dims() == self.mask.dims()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::config("split", format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

/// Samples tagged with the split they belong to.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub tag: SplitTag,
    pub samples: &'a [Sample],
}

impl<'a> Split<'a> {
    pub fn new(tag: SplitTag, samples: &'a [Sample]) -> Self {
        Self { tag, samples }
    }
}

/// Index sets for one rotation of k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldAssignment {
    pub fn indices(&self, tag: SplitTag) -> &[usize] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }
}

/// Shuffles `0..n` and cuts it into `k` contiguous folds whose sizes differ
/// by at most one. Rotation `i` tests on fold `i`, validates on fold
/// `(i + 1) % k` and trains on the rest.
pub fn split_kfold(n: usize, k: usize, seed: u64) -> Result<Vec<FoldAssignment>> {
    if k < 3 {
        return Err(Error::config("k", "need at least 3 folds"));
    }
    if n < k {
        return Err(Error::Data(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).fork(0x006b_666f_6c64).shuffle(&mut order);
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| {
            let lo = f * n / k;
            let hi = (f + 1) * n / k;
            order[lo..hi].to_vec()
        })
        .collect();
    Ok((0..k)
        .map(|i| {
            let v = (i + 1) % k;
            let train = (0..k).filter(|&f| f != i && f != v).flat_map(|f| folds[f].iter().copied()).collect();
            FoldAssignment { train, val: folds[v].clone(), test: folds[i].clone() }
        })
        .collect())
}

/// Clones the samples at `indices`.
pub fn select(samples: &[Sample], indices: &[usize]) -> Vec<Sample> {
    indices.iter().map(|&i| samples[i].clone()).collect()
}
