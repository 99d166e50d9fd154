use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use hds_core::data::{read_manifest, select, split_kfold, Sample, SplitTag, MANIFEST};
use hds_core::model::{build_model, ArchConfig, Mode, UResNet};
use hds_core::trainer::{RunConfig, Trainer};
use hds_core::verify::output_shapes;
use hds_core::{DType, Real, RngState};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::{invalid, OutArgs};

/// File in a checkpoint directory listing the ids of each split.
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (or its manifest.csv).
    #[arg(long, required_unless_present = "dry_run")]
    pub data: Option<PathBuf>,
    /// TOML run configuration; missing fields take the `paper` preset values.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// hybrid, seg-only, cls-only or no-ds.
    #[arg(long)]
    pub mode: Option<String>,
    /// Total epochs; the schedule milestones are rescaled to match.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Fold used for testing; the next one validates.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train on every image, without validation or test sets.
    #[arg(long)]
    pub no_split: bool,
    /// Print the architecture ledger and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
            }
            (None, Some(Preset::Desk)) => RunConfig::desk(),
            (None, _) => RunConfig::paper(),
        };
        if let Some(m) = &self.mode {
            c.arch = c.arch.with_mode(m.parse::<Mode>()?);
        }
        if let Some(e) = self.epochs {
            if e == 0 {
                return Err(invalid("--epochs must be positive"));
            }
            let val_every = c.train.val_every.min(e);
            c.train = c.train.rescaled(e);
            c.train.val_every = val_every;
        }
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Ids per split, as stored next to a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds(pub BTreeMap<String, Vec<String>>);

impl SplitIds {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SPLIT_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn get(&self, tag: SplitTag) -> &[String] {
        self.0.get(&tag.to_string()).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn load_data(path: &Path) -> Result<Vec<Sample>> {
    let manifest = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    if !manifest.is_file() {
        return Err(invalid(format!("no dataset manifest at {}", manifest.display())));
    }
    read_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))
}

fn dry_run(c: &RunConfig) -> Result<()> {
    let model: UResNet<f32> = build_model(&c.arch, &mut RngState::new(0))?;
    println!("mode: {}", c.arch.mode);
    println!("main-stream 3x3 convolutions: {}", model.count_conv3x3());
    println!("parameters: {}", model.num_scalars());
    drop(model);
    // Output shapes depend on depth and pooling only, so a one-channel copy
    // of the network gives them at a fraction of the cost.
    let narrow = ArchConfig { base_channels: 1, ..c.arch.clone() };
    let [ph, pw] = c.train.patch;
    let [ih, iw] = c.data.image_size;
    for (what, h, w) in [("training patch", ph, pw), ("test image", ih, iw)] {
        println!("{what} {h}x{w}:");
        for (level, seg, cls) in output_shapes(&narrow, h, w)? {
            let fmt = |s: Option<Vec<usize>>| s.map(|s| format!("{}x{}", s[2], s[3])).unwrap_or_else(|| "-".into());
            println!("  level {level}: classification map {}, segmentation {}", fmt(cls), fmt(seg));
        }
    }
    println!("epochs: {}, lr milestones: {:?}", c.train.epochs, c.train.lr_milestones);
    Ok(())
}

fn fit<T: Real>(c: RunConfig, train: &[Sample], val: &[Sample], out: &Path) -> Result<()> {
    let mut t: Trainer<T> = Trainer::new(c, train, val)?;
    let epochs = t.config().train.epochs;
    let every = (epochs / 20).max(1);
    let mut result = Ok(());
    while t.next_epoch() < epochs {
        let until = (t.next_epoch() + every).min(epochs);
        result = t.run_until(until);
        if let Some(r) = t.log().last() {
            let val = r.val_cls.map(|c| format!(", val acc {:.3}", c.acc)).unwrap_or_default();
            let dsc = r.val_seg.map(|s| format!(", val dsc {:.3}", s.dsc)).unwrap_or_default();
            eprintln!("epoch {:>5}/{epochs}: loss {:.4} (seg {:.4}, cls {:.4}){val}{dsc}", r.epoch + 1, r.total, r.l_seg, r.l_cls);
        }
        if result.is_err() {
            break;
        }
    }
    // A diverged run still leaves its last good state on disk.
    t.save(out)?;
    result?;
    if let Some(b) = t.best_epoch() {
        println!("best validation epoch: {}", b + 1);
    }
    Ok(())
}

pub fn run(a: &TrainArgs) -> Result<()> {
    let c = a.resolve()?;
    if a.dry_run {
        return dry_run(&c);
    }
    let data = load_data(a.data.as_deref().expect("required without --dry-run"))?;
    let out = OutArgs { out: a.out.clone().expect("required without --dry-run"), force: a.force };
    let mut ids = SplitIds::default();
    let (train, val) = if a.no_split {
        ids.0.insert(SplitTag::Train.to_string(), data.iter().map(|s| s.id.clone()).collect());
        (data.clone(), Vec::new())
    } else {
        let folds = split_kfold(data.len(), a.folds, a.split_seed)?;
        let f = folds.get(a.fold).ok_or_else(|| invalid(format!("--fold {} but only {} folds", a.fold, a.folds)))?;
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
            ids.0.insert(tag.to_string(), f.indices(tag).iter().map(|&i| data[i].id.clone()).collect());
        }
        (select(&data, &f.train), select(&data, &f.val))
    };
    let out = out.prepare()?;
    fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&ids)? + "\n")?;
    fs::write(out.join("config.toml"), c.to_toml()?)?;
    println!("training on {} images, validating on {}", train.len(), val.len());
    match c.train.precision {
        DType::F32 => fit::<f32>(c.clone(), &train, &val, out)?,
        DType::F64 => fit::<f64>(c.clone(), &train, &val, out)?,
    }
    let mut m = RunManifest::new("train", serde_json::to_value(&c)?, out);
    m.config_path = a.config.clone();
    m.seed = Some(c.train.seed);
    m.write()?;
    println!("checkpoint -> {}", out.display());
    Ok(())
}
