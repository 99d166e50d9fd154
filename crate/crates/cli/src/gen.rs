use anyhow::Result;
use clap::Args;
use hds_core::data::{generate_synthetic, write_dataset, SynthConfig};

use crate::manifest::RunManifest;
use crate::OutArgs;

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 256x128 images with proportionally smaller masses.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Chance that an image contains at least one mass.
    #[arg(long)]
    pub mass_probability: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

impl GenArgs {
    pub fn config(&self) -> SynthConfig {
        let mut c = if self.desk { SynthConfig::desk() } else { SynthConfig::default() };
        c.count = self.count;
        c.seed = self.seed;
        if let Some(h) = self.height {
            c.height = h;
        }
        if let Some(w) = self.width {
            c.width = w;
        }
        if let Some(p) = self.mass_probability {
            c.mass_probability = p;
        }
        c
    }
}

pub fn run(a: &GenArgs) -> Result<()> {
    let cfg = a.config();
    cfg.validate()?;
    let out = a.out.prepare()?;
    let samples = generate_synthetic(&cfg)?;
    let manifest = write_dataset(out, &samples)?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    let mut m = RunManifest::new("gen-data", serde_json::to_value(&cfg)?, out);
    m.seed = Some(cfg.seed);
    m.write()?;
    println!("{} images ({positives} with masses) -> {}", samples.len(), manifest.display());
    Ok(())
}
