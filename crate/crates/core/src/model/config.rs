use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which supervision signals are attached to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Segmentation and classification heads at every supervised level.
    Hybrid,
    /// Segmentation heads only (deep supervision without image labels).
    SegOnly,
    /// Classification heads only.
    ClsOnly,
    /// Both heads, attached to level 0 only.
    MultitaskNoDs,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Hybrid, Mode::SegOnly, Mode::ClsOnly, Mode::MultitaskNoDs];

    pub fn has_seg(self) -> bool {
        !matches!(self, Mode::ClsOnly)
    }

    pub fn has_cls(self) -> bool {
        !matches!(self, Mode::SegOnly)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::SegOnly => "seg-only",
            Mode::ClsOnly => "cls-only",
            Mode::MultitaskNoDs => "no-ds",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "seg-only" | "seg_only" => Ok(Mode::SegOnly),
            "cls-only" | "cls_only" => Ok(Mode::ClsOnly),
            "no-ds" | "multitask_no_ds" | "multitask-no-ds" => Ok(Mode::MultitaskNoDs),
            other => Err(Error::config("mode", format!("unknown mode '{other}'"))),
        }
    }
}

/// Where the per-scale supervision paths read their features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Decoder outputs for levels below the bottleneck, bottleneck for the deepest level.
    Decoder,
    /// Encoder outputs at every level.
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutRule {
    pub threshold_channels: usize,
    pub below: f64,
    pub at_or_above: f64,
}

impl Default for DropoutRule {
    fn default() -> Self {
        Self { threshold_channels: 128, below: 0.2, at_or_above: 0.5 }
    }
}

impl DropoutRule {
    pub fn rate(&self, channels: usize) -> f64 {
        if channels < self.threshold_channels {
            self.below
        } else {
            self.at_or_above
        }
    }
}

/// Architecture of the U-ResNet and its supervision paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Number of resolution levels; level `d` runs at `1 / 2^d` of the input.
    pub scales: usize,
    pub base_channels: usize,
    /// Residual blocks per encoder level (`scales` entries, the last is the bottleneck).
    pub encoder_blocks: Vec<usize>,
    /// Residual blocks per decoder level (`scales - 1` entries, index = level).
    pub decoder_blocks: Vec<usize>,
    pub dropout: DropoutRule,
    pub supervision_levels: Vec<usize>,
    pub mode: Mode,
    pub tap: Tap,
    /// Initialise the second convolution of every residual block to zero,
    /// so each block starts as the identity. Not part of the fingerprint.
    pub zero_init_residual: bool,
}

/// Total downsampling between the input and every classification map.
pub const CLS_DOWNSAMPLE: usize = 128;
/// Deepest level that can carry a classification head (`avgpool 2^(5 - d)`).
pub const MAX_SCALES: usize = 6;

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            scales: 6,
            base_channels: 32,
            encoder_blocks: vec![2; 6],
            decoder_blocks: vec![2; 5],
            dropout: DropoutRule::default(),
            supervision_levels: (0..6).collect(),
            mode: Mode::Hybrid,
            tap: Tap::Decoder,
            zero_init_residual: false,
        }
    }
}

impl ArchConfig {
    /// Full-size network: 45 main-stream 3x3 convolutions at 32 base channels.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Scaled-down network for CPU training.
    pub fn desk() -> Self {
        Self {
            scales: 3,
            base_channels: 8,
            encoder_blocks: vec![2; 3],
            decoder_blocks: vec![2; 2],
            supervision_levels: (0..3).collect(),
            zero_init_residual: true,
            ..Self::default()
        }
    }

    /// Smallest sensible network, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            scales: 2,
            base_channels: 2,
            encoder_blocks: vec![1, 1],
            decoder_blocks: vec![1],
            supervision_levels: vec![0, 1],
            ..Self::default()
        }
    }

    /// Switches the ablation mode, adjusting the supervised levels so that
    /// `MultitaskNoDs` keeps level 0 only and the others keep every level.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self.supervision_levels = match mode {
            Mode::MultitaskNoDs => vec![0],
            _ => (0..self.scales).collect(),
        };
        self
    }

    /// Channel width at level `d`: `base * 2^min(d, 3)`.
    pub fn channels(&self, d: usize) -> usize {
        self.base_channels << d.min(3)
    }

    pub fn total_blocks(&self) -> usize {
        self.encoder_blocks.iter().sum::<usize>() + self.decoder_blocks.iter().sum::<usize>()
    }

    /// Spatial divisibility the input must satisfy.
    pub fn input_multiple(&self) -> usize {
        if self.mode.has_cls() {
            CLS_DOWNSAMPLE
        } else {
            1 << (self.scales - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SCALES).contains(&self.scales) {
            return Err(Error::config("scales", format!("{} not in 2..={MAX_SCALES}", self.scales)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        if self.encoder_blocks.len() != self.scales {
            return Err(Error::config(
                "encoder_blocks",
                format!("{} entries for {} scales", self.encoder_blocks.len(), self.scales),
            ));
        }
        if self.decoder_blocks.len() != self.scales - 1 {
            return Err(Error::config(
                "decoder_blocks",
                format!("{} entries, expected {}", self.decoder_blocks.len(), self.scales - 1),
            ));
        }
        for (name, r) in [("dropout.below", self.dropout.below), ("dropout.at_or_above", self.dropout.at_or_above)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(name, format!("rate {r} outside [0, 1)")));
            }
        }
        if self.supervision_levels.is_empty() {
            return Err(Error::config("supervision_levels", "at least one level is required"));
        }
        let mut seen = [false; MAX_SCALES];
        for &d in &self.supervision_levels {
            if d >= self.scales {
                return Err(Error::config("supervision_levels", format!("level {d} >= scales {}", self.scales)));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::config("supervision_levels", format!("level {d} listed twice")));
            }
        }
        if self.mode == Mode::MultitaskNoDs && self.supervision_levels != [0] {
            return Err(Error::config("supervision_levels", "mode no-ds supervises level 0 only"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization of everything that
    /// determines parameter layout and forward semantics.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&Self { zero_init_residual: false, ..self.clone() }).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
