//! SGD training with momentum, learning-rate milestones, level-weight
//! annealing, validation and checkpoints.

mod eval;
mod log;
mod schedule;

pub use self::eval::{evaluate, predict, Evaluation, Prediction, THRESHOLD};
pub use self::log::{read_log, same_logs, write_log, TrainRecord};
pub use schedule::{eta_at_epoch, lr_at_epoch, sgd_step, TrainConfig};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{compute_stats, crop_blank, flip_augment, normalize, resize_to, sample_patch, NormStats, Sample};
use crate::data::{Split, SplitTag};
use crate::error::{Error, Result};
use crate::loss::{hds_total, LossWeights};
use crate::model::{build_model, load_weights, save_weights, write_weight_file, ArchConfig, UResNet, WeightRecord};
use crate::model::read_weight_file;
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// How raw samples are brought to training resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `[height, width]` every image is resized to after cropping.
    pub image_size: [usize; 2],
    pub crop_blank: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: [1024, 512], crop_blank: true }
    }
}

impl DataConfig {
    pub fn desk() -> Self {
        Self { image_size: [256, 128], ..Self::default() }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self { arch: ArchConfig::paper(), ..Self::default() }
    }

    pub fn desk() -> Self {
        Self { arch: ArchConfig::desk(), train: TrainConfig::desk(200), data: DataConfig::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate(&self.arch.supervision_levels)?;
        self.train.validate()?;
        let [h, w] = self.data.image_size;
        let [ph, pw] = self.train.patch;
        if ph > h || pw > w {
            return Err(Error::config("patch", format!("{ph}x{pw} does not fit in {h}x{w} images")));
        }
        let m = self.arch.input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::config("image_size", format!("{h}x{w} is not a multiple of {m}")));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

/// Crops blank columns and resizes.
pub fn prepare(samples: &[Sample], config: &DataConfig) -> Result<Vec<Sample>> {
    let [h, w] = config.image_size;
    samples
        .iter()
        .map(|s| {
            let s = if config.crop_blank { crop_blank(s).sample } else { s.clone() };
            resize_to(&s, h, w)
        })
        .collect()
}

const INIT_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Clone, Debug)]
struct Snapshot<T> {
    epoch: usize,
    score: f64,
    params: Vec<Vec<T>>,
}

/// Persistent part of a checkpoint besides the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    next_epoch: usize,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
    stats: NormStats,
    config: RunConfig,
}

/// What a checkpoint directory records besides its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub config: RunConfig,
    pub stats: NormStats,
    pub next_epoch: usize,
    pub best_epoch: Option<usize>,
}

fn read_sidecar(dir: &Path) -> Result<Sidecar> {
    toml::from_str(&fs::read_to_string(dir.join("checkpoint.toml"))?).map_err(|e| Error::Toml(e.to_string()))
}

pub fn read_checkpoint(dir: &Path) -> Result<CheckpointInfo> {
    let s = read_sidecar(dir)?;
    s.config.validate()?;
    Ok(CheckpointInfo { config: s.config, stats: s.stats, next_epoch: s.next_epoch, best_epoch: s.best_epoch })
}

/// Builds the checkpoint's model and loads `best.hdsw` if `prefer_best` and
/// it exists, otherwise `last.hdsw`. Returns the weight file used.
pub fn load_model<T: Real>(dir: &Path, prefer_best: bool) -> Result<(CheckpointInfo, UResNet<T>, PathBuf)> {
    let info = read_checkpoint(dir)?;
    let model = build_model(&info.config.arch, &mut RngState::new(0))?;
    let best = dir.join("best.hdsw");
    let path = if prefer_best && best.exists() { best } else { dir.join("last.hdsw") };
    load_weights(&model, &path)?;
    Ok((info, model, path))
}

pub struct Trainer<T: Real> {
    config: RunConfig,
    model: UResNet<T>,
    velocity: Vec<Vec<T>>,
    stats: NormStats,
    train: Vec<Sample>,
    val: Vec<Sample>,
    next_epoch: usize,
    log: Vec<TrainRecord>,
    best: Option<Snapshot<T>>,
}

impl<T: Real> Trainer<T> {
    /// Validates the configuration, preprocesses both splits, derives
    /// normalisation statistics from the training split and initialises
    /// the model.
    pub fn new(config: RunConfig, train: &[Sample], val: &[Sample]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let train = prepare(train, &config.data)?;
        let val = prepare(val, &config.data)?;
        let stats = compute_stats(Split::new(SplitTag::Train, &train))?;
        let model = build_model(&config.arch, &mut RngState::new(config.train.seed).fork(INIT_STREAM))?;
        let velocity = model.parameters().iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Ok(Self { config, model, velocity, stats, train, val, next_epoch: 0, log: Vec::new(), best: None })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &UResNet<T> {
        &self.model
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn log(&self) -> &[TrainRecord] {
        &self.log
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn train_set(&self) -> &[Sample] {
        &self.train
    }

    pub fn val_set(&self) -> &[Sample] {
        &self.val
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }

    /// Trains every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.train.epochs)
    }

    /// Trains epochs `next_epoch..until` (capped at the configured total).
    /// A non-finite loss restores the weights from the start of the failing
    /// epoch and returns [`Error::Diverged`].
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.train.epochs);
        while self.next_epoch < until {
            let epoch = self.next_epoch;
            let saved = (self.params_snapshot(), self.velocity.clone());
            match self.train_epoch(epoch) {
                Ok(record) => self.log.push(record),
                Err(e @ (Error::NonFinite(_) | Error::Diverged { .. })) => {
                    self.restore(&saved.0);
                    self.velocity = saved.1;
                    return Err(Error::Diverged { epoch, detail: e.to_string() });
                }
                Err(e) => return Err(e),
            }
            self.next_epoch += 1;
        }
        Ok(())
    }

    fn params_snapshot(&self) -> Vec<Vec<T>> {
        self.model.parameters().iter().map(|p| p.tensor.to_vec()).collect()
    }

    fn restore(&self, params: &[Vec<T>]) {
        for (p, v) in self.model.parameters().iter().zip(params) {
            p.tensor.data_mut().clone_from(v);
        }
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<TrainRecord> {
        let start = Instant::now();
        let tc = &self.config.train;
        let lr = lr_at_epoch(tc, epoch);
        let eta_all = eta_at_epoch(&self.config.loss, epoch, tc);
        let eta: Vec<f64> = self.config.arch.supervision_levels.iter().map(|&d| eta_all[d]).collect();

        let base = RngState::new(tc.seed);
        let mut sampling = base.fork(SAMPLING_STREAM).fork(epoch as u64);
        let mut dropout = base.fork(DROPOUT_STREAM).fork(epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        sampling.shuffle(&mut order);

        let [ph, pw] = tc.patch;
        let mut sums = TrainRecord { epoch, lr, eta: eta.clone(), ..TrainRecord::default() };
        let mut steps = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * ph * pw);
            let mut seg = Vec::with_capacity(n * ph * pw);
            let mut labels = Vec::with_capacity(n);
            for &i in chunk {
                let p = sample_patch(&self.train[i], &mut sampling, (ph, pw), tc.positive_center_prob)?;
                let (img, mask) =
                    if tc.flip { flip_augment(&p.image, &p.mask, &mut sampling) } else { (p.image, p.mask) };
                x.extend(normalize(&img, &self.stats)?.data.iter().map(|&v| T::lit(v as f64)));
                seg.extend_from_slice(&mask.data);
                labels.push(u8::from(mask.any()));
            }
            let x = Tensor::new(&[n, 1, ph, pw], x)?;
            self.model.zero_grad();
            let out = self.model.forward(&x, true, &mut dropout)?;
            let loss = hds_total(&out, &seg, &labels, &self.config.loss, &eta, self.model.parameters())?;
            let bd = &loss.breakdown;
            if !bd.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, step {steps}")));
            }
            loss.total.backward()?;
            let norm = self
                .model
                .parameters()
                .iter()
                .filter_map(|p| p.tensor.grad_ref().as_ref().map(|g| g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>()))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, step {steps}")));
            }
            sums.grad_norm = sums.grad_norm.max(norm);
            let scale = match tc.grad_clip {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let (lr_t, m_t) = (T::lit(lr), T::lit(tc.momentum));
            for (p, v) in self.model.parameters().iter().zip(&mut self.velocity) {
                let g: Vec<T> = match p.tensor.grad_ref().as_ref() {
                    Some(g) if scale < 1.0 => g.iter().map(|&x| x * T::lit(scale)).collect(),
                    Some(g) => g.clone(),
                    None => vec![T::zero(); v.len()],
                };
                sgd_step(&mut p.tensor.data_mut(), &g, v, lr_t, m_t);
            }

            let re = bd.reassemble(self.config.loss.alpha, self.config.loss.lambda);
            let rel = (re - bd.total).abs() / bd.total.abs().max(f64::MIN_POSITIVE);
            sums.reassembly_err = sums.reassembly_err.max(rel);
            add_into(&mut sums.seg_per_level, &bd.seg_per_level);
            add_into(&mut sums.cls_per_level, &bd.cls_per_level);
            sums.l_seg += bd.l_seg;
            sums.l_cls += bd.l_cls;
            sums.reg += bd.reg;
            sums.total += bd.total;
            steps += 1;
        }
        let k = steps as f64;
        sums.seg_per_level.iter_mut().chain(&mut sums.cls_per_level).for_each(|v| *v /= k);
        sums.l_seg /= k;
        sums.l_cls /= k;
        sums.reg /= k;
        sums.total /= k;

        let last = epoch + 1 == tc.epochs;
        let due = tc.val_every > 0 && ((epoch + 1).is_multiple_of(tc.val_every) || last);
        if due && !self.val.is_empty() {
            let ev = evaluate(&self.model, &self.val, &self.stats)?;
            sums.val_seg = ev.seg;
            sums.val_cls = Some(ev.cls);
            let score = ev.selection_score();
            if self.best.as_ref().is_none_or(|b| score > b.score) {
                self.best = Some(Snapshot { epoch, score, params: self.params_snapshot() });
            }
        }
        sums.wall_ms = start.elapsed().as_millis() as u64;
        Ok(sums)
    }

    /// Copies the best validated weights into the model, if any.
    pub fn restore_best(&self) -> bool {
        match &self.best {
            Some(b) => {
                self.restore(&b.params);
                true
            }
            None => false,
        }
    }

    /// Writes `last.hdsw`, `last.velocity.hdsw`, `best.hdsw` (when a
    /// validation has run), `checkpoint.toml` and `train_log.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_weights(&self.model, &dir.join("last.hdsw"))?;
        let fp = self.config.arch.fingerprint();
        let vel: Vec<WeightRecord> = self
            .model
            .parameters()
            .iter()
            .zip(&self.velocity)
            .map(|(p, v)| WeightRecord::from_values(&p.name, p.tensor.shape(), v))
            .collect();
        write_weight_file(&dir.join("last.velocity.hdsw"), &fp, &vel)?;
        if let Some(b) = &self.best {
            let recs: Vec<WeightRecord> = self
                .model
                .parameters()
                .iter()
                .zip(&b.params)
                .map(|(p, v)| WeightRecord::from_values(&p.name, p.tensor.shape(), v))
                .collect();
            write_weight_file(&dir.join("best.hdsw"), &fp, &recs)?;
        }
        let side = Sidecar {
            next_epoch: self.next_epoch,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_score: self.best.as_ref().map(|b| b.score),
            stats: self.stats.clone(),
            config: self.config.clone(),
        };
        fs::write(dir.join("checkpoint.toml"), toml::to_string(&side).map_err(|e| Error::Toml(e.to_string()))?)?;
        write_log(&dir.join("train_log.csv"), &self.log)
    }

    /// Resumes from a directory written by [`Trainer::save`]. The training
    /// split must be the one the statistics were computed from.
    pub fn load(dir: &Path, train: &[Sample], val: &[Sample]) -> Result<Self> {
        let side = read_sidecar(dir)?;
        let mut t = Self::new(side.config, train, val)?;
        if t.stats.train_ids != side.stats.train_ids {
            return Err(Error::Data("training split differs from the one the checkpoint was trained on".into()));
        }
        t.stats = side.stats;
        load_weights(&t.model, &dir.join("last.hdsw"))?;
        let (fp, vel) = read_weight_file(&dir.join("last.velocity.hdsw"))?;
        if fp != t.config.arch.fingerprint() || vel.len() != t.velocity.len() {
            return Err(Error::Format("velocity file does not match the model".into()));
        }
        for ((v, r), p) in t.velocity.iter_mut().zip(&vel).zip(t.model.parameters()) {
            if r.name != p.name || r.shape != p.tensor.shape() {
                return Err(Error::Format(format!("velocity record {} does not match {}", r.name, p.name)));
            }
            *v = r.values();
        }
        if let (Some(epoch), Some(score)) = (side.best_epoch, side.best_score) {
            let (_, recs) = read_weight_file(&dir.join("best.hdsw"))?;
            t.best = Some(Snapshot { epoch, score, params: recs.iter().map(|r| r.values()).collect() });
        }
        t.next_epoch = side.next_epoch;
        t.log = read_log(&dir.join("train_log.csv"))?;
        Ok(t)
    }
}

fn add_into(acc: &mut Vec<f64>, v: &[f64]) {
    if acc.is_empty() {
        acc.resize(v.len(), 0.0);
    }
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::{DropoutRule, Mode};

    fn tiny(epochs: usize) -> RunConfig {
        let mut c = RunConfig {
            arch: ArchConfig { dropout: DropoutRule { below: 0.0, at_or_above: 0.0, ..DropoutRule::default() }, ..ArchConfig::tiny() },
            train: TrainConfig { patch: [128, 128], ..TrainConfig::default().rescaled(epochs) },
            data: DataConfig { image_size: [128, 128], crop_blank: false },
            ..RunConfig::default()
        };
        c.train.val_every = 0;
        c
    }

    fn images(count: usize, seed: u64) -> Vec<Sample> {
        let cfg = SynthConfig { count, mass_probability: 1.0, seed, min_radius: 10.0, max_radius: 14.0, ..SynthConfig::desk() };
        generate_synthetic(&cfg).unwrap()
    }

    fn params<T: Real>(t: &Trainer<T>) -> Vec<Vec<T>> {
        t.params_snapshot()
    }

    #[test]
    fn overfits_a_single_image() {
        // Two base channels are too few to carve out a small mass; the loss
        // then stalls at the all-background entropy.
        let mut cfg = tiny(200);
        cfg.arch.base_channels = 8;
        cfg.train.flip = false;
        cfg.train.grad_clip = Some(1.0);
        let mut t: Trainer<f32> = Trainer::new(cfg, &images(1, 4), &[]).unwrap();
        t.run().unwrap();
        let totals: Vec<f64> = t.log().iter().map(|r| r.total).collect();
        let down = totals.windows(2).filter(|w| w[1] < w[0]).count();
        let frac = down as f64 / (totals.len() - 1) as f64;
        let seg = t.log().last().unwrap().l_seg;
        assert!(frac >= 0.9, "loss fell in {frac:.2} of epochs");
        assert!(seg < 0.05, "final seg loss {seg}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = tiny(3);
        cfg.train.lr0 = 0.0;
        let mut t: Trainer<f32> = Trainer::new(cfg, &images(2, 1), &[]).unwrap();
        let before = params(&t);
        t.run().unwrap();
        assert_eq!(params(&t), before);
        assert_eq!(t.log().len(), 3);
    }

    #[test]
    fn same_seed_same_log() {
        let data = images(2, 2);
        let mut cfg = tiny(3);
        cfg.arch.dropout = DropoutRule::default();
        let run = || {
            let mut t: Trainer<f32> = Trainer::new(cfg.clone(), &data, &data).unwrap();
            t.run().unwrap();
            (t.log().to_vec(), params(&t))
        };
        let (a, b) = (run(), run());
        assert!(same_logs(&a.0, &b.0));
        assert_eq!(a.1, b.1);
        cfg.train.seed = 1;
        let mut other: Trainer<f32> = Trainer::new(cfg.clone(), &data, &data).unwrap();
        other.run().unwrap();
        assert!(!other.log()[0].same_as(&a.0[0]));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = images(2, 3);
        let mut cfg = tiny(4);
        cfg.train.val_every = 2;
        let mut full: Trainer<f32> = Trainer::new(cfg.clone(), &data, &data[..1]).unwrap();
        full.run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut half: Trainer<f32> = Trainer::new(cfg, &data, &data[..1]).unwrap();
        half.run_until(2).unwrap();
        half.save(dir.path()).unwrap();
        let mut resumed: Trainer<f32> = Trainer::load(dir.path(), &data, &data[..1]).unwrap();
        assert_eq!(resumed.next_epoch(), 2);
        resumed.run().unwrap();
        assert_eq!(params(&resumed), params(&full));
        assert!(same_logs(resumed.log(), full.log()));
        assert_eq!(resumed.best_epoch(), full.best_epoch());
    }

    #[test]
    fn load_rejects_a_different_training_split() {
        let data = images(3, 5);
        let dir = tempfile::tempdir().unwrap();
        let mut t: Trainer<f32> = Trainer::new(tiny(2), &data[..2], &[]).unwrap();
        t.run_until(1).unwrap();
        t.save(dir.path()).unwrap();
        assert!(matches!(Trainer::<f32>::load(dir.path(), &data[1..], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn seg_only_has_no_classification_terms() {
        let mut cfg = tiny(2);
        cfg.arch = cfg.arch.with_mode(Mode::SegOnly);
        let mut t: Trainer<f32> = Trainer::new(cfg, &images(2, 6), &[]).unwrap();
        assert!(t.model().parameters().iter().all(|p| !p.name.contains(".cls.")));
        t.run().unwrap();
        for r in t.log() {
            assert_eq!(r.l_cls, 0.0);
            assert!(r.cls_per_level.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn divergence_restores_the_epoch_start() {
        let mut cfg = tiny(4);
        cfg.train.lr0 = 1e12;
        let mut t: Trainer<f32> = Trainer::new(cfg, &images(2, 7), &[]).unwrap();
        let err = t.run().unwrap_err();
        let Error::Diverged { epoch, .. } = err else { panic!("{err}") };
        assert_eq!(t.next_epoch(), epoch);
        assert_eq!(t.log().len(), epoch);
        assert!(params(&t).iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn validation_keeps_the_best_snapshot() {
        let data = images(2, 8);
        let mut cfg = tiny(4);
        cfg.train.val_every = 1;
        let mut t: Trainer<f32> = Trainer::new(cfg, &data, &data).unwrap();
        t.run().unwrap();
        let scored: Vec<f64> = t
            .log()
            .iter()
            .map(|r| {
                let ev = Evaluation { seg: r.val_seg, cls: r.val_cls.unwrap(), ids: vec![], scores: vec![], masks: vec![] };
                ev.selection_score()
            })
            .collect();
        let best = scored.iter().enumerate().fold(0, |b, (i, &s)| if s > scored[b] { i } else { b });
        assert_eq!(t.best_epoch(), Some(best));
        assert!(t.restore_best());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert!(RunConfig::from_toml("[train]\nlr = 1.0").is_err());
    }

    #[test]
    fn patch_must_fit_the_image() {
        let mut c = tiny(2);
        c.train.patch = [256, 128];
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "patch"));
        let mut c = tiny(2);
        c.data.image_size = [192, 128];
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "image_size"));
    }
}
