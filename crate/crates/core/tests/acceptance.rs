//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test -p hds-core --test acceptance` runs everything; trailing
//! arguments pick criteria by number, e.g. `-- 1 3 8`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hds_core::data::{generate_synthetic, split_kfold, Sample, SynthConfig};
use hds_core::loss::{mil_cls_loss, LossWeights};
use hds_core::model::{build_model, ArchConfig, Mode, UResNet};
use hds_core::trainer::{eta_at_epoch, evaluate, lr_at_epoch, same_logs, RunConfig, TrainConfig, Trainer};
use hds_core::verify::{self, LOSS_TOL, OP_TOL};
use hds_core::{RngState, Tensor};

type Outcome = Result<String, String>;
/// Number, name, runtime budget in seconds, check.
type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn synthetic(count: usize, mass_probability: f64, seed: u64) -> Vec<Sample> {
    generate_synthetic(&SynthConfig { count, mass_probability, seed, ..SynthConfig::desk() }).expect("valid config")
}

fn c1_architecture() -> Outcome {
    let m: UResNet<f32> = build_model(&ArchConfig::paper(), &mut RngState::new(0)).map_err(|e| e.to_string())?;
    let n = m.count_conv3x3();
    ensure(n == 45, format!("{n} main-stream 3x3 convolutions"))?;
    drop(m);
    let mut shapes = Vec::new();
    for (h, w, ch, cw) in [(512, 384, 4, 3), (1024, 512, 8, 4)] {
        let levels = verify::output_shapes(&ArchConfig::paper(), h, w).map_err(|e| e.to_string())?;
        ensure(levels.len() == 6, format!("{} supervised levels", levels.len()))?;
        for (d, seg, cls) in levels {
            ensure(cls.as_deref() == Some(&[1, 1, ch, cw][..]), format!("{h}x{w} level {d}: cls map {cls:?}"))?;
            ensure(seg.as_deref() == Some(&[1, 2, h, w][..]), format!("{h}x{w} level {d}: seg output {seg:?}"))?;
        }
        shapes.push(format!("{h}x{w} -> {ch}x{cw}"));
    }
    Ok(format!("45 convs; cls maps {}; seg at input size on all 6 levels", shapes.join(", ")))
}

fn c2_gradients() -> Outcome {
    let ops = verify::op_gradient_checks(11).map_err(|e| e.to_string())?;
    let worst_op = ops.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("nonempty");
    ensure(worst_op.rel_err < OP_TOL, format!("{}: rel err {:.3e}", worst_op.name, worst_op.rel_err))?;
    let full = verify::full_loss_gradient_check(11).map_err(|e| e.to_string())?;
    let worst = full.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("nonempty");
    ensure(worst.rel_err < LOSS_TOL, format!("full loss {}: rel err {:.3e}", worst.name, worst.rel_err))?;
    Ok(format!(
        "{} op checks, worst {:.1e}; {} parameter tensors of the tiny model, worst {:.1e}",
        ops.len(),
        worst_op.rel_err,
        full.len(),
        worst.rel_err
    ))
}

fn c3_loss_and_schedules() -> Outcome {
    let mil = |v: Vec<f64>, h: usize, w: usize, y: u8| -> f64 {
        mil_cls_loss(&Tensor::new(&[1, 1, h, w], v).unwrap(), &[y], 1e-6).unwrap().item()
    };
    let a = mil(vec![0.5, 0.5, 0.25, 0.25, 0.25, 0.25], 2, 3, 0);
    ensure((a - (-(0.5f64).ln() + 2e-6)).abs() < 1e-9, format!("MIL case 1: {a}"))?;
    let b = mil(vec![0.9; 12], 3, 4, 1);
    ensure((b - (-(0.9f64).ln() + 12.0 * 0.9e-6)).abs() < 1e-9, format!("MIL case 2: {b}"))?;

    // Reassembly on every step of a short desk run.
    let data = synthetic(4, 0.5, 3);
    let mut cfg = RunConfig::desk();
    cfg.train = cfg.train.rescaled(6);
    let mut t: Trainer<f32> = Trainer::new(cfg, &data, &[]).map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    let worst = t.log().iter().map(|r| r.reassembly_err).fold(0.0, f64::max);
    ensure(worst < 1e-6, format!("reassembly gap {worst:e}"))?;

    let c = TrainConfig::default();
    let w = LossWeights::default();
    let passed = [(0, 0), (999, 0), (1000, 1), (1800, 2), (2400, 3), (2410, 4), (2799, 4)];
    for (epoch, k) in passed {
        let want = 0.01 * 0.3f64.powi(k);
        let got = lr_at_epoch(&c, epoch);
        ensure(got == want, format!("lr at {epoch}: {got} vs {want}"))?;
        let t = ((epoch as f64 - 1000.0) / 1400.0).clamp(0.0, 1.0);
        let eta = eta_at_epoch(&w, epoch, &c);
        for (d, &base) in [1.0, 1.5, 2.0, 2.5, 3.0, 3.5].iter().enumerate() {
            let want = if d == 0 { base } else { base * (1.0 - t * (1.0 - 0.005)) };
            ensure(eta[d] == want, format!("eta[{d}] at {epoch}: {} vs {want}", eta[d]))?;
        }
    }
    Ok(format!("MIL cases exact to 1e-9; reassembly gap {worst:.1e} over {} epochs; schedules at 7 epochs", t.log().len()))
}

fn c4_overfit() -> Outcome {
    let data = synthetic(4, 0.5, 1);
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    ensure(labels.contains(&0) && labels.contains(&1), format!("labels {labels:?} lack a class"))?;
    let cfg = RunConfig::desk();
    ensure(cfg.arch.base_channels == 8 && cfg.arch.scales == 3, "desk preset changed")?;
    let epochs = cfg.train.epochs;
    let start = Instant::now();
    let mut t: Trainer<f32> = Trainer::new(cfg, &data, &[]).map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    let ev = evaluate(t.model(), t.train_set(), t.stats()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let dsc = ev.seg.map(|s| s.dsc).unwrap_or(f64::NAN);
    let summary = format!("{epochs} epochs: train DSC {dsc:.3}, ACC {:.2}, {:.0} s", ev.cls.acc, elapsed.as_secs_f64());
    ensure(dsc >= 0.90, summary.clone())?;
    ensure(ev.cls.acc == 1.0, summary.clone())?;
    ensure(elapsed <= Duration::from_secs(15 * 60), summary.clone())?;
    Ok(summary)
}

fn c5_mutual_benefit() -> Outcome {
    let data = synthetic(50, 0.5, 100);
    let (train, val) = data.split_at(40);
    let seeds = [0u64, 1, 2];
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut all_hold = true;
    for &seed in &seeds {
        let mut scores = Vec::new();
        for mode in [Mode::Hybrid, Mode::SegOnly] {
            let mut cfg = RunConfig::desk();
            cfg.arch = cfg.arch.with_mode(mode);
            cfg.train = cfg.train.rescaled(100);
            cfg.train.seed = seed;
            cfg.train.val_every = 0;
            let mut t: Trainer<f32> = Trainer::new(cfg, train, val).map_err(|e| e.to_string())?;
            t.run().map_err(|e| format!("{mode:?} seed {seed}: {e}"))?;
            let ev = evaluate(t.model(), t.val_set(), t.stats()).map_err(|e| e.to_string())?;
            scores.push((ev.seg.expect("both modes segment").dsc, ev.cls.precision));
        }
        let ((hd, hp), (sd, sp)) = (scores[0], scores[1]);
        let holds = hd >= sd - 0.02 && hp >= sp - 0.05;
        all_hold &= holds;
        rows.push(format!("seed {seed}: DSC {hd:.3}/{sd:.3} prec {hp:.2}/{sp:.2}{}", if holds { "" } else { " (violated)" }));
    }
    let summary = format!("hybrid/seg-only {}; {:.0} s", rows.join("; "), start.elapsed().as_secs_f64());
    ensure(all_hold, summary.clone())?;
    Ok(summary)
}

fn c6_metric_oracles() -> Outcome {
    let results = verify::metric_oracle_checks(6);
    for r in &results {
        ensure(r.passed, format!("{}: {}", r.name, r.detail))?;
    }
    Ok(results.iter().map(|r| format!("{} ({})", r.name, r.detail)).collect::<Vec<_>>().join("; "))
}

fn c7_determinism() -> Outcome {
    let data = synthetic(6, 0.5, 7);
    let (train, val) = data.split_at(4);
    let mut cfg = RunConfig::desk();
    cfg.train = cfg.train.rescaled(10);
    cfg.train.val_every = 3;
    let run = |until: Option<usize>| -> Result<Trainer<f32>, String> {
        let mut t = Trainer::new(cfg.clone(), train, val).map_err(|e| e.to_string())?;
        match until {
            Some(u) => t.run_until(u),
            None => t.run(),
        }
        .map_err(|e| e.to_string())?;
        Ok(t)
    };
    let params = |t: &Trainer<f32>| t.model().parameters().iter().map(|p| p.tensor.to_vec()).collect::<Vec<_>>();

    let a = run(None)?;
    let b = run(None)?;
    ensure(same_logs(a.log(), b.log()), "same-seed logs differ")?;
    ensure(params(&a) == params(&b), "same-seed weights differ")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let half = run(Some(4))?;
    half.save(dir.path()).map_err(|e| e.to_string())?;
    drop(half);
    let mut resumed: Trainer<f32> = Trainer::load(dir.path(), train, val).map_err(|e| e.to_string())?;
    resumed.run().map_err(|e| e.to_string())?;
    ensure(same_logs(resumed.log(), a.log()), "resumed log differs from uninterrupted log")?;
    ensure(params(&resumed) == params(&a), "resumed weights differ from uninterrupted weights")?;
    ensure(resumed.best_epoch() == a.best_epoch(), "best checkpoint epoch differs")?;
    Ok(format!("{} epochs twice identical; resume at epoch 4 bit-exact", a.log().len()))
}

fn c8_kfold() -> Outcome {
    let data = synthetic(410, 0.26, 8);
    let folds = split_kfold(data.len(), 5, 8).map_err(|e| e.to_string())?;
    let tests: Vec<&Vec<usize>> = folds.iter().map(|f| &f.test).collect();
    let sizes: Vec<usize> = tests.iter().map(|t| t.len()).collect();
    ensure(sizes == [82; 5], format!("fold sizes {sizes:?}"))?;
    let all: HashSet<usize> = tests.iter().flat_map(|t| t.iter().copied()).collect();
    ensure(all.len() == 410 && all.iter().all(|&i| i < 410), "folds do not cover the dataset")?;
    for f in &folds {
        let t: HashSet<_> = f.test.iter().collect();
        let v: HashSet<_> = f.val.iter().collect();
        let tr: HashSet<_> = f.train.iter().collect();
        ensure(t.is_disjoint(&v) && t.is_disjoint(&tr) && v.is_disjoint(&tr), "splits overlap")?;
        ensure(t.len() + v.len() + tr.len() == 410, "rotation does not cover the dataset")?;
    }
    Ok("five disjoint folds of 82 covering 410 items".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "architecture ledger", 60, c1_architecture),
        (2, "gradient suite", 300, c2_gradients),
        (3, "loss fidelity and schedules", 300, c3_loss_and_schedules),
        (4, "overfit oracle", 900, c4_overfit),
        (5, "mutual-benefit direction", 3600, c5_mutual_benefit),
        (6, "metric oracles", 60, c6_metric_oracles),
        (7, "determinism and resume", 600, c7_determinism),
        (8, "k-fold contract", 300, c8_kfold),
    ];
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > budget as f64 => Err(format!("over the {budget} s budget; {detail}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
