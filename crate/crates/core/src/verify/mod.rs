//! Self-checks run by `hds verify` and the test suites: finite-difference
//! gradient checks, the architecture shape ledger, loss reassembly and the
//! metric oracles.

pub mod oracle;

use crate::error::Result;
use crate::loss::{hds_total, mil_cls_loss, LossWeights};
use crate::metrics;
use crate::model::{build_model, ArchConfig, UResNet};
use crate::raster::Mask;
use crate::rng::RngState;
use crate::tensor::gradcheck::{check_gradients, GradCheck};
use crate::tensor::{self, Tensor};

/// Relative-error bound for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Relative-error bound for the full objective on the tiny model.
pub const LOSS_TOL: f64 = 1e-5;
/// Central-difference step. Branch replay removes kink crossings, so the
/// step can be large enough to keep roundoff well below the tolerance.
const EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// Normal draws.
fn normal(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::leaf(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches")
}

/// Distinct values at least 0.1 apart, in random order, so max-type
/// operations have no near-ties within the finite-difference step.
fn spread(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.1 + 0.02 * rng.uniform()).collect();
    rng.shuffle(&mut v);
    Tensor::leaf(shape, v).expect("shape matches")
}

/// Draws bounded away from zero, for kinks at the origin.
fn off_zero(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let t = normal(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.05));
    t
}

/// A fixed random weighting so every output element influences the scalar.
fn probe(rng: &mut RngState, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.normal()).collect();
    let zero = vec![0.0; y.numel()];
    Ok(tensor::reduce_sum(&tensor::affine(y, w, zero)?))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>);

/// Finite-difference checks of every differentiable operation, each on a
/// small random input reduced to a scalar by a random linear probe.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = RngState::new(seed);
    let mut cases: Vec<OpCase> = Vec::new();

    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let x = normal(&mut rng, &[2, 3, 5, 5]);
        let w = normal(&mut rng, &[4, 3, k, k]);
        let b = normal(&mut rng, &[4]);
        let name: &'static str = match (stride, pad, k) {
            (1, 1, 3) => "conv2d 3x3 s1 p1",
            (2, 1, 3) => "conv2d 3x3 s2 p1",
            (1, 0, 1) => "conv2d 1x1",
            _ => "conv2d 3x3 s2 p0",
        };
        cases.push((name, vec![x, w, b], Box::new(move |t| tensor::conv2d(&t[0], &t[1], Some(&t[2]), stride, pad))));
    }
    cases.push(("maxpool2d", vec![spread(&mut rng, &[1, 2, 8, 8])], Box::new(|t| tensor::maxpool2d(&t[0], 2))));
    cases.push(("avgpool2d", vec![normal(&mut rng, &[1, 2, 8, 8])], Box::new(|t| tensor::avgpool2d(&t[0], 4))));
    cases.push((
        "upsample_bilinear",
        vec![normal(&mut rng, &[1, 2, 3, 4])],
        Box::new(|t| tensor::upsample_bilinear(&t[0], 4)),
    ));
    cases.push((
        "concat_channels",
        vec![normal(&mut rng, &[2, 1, 3, 3]), normal(&mut rng, &[2, 2, 3, 3])],
        Box::new(|t| tensor::concat_channels(&t[0], &t[1])),
    ));
    cases.push((
        "add",
        vec![normal(&mut rng, &[2, 3]), normal(&mut rng, &[2, 3])],
        Box::new(|t| tensor::add(&t[0], &t[1])),
    ));
    cases.push(("relu", vec![off_zero(&mut rng, &[3, 4])], Box::new(|t| Ok(tensor::relu(&t[0])))));
    cases.push(("sigmoid", vec![normal(&mut rng, &[3, 4])], Box::new(|t| Ok(tensor::sigmoid(&t[0])))));
    let pos = normal(&mut rng, &[3, 4]);
    pos.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    cases.push(("log", vec![pos], Box::new(|t| tensor::log(&t[0]))));
    cases.push(("scalar_mul", vec![normal(&mut rng, &[5])], Box::new(|t| Ok(tensor::scalar_mul(&t[0], -1.7)))));
    let (scale, shift): (Vec<f64>, Vec<f64>) = (0..6).map(|_| (rng.normal(), rng.normal())).unzip();
    cases.push((
        "affine",
        vec![normal(&mut rng, &[2, 3])],
        Box::new(move |t| tensor::affine(&t[0], scale.clone(), shift.clone())),
    ));
    let c = spread(&mut rng, &[12]);
    cases.push(("clamp", vec![c], Box::new(|t| Ok(tensor::clamp(&t[0], -0.25, 0.35)))));
    cases.push(("reduce_sum", vec![normal(&mut rng, &[2, 2, 2])], Box::new(|t| Ok(tensor::reduce_sum(&t[0])))));
    cases.push(("sum_squares", vec![normal(&mut rng, &[7])], Box::new(|t| Ok(tensor::sum_squares(&t[0])))));
    cases.push((
        "reduce_max_spatial",
        vec![spread(&mut rng, &[2, 2, 3, 3])],
        Box::new(|t| tensor::reduce_max_spatial(&t[0])),
    ));
    let target: Vec<u8> = (0..2 * 4 * 4).map(|_| u8::from(rng.bernoulli(0.3))).collect();
    cases.push((
        "softmax_cross_entropy_2class",
        vec![normal(&mut rng, &[2, 2, 4, 4])],
        Box::new(move |t| tensor::softmax_cross_entropy_2class(&t[0], &target)),
    ));
    let drop_rng = rng.fork(99);
    cases.push((
        "dropout",
        vec![normal(&mut rng, &[4, 5])],
        Box::new(move |t| Ok(tensor::dropout(&t[0], 0.3, true, &mut drop_rng.clone()))),
    ));

    let mut out = Vec::new();
    for (name, inputs, f) in cases {
        // Cloning the probe stream gives the same weights on every call.
        let probe_rng = rng.fork(out.len() as u64 + 1000);
        let loss = || -> Result<Tensor<f64>> { probe(&mut probe_rng.clone(), &f(&inputs)?) };
        let leaves: Vec<(String, Tensor<f64>)> =
            inputs.iter().enumerate().map(|(i, t)| (format!("{name}[{i}]"), t.clone())).collect();
        out.extend(check_gradients(loss, &leaves, EPS)?);
    }
    Ok(out)
}

/// Model, input batch, flat segmentation target and image labels.
pub type LossFixture = (UResNet<f64>, Tensor<f64>, Vec<u8>, Vec<u8>);

/// `(level, segmentation shape, classification-map shape)`; `None` where
/// the level has no such head.
pub type LevelShapes = Vec<(usize, Option<Vec<usize>>, Option<Vec<usize>>)>;

/// Tiny two-level model in double precision, with random biases, and a
/// batch holding one positive and one negative image.
pub fn tiny_loss_fixture(seed: u64) -> Result<LossFixture> {
    let mut rng = RngState::new(seed);
    let model: UResNet<f64> = build_model(&ArchConfig::tiny(), &mut rng)?;
    // Zero biases over all-zero feature regions leave whole maps exactly on
    // the ReLU kink with no gradient through them; random biases make every
    // path carry signal.
    for p in model.parameters().iter().filter(|p| p.name.ends_with(".bias")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
    let (h, w) = (128, 128);
    let x = Tensor::new(&[2, 1, h, w], (0..2 * h * w).map(|_| rng.normal()).collect())?;
    let mut seg = vec![0u8; 2 * h * w];
    let (cy, cx) = (20 + rng.below(80), 20 + rng.below(80));
    for y in cy - 6..cy + 6 {
        for xx in cx - 6..cx + 6 {
            seg[y * w + xx] = 1;
        }
    }
    Ok((model, x, seg, vec![1, 0]))
}

/// Finite-difference check of every parameter of the tiny model against
/// the full objective (dropout off).
pub fn full_loss_gradient_check(seed: u64) -> Result<Vec<GradCheck>> {
    let (model, x, seg, labels) = tiny_loss_fixture(seed)?;
    let weights = LossWeights::default();
    let eta = weights.eta_for(&model.config().supervision_levels);
    let loss = || -> Result<Tensor<f64>> {
        let out = model.forward(&x, false, &mut RngState::new(0))?;
        Ok(hds_total(&out, &seg, &labels, &weights, &eta, model.parameters())?.total)
    };
    let leaves: Vec<(String, Tensor<f64>)> =
        model.parameters().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    check_gradients(loss, &leaves, EPS)
}

fn grad_results(prefix: &str, checks: Result<Vec<GradCheck>>, tol: f64) -> Vec<CheckResult> {
    match checks {
        Ok(cs) => cs
            .into_iter()
            .map(|c| {
                CheckResult::new(
                    format!("{prefix} {}", c.name),
                    c.rel_err < tol,
                    format!("rel err {:.3e} (bound {tol:.0e}), |grad| {:.3e}", c.rel_err, c.analytic_norm),
                )
            })
            .collect(),
        Err(e) => vec![CheckResult::new(prefix, false, e.to_string())],
    }
}

/// Classification-map shapes and segmentation output shapes of `config`
/// for an `h x w` input, from an actual forward pass.
pub fn output_shapes(config: &ArchConfig, h: usize, w: usize) -> Result<LevelShapes> {
    let model: UResNet<f32> = build_model(config, &mut RngState::new(0))?;
    let x = Tensor::new(&[1, 1, h, w], vec![0.0f32; h * w])?;
    let out = tensor::no_grad(|| model.forward(&x, false, &mut RngState::new(0)))?;
    Ok(out
        .levels
        .iter()
        .map(|l| {
            (l.level, l.seg_logits.as_ref().map(|t| t.shape().to_vec()), l.cls_map.as_ref().map(|t| t.shape().to_vec()))
        })
        .collect())
}

/// The `paper` preset topology with one base channel: same depth, pooling and
/// upsampling, cheap enough to run at full resolution.
pub fn narrow_paper() -> ArchConfig {
    ArchConfig { base_channels: 1, ..ArchConfig::paper() }
}

fn shape_ledger() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let convs = build_model::<f32>(&ArchConfig::paper(), &mut RngState::new(0)).map(|m| m.count_conv3x3());
    out.push(match convs {
        Ok(n) => CheckResult::new("paper preset 3x3 convolutions", n == 45, format!("{n} (expected 45)")),
        Err(e) => CheckResult::new("paper preset 3x3 convolutions", false, e.to_string()),
    });
    for (h, w, ch, cw) in [(512, 384, 4, 3), (1024, 512, 8, 4)] {
        let name = format!("shapes for {h}x{w} input");
        match output_shapes(&narrow_paper(), h, w) {
            Ok(levels) => {
                let bad: Vec<String> = levels
                    .iter()
                    .filter(|(_, seg, cls)| {
                        seg.as_deref() != Some(&[1, 2, h, w][..]) || cls.as_deref() != Some(&[1, 1, ch, cw][..])
                    })
                    .map(|(d, seg, cls)| format!("level {d}: seg {seg:?}, cls {cls:?}"))
                    .collect();
                let detail = if bad.is_empty() {
                    format!("{} levels, cls {ch}x{cw}, seg {h}x{w}", levels.len())
                } else {
                    bad.join("; ")
                };
                out.push(CheckResult::new(name, bad.is_empty() && levels.len() == 6, detail));
            }
            Err(e) => out.push(CheckResult::new(name, false, e.to_string())),
        }
    }
    out
}

fn loss_checks(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let case = |v: Vec<f64>, h, w, y: u8| -> Result<f64> {
        Ok(mil_cls_loss(&Tensor::new(&[1, 1, h, w], v)?, &[y], 1e-6)?.item())
    };
    let cases = [
        ("MIL negative, max 0.5, sum 2", case(vec![0.5, 0.5, 0.25, 0.25, 0.25, 0.25], 2, 3, 0), -(0.5f64).ln() + 2e-6),
        ("MIL positive, uniform 0.9", case(vec![0.9; 12], 3, 4, 1), -(0.9f64).ln() + 12.0 * 0.9e-6),
    ];
    for (name, got, want) in cases {
        out.push(match got {
            Ok(g) => CheckResult::new(name, (g - want).abs() < 1e-9, format!("{g:.12} vs {want:.12}")),
            Err(e) => CheckResult::new(name, false, e.to_string()),
        });
    }
    let reassembly = (|| -> Result<(f64, f64)> {
        let (model, x, seg, labels) = tiny_loss_fixture(seed)?;
        let weights = LossWeights::default();
        let eta = weights.eta_for(&model.config().supervision_levels);
        let out = model.forward(&x, true, &mut RngState::new(seed))?;
        let l = hds_total(&out, &seg, &labels, &weights, &eta, model.parameters())?;
        Ok((l.breakdown.reassemble(weights.alpha, weights.lambda), l.breakdown.total))
    })();
    out.push(match reassembly {
        Ok((r, t)) => {
            let rel = (r - t).abs() / t.abs();
            CheckResult::new("loss reassembly", rel < 1e-6, format!("relative gap {rel:.2e}"))
        }
        Err(e) => CheckResult::new("loss reassembly", false, e.to_string()),
    });
    out
}

fn all_masks_3x3() -> Vec<Mask> {
    (0..512u32)
        .map(|bits| Mask::new(3, 3, (0..9).map(|i| ((bits >> i) & 1) as u8).collect()).expect("3x3"))
        .collect()
}

/// Every metric against its brute-force definition on all 512 x 512 pairs
/// of 3x3 masks, and AUC against all-pairs enumeration.
pub fn metric_oracle_checks(seed: u64) -> Vec<CheckResult> {
    let masks = all_masks_3x3();
    let (mut dsc_bad, mut se_bad, mut fpi_bad, mut pairs) = (0usize, 0usize, 0usize, 0usize);
    for p in &masks {
        for g in &masks {
            pairs += 1;
            if (metrics::dsc(p, g).unwrap_or(f64::NAN) - oracle::dsc(p, g)).abs() > 1e-12 {
                dsc_bad += 1;
            }
            let se = metrics::sensitivity(p, g).ok();
            let agree = match (se, oracle::sensitivity(p, g)) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                (None, None) => true,
                _ => false,
            };
            if !agree {
                se_bad += 1;
            }
            if metrics::fpi(p, g).unwrap_or(f64::NAN) != oracle::fpi(p, g) {
                fpi_bad += 1;
            }
        }
    }
    let mut out = vec![
        CheckResult::new("DSC oracle (3x3 exhaustive)", dsc_bad == 0, format!("{dsc_bad} of {pairs} pairs disagree")),
        CheckResult::new("SE oracle (3x3 exhaustive)", se_bad == 0, format!("{se_bad} of {pairs} pairs disagree")),
        CheckResult::new("FPI oracle (3x3 exhaustive)", fpi_bad == 0, format!("{fpi_bad} of {pairs} pairs disagree")),
    ];
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut labels: Vec<u8> = (0..20).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..20).map(|_| (rng.uniform() * 8.0).floor() / 8.0).collect();
        let got = metrics::roc_auc(&scores, &labels).unwrap_or(f64::NAN);
        worst = worst.max((got - oracle::auc_all_pairs(&scores, &labels)).abs());
    }
    out.push(CheckResult::new("AUC oracle (20-point all pairs)", worst <= 1e-12, format!("max gap {worst:.2e}")));
    out
}

/// Runs every check. Nothing here panics; failures come back as results.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    let mut out = grad_results("gradient", op_gradient_checks(seed), OP_TOL);
    out.extend(grad_results("full loss gradient", full_loss_gradient_check(seed), LOSS_TOL));
    out.extend(shape_ledger());
    out.extend(loss_checks(seed));
    out.extend(metric_oracle_checks(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_gradients_pass() {
        for c in op_gradient_checks(3).unwrap() {
            assert!(c.rel_err < OP_TOL, "{}: {:e}", c.name, c.rel_err);
            assert!(c.analytic_norm > 0.0 || c.name.starts_with("clamp"), "{} has zero gradient", c.name);
        }
    }

    #[test]
    fn full_loss_gradient_passes() {
        for c in full_loss_gradient_check(4).unwrap() {
            assert!(c.rel_err < LOSS_TOL, "{}: {:e} (|g| {:e})", c.name, c.rel_err, c.analytic_norm);
        }
    }

    #[test]
    fn conv_fault_is_caught() {
        tensor::set_conv_backward_fault(true);
        let r = op_gradient_checks(1);
        tensor::set_conv_backward_fault(false);
        let failing: Vec<_> = r.unwrap().into_iter().filter(|c| c.rel_err >= OP_TOL).map(|c| c.name).collect();
        assert!(failing.iter().any(|n| n.starts_with("conv2d") && n.ends_with("[1]")), "{failing:?}");
        assert!(failing.iter().all(|n| n.starts_with("conv2d")), "{failing:?}");
    }

    #[test]
    fn metric_oracles_agree() {
        for c in metric_oracle_checks(5) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn loss_checks_pass() {
        for c in loss_checks(2) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
