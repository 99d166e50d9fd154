use std::rc::Rc;

use super::{branch, conv, pool, Op, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngState;

pub(crate) fn backward<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    match op {
        Op::Conv2d { x, w, b, stride, pad } => conv::conv2d_backward(x, w, b.as_ref(), *stride, *pad, g),
        Op::MaxPool { x, argmax } | Op::MaxSpatial { x, argmax } => {
            if x.requires_grad() {
                let mut dx = vec![T::zero(); x.numel()];
                for (&i, &gi) in argmax.iter().zip(g) {
                    dx[i] = dx[i] + gi;
                }
                x.accumulate_grad_owned(dx);
            }
        }
        Op::AvgPool { x, stride } => pool::avgpool_backward(x, *stride, g),
        Op::Upsample { x, factor } => pool::upsample_backward(x, *factor, g),
        Op::Concat { a, b } => {
            let (n, ca, h, w) = a.dims4("concat_channels").expect("checked at forward");
            let cb = b.shape()[1];
            let plane = h * w;
            let stride = (ca + cb) * plane;
            if a.requires_grad() {
                let mut da = Vec::with_capacity(a.numel());
                for i in 0..n {
                    da.extend_from_slice(&g[i * stride..i * stride + ca * plane]);
                }
                a.accumulate_grad_owned(da);
            }
            if b.requires_grad() {
                let mut db = Vec::with_capacity(b.numel());
                for i in 0..n {
                    db.extend_from_slice(&g[i * stride + ca * plane..(i + 1) * stride]);
                }
                b.accumulate_grad_owned(db);
            }
        }
        Op::Add { a, b } => {
            a.accumulate_grad(g);
            b.accumulate_grad(g);
        }
        Op::Relu { x } => {
            let y = out.data();
            let dx = g.iter().zip(y.iter()).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }).collect();
            x.accumulate_grad_owned(dx);
        }
        Op::Sigmoid { x } => {
            let y = out.data();
            let dx = g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
            x.accumulate_grad_owned(dx);
        }
        Op::Log { x } => {
            let xv = x.data();
            let dx = g.iter().zip(xv.iter()).map(|(&gi, &xi)| gi / xi).collect();
            drop(xv);
            x.accumulate_grad_owned(dx);
        }
        Op::Scale { x, c } => {
            x.accumulate_grad_owned(g.iter().map(|&gi| gi * *c).collect());
        }
        Op::Affine { x, scale } => {
            x.accumulate_grad_owned(g.iter().zip(scale).map(|(&gi, &s)| gi * s).collect());
        }
        Op::Clamp { x, lo, hi } => {
            let xv = x.data();
            let dx = g
                .iter()
                .zip(xv.iter())
                .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                .collect();
            drop(xv);
            x.accumulate_grad_owned(dx);
        }
        Op::Sum { x } => {
            x.accumulate_grad_owned(vec![g[0]; x.numel()]);
        }
        Op::Dropout { x, mask } => {
            x.accumulate_grad_owned(g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect());
        }
        Op::SumSquares { x } => {
            let two = T::lit(2.0);
            let xv = x.data();
            let dx = xv.iter().map(|&xi| two * xi * g[0]).collect();
            drop(xv);
            x.accumulate_grad_owned(dx);
        }
        Op::SoftmaxXent2 { logits, target } => {
            let (n, _, h, w) = logits.dims4("softmax_cross_entropy_2class").expect("checked at forward");
            let plane = h * w;
            let inv = g[0] / T::from_usize(n * plane).expect("count");
            let lv = logits.data();
            let mut dl = vec![T::zero(); lv.len()];
            for i in 0..n {
                let base = i * 2 * plane;
                for p in 0..plane {
                    let (l0, l1) = (lv[base + p], lv[base + plane + p]);
                    let (lt, lo, it, io) = if target[i * plane + p] == 1 {
                        (l1, l0, base + plane + p, base + p)
                    } else {
                        (l0, l1, base + p, base + plane + p)
                    };
                    // d/d(lo - lt) softplus(lo - lt) = sigmoid(lo - lt)
                    let s = sigmoid_scalar(lo - lt);
                    dl[io] = s * inv;
                    dl[it] = -s * inv;
                }
            }
            drop(lv);
            logits.accumulate_grad_owned(dl);
        }
    }
}

fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    x.data().iter().map(|&v| f(v)).collect()
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let y = if branch::active() {
        let on = branch::decide(x.numel(), || x.data().iter().map(|&v| usize::from(v > T::zero())).collect());
        x.data().iter().zip(&on).map(|(&v, &k)| if k == 1 { v } else { T::zero() }).collect()
    } else {
        map(x, |v| if v > T::zero() { v } else { T::zero() })
    };
    Tensor::from_op(x.shape().to_vec(), y, Op::Relu { x: x.clone() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let y = map(x, sigmoid_scalar);
    Tensor::from_op(x.shape().to_vec(), y, Op::Sigmoid { x: x.clone() })
}

/// Natural log. Inputs must be strictly positive and finite.
pub fn log<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(bad) = x.data().iter().find(|v| !(v.is_finite() && **v > T::zero())) {
        return Err(Error::NonFinite(format!("log of {bad}")));
    }
    let y = map(x, T::ln);
    Ok(Tensor::from_op(x.shape().to_vec(), y, Op::Log { x: x.clone() }))
}

pub fn scalar_mul<T: Real>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let y = map(x, |v| v * c);
    Tensor::from_op(x.shape().to_vec(), y, Op::Scale { x: x.clone(), c })
}

/// Elementwise `scale[i] * x[i] + shift[i]` with constant coefficients.
pub fn affine<T: Real>(x: &Tensor<T>, scale: Vec<T>, shift: Vec<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    if scale.len() != n || shift.len() != n {
        return Err(Error::shape(
            "affine",
            format!("{n} elements but {} scales and {} shifts", scale.len(), shift.len()),
        ));
    }
    let y = x.data().iter().zip(&scale).zip(&shift).map(|((&v, &s), &b)| s * v + b).collect();
    Ok(Tensor::from_op(x.shape().to_vec(), y, Op::Affine { x: x.clone(), scale }))
}

/// Clamps into `[lo, hi]`; the gradient passes only where the input lies inside.
pub fn clamp<T: Real>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    let y = if branch::active() {
        let side = branch::decide(x.numel(), || {
            x.data().iter().map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 }).collect()
        });
        x.data().iter().zip(&side).map(|(&v, &s)| [lo, v, hi][s]).collect()
    } else {
        map(x, |v| v.max(lo).min(hi))
    };
    Tensor::from_op(x.shape().to_vec(), y, Op::Clamp { x: x.clone(), lo, hi })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let y = a.data().iter().zip(b.data().iter()).map(|(&p, &q)| p + q).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), y, Op::Add { a: a.clone(), b: b.clone() }))
}

/// Sum of all elements, as a scalar tensor.
pub fn reduce_sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
    Tensor::from_op(Vec::new(), vec![s], Op::Sum { x: x.clone() })
}

/// Sum of squared elements, as a scalar tensor.
pub fn sum_squares<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v * v);
    Tensor::from_op(Vec::new(), vec![s], Op::SumSquares { x: x.clone() })
}

/// Per-(N, C) spatial maximum of an NCHW tensor, shape `[N, C]`. The
/// subgradient goes to the first maximum in row-major order.
pub fn reduce_max_spatial<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("reduce_max_spatial")?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::shape("reduce_max_spatial", "empty spatial extent"));
    }
    let xv = x.data();
    let argmax = branch::decide(n * c, || {
        (0..n * c)
            .map(|nc| {
                let base = nc * plane;
                (base + 1..base + plane).fold(base, |best, i| if xv[i] > xv[best] { i } else { best })
            })
            .collect()
    });
    let out = argmax.iter().map(|&i| xv[i]).collect();
    drop(xv);
    Ok(Tensor::from_op(vec![n, c], out, Op::MaxSpatial { x: x.clone(), argmax }))
}

/// Joins two NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} and {:?} disagree on N, H or W", a.shape(), b.shape()),
        ));
    }
    let plane = ha * wa;
    let (av, bv) = (a.data(), b.data());
    let mut out = Vec::with_capacity(av.len() + bv.len());
    for i in 0..na {
        out.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
    }
    drop((av, bv));
    Ok(Tensor::from_op(vec![na, ca + cb, ha, wa], out, Op::Concat { a: a.clone(), b: b.clone() }))
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`, so the
/// expectation equals the input. Identity when not training or `rate == 0`.
pub fn dropout<T: Real>(x: &Tensor<T>, rate: f64, training: bool, rng: &mut RngState) -> Tensor<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
    if !training || rate == 0.0 {
        return x.clone();
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let n = x.numel();
    let mask: Vec<T> = rng.with(|r| {
        use rand::Rng;
        (0..n).map(|_| if r.random::<f64>() < rate { T::zero() } else { keep }).collect()
    });
    let y = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::from_op(x.shape().to_vec(), y, Op::Dropout { x: x.clone(), mask })
}

/// Mean over `N * H * W` of `-log softmax(logits)[target]` for two-class
/// logits `[N, 2, H, W]` and a binary target `[N, H, W]` stored flat.
pub fn softmax_cross_entropy_2class<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4("softmax_cross_entropy_2class")?;
    if c != 2 {
        return Err(Error::shape("softmax_cross_entropy_2class", format!("expected 2 channels, got {c}")));
    }
    let plane = h * w;
    if target.len() != n * plane {
        return Err(Error::shape(
            "softmax_cross_entropy_2class",
            format!("target holds {} pixels, logits {}", target.len(), n * plane),
        ));
    }
    if let Some(bad) = target.iter().find(|&&t| t > 1) {
        return Err(Error::Data(format!("segmentation target must be binary, found {bad}")));
    }
    let lv = logits.data();
    let mut total = T::zero();
    for i in 0..n {
        let base = i * 2 * plane;
        for p in 0..plane {
            let (l0, l1) = (lv[base + p], lv[base + plane + p]);
            let d = if target[i * plane + p] == 1 { l0 - l1 } else { l1 - l0 };
            total = total + softplus(d);
        }
    }
    drop(lv);
    if n * plane == 0 {
        return Err(Error::shape("softmax_cross_entropy_2class", "empty input"));
    }
    let loss = total / T::from_usize(n * plane).expect("count");
    Ok(Tensor::from_op(
        Vec::new(),
        vec![loss],
        Op::SoftmaxXent2 { logits: logits.clone(), target: Rc::from(target) },
    ))
}
