//! Pooling and bilinear upsampling over NCHW tensors.

use super::{branch, Op, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

fn check_divisible<T: Real>(x: &Tensor<T>, stride: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(op, format!("stride {stride} does not divide {h}x{w}")));
    }
    Ok((n, c, h, w))
}

/// Non-overlapping max pooling with window = stride. Ties resolve to the
/// first element in row-major window order.
pub fn maxpool2d<T: Real>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_divisible(x, stride, "maxpool2d")?;
    let (ho, wo) = (h / stride, w / stride);
    let xv = x.data();
    let argmax = branch::decide(n * c * ho * wo, || {
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..stride {
                        let row = base + (oy * stride + dy) * w + ox * stride;
                        for i in row..row + stride {
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    argmax.push(best);
                }
            }
        }
        argmax
    });
    let out = argmax.iter().map(|&i| xv[i]).collect();
    drop(xv);
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, Op::MaxPool { x: x.clone(), argmax }))
}

/// Non-overlapping mean pooling with window = stride; stride 1 is the identity.
pub fn avgpool2d<T: Real>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_divisible(x, stride, "avgpool2d")?;
    if stride == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h / stride, w / stride);
    let inv = T::one() / T::from_usize(stride * stride).expect("window");
    let xv = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for nc in 0..n * c {
        let src = &xv[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for y in 0..h {
            let drow = &mut dst[(y / stride) * wo..(y / stride + 1) * wo];
            for (x_, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                drow[x_ / stride] = drow[x_ / stride] + v;
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * inv);
    }
    drop(xv);
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, Op::AvgPool { x: x.clone(), stride }))
}

pub(super) fn avgpool_backward<T: Real>(x: &Tensor<T>, stride: usize, g: &[T]) {
    if !x.requires_grad() {
        return;
    }
    let (n, c, h, w) = x.dims4("avgpool2d").expect("checked at forward");
    let wo = w / stride;
    let ho = h / stride;
    let inv = T::one() / T::from_usize(stride * stride).expect("window");
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let go = &g[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            let grow = &go[(y / stride) * wo..(y / stride + 1) * wo];
            for (x_, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = grow[x_ / stride] * inv;
            }
        }
    }
    x.accumulate_grad_owned(dx);
}

/// Source taps for one axis under half-pixel-centre sampling: output `o`
/// reads `(1 - t) * in[i0] + t * in[i1]`.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel centres.
/// Factor 1 returns the input unchanged.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_bilinear")?;
    if factor < 1 {
        return Err(Error::shape("upsample_bilinear", format!("factor {factor} < 1")));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("upsample_bilinear", "empty spatial extent"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps(h, factor);
    let tx: Vec<(usize, usize, T)> = taps(w, factor).into_iter().map(|(a, b, t)| (a, b, T::lit(t))).collect();
    let xv = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut row = vec![T::zero(); wo];
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(h);
    for nc in 0..n * c {
        let src = &xv[nc * h * w..(nc + 1) * h * w];
        // Horizontal pass per source row, then blend rows vertically.
        rows.clear();
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            rows.push(tx.iter().map(|&(a, b, t)| s[a] + (s[b] - s[a]) * t).collect());
        }
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for (oy, &(a, b, t)) in ty.iter().enumerate() {
            let t = T::lit(t);
            for (r, (&ra, &rb)) in row.iter_mut().zip(rows[a].iter().zip(&rows[b])) {
                *r = ra + (rb - ra) * t;
            }
            dst[oy * wo..(oy + 1) * wo].copy_from_slice(&row);
        }
    }
    drop(xv);
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, Op::Upsample { x: x.clone(), factor }))
}

pub(super) fn upsample_backward<T: Real>(x: &Tensor<T>, factor: usize, g: &[T]) {
    if !x.requires_grad() {
        return;
    }
    let (n, c, h, w) = x.dims4("upsample_bilinear").expect("checked at forward");
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps(h, factor);
    let tx: Vec<(usize, usize, T)> = taps(w, factor).into_iter().map(|(a, b, t)| (a, b, T::lit(t))).collect();
    let mut dx = vec![T::zero(); n * c * h * w];
    let mut rows = vec![T::zero(); h * wo];
    for nc in 0..n * c {
        let go = &g[nc * ho * wo..(nc + 1) * ho * wo];
        // Transpose of the vertical blend.
        rows.fill(T::zero());
        for (oy, &(a, b, t)) in ty.iter().enumerate() {
            let t = T::lit(t);
            let grow = &go[oy * wo..(oy + 1) * wo];
            for (ox, &gv) in grow.iter().enumerate() {
                rows[a * wo + ox] = rows[a * wo + ox] + gv * (T::one() - t);
                rows[b * wo + ox] = rows[b * wo + ox] + gv * t;
            }
        }
        // Transpose of the horizontal pass.
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            let r = &rows[y * wo..(y + 1) * wo];
            let d = &mut dst[y * w..(y + 1) * w];
            for (&gv, &(a, b, t)) in r.iter().zip(&tx) {
                d[a] = d[a] + gv * (T::one() - t);
                d[b] = d[b] + gv * t;
            }
        }
    }
    x.accumulate_grad_owned(dx);
}
