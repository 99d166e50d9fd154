//! 2-D convolution via im2col + GEMM.

use std::cell::Cell;

use super::{Op, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

thread_local! {
    static CONV_BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when set, the weight gradient of every convolution on this
/// thread is deliberately perturbed so gradient checks must fail.
pub fn set_conv_backward_fault(on: bool) {
    CONV_BACKWARD_FAULT.with(|f| f.set(on));
}

fn fault_active() -> bool {
    CONV_BACKWARD_FAULT.with(Cell::get)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output columns `[lo, hi)` for which input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let img = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * plane;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if hi == lo {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let img = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * plane;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src.iter().enumerate().take(hi).skip(lo) {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + s;
                    }
                }
            }
        }
    }
}

/// `x: [N, C, H, W]`, `w: [K, C, kh, kw]`, `b: [K]` → `[N, K, H', W']` with
/// `H' = (H + 2 pad - kh) / stride + 1`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (k, cw, kh, kw) = w.dims4("conv2d")?;
    if c != cw {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but kernel {:?} expects {cw}", w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [k] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{k}]", b.shape())));
        }
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit {h}x{wd}"),
        ));
    }
    let g = Geometry {
        c,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
    };
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); n * k * plane];
    {
        let xv = x.data();
        let wv = w.data();
        let bv = b.map(|b| b.data());
        let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); g.patch_len() * plane] };
        for i in 0..n {
            let xs = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let dst = &mut out[i * k * plane..(i + 1) * k * plane];
            if let Some(bv) = &bv {
                for (ki, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.fill(bv[ki]);
                }
            }
            let src: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            T::gemm(false, false, k, g.patch_len(), plane, &wv, src, T::one(), dst);
        }
    }
    Ok(Tensor::from_op(
        vec![n, k, g.ho, g.wo],
        out,
        Op::Conv2d { x: x.clone(), w: w.clone(), b: b.cloned(), stride, pad },
    ))
}

pub(super) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    gout: &[T],
) {
    let (n, c, h, wd) = x.dims4("conv2d").expect("checked at forward");
    let (k, _, kh, kw) = w.dims4("conv2d").expect("checked at forward");
    let g = Geometry {
        c,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
    };
    let plane = g.ho * g.wo;
    let plen = g.patch_len();

    if let Some(b) = b.filter(|b| b.requires_grad()) {
        let mut db = vec![T::zero(); k];
        for i in 0..n {
            for (ki, chunk) in gout[i * k * plane..(i + 1) * k * plane].chunks(plane).enumerate() {
                db[ki] = db[ki] + chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        b.accumulate_grad_owned(db);
    }

    let need_w = w.requires_grad();
    let need_x = x.requires_grad();
    if !need_w && !need_x {
        return;
    }
    let xv = x.data();
    let wv = w.data();
    let mut dw = if need_w { vec![T::zero(); k * plen] } else { Vec::new() };
    let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); plen * plane] };
    for i in 0..n {
        let go = &gout[i * k * plane..(i + 1) * k * plane];
        let xs = &xv[i * c * h * wd..(i + 1) * c * h * wd];
        if need_w {
            let src: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            T::gemm(false, true, k, plane, plen, go, src, T::one(), &mut dw);
        }
        if need_x {
            let dxs = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
            if g.pointwise() {
                T::gemm(true, false, plen, k, plane, &wv, go, T::one(), dxs);
            } else {
                T::gemm(true, false, plen, k, plane, &wv, go, T::zero(), &mut cols);
                col2im(&cols, &g, dxs);
            }
        }
    }
    drop((xv, wv));
    if need_w {
        if fault_active() {
            let bump = T::lit(1.05);
            dw.iter_mut().for_each(|v| *v = *v * bump);
        }
        w.accumulate_grad_owned(dw);
    }
    if need_x {
        x.accumulate_grad_owned(dx);
    }
}
