//! 2D convolution kernels: grouped im2col + matmul for the general case, a
//! direct loop for depthwise. Layouts are NCHW for activations and
//! `[c_out, c_in/groups, k, k]` for weights.

use crate::element::Element;
use crate::kernels::matmul::{matmul_nn, matmul_nt, matmul_tn};

/// Validated geometry of one conv2d application. Construction is done by the
/// graph layer; kernels trust these numbers.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// floor((size − k + 2·padding)/stride) + 1, or None when that is < 1.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in
    }
}

/// Gathers one (batch, group) slab into column layout
/// `col[(ci·k + ky)·k + kx, oy·w_out + ox]`, with zeros where the receptive
/// field hangs over the padded border.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, batch: usize, group: usize, col: &mut [T]) {
    let (k, hw_out) = (g.k, g.h_out * g.w_out);
    col.fill(T::zero());
    for ci in 0..g.cin_g() {
        let xc = &x[((batch * g.c_in) + group * g.cin_g() + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let crow = &mut col[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            crow[oy * g.w_out + ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`].
fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, batch: usize, group: usize, dx: &mut [T]) {
    let (k, hw_out) = (g.k, g.h_out * g.w_out);
    for ci in 0..g.cin_g() {
        let xc = &mut dx[((batch * g.c_in) + group * g.cin_g() + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let crow = &col[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xc[iy as usize * g.w + ix as usize] += crow[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw_out = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let ck = g.cin_g() * g.k * g.k;
        let mut col = vec![T::zero(); ck * hw_out];
        for batch in 0..g.n {
            for group in 0..g.groups {
                im2col(x, g, batch, group, &mut col);
                let wg = &w[group * g.cout_g() * ck..][..g.cout_g() * ck];
                let og = &mut out[((batch * g.c_out) + group * g.cout_g()) * hw_out..]
                    [..g.cout_g() * hw_out];
                matmul_nn(wg, &col, og, g.cout_g(), ck, hw_out);
            }
        }
    }
    if let Some(bias) = b {
        for batch in 0..g.n {
            for co in 0..g.c_out {
                let bv = bias[co];
                for v in &mut out[((batch * g.c_out) + co) * hw_out..][..hw_out] {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let k = g.k;
    for batch in 0..g.n {
        for c in 0..g.c_in {
            let xc = &x[((batch * g.c_in) + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[c * k * k..][..k * k];
            let oc = &mut out[((batch * g.c_out) + c) * g.h_out * g.w_out..][..g.h_out * g.w_out];
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += wc[ky * k + kx] * xc[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    oc[oy * g.w_out + ox] = acc;
                }
            }
        }
    }
}

/// Accumulates gradients for x, w, and b. Any of the output slots may be
/// None when that operand does not require a gradient.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    d_out: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw_out = g.h_out * g.w_out;
    if let Some(db) = db {
        for batch in 0..g.n {
            for co in 0..g.c_out {
                let mut acc = T::zero();
                for v in &d_out[((batch * g.c_out) + co) * hw_out..][..hw_out] {
                    acc += *v;
                }
                db[co] += acc;
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    if g.is_depthwise() {
        depthwise_backward(x, w, d_out, g, dx, dw);
        return;
    }
    let ck = g.cin_g() * g.k * g.k;
    let mut col = vec![T::zero(); ck * hw_out];
    let mut dcol = vec![T::zero(); ck * hw_out];
    let (mut dx, mut dw) = (dx, dw);
    for batch in 0..g.n {
        for group in 0..g.groups {
            let og = &d_out[((batch * g.c_out) + group * g.cout_g()) * hw_out..]
                [..g.cout_g() * hw_out];
            if let Some(dw) = dw.as_deref_mut() {
                im2col(x, g, batch, group, &mut col);
                let dwg = &mut dw[group * g.cout_g() * ck..][..g.cout_g() * ck];
                matmul_nt(og, &col, dwg, g.cout_g(), hw_out, ck);
            }
            if let Some(dx) = dx.as_deref_mut() {
                dcol.fill(T::zero());
                let wg = &w[group * g.cout_g() * ck..][..g.cout_g() * ck];
                matmul_tn(wg, og, &mut dcol, ck, g.cout_g(), hw_out);
                col2im_add(&dcol, g, batch, group, dx);
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    d_out: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let k = g.k;
    for batch in 0..g.n {
        for c in 0..g.c_in {
            let xc = &x[((batch * g.c_in) + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[c * k * k..][..k * k];
            let oc = &d_out[((batch * g.c_out) + c) * g.h_out * g.w_out..][..g.h_out * g.w_out];
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let go = oc[oy * g.w_out + ox];
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = iy as usize * g.w + ix as usize;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[c * k * k + ky * k + kx] += go * xc[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[((batch * g.c_in) + c) * g.h * g.w + xi] += go * wc[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}
