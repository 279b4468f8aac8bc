//! Adaptive average pooling. Output bin `b` over an axis of length `len`
//! covers input indices [floor(b·len/out), ceil((b+1)·len/out)); bins may
//! overlap when `len` is not a multiple of `out`, and the backward pass
//! accumulates a share from every covering bin.

use crate::element::Element;

/// Half-open input range for one output bin.
pub fn bin_range(b: usize, len: usize, out: usize) -> (usize, usize) {
    let start = b * len / out;
    let end = ((b + 1) * len).div_ceil(out);
    (start, end)
}

pub fn adaptive_avgpool2d_forward<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for img in 0..n * c {
        let xc = &x[img * h * w..][..h * w];
        let oc = &mut out[img * out_h * out_w..][..out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1) = bin_range(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = bin_range(ox, w, out_w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += xc[iy * w + ix];
                    }
                }
                let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                oc[oy * out_w + ox] = acc / count;
            }
        }
    }
    out
}

pub fn adaptive_avgpool2d_backward<T: Element>(
    d_out: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    for img in 0..n * c {
        let go = &d_out[img * out_h * out_w..][..out_h * out_w];
        let gx = &mut dx[img * h * w..][..h * w];
        for oy in 0..out_h {
            let (y0, y1) = bin_range(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = bin_range(ox, w, out_w);
                let share =
                    go[oy * out_w + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gx[iy * w + ix] += share;
                    }
                }
            }
        }
    }
}
