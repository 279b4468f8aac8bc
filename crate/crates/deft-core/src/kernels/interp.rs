//! Bilinear and nearest-neighbor resampling with the align_corners=false
//! convention: output pixel centers map to src = (dst + 0.5)·(in/out) − 0.5,
//! clamped at the borders. Integer-factor upsampling in the model and the
//! free-size resize in the data pipeline share these tables.

use crate::element::Element;

/// Per-output-index source taps along one axis: (i0, i1, weight of i1).
/// Weight of i0 is 1 − w1, so the two taps always sum to 1.
pub fn bilinear_axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0).min((in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ytaps = bilinear_axis_taps(h, out_h);
    let xtaps = bilinear_axis_taps(w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        let op = &mut out[p * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(1.0 - wy), T::from_f64(wy));
            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(1.0 - wx), T::from_f64(wx));
                let top = wx0 * xp[y0 * w + x0] + wx1 * xp[y0 * w + x1];
                let bot = wx0 * xp[y1 * w + x0] + wx1 * xp[y1 * w + x1];
                op[oy * out_w + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Element>(
    d_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let ytaps = bilinear_axis_taps(h, out_h);
    let xtaps = bilinear_axis_taps(w, out_w);
    for p in 0..planes {
        let gp = &d_out[p * out_h * out_w..][..out_h * out_w];
        let dp = &mut dx[p * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(1.0 - wy), T::from_f64(wy));
            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(1.0 - wx), T::from_f64(wx));
                let g = gp[oy * out_w + ox];
                dp[y0 * w + x0] += wy0 * wx0 * g;
                dp[y0 * w + x1] += wy0 * wx1 * g;
                dp[y1 * w + x0] += wy1 * wx0 * g;
                dp[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
}

/// Nearest-neighbor resize; keeps masks binary. Tap rule: floor of the
/// center-mapped source coordinate, clamped to the valid range.
pub fn nearest_resize<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ytap: Vec<usize> = nearest_axis_taps(h, out_h);
    let xtap: Vec<usize> = nearest_axis_taps(w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        let op = &mut out[p * out_h * out_w..][..out_h * out_w];
        for (oy, &iy) in ytap.iter().enumerate() {
            for (ox, &ix) in xtap.iter().enumerate() {
                op[oy * out_w + ox] = xp[iy * w + ix];
            }
        }
    }
    out
}

fn nearest_axis_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}
