//! Forward/backward kernels for the tape ops.
//!
//! The convolution loops hoist the padding bounds out of the inner loop:
//! for each kernel tap the valid output range is computed once, so the
//! innermost loop is a branch-free multiply-add over contiguous rows. Per
//! output element the accumulation order is bias first, then ascending
//! (in-channel, kh, kw) — the same order as the naive six-loop reference,
//! so the two agree bit-for-bit.

use crate::error::{CoreError, Result};

use super::tape::LOG_CLAMP;
use super::Tensor;

pub(crate) fn zip_same_shape(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(CoreError::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    let av = a.values();
    let bv = b.values();
    Ok(av.iter().zip(bv.iter()).map(|(x, y)| f(*x, *y)).collect())
}

/// Validated geometry for one conv2d application.
pub(crate) struct ConvArgs {
    pub x: Tensor,
    pub w: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub win: usize,
    pub c_out: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvArgs {
    pub fn new(
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(CoreError::invalid(
                "conv2d stride and dilation must be positive".to_string(),
            ));
        }
        let (n, c_in, h, win) = x.dims4()?;
        let (c_out, w_in, k, k2) = w.dims4()?;
        if k != k2 {
            return Err(CoreError::invalid(format!(
                "conv2d kernel must be square, got {}x{}",
                k, k2
            )));
        }
        if w_in != c_in {
            return Err(CoreError::invalid(format!(
                "conv2d inconsistent channels: input has {}, kernel expects {}",
                c_in, w_in
            )));
        }
        if bias.shape() != vec![c_out] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d bias",
                left: bias.shape(),
                right: vec![c_out],
            });
        }
        let span = dilation * (k - 1) + 1;
        let oh_num = h as i64 + 2 * padding as i64 - span as i64;
        let ow_num = win as i64 + 2 * padding as i64 - span as i64;
        if oh_num < 0 || ow_num < 0 {
            return Err(CoreError::invalid(format!(
                "conv2d output would be empty: input {}x{}, kernel span {}, padding {}",
                h, win, span, padding
            )));
        }
        let oh = oh_num as usize / stride + 1;
        let ow = ow_num as usize / stride + 1;
        Ok(ConvArgs {
            x: x.clone(),
            w: w.clone(),
            bias: bias.clone(),
            stride,
            padding,
            dilation,
            n,
            c_in,
            h,
            win,
            c_out,
            k,
            oh,
            ow,
        })
    }

    /// Valid output index range [lo, hi) for one kernel tap along an axis:
    /// the positions where `o*stride + tap*dilation - padding` lands inside
    /// `[0, extent)`.
    fn tap_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let off = tap as i64 * self.dilation as i64 - self.padding as i64;
        let s = self.stride as i64;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = {
            let max_o = (extent as i64 - 1 - off).div_euclid(s);
            (max_o + 1).clamp(0, out_extent as i64)
        };
        (lo.min(hi) as usize, hi as usize)
    }
}

pub(crate) fn conv2d_forward(a: &ConvArgs) -> (Vec<f64>, Vec<usize>) {
    let xv = a.x.values();
    let wv = a.w.values();
    let bv = a.bias.values();
    let mut out = vec![0.0; a.n * a.c_out * a.oh * a.ow];

    for n in 0..a.n {
        for o in 0..a.c_out {
            let out_plane = &mut out[(n * a.c_out + o) * a.oh * a.ow..][..a.oh * a.ow];
            out_plane.fill(bv[o]);
            for i in 0..a.c_in {
                let x_plane = &xv[(n * a.c_in + i) * a.h * a.win..][..a.h * a.win];
                for kh in 0..a.k {
                    let (oh_lo, oh_hi) = a.tap_range(kh, a.h, a.oh);
                    for kw in 0..a.k {
                        let weight = wv[((o * a.c_in + i) * a.k + kh) * a.k + kw];
                        let (ow_lo, ow_hi) = a.tap_range(kw, a.win, a.ow);
                        let col_off = kw as i64 * a.dilation as i64 - a.padding as i64;
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * a.stride + kh * a.dilation) as i64 - a.padding as i64;
                            let x_row = &x_plane[ih as usize * a.win..][..a.win];
                            let out_row = &mut out_plane[oh * a.ow..][..a.ow];
                            for ow in ow_lo..ow_hi {
                                let iw = (ow * a.stride) as i64 + col_off;
                                out_row[ow] += weight * x_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, vec![a.n, a.c_out, a.oh, a.ow])
}

/// Gradients w.r.t. input, kernel, and bias; each is `None` when the
/// corresponding tensor does not require grad (skipping the input pass for
/// constant images is the big win).
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward(
    a: &ConvArgs,
    gout: &[f64],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let xv = a.x.values();
    let wv = a.w.values();
    let plane = a.oh * a.ow;

    let db = if a.bias.requires_grad() {
        let mut db = vec![0.0; a.c_out];
        for n in 0..a.n {
            for o in 0..a.c_out {
                db[o] += gout[(n * a.c_out + o) * plane..][..plane].iter().sum::<f64>();
            }
        }
        Some(db)
    } else {
        None
    };

    let dw = if a.w.requires_grad() {
        let mut dw = vec![0.0; a.w.numel()];
        for n in 0..a.n {
            for o in 0..a.c_out {
                let g_plane = &gout[(n * a.c_out + o) * plane..][..plane];
                for i in 0..a.c_in {
                    let x_plane = &xv[(n * a.c_in + i) * a.h * a.win..][..a.h * a.win];
                    for kh in 0..a.k {
                        let (oh_lo, oh_hi) = a.tap_range(kh, a.h, a.oh);
                        for kw in 0..a.k {
                            let (ow_lo, ow_hi) = a.tap_range(kw, a.win, a.ow);
                            let col_off = kw as i64 * a.dilation as i64 - a.padding as i64;
                            let mut acc = 0.0;
                            for oh in oh_lo..oh_hi {
                                let ih =
                                    (oh * a.stride + kh * a.dilation) as i64 - a.padding as i64;
                                let x_row = &x_plane[ih as usize * a.win..][..a.win];
                                let g_row = &g_plane[oh * a.ow..][..a.ow];
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * a.stride) as i64 + col_off;
                                    acc += g_row[ow] * x_row[iw as usize];
                                }
                            }
                            dw[((o * a.c_in + i) * a.k + kh) * a.k + kw] += acc;
                        }
                    }
                }
            }
        }
        Some(dw)
    } else {
        None
    };

    let dx = if a.x.requires_grad() {
        let mut dx = vec![0.0; a.x.numel()];
        for n in 0..a.n {
            for o in 0..a.c_out {
                let g_plane = &gout[(n * a.c_out + o) * plane..][..plane];
                for i in 0..a.c_in {
                    let dx_plane = &mut dx[(n * a.c_in + i) * a.h * a.win..][..a.h * a.win];
                    for kh in 0..a.k {
                        let (oh_lo, oh_hi) = a.tap_range(kh, a.h, a.oh);
                        for kw in 0..a.k {
                            let weight = wv[((o * a.c_in + i) * a.k + kh) * a.k + kw];
                            let (ow_lo, ow_hi) = a.tap_range(kw, a.win, a.ow);
                            let col_off = kw as i64 * a.dilation as i64 - a.padding as i64;
                            for oh in oh_lo..oh_hi {
                                let ih =
                                    (oh * a.stride + kh * a.dilation) as i64 - a.padding as i64;
                                let dx_row = &mut dx_plane[ih as usize * a.win..][..a.win];
                                let g_row = &g_plane[oh * a.ow..][..a.ow];
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * a.stride) as i64 + col_off;
                                    dx_row[iw as usize] += weight * g_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw, db)
}

pub(crate) fn max_pool2d_forward(x: &Tensor) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::invalid(format!(
            "max_pool2d requires even spatial extents, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xv = x.values();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + (2 * i) * w + 2 * j;
                let mut best = xv[best_idx];
                // row-major window order; strict > keeps the first tie
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + (2 * j + dj);
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                }
                let o = p * oh * ow + i * ow + j;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, vec![n, c, oh, ow], argmax))
}

/// True when, in every 2x2 pooling window, the max beats every other entry
/// by more than `gap` (so a finite-difference bump cannot change the argmax).
pub(crate) fn pool_windows_separated(x: &Tensor, gap: f64) -> bool {
    let Ok((n, c, h, w)) = x.dims4() else {
        return true;
    };
    let xv = x.values();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let vals = [
                    xv[base + (2 * i) * w + 2 * j],
                    xv[base + (2 * i) * w + 2 * j + 1],
                    xv[base + (2 * i + 1) * w + 2 * j],
                    xv[base + (2 * i + 1) * w + 2 * j + 1],
                ];
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let runner_up = vals
                    .iter()
                    .cloned()
                    .filter(|v| *v < max)
                    .fold(f64::NEG_INFINITY, f64::max);
                let n_max = vals.iter().filter(|v| **v == max).count();
                if n_max > 1 || (runner_up.is_finite() && max - runner_up <= gap) {
                    return false;
                }
            }
        }
    }
    true
}

pub(crate) fn channel_softmax_forward(x: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4()?;
    if c < 2 {
        return Err(CoreError::invalid(format!(
            "channel softmax needs at least 2 channels, got {}",
            c
        )));
    }
    let xv = x.values();
    let plane = h * w;
    let mut out = vec![0.0; xv.len()];
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| xv[(b * c + ch) * plane + p];
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (at(ch) - m).exp();
                out[(b * c + ch) * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[(b * c + ch) * plane + p] /= z;
            }
        }
    }
    Ok(out)
}

pub(crate) fn channel_softmax_backward(
    x: &Tensor,
    probs: &[f64],
    gout: &[f64],
) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut dx = vec![0.0; probs.len()];
    for b in 0..n {
        for p in 0..plane {
            let idx = |ch: usize| (b * c + ch) * plane + p;
            let dot: f64 = (0..c).map(|ch| gout[idx(ch)] * probs[idx(ch)]).sum();
            for ch in 0..c {
                dx[idx(ch)] = probs[idx(ch)] * (gout[idx(ch)] - dot);
            }
        }
    }
    Ok(dx)
}

fn check_prob_entry(
    c: usize,
    h: usize,
    w: usize,
    (i, j, cls): (usize, usize, u8),
) -> Result<()> {
    if i >= h || j >= w || cls as usize >= c {
        return Err(CoreError::invalid(format!(
            "label ({}, {}, class {}) outside field bounds {}x{} with {} classes",
            i, j, cls, h, w, c
        )));
    }
    Ok(())
}

pub(crate) fn nll_sparse_forward(probs: &Tensor, entries: &[(usize, usize, u8)]) -> Result<f64> {
    let (n, c, h, w) = probs.dims4()?;
    if n != 1 {
        return Err(CoreError::invalid(
            "nll ops expect a single-image (1,C,H,W) posterior".to_string(),
        ));
    }
    let pv = probs.values();
    let mut total = 0.0;
    for &entry in entries {
        check_prob_entry(c, h, w, entry)?;
        let (i, j, cls) = entry;
        let p = pv[(cls as usize * h + i) * w + j];
        total += -(p.max(LOG_CLAMP)).ln();
    }
    Ok(total)
}

pub(crate) fn nll_dense_forward(probs: &Tensor, targets: &[u8]) -> Result<f64> {
    let (n, c, h, w) = probs.dims4()?;
    if n != 1 {
        return Err(CoreError::invalid(
            "nll ops expect a single-image (1,C,H,W) posterior".to_string(),
        ));
    }
    if targets.len() != h * w {
        return Err(CoreError::invalid(format!(
            "dense targets length {} does not cover {}x{} field",
            targets.len(),
            h,
            w
        )));
    }
    let pv = probs.values();
    let mut total = 0.0;
    for (pix, &cls) in targets.iter().enumerate() {
        if cls as usize >= c {
            return Err(CoreError::invalid(format!(
                "dense target class {} out of range ({} classes)",
                cls, c
            )));
        }
        let p = pv[cls as usize * h * w + pix];
        total += -(p.max(LOG_CLAMP)).ln();
    }
    Ok(total)
}

/// Shared backward for both NLL ops: d/dp of -ln(max(p, clamp)) is -1/p
/// above the clamp and 0 inside it.
pub(crate) fn nll_backward(
    probs: &Tensor,
    entries: impl Iterator<Item = (usize, usize, u8)>,
    gout: f64,
) -> Vec<f64> {
    let (_, _, h, w) = probs.dims4().expect("shape validated at record");
    let pv = probs.values();
    let mut dp = vec![0.0; pv.len()];
    for (i, j, cls) in entries {
        let idx = (cls as usize * h + i) * w + j;
        let p = pv[idx];
        if p >= LOG_CLAMP {
            dp[idx] += gout * (-1.0 / p);
        }
    }
    dp
}
