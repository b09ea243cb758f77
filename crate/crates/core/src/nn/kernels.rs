//! Batched NCHW kernels on flat buffers. Forward functions return whatever
//! the matching backward function needs.

use crate::tensor::{gemm, Element, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unrolled patch matrix: `in_c * kh * kw`.
    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

/// Unrolls one sample `[in_c, in_h, in_w]` into `[patch, out_h * out_w]`.
fn im2col<E: Element>(g: &ConvGeom, x: &[E], cols: &mut [E]) {
    let p = g.out_hw();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `[patch, out_h * out_w]` back into one sample's input gradient.
fn col2im<E: Element>(g: &ConvGeom, cols: &[E], dx: &mut [E]) {
    let p = g.out_hw();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, cols)`; `cols` holds every sample's patch matrix back to back.
pub(crate) fn conv_forward<E: Element>(
    g: &ConvGeom,
    x: &[E],
    weight: &[E],
    bias: &[E],
    keep_cols: bool,
) -> (Vec<E>, Vec<E>) {
    let (k, p) = (g.patch(), g.out_hw());
    let mut out = vec![E::zero(); g.batch * g.out_c * p];
    let mut cols = vec![E::zero(); if keep_cols { g.batch * k * p } else { k * p }];
    for b in 0..g.batch {
        let c = if keep_cols {
            &mut cols[b * k * p..(b + 1) * k * p]
        } else {
            &mut cols[..]
        };
        im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], c);
        let y = &mut out[b * g.out_c * p..(b + 1) * g.out_c * p];
        for (o, row) in y.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(g.out_c, k, p, weight, Trans::No, c, Trans::No, E::one(), y);
    }
    (out, if keep_cols { cols } else { Vec::new() })
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward<E: Element>(
    g: &ConvGeom,
    cols: &[E],
    weight: &[E],
    dy: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (k, p) = (g.patch(), g.out_hw());
    let mut dw = vec![E::zero(); g.out_c * k];
    let mut db = vec![E::zero(); g.out_c];
    let mut dx = vec![E::zero(); g.batch * g.in_len()];
    let mut dcols = vec![E::zero(); k * p];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_c * p..(b + 1) * g.out_c * p];
        let cb = &cols[b * k * p..(b + 1) * k * p];
        for (o, row) in dyb.chunks_exact(p).enumerate() {
            db[o] += row.iter().copied().sum::<E>();
        }
        gemm(g.out_c, p, k, dyb, Trans::No, cb, Trans::Yes, E::one(), &mut dw);
        gemm(k, g.out_c, p, weight, Trans::Yes, dyb, Trans::No, E::zero(), &mut dcols);
        col2im(g, &dcols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; ties go to the first element in row-major window order.
/// Returns the output and, per output element, the flat input index it came from.
pub(crate) fn maxpool_forward<E: Element>(g: &PoolGeom, x: &[E]) -> (Vec<E>, Vec<u32>) {
    let n = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for pl in 0..g.planes {
        let base = pl * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = base + oy * g.stride * g.in_w + ox * g.stride;
                let mut best = x[best_idx];
                for wy in 0..g.window {
                    for wx in 0..g.window {
                        let idx = base + (oy * g.stride + wy) * g.in_w + ox * g.stride + wx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward<E: Element>(in_len: usize, argmax: &[u32], dy: &[E]) -> Vec<E> {
    let mut dx = vec![E::zero(); in_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}

/// Batch-norm statistics for one channel-major batch.
pub(crate) struct BnForward<E> {
    pub out: Vec<E>,
    pub xhat: Vec<E>,
    pub inv_std: Vec<E>,
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// `x` is `[batch, channels, spatial]`. With `stats = None` the batch statistics
/// are computed; otherwise the given `(mean, var)` are used.
pub(crate) fn batchnorm_forward<E: Element>(
    x: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
    gain: &[E],
    shift: &[E],
    eps: E,
    stats: Option<(&[E], &[E])>,
) -> BnForward<E> {
    let count = E::from_f64((batch * spatial) as f64);
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![E::zero(); channels];
            let mut var = vec![E::zero(); channels];
            for c in 0..channels {
                let mut s = E::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    s += x[off..off + spatial].iter().copied().sum::<E>();
                }
                let m = s / count;
                let mut ss = E::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    ss += x[off..off + spatial].iter().map(|&v| (v - m) * (v - m)).sum::<E>();
                }
                mean[c] = m;
                var[c] = ss / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let mut out = vec![E::zero(); x.len()];
    let mut xhat = vec![E::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gain[c] * h + shift[c];
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Training-mode batch-norm backward. Returns `(dx, dgain, dshift)`.
pub(crate) fn batchnorm_backward<E: Element>(
    xhat: &[E],
    inv_std: &[E],
    gain: &[E],
    dy: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let count = E::from_f64((batch * spatial) as f64);
    let mut dgain = vec![E::zero(); channels];
    let mut dshift = vec![E::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                dgain[c] += dy[i] * xhat[i];
                dshift[c] += dy[i];
            }
        }
    }
    let mut dx = vec![E::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            let k = gain[c] * inv_std[c] / count;
            for i in off..off + spatial {
                dx[i] = k * (count * dy[i] - dshift[c] - xhat[i] * dgain[c]);
            }
        }
    }
    (dx, dgain, dshift)
}

/// `y[batch, out] = x[batch, in] * W^T + b` with `W` stored `[out, in]`.
pub(crate) fn linear_forward<E: Element>(
    x: &[E],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[E],
    bias: &[E],
) -> Vec<E> {
    let mut y: Vec<E> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    gemm(batch, in_f, out_f, x, Trans::No, weight, Trans::Yes, E::one(), &mut y);
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn linear_backward<E: Element>(
    x: &[E],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[E],
    dy: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut dw = vec![E::zero(); out_f * in_f];
    gemm(out_f, batch, in_f, dy, Trans::Yes, x, Trans::No, E::zero(), &mut dw);
    let mut dx = vec![E::zero(); batch * in_f];
    gemm(batch, out_f, in_f, dy, Trans::No, weight, Trans::No, E::zero(), &mut dx);
    let mut db = vec![E::zero(); out_f];
    for row in dy.chunks_exact(out_f) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}
