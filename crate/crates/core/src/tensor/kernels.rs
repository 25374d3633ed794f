//! Raw slice kernels shared by the tape ops and the tape-free fixed CNN path.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static CONV_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of convolution forward executions since process start.
pub fn conv_calls() -> u64 {
    CONV_CALLS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
    batched: bool,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > input {
                return Err(Error::shape(format!(
                    "kernel extent {k} exceeds input extent {input} under valid padding"
                )));
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (batched, batch, in_h, in_w, cin) = match *x {
            [h, w, c] => (false, 1, h, w, c),
            [b, h, w, c] => (true, b, h, w, c),
            _ => return Err(Error::shape(format!("conv2d input must be HxWxC or BxHxWxC, got {x:?}"))),
        };
        let [kh, kw, kc, cout] = *k else {
            return Err(Error::shape(format!("conv2d kernel must be KxKxCinxCout, got {k:?}")));
        };
        if kc != cin {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        let (out_h, pad_top) = out_extent(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = out_extent(in_w, kw, stride, padding)?;
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
            batched,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.out_h, self.out_w, self.cout]
        } else {
            vec![self.out_h, self.out_w, self.cout]
        }
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad_top).filter(|&y| y < self.in_h)
    }

    #[inline]
    fn input_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx).checked_sub(self.pad_left).filter(|&x| x < self.in_w)
    }
}

/// Cross-correlation (no kernel flip), NHWC layout.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    CONV_CALLS.fetch_add(1, Ordering::Relaxed);
    let (ci, co) = (g.cin, g.cout);
    let mut out = vec![0.0; g.batch * g.out_h * g.out_w * co];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_off = ((b * g.out_h + oy) * g.out_w + ox) * co;
                let acc = &mut out[o_off..o_off + co];
                for ky in 0..g.kh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_col(ox, kx) else { continue };
                        let x_off = ((b * g.in_h + iy) * g.in_w + ix) * ci;
                        let k_off = (ky * g.kw + kx) * ci * co;
                        for c in 0..ci {
                            let xv = x[x_off + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[k_off + c * co..k_off + (c + 1) * co];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and/or kernel gradients for [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (ci, co) = (g.cin, g.cout);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_off = ((b * g.out_h + oy) * g.out_w + ox) * co;
                let go = &dout[o_off..o_off + co];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_col(ox, kx) else { continue };
                        let x_off = ((b * g.in_h + iy) * g.in_w + ix) * ci;
                        let k_off = (ky * g.kw + kx) * ci * co;
                        for c in 0..ci {
                            let row = k_off + c * co..k_off + (c + 1) * co;
                            if let Some(dx) = dx.as_deref_mut() {
                                let s: f64 = k[row.clone()].iter().zip(go).map(|(a, b)| a * b).sum();
                                dx[x_off + c] += s;
                            }
                            if let Some(dk) = dk.as_deref_mut() {
                                let xv = x[x_off + c];
                                if xv != 0.0 {
                                    for (d, &gv) in dk[row].iter_mut().zip(go) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Spatial layout of a pooled map: (batch, positions per map, channels).
pub(crate) fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    match *shape {
        [h, w, c] => Ok((1, h * w, c, vec![c])),
        [b, h, w, c] => Ok((b, h * w, c, vec![b, c])),
        _ => Err(Error::shape(format!(
            "global pooling needs HxWxC or BxHxWxC, got {shape:?}"
        ))),
    }
}

/// Global pooling; for max, also returns the flat argmax index per output
/// (first occurrence in row-major order on ties).
pub(crate) fn global_pool(kind: PoolKind, x: &[f64], batch: usize, hw: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; batch * c];
    let mut arg = Vec::new();
    match kind {
        PoolKind::Avg => {
            for b in 0..batch {
                let o = &mut out[b * c..(b + 1) * c];
                for p in 0..hw {
                    let off = (b * hw + p) * c;
                    for (acc, v) in o.iter_mut().zip(&x[off..off + c]) {
                        *acc += v;
                    }
                }
                let inv = 1.0 / hw as f64;
                o.iter_mut().for_each(|v| *v *= inv);
            }
        }
        PoolKind::Max => {
            arg = vec![0; batch * c];
            for b in 0..batch {
                for ch in 0..c {
                    let mut best = b * hw * c + ch;
                    for p in 1..hw {
                        let idx = (b * hw + p) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out[b * c + ch] = x[best];
                    arg[b * c + ch] = best;
                }
            }
        }
    }
    (out, arg)
}
