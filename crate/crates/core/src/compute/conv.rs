//! 2-D convolution over NCHW tensors with OIkk weights.
//!
//! Every output element is accumulated from `+0` in ascending `(input channel,
//! kernel row, kernel column)` order, which is the order of the naive seven-loop
//! definition. Padded taps contribute an exact `±0` and so never change the sum;
//! results are therefore bit-identical to the naive loop. The im2col layout below
//! only changes how the loops are nested, not the per-element order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

use super::{axpy, dot, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            groups,
        }
    }

    /// Output spatial size for input size `n` and kernel `k`.
    pub fn out_size(&self, n: usize, k: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if self.stride == 0 || padded < k {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

struct Plan {
    n: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Plan {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Plan> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, ci, kh, kw) = w.dims4()?;
        if g.stride == 0 || g.groups == 0 {
            return Err(shape_err!("conv stride and groups must be >= 1"));
        }
        if kh != kw {
            return Err(shape_err!("non-square kernel {kh}x{kw}"));
        }
        if c % g.groups != 0 || o % g.groups != 0 || ci != c / g.groups {
            return Err(shape_err!(
                "conv input {:?} incompatible with weight {:?} (groups {})",
                x.shape(),
                w.shape(),
                g.groups
            ));
        }
        let ho = g.out_size(h, kh).filter(|&v| v >= 1);
        let wo = g.out_size(wd, kw).filter(|&v| v >= 1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err!(
                "conv output would be empty for input {:?}, kernel {kh}",
                x.shape()
            ));
        };
        Ok(Plan {
            n,
            h,
            w: wd,
            o,
            k: kh,
            ho,
            wo,
            cin_g: ci,
            cout_g: o / g.groups,
        })
    }

    fn rows(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    fn direct(&self, g: ConvGeom) -> bool {
        self.k == 1 && g.stride == 1 && g.pad == 0
    }
}

/// Unfolds input channels `[c0, c0 + cin_g)` of one sample into `cols[r][p]`.
fn im2col<T: Real>(xs: &[T], p: &Plan, g: ConvGeom, c0: usize, cols: &mut [T]) {
    let (k, s, pad) = (p.k, g.stride, g.pad as isize);
    let po = p.plane_out();
    let mut r = 0;
    for c in 0..p.cin_g {
        let plane = &xs[(c0 + c) * p.h * p.w..(c0 + c + 1) * p.h * p.w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[r * po..(r + 1) * po];
                for i in 0..p.ho {
                    let ih = (i * s + u) as isize - pad;
                    let out = &mut row[i * p.wo..(i + 1) * p.wo];
                    if ih < 0 || ih >= p.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * p.w..(ih as usize + 1) * p.w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let iw = (j * s + v) as isize - pad;
                        *o = if iw < 0 || iw >= p.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Adds `cols[r][p]` back onto the input planes (adjoint of [`im2col`]).
fn col2im<T: Real>(cols: &[T], p: &Plan, g: ConvGeom, c0: usize, dxs: &mut [T]) {
    let (k, s, pad) = (p.k, g.stride, g.pad as isize);
    let po = p.plane_out();
    let mut r = 0;
    for c in 0..p.cin_g {
        let plane = &mut dxs[(c0 + c) * p.h * p.w..(c0 + c + 1) * p.h * p.w];
        for u in 0..k {
            for v in 0..k {
                let row = &cols[r * po..(r + 1) * po];
                for i in 0..p.ho {
                    let ih = (i * s + u) as isize - pad;
                    if ih < 0 || ih >= p.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * p.w..(ih as usize + 1) * p.w];
                    for j in 0..p.wo {
                        let iw = (j * s + v) as isize - pad;
                        if iw >= 0 && iw < p.w as isize {
                            dst[iw as usize] += row[i * p.wo + j];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// `y[o] = sum_r w[o][r] * cols[r]` for a block of output planes, r ascending.
fn gemm_rows<T: Real>(wrows: &[T], rows: usize, cols: &[T], po: usize, ys: &mut [T]) {
    let nout = ys.len() / po;
    let mut o = 0;
    while o + 4 <= nout {
        let (y0, rest) = ys[o * po..(o + 4) * po].split_at_mut(po);
        let (y1, rest) = rest.split_at_mut(po);
        let (y2, y3) = rest.split_at_mut(po);
        for r in 0..rows {
            let w0 = wrows[o * rows + r];
            let w1 = wrows[(o + 1) * rows + r];
            let w2 = wrows[(o + 2) * rows + r];
            let w3 = wrows[(o + 3) * rows + r];
            let col = &cols[r * po..(r + 1) * po];
            for (p, &cv) in col.iter().enumerate() {
                y0[p] += w0 * cv;
                y1[p] += w1 * cv;
                y2[p] += w2 * cv;
                y3[p] += w3 * cv;
            }
        }
        o += 4;
    }
    while o < nout {
        let y = &mut ys[o * po..(o + 1) * po];
        for r in 0..rows {
            axpy(wrows[o * rows + r], &cols[r * po..(r + 1) * po], y);
        }
        o += 1;
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> Result<Tensor<T>> {
    let p = Plan::new(x, w, geom)?;
    let po = p.plane_out();
    let rows = p.rows();
    let mut y = Tensor::zeros(&[p.n, p.o, p.ho, p.wo]);
    let mut cols = if p.direct(geom) {
        Vec::new()
    } else {
        vec![T::zero(); rows * po]
    };
    for b in 0..p.n {
        let xs = x.outer(b);
        let ys = y.outer_mut(b);
        for g in 0..geom.groups {
            let c0 = g * p.cin_g;
            let o0 = g * p.cout_g;
            let wrows = &w.data()[o0 * rows..(o0 + p.cout_g) * rows];
            let ysg = &mut ys[o0 * po..(o0 + p.cout_g) * po];
            if p.direct(geom) {
                gemm_rows(wrows, rows, &xs[c0 * po..(c0 + p.cin_g) * po], po, ysg);
            } else {
                im2col(xs, &p, geom, c0, &mut cols);
                gemm_rows(wrows, rows, &cols, po, ysg);
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`]. `dx` accumulates over output channels in ascending order;
/// `dw` sums per-sample [`dot`] products in ascending sample order.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let p = Plan::new(x, w, geom)?;
    if dy.shape() != [p.n, p.o, p.ho, p.wo] {
        return Err(shape_err!(
            "conv dy {:?} does not match output [{}, {}, {}, {}]",
            dy.shape(),
            p.n,
            p.o,
            p.ho,
            p.wo
        ));
    }
    let po = p.plane_out();
    let rows = p.rows();
    let direct = p.direct(geom);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![T::zero(); if direct { 0 } else { rows * po }];
    let mut dcols = vec![T::zero(); rows * po];
    for b in 0..p.n {
        let xs = x.outer(b);
        let dys = dy.outer(b);
        for g in 0..geom.groups {
            let c0 = g * p.cin_g;
            let o0 = g * p.cout_g;
            let dyg = &dys[o0 * po..(o0 + p.cout_g) * po];
            if let Some(dw) = dw.as_mut() {
                let colref: &[T] = if direct {
                    &xs[c0 * po..(c0 + p.cin_g) * po]
                } else {
                    im2col(xs, &p, geom, c0, &mut cols);
                    &cols
                };
                let dwg = &mut dw.data_mut()[o0 * rows..(o0 + p.cout_g) * rows];
                for o in 0..p.cout_g {
                    let dyo = &dyg[o * po..(o + 1) * po];
                    for r in 0..rows {
                        dwg[o * rows + r] += dot(dyo, &colref[r * po..(r + 1) * po]);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[o0 * rows..(o0 + p.cout_g) * rows];
                dcols.fill(T::zero());
                for r in 0..rows {
                    let dcol = &mut dcols[r * po..(r + 1) * po];
                    for o in 0..p.cout_g {
                        axpy(wg[o * rows + r], &dyg[o * po..(o + 1) * po], dcol);
                    }
                }
                let dxs = dx.outer_mut(b);
                if direct {
                    // 1x1 stride-1 unpadded: columns are the input planes themselves.
                    for (d, &v) in dxs[c0 * po..(c0 + p.cin_g) * po].iter_mut().zip(&dcols) {
                        *d += v;
                    }
                } else {
                    col2im(&dcols, &p, geom, c0, dxs);
                }
            }
        }
    }
    Ok((dx, dw))
}
