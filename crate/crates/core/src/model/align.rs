//! Channel index maps and zero-padding alignment.
//!
//! Every activation in a pruned network carries a sorted list of the original
//! channel indices it still holds. Adding two activations scatters each operand
//! into the union of their maps, which is the same as padding both to full width
//! with zeros and summing.

use crate::compute::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Sorted union of two sorted index lists.
pub(crate) fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Position of each element of `sub` inside the sorted `map`.
pub(crate) fn positions(map: &[usize], sub: &[usize]) -> Result<Vec<usize>> {
    sub.iter()
        .map(|v| {
            map.binary_search(v)
                .map_err(|_| shape_err!("channel {v} missing from index map"))
        })
        .collect()
}

/// Checks that `map` holds distinct indices below `width`.
pub(crate) fn check_map(map: &[usize], width: usize) -> Result<()> {
    let mut seen = vec![false; width];
    for &i in map {
        if i >= width {
            return Err(Error::InvalidArgument(format!(
                "channel index {i} outside original width {width}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "duplicate channel index {i}"
            )));
        }
    }
    Ok(())
}

/// `dst[:, pos[k]] += src[:, k]`.
pub(crate) fn scatter_add<T: Real>(
    dst: &mut Tensor<T>,
    src: &Tensor<T>,
    pos: &[usize],
) -> Result<()> {
    let (n, c, h, w) = dst.dims4()?;
    let (sn, sc, sh, sw) = src.dims4()?;
    if (sn, sh, sw) != (n, h, w) || sc != pos.len() {
        return Err(shape_err!(
            "scatter {:?} into {:?} at {} positions",
            src.shape(),
            dst.shape(),
            pos.len()
        ));
    }
    let plane = h * w;
    for b in 0..n {
        for (k, &p) in pos.iter().enumerate() {
            if p >= c {
                return Err(shape_err!("scatter position {p} outside {c} channels"));
            }
            let s = &src.data()[(b * sc + k) * plane..(b * sc + k + 1) * plane];
            let d = &mut dst.data_mut()[(b * c + p) * plane..(b * c + p + 1) * plane];
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv += sv;
            }
        }
    }
    Ok(())
}

/// `x[:, :, ::stride, ::stride]`.
pub(crate) fn subsample<T: Real>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let yd = y.data_mut();
    for nc in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                yd[(nc * ho + i) * wo + j] = x.data()[(nc * h + i * stride) * w + j * stride];
            }
        }
    }
    Ok(y)
}

pub(crate) fn subsample_backward<T: Real>(
    dy: &Tensor<T>,
    stride: usize,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if stride == 1 {
        return Ok(dy.clone());
    }
    let (n, c, ho, wo) = dy.dims4()?;
    let mut dx = Tensor::zeros(input_shape);
    let (_, _, h, w) = dx.dims4()?;
    if (n, c) != (input_shape[0], input_shape[1])
        || ho != h.div_ceil(stride)
        || wo != w.div_ceil(stride)
    {
        return Err(shape_err!(
            "subsample dy {:?} vs input {:?}",
            dy.shape(),
            input_shape
        ));
    }
    let dxd = dx.data_mut();
    for nc in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                dxd[(nc * h + i * stride) * w + j * stride] = dy.data()[(nc * ho + i) * wo + j];
            }
        }
    }
    Ok(dx)
}

/// Expands both operands to `width` channels, zero at indices they do not carry,
/// and sums them. `x_map[k]` is the original index of channel `k` of `x`.
pub fn residual_align<T: Real>(
    x: &Tensor<T>,
    x_map: &[usize],
    skip: &Tensor<T>,
    skip_map: &[usize],
    width: usize,
) -> Result<Tensor<T>> {
    check_map(x_map, width)?;
    check_map(skip_map, width)?;
    let (n, _, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, width, h, w]);
    scatter_add(&mut out, x, x_map)?;
    scatter_add(&mut out, skip, skip_map)?;
    Ok(out)
}
