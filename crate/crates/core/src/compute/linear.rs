use crate::error::{shape_err, Result};

use super::{axpy, dot, Real, Tensor};

/// `y = x W^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = x.dims2()?;
    let (out, win) = w.dims2()?;
    if win != fin || b.len() != out {
        return Err(shape_err!(
            "linear x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let mut y = Tensor::zeros(&[n, out]);
    for r in 0..n {
        let xr = x.outer(r);
        let yr = y.outer_mut(r);
        for o in 0..out {
            yr[o] = dot(xr, &w.data()[o * fin..(o + 1) * fin]) + b.data()[o];
        }
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, fin) = x.dims2()?;
    let (out, _) = w.dims2()?;
    if dy.shape() != [n, out] {
        return Err(shape_err!(
            "linear dy {:?}, expected [{n}, {out}]",
            dy.shape()
        ));
    }
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[out]);
    for r in 0..n {
        let dyr = dy.outer(r);
        let xr = x.outer(r);
        for o in 0..out {
            axpy(dyr[o], xr, &mut dw.data_mut()[o * fin..(o + 1) * fin]);
            db.data_mut()[o] += dyr[o];
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        for r in 0..n {
            let dyr = dy.outer(r).to_vec();
            let dxr = dx.outer_mut(r);
            for o in 0..out {
                axpy(dyr[o], &w.data()[o * fin..(o + 1) * fin], dxr);
            }
        }
        dx
    });
    Ok((dx, dw, db))
}
