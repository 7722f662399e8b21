use crate::error::{shape_err, Result};

use super::{Real, Tensor};

fn out_dims<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(shape_err!("pool window {k}/{stride} on {:?}", x.shape()));
    }
    Ok((n, c, h, w, (h - k) / stride + 1, (w - k) / stride + 1))
}

/// Max pooling; returns the output and the flat input index chosen for each output
/// (first maximum in row-major window order).
pub fn max_pool<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w, ho, wo) = out_dims(x, k, stride)?;
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + i * stride * w + j * stride;
                for u in 0..k {
                    for v in 0..k {
                        let idx = base + (i * stride + u) * w + j * stride + v;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                let o = (nc * ho + i) * wo + j;
                y.data_mut()[o] = x.data()[best];
                arg[o] = best;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool_backward<T: Real>(
    dy: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if dy.len() != argmax.len() {
        return Err(shape_err!(
            "max_pool dy has {} values, {} recorded",
            dy.len(),
            argmax.len()
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&d, &a) in dy.data().iter().zip(argmax) {
        dx.data_mut()[a] += d;
    }
    Ok(dx)
}

pub fn avg_pool<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, ho, wo) = out_dims(x, k, stride)?;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut s = T::zero();
                for u in 0..k {
                    for v in 0..k {
                        s += x.data()[base + (i * stride + u) * w + j * stride + v];
                    }
                }
                y.data_mut()[(nc * ho + i) * wo + j] = s * inv;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_backward<T: Real>(
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let (_, _, h, w) = dx.dims4()?;
    let (n, c, ho, wo) = dy.dims4()?;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let g = dy.data()[(nc * ho + i) * wo + j] * inv;
                for u in 0..k {
                    for v in 0..k {
                        dx.data_mut()[base + (i * stride + u) * w + j * stride + v] += g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over the spatial plane: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    let data = (0..n * c)
        .map(|nc| {
            let s: f64 = x.data()[nc * plane..(nc + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum();
            T::from_f64c(s * inv)
        })
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(
    dy: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let (n, c, h, w) = dx.dims4()?;
    if dy.shape() != [n, c] {
        return Err(shape_err!(
            "global pool dy {:?} for input {:?}",
            dy.shape(),
            input_shape
        ));
    }
    let plane = h * w;
    let inv = T::from_f64c(1.0 / plane as f64);
    for nc in 0..n * c {
        let g = dy.data()[nc] * inv;
        dx.data_mut()[nc * plane..(nc + 1) * plane].fill(g);
    }
    Ok(dx)
}
