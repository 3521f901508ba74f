use super::{Real, Tensor};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `ln(1 + e^x)`, evaluated without overflow for large `x`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

impl<T: Real> Tensor<T> {
    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn silu(&self) -> Self {
        self.map(silu)
    }

    pub fn softplus(&self) -> Self {
        self.map(softplus)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }
}

/// Softmax along `axis`, stabilised by subtracting the maximum.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::contract(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    x.ensure_finite("softmax")?;
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer = x.len() / (n * inner);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| out[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..n {
                let e = (out[idx(k)] - m).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[idx(k)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalises every row over the last axis, then applies `gamma`, `beta`.
pub fn layernorm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    Ok(layernorm_forward(x, gamma, beta, eps)?.0)
}

pub(crate) fn layernorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let (rows, c) = x.rows_cols();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("layernorm", x.shape(), gamma.shape()));
    }
    if eps <= T::zero() {
        return Err(Error::contract("layernorm", "eps must be positive"));
    }
    let n = T::of(c as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for ((xr, or), hr) in x
        .data()
        .chunks_exact(c)
        .zip(out.chunks_exact_mut(c))
        .zip(xhat.chunks_exact_mut(c))
    {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for k in 0..c {
            hr[k] = (xr[k] - mean) * r;
            or[k] = gamma.data()[k] * hr[k] + beta.data()[k];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormSaved { xhat, rstd },
    ))
}

/// Returns `(gx, ggamma, gbeta)`.
pub(crate) fn layernorm_backward<T: Real>(
    saved: &LayerNormSaved<T>,
    gamma: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let n = T::of(c as f64);
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut gxhat = vec![T::zero(); c];
    for (row, ((g, h), out)) in gy
        .chunks_exact(c)
        .zip(saved.xhat.chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
        .enumerate()
    {
        let mut mean_g = T::zero();
        let mut mean_gh = T::zero();
        for k in 0..c {
            gg[k] += g[k] * h[k];
            gb[k] += g[k];
            gxhat[k] = g[k] * gamma[k];
            mean_g += gxhat[k];
            mean_gh += gxhat[k] * h[k];
        }
        mean_g /= n;
        mean_gh /= n;
        let r = saved.rstd[row];
        for k in 0..c {
            out[k] = r * (gxhat[k] - mean_g - h[k] * mean_gh);
        }
    }
    (gx, gg, gb)
}
