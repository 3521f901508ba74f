use super::{dims4, FeatureMap, Real, Tensor};
use crate::error::{Error, Result};

/// Depthwise 2-D convolution with "same" zero padding.
///
/// `kernels` is `[C, k, k]` with odd `k`; channel `c` of the output only
/// sees channel `c` of the input and kernel `c`.
pub fn dwconv2d<T: Real>(x: &FeatureMap<T>, kernels: &Tensor<T>) -> Result<FeatureMap<T>> {
    let out = dwconv2d_forward(x.tensor(), kernels)?;
    FeatureMap::new(out)
}

fn check_kernel(x_shape: &[usize], k_shape: &[usize]) -> Result<usize> {
    let (_, _, _, c) = dims4(x_shape, "dwconv2d")?;
    match *k_shape {
        [kc, kh, kw] if kc == c && kh == kw && kh % 2 == 1 => Ok(kh),
        [kc, kh, kw] if kc == c && kh == kw => {
            Err(Error::contract("dwconv2d", format!("kernel size {kh} must be odd")))
        }
        _ => Err(Error::dim("dwconv2d", x_shape, k_shape)),
    }
}

/// `[C, k, k]` -> `[k, k, C]` so the channel loop is contiguous.
fn taps_last<T: Real>(k: &[T], c: usize, ks: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k.len()];
    for ch in 0..c {
        for t in 0..ks * ks {
            out[t * c + ch] = k[ch * ks * ks + t];
        }
    }
    out
}

pub(crate) fn dwconv2d_forward<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let ks = check_kernel(x.shape(), kernels.shape())?;
    let (b, h, w, c) = dims4(x.shape(), "dwconv2d")?;
    let r = ks / 2;
    let taps = taps_last(kernels.data(), c, ks);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        let base = bi * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[base + (i * w + j) * c..][..c];
                for di in 0..ks {
                    let Some(ii) = (i + di).checked_sub(r).filter(|&v| v < h) else {
                        continue;
                    };
                    for dj in 0..ks {
                        let Some(jj) = (j + dj).checked_sub(r).filter(|&v| v < w) else {
                            continue;
                        };
                        let xr = &xd[base + (ii * w + jj) * c..][..c];
                        let kr = &taps[(di * ks + dj) * c..][..c];
                        for ((ov, &xv), &kv) in o.iter_mut().zip(xr).zip(kr) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Returns `(grad_x, grad_kernels)` for upstream gradient `gy`.
pub(crate) fn dwconv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ks = check_kernel(x.shape(), kernels.shape())?;
    let (b, h, w, c) = dims4(x.shape(), "dwconv2d")?;
    let r = ks / 2;
    let taps = taps_last(kernels.data(), c, ks);
    let (xd, gd) = (x.data(), gy.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gtaps = vec![T::zero(); taps.len()];
    for bi in 0..b {
        let base = bi * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let g = &gd[base + (i * w + j) * c..][..c];
                for di in 0..ks {
                    let Some(ii) = (i + di).checked_sub(r).filter(|&v| v < h) else {
                        continue;
                    };
                    for dj in 0..ks {
                        let Some(jj) = (j + dj).checked_sub(r).filter(|&v| v < w) else {
                            continue;
                        };
                        let off = base + (ii * w + jj) * c;
                        let t = (di * ks + dj) * c;
                        for ch in 0..c {
                            gx[off + ch] += g[ch] * taps[t + ch];
                            gtaps[t + ch] += g[ch] * xd[off + ch];
                        }
                    }
                }
            }
        }
    }
    let mut gk = vec![T::zero(); kernels.len()];
    for ch in 0..c {
        for t in 0..ks * ks {
            gk[ch * ks * ks + t] = gtaps[t * c + ch];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(kernels.shape().to_vec(), gk),
    ))
}

/// Mean over `H × W` per channel: `[B, H, W, C]` -> `[B, C]`.
pub fn global_avg_pool<T: Real>(x: &FeatureMap<T>) -> Tensor<T> {
    pool_forward(x.tensor()).expect("feature map is rank 4")
}

pub(crate) fn pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = dims4(x.shape(), "global_avg_pool")?;
    let n = T::of((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for (bi, o) in out.chunks_exact_mut(c).enumerate() {
        for row in x.data()[bi * h * w * c..][..h * w * c].chunks_exact(c) {
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov += v;
            }
        }
        for ov in o.iter_mut() {
            *ov /= n;
        }
    }
    Ok(Tensor::from_parts(vec![b, c], out))
}

/// Non-overlapping `f × f` patch merge: `[B, H, W, C]` -> `[B, H/f, W/f, f·f·C]`.
///
/// Output channel `(di·f + dj)·C + c` holds input `(f·i + di, f·j + dj, c)`.
pub fn space_to_depth<T: Real>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = dims4(x.shape(), "space_to_depth")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::contract(
            "space_to_depth",
            format!("spatial extents {h}x{w} must be divisible by {f}"),
        ));
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    let mut o = 0;
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                for di in 0..f {
                    for dj in 0..f {
                        let src = ((bi * h + f * i + di) * w + f * j + dj) * c;
                        out[o..o + c].copy_from_slice(&xd[src..src + c]);
                        o += c;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, ho, wo, f * f * c], out))
}

pub(crate) fn space_to_depth_backward<T: Real>(gy: &Tensor<T>, in_shape: &[usize], f: usize) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / f, w / f);
    let mut gx = vec![T::zero(); gy.len()];
    let gd = gy.data();
    let mut o = 0;
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                for di in 0..f {
                    for dj in 0..f {
                        let dst = ((bi * h + f * i + di) * w + f * j + dj) * c;
                        gx[dst..dst + c].copy_from_slice(&gd[o..o + c]);
                        o += c;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}
