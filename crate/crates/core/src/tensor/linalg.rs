use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Matrix product of `[M, K]` and `[K, P]`.
///
/// Each output element accumulates over `K` left to right starting from zero,
/// so the result is bit-identical to the textbook triple loop.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, p]) = (a.shape(), b.shape()) else {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * p];
    gemm(a.data(), b.data(), m, k, p, &mut out);
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// `out = a · b` with `a: [m, k]`, `b: [k, p]`; `out` is overwritten.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    out.fill(T::zero());
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(p)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(p)) {
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `gx += gy · wᵀ` with `gy: [m, p]`, `w: [k, p]`, `gx: [m, k]`.
pub(crate) fn gemm_bt_acc<T: Real>(gy: &[T], w: &[T], m: usize, k: usize, p: usize, gx: &mut [T]) {
    debug_assert_eq!(gy.len(), m * p);
    debug_assert_eq!(w.len(), k * p);
    debug_assert_eq!(gx.len(), m * k);
    for (g_row, x_row) in gy.chunks_exact(p).zip(gx.chunks_exact_mut(k)) {
        for (xv, w_row) in x_row.iter_mut().zip(w.chunks_exact(p)) {
            let mut acc = T::zero();
            for (&g, &wv) in g_row.iter().zip(w_row) {
                acc += g * wv;
            }
            *xv += acc;
        }
    }
}

/// `gw += xᵀ · gy` with `x: [m, k]`, `gy: [m, p]`, `gw: [k, p]`.
pub(crate) fn gemm_at_acc<T: Real>(x: &[T], gy: &[T], m: usize, k: usize, p: usize, gw: &mut [T]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(gy.len(), m * p);
    debug_assert_eq!(gw.len(), k * p);
    for (x_row, g_row) in x.chunks_exact(k).zip(gy.chunks_exact(p)) {
        for (&xv, w_row) in x_row.iter().zip(gw.chunks_exact_mut(p)) {
            if xv == T::zero() {
                continue;
            }
            for (wv, &g) in w_row.iter_mut().zip(g_row) {
                *wv += xv * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * p + j];
                }
                out[i * p + j] = s;
            }
        }
        Tensor::new([m, p], out).unwrap()
    }

    #[test]
    fn identity_and_dot() {
        let eye = Tensor::<f64>::new([2, 2], vec![1., 0., 0., 1.]).unwrap();
        let m = Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let row = Tensor::<f64>::new([1, 2], vec![1., 2.]).unwrap();
        let col = Tensor::new([2, 1], vec![3., 4.]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matches_triple_loop_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random([7, 5], &mut rng);
        let b = random([5, 3], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive(&a, &b));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        match matmul(&a, &b).unwrap_err() {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b, c) = (
            random([8, 8], &mut rng),
            random([8, 8], &mut rng),
            random([8, 8], &mut rng),
        );
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            assert!((l - r).abs() <= 1e-10 * l.abs().max(1.0));
        }

        let (a32, b32, c32) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
        let left = matmul(&matmul(&a32, &b32).unwrap(), &c32).unwrap();
        let right = matmul(&a32, &matmul(&b32, &c32).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            assert!((l - r).abs() <= 1e-5 * l.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_kernels_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([4, 3], &mut rng);
        let w = random([3, 5], &mut rng);
        let gy = random([4, 5], &mut rng);

        let mut gx = vec![0.0; 12];
        gemm_bt_acc(gy.data(), w.data(), 4, 3, 5, &mut gx);
        let expect = naive(&gy, &w.permute(&[1, 0]).unwrap());
        for (a, b) in gx.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut gw = vec![0.0; 15];
        gemm_at_acc(x.data(), gy.data(), 4, 3, 5, &mut gw);
        let expect = naive(&x.permute(&[1, 0]).unwrap(), &gy);
        for (a, b) in gw.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
