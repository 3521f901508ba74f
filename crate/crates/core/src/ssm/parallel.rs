//! Associative-scan evaluations of the selective recurrence.
//!
//! Each step is the affine map `h ↦ Ā_t ⊙ h + B̄_t x_t`. Affine maps compose
//! associatively, so the recurrence can be evaluated as a prefix scan. Both
//! strategies here have a fixed work partition, so their output depends on
//! the chunk size but never on the worker count.

use rayon::prelude::*;

use super::kernel::{decode, zoh, ScanInputs, ScanShape};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// The affine map `h ↦ a ⊙ h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> ScanElement<T> {
    pub fn identity(n: usize) -> Self {
        ScanElement {
            a: vec![T::one(); n],
            b: vec![T::zero(); n],
        }
    }

    /// `next ∘ self`: apply `self` first, then `next`.
    pub fn then(&self, next: &Self) -> Self {
        let (a, b) = self
            .a
            .iter()
            .zip(&self.b)
            .zip(next.a.iter().zip(&next.b))
            .map(|((&a1, &b1), (&a2, &b2))| combine(a1, b1, a2, b2))
            .unzip();
        ScanElement { a, b }
    }

    pub fn apply(&self, h: &[T]) -> Vec<T> {
        self.a
            .iter()
            .zip(&self.b)
            .zip(h)
            .map(|((&a, &b), &hv)| a * hv + b)
            .collect()
    }
}

/// `(a₂, b₂) ∘ (a₁, b₁) = (a₁a₂, a₂b₁ + b₂)`.
#[inline]
fn combine<T: Real>(a1: T, b1: T, a2: T, b2: T) -> (T, T) {
    (a1 * a2, a2 * b1 + b2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStrategy {
    /// Plain left-to-right recurrence.
    Sequential,
    /// Local scans per chunk, a sequential carry pass across chunk
    /// boundaries, then a parallel fix-up.
    Chunked { chunk: usize },
    /// Work-efficient up-sweep/down-sweep tree scan over a power-of-two
    /// padded sequence.
    Blelloch,
}

impl ScanStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ScanStrategy::Sequential => "sequential",
            ScanStrategy::Chunked { .. } => "chunked",
            ScanStrategy::Blelloch => "blelloch",
        }
    }
}

/// Element `(Ā, B̄x)` for every `(channel, state)` lane at step `(bi, t)`.
#[inline]
fn step_elements<T: Real>(
    inp: &ScanInputs<'_, T>,
    s: ScanShape,
    bi: usize,
    t: usize,
    a_out: &mut [T],
    b_out: &mut [T],
) {
    let (nc, ns) = (s.channels, s.state);
    let row = (bi * s.len + t) * nc;
    let bt = &inp.b[(bi * s.len + t) * ns..][..ns];
    for ch in 0..nc {
        let (xv, dv) = (inp.x[row + ch], inp.delta[row + ch]);
        for n in 0..ns {
            let (a_bar, phi) = zoh(inp.a[ch * ns + n], dv);
            a_out[ch * ns + n] = a_bar;
            b_out[ch * ns + n] = phi * bt[n] * xv;
        }
    }
}

#[inline]
fn emit<T: Real>(inp: &ScanInputs<'_, T>, s: ScanShape, bi: usize, t: usize, h: &[T], y: &mut [T]) {
    let (nc, ns) = (s.channels, s.state);
    let row = (bi * s.len + t) * nc;
    let ct = &inp.c[(bi * s.len + t) * ns..][..ns];
    for ch in 0..nc {
        y[ch] = decode(ct, &h[ch * ns..][..ns], inp.d[ch], inp.x[row + ch]);
    }
}

/// Chunked scan. Returns `y: [B, L, C]`.
pub fn scan_chunked<T: Real>(inp: &ScanInputs<'_, T>, s: ScanShape, chunk: usize) -> Result<Vec<T>> {
    if chunk == 0 {
        return Err(Error::contract("selective_scan_parallel", "chunk must be >= 1"));
    }
    inp.check(s);
    let lanes = s.channels * s.state;
    let mut y = vec![T::zero(); s.seq_len()];
    let mut h_local = vec![T::zero(); s.len * lanes];
    let mut prod = vec![T::zero(); s.len * lanes];
    for bi in 0..s.batch {
        // local scans from a zero state, with running products of Ā
        h_local
            .par_chunks_mut(chunk * lanes)
            .zip(prod.par_chunks_mut(chunk * lanes))
            .enumerate()
            .for_each(|(k, (hl, pr))| {
                let mut a = vec![T::zero(); lanes];
                let mut b = vec![T::zero(); lanes];
                let steps = hl.len() / lanes;
                for j in 0..steps {
                    step_elements(inp, s, bi, k * chunk + j, &mut a, &mut b);
                    for l in 0..lanes {
                        let (pa, pb) = if j == 0 {
                            (T::one(), T::zero())
                        } else {
                            (pr[(j - 1) * lanes + l], hl[(j - 1) * lanes + l])
                        };
                        let (na, nb) = combine(pa, pb, a[l], b[l]);
                        pr[j * lanes + l] = na;
                        hl[j * lanes + l] = nb;
                    }
                }
            });
        // carry into each chunk
        let n_chunks = s.len.div_ceil(chunk);
        let mut carries = vec![T::zero(); n_chunks * lanes];
        for k in 1..n_chunks {
            let last = (k * chunk - 1) * lanes;
            for l in 0..lanes {
                carries[k * lanes + l] = prod[last + l] * carries[(k - 1) * lanes + l] + h_local[last + l];
            }
        }
        let y_b = &mut y[bi * s.len * s.channels..][..s.len * s.channels];
        y_b.par_chunks_mut(chunk * s.channels)
            .zip(h_local.par_chunks(chunk * lanes).zip(prod.par_chunks(chunk * lanes)))
            .enumerate()
            .for_each(|(k, (yc, (hl, pr)))| {
                let carry = &carries[k * lanes..][..lanes];
                let mut h = vec![T::zero(); lanes];
                for j in 0..yc.len() / s.channels {
                    for l in 0..lanes {
                        h[l] = hl[j * lanes + l] + pr[j * lanes + l] * carry[l];
                    }
                    emit(inp, s, bi, k * chunk + j, &h, &mut yc[j * s.channels..][..s.channels]);
                }
            });
    }
    check_finite(&y)?;
    Ok(y)
}

/// Blelloch tree scan. Returns `y: [B, L, C]`.
pub fn scan_blelloch<T: Real>(inp: &ScanInputs<'_, T>, s: ScanShape) -> Result<Vec<T>> {
    inp.check(s);
    let lanes = s.channels * s.state;
    let padded = s.len.next_power_of_two();
    let mut y = vec![T::zero(); s.seq_len()];
    let mut ea = vec![T::one(); padded * lanes];
    let mut eb = vec![T::zero(); padded * lanes];
    for bi in 0..s.batch {
        ea.fill(T::one());
        eb.fill(T::zero());
        ea.par_chunks_mut(lanes)
            .zip(eb.par_chunks_mut(lanes))
            .take(s.len)
            .enumerate()
            .for_each(|(t, (a, b))| step_elements(inp, s, bi, t, a, b));

        // up-sweep: the last slot of each block of width `w` holds the
        // composition of the whole block
        let mut w = 2;
        while w <= padded {
            let half = w / 2;
            ea.par_chunks_mut(w * lanes)
                .zip(eb.par_chunks_mut(w * lanes))
                .for_each(|(ba, bb)| {
                    let (l, r) = ((half - 1) * lanes, (w - 1) * lanes);
                    for i in 0..lanes {
                        let (na, nb) = combine(ba[l + i], bb[l + i], ba[r + i], bb[r + i]);
                        ba[r + i] = na;
                        bb[r + i] = nb;
                    }
                });
            w *= 2;
        }
        // down-sweep to an exclusive scan
        let root = (padded - 1) * lanes;
        ea[root..].fill(T::one());
        eb[root..].fill(T::zero());
        let mut w = padded;
        while w >= 2 {
            let half = w / 2;
            ea.par_chunks_mut(w * lanes)
                .zip(eb.par_chunks_mut(w * lanes))
                .for_each(|(ba, bb)| {
                    let (l, r) = ((half - 1) * lanes, (w - 1) * lanes);
                    for i in 0..lanes {
                        let (la, lb) = (ba[l + i], bb[l + i]);
                        let (pa, pb) = (ba[r + i], bb[r + i]);
                        ba[l + i] = pa;
                        bb[l + i] = pb;
                        let (na, nb) = combine(pa, pb, la, lb);
                        ba[r + i] = na;
                        bb[r + i] = nb;
                    }
                });
            w /= 2;
        }
        // inclusive state = exclusive prefix applied to h₀ = 0, then step t
        let y_b = &mut y[bi * s.len * s.channels..][..s.len * s.channels];
        y_b.par_chunks_mut(s.channels)
            .zip(eb.par_chunks(lanes))
            .enumerate()
            .for_each(|(t, (yt, excl_b))| {
                let mut a = vec![T::zero(); lanes];
                let mut b = vec![T::zero(); lanes];
                step_elements(inp, s, bi, t, &mut a, &mut b);
                let h: Vec<T> = (0..lanes).map(|i| a[i] * excl_b[i] + b[i]).collect();
                emit(inp, s, bi, t, &h, yt);
            });
    }
    check_finite(&y)?;
    Ok(y)
}

fn check_finite<T: Real>(y: &[T]) -> Result<()> {
    match y.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric {
            op: "selective_scan_parallel".into(),
            detail: format!("non-finite output at flat index {i}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn composition_law_is_exact_on_dyadic_values() {
        let e1 = ScanElement {
            a: vec![0.5f64, 0.25],
            b: vec![1.0, -2.0],
        };
        let e2 = ScanElement {
            a: vec![0.75f64, 0.5],
            b: vec![0.5, 3.0],
        };
        let h = vec![2.0, -1.0];
        assert_eq!(e1.then(&e2).apply(&h), e2.apply(&e1.apply(&h)));
        assert_eq!(ScanElement::identity(2).apply(&h), h);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut el = || ScanElement {
            a: (0..4).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>(),
            b: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let (x, y, z) = (el(), el(), el());
        let l = x.then(&y).then(&z);
        let r = x.then(&y.then(&z));
        for i in 0..4 {
            assert!((l.a[i] - r.a[i]).abs() < 1e-15);
            assert!((l.b[i] - r.b[i]).abs() < 1e-15);
        }
    }
}
