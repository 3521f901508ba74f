//! Sequential selective-scan kernels over raw buffers.
//!
//! Layout: `x`, `delta`: `[B, L, C]`; `a`: `[C, N]` (already negated,
//! `A = -exp(A_log)`); `b`, `c`: `[B, L, N]`; `d`: `[C]`;
//! saved states: `[B, L, C, N]`.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Below this `|Δ·A|` the input coefficient uses its second-order series.
pub const TAYLOR_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanShape {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanShape {
    pub fn states_len(&self) -> usize {
        self.batch * self.len * self.channels * self.state
    }

    pub fn seq_len(&self) -> usize {
        self.batch * self.len * self.channels
    }
}

pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

impl<T> ScanInputs<'_, T> {
    pub(crate) fn check(&self, s: ScanShape) {
        assert_eq!(self.x.len(), s.seq_len());
        assert_eq!(self.delta.len(), s.seq_len());
        assert_eq!(self.a.len(), s.channels * s.state);
        assert_eq!(self.b.len(), s.batch * s.len * s.state);
        assert_eq!(self.c.len(), s.batch * s.len * s.state);
        assert_eq!(self.d.len(), s.channels);
    }
}

/// Zero-order-hold coefficients for one diagonal entry:
/// `(Ā, φ)` with `Ā = exp(ΔA)` and `B̄ = φ·B`, `φ = (exp(ΔA) - 1) / A`.
#[inline]
pub fn zoh<T: Real>(a: T, delta: T) -> (T, T) {
    let z = delta * a;
    if z.abs() < T::of(TAYLOR_THRESHOLD) {
        let half = T::of(0.5);
        (z.exp(), delta * (T::one() + z * half))
    } else {
        let em1 = z.exp_m1();
        (em1 + T::one(), em1 / a)
    }
}

/// `(∂φ/∂Δ, ∂φ/∂A)` consistent with the branch taken by [`zoh`].
#[inline]
fn zoh_phi_grad<T: Real>(a: T, delta: T, a_bar: T, phi: T) -> (T, T) {
    let z = delta * a;
    if z.abs() < T::of(TAYLOR_THRESHOLD) {
        (T::one() + z, delta * delta * T::of(0.5))
    } else {
        // ∂φ/∂A = Δ²·ψ(z), ψ(z) = (z·e^z - e^z + 1) / z²
        let psi = if z.abs() < T::of(1e-3) {
            T::of(0.5) + z * (T::one() / T::of(3.0) + z * (T::of(0.125) + z / T::of(30.0)))
        } else {
            // e^z - 1 = A·φ on this branch
            (z * a_bar - a * phi) / (z * z)
        };
        (a_bar, delta * delta * psi)
    }
}

/// Output read-out `⟨c, h⟩ + d·x`. Every decode path of every scan goes
/// through here.
#[inline]
pub fn decode<T: Real>(c: &[T], h: &[T], d: T, x: T) -> T {
    let mut y = T::zero();
    for (&cv, &hv) in c.iter().zip(h) {
        y += cv * hv;
    }
    y + d * x
}

/// Runs the recurrence from `h₀ = 0`, optionally saving every state.
pub fn scan_forward<T: Real>(inp: &ScanInputs<'_, T>, s: ScanShape, mut states: Option<&mut [T]>) -> Result<Vec<T>> {
    inp.check(s);
    let ScanShape {
        batch,
        len,
        channels: nc,
        state: ns,
    } = s;
    let mut y = vec![T::zero(); s.seq_len()];
    let mut h = vec![T::zero(); nc * ns];
    for bi in 0..batch {
        h.fill(T::zero());
        for t in 0..len {
            let row = (bi * len + t) * nc;
            let bt = &inp.b[(bi * len + t) * ns..][..ns];
            let ct = &inp.c[(bi * len + t) * ns..][..ns];
            let mut finite = true;
            for ch in 0..nc {
                let xv = inp.x[row + ch];
                let dv = inp.delta[row + ch];
                let a_row = &inp.a[ch * ns..][..ns];
                let hc = &mut h[ch * ns..][..ns];
                for n in 0..ns {
                    let (a_bar, phi) = zoh(a_row[n], dv);
                    hc[n] = a_bar * hc[n] + phi * bt[n] * xv;
                }
                let out = decode(ct, hc, inp.d[ch], xv);
                finite &= out.is_finite();
                y[row + ch] = out;
            }
            if !finite || h.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "selective_scan".into(),
                    detail: format!("state became non-finite at timestep {t} (batch {bi})"),
                });
            }
            if let Some(st) = states.as_deref_mut() {
                st[(bi * len + t) * nc * ns..][..nc * ns].copy_from_slice(&h);
            }
        }
    }
    Ok(y)
}

pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse-time adjoint of [`scan_forward`]:
/// `λ_t = C_t·ȳ_t + Ā_{t+1}·λ_{t+1}` with per-step parameter gradients read
/// off `λ_t` and the saved states.
pub fn scan_backward<T: Real>(inp: &ScanInputs<'_, T>, s: ScanShape, states: &[T], gy: &[T]) -> ScanGrads<T> {
    inp.check(s);
    assert_eq!(states.len(), s.states_len());
    assert_eq!(gy.len(), s.seq_len());
    let ScanShape {
        batch,
        len,
        channels: nc,
        state: ns,
    } = s;
    let mut g = ScanGrads {
        x: vec![T::zero(); s.seq_len()],
        delta: vec![T::zero(); s.seq_len()],
        a: vec![T::zero(); nc * ns],
        b: vec![T::zero(); batch * len * ns],
        c: vec![T::zero(); batch * len * ns],
        d: vec![T::zero(); nc],
    };
    // carry = Ā_{t+1} ⊙ λ_{t+1}
    let mut carry = vec![T::zero(); nc * ns];
    for bi in 0..batch {
        carry.fill(T::zero());
        for t in (0..len).rev() {
            let row = (bi * len + t) * nc;
            let bn = (bi * len + t) * ns;
            let h_t = &states[row * ns..][..nc * ns];
            let h_prev = (t > 0).then(|| &states[(row - nc) * ns..][..nc * ns]);
            for ch in 0..nc {
                let xv = inp.x[row + ch];
                let dv = inp.delta[row + ch];
                let gyv = gy[row + ch];
                g.d[ch] += gyv * xv;
                let mut gx = inp.d[ch] * gyv;
                let mut gdelta = T::zero();
                for n in 0..ns {
                    let k = ch * ns + n;
                    let av = inp.a[k];
                    let bv = inp.b[bn + n];
                    let lam = carry[k] + gyv * inp.c[bn + n];
                    g.c[bn + n] += gyv * h_t[k];

                    let (a_bar, phi) = zoh(av, dv);
                    let (dphi_ddelta, dphi_da) = zoh_phi_grad(av, dv, a_bar, phi);
                    let hp = h_prev.map_or(T::zero(), |hp| hp[k]);
                    let g_abar = lam * hp;
                    let g_phi = lam * bv * xv;

                    gx += lam * phi * bv;
                    g.b[bn + n] += lam * phi * xv;
                    gdelta += g_abar * av * a_bar + g_phi * dphi_ddelta;
                    g.a[k] += g_abar * dv * a_bar + g_phi * dphi_da;
                    carry[k] = a_bar * lam;
                }
                g.x[row + ch] += gx;
                g.delta[row + ch] += gdelta;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_closed_forms() {
        let (a_bar, phi) = zoh(-1.0f64, std::f64::consts::LN_2);
        assert!((a_bar - 0.5).abs() < 1e-12);
        assert!((phi - 0.5).abs() < 1e-12);

        let (a_bar, phi) = zoh(0.0f64, 0.5);
        assert_eq!(a_bar, 1.0);
        assert_eq!(phi * 2.0, 1.0);
    }

    #[test]
    fn phi_gradient_matches_differences() {
        for &(a, delta) in &[(-2.0f64, 0.1), (-1e-4, 0.5), (-3e-7, 1.0), (-0.7, 2.5), (-5.0, 1e-8)] {
            let (a_bar, phi) = zoh(a, delta);
            let (gd, ga) = zoh_phi_grad(a, delta, a_bar, phi);
            let e = 1e-7 * delta.abs().max(1e-9);
            let nd = (zoh(a, delta + e).1 - zoh(a, delta - e).1) / (2.0 * e);
            let ea = 1e-6 * a.abs().max(1.0);
            let na = (zoh(a + ea, delta).1 - zoh(a - ea, delta).1) / (2.0 * ea);
            assert!(
                (gd - nd).abs() <= 1e-6 * (gd.abs() + 1e-12),
                "dΔ at {a},{delta}: {gd} vs {nd}"
            );
            assert!(
                (ga - na).abs() <= 1e-5 * (ga.abs() + 1e-12),
                "dA at {a},{delta}: {ga} vs {na}"
            );
        }
    }
}
