//! Selective state-space kernel.
//!
//! Input-dependent parameter generation, zero-order-hold discretization,
//! the diagonal recurrence `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`,
//! `y_t = ⟨C_t, h_t⟩ + D x_t` in sequential and parallel forms, and a
//! time-invariant convolution oracle.
//!
//! Sequences are `[L, C]` or batched `[B, L, C]`; outputs keep the rank of
//! the input.

pub mod kernel;
mod layer;
mod parallel;

pub use layer::SsmLayer;
pub use parallel::{ScanElement, ScanStrategy};

use kernel::{ScanInputs, ScanShape};

use crate::error::{Error, Result};
use crate::params::Initializer;
use crate::tensor::{matmul, Real, Tensor};

/// Per-instance selective-SSM parameters. `C` channels, `N` states.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `[C, N]`, `A = -exp(A_log)`.
    pub a_log: Tensor<T>,
    /// `[C]`.
    pub d: Tensor<T>,
    /// `[C, N]`.
    pub w_b: Tensor<T>,
    /// `[C, N]`.
    pub w_c: Tensor<T>,
    /// `[C, C]`: one step size per channel from the full input row.
    pub w_delta: Tensor<T>,
    /// `[C]`.
    pub delta_bias: Tensor<T>,
}

impl<T: Real> SsmParams<T> {
    /// Standard initialisation: `A_log[c, n] = ln(n + 1)`, `D = 1`,
    /// projections `N(0, 0.02)` truncated, and a step-size bias whose
    /// softplus is log-uniform in `[1e-3, 1e-1]`.
    pub fn init(channels: usize, state: usize, init: &mut Initializer) -> Self {
        let (a_log, d, w_b, w_c, w_delta, delta_bias) = init_tensors(channels, state, init);
        SsmParams {
            a_log,
            d,
            w_b,
            w_c,
            w_delta,
            delta_bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    fn check(&self) -> Result<()> {
        let (c, n) = match self.a_log.shape() {
            &[c, n] if c >= 1 && n >= 1 => (c, n),
            s => {
                return Err(Error::contract(
                    "ssm_params",
                    format!("A_log must be [C, N], got {s:?}"),
                ))
            }
        };
        let want: [(&Tensor<T>, Vec<usize>); 5] = [
            (&self.d, vec![c]),
            (&self.w_b, vec![c, n]),
            (&self.w_c, vec![c, n]),
            (&self.w_delta, vec![c, c]),
            (&self.delta_bias, vec![c]),
        ];
        for (t, s) in want {
            if t.shape() != s.as_slice() {
                return Err(Error::dim("ssm_params", t.shape(), &s));
            }
        }
        Ok(())
    }
}

pub(crate) fn init_tensors<T: Real>(
    channels: usize,
    state: usize,
    init: &mut Initializer,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let a_log = Tensor::from_fn([channels, state], |i| T::of(((i % state) + 1) as f64).ln());
    let d = Tensor::ones([channels]);
    let w_b = init.trunc_normal(&[channels, state], 0.02);
    let w_c = init.trunc_normal(&[channels, state], 0.02);
    let w_delta = init.trunc_normal(&[channels, channels], 0.02);
    let u: Tensor<f64> = init.uniform(&[channels], (1e-3f64).ln(), (1e-1f64).ln());
    let delta_bias = Tensor::from_fn([channels], |i| T::of(inverse_softplus(u.data()[i].exp())));
    (a_log, d, w_b, w_c, w_delta, delta_bias)
}

/// `x` such that `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Input-dependent parameters for one sequence batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    /// `[.., L, N]`.
    pub b: Tensor<T>,
    /// `[.., L, N]`.
    pub c: Tensor<T>,
    /// `[.., L, C]`, strictly positive.
    pub delta: Tensor<T>,
}

/// Per-timestep discretized parameters for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

fn seq_dims<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [l, c] if l >= 1 => Ok((1, l, c)),
        [b, l, c] if l >= 1 => Ok((b, l, c)),
        _ => Err(Error::contract(
            op,
            format!("sequence must be [L, C] or [B, L, C] with L >= 1, got {:?}", x.shape()),
        )),
    }
}

fn rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.last_dim();
    x.reshape([x.len() / c, c])
}

fn with_lead<T: Real>(t: Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = like.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = t.last_dim();
    t.reshape(shape)
}

/// `B_t = x_t W_B`, `C_t = x_t W_C`, `Δ_t = softplus(x_t W_Δ + Δ_bias)`.
pub fn select_params<T: Real>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Selection<T>> {
    p.check()?;
    let (_, _, c) = seq_dims(x, "select_params")?;
    if c != p.channels() {
        return Err(Error::dim("select_params", x.shape(), p.a_log.shape()));
    }
    let xr = rows(x)?;
    let b = with_lead(matmul(&xr, &p.w_b)?, x)?;
    let cc = with_lead(matmul(&xr, &p.w_c)?, x)?;
    let mut dl = matmul(&xr, &p.w_delta)?;
    for row in dl.data_mut().chunks_exact_mut(c) {
        for (v, &bias) in row.iter_mut().zip(p.delta_bias.data()) {
            *v = crate::tensor::softplus(*v + bias);
        }
    }
    Ok(Selection {
        b,
        c: cc,
        delta: with_lead(dl, x)?,
    })
}

/// Zero-order hold for a diagonal `A`: `Ā_i = exp(ΔA_i)`,
/// `B̄_i = (exp(ΔA_i) - 1) / A_i · B_i`, with the series
/// `Δ(1 + ΔA_i/2)B_i` when `|ΔA_i| < 1e-6`.
pub fn discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<DiscreteStep<T>> {
    if !(delta > T::zero()) {
        return Err(Error::contract(
            "discretize",
            format!("step size must be > 0, got {delta}"),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::dim("discretize", &[a.len()], &[b.len()]));
    }
    let (a_bar, b_bar) = a
        .iter()
        .zip(b)
        .map(|(&av, &bv)| {
            let (a_bar, phi) = kernel::zoh(av, delta);
            (a_bar, phi * bv)
        })
        .unzip();
    Ok(DiscreteStep { a_bar, b_bar })
}

/// Runs the recurrence on explicitly given parameters.
///
/// `a` is the (negative) diagonal `[C, N]`; `d` is `[C]`; `sel` supplies the
/// per-step `B`, `C`, `Δ` matching the lead dimensions of `x`.
pub fn scan_selected<T: Real>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    d: &Tensor<T>,
    sel: &Selection<T>,
    strategy: ScanStrategy,
) -> Result<Tensor<T>> {
    let (batch, len, channels) = seq_dims(x, "selective_scan")?;
    let state = match *a.shape() {
        [c, n] if c == channels && n >= 1 => n,
        _ => return Err(Error::dim("selective_scan", x.shape(), a.shape())),
    };
    if d.shape() != [channels] {
        return Err(Error::dim("selective_scan", x.shape(), d.shape()));
    }
    if sel.delta.shape() != x.shape() {
        return Err(Error::dim("selective_scan", x.shape(), sel.delta.shape()));
    }
    let mut bn = x.shape().to_vec();
    *bn.last_mut().expect("rank >= 2") = state;
    for t in [&sel.b, &sel.c] {
        if t.shape() != bn.as_slice() {
            return Err(Error::dim("selective_scan", t.shape(), &bn));
        }
    }
    if let Some(v) = sel.delta.data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::contract(
            "selective_scan",
            format!("step size must be > 0, got {v}"),
        ));
    }
    let shape = ScanShape {
        batch,
        len,
        channels,
        state,
    };
    let inp = ScanInputs {
        x: x.data(),
        delta: sel.delta.data(),
        a: a.data(),
        b: sel.b.data(),
        c: sel.c.data(),
        d: d.data(),
    };
    let y = run(&inp, shape, strategy)?;
    Tensor::new(x.shape().to_vec(), y)
}

/// Dispatches a raw scan to a strategy. Parallel strategies use the current
/// rayon pool.
pub fn run<T: Real>(inp: &ScanInputs<'_, T>, shape: ScanShape, strategy: ScanStrategy) -> Result<Vec<T>> {
    match strategy {
        ScanStrategy::Sequential => kernel::scan_forward(inp, shape, None),
        ScanStrategy::Chunked { chunk } => parallel::scan_chunked(inp, shape, chunk),
        ScanStrategy::Blelloch => parallel::scan_blelloch(inp, shape),
    }
}

/// Selection followed by the sequential recurrence from `h₀ = 0`.
pub fn selective_scan_seq<T: Real>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let sel = select_params(x, p)?;
    scan_selected(x, &p.a(), &p.d, &sel, ScanStrategy::Sequential)
}

/// Selection followed by the chunked associative scan.
pub fn selective_scan_parallel<T: Real>(x: &Tensor<T>, p: &SsmParams<T>, chunk: usize) -> Result<Tensor<T>> {
    let sel = select_params(x, p)?;
    scan_selected(x, &p.a(), &p.d, &sel, ScanStrategy::Chunked { chunk })
}

/// Direct convolution `y_t = D x_t + Σ_{j≤t} (C Ā^j B̄) x_{t-j}` for one
/// channel with time-invariant diagonal parameters. O(L²).
pub fn lti_conv_oracle<T: Real>(x: &[T], a_bar: &[T], b_bar: &[T], c: &[T], d: T) -> Vec<T> {
    assert!(
        a_bar.len() == b_bar.len() && b_bar.len() == c.len(),
        "state vectors must agree"
    );
    let kernel: Vec<T> = (0..x.len())
        .map(|j| {
            a_bar
                .iter()
                .zip(b_bar)
                .zip(c)
                .map(|((&a, &b), &cv)| cv * a.powi(j as i32) * b)
                .sum()
        })
        .collect();
    (0..x.len())
        .map(|t| d * x[t] + (0..=t).map(|j| kernel[j] * x[t - j]).sum::<T>())
        .collect()
}
