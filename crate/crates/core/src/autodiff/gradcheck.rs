use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates checked per parameter tensor; larger tensors are
    /// subsampled deterministically from `seed`.
    pub max_coords: usize,
    pub seed: u64,
    /// Fault-injection fixture, see [`Tape::corrupt_backward`].
    pub corrupt_op: Option<String>,
    /// Coordinates with `|a - n| <= atol` count as exact agreement. Deep
    /// programs have gradients below the finite-difference roundoff
    /// (about `1e-16 / eps`), whose relative error is meaningless.
    pub atol: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-6,
            max_coords: 16,
            seed: 0,
            corrupt_op: None,
            atol: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Index into the `params` slice holding the worst coordinate.
    pub worst_param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

fn run<F>(f: &F, params: &[Tensor<f64>], fault: Option<&str>) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.corrupt_backward(op);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if let Some((_, op)) = tape.first_non_finite() {
        return Err(Error::Numeric {
            op: op.to_string(),
            detail: "non-finite forward value during gradcheck".into(),
        });
    }
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of the scalar program `f` against
/// central differences `(f(p+eps) - f(p-eps)) / (2 eps)`, reporting the
/// worst relative error `|a - n| / (|a| + |n| + 1e-12)`.
pub fn gradcheck<F>(f: F, params: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::contract("gradcheck", "eps must be positive"));
    }
    let (tape, vars, loss) = run(&f, params, opts.corrupt_op.as_deref())?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= opts.max_coords {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for coord in coords {
            let analytic = grads.get(vars[pi]).map_or(0.0, |g| g.data()[coord]);
            let orig = p.data()[coord];
            probe[pi].data_mut()[coord] = orig + opts.eps;
            let (t, _, l) = run(&f, &probe, None)?;
            let plus = t.value(l).data()[0];
            probe[pi].data_mut()[coord] = orig - opts.eps;
            let (t, _, l) = run(&f, &probe, None)?;
            let minus = t.value(l).data()[0];
            probe[pi].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = if (analytic - numeric).abs() <= opts.atol {
                0.0
            } else {
                rel_err(analytic, numeric)
            };
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report = GradcheckReport {
                    max_rel_err: err,
                    worst_param: pi,
                    worst_coord: coord,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn silu_sum() {
        let r = gradcheck(
            |t, p| {
                let s = t.silu(p[0]);
                Ok(t.sum(s))
            },
            &[random(&[16], 1)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 16);
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn matmul_sum() {
        let r = gradcheck(
            |t, p| {
                let y = t.matmul(p[1], p[0])?;
                Ok(t.sum(y))
            },
            &[random(&[4, 3], 2), random(&[5, 4], 3)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let opts = GradcheckOptions {
            corrupt_op: Some("silu".into()),
            ..Default::default()
        };
        let r = gradcheck(
            |t, p| {
                let s = t.silu(p[0]);
                Ok(t.sum(s))
            },
            &[random(&[8], 4)],
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn non_finite_forward_names_op() {
        let err = gradcheck(
            |t, p| {
                let e = t.exp(p[0]);
                Ok(t.sum(e))
            },
            &[Tensor::full([2], 1000.0)],
            &GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op, .. } if op == "exp"));
    }
}
