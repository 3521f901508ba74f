//! Finite-difference gradient suites over single ops, whole blocks and the
//! micro model, in 64-bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, GradcheckOptions, GradcheckReport, ScanVars, Tape, Var};
use crate::blocks::{Ss2d, VssmBlock};
use crate::error::Result;
use crate::fusion::{CvsmBlock, MvcmBlock};
use crate::model::{Model, ModelConfig};
use crate::params::{gradcheck_store, Graph, Initializer, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl Scope {
    /// Largest accepted relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Scope::Op | Scope::Block => 1e-4,
            Scope::Model => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub scope: Scope,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Set when the program itself failed to run.
    pub error: Option<String>,
}

impl CheckRecord {
    fn new(name: &str, scope: Scope, outcome: Result<(GradcheckReport, String)>) -> Self {
        let threshold = scope.threshold();
        match outcome {
            Ok((r, worst_param)) => CheckRecord {
                name: name.to_string(),
                scope,
                max_rel_err: r.max_rel_err,
                threshold,
                passed: r.max_rel_err <= threshold,
                worst_param,
                analytic: r.analytic,
                numeric: r.numeric,
                checked: r.checked,
                error: None,
            },
            Err(e) => CheckRecord {
                name: name.to_string(),
                scope,
                max_rel_err: f64::INFINITY,
                threshold,
                passed: false,
                worst_param: String::new(),
                analytic: f64::NAN,
                numeric: f64::NAN,
                checked: 0,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Runs every check of `scope`. `corrupt_op` injects a wrong backward rule
/// for the named op (fault-injection fixture).
pub fn run(scope: Scope, corrupt_op: Option<&str>) -> Vec<CheckRecord> {
    match scope {
        Scope::Op => op_suite(corrupt_op),
        Scope::Block => block_suite(corrupt_op),
        Scope::Model => vec![model_check(&ModelConfig::micro(), corrupt_op)],
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `Σ y ⊙ w` with a fixed random `w`, so that every output coordinate
/// reaches the loss with a distinct weight.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(t.shape(y), -1.0, 1.0, &mut rng);
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut u = |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut rng);
    let map = [2, 3, 3, 4];
    let mut cases: Vec<OpCase> = vec![
        (
            "add",
            vec![u(&[3, 4]), u(&[3, 4])],
            Box::new(|t, p| {
                let y = t.add(p[0], p[1])?;
                probe(t, y, 1)
            }),
        ),
        (
            "sub",
            vec![u(&[3, 4]), u(&[3, 4])],
            Box::new(|t, p| {
                let y = t.sub(p[0], p[1])?;
                probe(t, y, 2)
            }),
        ),
        (
            "mul",
            vec![u(&[3, 4]), u(&[3, 4])],
            Box::new(|t, p| {
                let y = t.mul(p[0], p[1])?;
                probe(t, y, 3)
            }),
        ),
        (
            "scale",
            vec![u(&[5])],
            Box::new(|t, p| {
                let y = t.scale(p[0], -1.7);
                probe(t, y, 4)
            }),
        ),
        (
            "exp",
            vec![u(&[5])],
            Box::new(|t, p| {
                let y = t.exp(p[0]);
                probe(t, y, 5)
            }),
        ),
        (
            "matmul",
            vec![u(&[2, 3, 4]), u(&[4, 5])],
            Box::new(|t, p| {
                let y = t.matmul(p[0], p[1])?;
                probe(t, y, 6)
            }),
        ),
        (
            "add_bias",
            vec![u(&[3, 4]), u(&[4])],
            Box::new(|t, p| {
                let y = t.add_bias(p[0], p[1])?;
                probe(t, y, 7)
            }),
        ),
        (
            "silu",
            vec![u(&[8])],
            Box::new(|t, p| {
                let y = t.silu(p[0]);
                probe(t, y, 8)
            }),
        ),
        (
            "sigmoid",
            vec![u(&[8])],
            Box::new(|t, p| {
                let y = t.sigmoid(p[0]);
                probe(t, y, 9)
            }),
        ),
        (
            "relu",
            vec![u(&[8])],
            Box::new(|t, p| {
                let y = t.relu(p[0]);
                probe(t, y, 10)
            }),
        ),
        (
            "softplus",
            vec![u(&[8])],
            Box::new(|t, p| {
                let y = t.softplus(p[0]);
                probe(t, y, 11)
            }),
        ),
        (
            "softmax",
            vec![u(&[3, 4])],
            Box::new(|t, p| {
                let y = t.softmax(p[0])?;
                probe(t, y, 12)
            }),
        ),
        (
            "layernorm",
            vec![u(&[3, 6]), u(&[6]), u(&[6])],
            Box::new(|t, p| {
                let y = t.layernorm(p[0], p[1], p[2], 1e-5)?;
                probe(t, y, 13)
            }),
        ),
        (
            "dwconv2d",
            vec![u(&map), u(&[4, 3, 3])],
            Box::new(|t, p| {
                let y = t.dwconv2d(p[0], p[1])?;
                probe(t, y, 14)
            }),
        ),
        (
            "global_avg_pool",
            vec![u(&map)],
            Box::new(|t, p| {
                let y = t.global_avg_pool(p[0])?;
                probe(t, y, 15)
            }),
        ),
        (
            "scale_channels",
            vec![u(&map), u(&[2, 4])],
            Box::new(|t, p| {
                let y = t.scale_channels(p[0], p[1])?;
                probe(t, y, 16)
            }),
        ),
        (
            "reshape",
            vec![u(&[2, 6])],
            Box::new(|t, p| {
                let y = t.reshape(p[0], [3, 4])?;
                probe(t, y, 17)
            }),
        ),
        (
            "gather",
            vec![u(&[2, 4, 3])],
            Box::new(|t, p| {
                let y = t.gather(p[0], Arc::from(vec![2, 0, 3, 1]))?;
                probe(t, y, 18)
            }),
        ),
        (
            "channel_select",
            vec![u(&[3, 4]), u(&[3, 4])],
            Box::new(|t, p| {
                let y = t.channel_select(p[0], p[1], Arc::from(vec![true, false, true, false]))?;
                probe(t, y, 19)
            }),
        ),
        (
            "concat",
            vec![u(&[2, 2, 3]), u(&[2, 2, 3])],
            Box::new(|t, p| {
                let y = t.concat(p[0], p[1])?;
                probe(t, y, 20)
            }),
        ),
        (
            "space_to_depth",
            vec![u(&[1, 4, 4, 2])],
            Box::new(|t, p| {
                let y = t.space_to_depth(p[0], 2)?;
                probe(t, y, 21)
            }),
        ),
        (
            "sum",
            vec![u(&[3, 2])],
            Box::new(|t, p| {
                let y = t.exp(p[0]);
                Ok(t.sum(y))
            }),
        ),
        (
            "mean",
            vec![u(&[3, 2])],
            Box::new(|t, p| {
                let y = t.exp(p[0]);
                Ok(t.mean(y))
            }),
        ),
        (
            "cross_entropy",
            vec![u(&[3, 4])],
            Box::new(|t, p| t.cross_entropy(p[0], &[0, 3, 1])),
        ),
    ];
    let targets = Tensor::new([2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("static shape");
    cases.push((
        "bce_multilabel",
        vec![u(&[2, 3])],
        Box::new(move |t, p| t.bce_multilabel(p[0], &targets)),
    ));
    let (bsz, len, c, n) = (2, 6, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    cases.push((
        "selective_scan",
        vec![
            uniform(&[bsz, len, c], -1.0, 1.0, &mut rng),
            uniform(&[bsz, len, c], 0.05, 1.0, &mut rng),
            uniform(&[c, n], -2.0, -0.2, &mut rng),
            uniform(&[bsz, len, n], -1.0, 1.0, &mut rng),
            uniform(&[bsz, len, n], -1.0, 1.0, &mut rng),
            uniform(&[c], -1.0, 1.0, &mut rng),
        ],
        Box::new(|t, p| {
            let y = t.selective_scan(ScanVars {
                x: p[0],
                delta: p[1],
                a: p[2],
                b: p[3],
                c: p[4],
                d: p[5],
            })?;
            probe(t, y, 22)
        }),
    ));
    cases
}

fn op_suite(corrupt_op: Option<&str>) -> Vec<CheckRecord> {
    let opts = GradcheckOptions {
        corrupt_op: corrupt_op.map(str::to_string),
        ..Default::default()
    };
    op_cases()
        .into_iter()
        .map(|(name, params, f)| {
            let outcome = gradcheck(f, &params, &opts).map(|r| {
                let worst = format!("input{}", r.worst_param);
                (r, worst)
            });
            CheckRecord::new(name, Scope::Op, outcome)
        })
        .collect()
}

/// Adds `amp·N(0,1)`-like noise to every parameter so that zero-initialised
/// paths carry gradient.
pub fn jitter(store: &mut ParamStore<f64>, amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += amp * rng.gen_range(-1.0..1.0);
        }
    }
}

fn store_check<F>(name: &str, scope: Scope, store: &ParamStore<f64>, opts: &GradcheckOptions, f: F) -> CheckRecord
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let outcome = gradcheck_store(store, f, opts).map(|r| {
        let worst = store
            .iter()
            .nth(r.worst_param)
            .map(|(n, _)| n.to_string())
            .unwrap_or_default();
        (r, worst)
    });
    CheckRecord::new(name, scope, outcome)
}

fn block_suite(corrupt_op: Option<&str>) -> Vec<CheckRecord> {
    let opts = GradcheckOptions {
        corrupt_op: corrupt_op.map(str::to_string),
        eps: 1e-5,
        max_coords: 8,
        atol: 1e-8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x1 = uniform(&[2, 8, 8, 4], -1.0, 1.0, &mut rng);
    let x2 = uniform(&[2, 8, 8, 4], -1.0, 1.0, &mut rng);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let ss2d = Ss2d::new(&mut store, "ss2d", 4, 4, &mut Initializer::new(1));
    jitter(&mut store, 0.3, 1);
    out.push(store_check("ss2d", Scope::Block, &store, &opts, |g| {
        let x = g.input(x1.clone());
        let y = ss2d.forward(g, x)?;
        probe(g, y, 31)
    }));

    let mut store = ParamStore::new();
    let vssm = VssmBlock::new(&mut store, "vssm", 4, 4, &mut Initializer::new(2));
    jitter(&mut store, 0.3, 2);
    out.push(store_check("vssm_block", Scope::Block, &store, &opts, |g| {
        let x = g.input(x1.clone());
        let y = vssm.forward(g, x)?;
        probe(g, y, 32)
    }));

    let mut store = ParamStore::new();
    let cvsm = CvsmBlock::new(&mut store, "cvsm", 4, 4, false, &mut Initializer::new(3)).expect("valid widths");
    jitter(&mut store, 0.3, 3);
    out.push(store_check("cvsm_block", Scope::Block, &store, &opts, |g| {
        let a = g.input(x1.clone());
        let b = g.input(x2.clone());
        let (y1, y2) = cvsm.forward(g, a, b)?;
        let l1 = probe(g, y1, 33)?;
        let l2 = probe(g, y2, 34)?;
        g.add(l1, l2)
    }));

    let mut store = ParamStore::new();
    let mvcm = MvcmBlock::new(&mut store, "mvcm", 4, 4, false, &mut Initializer::new(4)).expect("valid widths");
    jitter(&mut store, 0.3, 4);
    out.push(store_check("mvcm_block", Scope::Block, &store, &opts, |g| {
        let a = g.input(x1.clone());
        let b = g.input(x2.clone());
        let y = mvcm.forward(g, a, b)?;
        probe(g, y, 35)
    }));
    out
}

/// Cross-entropy of one sample through the whole model, with every
/// parameter perturbed away from its initial value.
pub fn model_check(cfg: &ModelConfig, corrupt_op: Option<&str>) -> CheckRecord {
    let opts = GradcheckOptions {
        corrupt_op: corrupt_op.map(str::to_string),
        // the loss sits near 1, so roundoff in a difference is ~1e-16 / eps
        eps: 1e-5,
        max_coords: 3,
        atol: 1e-8,
        ..Default::default()
    };
    let mut model = match Model::<f64>::build(cfg) {
        Ok(m) => m,
        Err(e) => return CheckRecord::new("model", Scope::Model, Err(e)),
    };
    jitter(&mut model.params, 0.3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let s = cfg.img_size;
    let v1 = uniform(&[1, s, s, 1], -1.0, 1.0, &mut rng);
    let v2 = uniform(&[1, s, s, 1], -1.0, 1.0, &mut rng);
    let label = [1 % cfg.num_classes];
    store_check("model", Scope::Model, &model.params, &opts, |g| {
        let a = g.input(v1.clone());
        let b = g.input(v2.clone());
        let out = model.forward_graph(g, a, b)?;
        match cfg.task {
            crate::model::TaskKind::SingleLabel => g.cross_entropy(out.logits, &label),
            crate::model::TaskKind::MultiLabel => {
                let targets = Tensor::from_fn([1, cfg.num_classes], |i| (i % 2) as f64);
                g.bce_multilabel(out.logits, &targets)
            }
        }
    })
}
