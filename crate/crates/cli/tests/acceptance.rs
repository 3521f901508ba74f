//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p xfmamba-cli --test acceptance`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfmamba::checks::{self, jitter, Scope};
use xfmamba::fusion::{deinterleave_merge, interleave, MvcmBlock};
use xfmamba::model::{ablation_rows, Model, ModelConfig};
use xfmamba::params::{Graph, Initializer, ParamStore};
use xfmamba::ssm::kernel::decode;
use xfmamba::ssm::{discretize, lti_conv_oracle, scan_selected, ScanStrategy, Selection};
use xfmamba::train::{gen_synthetic, train_loop, train_run, SyntheticSpec, SyntheticTask, TrainConfig};
use xfmamba::Tensor;
use xfmamba_cli::bench::{self, BenchSpec};
use xfmamba_cli::commands::{self, DataSplits};
use xfmamba_cli::config::{Precision, RunConfig};
use xfmamba_cli::{checkpoint, dataset};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

// 1
fn discretization() -> Outcome {
    let s = discretize(&[-1.0f64], &[1.0], std::f64::consts::LN_2).map_err(|e| e.to_string())?;
    let e1 = (s.a_bar[0] - 0.5).abs().max((s.b_bar[0] - 0.5).abs());
    let s = discretize(&[0.0f64], &[2.0], 0.5).map_err(|e| e.to_string())?;
    let e2 = (s.a_bar[0] - 1.0).abs().max((s.b_bar[0] - 1.0).abs());
    // just inside the series branch: exact value Δ(1 + ΔA/2 + ..)B
    let s = discretize(&[-1e-7f64], &[2.0], 0.5).map_err(|e| e.to_string())?;
    let exact = 2.0 * (-(-0.5e-7f64).exp_m1()) / 1e-7;
    let e3 = (s.b_bar[0] - exact).abs();
    let worst = e1.max(e2).max(e3);
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

struct Lti {
    len: usize,
    channels: usize,
    x: Vec<f64>,
    a: Vec<f64>,
    d: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    delta: Vec<f64>,
}

impl Lti {
    fn random(rng: &mut ChaCha8Rng, len: usize, channels: usize, state: usize) -> Self {
        let mut u = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        Lti {
            len,
            channels,
            x: u(len * channels, -1.0, 1.0),
            a: u(channels * state, 0.05, 3.0).into_iter().map(|v| -v).collect(),
            d: u(channels, -1.0, 1.0),
            b: u(state, -1.0, 1.0),
            c: u(state, -1.0, 1.0),
            delta: u(channels, 0.01, 1.0),
        }
    }

    fn scan(&self, strategy: ScanStrategy) -> Vec<f64> {
        let t = |v: &[f64], shape: Vec<usize>| Tensor::new(shape, v.to_vec()).unwrap();
        let (l, c, n) = (self.len, self.channels, self.b.len());
        let sel = Selection {
            b: t(&self.b.repeat(l), vec![l, n]),
            c: t(&self.c.repeat(l), vec![l, n]),
            delta: t(&self.delta.repeat(l), vec![l, c]),
        };
        let y = scan_selected(
            &t(&self.x, vec![l, c]),
            &t(&self.a, vec![c, n]),
            &t(&self.d, vec![c]),
            &sel,
            strategy,
        );
        y.unwrap().data().to_vec()
    }

    fn oracle(&self) -> Vec<f64> {
        let (l, c, n) = (self.len, self.channels, self.b.len());
        let mut y = vec![0.0; l * c];
        for ch in 0..c {
            let step = discretize(&self.a[ch * n..][..n], &self.b, self.delta[ch]).unwrap();
            let xs: Vec<f64> = (0..l).map(|t| self.x[t * c + ch]).collect();
            for (t, v) in lti_conv_oracle(&xs, &step.a_bar, &step.b_bar, &self.c, self.d[ch])
                .into_iter()
                .enumerate()
            {
                y[t * c + ch] = v;
            }
        }
        y
    }
}

// 2
fn recurrence_vs_convolution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (l, c, n) = (rng.gen_range(1..=64), rng.gen_range(1..=3), rng.gen_range(1..=16));
        let p = Lti::random(&mut rng, l, c, n);
        let (y, o) = (p.scan(ScanStrategy::Sequential), p.oracle());
        let num = y.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(num / o.iter().map(|v| v.abs()).fold(1e-300, f64::max));
    }
    ensure(worst <= 1e-10, || format!("max relative error {worst:e}"))?;
    Ok(format!("200 instances, max relative error {worst:.1e}"))
}

// 3
fn parallel_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (l, c, n) = (rng.gen_range(1..=300), rng.gen_range(1..=4), rng.gen_range(1..=16));
        let p = Lti::random(&mut rng, l, c, n);
        let seq = p.scan(ScanStrategy::Sequential);
        for chunk in [1, 2, 7, 64] {
            for (a, b) in p.scan(ScanStrategy::Chunked { chunk }).iter().zip(&seq) {
                worst = worst.max((a - b).abs() / (b.abs() + 1e-9));
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("chunks 1/2/7/64, max relative error {worst:.1e}"))
}

// 4
fn interleave_routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in [1usize, 2, 4, 5] {
        let a = Tensor::from_fn([3, c], |i| 1000.0 + i as f64);
        let b = Tensor::from_fn([3, c], |i| 2000.0 + i as f64);
        let (w1, w2) = interleave(&a, &b).map_err(|e| e.to_string())?;
        for i in 0..3 * c {
            let even = (i % c) % 2 == 0;
            let (want1, want2) = if even {
                (b.data()[i], a.data()[i])
            } else {
                (a.data()[i], b.data()[i])
            };
            ensure(w1.data()[i] == want1 && w2.data()[i] == want2, || {
                format!("C={c} slot {i} misrouted")
            })?;
        }
        for _ in 0..50 {
            let (x1, x2) = (random(&[4, c], &mut rng), random(&[4, c], &mut rng));
            let (w1, w2) = interleave(&x1, &x2).unwrap();
            let (r1, r2) = interleave(&w1, &w2).unwrap();
            let (m1, m2) = deinterleave_merge(&w1, &w2).unwrap();
            ensure(r1 == x1 && r2 == x2, || format!("C={c}: not an involution"))?;
            ensure(m1 == x1 && m2 == x2, || format!("C={c}: merge does not invert"))?;
        }
    }
    Ok("C in {1, 2, 4, 5}".into())
}

// 5
fn shared_decoding() -> Outcome {
    let mut store = ParamStore::new();
    let block = MvcmBlock::new(&mut store, "mvcm", 4, 4, false, &mut Initializer::new(5)).map_err(|e| e.to_string())?;
    jitter(&mut store, 0.3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(&store);
    let a = g.input(random(&[2, 3, 3, 4], &mut rng));
    let b = g.input(random(&[2, 3, 3, 4], &mut rng));
    block.forward(&mut g, a, b).map_err(|e| e.to_string())?;
    let scans = g.scan_nodes();
    ensure(scans.len() == 12, || {
        format!("{} scans, expected 3 branches x 4 directions", scans.len())
    })?;
    for dir in scans.chunks(3) {
        let c0: Vec<u64> = g.value(dir[0].1.c).data().iter().map(|v| v.to_bits()).collect();
        for (_, inputs) in dir {
            let c: Vec<u64> = g.value(inputs.c).data().iter().map(|v| v.to_bits()).collect();
            ensure(c == c0, || "a branch decoded with a different C sequence".into())?;
        }
    }
    let subs = [
        decode(&[3.0f64], &[2.0], 1.0, 0.2),
        decode(&[3.0f64], &[-1.0], 0.0, 0.7),
        decode(&[3.0f64], &[0.5], 2.0, 1.0),
    ];
    ensure(subs == [6.2, -3.0, 3.5], || {
        format!("scalar substitution gave {subs:?}")
    })?;
    Ok("12 scans share C per direction; 6.2 / -3 / 3.5 exact".into())
}

// 6
fn gradient_correctness() -> Outcome {
    let mut lines = Vec::new();
    for scope in [Scope::Op, Scope::Block] {
        let recs = checks::run(scope, None);
        let worst = recs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        if let Some(bad) = recs.iter().find(|r| !r.passed) {
            return Err(format!("{scope:?}: `{}` max_rel_err {:e}", bad.name, bad.max_rel_err));
        }
        lines.push(format!("{} {scope:?} checks worst {worst:.1e}", recs.len()));
    }
    let m = checks::model_check(&ModelConfig::micro(), None);
    ensure(m.passed, || {
        format!("model max_rel_err {:e} ({:?})", m.max_rel_err, m.error)
    })?;
    lines.push(format!("model {:.1e}", m.max_rel_err));
    Ok(lines.join(", "))
}

// 7
fn shape_contract() -> Outcome {
    let model = Model::<f32>::build(&ModelConfig {
        img_size: 224,
        ..ModelConfig::micro()
    })
    .map_err(|e| e.to_string())?;
    let c1 = model.cfg.c1;
    let mut g = Graph::new(&model.params);
    let x = Tensor::from_fn([2, 224, 224, 1], |i| ((i % 89) as f32 * 0.03).cos());
    let (a, b) = (g.input(x.clone()), g.input(x));
    let out = model.forward_graph(&mut g, a, b).map_err(|e| e.to_string())?;
    let want = [
        [2, 56, 56, c1],
        [2, 28, 28, 2 * c1],
        [2, 14, 14, 4 * c1],
        [2, 7, 7, 8 * c1],
    ];
    for (s, w) in out.stages.iter().zip(want) {
        ensure(g.shape(*s) == w, || format!("stage {:?}, expected {w:?}", g.shape(*s)))?;
    }
    let fused = out.fused.ok_or("no fusion output")?;
    ensure(g.shape(fused) == [2, 7, 7, 8 * c1], || {
        format!("fused {:?}", g.shape(fused))
    })?;
    ensure(g.shape(out.logits) == [2, 2], || {
        format!("logits {:?}", g.shape(out.logits))
    })?;
    Ok(format!("56/28/14/7 with C1={c1}, logits 2x2"))
}

// 8
fn fusion_necessity() -> Outcome {
    let mut spec = SyntheticSpec::new(SyntheticTask::XorCrossView, 32, 7);
    spec.noise_std = 0.0;
    let d = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 20,
        runs: 4,
        ..TrainConfig::default()
    };
    let rows = ablation_rows();
    let mut report = Vec::new();
    let mut failed = Vec::new();
    for (name, limit_ok) in [
        ("single_view_v2", (|m: f64| m <= 0.60) as fn(f64) -> bool),
        ("single_view_v1", |m| m <= 0.60),
        ("cross_full", |m| m >= 0.90),
    ] {
        let row = rows.iter().find(|r| r.name == name).expect("known row");
        let out = train_loop::<f32>(
            &row.apply(&ModelConfig::micro()),
            &cfg,
            &d.train,
            &d.val,
            &d.test,
            &mut |_| {},
        )
        .map_err(|e| e.to_string())?;
        let runs: Vec<String> = out.summary.test_auroc.iter().map(|v| format!("{v:.3}")).collect();
        let line = format!(
            "{name} {:.3}±{:.3} [{}]",
            out.summary.mean,
            out.summary.std,
            runs.join(" ")
        );
        if !limit_ok(out.summary.mean) {
            failed.push(line.clone());
        }
        report.push(line);
    }
    if failed.is_empty() {
        Ok(report.join("; "))
    } else {
        Err(format!("out of bounds: {}", failed.join("; ")))
    }
}

// 9
fn ablation_harness() -> Outcome {
    let d =
        gen_synthetic(&SyntheticSpec::new(SyntheticTask::SingleViewSufficient, 32, 7)).map_err(|e| e.to_string())?;
    let data = DataSplits {
        train: d.train,
        val: d.val,
        test: d.test,
    };
    let cfg = RunConfig {
        lr: 1e-3,
        epochs: 3,
        runs: 4,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let entries = commands::ablate(&cfg, &data, dir.path(), &mut |_| {}, &mut |_, _| {}).map_err(|e| e.to_string())?;
    let names: Vec<&str> = entries.iter().map(|e| e.row.name).collect();
    let want = [
        "single_view_v2",
        "single_view_v1",
        "early",
        "late",
        "cross_cvsm_concat",
        "cross_cvsm_add",
        "cross_mvcm",
        "cross_full",
    ];
    ensure(names == want, || format!("rows {names:?}"))?;
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).map_err(|e| e.to_string())?;
    ensure(csv.lines().count() == 9, || "ablation.csv does not have 8 rows".into())?;
    let low: Vec<String> = entries
        .iter()
        .filter(|e| e.mean < 0.90)
        .map(|e| format!("{} {:.3}", e.row.name, e.mean))
        .collect();
    ensure(low.is_empty(), || format!("below 0.90: {}", low.join(", ")))?;
    let min = entries.iter().map(|e| e.mean).fold(1.0, f64::min);
    Ok(format!("8 rows, lowest mean AUROC {min:.3}"))
}

// 10
fn performance_report() -> Outcome {
    let spec = BenchSpec {
        lens: vec![4096, 8192, 16384],
        states: vec![16],
        channels: vec![8],
        strategies: vec![
            ScanStrategy::Sequential,
            ScanStrategy::Chunked { chunk: 64 },
            ScanStrategy::Blelloch,
        ],
        warmup: 2,
        reps: 9,
        workers: 1,
        seed: 10,
        dtype: Precision::F32,
    };
    // The host is shared, so a burst of load can skew one whole length;
    // three independent sweeps and the median ratio per pair absorb that.
    let mut sweeps = Vec::new();
    for _ in 0..3 {
        sweeps.push(bench::run(&spec).map_err(|e| e.to_string())?);
    }
    let dirty: Vec<String> = sweeps
        .iter()
        .flatten()
        .filter(|r| !(r.max_err_vs_seq <= 1e-5))
        .map(|r| format!("{} L={} err {:e}", r.strategy, r.len, r.max_err_vs_seq))
        .collect();
    ensure(dirty.is_empty(), || format!("oracle mismatch: {}", dirty.join(", ")))?;
    let median3 = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let per_sweep: Vec<_> = sweeps.iter().map(|rows| bench::doubling_ratios(rows)).collect();
    ensure(per_sweep.iter().all(|r| r.len() == 2), || {
        "missing doubling pairs".into()
    })?;
    let ratios: Vec<(usize, f64)> = (0..2)
        .map(|i| {
            (
                per_sweep[0][i].0 .0,
                median3(per_sweep.iter().map(|r| r[i].1).collect()),
            )
        })
        .collect();
    let bad: Vec<String> = ratios
        .iter()
        .filter(|(_, r)| !(1.6..=2.6).contains(r))
        .map(|(l, r)| format!("L={l}: {r:.2}"))
        .collect();
    ensure(bad.is_empty(), || {
        format!("t(2L)/t(L) out of [1.6, 2.6]: {}", bad.join(", "))
    })?;
    let at = |s: &str| {
        median3(
            sweeps
                .iter()
                .flatten()
                .filter(|r| r.strategy == s && r.len == 16384)
                .map(|r| r.wall_ns_per_element)
                .collect(),
        )
    };
    let seq = at("sequential");
    let ratio_text: Vec<String> = ratios.iter().map(|(l, r)| format!("{l}->{}: {r:.2}", 2 * l)).collect();
    Ok(format!(
        "t(2L)/t(L) {}; speedup at L=16384 (1 worker): chunked {:.2}x, blelloch {:.2}x",
        ratio_text.join(", "),
        seq / at("chunked"),
        seq / at("blelloch")
    ))
}

// 11
fn determinism_and_persistence() -> Outcome {
    let mut spec = SyntheticSpec::new(SyntheticTask::XorCrossView, 32, 11);
    spec.n_train = 24;
    spec.n_val = 16;
    spec.n_test = 16;
    let d = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 2,
        runs: 1,
        ..TrainConfig::default()
    };
    let mc = ModelConfig::micro();
    let go = || train_run::<f32>(&mc, &cfg, 0, &d.train, &d.val, &d.test, &mut |_| {}).map_err(|e| e.to_string());
    let (a, b) = (go()?, go()?);
    let (ca, cb) = (checkpoint::encode(&a.params), checkpoint::encode(&b.params));
    ensure(ca == cb, || "checkpoints differ between identical runs".into())?;

    let back = checkpoint::decode::<f32>(&ca)?;
    for ((n, t), (m, u)) in back.iter().zip(a.params.iter()) {
        let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(n == m && t.shape() == u.shape() && bits(t) == bits(u), || {
            format!("{n} changed in round trip")
        })?;
    }
    let wide = Model::<f64>::build(&mc).map_err(|e| e.to_string())?;
    let wb = checkpoint::encode(&wide.params);
    let wback = checkpoint::decode::<f64>(&wb)?;
    ensure(
        wback
            .iter()
            .zip(wide.params.iter())
            .all(|((_, t), (_, u))| t.data() == u.data()),
        || "64-bit round trip changed values".into(),
    )?;

    let bytes = dataset::encode(&d.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let cut = rng.gen_range(0..bytes.len());
        let r = std::panic::catch_unwind(|| dataset::decode(&bytes[..cut]));
        ensure(matches!(r, Ok(Err(_))), || {
            format!("truncation at {cut} not rejected cleanly")
        })?;
    }
    ensure(dataset::decode(&bytes).as_ref() == Ok(&d.train), || {
        "intact file did not load".into()
    })?;
    Ok(format!(
        "checkpoint {} bytes identical; 100/100 truncations rejected",
        ca.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("discretization", discretization, Duration::from_secs(1)),
        (
            "recurrence vs convolution oracle",
            recurrence_vs_convolution,
            Duration::from_secs(10),
        ),
        (
            "parallel scan equivalence",
            parallel_equivalence,
            Duration::from_secs(10),
        ),
        ("channel interleave", interleave_routing, Duration::from_secs(1)),
        ("shared fused decoding", shared_decoding, Duration::MAX),
        ("gradient correctness", gradient_correctness, Duration::from_secs(300)),
        ("shape contract", shape_contract, Duration::MAX),
        ("fusion necessity (xor)", fusion_necessity, Duration::from_secs(15 * 60)),
        ("ablation harness", ablation_harness, Duration::from_secs(45 * 60)),
        ("performance report", performance_report, Duration::MAX),
        (
            "determinism and persistence",
            determinism_and_persistence,
            Duration::MAX,
        ),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, f, budget)) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = t.elapsed();
        let result = match result {
            Ok(d) if elapsed > budget => Err(format!(
                "{d}; took {:.1} s, budget {} s",
                elapsed.as_secs_f64(),
                budget.as_secs()
            )),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} ({:.1} s)", elapsed.as_secs_f64()),
            Err(detail) => {
                failures += 1;
                println!("FAIL {id:>2} {name}: {detail} ({:.1} s)", elapsed.as_secs_f64());
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
