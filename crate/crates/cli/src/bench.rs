//! Scan throughput and accuracy sweep.
//!
//! Every configuration runs on random stable inputs at the requested
//! precision and is compared against a 64-bit sequential scan of the same
//! inputs. Timings are the median over repetitions after warm-up runs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xfmamba::ssm::kernel::{ScanInputs, ScanShape};
use xfmamba::ssm::{self, ScanStrategy};
use xfmamba::Real;

use crate::config::Precision;
use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub lens: Vec<usize>,
    pub states: Vec<usize>,
    pub channels: Vec<usize>,
    pub strategies: Vec<ScanStrategy>,
    pub warmup: usize,
    pub reps: usize,
    pub workers: usize,
    pub seed: u64,
    pub dtype: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "N")]
    pub state: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub strategy: &'static str,
    pub chunk: Option<usize>,
    /// Median wall time divided by `L·C·N` lane updates.
    pub wall_ns_per_element: f64,
    /// `max |y - y_ref| / (1 + |y_ref|)` against the 64-bit sequential scan.
    pub max_err_vs_seq: f64,
}

pub const CSV_HEADER: &str = "L,N,C,strategy,chunk,wall_ns_per_element,max_err_vs_seq";

struct Inputs {
    x: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl Inputs {
    fn random(s: ScanShape, rng: &mut ChaCha8Rng) -> Self {
        let mut u = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        Inputs {
            x: u(s.seq_len(), -1.0, 1.0),
            delta: u(s.seq_len(), 1e-3, 0.1),
            a: u(s.channels * s.state, 0.5, s.state as f64 + 0.5)
                .into_iter()
                .map(|v| -v)
                .collect(),
            b: u(s.len * s.state, -1.0, 1.0),
            c: u(s.len * s.state, -1.0, 1.0),
            d: u(s.channels, 0.5, 1.5),
        }
    }

    fn cast<T: Real>(&self) -> [Vec<T>; 6] {
        [&self.x, &self.delta, &self.a, &self.b, &self.c, &self.d].map(|v| v.iter().map(|&z| T::of(z)).collect())
    }
}

fn view<T>(v: &[Vec<T>; 6]) -> ScanInputs<'_, T> {
    ScanInputs {
        x: &v[0],
        delta: &v[1],
        a: &v[2],
        b: &v[3],
        c: &v[4],
        d: &v[5],
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn measure<T: Real>(
    inputs: &Inputs,
    shape: ScanShape,
    strategy: ScanStrategy,
    reference: &[f64],
    spec: &BenchSpec,
    pool: &rayon::ThreadPool,
) -> Result<(f64, f64)> {
    let bufs = inputs.cast::<T>();
    let inp = view(&bufs);
    let once = || pool.install(|| ssm::run(&inp, shape, strategy));
    let mut y = once()?;
    for _ in 1..spec.warmup {
        y = once()?;
    }
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t = Instant::now();
        y = once()?;
        times.push(t.elapsed().as_nanos() as f64);
    }
    let err = y
        .iter()
        .zip(reference)
        .map(|(p, s)| (p.as_f64() - s).abs() / (1.0 + s.abs()))
        .fold(0.0, f64::max);
    let lanes = (shape.len * shape.channels * shape.state) as f64;
    Ok((median(times) / lanes, err))
}

pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.reps < 5 {
        return Err(CliError::Usage("--reps must be at least 5".into()));
    }
    if spec.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    if [&spec.lens, &spec.states, &spec.channels]
        .iter()
        .any(|v| v.is_empty() || v.contains(&0))
    {
        return Err(CliError::Usage("--L, --N and --C need positive values".into()));
    }
    if spec
        .strategies
        .iter()
        .any(|s| matches!(s, ScanStrategy::Chunked { chunk: 0 }))
    {
        return Err(CliError::Usage("--chunks values must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", spec.workers)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::new();
    for &len in &spec.lens {
        for &state in &spec.states {
            for &channels in &spec.channels {
                let shape = ScanShape {
                    batch: 1,
                    len,
                    channels,
                    state,
                };
                let inputs = Inputs::random(shape, &mut rng);
                let reference = ssm::run(&view(&inputs.cast::<f64>()), shape, ScanStrategy::Sequential)?;
                for &strategy in &spec.strategies {
                    let (ns, err) = match spec.dtype {
                        Precision::F32 => measure::<f32>(&inputs, shape, strategy, &reference, spec, &pool)?,
                        Precision::F64 => measure::<f64>(&inputs, shape, strategy, &reference, spec, &pool)?,
                    };
                    rows.push(BenchRow {
                        len,
                        state,
                        channels,
                        strategy: strategy.name(),
                        chunk: match strategy {
                            ScanStrategy::Chunked { chunk } => Some(chunk),
                            _ => None,
                        },
                        wall_ns_per_element: ns,
                        max_err_vs_seq: err,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

pub fn to_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:>7} {:>4} {:>4} {:>10} {:>6} {:>12} {:>11}\n",
        "L", "N", "C", "strategy", "chunk", "ns/element", "max_err"
    );
    for r in rows {
        out += &format!(
            "{:>7} {:>4} {:>4} {:>10} {:>6} {:>12.3} {:>11.3e}\n",
            r.len,
            r.state,
            r.channels,
            r.strategy,
            r.chunk.map_or("-".to_string(), |c| c.to_string()),
            r.wall_ns_per_element,
            r.max_err_vs_seq
        );
    }
    out
}

/// `t(2L)/t(L)` for the sequential rows, keyed by `(L, N, C)`.
pub fn doubling_ratios(rows: &[BenchRow]) -> Vec<((usize, usize, usize), f64)> {
    let seq: Vec<&BenchRow> = rows.iter().filter(|r| r.strategy == "sequential").collect();
    let total = |r: &BenchRow| r.wall_ns_per_element * (r.len * r.channels * r.state) as f64;
    let mut out = Vec::new();
    for r in &seq {
        if let Some(r2) = seq
            .iter()
            .find(|q| q.len == 2 * r.len && q.state == r.state && q.channels == r.channels)
        {
            out.push(((r.len, r.state, r.channels), total(r2) / total(r)));
        }
    }
    out
}
