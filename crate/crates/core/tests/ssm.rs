use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfmamba::ssm::{discretize, lti_conv_oracle, scan_selected, ScanStrategy, Selection};
use xfmamba::{Real, Tensor};

#[test]
fn zoh_against_extended_precision() {
    let s = discretize(&[-2.0f64], &[3.0], 0.1).unwrap();
    assert!((s.a_bar[0] - 0.818_730_753_077_981_86).abs() < 1e-15);
    assert!((s.b_bar[0] - 0.271_903_870_383_027_21).abs() < 1e-15);
    let s = discretize(&[-1e-9f64], &[2.0], 0.5).unwrap();
    assert!((s.b_bar[0] - 1.0).abs() < 1e-9);
}

/// A time-invariant problem: per-channel step sizes, shared `B`, `C`.
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

    fn state(&self) -> usize {
        self.b.len()
    }

    fn scan<T: Real>(&self, strategy: ScanStrategy) -> Vec<f64> {
        let t = |v: &[f64], shape: Vec<usize>| Tensor::new(shape, v.iter().map(|&z| T::of(z)).collect()).unwrap();
        let (l, c, n) = (self.len, self.channels, self.state());
        let repeat = |v: &[f64]| v.repeat(l);
        let sel = Selection {
            b: t(&repeat(&self.b), vec![l, n]),
            c: t(&repeat(&self.c), vec![l, n]),
            delta: t(&repeat(&self.delta), vec![l, c]),
        };
        let y = scan_selected(
            &t(&self.x, vec![l, c]),
            &t(&self.a, vec![c, n]),
            &t(&self.d, vec![c]),
            &sel,
            strategy,
        );
        y.unwrap().data().iter().map(|v| v.as_f64()).collect()
    }

    fn oracle(&self) -> Vec<f64> {
        let (l, c, n) = (self.len, self.channels, self.state());
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

/// `max |a - b| / max |b|` over the whole output.
fn normwise(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    num / b.iter().map(|v| v.abs()).fold(1e-300, f64::max)
}

#[test]
fn recurrence_equals_convolution_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (l, c, n) = (rng.gen_range(1..=64), rng.gen_range(1..=3), rng.gen_range(1..=16));
        let p = Lti::random(&mut rng, l, c, n);
        let oracle = p.oracle();
        worst.0 = worst.0.max(normwise(&p.scan::<f64>(ScanStrategy::Sequential), &oracle));
        worst.1 = worst.1.max(normwise(&p.scan::<f32>(ScanStrategy::Sequential), &oracle));
    }
    assert!(worst.0 <= 1e-10, "64-bit {:e}", worst.0);
    assert!(worst.1 <= 1e-5, "32-bit {:e}", worst.1);
}

#[test]
fn every_strategy_matches_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (l, c, n) = (rng.gen_range(1..=150), rng.gen_range(1..=4), rng.gen_range(1..=8));
        let p = Lti::random(&mut rng, l, c, n);
        let seq = p.scan::<f64>(ScanStrategy::Sequential);
        let mut strategies: Vec<ScanStrategy> = [1, 2, 7, 64].map(|chunk| ScanStrategy::Chunked { chunk }).into();
        strategies.push(ScanStrategy::Blelloch);
        for s in strategies {
            for (a, b) in p.scan::<f64>(s).iter().zip(&seq) {
                assert!((a - b).abs() / (b.abs() + 1e-9) <= 1e-6, "{s:?}");
            }
        }
    }
}

proptest! {
    #[test]
    fn states_stay_within_the_geometric_bound(seed in any::<u64>(), len in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Lti::random(&mut rng, len, 1, 3);
        // isolate the state: C = e_i picks component i, D = 0
        p.d = vec![0.0];
        let n = p.state();
        let step = discretize(&p.a, &p.b, p.delta[0]).unwrap();
        let xmax = p.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            p.c = (0..n).map(|j| (i == j) as u8 as f64).collect();
            let bound = xmax * step.b_bar[i].abs() / (1.0 - step.a_bar[i]);
            prop_assert!(step.a_bar[i] > 0.0 && step.a_bar[i] < 1.0);
            for h in p.scan::<f64>(ScanStrategy::Sequential) {
                prop_assert!(h.abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn later_inputs_never_affect_earlier_outputs(seed in any::<u64>(), len in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Lti::random(&mut rng, len, 2, 4);
        let before = p.scan::<f64>(ScanStrategy::Sequential);
        let t = rng.gen_range(1..len);
        p.x[t * 2] += 10.0;
        let after = p.scan::<f64>(ScanStrategy::Sequential);
        prop_assert_eq!(&before[..t * 2], &after[..t * 2]);
        prop_assert_ne!(before[t * 2], after[t * 2]);
    }
}
