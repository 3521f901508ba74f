use crate::autodiff::{ScanVars, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, Initializer, ParamId, ParamStore};
use crate::tensor::Real;

/// A selective SSM whose parameters live in a [`ParamStore`].
///
/// `w_c` is `None` for instances that are always decoded with an output
/// matrix produced elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmLayer {
    pub channels: usize,
    pub state: usize,
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_b: ParamId,
    pub w_c: Option<ParamId>,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
}

impl SsmLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        with_c: bool,
        init: &mut Initializer,
    ) -> Self {
        let (a_log, d, w_b, w_c, w_delta, delta_bias) = super::init_tensors::<T>(channels, state, init);
        SsmLayer {
            channels,
            state,
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            d: store.add(format!("{prefix}.d"), d),
            w_b: store.add(format!("{prefix}.w_b"), w_b),
            w_c: with_c.then(|| store.add(format!("{prefix}.w_c"), w_c)),
            w_delta: store.add(format!("{prefix}.w_delta"), w_delta),
            delta_bias: store.add(format!("{prefix}.delta_bias"), delta_bias),
        }
    }

    /// Trainable scalars held by this instance.
    pub fn num_params(&self) -> usize {
        let (c, n) = (self.channels, self.state);
        let proj = if self.w_c.is_some() { 2 } else { 1 };
        c * n + c + proj * c * n + c * c + c
    }

    /// `C_t = x_t W_C` for `x: [B, L, C]`.
    pub fn project_c<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w_c = self
            .w_c
            .ok_or_else(|| Error::contract("ssm_layer", "instance has no output projection"))?;
        let w = g.param(w_c);
        g.matmul(x, w)
    }

    /// Scans `x: [B, L, C]` with this instance's `A`, `D`, `B_t`, `Δ_t` and
    /// the given output matrix `c: [B, L, N]`.
    pub fn scan_with_c<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, c: Var) -> Result<Var> {
        let w_b = g.param(self.w_b);
        let b = g.matmul(x, w_b)?;
        let w_delta = g.param(self.w_delta);
        let bias = g.param(self.delta_bias);
        let pre = g.matmul(x, w_delta)?;
        let pre = g.add_bias(pre, bias)?;
        let delta = g.softplus(pre);
        let a_log = g.param(self.a_log);
        let e = g.exp(a_log);
        let a = g.scale(e, -T::one());
        let d = g.param(self.d);
        g.selective_scan(ScanVars { x, delta, a, b, c, d })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = self.project_c(g, x)?;
        self.scan_with_c(g, x, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{selective_scan_seq, SsmParams};
    use crate::tensor::Tensor;

    #[test]
    fn graph_layer_matches_pure_scan() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(3);
        let layer = SsmLayer::new(&mut store, "s", 3, 4, true, &mut init);
        // make the projections non-trivial
        for t in store.tensors_mut() {
            let n = t.len();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += ((i * 7 + n) as f64 * 0.37).sin() * 0.3;
            }
        }
        let p = SsmParams {
            a_log: store.get(layer.a_log).clone(),
            d: store.get(layer.d).clone(),
            w_b: store.get(layer.w_b).clone(),
            w_c: store.get(layer.w_c.unwrap()).clone(),
            w_delta: store.get(layer.w_delta).clone(),
            delta_bias: store.get(layer.delta_bias).clone(),
        };
        let x = Tensor::from_fn([2, 6, 3], |i| (i as f64 * 0.9).cos());
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, xv).unwrap();
        let want = selective_scan_seq(&x, &p).unwrap();
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert_eq!(layer.num_params(), store.num_scalars());
    }
}
