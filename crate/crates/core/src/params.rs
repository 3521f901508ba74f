//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{gradcheck, GradcheckOptions, GradcheckReport, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Every scalar in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Replaces a tensor by name, requiring an identical shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::dim("param_store", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Deterministic parameter initialisation.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to ±2 std by resampling.
    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, 1.0).expect("valid normal");
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let v: f64 = dist.sample(&mut self.rng);
            if v.abs() <= 2.0 {
                break T::of(v * std);
            }
        })
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let dist = Uniform::new(lo, hi);
        Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(&mut self.rng)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// A tape with parameters bound lazily as leaves.
pub struct Graph<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// The leaf for `id`, recorded on first use. Tied parameters share one
    /// leaf and therefore accumulate one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// A graph over an existing tape whose leaves `vars[i]` stand for the
    /// `i`-th registered parameter.
    pub fn with_tape(tape: Tape<T>, store: &'s ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "one leaf per parameter");
        Graph {
            tape,
            store,
            bound: vars.iter().copied().map(Some).collect(),
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients indexed by [`ParamId`]; `None` for unused parameters.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}

/// [`gradcheck`] over every tensor of `store`, with `f` recording the
/// program on a [`Graph`]. `worst_param` in the report indexes `store`.
pub fn gradcheck_store<F>(store: &ParamStore<f64>, f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let tensors: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    gradcheck(
        |tape, vars| {
            let mut g = Graph::with_tape(std::mem::take(tape), store, vars);
            let out = f(&mut g);
            *tape = std::mem::take(&mut g.tape);
            out
        },
        &tensors,
        opts,
    )
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
