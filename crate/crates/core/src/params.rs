//! Named parameter storage shared by every model component.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group. The backbone is the downsampling half of the point
/// feature extractor; everything else trains at the head rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

/// Parameters in registration order. Models train `f32` stores; a store
/// cast to `f64` drives double-precision gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// The same parameters converted to another value type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    group: e.group,
                })
                .collect(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Places every parameter on the tape. With `trainable == false` they
    /// become constants and the forward pass records no gradient work.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), trainable))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for leaves created outside [`ParamStore::bind`], one per
    /// parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss never touched get zeros.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| match g.grad(v) {
                Some(d) => d.to_vec(),
                None => vec![T::ZERO; g.value(v).len()],
            })
            .collect()
    }
}

/// Registers a dense layer: weight `in x out` (scaled normal init) and a zero bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let std = libm::sqrtf(2.0 / inputs.max(1) as f32);
        let weight = store.add(
            alloc::format!("{name}.weight"),
            Tensor::randn(&[inputs, outputs], std, rng),
            group,
        );
        let bias = store.add(
            alloc::format!("{name}.bias"),
            Tensor::zeros(&[outputs]),
            group,
        );
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> crate::Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row(y, p.var(self.bias))
    }
}

/// Row layer normalization with a learned gain and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f32 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, group: ParamGroup) -> Self {
        let gain = store.add(
            alloc::format!("{name}.gain"),
            Tensor::full(&[width], 1.0),
            group,
        );
        let bias = store.add(
            alloc::format!("{name}.bias"),
            Tensor::zeros(&[width]),
            group,
        );
        Norm { gain, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> crate::Result<Var> {
        let n = g.layer_norm(x, NORM_EPS);
        let n = g.mul_row(n, p.var(self.gain))?;
        g.add_row(n, p.var(self.bias))
    }
}
