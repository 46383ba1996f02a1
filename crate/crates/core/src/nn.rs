//! Named parameter storage and the small layer vocabulary built on the tape.
//!
//! A model owns a [`ParamSet`]; every forward pass binds the whole set onto a
//! fresh [`Tape`] as leaves and layers address their tensors through [`PId`]
//! handles, so the same structs serve training, inference, and checkpointing.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Arr, Tape, Var};

/// Handle to one tensor in a [`ParamSet`], stable across binds.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PId(usize);

/// Insertion-ordered collection of named parameter tensors.
#[derive(Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arr>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> PId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        PId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: PId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<PId> {
        self.index.get(name).copied().map(PId)
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.values.len()).map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Push every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// The [`Var`]s of one [`ParamSet::bind`] call, indexed by [`PId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Scoped constructor that names tensors `prefix.local` and He-initializes
/// weights from the shared rng.
pub struct Build<'a> {
    params: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Build<'a> {
    pub fn new(params: &'a mut ParamSet, rng: &'a mut ChaCha8Rng) -> Self {
        Build {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Build<'_> {
        let prefix = self.qualify(name);
        Build {
            params: self.params,
            rng: self.rng,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> PId {
        let dist = Normal::new(0.0, std).expect("invalid init std");
        let arr = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(self.rng));
        self.params.add(&self.qualify(name), arr)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> PId {
        self.params.add(&self.qualify(name), Arr::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> PId {
        self.params
            .add(&self.qualify(name), Arr::from_elem(IxDyn(shape), 1.0))
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        let std = (2.0 / cin as f64).sqrt();
        let mut b = self.scope(name);
        Linear {
            w: b.normal("w", &[cout, cin], std),
            b: b.zeros("b", &[cout]),
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let mut b = self.scope(name);
        Conv2d {
            w: b.normal("w", &[cout, cin, k, k], std),
            b: b.zeros("b", &[cout]),
            stride,
            pad,
        }
    }

    pub fn group_norm(&mut self, name: &str, c: usize, groups: usize) -> GroupNorm {
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let mut b = self.scope(name);
        GroupNorm {
            g: b.ones("g", &[c]),
            b: b.zeros("b", &[c]),
            groups,
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> LayerNorm {
        let mut b = self.scope(name);
        LayerNorm {
            g: b.ones("g", &[c]),
            b: b.zeros("b", &[c]),
        }
    }

    /// Two-layer token MLP `cin -> hidden -> cout` with SiLU in between.
    pub fn mlp(&mut self, name: &str, cin: usize, hidden: usize, cout: usize) -> Mlp {
        let mut b = self.scope(name);
        Mlp {
            fc1: b.linear("fc1", cin, hidden),
            fc2: b.linear("fc2", hidden, cout),
        }
    }
}

/// Dense layer over row vectors: `[rows, cin] -> [rows, cout]`.
pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let wt = t.transpose2(p.var(self.w));
        let y = t.matmul(x, wt);
        t.add(y, p.var(self.b))
    }
}

/// 2-D convolution layer over `[Cin,H,W]` maps.
pub struct Conv2d {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

pub struct GroupNorm {
    pub g: PId,
    pub b: PId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.group_norm(x, p.var(self.g), p.var(self.b), self.groups, 1e-5)
    }
}

/// Normalization over the trailing feature axis of `[rows, C]`.
pub struct LayerNorm {
    pub g: PId,
    pub b: PId,
}

impl LayerNorm {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.layer_norm(x, p.var(self.g), p.var(self.b), 1e-5)
    }
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(t, p, x);
        let h = t.silu(h);
        self.fc2.forward(t, p, h)
    }
}
