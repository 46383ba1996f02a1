//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! result value and a one-shot backward closure. [`Tape::backward`] walks the
//! nodes in reverse, accumulating adjoints into a [`Gradients`] table indexed
//! by [`Var`]. All arrays are kept in standard (row-major, contiguous) layout
//! so that reshapes and raw-slice kernels stay cheap.
//!
//! Elementwise binary ops broadcast NumPy-style (trailing axes aligned);
//! their backward pass sums gradients over the broadcast axes.

mod spatial;

use ndarray::{ArrayD, Axis, IxDyn};

/// Dynamically shaped double-precision array, the tape's only value type.
pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Kind {
    /// Input whose gradient the caller wants.
    Leaf,
    /// Value with no gradient tracking (data, masks, detached stats).
    Constant,
    /// Interior node with a pending backward closure.
    Op(BackFn),
}

type BackFn = Box<dyn FnOnce(&Arr, &Tape) -> Vec<(Var, Arr)>>;

struct Node {
    value: Arr,
    kind: Kind,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape for inference: values only, no backward graph.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input node.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.nodes.push(Node { value: standard(value), kind: Kind::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Untracked value node.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.nodes.push(Node { value: standard(value), kind: Kind::Constant });
        Var(self.nodes.len() - 1)
    }

    /// 0-d constant.
    pub fn scalar(&mut self, c: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), c))
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.first().expect("empty array has no scalar value")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_op(
        &mut self,
        value: Arr,
        back: impl FnOnce(&Arr, &Tape) -> Vec<(Var, Arr)> + 'static,
    ) -> Var {
        let kind = if self.grad_enabled { Kind::Op(Box::new(back)) } else { Kind::Constant };
        self.nodes.push(Node { value: standard(value), kind });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root` (summed if non-scalar). Backward closures are
    /// consumed; call once per tape.
    pub fn backward(&mut self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let kind = std::mem::replace(&mut self.nodes[i].kind, Kind::Constant);
            match kind {
                Kind::Leaf => {
                    self.nodes[i].kind = Kind::Leaf;
                    grads[i] = Some(g);
                }
                Kind::Constant => {}
                Kind::Op(f) => {
                    for (parent, contrib) in f(&g, self) {
                        let contrib = standard(contrib);
                        debug_assert_eq!(
                            contrib.shape(),
                            self.nodes[parent.0].value.shape(),
                            "gradient shape mismatch at node {}",
                            parent.0
                        );
                        match &mut grads[parent.0] {
                            Some(acc) => *acc += &contrib,
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn standard(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// NumPy-style broadcast shape of two shapes (trailing axes aligned).
fn bshape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(da == db || da == 1 || db == 1, "incompatible broadcast: {a:?} vs {b:?}");
        out[i] = da.max(db);
    }
    out
}

fn bin_elem<F: Fn(f64, f64) -> f64>(x: &Arr, y: &Arr, f: F) -> Arr {
    let sh = bshape(x.shape(), y.shape());
    let xb = x.broadcast(IxDyn(&sh)).expect("broadcast lhs");
    let yb = y.broadcast(IxDyn(&sh)).expect("broadcast rhs");
    let mut out = Arr::zeros(IxDyn(&sh));
    ndarray::Zip::from(&mut out).and(&xb).and(&yb).for_each(|o, &a, &b| *o = f(a, b));
    out
}

/// Sum `grad` down to `shape` (undo broadcasting).
fn reduce_to(grad: &Arr, shape: &[usize]) -> Arr {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = bin_elem(self.value(a), self.value(b), |x, y| x + y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push_op(out, move |g, _| vec![(a, reduce_to(g, &sa)), (b, reduce_to(g, &sb))])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = bin_elem(self.value(a), self.value(b), |x, y| x - y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push_op(out, move |g, _| {
            let gb = reduce_to(g, &sb);
            vec![(a, reduce_to(g, &sa)), (b, -gb)]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = bin_elem(self.value(a), self.value(b), |x, y| x * y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push_op(out, move |g, t| {
            let ga = bin_elem(g, t.value(b), |u, v| u * v);
            let gb = bin_elem(g, t.value(a), |u, v| u * v);
            vec![(a, reduce_to(&ga, &sa)), (b, reduce_to(&gb, &sb))]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = bin_elem(self.value(a), self.value(b), |x, y| x / y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push_op(out, move |g, t| {
            let ga = bin_elem(g, t.value(b), |u, v| u / v);
            let gb_full = {
                let num = bin_elem(g, t.value(a), |u, v| u * v);
                let den = bin_elem(t.value(b), t.value(b), |u, v| u * v);
                bin_elem(&num, &den, |u, v| -u / v)
            };
            vec![(a, reduce_to(&ga, &sa)), (b, reduce_to(&gb_full, &sb))]
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push_op(out, move |g, _| vec![(a, g.mapv(|x| x * c))])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push_op(out, move |g, _| vec![(a, g.clone())])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        let yc = y.clone();
        self.push_op(y, move |g, _| vec![(a, g * &yc)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::ln);
        self.push_op(y, move |g, t| vec![(a, bin_elem(g, t.value(a), |u, v| u / v))])
    }

    /// Square root with a guarded derivative at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::sqrt);
        let yc = y.clone();
        self.push_op(y, move |g, _| {
            vec![(a, bin_elem(g, &yc, |u, v| 0.5 * u / v.max(1e-12)))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(sigmoid_scalar);
        let yc = y.clone();
        self.push_op(y, move |g, _| vec![(a, bin_elem(g, &yc, |u, v| u * v * (1.0 - v)))])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        let yc = y.clone();
        self.push_op(y, move |g, _| vec![(a, bin_elem(g, &yc, |u, v| u * (1.0 - v * v)))])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * sigmoid_scalar(x));
        self.push_op(y, move |g, t| {
            let d = t.value(a).mapv(|x| {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            });
            vec![(a, g * &d)]
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let out = av.dot(&bv).into_dyn();
        self.push_op(out, move |g, t| {
            let g2 = as2(g);
            let av = as2(t.value(a));
            let bv = as2(t.value(b));
            let ga = g2.dot(&bv.t()).into_dyn();
            let gb = av.t().dot(&g2).into_dyn();
            vec![(a, ga), (b, gb)]
        })
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let out = as2(self.value(a)).t().as_standard_layout().into_owned().into_dyn();
        self.push_op(out, move |g, _| {
            vec![(a, as2(g).t().as_standard_layout().into_owned().into_dyn())]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(a).to_vec();
        let out = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_op(out, move |g, _| {
            vec![(a, g.clone().into_shape_with_order(IxDyn(&old)).unwrap())]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape: Vec<usize> = self.shape(a).to_vec();
        let out = Arr::from_elem(IxDyn(&[]), s);
        self.push_op(out, move |g, _| {
            let gs = *g.first().unwrap();
            vec![(a, Arr::from_elem(IxDyn(&shape), gs))]
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis_op(&mut self, a: Var, axis: usize, keepdims: bool) -> Var {
        let mut out = self.value(a).sum_axis(Axis(axis));
        if keepdims {
            out = out.insert_axis(Axis(axis));
        }
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(out.into_dyn(), move |g, _| {
            let gk = if keepdims { g.clone() } else { g.clone().insert_axis(Axis(axis)) };
            let gb = gk.broadcast(IxDyn(&shape)).expect("sum_axis backward broadcast").to_owned();
            vec![(a, gb)]
        })
    }

    pub fn mean_axis_op(&mut self, a: Var, axis: usize, keepdims: bool) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis_op(a, axis, keepdims);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis` (max shift is a detached
    /// constant, which leaves the exact gradient unchanged).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let maxes = self
            .value(a)
            .map_axis(Axis(axis), |lane| lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .insert_axis(Axis(axis));
        let m = self.constant(maxes.into_dyn());
        let shifted = self.sub(a, m);
        let e = self.exp(shifted);
        let s = self.sum_axis_op(e, axis, true);
        self.div(e, s)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ids: Vec<Var> = parts.to_vec();
        let lens: Vec<usize> = parts.iter().map(|&v| self.shape(v)[axis]).collect();
        self.push_op(out, move |g, _| {
            let mut offset = 0usize;
            let mut contribs = Vec::with_capacity(ids.len());
            for (i, &v) in ids.iter().enumerate() {
                let seg = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + lens[i]))
                    .to_owned();
                offset += lens[i];
                contribs.push((v, seg));
            }
            contribs
        })
    }

    /// Layer normalization over the last axis of a rank-2 `[rows, features]`
    /// node, with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let mu = self.mean_axis_op(x, 1, true);
        let xc = self.sub(x, mu);
        let sq = self.square(xc);
        let var = self.mean_axis_op(sq, 1, true);
        let ve = self.add_scalar(var, eps);
        let sd = self.sqrt(ve);
        let xhat = self.div(xc, sd);
        let scaled = self.mul(xhat, gamma);
        self.add(scaled, beta)
    }

    /// Group normalization of a `[C, H, W]` node with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let shape: Vec<usize> = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "group_norm expects [C, H, W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(c % groups == 0, "channels not divisible by groups");
        let grouped = self.reshape(x, &[groups, (c / groups) * h * w]);
        let mu = self.mean_axis_op(grouped, 1, true);
        let xc = self.sub(grouped, mu);
        let sq = self.square(xc);
        let var = self.mean_axis_op(sq, 1, true);
        let ve = self.add_scalar(var, eps);
        let sd = self.sqrt(ve);
        let xhat = self.div(xc, sd);
        let back = self.reshape(xhat, &[c, h, w]);
        let gq = self.reshape(gamma, &[c, 1, 1]);
        let bq = self.reshape(beta, &[c, 1, 1]);
        let scaled = self.mul(back, gq);
        self.add(scaled, bq)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("expected rank-2 array")
}

pub(crate) fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix3>().expect("expected rank-3 array")
}
