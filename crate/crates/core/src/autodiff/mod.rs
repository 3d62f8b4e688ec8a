//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! forward values its backward rule needs. [`Tape::backward`] walks the tape in
//! reverse and returns a [`GradStore`] keyed by parameter id.

pub mod gradcheck;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv2d_backward, conv_transpose2x_backward, slice_channels, ConvGeom, NormStats, Scalar, Shape4, Tensor4,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stable identity of a trainable parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2x,
    BatchNorm,
    Relu,
    MaxPool2x,
    Upsample2x,
    Concat,
    ChannelScale,
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    ConvTranspose2x {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool2x {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    ChannelScale {
        x: NodeId,
        s: NodeId,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2x { .. } => OpKind::ConvTranspose2x,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2x { .. } => OpKind::MaxPool2x,
            Op::Upsample2x { .. } => OpKind::Upsample2x,
            Op::Concat { .. } => OpKind::Concat,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor4<T>,
}

/// Gradients of trainable parameters. A missing entry means a zero gradient.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T> {
    grads: BTreeMap<ParamId, Tensor4<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        GradStore { grads: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor4<T>> {
        self.grads.get(&id)
    }

    /// Gradient of `id`, or zeros of `shape` when the parameter received none.
    pub fn get_or_zeros(&self, id: ParamId, shape: Shape4) -> Tensor4<T> {
        self.grads.get(&id).cloned().unwrap_or_else(|| Tensor4::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor4<T>) {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.grads.insert(id, grad);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor4<T>)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    labels: Vec<(usize, String)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Deliberately scales the parameter gradients produced by every `kind`
    /// node by 1.1. Exists so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Names the layer whose output is `id`; earlier unlabelled nodes belong to it.
    pub fn label(&mut self, id: NodeId, name: impl Into<String>) {
        self.labels.push((id.0, name.into()));
    }

    /// Layer owning node `id`, if any label follows it.
    pub fn layer_of(&self, id: NodeId) -> Option<&str> {
        self.labels
            .iter()
            .filter(|(i, _)| *i >= id.0)
            .min_by_key(|(i, _)| *i)
            .map(|(_, n)| n.as_str())
    }

    /// First recorded node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.nodes.iter().position(|n| !n.value.all_finite()).map(NodeId)
    }

    /// Fingerprint of every piecewise choice made during the forward pass
    /// (ReLU active sets and max-pool winners). Two passes with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { .. } => {
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2x { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op<T>, value: Tensor4<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn input(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Trainable parameter leaf. The same `id` may be recorded more than once;
    /// its gradients are summed.
    pub fn param(&mut self, id: ParamId, value: Tensor4<T>) -> NodeId {
        self.push(Op::Leaf { param: Some(id) }, value)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let out = tensor::ops::conv2d_raw(self.value(x), self.value(w), self.value(b).data(), geom)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom }, out))
    }

    pub fn conv_transpose2x(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::conv_transpose2x(self.value(x), self.value(w), self.value(b).data())?;
        Ok(self.push(Op::ConvTranspose2x { x, w, b }, out))
    }

    /// Batch normalization. With `stats` present and `train` set, batch
    /// statistics are used and the running estimates updated; otherwise the
    /// running estimates normalize.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut NormStats<T>,
        eps: T,
        train: bool,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != xs.c || bv.len() != xs.c || stats.mean.len() != xs.c {
            return Err(Error::shape(
                "batch_norm2d",
                format!("parameter vectors must have {} entries", xs.c),
            ));
        }
        let (mean, var) = if train {
            let (m, v) = tensor::ops::batch_moments(self.value(x));
            tensor::ops::update_running(stats, &m, &v, xs.n * xs.plane());
            (m, v)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = tensor::ops::apply_affine_norm(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: train,
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = tensor::relu(self.value(x));
        self.push(Op::Relu { x }, out)
    }

    pub fn maxpool2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = tensor::maxpool2x_with_argmax(self.value(x))?;
        Ok(self.push(Op::MaxPool2x { x, argmax }, out))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let out = tensor::upsample_nearest2x(self.value(x));
        self.push(Op::Upsample2x { x }, out)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat { a, b }, out))
    }

    /// Per-channel scaling of `x` by the vector held in node `s`.
    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let out = tensor::channel_scale(self.value(x), self.value(s).data())?;
        Ok(self.push(Op::ChannelScale { x, s }, out))
    }

    /// Gradient of `sum(seed ⊙ output)` with respect to every recorded node.
    pub fn backward_nodes(&self, output: NodeId, seed: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        if self.nodes.is_empty() {
            return Err(Error::shape("backward", "empty tape"));
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::shape(
                "backward",
                format!("seed shape {} != output shape {out_shape}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let faulty = self.fault == Some(node.op.kind());
            let bump = |t: Tensor4<T>| if faulty { t.scale(T::from_f64(1.1)) } else { t };
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), *geom, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, bump(dw));
                    accumulate(&mut grads, *b, bump(Tensor4::vector(&db)));
                }
                Op::ConvTranspose2x { x, w, b } => {
                    let (dx, dw, db) = conv_transpose2x_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, bump(dw));
                    accumulate(&mut grads, *b, bump(Tensor4::vector(&db)));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dgamma, dbeta) = batch_norm_backward(
                        self.value(*x),
                        self.value(*gamma).data(),
                        mean,
                        inv_std,
                        *batch_stats,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, bump(Tensor4::vector(&dgamma)));
                    accumulate(&mut grads, *beta, bump(Tensor4::vector(&dbeta)));
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2x { x, argmax } => {
                    let mut dx = Tensor4::zeros(self.value(*x).shape());
                    let data = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        data[src] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2x { x } => {
                    let xs = self.value(*x).shape();
                    let gs = g.shape();
                    let mut dx = Tensor4::zeros(xs);
                    let gd = g.data();
                    for (p, plane) in dx.data_mut().chunks_mut(xs.plane()).enumerate() {
                        let base = p * gs.plane();
                        for y in 0..gs.h {
                            for xx in 0..gs.w {
                                plane[(y / 2) * xs.w + xx / 2] += gd[base + y * gs.w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape().c;
                    let cb = self.value(*b).shape().c;
                    accumulate(&mut grads, *a, slice_channels(&g, 0, ca));
                    accumulate(&mut grads, *b, slice_channels(&g, ca, cb));
                }
                Op::ChannelScale { x, s } => {
                    let sv = self.value(*s).data();
                    let xv = self.value(*x);
                    let dx = tensor::channel_scale(&g, sv)?;
                    let xs = xv.shape();
                    let mut ds = vec![T::zero(); xs.c];
                    for (p, (gp, xp)) in g
                        .data()
                        .chunks(xs.plane())
                        .zip(xv.data().chunks(xs.plane()))
                        .enumerate()
                    {
                        ds[p % xs.c] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    accumulate(&mut grads, *x, dx);
                    let ds = Tensor4::from_vec(self.value(*s).shape(), ds)?;
                    accumulate(&mut grads, *s, bump(ds));
                }
            }
        }
        Ok(grads)
    }

    /// Parameter gradients of `sum(seed ⊙ output)`.
    pub fn backward(&self, output: NodeId, seed: &Tensor4<T>) -> Result<GradStore<T>> {
        let grads = self.backward_nodes(output, seed)?;
        let mut store = GradStore::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, grad) {
                store.accumulate(*id, g);
            }
        }
        Ok(store)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], id: NodeId, g: Tensor4<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            if existing.shape() == g.shape() {
                existing.add_assign(&g);
            } else {
                // Vector leaves may be stored with a different 4-D layout.
                let data = g.into_vec();
                for (a, b) in existing.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn batch_norm_backward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    batch_stats: bool,
    g: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let m = T::from_f64((s.n * plane) as f64);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                let xhat = (x.data()[i] - mean[c]) * inv_std[c];
                dgamma[c] += g.data()[i] * xhat;
                dbeta[c] += g.data()[i];
            }
        }
    }
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let scale = gamma[c] * inv_std[c];
            for i in start..start + plane {
                let gi = g.data()[i];
                dx.data_mut()[i] = if batch_stats {
                    let xhat = (x.data()[i] - mean[c]) * inv_std[c];
                    scale * (gi - dbeta[c] / m - xhat * dgamma[c] / m)
                } else {
                    scale * gi
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
