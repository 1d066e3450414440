//! Recording tape and reverse-mode gradient propagation.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Nodes only reference earlier nodes,
//! so the tape is topologically ordered by construction and `backward`
//! walks it once from the end.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    /// Identical shapes.
    Same,
    /// Right shape is a suffix of the left; repeated over leading dims.
    Leading,
    /// Right operand holds a single value.
    Scalar,
}

/// Outer/axis/inner split of a shape around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` carries its own batch dimension.
    pub batched_rhs: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Constant,
    Leaf,
    Param,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    MatMul(Var, Var, MatDims),
    Conv3d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var, AxisSplit),
    LayerNorm {
        x: Var,
        split: AxisSplit,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        split: AxisSplit,
        start: usize,
        len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Upsample {
        x: Var,
        planes: usize,
        dims: [usize; 3],
        factor: usize,
    },
    External {
        x: Var,
        grad: Tensor<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one `backward` pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free variable whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradients of the scalar `loss` with respect to every leaf and
    /// parameter node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            // Only leaves keep their gradient; intermediates are released.
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and accumulates parameter gradients into `store`.
    ///
    /// Gradient buffers are not reset, so repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Add(a, b, bc) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || reduce_bcast(gd, self.value(*b).len(), *bc));
            }
            Op::Sub(a, b, bc) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || {
                    reduce_bcast(gd, self.value(*b).len(), *bc)
                        .into_iter()
                        .map(|v| -v)
                        .collect()
                });
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                self.acc(grads, *a, || {
                    gd.iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * bv[bcast_index(j, nb, *bc)])
                        .collect()
                });
                self.acc(grads, *b, || {
                    let prod: Vec<T> = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    reduce_bcast(&prod, nb, *bc)
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || gd.iter().map(|&v| v * *c).collect()),
            Op::MatMul(a, b, dims) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, || kernels::matmul_grad_lhs(gd, bv, dims));
                self.acc(grads, *b, || kernels::matmul_grad_rhs(av, gd, dims));
            }
            Op::Conv3d { x, w, bias, geom } => {
                let need_dx = self.needs(*x);
                let need_dw = self.needs(*w);
                let (dx, dw, db) = conv::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, || dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, || dw);
                }
                if let Some(b) = bias {
                    self.acc(grads, *b, || db);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, || {
                    gd.iter()
                        .zip(av)
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect()
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, || {
                    gd.iter()
                        .zip(av)
                        .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                self.acc(grads, *a, || {
                    gd.iter()
                        .zip(yv)
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect()
                });
            }
            Op::Softmax(a, split) => {
                self.acc(grads, *a, || kernels::softmax_backward(node.value.data(), gd, *split));
            }
            Op::LayerNorm { x, split, inv_std } => {
                self.acc(grads, *x, || {
                    kernels::layernorm_backward(node.value.data(), gd, inv_std, *split)
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, || gd.to_vec()),
            Op::Permute { x, perm } => {
                let inverse = kernels::invert_perm(perm);
                self.acc(grads, *x, || kernels::permute(gd, node.value.shape(), &inverse));
            }
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (p, &c) in parts.iter().zip(chunks) {
                    self.acc(grads, *p, || {
                        let mut out = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            out.extend_from_slice(&gd[o * total + offset..o * total + offset + c]);
                        }
                        out
                    });
                    offset += c;
                }
            }
            Op::Slice { x, split, start, len } => {
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); split.outer * split.len * split.inner];
                    let chunk = len * split.inner;
                    for o in 0..split.outer {
                        let dst = o * split.len * split.inner + start * split.inner;
                        out[dst..dst + chunk].copy_from_slice(&gd[o * chunk..(o + 1) * chunk]);
                    }
                    out
                });
            }
            Op::Embedding { table, ids } => {
                let tshape = self.shape(*table);
                let width = tshape[1];
                let rows = tshape[0];
                self.acc(grads, *table, || {
                    let mut out = vec![T::zero(); rows * width];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..width {
                            out[id * width + c] = out[id * width + c] + gd[r * width + c];
                        }
                    }
                    out
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, || vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let scale = gd[0] / T::from_f64(n as f64);
                self.acc(grads, *a, || vec![scale; n]);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    dims,
                );
                self.acc(grads, *q, || dq);
                self.acc(grads, *k, || dk);
                self.acc(grads, *v, || dv);
            }
            Op::Upsample {
                x,
                planes,
                dims,
                factor,
            } => {
                self.acc(grads, *x, || conv::upsample_nearest_backward(gd, *planes, *dims, *factor));
            }
            Op::External { x, grad } => {
                self.acc(grads, *x, || grad.data().iter().map(|&v| v * gd[0]).collect());
            }
        }
    }

    /// Adds a gradient contribution to `target` if it needs one.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], target: Var, contribution: impl FnOnce() -> Vec<T>) {
        if !self.needs(target) {
            return;
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => {
                let shape = self.shape(target);
                *slot = Some(Tensor::new(shape, c).expect("gradient has operand shape"));
            }
        }
    }
}

#[inline]
pub(crate) fn bcast_index(j: usize, nb: usize, bc: Bcast) -> usize {
    match bc {
        Bcast::Same => j,
        Bcast::Leading => j % nb,
        Bcast::Scalar => 0,
    }
}

fn reduce_bcast<T: Element>(g: &[T], nb: usize, bc: Bcast) -> Vec<T> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().fold(T::zero(), |a, &v| a + v)],
        Bcast::Leading => {
            let mut out = vec![T::zero(); nb];
            for chunk in g.chunks_exact(nb) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o = *o + v;
                }
            }
            out
        }
    }
}
