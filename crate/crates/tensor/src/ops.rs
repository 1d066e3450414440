//! Differentiable primitives recorded on a [`Tape`].

use crate::conv::{self, ConvGeom};
use crate::element::Element;
use crate::error::{invalid, shape_err, Result};
use crate::kernels;
use crate::tape::{AttnDims, AxisSplit, Bcast, MatDims, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

fn bcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if numel(b) == 1 {
        Some(Bcast::Scalar)
    } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Some(Bcast::Leading)
    } else {
        None
    }
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<AxisSplit> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range"), shape));
    }
    Ok(AxisSplit {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    })
}

impl<T: Element> Tape<T> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var, Bcast) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = bcast_kind(sa, sb).ok_or_else(|| shape_err(name, sa, sb))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(j, &x)| f(x, bv[crate::tape::bcast_index(j, nb, bc)]))
            .collect();
        let value = Tensor::new(sa, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op(a, b, bc), needs))
    }

    /// Elementwise sum; `b` may be a scalar or broadcast over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a), value).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// `[.., m, k] × [k, n]` with shared right operand, or
    /// `[batch, m, k] × [batch, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || shape_err("matmul", &sa, &sb);
        if sa.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (dims, out_shape) = match sb.len() {
            2 if sb[0] == k => {
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let mut out = sa.clone();
                *out.last_mut().expect("rank >= 2") = sb[1];
                (
                    MatDims {
                        batch: 1,
                        m: rows,
                        k,
                        n: sb[1],
                        batched_rhs: false,
                    },
                    out,
                )
            }
            3 if sa.len() == 3 && sa[0] == sb[0] && sb[1] == k => (
                MatDims {
                    batch: sa[0],
                    m,
                    k,
                    n: sb[2],
                    batched_rhs: true,
                },
                vec![sa[0], m, sb[2]],
            ),
            _ => return Err(err()),
        };
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), &dims);
        let value = Tensor::new(&out_shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b, dims), needs))
    }

    /// 3D convolution of `[batch, cin, d, h, w]` with `[cout, cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(shape_err("conv3d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv3d bias", self.shape(b), &[sw[0]]));
            }
        }
        let kernel = sw[2];
        let input = [sx[2], sx[3], sx[4]];
        let mut output = [0; 3];
        for (o, &n) in output.iter_mut().zip(&input) {
            *o = ConvGeom::out_extent(n, kernel, stride, padding)
                .ok_or_else(|| invalid("conv3d", "kernel larger than padded input or zero stride", &sx))?;
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            kernel,
            stride,
            padding,
            input,
            output,
        };
        let out = conv::conv3d_gemm(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[sx[0], sw[0], output[0], output[1], output[2]], out)?;
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv3d { x, w, bias, geom }, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let split = axis_split("softmax", &shape, axis)?;
        if split.len == 0 {
            return Err(invalid("softmax", "empty axis", &shape));
        }
        let out = kernels::softmax(self.value(a).data(), split);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a, split), needs))
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine terms).
    pub fn layernorm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let split = axis_split("layernorm", &shape, axis)?;
        if split.len == 0 {
            return Err(invalid("layernorm", "empty axis", &shape));
        }
        let (out, inv_std) = kernels::layernorm(self.value(a).data(), split, T::from_f64(eps));
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: a, split, inv_std }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let value = self.value(a).clone().reshaped(shape);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = kernels::permute(self.value(a).data(), &shape, perm);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        if d0 >= perm.len() || d1 >= perm.len() {
            return Err(invalid("transpose", format!("axes ({d0}, {d1}) out of range"), self.shape(a)));
        }
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| invalid("concat", "no operands", &[]))?;
        axis_split("concat", &first, axis)?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|&p| self.value(p).len() / outer.max(1)).collect();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            needs,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let split = axis_split("slice", &shape, axis)?;
        if start + len > split.len {
            return Err(invalid("slice", format!("range {start}..{} exceeds axis", start + len), &shape));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            let base = (o * split.len + start) * split.inner;
            out.extend_from_slice(&data[base..base + len * split.inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Slice {
                x: a,
                split,
                start,
                len,
            },
            needs,
        ))
    }

    /// Rows of a `[vocab, width]` table, in the order of `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(invalid("embedding", "table must be rank 2", &shape));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(invalid("embedding", format!("id {bad} out of range"), &shape));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&data[id * width..(id + 1) * width]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), width], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::from_f64(v.len().max(1) as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// `softmax(q kᵀ / √d) v` for `q: [b, lq, d]`, `k: [b, lk, d]`, `v: [b, lk, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] {
            return Err(shape_err("attention", &sq, &sk));
        }
        if sk[1] != sv[1] {
            return Err(shape_err("attention", &sk, &sv));
        }
        if sk[1] == 0 {
            return Err(invalid("attention", "no keys", &sk));
        }
        let dims = AttnDims {
            batch: sq[0],
            lq: sq[1],
            lk: sk[1],
            d: sq[2],
            dv: sv[2],
        };
        let (out, probs) = kernels::attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), &dims);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(&[dims.batch, dims.lq, dims.dv], out)?,
            Op::Attention { q, k, v, dims, probs },
            needs,
        ))
    }

    /// Nearest-neighbour upsampling of the three trailing axes of a rank-5 tensor.
    pub fn upsample_nearest3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || factor == 0 {
            return Err(invalid("upsample_nearest3d", "needs rank 5 and factor >= 1", &s));
        }
        let planes = s[0] * s[1];
        let dims = [s[2], s[3], s[4]];
        let out = conv::upsample_nearest(self.value(x).data(), planes, dims, factor);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], s[2] * factor, s[3] * factor, s[4] * factor], out)?,
            Op::Upsample {
                x,
                planes,
                dims,
                factor,
            },
            needs,
        ))
    }

    /// A scalar whose value is computed outside the tape, with a known
    /// gradient with respect to `x`.
    pub fn external_loss(&mut self, x: Var, value: f64, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(shape_err("external_loss", self.shape(x), grad.shape()));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(T::from_f64(value)), Op::External { x, grad }, needs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, -6.0, 7.0, 0.5]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0, -6.0, 7.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
        let s = tape.softmax(a, 1).unwrap();
        for row in tape.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let empty = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(tape.softmax(empty, 1).is_err());
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 27).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 2, 3, 3, 3], &data));
        // two-channel identity: w[co][ci] = δ
        let w = tape.constant(t(&[2, 2, 1, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn reshape_and_transpose_preserve_sum() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| (v as f64).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let r = tape.reshape(x, &[6, 4]).unwrap();
        let p = tape.transpose(r, 0, 1).unwrap();
        assert_eq!(tape.shape(p), &[4, 6]);
        let before = tape.value(x).sum();
        let mut sorted_a = tape.value(p).data().to_vec();
        let mut sorted_b = data.clone();
        sorted_a.sort_by(f64::total_cmp);
        sorted_b.sort_by(f64::total_cmp);
        assert_eq!(sorted_a, sorted_b);
        assert!((tape.value(r).sum() - before).abs() == 0.0);
    }

    #[test]
    fn repeated_backward_accumulates_parameter_grads() {
        use crate::param::{Group, ParamStore};
        let mut store = ParamStore::new();
        let id = store.add("x", Group::Transformer, Tensor::scalar(3.0f64)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.mul(x, x).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get(id).grad.item(), Some(12.0));
        store.zero_grad();
        assert_eq!(store.get(id).grad.item(), Some(0.0));
    }

    #[test]
    fn leading_batch_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        // leading, not trailing, broadcast only
        let bad = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.add(a, bad).is_err());
    }
}
