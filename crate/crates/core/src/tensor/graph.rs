//! Operation recording and reverse-mode differentiation.
//!
//! A [`Graph`] owns node storage; [`Tensor`] is a cheap handle into it.
//! Every operation validates shapes, evaluates eagerly, and appends an entry
//! to the record. Entries are in execution order, so inputs always precede
//! their consumers and [`Tensor::backward`] is a single reverse sweep.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::gemm::{gemm_into, Layout};
use super::kernels;
use super::{shape_numel, Real, TensorData};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    MulScalar,
    BiasAdd,
    Matmul,
    Transpose,
    Conv2d { stride: usize, padding: usize },
    Relu,
    Concat { axis: usize },
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    PixelShuffle { s: usize },
    PixelUnshuffle { s: usize },
    Reshape,
    SumAll,
}

struct Entry<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    out: usize,
}

struct GraphInner<T> {
    values: Vec<TensorData<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    entries: Vec<Entry<T>>,
}

/// A dynamically recorded computation graph. Rebuilt on every forward pass.
pub struct Graph<T: Real> {
    inner: Rc<RefCell<GraphInner<T>>>,
}

impl<T: Real> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<T: Real> {
    graph: Graph<T>,
    id: usize,
}

impl<T: Real> core::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                values: Vec::new(),
                requires_grad: Vec::new(),
                grads: Vec::new(),
                entries: Vec::new(),
            })),
        }
    }

    fn push_node(&self, value: TensorData<T>, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.requires_grad.push(requires_grad);
        inner.grads.push(None);
        inner.values.len() - 1
    }

    /// Inserts a leaf node. Pass `requires_grad = true` for trainable
    /// parameters so `backward` populates their gradient.
    pub fn leaf(&self, value: TensorData<T>, requires_grad: bool) -> Tensor<T> {
        let id = self.push_node(value, requires_grad);
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&self, value: TensorData<T>) -> Tensor<T> {
        self.leaf(value, false)
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        Ok(self.constant(TensorData::zeros(shape)?))
    }

    /// One-element constant of shape `[1]`.
    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.constant(TensorData::scalar(v))
    }

    pub fn identity(&self, n: usize) -> Result<Tensor<T>> {
        Ok(self.constant(TensorData::identity(n)?))
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn num_entries(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    fn same_graph(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Evaluates `op`, appends the entry, and returns the output handle.
    /// Shape validation is the caller's job.
    fn apply(&self, op: Op<T>, input_ids: &[usize]) -> Tensor<T> {
        let (value, requires) = {
            let inner = self.inner.borrow();
            let inputs: Vec<&TensorData<T>> = input_ids.iter().map(|&i| &inner.values[i]).collect();
            let value = eval_op(&op, &inputs);
            let requires = input_ids.iter().any(|&i| inner.requires_grad[i]);
            (value, requires)
        };
        let out = self.push_node(value, requires);
        self.inner.borrow_mut().entries.push(Entry {
            op,
            inputs: input_ids.to_vec(),
            out,
        });
        Tensor {
            graph: self.clone(),
            id: out,
        }
    }

    /// Re-executes every recorded entry from the stored inputs and checks
    /// the outputs are reproduced bit-exactly.
    pub fn replay_check(&self) -> bool {
        let inner = self.inner.borrow();
        for entry in &inner.entries {
            let inputs: Vec<&TensorData<T>> =
                entry.inputs.iter().map(|&i| &inner.values[i]).collect();
            let recomputed = eval_op(&entry.op, &inputs);
            let stored = &inner.values[entry.out];
            if recomputed.shape() != stored.shape() {
                return false;
            }
            let same = recomputed
                .data()
                .iter()
                .zip(stored.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return false;
            }
        }
        true
    }

    /// Reverse sweep seeding `d(loss)/d(loss) = 1`. Gradients accumulate
    /// additively across all uses of a node.
    fn backward_from(&self, loss: usize) -> Result<()> {
        let inner = &mut *self.inner.borrow_mut();
        let numel = inner.values[loss].numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.grads[loss] = Some(vec![T::one()]);

        let values = &inner.values;
        let requires = &inner.requires_grad;
        let grads = &mut inner.grads;

        for entry in inner.entries.iter().rev() {
            let gout = match &grads[entry.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            backward_op(entry, &gout, values, requires, grads);
        }
        Ok(())
    }
}

fn grad_buf<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], id: usize, n: usize) -> &'a mut [T] {
    grads[id].get_or_insert_with(|| vec![T::zero(); n])
}

/// Forward evaluation shared by recording and replay.
fn eval_op<T: Real>(op: &Op<T>, inputs: &[&TensorData<T>]) -> TensorData<T> {
    match op {
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            TensorData::new(a.shape().to_vec(), data).expect("validated")
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
            TensorData::new(a.shape().to_vec(), data).expect("validated")
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            TensorData::new(a.shape().to_vec(), data).expect("validated")
        }
        Op::Scale(c) => {
            let a = inputs[0];
            TensorData::new(a.shape().to_vec(), a.data().iter().map(|&x| x * *c).collect())
                .expect("validated")
        }
        Op::MulScalar => {
            let (a, s) = (inputs[0], inputs[1]);
            let sv = s.data()[0];
            TensorData::new(a.shape().to_vec(), a.data().iter().map(|&x| x * sv).collect())
                .expect("validated")
        }
        Op::BiasAdd => {
            let (x, b) = (inputs[0], inputs[1]);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut data = x.data().to_vec();
            for ci in 0..c {
                let bias = b.data()[ci];
                for v in &mut data[ci * h * w..(ci + 1) * h * w] {
                    *v = *v + bias;
                }
            }
            TensorData::new(x.shape().to_vec(), data).expect("validated")
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![T::zero(); m * n];
            gemm_into(Layout::NotNot, m, k, n, a.data(), b.data(), T::zero(), T::one(), &mut out);
            TensorData::matrix(m, n, out).expect("validated")
        }
        Op::Transpose => {
            let a = inputs[0];
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.at2(i, j);
                }
            }
            TensorData::matrix(n, m, out).expect("validated")
        }
        Op::Conv2d { stride, padding } => {
            let (x, k) = (inputs[0], inputs[1]);
            let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, ks) = (k.shape()[0], k.shape()[2]);
            let out_h = kernels::conv_out_extent(h, ks, *stride, *padding).expect("validated");
            let out_w = kernels::conv_out_extent(w, ks, *stride, *padding).expect("validated");
            let data = kernels::conv2d_forward(
                x.data(),
                c_in,
                h,
                w,
                k.data(),
                c_out,
                ks,
                *stride,
                *padding,
                out_h,
                out_w,
            );
            TensorData::new(vec![c_out, out_h, out_w], data).expect("validated")
        }
        Op::Relu => {
            let a = inputs[0];
            let data = a
                .data()
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect();
            TensorData::new(a.shape().to_vec(), data).expect("validated")
        }
        Op::Concat { axis } => {
            let shape0 = inputs[0].shape();
            let outer: usize = shape0[..*axis].iter().product();
            let inner_n: usize = shape0[*axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|p| p.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total_axis * inner_n);
            for o in 0..outer {
                for p in inputs {
                    let ext = p.shape()[*axis];
                    let chunk = &p.data()[o * ext * inner_n..(o + 1) * ext * inner_n];
                    out.extend_from_slice(chunk);
                }
            }
            let mut shape = shape0.to_vec();
            shape[*axis] = total_axis;
            TensorData::new(shape, out).expect("validated")
        }
        Op::AdaptiveAvgPool { out_h, out_w } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let data = kernels::adaptive_avg_pool_forward(x.data(), c, h, w, *out_h, *out_w);
            TensorData::new(vec![c, *out_h, *out_w], data).expect("validated")
        }
        Op::PixelShuffle { s } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let c_out = c / (s * s);
            let data = kernels::pixel_shuffle_forward(x.data(), c_out, *s, h, w);
            TensorData::new(vec![c_out, h * s, w * s], data).expect("validated")
        }
        Op::PixelUnshuffle { s } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let data = kernels::pixel_unshuffle_forward(x.data(), c, *s, h, w);
            TensorData::new(vec![c * s * s, h / s, w / s], data).expect("validated")
        }
        Op::Reshape => unreachable!("reshape records its own output"),
        Op::SumAll => {
            let a = inputs[0];
            let mut acc = T::zero();
            for &v in a.data() {
                acc = acc + v;
            }
            TensorData::scalar(acc)
        }
    }
}

fn backward_op<T: Real>(
    entry: &Entry<T>,
    gout: &[T],
    values: &[TensorData<T>],
    requires: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let ins = &entry.inputs;
    match &entry.op {
        Op::Add => {
            for &i in ins {
                if requires[i] {
                    let d = grad_buf(grads, i, values[i].numel());
                    for (dv, &g) in d.iter_mut().zip(gout) {
                        *dv = *dv + g;
                    }
                }
            }
        }
        Op::Sub => {
            if requires[ins[0]] {
                let d = grad_buf(grads, ins[0], values[ins[0]].numel());
                for (dv, &g) in d.iter_mut().zip(gout) {
                    *dv = *dv + g;
                }
            }
            if requires[ins[1]] {
                let d = grad_buf(grads, ins[1], values[ins[1]].numel());
                for (dv, &g) in d.iter_mut().zip(gout) {
                    *dv = *dv - g;
                }
            }
        }
        Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if requires[a] {
                let bv = values[b].data();
                let d = grad_buf(grads, a, values[a].numel());
                for i in 0..d.len() {
                    d[i] = d[i] + gout[i] * bv[i];
                }
            }
            if requires[b] {
                let av = values[a].data();
                let d = grad_buf(grads, b, values[b].numel());
                for i in 0..d.len() {
                    d[i] = d[i] + gout[i] * av[i];
                }
            }
        }
        Op::Scale(c) => {
            if requires[ins[0]] {
                let d = grad_buf(grads, ins[0], values[ins[0]].numel());
                for (dv, &g) in d.iter_mut().zip(gout) {
                    *dv = *dv + g * *c;
                }
            }
        }
        Op::MulScalar => {
            let (a, s) = (ins[0], ins[1]);
            if requires[a] {
                let sv = values[s].data()[0];
                let d = grad_buf(grads, a, values[a].numel());
                for (dv, &g) in d.iter_mut().zip(gout) {
                    *dv = *dv + g * sv;
                }
            }
            if requires[s] {
                let av = values[a].data();
                let mut acc = T::zero();
                for (&g, &x) in gout.iter().zip(av) {
                    acc = acc + g * x;
                }
                let d = grad_buf(grads, s, 1);
                d[0] = d[0] + acc;
            }
        }
        Op::BiasAdd => {
            let (x, b) = (ins[0], ins[1]);
            let (c, h, w) = (values[x].shape()[0], values[x].shape()[1], values[x].shape()[2]);
            if requires[x] {
                let d = grad_buf(grads, x, values[x].numel());
                for (dv, &g) in d.iter_mut().zip(gout) {
                    *dv = *dv + g;
                }
            }
            if requires[b] {
                let d = grad_buf(grads, b, c);
                for ci in 0..c {
                    let mut acc = T::zero();
                    for &g in &gout[ci * h * w..(ci + 1) * h * w] {
                        acc = acc + g;
                    }
                    d[ci] = d[ci] + acc;
                }
            }
        }
        Op::Matmul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = (values[a].rows(), values[a].cols());
            let n = values[b].cols();
            if requires[a] {
                let bv = values[b].data().to_vec();
                let d = grad_buf(grads, a, m * k);
                gemm_into(Layout::NotTrans, m, n, k, gout, &bv, T::one(), T::one(), d);
            }
            if requires[b] {
                let av = values[a].data().to_vec();
                let d = grad_buf(grads, b, k * n);
                gemm_into(Layout::TransNot, k, m, n, &av, gout, T::one(), T::one(), d);
            }
        }
        Op::Transpose => {
            if requires[ins[0]] {
                let (m, n) = (values[ins[0]].rows(), values[ins[0]].cols());
                let d = grad_buf(grads, ins[0], m * n);
                // gout has shape n x m
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = d[i * n + j] + gout[j * m + i];
                    }
                }
            }
        }
        Op::Conv2d { stride, padding } => {
            let (x, k) = (ins[0], ins[1]);
            let (c_in, h, w) = (values[x].shape()[0], values[x].shape()[1], values[x].shape()[2]);
            let (c_out, ks) = (values[k].shape()[0], values[k].shape()[2]);
            let out_h = kernels::conv_out_extent(h, ks, *stride, *padding).expect("validated");
            let out_w = kernels::conv_out_extent(w, ks, *stride, *padding).expect("validated");
            let ncols = out_h * out_w;
            let kk = c_in * ks * ks;
            if requires[k] {
                let cols =
                    kernels::im2col(values[x].data(), c_in, h, w, ks, *stride, *padding, out_h, out_w);
                let d = grad_buf(grads, k, values[k].numel());
                gemm_into(Layout::NotTrans, c_out, ncols, kk, gout, &cols, T::one(), T::one(), d);
            }
            if requires[x] {
                let kv = values[k].data().to_vec();
                let mut dcols = vec![T::zero(); kk * ncols];
                gemm_into(Layout::TransNot, kk, c_out, ncols, &kv, gout, T::zero(), T::one(), &mut dcols);
                let d = grad_buf(grads, x, values[x].numel());
                kernels::col2im_acc(&dcols, c_in, h, w, ks, *stride, *padding, out_h, out_w, d);
            }
        }
        Op::Relu => {
            if requires[ins[0]] {
                let xv = values[ins[0]].data();
                let d = grad_buf(grads, ins[0], xv.len());
                // subgradient at exactly 0 is 0
                for i in 0..d.len() {
                    if xv[i] > T::zero() {
                        d[i] = d[i] + gout[i];
                    }
                }
            }
        }
        Op::Concat { axis } => {
            let shape0 = values[ins[0]].shape();
            let outer: usize = shape0[..*axis].iter().product();
            let inner_n: usize = shape0[*axis + 1..].iter().product();
            let total_axis: usize = ins.iter().map(|&p| values[p].shape()[*axis]).sum();
            let exts: Vec<usize> = ins.iter().map(|&p| values[p].shape()[*axis]).collect();
            for (pi, &p) in ins.iter().enumerate() {
                if !requires[p] {
                    continue;
                }
                let ext = exts[pi];
                let offset: usize = exts[..pi].iter().sum();
                let d = grad_buf(grads, p, values[p].numel());
                for o in 0..outer {
                    let src = &gout[(o * total_axis + offset) * inner_n..];
                    let dst = &mut d[o * ext * inner_n..(o + 1) * ext * inner_n];
                    for (dv, &g) in dst.iter_mut().zip(&src[..ext * inner_n]) {
                        *dv = *dv + g;
                    }
                }
            }
        }
        Op::AdaptiveAvgPool { out_h, out_w } => {
            if requires[ins[0]] {
                let (c, h, w) = (
                    values[ins[0]].shape()[0],
                    values[ins[0]].shape()[1],
                    values[ins[0]].shape()[2],
                );
                let d = grad_buf(grads, ins[0], c * h * w);
                kernels::adaptive_avg_pool_backward(gout, c, h, w, *out_h, *out_w, d);
            }
        }
        Op::PixelShuffle { s } => {
            if requires[ins[0]] {
                let (c, h, w) = (
                    values[ins[0]].shape()[0],
                    values[ins[0]].shape()[1],
                    values[ins[0]].shape()[2],
                );
                let d = grad_buf(grads, ins[0], c * h * w);
                kernels::pixel_shuffle_backward(gout, c / (s * s), *s, h, w, d);
            }
        }
        Op::PixelUnshuffle { s } => {
            if requires[ins[0]] {
                let (c, h, w) = (
                    values[ins[0]].shape()[0],
                    values[ins[0]].shape()[1],
                    values[ins[0]].shape()[2],
                );
                let d = grad_buf(grads, ins[0], c * h * w);
                kernels::pixel_unshuffle_backward(gout, c, *s, h, w, d);
            }
        }
        Op::Reshape => {
            if requires[ins[0]] {
                let d = grad_buf(grads, ins[0], values[ins[0]].numel());
                for (dv, &g) in d.iter_mut().zip(gout) {
                    *dv = *dv + g;
                }
            }
        }
        Op::SumAll => {
            if requires[ins[0]] {
                let g = gout[0];
                let d = grad_buf(grads, ins[0], values[ins[0]].numel());
                for dv in d.iter_mut() {
                    *dv = *dv + g;
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn graph(&self) -> Graph<T> {
        self.graph.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().values[self.id].numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().requires_grad[self.id]
    }

    /// Clones the node value out of the graph.
    pub fn value(&self) -> TensorData<T> {
        self.graph.inner.borrow().values[self.id].clone()
    }

    /// Reads the node value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&TensorData<T>) -> R) -> R {
        f(&self.graph.inner.borrow().values[self.id])
    }

    /// Scalar convenience accessor; panics if the tensor is not one element.
    pub fn item(&self) -> T {
        let inner = self.graph.inner.borrow();
        let v = &inner.values[self.id];
        assert_eq!(v.numel(), 1, "item() on non-scalar tensor");
        v.data()[0]
    }

    /// Gradient populated by the last `backward` call, if this node was
    /// reachable and marked as requiring one.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.inner.borrow().grads[self.id].clone()
    }

    fn binary_same_shape(&self, rhs: &Tensor<T>, op: Op<T>, name: &'static str) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&rhs.graph) {
            return Err(Error::GraphMismatch);
        }
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls != rs {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ls,
                rhs: rs,
            });
        }
        Ok(self.graph.apply(op, &[self.id, rhs.id]))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same_shape(rhs, Op::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same_shape(rhs, Op::Sub, "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same_shape(rhs, Op::Mul, "mul")
    }

    /// Multiplication by a compile-time constant (not a graph node).
    pub fn scale(&self, c: T) -> Tensor<T> {
        self.graph.apply(Op::Scale(c), &[self.id])
    }

    /// Broadcast multiplication by a one-element tensor. This is the only
    /// broadcasting the engine performs.
    pub fn mul_scalar(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&s.graph) {
            return Err(Error::GraphMismatch);
        }
        if s.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        Ok(self.graph.apply(Op::MulScalar, &[self.id, s.id]))
    }

    /// Adds a per-channel bias `[c]` to a `(c, h, w)` tensor.
    pub fn bias_add(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&bias.graph) {
            return Err(Error::GraphMismatch);
        }
        let xs = self.shape();
        let bs = bias.shape();
        if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: xs,
                rhs: bs,
            });
        }
        Ok(self.graph.apply(Op::BiasAdd, &[self.id, bias.id]))
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&rhs.graph) {
            return Err(Error::GraphMismatch);
        }
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        Ok(self.graph.apply(Op::Matmul, &[self.id, rhs.id]))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "transpose requires rank 2",
            });
        }
        Ok(self.graph.apply(Op::Transpose, &[self.id]))
    }

    /// Cross-correlation (no kernel flip) of a `(c_in, h, w)` input with a
    /// `(c_out, c_in, k, k)` kernel.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&kernel.graph) {
            return Err(Error::GraphMismatch);
        }
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let fits = kernels::conv_out_extent(xs[1], ks[2], stride, padding).is_some()
            && kernels::conv_out_extent(xs[2], ks[2], stride, padding).is_some();
        if !fits {
            return Err(Error::KernelTooLarge {
                kernel: ks[2],
                padded_h: xs[1] + 2 * padding,
                padded_w: xs[2] + 2 * padding,
            });
        }
        Ok(self.graph.apply(Op::Conv2d { stride, padding }, &[self.id, kernel.id]))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.graph.apply(Op::Relu, &[self.id])
    }

    pub fn adaptive_avg_pool(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "adaptive_avg_pool requires rank 3",
            });
        }
        if out_h == 0 || out_w == 0 || out_h > s[1] || out_w > s[2] {
            return Err(Error::PoolTargetTooLarge {
                out_h,
                out_w,
                in_h: s[1],
                in_w: s[2],
            });
        }
        Ok(self.graph.apply(Op::AdaptiveAvgPool { out_h, out_w }, &[self.id]))
    }

    /// `(c*s^2, h, w) -> (c, s*h, s*w)` sub-pixel rearrangement.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Tensor<T>> {
        let sh = self.shape();
        if sh.len() != 3 {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "pixel_shuffle requires rank 3",
            });
        }
        if s == 0 || sh[0] % (s * s) != 0 {
            return Err(Error::ChannelsNotDivisible { channels: sh[0], s });
        }
        Ok(self.graph.apply(Op::PixelShuffle { s }, &[self.id]))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, s: usize) -> Result<Tensor<T>> {
        let sh = self.shape();
        if sh.len() != 3 {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "pixel_unshuffle requires rank 3",
            });
        }
        if s == 0 || sh[1] % s != 0 || sh[2] % s != 0 {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "extents not divisible by the shuffle factor",
            });
        }
        Ok(self.graph.apply(Op::PixelUnshuffle { s }, &[self.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n = shape_numel(&shape)?;
        if n != self.numel() {
            return Err(Error::InvalidShape {
                shape,
                reason: "reshape changes element count",
            });
        }
        // Records directly: the output buffer is the input buffer re-tagged.
        let value = {
            let inner = self.graph.inner.borrow();
            inner.values[self.id].clone().reshaped(shape).expect("validated")
        };
        let requires = self.requires_grad();
        let out = self.graph.push_node(value, requires);
        self.graph.inner.borrow_mut().entries.push(Entry {
            op: Op::Reshape,
            inputs: vec![self.id],
            out,
        });
        Ok(Tensor {
            graph: self.graph.clone(),
            id: out,
        })
    }

    /// Sum of all elements, producing a `[1]` tensor.
    pub fn sum(&self) -> Tensor<T> {
        self.graph.apply(Op::SumAll, &[self.id])
    }

    /// Sum of squared elements (Frobenius norm squared).
    pub fn sum_sq(&self) -> Result<Tensor<T>> {
        Ok(self.mul(self)?.sum())
    }

    /// Populates gradients of every reachable `requires_grad` node.
    pub fn backward(&self) -> Result<()> {
        self.graph.backward_from(self.id)
    }
}

/// Concatenates tensors along `axis`; shapes must agree elsewhere.
pub fn concat<T: Real>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::InvalidShape {
        shape: vec![],
        reason: "concat of zero tensors",
    })?;
    let g = first.graph();
    let s0 = first.shape();
    if axis >= s0.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: s0.len(),
        });
    }
    for p in parts {
        if !g.same_graph(&p.graph) {
            return Err(Error::GraphMismatch);
        }
        let sp = p.shape();
        let conforms = sp.len() == s0.len()
            && sp
                .iter()
                .zip(&s0)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !conforms {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: s0,
                rhs: sp,
            });
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(g.apply(Op::Concat { axis }, &ids))
}
