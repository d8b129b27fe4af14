use super::params::{ParamGrads, ParamId, ParamSet};
use super::tensor::{axpy, dot, matmul_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Concat,
    Slice,
    Sigmoid,
    Tanh,
    Softmax,
    Log,
    Embedding,
    Sum,
    Mean,
    L2Norm,
}

#[derive(Clone, Debug, Default)]
pub enum Attrs {
    #[default]
    None,
    Axis(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Ids(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, T),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    Reshape(usize),
    Pick { input: usize, index: usize },
}

enum Stored<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Stored<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Parameters are borrowed from a [`ParamSet`] rather than copied; a tape
/// lives for one forward/backward pass and is then dropped.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<usize>>,
}

/// Result of [`Tape::backward`]: gradients for every reached node, and for
/// every parameter (zero when the loss does not depend on it).
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn into_param_grads(self) -> Vec<Tensor<T>> {
        self.params
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / last.max(1), last)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf node backed by a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        self.nodes.push(Node {
            value: Stored::Param(id),
            op: Op::Param(id),
        });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        Var(n)
    }

    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Concat => {
                let axis = match attrs {
                    Attrs::Axis(a) => *a,
                    _ => 0,
                };
                self.concat(inputs, axis)
            }
            OpKind::Slice => {
                arity(1)?;
                match attrs {
                    Attrs::Slice { axis, start, len } => self.slice(inputs[0], *axis, *start, *len),
                    _ => Err(Error::Config("slice needs Attrs::Slice".into())),
                }
            }
            OpKind::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            OpKind::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            OpKind::Softmax => arity(1).map(|_| self.softmax(inputs[0])),
            OpKind::Log => arity(1).map(|_| self.log(inputs[0])),
            OpKind::Embedding => {
                arity(1)?;
                match attrs {
                    Attrs::Ids(ids) => self.embedding(inputs[0], ids),
                    _ => Err(Error::Config("embedding needs Attrs::Ids".into())),
                }
            }
            OpKind::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).map(|_| self.mean(inputs[0])),
            OpKind::L2Norm => arity(1).map(|_| self.l2_norm(inputs[0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.dims2(), tb.dims2()) {
            (Some((m, k)), Some((k2, n))) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("matmul", ta.shape(), tb.shape())),
        };
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }

    /// Elementwise sum; `b` may also be a `[1, c]` row broadcast over the
    /// rows of an `[r, c]` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            let t = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(t, Op::Add(a.0, b.0)));
        }
        match (ta.dims2(), tb.dims2()) {
            (Some((r, c)), Some((1, c2))) if c == c2 => {
                let mut data = ta.data().to_vec();
                for row in data.chunks_mut(c) {
                    for (x, &y) in row.iter_mut().zip(tb.data()) {
                        *x += y;
                    }
                }
                let t = Tensor::new(vec![r, c], data)?;
                Ok(self.push(t, Op::AddRow(a.0, b.0)))
            }
            _ => Err(Error::shape("add", ta.shape(), tb.shape())),
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Affine(a.0, scale))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.affine(a, k, T::zero())
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, data)?;
        let ids = parts.iter().map(|v| v.0).collect();
        Ok(self.push(t, Op::Concat { parts: ids, axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, T::ln, Op::Log(a.0))
    }

    /// Softmax over the last axis, row by row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = row_split(ta.shape());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(a.0))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = row_split(ta.shape());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LogSoftmax(a.0))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt
            .dims2()
            .ok_or_else(|| Error::shape("embedding", tt.shape(), &[ids.len()]))?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", tt.shape(), &[0]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownId(id));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = T::lit(ta.len() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean(a.0))
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).l2_norm();
        self.push(Tensor::scalar(n), Op::L2Norm(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(Error::shape("reshape", ta.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// Selects one element (flat row-major index) as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if index >= ta.len() {
            return Err(Error::shape("pick", ta.shape(), &[index]));
        }
        let x = ta.data()[index];
        Ok(self.push(Tensor::scalar(x), Op::Pick { input: a.0, index }))
    }

    /// Sum of `[1]` tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter
            .next()
            .ok_or_else(|| Error::Config("add_all of zero terms".into()))?;
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a `[1]`-shaped loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.run_backward(loss, true)?;
        let mut params: Vec<Tensor<T>> = self.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &nodes[i]) {
                params[id.0].data_mut().copy_from_slice(g);
            }
        }
        Ok(Gradients { nodes, params })
    }

    /// Reverse pass that adds parameter gradients into `into`, scaled by
    /// `weight`. Intermediate gradients are dropped as soon as they are used.
    pub fn backward_accumulate(&self, loss: Var, into: &mut ParamGrads<T>, weight: T) -> Result<()> {
        let nodes = self.run_backward(loss, false)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &nodes[i]) {
                axpy(into.get_mut(*id).data_mut(), weight, g);
            }
        }
        Ok(())
    }

    fn run_backward(&self, loss: Var, keep_all: bool) -> Result<Vec<Option<Vec<T>>>> {
        let ls = self.value(loss).shape();
        if ls != [1] {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            let keep = keep_all || matches!(self.nodes[i].op, Op::Param(_));
            if keep {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |n: usize| self.value(Var(n));
        macro_rules! buf {
            ($n:expr) => {{
                let n = $n;
                let len = val(n).len();
                grads[n].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().expect("rank 2");
                let n = tb.dims2().expect("rank 2").1;
                {
                    let ga = buf!(*a);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                let gb = buf!(*b);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        axpy(&mut gb[p * n..(p + 1) * n], ta.data()[r * k + p], grow);
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(buf!(*a), T::one(), g);
                axpy(buf!(*b), T::one(), g);
            }
            Op::AddRow(a, b) => {
                axpy(buf!(*a), T::one(), g);
                let gb = buf!(*b);
                let c = gb.len();
                for row in g.chunks(c) {
                    axpy(gb, T::one(), row);
                }
            }
            Op::Sub(a, b) => {
                axpy(buf!(*a), T::one(), g);
                axpy(buf!(*b), -T::one(), g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                {
                    let ga = buf!(*a);
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gi * y;
                    }
                }
                let gb = buf!(*b);
                for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *x += gi * y;
                }
            }
            Op::Affine(a, k) => axpy(buf!(*a), *k, g),
            Op::Concat { parts, axis } => {
                let out_shape = self.value(Var(i)).shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).shape()[*axis];
                    let chunk = width * inner;
                    let gp = buf!(p);
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        axpy(&mut gp[o * chunk..(o + 1) * chunk], T::one(), &g[src..src + chunk]);
                    }
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = val(*input).shape();
                let (outer, dim, inner) = axis_split(in_shape, *axis);
                let len = self.value(Var(i)).shape()[*axis];
                let gi = buf!(*input);
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    axpy(&mut gi[dst..dst + len * inner], T::one(), &g[src..src + len * inner]);
                }
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(i)).data();
                let ga = buf!(*a);
                for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * yi * (T::one() - yi);
                }
            }
            Op::Tanh(a) => {
                let y = self.value(Var(i)).data();
                let ga = buf!(*a);
                for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * (T::one() - yi * yi);
                }
            }
            Op::Exp(a) => {
                let y = self.value(Var(i)).data();
                let ga = buf!(*a);
                for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * yi;
                }
            }
            Op::Log(a) => {
                let xs = val(*a).data();
                let ga = buf!(*a);
                for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(xs) {
                    *x += gi / xi;
                }
            }
            Op::Softmax(a) => {
                let y = self.value(Var(i));
                let (_, c) = row_split(y.shape());
                let ga = buf!(*a);
                for ((grow, yrow), gout) in ga.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                    let s = dot(gout, yrow);
                    for ((x, &yi), &gi) in grow.iter_mut().zip(yrow).zip(gout) {
                        *x += yi * (gi - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.value(Var(i));
                let (_, c) = row_split(y.shape());
                let ga = buf!(*a);
                for ((grow, yrow), gout) in ga.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                    let s = gout.iter().fold(T::zero(), |acc, &x| acc + x);
                    for ((x, &yi), &gi) in grow.iter_mut().zip(yrow).zip(gout) {
                        *x += gi - yi.exp() * s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).dims2().expect("rank 2").1;
                let gt = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * d..(id + 1) * d], T::one(), &g[r * d..(r + 1) * d]);
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                buf!(*a).iter_mut().for_each(|x| *x += g0);
            }
            Op::Mean(a) => {
                let n = T::lit(val(*a).len() as f64);
                let g0 = g[0] / n;
                buf!(*a).iter_mut().for_each(|x| *x += g0);
            }
            Op::L2Norm(a) => {
                let norm = self.value(Var(i)).item();
                if norm > T::zero() {
                    let xs = val(*a).data();
                    let k = g[0] / norm;
                    axpy(buf!(*a), k, xs);
                }
            }
            Op::Reshape(a) => axpy(buf!(*a), T::one(), g),
            Op::Pick { input, index } => {
                buf!(*input)[*index] += g[0];
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    let s = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
