use rand::Rng;

use super::tensor::{gemm, transpose, Real, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { input: Var, axis: Axis, start: usize },
    Softmax { input: Var, axis: Axis },
    WeightedSum { values: Vec<Var>, weights: Var },
    Dropout { input: Var, mask: Vec<f64> },
    L2NormSquared(Var),
    CrossEntropy { logits: Var, targets: Vec<f64> },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Every op computes its value on creation; the
/// tape records enough to run the backward pass in reverse creation order.
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    fn check(&self, v: Var) -> Result<(), NumericsError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::GraphNotEvaluated(v.0))
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::from_f64(shape, &values)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn vals(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.to_f64_vec()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let c = gemm(&self.vals(a), &self.vals(b), m, k, n);
        self.push("matmul", vec![m, n], c, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        self.check(bias)?;
        let (r, c) = self.dims(x);
        if self.nodes[bias.0].value.len() != c {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.vals(bias);
        let mut out = self.vals(x);
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_bias", vec![r, c], out, Op::AddBias(x, bias), &[x, bias])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch(name, a, b));
        }
        let (r, c) = self.dims(a);
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, y)| f(x, y))
            .collect();
        self.push(name, vec![r, c], out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        self.check(x)?;
        let out = self.vals(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x);
        self.push("scale", shape, out, Op::Scale(x, factor), &[x])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        let out = self.vals(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x);
        self.push(name, shape, out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        };
        for &p in parts {
            self.check(p)?;
        }
        let (r0, c0) = self.dims(first);
        for &p in &parts[1..] {
            let (r, c) = self.dims(p);
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let (shape, out) = match axis {
            Axis::Rows => {
                let mut out = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    out.extend(self.vals(p));
                    rows += self.dims(p).0;
                }
                (vec![rows, c0], out)
            }
            Axis::Cols => {
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut out = vec![0.0; r0 * total];
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let v = self.vals(p);
                    for r in 0..r0 {
                        out[r * total + offset..r * total + offset + c]
                            .copy_from_slice(&v[r * c..(r + 1) * c]);
                    }
                    offset += c;
                }
                (vec![r0, total], out)
            }
        };
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(
        &mut self,
        x: Var,
        axis: Axis,
        start: usize,
        len: usize,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (r, c) = self.dims(x);
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start + len > extent {
            return Err(NumericsError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{} exceeds extent {extent}", start + len),
            });
        }
        let src = self.nodes[x.0].value.data();
        let (shape, out) = match axis {
            Axis::Rows => (
                vec![len, c],
                src[start * c..(start + len) * c]
                    .iter()
                    .map(|v| v.to_f64())
                    .collect(),
            ),
            Axis::Cols => {
                let mut out = Vec::with_capacity(r * len);
                for row in 0..r {
                    out.extend(src[row * c + start..row * c + start + len].iter().map(|v| v.to_f64()));
                }
                (vec![r, len], out)
            }
        };
        self.push(
            "slice",
            shape,
            out,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        )
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var, NumericsError> {
        self.check(x)?;
        let (r, c) = self.dims(x);
        let mut v = self.vals(x);
        let (outer, inner, stride_outer, stride_inner) = match axis {
            Axis::Cols => (r, c, c, 1),
            Axis::Rows => (c, r, 1, c),
        };
        for o in 0..outer {
            let idx = |i: usize| o * stride_outer + i * stride_inner;
            let max = (0..inner).map(|i| v[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (v[idx(i)] - max).exp();
                v[idx(i)] = e;
                sum += e;
            }
            for i in 0..inner {
                v[idx(i)] /= sum;
            }
        }
        self.push("softmax", vec![r, c], v, Op::Softmax { input: x, axis }, &[x])
    }

    /// `out[i, :] = Σ_t weights[i, t] · values[t][i, :]`.
    pub fn weighted_sum(&mut self, values: &[Var], weights: Var) -> Result<Var, NumericsError> {
        self.check(weights)?;
        let (r, t) = self.dims(weights);
        if values.len() != t || t == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "weighted_sum",
                reason: format!("{} value tensors for {t} weight columns", values.len()),
            });
        }
        let (vr, c) = self.dims(values[0]);
        for &v in values {
            self.check(v)?;
            if self.dims(v) != (vr, c) || vr != r {
                return Err(self.mismatch("weighted_sum", v, weights));
            }
        }
        let w = self.vals(weights);
        let mut out = vec![0.0; r * c];
        for (ti, &v) in values.iter().enumerate() {
            let vv = self.vals(v);
            for i in 0..r {
                let wi = w[i * t + ti];
                for j in 0..c {
                    out[i * c + j] += wi * vv[i * c + j];
                }
            }
        }
        let mut inputs = values.to_vec();
        inputs.push(weights);
        self.push(
            "weighted_sum",
            vec![r, c],
            out,
            Op::WeightedSum {
                values: values.to_vec(),
                weights,
            },
            &inputs,
        )
    }

    /// Inverted dropout with an explicit keep-mask (entries 0 or 1).
    pub fn dropout_with_mask(
        &mut self,
        x: Var,
        keep: &[bool],
        rate: f64,
    ) -> Result<Var, NumericsError> {
        self.check(x)?;
        if keep.len() != self.nodes[x.0].value.len() {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                reason: format!("mask of {} for {} entries", keep.len(), self.nodes[x.0].value.len()),
            });
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let out = self.vals(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x);
        self.push("dropout", shape, out, Op::Dropout { input: x, mask }, &[x])
    }

    /// Training-mode dropout drawing its mask from `rng`; rate 0 is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NumericsError> {
        self.check(x)?;
        if rate == 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> = (0..self.nodes[x.0].value.len())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        self.dropout_with_mask(x, &keep, rate)
    }

    pub fn l2_norm_squared(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.nodes[x.0].value.sum_squares();
        self.push("l2_norm_squared", vec![1], vec![s], Op::L2NormSquared(x), &[x])
    }

    /// Summed cross-entropy `−Σ_i Σ_c y_ic · log softmax(logits)_ic`, computed
    /// from log-softmax directly. Target rows may be weighted one-hot vectors.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        self.check(logits)?;
        let (r, c) = self.dims(logits);
        if targets.len() != r * c {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        let z = self.vals(logits);
        let mut total = 0.0;
        for i in 0..r {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let y = targets[i * c + j];
                if y != 0.0 {
                    total -= y * (row[j] - lse);
                }
            }
        }
        self.push(
            "cross_entropy",
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.vals(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar node. Only nodes that require a gradient
    /// are visited; constants (frozen parameters, inputs) get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        self.check(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::InvalidArgument {
                op: "backward",
                reason: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if needs(*a) {
                    let bt = transpose(&self.vals(*b), k, n);
                    let da = gemm(g, &bt, m, n, k);
                    let slot = accumulate(&mut grads[a.0], m * k);
                    slot.iter_mut().zip(da).for_each(|(s, d)| *s += d);
                }
                if needs(*b) {
                    let at = transpose(&self.vals(*a), m, k);
                    let db = gemm(&at, g, k, m, n);
                    let slot = accumulate(&mut grads[b.0], k * n);
                    slot.iter_mut().zip(db).for_each(|(s, d)| *s += d);
                }
            }
            Op::AddBias(x, b) => {
                let (_, c) = self.dims(*x);
                if needs(*x) {
                    let slot = accumulate(&mut grads[x.0], g.len());
                    slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if needs(*b) {
                    let slot = accumulate(&mut grads[b.0], c);
                    for row in g.chunks(c) {
                        slot.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    let slot = accumulate(&mut grads[a.0], g.len());
                    slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if needs(*b) {
                    let slot = accumulate(&mut grads[b.0], g.len());
                    slot.iter_mut().zip(g).for_each(|(s, d)| *s += sign * d);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.vals(*b);
                    let slot = accumulate(&mut grads[a.0], g.len());
                    for ((s, d), y) in slot.iter_mut().zip(g).zip(&bv) {
                        *s += d * y;
                    }
                }
                if needs(*b) {
                    let av = self.vals(*a);
                    let slot = accumulate(&mut grads[b.0], g.len());
                    for ((s, d), x) in slot.iter_mut().zip(g).zip(&av) {
                        *s += d * x;
                    }
                }
            }
            Op::Scale(x, f) => {
                let slot = accumulate(&mut grads[x.0], g.len());
                slot.iter_mut().zip(g).for_each(|(s, d)| *s += f * d);
            }
            Op::Sigmoid(x) | Op::Tanh(x) => {
                let y = node.value.to_f64_vec();
                let tanh = matches!(node.op, Op::Tanh(_));
                let slot = accumulate(&mut grads[x.0], g.len());
                for ((s, d), y) in slot.iter_mut().zip(g).zip(&y) {
                    *s += d * if tanh { 1.0 - y * y } else { y * (1.0 - y) };
                }
            }
            Op::Relu(x) => {
                let xv = self.vals(*x);
                let slot = accumulate(&mut grads[x.0], g.len());
                for ((s, d), x) in slot.iter_mut().zip(g).zip(&xv) {
                    if *x > 0.0 {
                        *s += d;
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.vals(*x);
                let slot = accumulate(&mut grads[x.0], g.len());
                for ((s, d), x) in slot.iter_mut().zip(g).zip(&xv) {
                    *s += d * sigmoid(*x);
                }
            }
            Op::Concat { parts, axis } => {
                let (_, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if needs(p) {
                        let slot = accumulate(&mut grads[p.0], r * c);
                        match axis {
                            Axis::Rows => {
                                slot.iter_mut()
                                    .zip(&g[offset * c..(offset + r) * c])
                                    .for_each(|(s, d)| *s += d);
                            }
                            Axis::Cols => {
                                for row in 0..r {
                                    let src = &g[row * total + offset..row * total + offset + c];
                                    slot[row * c..(row + 1) * c]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(s, d)| *s += d);
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { input, axis, start } => {
                let (r, c) = self.dims(*input);
                let (or, oc) = node.value.dims2();
                let slot = accumulate(&mut grads[input.0], r * c);
                match axis {
                    Axis::Rows => slot[start * c..(start + or) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, d)| *s += d),
                    Axis::Cols => {
                        for row in 0..r {
                            slot[row * c + start..row * c + start + oc]
                                .iter_mut()
                                .zip(&g[row * oc..(row + 1) * oc])
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (r, c) = node.value.dims2();
                let y = node.value.to_f64_vec();
                let (outer, inner, so, si) = match axis {
                    Axis::Cols => (r, c, c, 1),
                    Axis::Rows => (c, r, 1, c),
                };
                let slot = accumulate(&mut grads[input.0], r * c);
                for o in 0..outer {
                    let idx = |i: usize| o * so + i * si;
                    let dot: f64 = (0..inner).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..inner {
                        slot[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            Op::WeightedSum { values, weights } => {
                let (r, t) = self.dims(*weights);
                let c = node.value.dims2().1;
                let w = self.vals(*weights);
                let mut dw = vec![0.0; r * t];
                for (ti, &v) in values.iter().enumerate() {
                    let vv = self.vals(v);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * vv[i * c + j];
                        }
                        dw[i * t + ti] = acc;
                    }
                    if needs(v) {
                        let slot = accumulate(&mut grads[v.0], r * c);
                        for i in 0..r {
                            let wi = w[i * t + ti];
                            for j in 0..c {
                                slot[i * c + j] += wi * g[i * c + j];
                            }
                        }
                    }
                }
                if needs(*weights) {
                    let slot = accumulate(&mut grads[weights.0], r * t);
                    slot.iter_mut().zip(dw).for_each(|(s, d)| *s += d);
                }
            }
            Op::Dropout { input, mask } => {
                let slot = accumulate(&mut grads[input.0], g.len());
                for ((s, d), m) in slot.iter_mut().zip(g).zip(mask) {
                    *s += d * m;
                }
            }
            Op::L2NormSquared(x) => {
                let xv = self.vals(*x);
                let slot = accumulate(&mut grads[x.0], len_of(*x));
                for (s, v) in slot.iter_mut().zip(&xv) {
                    *s += 2.0 * v * g[0];
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (r, c) = self.dims(*logits);
                let z = self.vals(*logits);
                let slot = accumulate(&mut grads[logits.0], r * c);
                for i in 0..r {
                    let row = &z[i * c..(i + 1) * c];
                    let t = &targets[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let tsum: f64 = t.iter().sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / denom;
                        slot[i * c + j] += g[0] * (p * tsum - t[j]);
                    }
                }
            }
            Op::Sum(x) => {
                let slot = accumulate(&mut grads[x.0], len_of(*x));
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, Axis::Cols).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]).unwrap());
        let eye = tape.constant(
            Tensor::from_f64(vec![3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let y = tape.matmul(x, eye).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn cross_entropy_of_confident_correct_prediction_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t64(vec![2, 5], &[60.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 60.0, 0.0]));
        let mut y = vec![0.0; 10];
        y[0] = 1.0;
        y[8] = 1.0;
        let l = tape.cross_entropy(z, &y).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-6);
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn backward_on_foreign_node_is_rejected() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            tape.backward(Var(3)),
            Err(NumericsError::GraphNotEvaluated(3))
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t64(vec![1, 2], &[1.0, 2.0]));
        let p = tape.param(t64(vec![1, 2], &[3.0, 4.0]));
        let y = tape.mul(w, p).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_results_fail_fast() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1, 3], &[1.0, 2.0, 3.0]));
        let mut rng = crate::rng::substream(0, "dropout", 0);
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = tape.dropout_with_mask(x, &[true, false, true], 0.5).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 6.0]);
    }
}
