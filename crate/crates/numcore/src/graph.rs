//! Eager computation graph with tape-based reverse-mode differentiation.
//!
//! Every op computes its value immediately and records enough state to
//! propagate gradients later. Nodes are stored in creation order, which is a
//! valid topological order, so [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters are read directly out of a borrowed [`ParamStore`]; the graph
//! never copies them. Gradients for parameters are collected with
//! [`Graph::param_grads`] and applied to the store once the graph is dropped.

use crate::error::{NumError, Result};
use crate::kernels::{gelu, gelu_grad, gemm_nn, gemm_tn, sigmoid, transpose};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Gelu,
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Binary { kind: BinKind, a: Var, b: Var },
    MatMul { a: Var, b: Var, batch: usize, n: usize, k: usize, m: usize },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Unary { kind: UnaryKind, a: Var },
    Softmax { a: Var, axis: usize },
    MaskedSoftmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<f64> },
    L2Normalize { a: Var, norms: Vec<f64> },
    MaxAxis { a: Var, axis: usize, argmax: Vec<usize> },
    MeanAxis { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    GatherRows { table: Var, indices: Vec<usize> },
    Diag { a: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose values live in the store.
    value: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl<'p> Graph<'p> {
    /// Training-mode graph: every op output is checked for NaN/Inf.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Graph without finite-value checks, for evaluation.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            check_finite: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.value(*id).data(),
            _ => unreachable!("only parameter leaves borrow their value"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Accumulated gradient of `v` from all backward passes so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// For an [`Graph::l2_normalize`] node, which rows had zero norm.
    pub fn zero_norm_rows(&self, v: Var) -> Option<Vec<bool>> {
        match &self.nodes[v.0].op {
            Op::L2Normalize { norms, .. } => Some(norms.iter().map(|&n| n == 0.0).collect()),
            _ => None,
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Some(t.into_data()),
            op: Op::Constant,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-parameter leaf that still receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Some(t.into_data()),
            op: Op::Variable,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf reading a parameter; frozen parameters produce no gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: None,
            op: Op::Param(id),
            requires_grad: p.trainable,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    fn binary(&mut self, name: &'static str, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        {
            let va = self.value(a);
            let vb = self.value(b);
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
            };
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(name, out_shape, out, Op::Binary { kind, a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * c).collect();
        let rg = self.requires(a);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v + c).collect();
        let rg = self.requires(a);
        self.push("add_scalar", self.shape(a).to_vec(), out, Op::AddScalar { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", UnaryKind::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", UnaryKind::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", UnaryKind::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", UnaryKind::Tanh, a)
    }

    fn unary(&mut self, name: &'static str, kind: UnaryKind, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Gelu => gelu(x),
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Tanh => x.tanh(),
            })
            .collect();
        let rg = self.requires(a);
        self.push(name, self.shape(a).to_vec(), out, Op::Unary { kind, a }, rg)
    }

    // ---- linear algebra --------------------------------------------------

    /// `[n,k]·[k,m] → [n,m]`, or batched `[b,n,k]·[b,k,m] → [b,n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || NumError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, n, k, m) = match (sa.as_slice(), sb.as_slice()) {
            ([n, k], [k2, m]) if k == k2 => (1, *n, *k, *m),
            ([ba, n, k], [bb, k2, m]) if ba == bb && k == k2 => (*ba, *n, *k, *m),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * n * m];
        {
            let va = self.value(a);
            let vb = self.value(b);
            for bi in 0..batch {
                gemm_nn(
                    n,
                    k,
                    m,
                    &va[bi * n * k..(bi + 1) * n * k],
                    &vb[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![n, m] } else { vec![batch, n, m] };
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", shape, out, Op::MatMul { a, b, batch, n, k, m }, rg)
    }

    // ---- normalizations --------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        self.push("softmax", shape, out, Op::Softmax { a, axis }, rg)
    }

    /// Softmax over the last axis with masked-out positions.
    ///
    /// `key_mask` has `g × len` entries (`true` = visible); row `r` of the
    /// input uses mask row `r / group`. Masked positions get probability
    /// exactly zero, which is the limit of adding −∞ to their logits. A row
    /// with no visible position yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool], group: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().ok_or(NumError::InvalidAxis {
            op: "masked_softmax",
            axis: 0,
            rank: 0,
        })?;
        let rows = if len == 0 { 0 } else { self.value(a).len() / len };
        if group == 0 || len == 0 || key_mask.len() % len != 0 || rows != (key_mask.len() / len) * group
        {
            return Err(NumError::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![key_mask.len() / len.max(1), len],
            });
        }
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let mrow = &key_mask[(r / group) * len..(r / group + 1) * len];
            let xr = &x[r * len..(r + 1) * len];
            let or = &mut out[r * len..(r + 1) * len];
            let mx = xr
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..len {
                if mrow[j] {
                    let e = (xr[j] - mx).exp();
                    or[j] = e;
                    sum += e;
                }
            }
            for j in 0..len {
                if mrow[j] {
                    or[j] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        self.push("masked_softmax", shape, out, Op::MaskedSoftmax { a }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let mut rstds = Vec::with_capacity(x.len() / d.max(1));
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, v) in or.iter_mut().zip(xr) {
                *o = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let rg = self.requires(a);
        self.push("layer_norm", shape, out, Op::LayerNorm { a, rstd: rstds }, rg)
    }

    /// L2-normalizes the last axis. Zero rows map to zero (see
    /// [`Graph::zero_norm_rows`]) and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let x = self.value(a);
        let mut out = x.to_vec();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let rg = self.requires(a);
        self.push("l2_normalize", shape, out, Op::L2Normalize { a, norms }, rg)
    }

    // ---- reductions ------------------------------------------------------

    /// Max over `axis` (removed). Ties route the gradient to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("max_axis", axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(NumError::InvalidArgument {
                op: "max_axis",
                msg: "reduction over an empty axis".into(),
            });
        }
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * len * inner + i];
                let mut bj = 0;
                for j in 1..len {
                    let v = x[(o * len + j) * inner + i];
                    if v > best {
                        best = v;
                        bj = j;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = bj;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires(a);
        self.push("max_axis", out_shape, out, Op::MaxAxis { a, axis, argmax }, rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_sum("mean_axis", a, axis)?;
        let len = self.shape(a)[axis] as f64;
        let out = out.into_iter().map(|v| v / len).collect();
        let rg = self.requires(a);
        self.push("mean_axis", shape, out, Op::MeanAxis { a, axis }, rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_sum("sum_axis", a, axis)?;
        let rg = self.requires(a);
        self.push("sum_axis", shape, out, Op::SumAxis { a, axis }, rg)
    }

    fn reduce_sum(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        check_axis(op, axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(NumError::InvalidArgument {
                op,
                msg: "reduction over an empty axis".into(),
            });
        }
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.requires(a);
        self.push("sum", vec![], vec![s], Op::SumAll { a }, rg)
    }

    // ---- structural ------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(NumError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let x = self.value(v);
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.requires(v));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("slice", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(NumError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires(a);
        self.push("slice", out_shape, out, Op::Slice { a, axis, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.requires(a);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(a), &shape, perm);
        let rg = self.requires(a);
        self.push(
            "permute",
            out_shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        check_axis("transpose", ax1.max(ax2), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax1, ax2);
        self.permute(a, &perm)
    }

    /// Row lookup into a `[rows, d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(NumError::InvalidArgument {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(NumError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        self.push(
            "gather_rows",
            vec![indices.len(), d],
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        match shape.as_slice() {
            [n, m] if n == m => {
                let n = *n;
                let x = self.value(a);
                let out = (0..n).map(|i| x[i * n + i]).collect();
                let rg = self.requires(a);
                self.push("diag", vec![n], out, Op::Diag { a }, rg)
            }
            _ => Err(NumError::ShapeMismatch {
                op: "diag",
                lhs: shape.clone(),
                rhs: shape,
            }),
        }
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// node's gradient slot. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.as_ref().map_or(1, |v| v.len()) != 1 {
            return Err(NumError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            local[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(local) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Sum of gradients over every leaf that reads each parameter.
    pub fn param_grads(&self) -> Gradients {
        let mut grads = Gradients::default();
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                grads.add(*id, g);
            }
        }
        grads
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_deref().unwrap_or(&[]);
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Binary { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (va, vb) = (self.value(a), self.value(b));
                if self.requires(a) {
                    let ga = slot(local, a, va.len());
                    for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => g[o],
                            BinKind::Mul => g[o] * vb[ib],
                        }
                    });
                }
                if self.requires(b) {
                    let gb = slot(local, b, vb.len());
                    for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinKind::Add => g[o],
                            BinKind::Sub => -g[o],
                            BinKind::Mul => g[o] * va[ia],
                        }
                    });
                }
            }
            Op::MatMul { a, b, batch, n, k, m } => {
                let (a, b) = (*a, *b);
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                if self.requires(a) {
                    let vb = self.value(b);
                    let ga = slot(local, a, batch * n * k);
                    for bi in 0..batch {
                        let bt = transpose(k, m, &vb[bi * k * m..(bi + 1) * k * m]);
                        gemm_nn(
                            n,
                            m,
                            k,
                            &g[bi * n * m..(bi + 1) * n * m],
                            &bt,
                            &mut ga[bi * n * k..(bi + 1) * n * k],
                        );
                    }
                }
                if self.requires(b) {
                    let va = self.value(a);
                    let gb = slot(local, b, batch * k * m);
                    for bi in 0..batch {
                        gemm_tn(
                            n,
                            k,
                            m,
                            &va[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut gb[bi * k * m..(bi + 1) * k * m],
                        );
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = slot(local, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(s, v)| *s += v * c);
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                let ga = slot(local, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let ga = slot(local, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j]
                        * match kind {
                            UnaryKind::Sigmoid => out[j] * (1.0 - out[j]),
                            UnaryKind::Gelu => gelu_grad(x[j]),
                            UnaryKind::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Tanh => 1.0 - out[j] * out[j],
                        };
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let ga = slot(local, *a, g.len());
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            ga[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                let len = *node.shape.last().unwrap();
                let ga = slot(local, *a, g.len());
                for ((yr, gr), dr) in out.chunks(len).zip(g.chunks(len)).zip(ga.chunks_mut(len)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..len {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let d = *node.shape.last().unwrap();
                let ga = slot(local, *a, g.len());
                for (r, ((yr, gr), dr)) in out
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(ga.chunks_mut(d))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dr[j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = *node.shape.last().unwrap_or(&1);
                let ga = slot(local, *a, g.len());
                for (r, ((yr, gr), dr)) in out
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(ga.chunks_mut(d))
                    .enumerate()
                {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dr[j] += (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
            }
            Op::MaxAxis { a, axis, argmax } => {
                let in_shape = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&in_shape, *axis);
                let ga = slot(local, *a, outer * len * inner);
                for o in 0..outer {
                    for ii in 0..inner {
                        let j = argmax[o * inner + ii];
                        ga[(o * len + j) * inner + ii] += g[o * inner + ii];
                    }
                }
            }
            Op::MeanAxis { a, axis } | Op::SumAxis { a, axis } => {
                let in_shape = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&in_shape, *axis);
                let w = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let ga = slot(local, *a, outer * len * inner);
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            ga[(o * len + j) * inner + ii] += g[o * inner + ii] * w;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let n = self.value(*a).len();
                let ga = slot(local, *a, n);
                ga.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let total = node.shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires(v) {
                        let gv = slot(local, v, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a).to_vec();
                let (outer, full, inner) = axis_split(&in_shape, *axis);
                let len = node.shape[*axis];
                let ga = slot(local, *a, outer * full * inner);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    ga[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.shape, &inv);
                let ga = slot(local, *a, back.len());
                ga.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
            }
            Op::GatherRows { table, indices } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let gt = slot(local, *table, ts[0] * d);
                for (r, &idx) in indices.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gt[idx * d..(idx + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Diag { a } => {
                let n = node.shape[0];
                let ga = slot(local, *a, n * n);
                for j in 0..n {
                    ga[j * n + j] += g[j];
                }
            }
        }
    }
}

fn slot(local: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    local[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(NumError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

/// Standard right-aligned broadcasting of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Visits `(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == out && out.ends_with(b) {
        (0..n).for_each(|i| f(i, i, i % nb));
        return;
    }
    if b == out && out.ends_with(a) {
        (0..n).for_each(|i| f(i, i % na, i));
        return;
    }
    let rank = out.len();
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for i in (0..s.len()).rev() {
            let oi = i + rank - s.len();
            st[oi] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let mut idx = vec![0; rank];
    let (mut ia, mut ib) = (0, 0);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * idx[d];
            ib -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0; rank];
    let mut off = 0;
    for _ in 0..n {
        out.push(x[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn softmax_uniform() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_345() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y), &[0.6, 0.8]);
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let yz = g.l2_normalize(z).unwrap();
        assert_eq!(g.value(yz), &[0.0, 0.0]);
        assert_eq!(g.zero_norm_rows(yz), Some(vec![true]));
    }

    #[test]
    fn max_over_axis0() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 2.0, 2.0]).unwrap());
        let y = g.max_axis(x, 0).unwrap();
        assert_eq!(g.value(y), &[2.0, 5.0]);
    }

    #[test]
    fn max_tie_routes_to_lowest_index() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.variable(Tensor::vector(vec![1.0, 3.0, 3.0]));
        let y = g.max_axis(x, 0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut s = store();
        let p = s.add("p", "g", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let grads = {
            let mut g = Graph::new(&s);
            let x = g.param(p);
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            g.param_grads()
        };
        assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0]);
        s.accumulate(&grads);
        s.accumulate(&grads);
        assert_eq!(s.get(p).grad.as_ref().unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn constant_loss_writes_nothing() {
        let mut s = store();
        let p = s.add("p", "g", Tensor::vector(vec![1.0])).unwrap();
        let mut g = Graph::new(&s);
        let _unused = g.param(p);
        let c = g.constant(Tensor::scalar(3.0));
        g.backward(c).unwrap();
        assert!(g.param_grads().is_empty());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_rejected_in_training_mode() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::vector(vec![1e308]));
        assert!(matches!(g.scale(a, 10.0), Err(NumError::NonFinite { .. })));
        let mut g = Graph::inference(&s);
        let a = g.constant(Tensor::vector(vec![1e308]));
        assert!(g.scale(a, 10.0).is_ok());
    }

    #[test]
    fn broadcasting_add() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.variable(Tensor::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = g.variable(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c),
            &[10.0, 11.0, 12.0, 20.0, 21.0, 22.0, 13.0, 14.0, 15.0, 23.0, 24.0, 25.0]
        );
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0; 6]);
        assert_eq!(g.grad(b).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip_values() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        let yt = g.tensor(y);
        let xt = g.tensor(x);
        assert_eq!(yt.at(&[3, 1, 2]), xt.at(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn masked_softmax_zeroes_hidden() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 100.0, 0.0, 0.0, 5.0]).unwrap());
        let y = g.masked_softmax(x, &[true, true, false], 2).unwrap();
        let v = g.value(y);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-15);
    }
}
