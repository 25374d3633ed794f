//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, records its operands and returns a [`Var`] handle. Operands
//! always precede the node that consumes them, so a single reverse sweep
//! over the node list visits every node once in a valid order.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, Padding, PoolKind};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// What a row-wise softmax does with a row whose entries are all masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyRows {
    Error,
    Zero,
}

enum Op {
    Leaf,
    Param(ParamId),
    Embed { param: ParamId, rows: Vec<usize> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Act(Var, Activation),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Pool { x: Var, kind: PoolKind, argmax: Vec<usize>, hw: usize, c: usize },
    Softmax { x: Var, n: usize },
    Concat { parts: Vec<Var>, outer: usize, inners: Vec<usize> },
    ChannelScale { f: Var, m: Var, batch: usize, hw: usize, c: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GatherRows { x: Var, idx: Vec<usize>, row: usize },
    RowDot { keys: Var, q: Var, b: usize, n: usize, d: usize },
    WeightedSum { w: Var, v: Var, b: usize, n: usize, d: usize },
    LogLoss { p: Var, labels: Vec<f64>, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Embed { .. } => "embed",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool { .. } => "global_pool",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GatherRows { .. } => "gather_rows",
            Op::RowDot { .. } => "row_dot",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::LogLoss { .. } => "logloss",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: BTreeMap<ParamId, Var>,
    nodes: Vec<Node>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: BTreeMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            params: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn store(&self) -> Result<&'p ParamStore> {
        self.params
            .ok_or_else(|| Error::Contract("graph was created without a parameter store".into()))
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Frozen parameters never require grad.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = self.store()?.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), !p.frozen)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Gathers rows of a parameter table without copying the whole table.
    pub fn embed(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let p = self.store()?.get(id);
        let shape = p.value.shape();
        let n_rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n_rows {
                return Err(Error::shape(format!(
                    "row {r} out of range for table {} with {n_rows} rows",
                    p.name
                )));
            }
            data.extend_from_slice(&p.value.data()[r * width..(r + 1) * width]);
        }
        let mut out_shape = vec![rows.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let value = Tensor::new(&out_shape, data)?;
        self.push(
            value,
            Op::Embed {
                param: id,
                rows: rows.to_vec(),
            },
            !p.frozen,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x[..., n] + b[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match trailing extent {n}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, b]);
        self.push(t, Op::AddBias(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape(format!(
                "matmul needs two matrices, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {m}x{k} . {k2}x{n}"
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul { a, b, m, k, n }, rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::NumericDomain("non-finite activation input".into()));
        }
        let f: fn(f64) -> f64 = match act {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
        };
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// NHWC cross-correlation. `x` is `[H,W,Cin]` or `[B,H,W,Cin]`, kernel `[K,K,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data());
        let t = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.rg(&[x, k]);
        self.push(t, Op::Conv2d { x, k, geom }, rg)
    }

    /// Squeezes the spatial axes: `[H,W,C] -> [C]` or `[B,H,W,C] -> [B,C]`.
    pub fn global_pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let (batch, hw, c, out_shape) = kernels::pool_dims(self.shape(x))?;
        let (out, argmax) = kernels::global_pool(kind, self.value(x).data(), batch, hw, c);
        let t = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Pool { x, kind, argmax, hw, c }, rg)
    }

    /// Softmax over the last axis with an optional mask of the same length as `x`.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>, empty: EmptyRows) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let xd = self.value(x).data();
        if let Some(m) = mask {
            if m.len() != xd.len() {
                return Err(Error::shape(format!(
                    "mask length {} does not match {} scores",
                    m.len(),
                    xd.len()
                )));
            }
        }
        let mut out = vec![0.0; xd.len()];
        for (r, (row, o)) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let live = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n).filter(|&j| live(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                match empty {
                    EmptyRows::Error => return Err(Error::EmptyAttention),
                    EmptyRows::Zero => continue,
                }
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| live(j)) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        self.push(
            t,
            Op::Softmax { x, n },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {}", base.len())));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inners: Vec<usize> = parts.iter().map(|&p| self.value(p).len() / outer).collect();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&p, &inner) in parts.iter().zip(&inners) {
                data.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(parts);
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inners,
            },
            rg,
        )
    }

    /// `out[.., y, x, k] = f[.., y, x, k] * m[.., k]`.
    pub fn channel_scale(&mut self, f: Var, m: Var) -> Result<Var> {
        let (batch, hw, c, _) = kernels::pool_dims(self.shape(f))?;
        let expect: Vec<usize> = if self.shape(f).len() == 4 { vec![batch, c] } else { vec![c] };
        if self.shape(m) != expect.as_slice() {
            return Err(Error::shape(format!(
                "channel_scale: gate shape {:?} does not match map {:?}",
                self.shape(m),
                self.shape(f)
            )));
        }
        let (fd, md) = (self.value(f).data(), self.value(m).data());
        let mut out = vec![0.0; fd.len()];
        for b in 0..batch {
            let gate = &md[b * c..(b + 1) * c];
            for p in 0..hw {
                let off = (b * hw + p) * c;
                for ((o, v), g) in out[off..off + c].iter_mut().zip(&fd[off..off + c]).zip(gate) {
                    *o = v * g;
                }
            }
        }
        let t = Tensor::new(self.shape(f), out)?;
        let rg = self.rg(&[f, m]);
        self.push(t, Op::ChannelScale { f, m, batch, hw, c }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Selects rows along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= shape[0] {
                return Err(Error::shape(format!("gather index {i} out of range {}", shape[0])));
            }
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                row,
            },
            rg,
        )
    }

    /// Batched key/query scores: `keys[B,N,D] . q[B,D] -> [B,N]`.
    pub fn row_dot(&mut self, keys: Var, q: Var) -> Result<Var> {
        let (&[b, n, d], &[b2, d2]) = (self.shape(keys), self.shape(q)) else {
            return Err(Error::shape(format!(
                "row_dot needs [B,N,D] and [B,D], got {:?} and {:?}",
                self.shape(keys),
                self.shape(q)
            )));
        };
        if b != b2 || d != d2 {
            return Err(Error::shape(format!("row_dot: [{b},{n},{d}] vs [{b2},{d2}]")));
        }
        let (kd, qd) = (self.value(keys).data(), self.value(q).data());
        let mut out = vec![0.0; b * n];
        for bi in 0..b {
            let qrow = &qd[bi * d..(bi + 1) * d];
            for j in 0..n {
                let krow = &kd[(bi * n + j) * d..(bi * n + j + 1) * d];
                out[bi * n + j] = krow.iter().zip(qrow).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(&[b, n], out)?;
        let rg = self.rg(&[keys, q]);
        self.push(t, Op::RowDot { keys, q, b, n, d }, rg)
    }

    /// Batched convex combination: `w[B,N] x v[B,N,D] -> [B,D]`.
    pub fn weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (&[b, n], &[b2, n2, d]) = (self.shape(w), self.shape(v)) else {
            return Err(Error::shape(format!(
                "weighted_sum needs [B,N] and [B,N,D], got {:?} and {:?}",
                self.shape(w),
                self.shape(v)
            )));
        };
        if b != b2 || n != n2 {
            return Err(Error::shape(format!("weighted_sum: [{b},{n}] vs [{b2},{n2},{d}]")));
        }
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for j in 0..n {
                let wv = wd[bi * n + j];
                if wv == 0.0 {
                    continue;
                }
                for (acc, x) in o.iter_mut().zip(&vd[(bi * n + j) * d..(bi * n + j + 1) * d]) {
                    *acc += wv * x;
                }
            }
        }
        let t = Tensor::new(&[b, d], out)?;
        let rg = self.rg(&[w, v]);
        self.push(t, Op::WeightedSum { w, v, b, n, d }, rg)
    }

    /// Mean negative log-likelihood of probabilities `p` clamped to `[eps, 1-eps]`.
    pub fn logloss(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let pd = self.value(p).data();
        if pd.len() != labels.len() {
            return Err(Error::shape(format!(
                "logloss: {} predictions, {} labels",
                pd.len(),
                labels.len()
            )));
        }
        let total: f64 = pd
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.rg(&[p]);
        self.push(
            Tensor::scalar(total / labels.len() as f64),
            Op::LogLoss {
                p,
                labels: labels.to_vec(),
                eps,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericDomain("non-finite gradient".into()));
            }
        }
        Ok(Gradients {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            params,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut BTreeMap<ParamId, Vec<f64>>,
    ) {
        let node = &self.nodes[i];
        let store_len = |id: ParamId| self.params.map(|s| s.value(id).len()).unwrap_or(0);
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let acc = params.entry(*id).or_insert_with(|| vec![0.0; store_len(*id)]);
                axpy(acc, g, 1.0);
            }
            Op::Embed { param, rows } => {
                let acc = params.entry(*param).or_insert_with(|| vec![0.0; store_len(*param)]);
                let width = g.len() / rows.len();
                for (r, gr) in rows.iter().zip(g.chunks_exact(width)) {
                    axpy(&mut acc[r * width..(r + 1) * width], gr, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        axpy(s, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let od = self.value(other).data();
                    if let Some(s) = self.slot(grads, v) {
                        for ((d, gv), o) in s.iter_mut().zip(g).zip(od) {
                            *d += gv * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, g, *c);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let n = s.len();
                    for row in g.chunks_exact(n) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].requires_grad {
                    // dA = G . B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] = grow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    axpy(self.slot(grads, *a).unwrap(), &da, 1.0);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T . G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av != 0.0 {
                                axpy(&mut db[p * n..(p + 1) * n], grow, av);
                            }
                        }
                    }
                    axpy(self.slot(grads, *b).unwrap(), &db, 1.0);
                }
            }
            Op::Act(x, act) => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    match act {
                        Activation::Relu => {
                            for ((d, gv), yv) in s.iter_mut().zip(g).zip(y) {
                                if *yv > 0.0 {
                                    *d += gv;
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for ((d, gv), yv) in s.iter_mut().zip(g).zip(y) {
                                *d += gv * yv * (1.0 - yv);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (xd, kd) = (self.value(*x).data(), self.value(*k).data());
                let mut dx = self.nodes[x.0].requires_grad.then(|| vec![0.0; xd.len()]);
                let mut dk = self.nodes[k.0].requires_grad.then(|| vec![0.0; kd.len()]);
                kernels::conv2d_backward(geom, xd, kd, g, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    axpy(self.slot(grads, *x).unwrap(), &dx, 1.0);
                }
                if let Some(dk) = dk {
                    axpy(self.slot(grads, *k).unwrap(), &dk, 1.0);
                }
            }
            Op::Pool { x, kind, argmax, hw, c } => {
                if let Some(s) = self.slot(grads, *x) {
                    match kind {
                        PoolKind::Avg => {
                            let inv = 1.0 / *hw as f64;
                            for (bi, gb) in g.chunks_exact(*c).enumerate() {
                                for p in 0..*hw {
                                    let off = (bi * hw + p) * c;
                                    axpy(&mut s[off..off + c], gb, inv);
                                }
                            }
                        }
                        PoolKind::Max => {
                            for (&pos, gv) in argmax.iter().zip(g) {
                                s[pos] += gv;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, n, .. } => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((yr, gr), sr) in y.chunks_exact(*n).zip(g.chunks_exact(*n)).zip(s.chunks_exact_mut(*n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in sr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut start = 0;
                for (&p, &inner) in parts.iter().zip(inners) {
                    if let Some(s) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + inner];
                            axpy(&mut s[o * inner..(o + 1) * inner], src, 1.0);
                        }
                    }
                    start += inner;
                }
            }
            Op::ChannelScale { f, m, batch, hw, c } => {
                let (fd, md) = (self.value(*f).data(), self.value(*m).data());
                if let Some(s) = self.slot(grads, *f) {
                    for b in 0..*batch {
                        let gate = &md[b * c..(b + 1) * c];
                        for p in 0..*hw {
                            let off = (b * hw + p) * c;
                            for ((d, gv), gt) in s[off..off + c].iter_mut().zip(&g[off..off + c]).zip(gate) {
                                *d += gv * gt;
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *m) {
                    for b in 0..*batch {
                        for p in 0..*hw {
                            let off = (b * hw + p) * c;
                            for ((d, gv), fv) in s[b * c..(b + 1) * c].iter_mut().zip(&g[off..off + c]).zip(&fd[off..off + c]) {
                                *d += gv * fv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::GatherRows { x, idx, row } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&i, gr) in idx.iter().zip(g.chunks_exact(*row)) {
                        axpy(&mut s[i * row..(i + 1) * row], gr, 1.0);
                    }
                }
            }
            Op::RowDot { keys, q, b, n, d } => {
                let (kd, qd) = (self.value(*keys).data(), self.value(*q).data());
                if let Some(s) = self.slot(grads, *keys) {
                    for bi in 0..*b {
                        let qrow = &qd[bi * d..(bi + 1) * d];
                        for j in 0..*n {
                            let off = (bi * n + j) * d;
                            axpy(&mut s[off..off + d], qrow, g[bi * n + j]);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *q) {
                    for bi in 0..*b {
                        for j in 0..*n {
                            let off = (bi * n + j) * d;
                            axpy(&mut s[bi * d..(bi + 1) * d], &kd[off..off + d], g[bi * n + j]);
                        }
                    }
                }
            }
            Op::WeightedSum { w, v, b, n, d } => {
                let (wd, vd) = (self.value(*w).data(), self.value(*v).data());
                if let Some(s) = self.slot(grads, *w) {
                    for bi in 0..*b {
                        let grow = &g[bi * d..(bi + 1) * d];
                        for j in 0..*n {
                            let off = (bi * n + j) * d;
                            s[bi * n + j] += vd[off..off + d].iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *v) {
                    for bi in 0..*b {
                        let grow = &g[bi * d..(bi + 1) * d];
                        for j in 0..*n {
                            let off = (bi * n + j) * d;
                            axpy(&mut s[off..off + d], grow, wd[bi * n + j]);
                        }
                    }
                }
            }
            Op::LogLoss { p, labels, eps } => {
                let pd = self.value(*p).data();
                if let Some(s) = self.slot(grads, *p) {
                    let inv_n = 1.0 / labels.len() as f64;
                    for ((d, &pv), &y) in s.iter_mut().zip(pd).zip(labels) {
                        if pv > *eps && pv < 1.0 - eps {
                            *d += g[0] * inv_n * (-(y / pv) + (1.0 - y) / (1.0 - pv));
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; zeros when `v` requires grad but
    /// does not reach the root, `None` when `v` takes no gradient at all.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = &self.shapes[v.0];
        Some(match &self.nodes[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Accumulated gradient for a parameter; absent for frozen parameters
    /// and for parameters that did not take part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}
