//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends a node
//! holding its output value plus whatever it needs for the vector-Jacobian
//! product; node indices are therefore already a topological order, and
//! [`Tape::backward`] simply walks them in reverse.
//!
//! Nodes whose inputs never touch a `requires_grad` leaf are marked inert and
//! skipped during the backward sweep, so frozen weights cost nothing there.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Transpose(Var),
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    ScatterCols {
        x: Var,
        cols: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward multiply-accumulate count of every matrix product recorded so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleBy(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Transpose(x) | Op::Gelu(x) | Op::Tanh(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::SliceRows { x, .. }
            | Op::SelectCols { x, .. }
            | Op::ScatterCols { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embed { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(va.data(), vb.data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`m` bias to every column of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (m, n) = vx.dims2();
        if vx.shape().len() != 2 || vb.len() != m {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        let b = vb.data();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            for v in row {
                *v += b[r];
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by a one-element tensor that may itself be trainable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if !vs.is_scalar() {
            return Err(Error::shape("scale_by", self.value(x).shape(), vs.shape()));
        }
        let c = vs.item();
        let out = self.value(x).map(|v| c * v);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Stacks the rows of `a` (`d₁ × n`) above the rows of `b` (`d₂ × n`).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (d1, n) = va.dims2();
        let (d2, n2) = vb.dims2();
        if n != n2 {
            return Err(Error::shape("concat_rows", va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity((d1 + d2) * n);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_vec(&[d1 + d2, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        if len == 0 || start + len > m {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                bound: m,
            });
        }
        let data = vx.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(&[len, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        if cols.is_empty() {
            return Err(Error::Contract("select_cols needs at least one column".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Index {
                what: "column",
                index: bad,
                bound: n,
            });
        }
        let k = cols.len();
        let mut out = vec![0.0; m * k];
        let src = vx.data();
        for r in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                out[r * k + j] = src[r * n + c];
            }
        }
        let out = Tensor::from_vec(&[m, k], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Places column `j` of `x` at column `cols[j]` of a zero `m × total` matrix.
    pub fn scatter_cols(&mut self, x: Var, cols: &[usize], total: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, k) = vx.dims2();
        if cols.len() != k {
            return Err(Error::shape("scatter_cols", vx.shape(), &[cols.len()]));
        }
        let mut seen = vec![false; total];
        for &c in cols {
            if c >= total {
                return Err(Error::Index {
                    what: "scatter column",
                    index: c,
                    bound: total,
                });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Contract(format!("scatter column {c} repeated")));
            }
        }
        let mut out = vec![0.0; m * total];
        let src = vx.data();
        for r in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                out[r * total + c] = src[r * k + j];
            }
        }
        let out = Tensor::from_vec(&[m, total], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Normalizes every column of a `d × N` matrix over its `d` features.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let (d, n) = vx.dims2();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.len() != d || vb.len() != d {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let src = vx.data();
        let (g, b) = (vg.data(), vb.data());
        let mut xhat = vec![0.0; d * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; d * n];
        for c in 0..n {
            let mean = (0..d).map(|r| src[r * n + c]).sum::<f64>() / d as f64;
            let var = (0..d)
                .map(|r| {
                    let z = src[r * n + c] - mean;
                    z * z
                })
                .sum::<f64>()
                / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[c] = is;
            for r in 0..d {
                let h = (src[r * n + c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[r] * h + b[r];
            }
        }
        let out = Tensor::from_vec(&[d, n], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_K * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Looks up rows of a `|V| × d` table and lays them out as a `d × n` matrix.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (vocab, d) = vt.dims2();
        if ids.is_empty() {
            return Err(Error::Contract("embed needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: vocab,
            });
        }
        let n = ids.len();
        let mut out = vec![0.0; d * n];
        let src = vt.data();
        for (j, &id) in ids.iter().enumerate() {
            for r in 0..d {
                out[r * n + j] = src[id * d + r];
            }
        }
        let out = Tensor::from_vec(&[d, n], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax where `mask[i*n + j] == false` forces entry `(i, j)` to zero
    /// (equivalent to a −∞ logit). Every row must keep at least one entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let (m, n) = vx.dims2();
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("masked_softmax_rows", vx.shape(), &[mask.len()]));
            }
        }
        let src = vx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {i} fully masked")));
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::from_vec(&[m, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Mean negative log-likelihood over the unmasked columns of `|V| × n` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        let (vocab, n) = vl.dims2();
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateLoss);
        }
        let src = vl.data();
        let mut probs = vec![0.0; vocab * n];
        let mut loss = 0.0;
        for j in 0..n {
            if !mask[j] {
                continue;
            }
            let t = targets[j];
            if t >= vocab {
                return Err(Error::Index {
                    what: "target id",
                    index: t,
                    bound: vocab,
                });
            }
            let mx = (0..vocab).map(|r| src[r * n + j]).fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::NonFinite("cross_entropy"));
            }
            let z: f64 = (0..vocab).map(|r| (src[r * n + j] - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - src[t * n + j];
            for r in 0..vocab {
                probs[r * n + j] = (src[r * n + j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every node
    /// that requires a gradient. Intermediate gradients are released once
    /// consumed; leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::from_vec(lv.shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.vjp(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, vb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(va.data(), gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(va.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), d)?);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = g.cols();
                    let db: Vec<f64> = gd.chunks(n).map(|row| row.iter().sum()).collect();
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_vec(&shape, db)?);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    let ds: f64 = gd.iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::from_vec(&shape, vec![ds])?);
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose());
            }
            Op::ConcatRows(a, b) => {
                let (d1, n) = self.value(*a).dims2();
                let d2 = self.value(*b).rows();
                if self.wants(*a) {
                    let da = gd[..d1 * n].to_vec();
                    self.accumulate(grads, *a, Tensor::from_vec(&[d1, n], da)?);
                }
                if self.wants(*b) {
                    let db = gd[d1 * n..].to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&[d2, n], db)?);
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let (m, n) = vx.dims2();
                let mut dx = vec![0.0; m * n];
                dx[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx)?);
            }
            Op::SelectCols { x, cols } => {
                let vx = self.value(*x);
                let (m, n) = vx.dims2();
                let k = cols.len();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for (j, &c) in cols.iter().enumerate() {
                        dx[r * n + c] += gd[r * k + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx)?);
            }
            Op::ScatterCols { x, cols } => {
                let vx = self.value(*x);
                let (m, k) = vx.dims2();
                let total = g.cols();
                let mut dx = vec![0.0; m * k];
                for r in 0..m {
                    for (j, &c) in cols.iter().enumerate() {
                        dx[r * k + j] = gd[r * total + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (d, n) = g.dims2();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let dg: Vec<f64> = (0..d)
                        .map(|r| (0..n).map(|c| gd[r * n + c] * xhat[r * n + c]).sum())
                        .collect();
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_vec(&shape, dg)?);
                }
                if self.wants(*bias) {
                    let db: Vec<f64> = gd.chunks(n).map(|row| row.iter().sum()).collect();
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_vec(&shape, db)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; d * n];
                    let df = d as f64;
                    for c in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for r in 0..d {
                            let dh = gd[r * n + c] * gv[r];
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        for r in 0..d {
                            let dh = gd[r * n + c] * gv[r];
                            dx[r * n + c] = inv_std[c] / df * (df * dh - s1 - xhat[r * n + c] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[d, n], dx)?);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), d)?);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = y.iter().zip(gd).map(|(y, g)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), d)?);
            }
            Op::Embed { table, ids } => {
                let vt = self.value(*table);
                let (vocab, d) = vt.dims2();
                let n = ids.len();
                let mut dt = vec![0.0; vocab * d];
                for (j, &id) in ids.iter().enumerate() {
                    for r in 0..d {
                        dt[id * d + r] += gd[r * n + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_vec(vt.shape(), dt)?);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let (m, n) = node.value.dims2();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[m, n], dx)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let (vocab, n) = self.value(*logits).dims2();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; vocab * n];
                for j in 0..n {
                    if !mask[j] {
                        continue;
                    }
                    for r in 0..vocab {
                        dl[r * n + j] = scale * probs[r * n + j];
                    }
                    dl[targets[j] * n + j] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[vocab, n], dl)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
        }
        Ok(())
    }
}
