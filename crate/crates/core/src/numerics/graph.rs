//! Recorded computation tape with reverse-mode gradients.
//!
//! Every differentiable forward pass builds a fresh `Graph`. Ops append nodes
//! and return `Value` handles; `backward` walks the tape in reverse and
//! accumulates gradients for every node, including named parameter leaves.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddBias(Value, Value),
    MatMul(Value, Value),
    /// a (n×m) · bᵀ (k×m) → n×k
    MatMulNt(Value, Value),
    MatVec(Value, Value),
    VecMat(Value, Value),
    Concat(Value, Value),
    StackRows(Vec<Value>),
    ConcatRows(Vec<Value>),
    ConcatCols(Vec<Value>),
    Row(Value, usize),
    Cols(Value, usize, usize),
    MeanRows(Value),
    SumAll(Value),
    MeanAll(Value),
    Softmax(Value),
    RowSoftmax(Value),
    LayerNorm {
        x: Value,
        gain: Value,
        bias: Value,
    },
    Gelu(Value),
    Embedding {
        table: Value,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Value,
        target: usize,
    },
    CrossEntropyRows {
        logits: Value,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, Value>,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: BTreeMap<String, Value>,
}

impl Gradients {
    pub fn of(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of the loss w.r.t. the named parameter leaf.
    pub fn named(&self, name: &str) -> Option<&[f64]> {
        self.param_nodes.get(name).and_then(|v| self.of(*v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.param_nodes.keys().map(|s| s.as_str())
    }
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    fn t(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Value) -> &Tensor {
        self.t(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant (non-parameter) leaf.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    /// Insert a named parameter leaf with the store's current value.
    /// Repeated calls for the same name return the same node, so a shared
    /// parameter is one leaf no matter how many paths consume it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Value {
        if let Some(v) = self.param_nodes.get(name) {
            return *v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let v = self.push(t.clone(), Op::Leaf);
        self.param_nodes.insert(name.to_string(), v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Value, b: Value) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.t(a).shape().to_vec(),
            rhs: self.t(b).shape().to_vec(),
        }
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.t(a).data(), self.t(b).data(), |x, y| x + y);
        let t = Tensor::new(self.t(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let data = zip_map(self.t(a).data(), self.t(b).data(), |x, y| x - y);
        let t = Tensor::new(self.t(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_map(self.t(a).data(), self.t(b).data(), |x, y| x * y);
        let t = Tensor::new(self.t(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let data = self.t(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.t(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    /// Matrix (n×d) plus a length-d bias broadcast over rows.
    pub fn add_bias(&mut self, m: Value, bias: Value) -> Result<Value> {
        let (n, d) = self.t(m).dims2();
        if self.t(bias).shape() != [d] {
            return Err(self.shape_err("add_bias", m, bias));
        }
        let mut data = self.t(m).data().to_vec();
        let b = self.t(bias).data();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += b[j];
            }
        }
        let t = Tensor::matrix(n, d, data)?;
        Ok(self.push(t, Op::AddBias(m, bias)))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.t(a).rank() != 2 || self.t(b).rank() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (n, m) = self.t(a).dims2();
        let (m2, k) = self.t(b).dims2();
        if m != m2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = matmul_kernel(self.t(a).data(), self.t(b).data(), n, m, k);
        let t = Tensor::matrix(n, k, data)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.t(a).rank() != 2 || self.t(b).rank() != 2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let (n, m) = self.t(a).dims2();
        let (k, m2) = self.t(b).dims2();
        if m != m2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let ad = self.t(a).data();
        let bd = self.t(b).data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += ad[i * m + l] * bd[j * m + l];
                }
                data[i * k + j] = acc;
            }
        }
        let t = Tensor::matrix(n, k, data)?;
        Ok(self.push(t, Op::MatMulNt(a, b)))
    }

    /// Matrix (n×d) times vector (d) → vector (n).
    pub fn matvec(&mut self, m: Value, v: Value) -> Result<Value> {
        let (n, d) = self.t(m).dims2();
        if self.t(v).shape() != [d] {
            return Err(self.shape_err("matvec", m, v));
        }
        let md = self.t(m).data();
        let vd = self.t(v).data();
        let data: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|j| md[i * d + j] * vd[j]).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::MatVec(m, v)))
    }

    /// Vector (d) times matrix (d×k) → vector (k).
    pub fn vecmat(&mut self, v: Value, m: Value) -> Result<Value> {
        let (d, k) = self.t(m).dims2();
        if self.t(v).shape() != [d] {
            return Err(self.shape_err("vecmat", v, m));
        }
        let md = self.t(m).data();
        let vd = self.t(v).data();
        let mut data = vec![0.0; k];
        for j in 0..d {
            let x = vd[j];
            for t in 0..k {
                data[t] += x * md[j * k + t];
            }
        }
        Ok(self.push(Tensor::vector(data), Op::VecMat(v, m)))
    }

    /// Concatenate two rank-1 vectors.
    pub fn concat(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.t(a).rank() != 1 || self.t(b).rank() != 1 {
            return Err(self.shape_err("concat", a, b));
        }
        let mut data = self.t(a).data().to_vec();
        data.extend_from_slice(self.t(b).data());
        Ok(self.push(Tensor::vector(data), Op::Concat(a, b)))
    }

    pub fn concat3(&mut self, a: Value, b: Value, c: Value) -> Result<Value> {
        let ab = self.concat(a, b)?;
        self.concat(ab, c)
    }

    /// Stack rank-1 vectors of equal length into a matrix.
    pub fn stack_rows(&mut self, rows: &[Value]) -> Result<Value> {
        if rows.is_empty() {
            return Err(Error::invalid("stack_rows: empty input"));
        }
        let d = self.t(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.t(r).shape() != [d] {
                return Err(self.shape_err("stack_rows", rows[0], r));
            }
            data.extend_from_slice(self.t(r).data());
        }
        let t = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(t, Op::StackRows(rows.to_vec())))
    }

    /// Concatenate matrices along axis 0 (equal column counts).
    pub fn concat_rows(&mut self, mats: &[Value]) -> Result<Value> {
        if mats.is_empty() {
            return Err(Error::invalid("concat_rows: empty input"));
        }
        let (_, d) = self.t(mats[0]).dims2();
        let mut data = Vec::new();
        let mut n = 0;
        for &m in mats {
            let (r, c) = self.t(m).dims2();
            if c != d {
                return Err(self.shape_err("concat_rows", mats[0], m));
            }
            data.extend_from_slice(self.t(m).data());
            n += r;
        }
        let t = Tensor::matrix(n, d, data)?;
        Ok(self.push(t, Op::ConcatRows(mats.to_vec())))
    }

    /// Concatenate matrices along axis 1 (equal row counts).
    pub fn concat_cols(&mut self, mats: &[Value]) -> Result<Value> {
        if mats.is_empty() {
            return Err(Error::invalid("concat_cols: empty input"));
        }
        let (n, _) = self.t(mats[0]).dims2();
        let widths: Vec<usize> = mats
            .iter()
            .map(|&m| {
                let (r, c) = self.t(m).dims2();
                if r != n {
                    0
                } else {
                    c
                }
            })
            .collect();
        if widths.iter().any(|&w| w == 0) {
            return Err(self.shape_err("concat_cols", mats[0], mats[1]));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&m, &w) in mats.iter().zip(&widths) {
            let md = self.t(m).data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&md[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor::matrix(n, total, data)?;
        Ok(self.push(t, Op::ConcatCols(mats.to_vec())))
    }

    /// Extract row `i` of a matrix as a rank-1 vector.
    pub fn row(&mut self, m: Value, i: usize) -> Result<Value> {
        let (n, _) = self.t(m).dims2();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        let data = self.t(m).row_slice(i).to_vec();
        Ok(self.push(Tensor::vector(data), Op::Row(m, i)))
    }

    /// Column slice [start, start+len) of a matrix.
    pub fn cols(&mut self, m: Value, start: usize, len: usize) -> Result<Value> {
        let (n, d) = self.t(m).dims2();
        if start + len > d {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: d,
            });
        }
        let md = self.t(m).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&md[i * d + start..i * d + start + len]);
        }
        let t = Tensor::matrix(n, len, data)?;
        Ok(self.push(t, Op::Cols(m, start, len)))
    }

    /// Mean over rows of a matrix → rank-1 vector of column means.
    pub fn mean_rows(&mut self, m: Value) -> Result<Value> {
        let (n, d) = self.t(m).dims2();
        let md = self.t(m).data();
        let mut data = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                data[j] += md[i * d + j];
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(Tensor::vector(data), Op::MeanRows(m)))
    }

    pub fn sum_all(&mut self, x: Value) -> Value {
        let s: f64 = self.t(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Value) -> Value {
        let n = self.t(x).len().max(1);
        let s: f64 = self.t(x).data().iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Shift-stable softmax over a rank-1 vector.
    pub fn softmax(&mut self, x: Value) -> Result<Value> {
        if self.t(x).rank() != 1 {
            return Err(Error::invalid("softmax expects rank-1 input"));
        }
        if self.t(x).is_empty() {
            return Err(Error::EmptyLogits);
        }
        let data = softmax_slice(self.t(x).data());
        Ok(self.push(Tensor::vector(data), Op::Softmax(x)))
    }

    /// Row-wise shift-stable softmax over a matrix.
    pub fn row_softmax(&mut self, m: Value) -> Result<Value> {
        let (n, d) = self.t(m).dims2();
        if d == 0 {
            return Err(Error::EmptyLogits);
        }
        let md = self.t(m).data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let out = softmax_slice(&md[i * d..(i + 1) * d]);
            data[i * d..(i + 1) * d].copy_from_slice(&out);
        }
        let t = Tensor::matrix(n, d, data)?;
        Ok(self.push(t, Op::RowSoftmax(m)))
    }

    /// Layer normalization over the last axis, with learned gain and bias.
    /// Accepts a rank-1 vector or a rank-2 matrix (normalized per row).
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value) -> Result<Value> {
        let (rows, d) = match self.t(x).rank() {
            1 => (1, self.t(x).len()),
            2 => self.t(x).dims2(),
            _ => return Err(Error::invalid("layer_norm expects rank 1 or 2")),
        };
        if self.t(gain).shape() != [d] || self.t(bias).shape() != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let xd = self.t(x).data();
        let g = self.t(gain).data();
        let b = self.t(bias).data();
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let (mean, inv_std) = ln_stats(xr);
            for j in 0..d {
                data[r * d + j] = (xr[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.t(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }))
    }

    /// GELU activation (tanh approximation, smooth everywhere).
    pub fn gelu(&mut self, x: Value) -> Value {
        let data = self.t(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(self.t(x).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x))
    }

    /// Row gather from an embedding table (rank-2, V×d) → len(ids)×d.
    pub fn embedding(&mut self, table: Value, ids: &[usize]) -> Result<Value> {
        let (v, d) = self.t(table).dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange { index: bad, len: v });
        }
        let td = self.t(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// -log softmax(logits)[target] for a rank-1 logits vector.
    pub fn cross_entropy(&mut self, logits: Value, target: usize) -> Result<Value> {
        if self.t(logits).rank() != 1 {
            return Err(Error::invalid("cross_entropy expects rank-1 logits"));
        }
        let k = self.t(logits).len();
        if k == 0 {
            return Err(Error::EmptyLogits);
        }
        if target >= k {
            return Err(Error::IndexOutOfRange {
                index: target,
                len: k,
            });
        }
        let nll = nll_slice(self.t(logits).data(), target);
        Ok(self.push(Tensor::scalar(nll), Op::CrossEntropy { logits, target }))
    }

    /// Per-row -log softmax(row)[target] for a rank-2 logits matrix.
    pub fn cross_entropy_rows(&mut self, logits: Value, targets: &[usize]) -> Result<Value> {
        let (n, k) = self.t(logits).dims2();
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "cross_entropy_rows: {n} logit rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::IndexOutOfRange { index: bad, len: k });
        }
        let ld = self.t(logits).data();
        let data: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| nll_slice(&ld[i * k..(i + 1) * k], t))
            .collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Value) -> Gradients {
        assert!(
            self.t(loss).len() == 1,
            "backward from non-scalar node of shape {:?}",
            self.t(loss).shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let v: Value = $v;
                let buf =
                    grads[v.0].get_or_insert_with(|| vec![0.0; self.t(v).len()]);
                #[allow(clippy::redundant_closure_call)]
                ($f)(buf.as_mut_slice());
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf: &mut [f64]| add_into(buf, g, 1.0));
                acc!(*b, |buf: &mut [f64]| add_into(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf: &mut [f64]| add_into(buf, g, 1.0));
                acc!(*b, |buf: &mut [f64]| add_into(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.t(*a).data(), self.t(*b).data());
                acc!(*a, |buf: &mut [f64]| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc!(*b, |buf: &mut [f64]| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc!(*a, |buf: &mut [f64]| add_into(buf, g, *c));
            }
            Op::AddBias(m, bias) => {
                let (n, d) = self.t(*m).dims2();
                acc!(*m, |buf: &mut [f64]| add_into(buf, g, 1.0));
                acc!(*bias, |buf: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, m) = self.t(*a).dims2();
                let (_, k) = self.t(*b).dims2();
                let (ad, bd) = (self.t(*a).data(), self.t(*b).data());
                // dA = g · Bᵀ
                acc!(*a, |buf: &mut [f64]| {
                    for i in 0..n {
                        for l in 0..m {
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += g[i * k + j] * bd[l * k + j];
                            }
                            buf[i * m + l] += acc;
                        }
                    }
                });
                // dB = Aᵀ · g
                acc!(*b, |buf: &mut [f64]| {
                    for l in 0..m {
                        for i in 0..n {
                            let a_il = ad[i * m + l];
                            if a_il == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                buf[l * k + j] += a_il * g[i * k + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (n, m) = self.t(*a).dims2();
                let (k, _) = self.t(*b).dims2();
                let (ad, bd) = (self.t(*a).data(), self.t(*b).data());
                // out = A·Bᵀ (n×k): dA = g·B, dB = gᵀ·A
                acc!(*a, |buf: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..k {
                            let gij = g[i * k + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for l in 0..m {
                                buf[i * m + l] += gij * bd[j * m + l];
                            }
                        }
                    }
                });
                acc!(*b, |buf: &mut [f64]| {
                    for j in 0..k {
                        for i in 0..n {
                            let gij = g[i * k + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for l in 0..m {
                                buf[j * m + l] += gij * ad[i * m + l];
                            }
                        }
                    }
                });
            }
            Op::MatVec(m, v) => {
                let (n, d) = self.t(*m).dims2();
                let (md, vd) = (self.t(*m).data(), self.t(*v).data());
                acc!(*m, |buf: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[i * d + j] += g[i] * vd[j];
                        }
                    }
                });
                acc!(*v, |buf: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[j] += g[i] * md[i * d + j];
                        }
                    }
                });
            }
            Op::VecMat(v, m) => {
                let (d, k) = self.t(*m).dims2();
                let (vd, md) = (self.t(*v).data(), self.t(*m).data());
                acc!(*v, |buf: &mut [f64]| {
                    for j in 0..d {
                        for t in 0..k {
                            buf[j] += g[t] * md[j * k + t];
                        }
                    }
                });
                acc!(*m, |buf: &mut [f64]| {
                    for j in 0..d {
                        for t in 0..k {
                            buf[j * k + t] += vd[j] * g[t];
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let p = self.t(*a).len();
                acc!(*a, |buf: &mut [f64]| add_into(buf, &g[..p], 1.0));
                acc!(*b, |buf: &mut [f64]| add_into(buf, &g[p..], 1.0));
            }
            Op::StackRows(rows) => {
                let d = self.t(rows[0]).len();
                for (i, &r) in rows.iter().enumerate() {
                    acc!(r, |buf: &mut [f64]| add_into(
                        buf,
                        &g[i * d..(i + 1) * d],
                        1.0
                    ));
                }
            }
            Op::ConcatRows(mats) => {
                let mut offset = 0;
                for &m in mats {
                    let len = self.t(m).len();
                    acc!(m, |buf: &mut [f64]| add_into(
                        buf,
                        &g[offset..offset + len],
                        1.0
                    ));
                    offset += len;
                }
            }
            Op::ConcatCols(mats) => {
                let n = self.t(mats[0]).dims2().0;
                let total: usize = mats.iter().map(|&m| self.t(m).dims2().1).sum();
                let mut offset = 0;
                for &m in mats {
                    let (_, w) = self.t(m).dims2();
                    acc!(m, |buf: &mut [f64]| {
                        for i in 0..n {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Row(m, i) => {
                let (_, d) = self.t(*m).dims2();
                acc!(*m, |buf: &mut [f64]| add_into(
                    &mut buf[i * d..(i + 1) * d],
                    g,
                    1.0
                ));
            }
            Op::Cols(m, start, len) => {
                let (n, d) = self.t(*m).dims2();
                acc!(*m, |buf: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..*len {
                            buf[i * d + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::MeanRows(m) => {
                let (n, d) = self.t(*m).dims2();
                let inv = 1.0 / n as f64;
                acc!(*m, |buf: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[i * d + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc!(*x, |buf: &mut [f64]| {
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::MeanAll(x) => {
                let inv = 1.0 / self.t(*x).len().max(1) as f64;
                acc!(*x, |buf: &mut [f64]| {
                    for v in buf.iter_mut() {
                        *v += g[0] * inv;
                    }
                });
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let dot: f64 = (0..s.len()).map(|i| g[i] * s[i]).sum();
                acc!(*x, |buf: &mut [f64]| {
                    for i in 0..buf.len() {
                        buf[i] += s[i] * (g[i] - dot);
                    }
                });
            }
            Op::RowSoftmax(m) => {
                let (n, d) = self.t(*m).dims2();
                let s = node.value.data();
                acc!(*m, |buf: &mut [f64]| {
                    for r in 0..n {
                        let sr = &s[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = (0..d).map(|i| gr[i] * sr[i]).sum();
                        for i in 0..d {
                            buf[r * d + i] += sr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (rows, d) = match self.t(*x).rank() {
                    1 => (1, self.t(*x).len()),
                    _ => self.t(*x).dims2(),
                };
                let xd = self.t(*x).data();
                let gd = self.t(*gain).data();
                acc!(*bias, |buf: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                acc!(*gain, |buf: &mut [f64]| {
                    for r in 0..rows {
                        let xr = &xd[r * d..(r + 1) * d];
                        let (mean, inv_std) = ln_stats(xr);
                        for j in 0..d {
                            buf[j] += g[r * d + j] * (xr[j] - mean) * inv_std;
                        }
                    }
                });
                acc!(*x, |buf: &mut [f64]| {
                    for r in 0..rows {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (mean, inv_std) = ln_stats(xr);
                        // dxh_j = g_j * gain_j; dx = inv_std*(dxh - mean(dxh) - xh*mean(dxh*xh))
                        let inv_n = 1.0 / d as f64;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (xr[j] - mean) * inv_std;
                            let dxh = gr[j] * gd[j];
                            mean_dxh += dxh * inv_n;
                            mean_dxh_xh += dxh * xh * inv_n;
                        }
                        for j in 0..d {
                            let xh = (xr[j] - mean) * inv_std;
                            let dxh = gr[j] * gd[j];
                            buf[r * d + j] += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.t(*x).data();
                acc!(*x, |buf: &mut [f64]| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (_, d) = self.t(*table).dims2();
                acc!(*table, |buf: &mut [f64]| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let ld = self.t(*logits).data();
                let s = softmax_slice(ld);
                acc!(*logits, |buf: &mut [f64]| {
                    for i in 0..buf.len() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        buf[i] += g[0] * (s[i] - onehot);
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (_, k) = self.t(*logits).dims2();
                let ld = self.t(*logits).data();
                acc!(*logits, |buf: &mut [f64]| {
                    for (r, &t) in targets.iter().enumerate() {
                        let s = softmax_slice(&ld[r * k..(r + 1) * k]);
                        for i in 0..k {
                            let onehot = if i == t { 1.0 } else { 0.0 };
                            buf[r * k + i] += g[r] * (s[i] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

/// Row-major (n×m)·(m×k) with the k-loop innermost for cache locality.
fn matmul_kernel(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for l in 0..m {
            let a_il = a[i * m + l];
            if a_il == 0.0 {
                continue;
            }
            let brow = &b[l * k..(l + 1) * k];
            let orow = &mut out[i * k..(i + 1) * k];
            for j in 0..k {
                orow[j] += a_il * brow[j];
            }
        }
    }
    out
}

/// Shift-stable softmax of a non-empty slice.
pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// -log softmax(x)[target] via log-sum-exp.
pub(crate) fn nll_slice(x: &[f64], target: usize) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - x[target]
}

fn ln_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
