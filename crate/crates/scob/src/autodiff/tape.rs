//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] owns every tensor it records. [`Tensor`] is a copyable handle
//! into the tape. Records are append-only and topologically ordered: every
//! input of a node was recorded before the node itself. A tape supports
//! exactly one backward pass per forward recording.
//!
//! Values are `f64` throughout; finite-difference tolerances in the test
//! suite rely on that precision.

use crate::error::{Result, ScobError};

use super::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// vector [n] times scalar tensor [1]
    Scale(usize, usize),
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    /// [c,h,w] -> [h*w, c]
    ChwTokens(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    StopGrad(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    MeanAll(usize),
    SumAll(usize),
    MeanAxis0(usize),
    Dot(usize, usize),
    ConcatVec(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
    },
    SliceVec {
        a: usize,
        start: usize,
        len: usize,
    },
    /// [t,d] + [d] broadcast over rows
    AddRow(usize, usize),
    /// [t,d] scaled per row by [t]
    ScaleRows(usize, usize),
    /// rows: [h, half], cols: [w, half] -> [h*w, 2*half]
    GridPosEncode {
        rows: usize,
        cols: usize,
        h: usize,
        w: usize,
    },
    Reshape(usize),
}

impl Op {
    /// Ids of the records this op consumes.
    pub(crate) fn input_ids(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Scale(a, b)
            | Op::Dot(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::ChwTokens(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::StopGrad(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::MeanAxis0(a)
            | Op::Reshape(a)
            | Op::Clamp { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceVec { a, .. } => vec![*a],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::ConcatVec(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::GridPosEncode { rows, cols, .. } => vec![*rows, *cols],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    retain: bool,
    binding: Option<String>,
}

/// Append-only record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor. Rejects non-finite values and shape/value
    /// length mismatches.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if values.len() != numel(shape) {
            return Err(ScobError::Dimension(format!(
                "leaf: {} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ScobError::Numeric("leaf: non-finite input value".into()));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values, requires_grad))
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], &[1], false)
    }

    /// Leaf bound to a named parameter; its gradient is collected by
    /// [`Tape::param_grads`] after backward.
    pub fn bind(&mut self, name: &str, values: &[f64], shape: &[usize]) -> Result<Tensor> {
        let t = self.leaf(values.to_vec(), shape, true)?;
        self.nodes[t.0].binding = Some(name.to_string());
        Ok(t)
    }

    /// Named leaf that records no gradient (frozen parameter view).
    pub fn bind_frozen(&mut self, values: &[f64], shape: &[usize]) -> Result<Tensor> {
        self.leaf(values.to_vec(), shape, false)
    }

    /// Keep the gradient of an interior tensor after backward. Must be
    /// called before recording consumers of `t`, because downstream nodes
    /// capture the needs-grad flag at creation time.
    pub fn retain_grad(&mut self, t: Tensor) {
        self.nodes[t.0].retain = true;
        self.nodes[t.0].needs_grad = true;
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn value_scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].values[0]
    }

    /// Gradient of `t`, present after backward for requires-grad leaves and
    /// retained interior tensors.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// (name, gradient) pairs for all bound leaves, in recording order.
    pub fn param_grads(&self) -> Vec<(&str, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.binding, &n.grad) {
                (Some(name), Some(g)) => Some((name.as_str(), g.as_slice())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Tensor {
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
            needs_grad,
            retain: false,
            binding: None,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(ScobError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let vals: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Add(a.0, b.0), shape, vals, ng))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let vals: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Sub(a.0, b.0), shape, vals, ng))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "mul")?;
        let vals: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Mul(a.0, b.0), shape, vals, ng))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "div")?;
        let vals: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Div(a.0, b.0), shape, vals, ng))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::AddScalar(a.0), shape, vals, ng)
    }

    /// Every input of record i was produced at a record with index < i.
    pub fn topology_is_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.input_ids().iter().all(|&j| j < i))
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::MulScalar(a.0, c), shape, vals, ng)
    }

    /// Multiply every element of `a` by the scalar tensor `s` (shape [1]).
    pub fn scale(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if self.nodes[s.0].shape != [1] {
            return Err(ScobError::Dimension("scale: scalar operand must be [1]".into()));
        }
        let sv = self.nodes[s.0].values[0];
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, s.0]);
        Ok(self.push(Op::Scale(a.0, s.0), shape, vals, ng))
    }

    // ---- unary ----

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::Relu(a.0), shape, vals, ng)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::Sigmoid(a.0), shape, vals, ng)
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::Log(a.0), shape, vals, ng)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::Exp(a.0), shape, vals, ng)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::Sqrt(a.0), shape, vals, ng)
    }

    /// Value-identical copy that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Tensor) -> Tensor {
        let vals = self.nodes[a.0].values.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::StopGrad(a.0), shape, vals, false)
    }

    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let vals: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0]);
        self.push(Op::Clamp { a: a.0, lo, hi }, shape, vals, ng)
    }

    /// Row-wise softmax with max subtraction. 1-D input is one row.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(ScobError::Dimension(format!(
                    "softmax: rank {} unsupported",
                    shape.len()
                )))
            }
        };
        let mut vals = vec![0.0; rows * cols];
        kernels::softmax_rows(&self.nodes[a.0].values, &mut vals, rows, cols);
        let ng = self.needs(&[a.0]);
        Ok(self.push(Op::Softmax(a.0), shape, vals, ng))
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].values.len() as f64;
        let m = self.nodes[a.0].values.iter().sum::<f64>() / n;
        let ng = self.needs(&[a.0]);
        self.push(Op::MeanAll(a.0), vec![1], vec![m], ng)
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].values.iter().sum::<f64>();
        let ng = self.needs(&[a.0]);
        self.push(Op::SumAll(a.0), vec![1], vec![s], ng)
    }

    /// Column means of a [t, d] matrix -> [d].
    pub fn mean_axis0(&mut self, a: Tensor) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(ScobError::Dimension("mean_axis0: expects [rows, cols]".into()));
        }
        let (t, d) = (shape[0], shape[1]);
        let mut vals = vec![0.0; d];
        for r in 0..t {
            let row = &self.nodes[a.0].values[r * d..(r + 1) * d];
            for (o, &v) in vals.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / t as f64;
        vals.iter_mut().for_each(|v| *v *= inv);
        let ng = self.needs(&[a.0]);
        Ok(self.push(Op::MeanAxis0(a.0), vec![d], vals, ng))
    }

    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "dot")?;
        let s: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Dot(a.0, b.0), vec![1], vec![s], ng))
    }

    // ---- linear algebra ----

    /// a[m,k] * b[k,n], or a[m,k] * b[n,k]^T when `trans_b`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor, trans_b: bool) -> Result<Tensor> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(ScobError::Dimension("matmul: operands must be rank 2".into()));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(ScobError::Dimension(format!(
                "matmul: inner dims {k} vs {kb} (trans_b={trans_b})"
            )));
        }
        let mut vals = vec![0.0; m * n];
        if trans_b {
            kernels::mm_nt(&self.nodes[a.0].values, &self.nodes[b.0].values, &mut vals, m, k, n);
        } else {
            kernels::mm_nn(&self.nodes[a.0].values, &self.nodes[b.0].values, &mut vals, m, k, n);
        }
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0, trans_b }, vec![m, n], vals, ng))
    }

    /// 3x3 convolution with zero padding 1. Only strides 1 and 2 are
    /// supported; these are the only shapes the backbone uses.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Result<Tensor> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(ScobError::Dimension("conv2d: x must be [c,h,w], w must be [o,c,3,3]".into()));
        }
        if sw[2] != 3 || sw[3] != 3 {
            return Err(ScobError::Dimension("conv2d: only 3x3 kernels supported".into()));
        }
        if stride != 1 && stride != 2 {
            return Err(ScobError::Dimension(format!("conv2d: stride {stride} not in {{1,2}}")));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        if sw[1] != cin {
            return Err(ScobError::Dimension(format!(
                "conv2d: weight expects {} input channels, input has {cin}",
                sw[1]
            )));
        }
        let cout = sw[0];
        if sb != [cout] {
            return Err(ScobError::Dimension("conv2d: bias shape mismatch".into()));
        }
        if h % stride != 0 || wd % stride != 0 {
            return Err(ScobError::Dimension("conv2d: spatial size not divisible by stride".into()));
        }
        let (oh, ow) = (h / stride, wd / stride);
        let mut vals = vec![0.0; cout * oh * ow];
        kernels::conv3x3_fwd(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &self.nodes[b.0].values,
            &mut vals,
            cin,
            h,
            wd,
            cout,
            stride,
        );
        let ng = self.needs(&[x.0, w.0, b.0]);
        Ok(self.push(
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride },
            vec![cout, oh, ow],
            vals,
            ng,
        ))
    }

    /// Reinterpret a [c,h,w] feature volume as [h*w, c] tokens.
    pub fn chw_tokens(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(ScobError::Dimension("chw_tokens: expects [c,h,w]".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let t = h * w;
        let mut vals = vec![0.0; t * c];
        for ci in 0..c {
            let plane = &self.nodes[a.0].values[ci * t..(ci + 1) * t];
            for (ti, &v) in plane.iter().enumerate() {
                vals[ti * c + ci] = v;
            }
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(Op::ChwTokens(a.0), vec![t, c], vals, ng))
    }

    // ---- structure ----

    pub fn concat_vec(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(ScobError::Contract("concat_vec: empty input".into()));
        }
        let mut vals = Vec::new();
        for p in parts {
            if self.nodes[p.0].shape.len() != 1 {
                return Err(ScobError::Dimension("concat_vec: inputs must be rank 1".into()));
            }
            vals.extend_from_slice(&self.nodes[p.0].values);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        let n = vals.len();
        Ok(self.push(Op::ConcatVec(ids), vec![n], vals, ng))
    }

    /// Concatenate [t, d_i] matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(ScobError::Contract("concat_cols: empty input".into()));
        }
        let t = self.nodes[parts[0].0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != t {
                return Err(ScobError::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut vals = vec![0.0; t * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            for r in 0..t {
                let src = &self.nodes[p.0].values[r * w..(r + 1) * w];
                vals[r * total + off..r * total + off + w].copy_from_slice(src);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(Op::ConcatCols(ids), vec![t, total], vals, ng))
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || start + len > s[1] {
            return Err(ScobError::Dimension(format!(
                "slice_cols: [{start},{})+{len} out of {:?}",
                start, s
            )));
        }
        let (t, d) = (s[0], s[1]);
        let mut vals = vec![0.0; t * len];
        for r in 0..t {
            vals[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[a.0].values[r * d + start..r * d + start + len]);
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(Op::SliceCols { a: a.0, start, len }, vec![t, len], vals, ng))
    }

    pub fn slice_vec(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 1 || start + len > s[0] {
            return Err(ScobError::Dimension("slice_vec: out of bounds".into()));
        }
        let vals = self.nodes[a.0].values[start..start + len].to_vec();
        let ng = self.needs(&[a.0]);
        Ok(self.push(Op::SliceVec { a: a.0, start, len }, vec![len], vals, ng))
    }

    /// [t,d] + [d], row broadcast.
    pub fn add_row(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(ScobError::Dimension(format!("add_row: {:?} + {:?}", sa, sb)));
        }
        let (t, d) = (sa[0], sa[1]);
        let mut vals = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..d {
                vals[r * d + c] = self.nodes[a.0].values[r * d + c] + self.nodes[b.0].values[c];
            }
        }
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::AddRow(a.0, b.0), sa, vals, ng))
    }

    /// Row r of `a` scaled by `s[r]`.
    pub fn scale_rows(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let sa = self.nodes[a.0].shape.clone();
        let ss = self.nodes[s.0].shape.clone();
        if sa.len() != 2 || ss.len() != 1 || ss[0] != sa[0] {
            return Err(ScobError::Dimension(format!("scale_rows: {:?} x {:?}", sa, ss)));
        }
        let (t, d) = (sa[0], sa[1]);
        let mut vals = vec![0.0; t * d];
        for r in 0..t {
            let f = self.nodes[s.0].values[r];
            for c in 0..d {
                vals[r * d + c] = self.nodes[a.0].values[r * d + c] * f;
            }
        }
        let ng = self.needs(&[a.0, s.0]);
        Ok(self.push(Op::ScaleRows(a.0, s.0), sa, vals, ng))
    }

    /// Learnable 2-D positional table: token (i,j) maps to the
    /// concatenation of row embedding i and column embedding j.
    pub fn grid_pos_encode(&mut self, rows: Tensor, cols: Tensor, h: usize, w: usize) -> Result<Tensor> {
        let sr = self.nodes[rows.0].shape.clone();
        let sc = self.nodes[cols.0].shape.clone();
        if sr.len() != 2 || sc.len() != 2 || sr[0] != h || sc[0] != w || sr[1] != sc[1] {
            return Err(ScobError::Dimension(format!(
                "grid_pos_encode: rows {:?} cols {:?} for {h}x{w}",
                sr, sc
            )));
        }
        let half = sr[1];
        let d = 2 * half;
        let t = h * w;
        let mut vals = vec![0.0; t * d];
        for i in 0..h {
            let rrow = &self.nodes[rows.0].values[i * half..(i + 1) * half];
            for j in 0..w {
                let crow = &self.nodes[cols.0].values[j * half..(j + 1) * half];
                let base = (i * w + j) * d;
                vals[base..base + half].copy_from_slice(rrow);
                vals[base + half..base + d].copy_from_slice(crow);
            }
        }
        let ng = self.needs(&[rows.0, cols.0]);
        Ok(self.push(
            Op::GridPosEncode { rows: rows.0, cols: cols.0, h, w },
            vec![t, d],
            vals,
            ng,
        ))
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(ScobError::Dimension(format!(
                "reshape: {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let vals = self.nodes[a.0].values.clone();
        let ng = self.needs(&[a.0]);
        Ok(self.push(Op::Reshape(a.0), shape.to_vec(), vals, ng))
    }

    /// Generic dispatcher over configuration-free primitives, addressed by
    /// name. Configured primitives (conv2d stride, slices, clamp bounds)
    /// use their typed methods.
    pub fn apply_primitive(&mut self, name: &str, inputs: &[Tensor]) -> Result<Tensor> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(ScobError::Contract(format!(
                    "primitive {name}: expected {n} inputs, got {}",
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match name {
            "add" => { want(2)?; self.add(inputs[0], inputs[1]) }
            "sub" => { want(2)?; self.sub(inputs[0], inputs[1]) }
            "mul" => { want(2)?; self.mul(inputs[0], inputs[1]) }
            "div" => { want(2)?; self.div(inputs[0], inputs[1]) }
            "matmul" => { want(2)?; self.matmul(inputs[0], inputs[1], false) }
            "relu" => { want(1)?; Ok(self.relu(inputs[0])) }
            "sigmoid" => { want(1)?; Ok(self.sigmoid(inputs[0])) }
            "softmax" => { want(1)?; self.softmax(inputs[0]) }
            "log" => { want(1)?; Ok(self.log(inputs[0])) }
            "exp" => { want(1)?; Ok(self.exp(inputs[0])) }
            "sqrt" => { want(1)?; Ok(self.sqrt(inputs[0])) }
            "stop_gradient" => { want(1)?; Ok(self.stop_gradient(inputs[0])) }
            "mean" => { want(1)?; Ok(self.mean_all(inputs[0])) }
            "sum" => { want(1)?; Ok(self.sum_all(inputs[0])) }
            "dot" => { want(2)?; self.dot(inputs[0], inputs[1]) }
            "concat" => { want(2)?; self.concat_vec(inputs) }
            _ => Err(ScobError::Contract(format!("unknown primitive: {name}"))),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients land on requires-grad
    /// leaves and on nodes flagged with [`Tape::retain_grad`].
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(ScobError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.backward_done {
            return Err(ScobError::Contract(
                "backward: tape already consumed by a previous backward pass".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            let is_grad_leaf = matches!(node.op, Op::Leaf) && node.needs_grad;
            if is_grad_leaf || node.retain {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], tgt: usize, this: &Tape, f: &mut dyn FnMut(&mut [f64])| {
            if !this.nodes[tgt].needs_grad {
                return;
            }
            let buf = grads[tgt].get_or_insert_with(|| vec![0.0; this.nodes[tgt].values.len()]);
            f(buf);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
                acc(grads, *b, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
                acc(grads, *b, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv)
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(&self.nodes[b].values) {
                        *o += gv * bv;
                    }
                });
                acc(grads, b, self, &mut |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(&self.nodes[a].values) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(&self.nodes[b].values) {
                        *o += gv / bv;
                    }
                });
                acc(grads, b, self, &mut |buf| {
                    for (i, (o, gv)) in buf.iter_mut().zip(g).enumerate() {
                        let av = self.nodes[a].values[i];
                        let bv = self.nodes[b].values[i];
                        *o -= gv * av / (bv * bv);
                    }
                });
            }
            Op::AddScalar(a) => {
                acc(grads, *a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                acc(grads, *a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * c)
                });
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s].values[0];
                acc(grads, a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * sv)
                });
                acc(grads, s, self, &mut |buf| {
                    let mut acc_v = 0.0;
                    for (gv, av) in g.iter().zip(&self.nodes[a].values) {
                        acc_v += gv * av;
                    }
                    buf[0] += acc_v;
                });
            }
            Op::Matmul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = &self.nodes[a].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[id].shape[1];
                if trans_b {
                    // out = A * B^T, B is [n,k]
                    acc(grads, a, self, &mut |buf| {
                        kernels::mm_nn(g, &self.nodes[b].values, buf, m, n, k);
                    });
                    acc(grads, b, self, &mut |buf| {
                        kernels::mm_tn(g, &self.nodes[a].values, buf, m, n, k);
                    });
                } else {
                    acc(grads, a, self, &mut |buf| {
                        kernels::mm_nt(g, &self.nodes[b].values, buf, m, n, k);
                    });
                    acc(grads, b, self, &mut |buf| {
                        kernels::mm_tn(&self.nodes[a].values, g, buf, m, k, n);
                    });
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let sx = &self.nodes[x].shape;
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = self.nodes[w].shape[0];
                // The fused kernel accumulates all three gradients; run it
                // into scratch buffers, then add into whichever inputs track
                // gradients.
                let mut gx = vec![0.0; self.nodes[x].values.len()];
                let mut gw = vec![0.0; self.nodes[w].values.len()];
                let mut gb = vec![0.0; self.nodes[b].values.len()];
                kernels::conv3x3_bwd(
                    &self.nodes[x].values,
                    &self.nodes[w].values,
                    g,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                    cin,
                    h,
                    wd,
                    cout,
                    stride,
                );
                acc(grads, x, self, &mut |buf| {
                    buf.iter_mut().zip(&gx).for_each(|(o, v)| *o += v)
                });
                acc(grads, w, self, &mut |buf| {
                    buf.iter_mut().zip(&gw).for_each(|(o, v)| *o += v)
                });
                acc(grads, b, self, &mut |buf| {
                    buf.iter_mut().zip(&gb).for_each(|(o, v)| *o += v)
                });
            }
            Op::ChwTokens(a) => {
                let a = *a;
                let s = &self.nodes[a].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let t = h * w;
                acc(grads, a, self, &mut |buf| {
                    for ci in 0..c {
                        for ti in 0..t {
                            buf[ci * t + ti] += g[ti * c + ci];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(&self.nodes[a].values) {
                        if *av > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(_) => {
                let out = &self.nodes[id].values;
                let a = match self.nodes[id].op {
                    Op::Sigmoid(a) => a,
                    _ => unreachable!(),
                };
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), sv) in buf.iter_mut().zip(g).zip(out) {
                        *o += gv * sv * (1.0 - sv);
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let out = &self.nodes[id].values;
                let shape = &self.nodes[id].shape;
                let (rows, cols) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
                acc(grads, a, self, &mut |buf| {
                    for r in 0..rows {
                        let srow = &out[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dotv: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                        let brow = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, &s), &gv) in brow.iter_mut().zip(srow).zip(grow) {
                            *o += s * (gv - dotv);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let a = *a;
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(&self.nodes[a].values) {
                        *o += gv / av;
                    }
                });
            }
            Op::Exp(_) => {
                let out = &self.nodes[id].values;
                let a = match self.nodes[id].op {
                    Op::Exp(a) => a,
                    _ => unreachable!(),
                };
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), ev) in buf.iter_mut().zip(g).zip(out) {
                        *o += gv * ev;
                    }
                });
            }
            Op::Sqrt(_) => {
                let out = &self.nodes[id].values;
                let a = match self.nodes[id].op {
                    Op::Sqrt(a) => a,
                    _ => unreachable!(),
                };
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), sv) in buf.iter_mut().zip(g).zip(out) {
                        *o += gv * 0.5 / sv;
                    }
                });
            }
            Op::StopGrad(_) => {}
            Op::Clamp { a, lo, hi } => {
                let (a, lo, hi) = (*a, *lo, *hi);
                acc(grads, a, self, &mut |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(&self.nodes[a].values) {
                        if *av >= lo && *av <= hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let a = *a;
                let inv = 1.0 / self.nodes[a].values.len() as f64;
                acc(grads, a, self, &mut |buf| {
                    let gv = g[0] * inv;
                    buf.iter_mut().for_each(|o| *o += gv);
                });
            }
            Op::SumAll(a) => {
                acc(grads, *a, self, &mut |buf| {
                    let gv = g[0];
                    buf.iter_mut().for_each(|o| *o += gv);
                });
            }
            Op::MeanAxis0(a) => {
                let a = *a;
                let s = &self.nodes[a].shape;
                let (t, d) = (s[0], s[1]);
                let inv = 1.0 / t as f64;
                acc(grads, a, self, &mut |buf| {
                    for r in 0..t {
                        for c in 0..d {
                            buf[r * d + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let gv = g[0];
                acc(grads, a, self, &mut |buf| {
                    for (o, bv) in buf.iter_mut().zip(&self.nodes[b].values) {
                        *o += gv * bv;
                    }
                });
                acc(grads, b, self, &mut |buf| {
                    for (o, av) in buf.iter_mut().zip(&self.nodes[a].values) {
                        *o += gv * av;
                    }
                });
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].values.len();
                    let seg = &g[off..off + n];
                    acc(grads, p, self, &mut |buf| {
                        buf.iter_mut().zip(seg).for_each(|(o, gv)| *o += gv)
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let t = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    acc(grads, p, self, &mut |buf| {
                        for r in 0..t {
                            let seg = &g[r * total + off..r * total + off + w];
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(seg)
                                .for_each(|(o, gv)| *o += gv);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let d = self.nodes[a].shape[1];
                let t = self.nodes[a].shape[0];
                acc(grads, a, self, &mut |buf| {
                    for r in 0..t {
                        for c in 0..len {
                            buf[r * d + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::SliceVec { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                acc(grads, a, self, &mut |buf| {
                    for c in 0..len {
                        buf[start + c] += g[c];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                let d = self.nodes[b].values.len();
                let t = self.nodes[a].shape[0];
                acc(grads, a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
                acc(grads, b, self, &mut |buf| {
                    for r in 0..t {
                        for c in 0..d {
                            buf[c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let (a, s) = (*a, *s);
                let sa = &self.nodes[a].shape;
                let (t, d) = (sa[0], sa[1]);
                acc(grads, a, self, &mut |buf| {
                    for r in 0..t {
                        let f = self.nodes[s].values[r];
                        for c in 0..d {
                            buf[r * d + c] += g[r * d + c] * f;
                        }
                    }
                });
                acc(grads, s, self, &mut |buf| {
                    for r in 0..t {
                        let mut acc_v = 0.0;
                        for c in 0..d {
                            acc_v += g[r * d + c] * self.nodes[a].values[r * d + c];
                        }
                        buf[r] += acc_v;
                    }
                });
            }
            Op::GridPosEncode { rows, cols, h, w } => {
                let (rows, cols, h, w) = (*rows, *cols, *h, *w);
                let half = self.nodes[rows].shape[1];
                let d = 2 * half;
                acc(grads, rows, self, &mut |buf| {
                    for i in 0..h {
                        for j in 0..w {
                            let base = (i * w + j) * d;
                            for c in 0..half {
                                buf[i * half + c] += g[base + c];
                            }
                        }
                    }
                });
                acc(grads, cols, self, &mut |buf| {
                    for i in 0..h {
                        for j in 0..w {
                            let base = (i * w + j) * d;
                            for c in 0..half {
                                buf[j * half + c] += g[base + half + c];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(grads, *a, self, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
            }
        }
    }
}
