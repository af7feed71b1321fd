use std::sync::atomic::{AtomicU32, Ordering};

use super::linalg::{col2im, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Probabilities are clamped here before the log in cross-entropy.
const CE_PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Identifies a primitive, for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    LnEps,
    Softmax,
    LayerNorm,
    AddChannel,
    MulSpatial,
    L2NormalizeRows,
    IndexRows,
    ConcatRows,
    SliceCols,
    SmoothL1,
    CrossEntropy,
    Sum,
    Mean,
    Dot,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::LnEps,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::AddChannel,
        OpKind::MulSpatial,
        OpKind::L2NormalizeRows,
        OpKind::IndexRows,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::SmoothL1,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Dot,
    ];
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
        shape: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Relu {
        x: usize,
    },
    LnEps {
        x: usize,
        eps: f64,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    AddChannel {
        x: usize,
        v: usize,
    },
    MulSpatial {
        x: usize,
        map: usize,
    },
    L2NormalizeRows {
        x: usize,
    },
    IndexRows {
        x: usize,
        rows: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
    SmoothL1 {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::LnEps { .. } => OpKind::LnEps,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::AddChannel { .. } => OpKind::AddChannel,
            Op::MulSpatial { .. } => OpKind::MulSpatial,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::IndexRows { .. } => OpKind::IndexRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Dot { .. } => OpKind::Dot,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Dot { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::AddChannel { x, v } => vec![*x, *v],
            Op::MulSpatial { x, map } => vec![*x, *map],
            Op::ConcatRows { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Transpose { x }
            | Op::Reshape { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::LnEps { x, .. }
            | Op::Softmax { x }
            | Op::L2NormalizeRows { x }
            | Op::IndexRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SmoothL1 { x }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
enum Saved {
    None,
    Conv { geom: ConvGeom, cols: Vec<f64> },
    LayerNorm { xhat: Vec<f64>, inv_std: f64 },
    Norms(Vec<f64>),
    Probs(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    saved: Saved,
    requires_grad: bool,
    needs_grad: bool,
}

/// Define-by-run record of primitive applications.
///
/// Entries are appended in evaluation order, so every input of entry `k` is
/// an entry `< k`.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    sign_fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` is not a differentiable leaf of the originating tape.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            sign_fault: None,
        }
    }

    /// Negates every gradient contribution emitted by `kind` during
    /// [`Tape::backward`]. Exists so gradient checks can be shown to catch a
    /// broken backward rule.
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.sign_fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            requires_grad,
            needs_grad: requires_grad,
        })
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Recorded value of `var`. Panics if `var` came from another tape.
    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from a different tape");
        &self.nodes[var.index()].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(&mut self, node: Node) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(node);
        Var {
            tape: self.id,
            index,
        }
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index())
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.compute(&op)?;
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{:?}", op.kind())));
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node {
            value,
            op,
            saved,
            requires_grad: false,
            needs_grad,
        }))
    }

    /// Re-evaluates every recorded primitive from its recorded inputs and
    /// reports whether all outputs reproduce bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, _) = self.compute(&node.op)?;
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    // ---- primitives -------------------------------------------------------

    /// 2-D convolution of `[C_in,H,W]` by `[C_out,C_in,kH,kW]` with zero
    /// padding; output `[C_out,H',W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let input = self.idx(input)?;
        let kernel = self.idx(kernel)?;
        let bias = bias.map(|b| self.idx(b)).transpose()?;
        self.record(Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let numel: usize = shape.iter().product();
        if numel != self.val(xi).numel() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.val(xi).shape()),
            ));
        }
        self.record(Op::Reshape {
            x: xi,
            shape: shape.to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Sub { a, b })
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Relu { x })
    }

    /// Elementwise `ln(eps + x)`.
    pub fn ln_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::LnEps { x, eps })
    }

    /// Softmax over every element of `x` jointly (a spatial softmax when `x`
    /// is an `[H,W]` map).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Softmax { x })
    }

    /// Layer normalization of a `[C]` vector with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (x, gain, bias) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        self.record(Op::LayerNorm { x, gain, bias, eps })
    }

    /// `x[c,i,j] + v[c]` for `x: [C,H,W]`, `v: [C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (x, v) = (self.idx(x)?, self.idx(v)?);
        self.record(Op::AddChannel { x, v })
    }

    /// `x[c,i,j] · map[i,j]` for `x: [C,H,W]`, `map: [H,W]`.
    pub fn mul_spatial(&mut self, x: Var, map: Var) -> Result<Var> {
        let (x, map) = (self.idx(x)?, self.idx(map)?);
        self.record(Op::MulSpatial { x, map })
    }

    /// Scales each row of `[N,D]` (or a single `[D]` vector) to unit L2 norm.
    /// A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::L2NormalizeRows { x })
    }

    /// Gathers rows of `[N,D]`; repeated indices are allowed.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::IndexRows {
            x,
            rows: rows.to_vec(),
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let parts = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        self.record(Op::ConcatRows { parts })
    }

    /// Columns `start..end` of `[N,D]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::SliceCols { x, start, end })
    }

    /// Elementwise `0.5x²` for `|x| < 1`, `|x| − 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::SmoothL1 { x })
    }

    /// Summed softmax cross-entropy over the rows of `[N,K]` logits whose
    /// target is `Some`; `None` rows contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let logits = self.idx(logits)?;
        self.record(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.record(Op::Mean { x })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.record(Op::Dot { a, b })
    }

    // ---- forward rules ----------------------------------------------------

    fn compute(&self, op: &Op) -> Result<(Tensor, Saved)> {
        let plain = |t: Tensor| Ok((t, Saved::None));
        match *op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => self.conv_forward(input, kernel, bias, stride, padding),
            Op::MatMul { a, b } => {
                let (a, b) = (self.val(a), self.val(b));
                let (m, k) = dims2("matmul", a)?;
                let (k2, n) = dims2("matmul", b)?;
                if k != k2 {
                    return Err(shape_err(
                        "matmul",
                        format!("{:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
                plain(Tensor::from_parts(vec![m, n], out))
            }
            Op::Transpose { x } => {
                let x = self.val(x);
                let (m, n) = dims2("transpose", x)?;
                plain(Tensor::from_parts(vec![n, m], transpose(x.data(), m, n)))
            }
            Op::Reshape { x, ref shape } => plain(Tensor::from_parts(
                shape.clone(),
                self.val(x).data().to_vec(),
            )),
            Op::Add { a, b } => plain(self.zip("add", a, b, |p, q| p + q)?),
            Op::Sub { a, b } => plain(self.zip("sub", a, b, |p, q| p - q)?),
            Op::Mul { a, b } => plain(self.zip("mul", a, b, |p, q| p * q)?),
            Op::Scale { x, factor } => plain(self.map(x, |v| v * factor)),
            Op::Relu { x } => plain(self.map(x, |v| if v > 0.0 { v } else { 0.0 })),
            Op::LnEps { x, eps } => plain(self.map(x, |v| (eps + v).ln())),
            Op::Softmax { x } => {
                let x = self.val(x);
                plain(Tensor::from_parts(x.shape().to_vec(), softmax(x.data())))
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, g, b) = (self.val(x), self.val(gain), self.val(bias));
                if x.shape().len() != 1 || g.shape() != x.shape() || b.shape() != x.shape() {
                    return Err(shape_err(
                        "layer_norm",
                        format!("x {:?}, gain {:?}, bias {:?}", x.shape(), g.shape(), b.shape()),
                    ));
                }
                let n = x.numel() as f64;
                let mean = x.data().iter().sum::<f64>() / n;
                let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = x.data().iter().map(|v| (v - mean) * inv_std).collect();
                let out = xhat
                    .iter()
                    .zip(g.data().iter().zip(b.data()))
                    .map(|(xh, (g, b))| g * xh + b)
                    .collect();
                Ok((
                    Tensor::from_parts(x.shape().to_vec(), out),
                    Saved::LayerNorm { xhat, inv_std },
                ))
            }
            Op::AddChannel { x, v } => {
                let (x, v) = (self.val(x), self.val(v));
                let (c, hw) = channel_dims("add_channel", x)?;
                if v.shape() != [c] {
                    return Err(shape_err(
                        "add_channel",
                        format!("x {:?}, v {:?}", x.shape(), v.shape()),
                    ));
                }
                let mut out = x.data().to_vec();
                for (ch, row) in out.chunks_mut(hw).enumerate() {
                    let add = v.data()[ch];
                    row.iter_mut().for_each(|e| *e += add);
                }
                plain(Tensor::from_parts(x.shape().to_vec(), out))
            }
            Op::MulSpatial { x, map } => {
                let (x, m) = (self.val(x), self.val(map));
                let (_, hw) = channel_dims("mul_spatial", x)?;
                if m.shape() != &x.shape()[1..] {
                    return Err(shape_err(
                        "mul_spatial",
                        format!("x {:?}, map {:?}", x.shape(), m.shape()),
                    ));
                }
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(hw) {
                    row.iter_mut().zip(m.data()).for_each(|(e, s)| *e *= s);
                }
                plain(Tensor::from_parts(x.shape().to_vec(), out))
            }
            Op::L2NormalizeRows { x } => {
                let x = self.val(x);
                let d = *x.shape().last().unwrap_or(&1);
                if x.shape().len() > 2 {
                    return Err(shape_err("l2_normalize_rows", format!("{:?}", x.shape())));
                }
                let mut out = x.data().to_vec();
                let mut norms = Vec::with_capacity(x.numel() / d);
                for row in out.chunks_mut(d) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Err(Error::ZeroNorm("l2_normalize_rows"));
                    }
                    row.iter_mut().for_each(|v| *v /= norm);
                    norms.push(norm);
                }
                Ok((
                    Tensor::from_parts(x.shape().to_vec(), out),
                    Saved::Norms(norms),
                ))
            }
            Op::IndexRows { x, ref rows } => {
                let x = self.val(x);
                let (n, d) = dims2("index_rows", x)?;
                if rows.is_empty() {
                    return Err(shape_err("index_rows", "empty row selection"));
                }
                let mut out = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    if r >= n {
                        return Err(shape_err("index_rows", format!("row {r} of {n}")));
                    }
                    out.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
                }
                plain(Tensor::from_parts(vec![rows.len(), d], out))
            }
            Op::ConcatRows { ref parts } => {
                if parts.is_empty() {
                    return Err(shape_err("concat_rows", "no parts"));
                }
                let d = dims2("concat_rows", self.val(parts[0]))?.1;
                let mut out = Vec::new();
                let mut n = 0;
                for &p in parts {
                    let (pn, pd) = dims2("concat_rows", self.val(p))?;
                    if pd != d {
                        return Err(shape_err("concat_rows", format!("width {pd} vs {d}")));
                    }
                    n += pn;
                    out.extend_from_slice(self.val(p).data());
                }
                plain(Tensor::from_parts(vec![n, d], out))
            }
            Op::SliceCols { x, start, end } => {
                let x = self.val(x);
                let (n, d) = dims2("slice_cols", x)?;
                if start >= end || end > d {
                    return Err(shape_err("slice_cols", format!("{start}..{end} of {d}")));
                }
                let w = end - start;
                let mut out = Vec::with_capacity(n * w);
                for row in x.data().chunks(d) {
                    out.extend_from_slice(&row[start..end]);
                }
                plain(Tensor::from_parts(vec![n, w], out))
            }
            Op::SmoothL1 { x } => plain(self.map(x, |v| {
                if v.abs() < 1.0 {
                    0.5 * v * v
                } else {
                    v.abs() - 0.5
                }
            })),
            Op::CrossEntropy { logits, ref targets } => {
                let x = self.val(logits);
                let (n, k) = dims2("cross_entropy", x)?;
                if targets.len() != n {
                    return Err(shape_err(
                        "cross_entropy",
                        format!("{} targets for {n} rows", targets.len()),
                    ));
                }
                let mut probs = Vec::with_capacity(n * k);
                let mut total = 0.0;
                for (row, t) in x.data().chunks(k).zip(targets) {
                    let p = softmax(row);
                    if let Some(t) = *t {
                        if t >= k {
                            return Err(shape_err("cross_entropy", format!("target {t} of {k}")));
                        }
                        total += -p[t].max(CE_PROB_FLOOR).ln();
                    }
                    probs.extend(p);
                }
                Ok((Tensor::scalar(total), Saved::Probs(probs)))
            }
            Op::Sum { x } => plain(Tensor::scalar(self.val(x).data().iter().sum())),
            Op::Mean { x } => {
                let x = self.val(x);
                plain(Tensor::scalar(
                    x.data().iter().sum::<f64>() / x.numel() as f64,
                ))
            }
            Op::Dot { a, b } => {
                let (a, b) = (self.val(a), self.val(b));
                if a.shape() != b.shape() {
                    return Err(shape_err("dot", format!("{:?} . {:?}", a.shape(), b.shape())));
                }
                plain(Tensor::scalar(
                    a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum(),
                ))
            }
        }
    }

    fn conv_forward(
        &self,
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    ) -> Result<(Tensor, Saved)> {
        let (x, k) = (self.val(input), self.val(kernel));
        let [c_in, h, w] = *x.shape() else {
            return Err(shape_err("conv2d", format!("input {:?}", x.shape())));
        };
        let [c_out, kc, kh, kw] = *k.shape() else {
            return Err(shape_err("conv2d", format!("kernel {:?}", k.shape())));
        };
        if kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} on {h}x{w} pad {padding}"),
            ));
        }
        if let Some(b) = bias {
            if self.val(b).shape() != [c_out] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {c_out} outputs", self.val(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = im2col(x.data(), &geom);
        let hw = geom.cols();
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(hw).zip(self.val(b).data()) {
                row.fill(bv);
            }
        }
        gemm(c_out, geom.rows(), hw, k.data(), false, &cols, false, 1.0, &mut out);
        Ok((
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out),
            Saved::Conv { geom, cols },
        ))
    }

    fn zip(&self, op: &'static str, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.val(a), self.val(b));
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    fn map(&self, x: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.val(x);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates `d loss / d leaf` for every `requires_grad` leaf. Leaves
    /// the loss does not reach receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.val(root).numel() != 1 {
            return Err(Error::NotScalar(self.val(root).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let sign = if self.sign_fault == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            let mut acc = |target: usize, mut contrib: Vec<f64>| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                if sign != 1.0 {
                    contrib.iter_mut().for_each(|v| *v *= sign);
                }
                match &mut grads[target] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            self.backward_node(node, &g, &mut acc);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                n.requires_grad.then(|| {
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; n.value.numel()]);
                    Tensor::from_parts(n.value.shape().to_vec(), data)
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], acc: &mut impl FnMut(usize, Vec<f64>)) {
        let needs = |i: usize| self.nodes[i].needs_grad;
        match (&node.op, &node.saved) {
            (
                &Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    ..
                },
                Saved::Conv { geom, cols },
            ) => {
                let k = self.val(kernel);
                let c_out = k.shape()[0];
                let hw = geom.cols();
                let rows = geom.rows();
                if needs(kernel) {
                    let mut dk = vec![0.0; c_out * rows];
                    gemm(c_out, hw, rows, g, false, cols, true, 0.0, &mut dk);
                    acc(kernel, dk);
                }
                if let Some(b) = bias {
                    if needs(b) {
                        acc(b, g.chunks(hw).map(|r| r.iter().sum()).collect());
                    }
                }
                if needs(input) {
                    let mut dcols = vec![0.0; rows * hw];
                    gemm(rows, c_out, hw, k.data(), true, g, false, 0.0, &mut dcols);
                    acc(input, col2im(&dcols, geom));
                }
            }
            (&Op::MatMul { a, b }, _) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, 0.0, &mut da);
                    acc(a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, 0.0, &mut db);
                    acc(b, db);
                }
            }
            (&Op::Transpose { x }, _) => {
                let s = self.val(x).shape();
                acc(x, transpose(g, s[1], s[0]));
            }
            (&Op::Reshape { x, .. }, _) => acc(x, g.to_vec()),
            (&Op::Add { a, b }, _) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            (&Op::Sub { a, b }, _) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            (&Op::Mul { a, b }, _) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                acc(a, g.iter().zip(bv).map(|(g, q)| g * q).collect());
                acc(b, g.iter().zip(av).map(|(g, p)| g * p).collect());
            }
            (&Op::Scale { x, factor }, _) => acc(x, g.iter().map(|v| v * factor).collect()),
            (&Op::Relu { x }, _) => {
                let xv = self.val(x).data();
                acc(
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            (&Op::LnEps { x, eps }, _) => {
                let xv = self.val(x).data();
                acc(x, g.iter().zip(xv).map(|(g, v)| g / (eps + v)).collect());
            }
            (&Op::Softmax { x }, _) => {
                let s = node.value.data();
                let dot: f64 = g.iter().zip(s).map(|(g, s)| g * s).sum();
                acc(x, g.iter().zip(s).map(|(g, s)| s * (g - dot)).collect());
            }
            (&Op::LayerNorm { x, gain, bias, .. }, Saved::LayerNorm { xhat, inv_std }) => {
                let gv = self.val(gain).data();
                acc(bias, g.to_vec());
                acc(gain, g.iter().zip(xhat).map(|(g, xh)| g * xh).collect());
                if needs(x) {
                    let n = xhat.len() as f64;
                    let dxhat: Vec<f64> = g.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dxhat.iter().zip(xhat).map(|(d, xh)| d * xh).sum::<f64>() / n;
                    acc(
                        x,
                        dxhat
                            .iter()
                            .zip(xhat)
                            .map(|(d, xh)| inv_std * (d - mean_d - xh * mean_dx))
                            .collect(),
                    );
                }
            }
            (&Op::AddChannel { x, v }, _) => {
                let hw: usize = self.val(x).shape()[1..].iter().product();
                acc(x, g.to_vec());
                acc(v, g.chunks(hw).map(|r| r.iter().sum()).collect());
            }
            (&Op::MulSpatial { x, map }, _) => {
                let (xv, mv) = (self.val(x).data(), self.val(map).data());
                let hw = mv.len();
                if needs(x) {
                    let mut dx = g.to_vec();
                    for row in dx.chunks_mut(hw) {
                        row.iter_mut().zip(mv).for_each(|(d, s)| *d *= s);
                    }
                    acc(x, dx);
                }
                if needs(map) {
                    let mut dm = vec![0.0; hw];
                    for (gr, xr) in g.chunks(hw).zip(xv.chunks(hw)) {
                        for ((d, g), x) in dm.iter_mut().zip(gr).zip(xr) {
                            *d += g * x;
                        }
                    }
                    acc(map, dm);
                }
            }
            (&Op::L2NormalizeRows { x }, Saved::Norms(norms)) => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                let mut dx = Vec::with_capacity(y.len());
                for ((gr, yr), norm) in g.chunks(d).zip(y.chunks(d)).zip(norms) {
                    let proj: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * proj) / norm));
                }
                acc(x, dx);
            }
            (&Op::IndexRows { x, ref rows }, _) => {
                let d = self.val(x).shape()[1];
                let mut dx = vec![0.0; self.val(x).numel()];
                for (gr, &r) in g.chunks(d).zip(rows) {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(e, g)| *e += g);
                }
                acc(x, dx);
            }
            (Op::ConcatRows { parts }, _) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            (&Op::SliceCols { x, start, end }, _) => {
                let d = self.val(x).shape()[1];
                let w = end - start;
                let mut dx = vec![0.0; self.val(x).numel()];
                for (dr, gr) in dx.chunks_mut(d).zip(g.chunks(w)) {
                    dr[start..end].copy_from_slice(gr);
                }
                acc(x, dx);
            }
            (&Op::SmoothL1 { x }, _) => {
                let xv = self.val(x).data();
                acc(
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v.abs() < 1.0 { g * v } else { g * v.signum() })
                        .collect(),
                );
            }
            (Op::CrossEntropy { logits, targets }, Saved::Probs(probs)) => {
                let k = self.val(*logits).shape()[1];
                let mut dx = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let p = &probs[r * k..(r + 1) * k];
                    if p[t] < CE_PROB_FLOOR {
                        continue;
                    }
                    let row = &mut dx[r * k..(r + 1) * k];
                    for (j, d) in row.iter_mut().enumerate() {
                        *d = g[0] * (p[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                acc(*logits, dx);
            }
            (&Op::Sum { x }, _) => acc(x, vec![g[0]; self.val(x).numel()]),
            (&Op::Mean { x }, _) => {
                let n = self.val(x).numel();
                acc(x, vec![g[0] / n as f64; n]);
            }
            (&Op::Dot { a, b }, _) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                acc(a, bv.iter().map(|q| g[0] * q).collect());
                acc(b, av.iter().map(|p| g[0] * p).collect());
            }
            (op, _) => unreachable!("no backward rule for {:?}", op.kind()),
        }
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape()))),
    }
}

fn channel_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h * w)),
        _ => Err(shape_err(op, format!("expected [C,H,W], got {:?}", t.shape()))),
    }
}

fn transpose(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// Max-subtracted softmax of a flat slice.
pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
