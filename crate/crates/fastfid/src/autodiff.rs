//! Dense tensor math with reverse-mode differentiation.
//!
//! A `Graph` records primitive operations as they execute (dynamic tape);
//! `backward` replays the record in reverse to accumulate gradients into
//! every tracked leaf. All values are 64-bit floats and every operation
//! checks its output for NaN/Inf, so a diverging computation aborts with a
//! diagnostic instead of silently poisoning downstream results.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Index of a node inside one `Graph`. Ids from different graphs must not
/// be mixed; the graph that produced an id is the only one that can use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A dense n-dimensional array in row-major order, with an optional
/// same-shape gradient buffer when the value is tracked.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBiasRow { x: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId },
    Softmax { x: TensorId, axis: usize },
    LogSoftmax { x: TensorId, axis: usize },
    MaskedSoftmaxRows { x: TensorId, mask: Arc<Vec<bool>> },
    MaskedLogSoftmaxRows { x: TensorId, mask: Arc<Vec<bool>> },
    GatherRows { x: TensorId, idx: Arc<Vec<usize>> },
    GatherElems { x: TensorId, idx: Arc<Vec<usize>> },
    SliceCols { x: TensorId, start: usize, len: usize },
    ConcatRows { xs: Vec<TensorId> },
    ConcatCols { xs: Vec<TensorId> },
    Reshape { x: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    LogSumExp { x: TensorId },
    ReduceMax { x: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Value written by masked log-softmax at ineligible positions. Large and
/// negative but finite, so the tensor invariant (no NaN/Inf stored) holds.
pub const LOG_ZERO: f64 = -1.0e30;

/// Dynamic compute graph: records ops forward, replays them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
    }
    Ok(())
}

/// (outer, axis_len, inner) decomposition for iterating one axis of a
/// row-major array.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Untracked constant input.
    pub fn input(&mut self, data: &[f64], shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// Tracked leaf: receives a gradient buffer during backward.
    pub fn param(&mut self, data: &[f64], shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, true)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(&[v], &[1], false)
    }

    fn leaf(&mut self, data: &[f64], shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "leaf".into(),
                detail: format!("shape {:?} does not describe {} values", shape, data.len()),
            });
        }
        check_finite(data, "leaf")?;
        Ok(self.push(data.to_vec(), shape.to_vec(), Op::Leaf, requires_grad))
    }

    // ── Forward operations ───────────────────────────────────────────

    /// Matrix product. Rank-2 inputs multiply directly; rank-3 inputs are
    /// treated as batches of matrices with broadcasting on the batch dim.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul".into(),
            detail: format!("lhs {:?} incompatible with rhs {:?}", sa, sb),
        };
        let (out_shape, batches, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (vec![sa[0], sb[1]], 1, sa[0], sa[1], sb[1])
            }
            (3, 3) => {
                if sa[2] != sb[1] || (sa[0] != sb[0] && sa[0] != 1 && sb[0] != 1) {
                    return Err(mismatch());
                }
                let bt = sa[0].max(sb[0]);
                (vec![bt, sa[1], sb[2]], bt, sa[1], sa[2], sb[2])
            }
            _ => return Err(mismatch()),
        };
        let (ad, bd) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let (a_b, b_b) = if sa.len() == 3 { (sa[0], sb[0]) } else { (1, 1) };
        let mut out = vec![0.0; batches * m * n];
        for t in 0..batches {
            let am = &ad.data[(t % a_b.max(1)).min(a_b - 1) * m * k..][..m * k];
            let bm = &bd.data[(t % b_b.max(1)).min(b_b - 1) * k * n..][..k * n];
            matmul_into(am, bm, m, k, n, &mut out[t * m * n..][..m * n]);
        }
        check_finite(&out, "matmul")?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, out_shape, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose".into(),
                detail: format!("expected rank-2 tensor, got {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, vec![c, r], Op::Transpose { x }, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "add".into(),
                detail: format!("lhs {:?} vs rhs {:?}", sa, sb),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b.0].tensor.data)
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, sa, Op::Add { a, b }, rg))
    }

    /// `x[r,c] + bias[c]`, bias broadcast over rows.
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_bias_row".into(),
                detail: format!("x {:?} vs bias {:?}", sx, sb),
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let bd = self.nodes[bias.0].tensor.data.clone();
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        check_finite(&out, "add_bias_row")?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(out, sx, Op::AddBiasRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "mul".into(),
                detail: format!("lhs {:?} vs rhs {:?}", sa, sb),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b.0].tensor.data)
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, sa, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[x.0].tensor.data.iter().map(|v| v * c).collect();
        check_finite(&out, "scale")?;
        let s = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::Scale { x, c }, rg))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[x.0].tensor.data.iter().map(|v| v.max(0.0)).collect();
        let s = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::Relu { x }, rg))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[x.0].tensor.data.iter().map(|&v| gelu_fwd(v)).collect();
        check_finite(&out, "gelu")?;
        let s = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::Gelu { x }, rg))
    }

    /// Normalize the last axis to zero mean / unit variance, then scale by
    /// `gain`. No shift term.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Shape {
            op: "layer_norm".into(),
            detail: "rank-0 input".into(),
        })?;
        let sg = self.shape(gain).to_vec();
        if sg != vec![d] {
            return Err(Error::Shape {
                op: "layer_norm".into(),
                detail: format!("gain {:?} vs last axis {}", sg, d),
            });
        }
        let gd = self.nodes[gain.0].tensor.data.clone();
        let xd = &self.nodes[x.0].tensor.data;
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gd[j];
            }
        }
        check_finite(&out, "layer_norm")?;
        let rg = self.requires(x) || self.requires(gain);
        Ok(self.push(out, sx, Op::LayerNorm { x, gain }, rg))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape {
                op: "softmax".into(),
                detail: format!("axis {} out of range for shape {:?}", axis, s),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (xd[at(a)] - max).exp();
                    out[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[at(a)] /= sum;
                }
            }
        }
        check_finite(&out, "softmax")?;
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape {
                op: "log_softmax".into(),
                detail: format!("axis {} out of range for shape {:?}", axis, s),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..len)
                        .map(|a| (xd[at(a)] - max).exp())
                        .sum::<f64>()
                        .ln();
                for a in 0..len {
                    out[at(a)] = xd[at(a)] - lse;
                }
            }
        }
        check_finite(&out, "log_softmax")?;
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::LogSoftmax { x, axis }, rg))
    }

    /// Per-row softmax over the positions where `mask` is true; masked
    /// positions get exactly zero. Errors if any row is fully masked.
    pub fn masked_softmax_rows(&mut self, x: TensorId, mask: Arc<Vec<bool>>) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        self.masked_rows_pre(&s, &mask, "masked_softmax_rows")?;
        let (r, c) = (s[0], s[1]);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if m[j] {
                    out[i * c + j] /= sum;
                }
            }
        }
        check_finite(&out, "masked_softmax_rows")?;
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::MaskedSoftmaxRows { x, mask }, rg))
    }

    /// Per-row log-softmax over unmasked positions; masked positions get the
    /// finite sentinel `LOG_ZERO` and carry no gradient.
    pub fn masked_log_softmax_rows(
        &mut self,
        x: TensorId,
        mask: Arc<Vec<bool>>,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        self.masked_rows_pre(&s, &mask, "masked_log_softmax_rows")?;
        let (r, c) = (s[0], s[1]);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = vec![LOG_ZERO; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                if m[j] {
                    out[i * c + j] = row[j] - lse;
                }
            }
        }
        check_finite(&out, "masked_log_softmax_rows")?;
        let rg = self.requires(x);
        Ok(self.push(out, s, Op::MaskedLogSoftmaxRows { x, mask }, rg))
    }

    fn masked_rows_pre(&self, s: &[usize], mask: &[bool], op: &str) -> Result<()> {
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(Error::Shape {
                op: op.into(),
                detail: format!("shape {:?} vs mask length {}", s, mask.len()),
            });
        }
        for i in 0..s[0] {
            if !mask[i * s[1]..(i + 1) * s[1]].iter().any(|&k| k) {
                return Err(Error::EmptyMask { op: op.into(), row: i });
            }
        }
        Ok(())
    }

    /// Select rows of `x` by index (embedding lookup / memory gather).
    pub fn gather_rows(&mut self, x: TensorId, idx: Arc<Vec<usize>>) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows".into(),
                detail: format!("expected rank-2 tensor, got {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                op: "gather_rows".into(),
                index: bad,
                len: r,
            });
        }
        if idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows".into(),
                detail: "empty index list".into(),
            });
        }
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.requires(x);
        let shape = vec![idx.len(), c];
        Ok(self.push(out, shape, Op::GatherRows { x, idx }, rg))
    }

    /// Select scalar elements of `x` by flat index; returns a vector.
    pub fn gather_elems(&mut self, x: TensorId, idx: Arc<Vec<usize>>) -> Result<TensorId> {
        let numel = self.nodes[x.0].tensor.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= numel) {
            return Err(Error::Index {
                op: "gather_elems".into(),
                index: bad,
                len: numel,
            });
        }
        if idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_elems".into(),
                detail: "empty index list".into(),
            });
        }
        let xd = &self.nodes[x.0].tensor.data;
        let out: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let rg = self.requires(x);
        let shape = vec![idx.len()];
        Ok(self.push(out, shape, Op::GatherElems { x, idx }, rg))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols".into(),
                detail: format!("cols {}..{} of shape {:?}", start, start + len, s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xd = &self.nodes[x.0].tensor.data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let rg = self.requires(x);
        Ok(self.push(out, vec![r, len], Op::SliceCols { x, start, len }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Shape {
                op: "concat_rows".into(),
                detail: "no inputs".into(),
            });
        }
        let c = self.shape(xs[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[1] != c {
                return Err(Error::Shape {
                    op: "concat_rows".into(),
                    detail: format!("inconsistent input {:?}, expected [_, {}]", s, c),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &x in xs {
            out.extend_from_slice(&self.nodes[x.0].tensor.data);
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(out, vec![rows, c], Op::ConcatRows { xs: xs.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Shape {
                op: "concat_cols".into(),
                detail: "no inputs".into(),
            });
        }
        let r = self.shape(xs[0]).first().copied().unwrap_or(0);
        let mut cols = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != r {
                return Err(Error::Shape {
                    op: "concat_cols".into(),
                    detail: format!("inconsistent input {:?}, expected [{}, _]", s, r),
                });
            }
            cols += s[1];
        }
        let mut out = vec![0.0; r * cols];
        let mut off = 0;
        for &x in xs {
            let c = self.shape(x)[1];
            let xd = &self.nodes[x.0].tensor.data;
            for i in 0..r {
                out[i * cols + off..i * cols + off + c].copy_from_slice(&xd[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(out, vec![r, cols], Op::ConcatCols { xs: xs.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].tensor.numel() {
            return Err(Error::Shape {
                op: "reshape".into(),
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let data = self.nodes[x.0].tensor.data.clone();
        let rg = self.requires(x);
        Ok(self.push(data, shape.to_vec(), Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let v: f64 = self.nodes[x.0].tensor.data.iter().sum();
        check_finite(&[v], "sum")?;
        let rg = self.requires(x);
        Ok(self.push(vec![v], vec![1], Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].tensor.numel() as f64;
        let v: f64 = self.nodes[x.0].tensor.data.iter().sum::<f64>() / n;
        check_finite(&[v], "mean")?;
        let rg = self.requires(x);
        Ok(self.push(vec![v], vec![1], Op::Mean { x }, rg))
    }

    /// log Σ exp over the whole tensor, computed max-shifted.
    pub fn logsumexp(&mut self, x: TensorId) -> Result<TensorId> {
        let xd = &self.nodes[x.0].tensor.data;
        let max = xd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = max + xd.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        check_finite(&[v], "logsumexp")?;
        let rg = self.requires(x);
        Ok(self.push(vec![v], vec![1], Op::LogSumExp { x }, rg))
    }

    /// Maximum over the whole tensor. The gradient flows to the first
    /// position attaining the max.
    pub fn reduce_max(&mut self, x: TensorId) -> Result<TensorId> {
        let xd = &self.nodes[x.0].tensor.data;
        let v = xd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        check_finite(&[v], "reduce_max")?;
        let rg = self.requires(x);
        Ok(self.push(vec![v], vec![1], Op::ReduceMax { x }, rg))
    }

    // ── Composite builders ───────────────────────────────────────────

    /// `x @ w + b` with `b` broadcast over rows; `b` may be omitted.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias_row(y, b),
            None => Ok(y),
        }
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embed(&mut self, ids: &[usize], table: TensorId) -> Result<TensorId> {
        self.gather_rows(table, Arc::new(ids.to_vec()))
    }

    /// Mean negative log-likelihood of `targets` under `logits` ([t, vocab]).
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy".into(),
                detail: format!("logits {:?} vs {} targets", s, targets.len()),
            });
        }
        let vocab = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "cross_entropy".into(),
                index: bad,
                len: vocab,
            });
        }
        let lp = self.log_softmax(logits, 1)?;
        let picks: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * vocab + t).collect();
        let picked = self.gather_elems(lp, Arc::new(picks))?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut impl rand::Rng) -> Result<TensorId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].tensor.numel();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let s = self.shape(x).to_vec();
        let m = self.input(&mask, &s)?;
        self.mul(x, m)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate d`loss`/d`leaf` into every tracked leaf's grad buffer.
    /// `loss` must be scalar. A second call without a fresh graph is an
    /// error: the tape has already been consumed.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; build a new graph for another pass".into(),
            ));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Shape {
                op: "backward".into(),
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return Err(Error::State(
                "loss does not depend on any tracked leaf".into(),
            ));
        }
        self.backward_done = true;
        // Grad buffers only where gradients can flow.
        for node in self.nodes.iter_mut() {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
            }
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let grad = match self.nodes[i].tensor.grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &grad, &op)?;
        }
        // A NaN that slipped through cancellation shows up in leaf grads.
        for node in &self.nodes {
            if let (Op::Leaf, Some(g)) = (&node.op, node.tensor.grad.as_ref()) {
                check_finite(g, "backward")?;
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, src: &[f64]) {
        if !self.nodes[id.0].tensor.requires_grad {
            return;
        }
        if let Some(g) = self.nodes[id.0].tensor.grad.as_mut() {
            for (a, b) in g.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    fn propagate(&mut self, out: usize, grad: &[f64], op: &Op) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let rank3 = sa.len() == 3;
                let (a_b, b_b) = if rank3 { (sa[0], sb[0]) } else { (1, 1) };
                let (m, k) = if rank3 { (sa[1], sa[2]) } else { (sa[0], sa[1]) };
                let n = *sb.last().unwrap();
                let batches = a_b.max(b_b);
                let mut da = vec![0.0; self.nodes[a.0].tensor.data.len()];
                let mut db = vec![0.0; self.nodes[b.0].tensor.data.len()];
                for t in 0..batches {
                    let g = &grad[t * m * n..][..m * n];
                    let am = &self.nodes[a.0].tensor.data[t.min(a_b - 1) * m * k..][..m * k];
                    let bm = &self.nodes[b.0].tensor.data[t.min(b_b - 1) * k * n..][..k * n];
                    // dA += g @ B^T ; dB += A^T @ g
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bm[p * n + j];
                        }
                    }
                    matmul_into(g, &bt, m, n, k, &mut da[t.min(a_b - 1) * m * k..][..m * k]);
                    let mut at = vec![0.0; m * k];
                    for ii in 0..m {
                        for p in 0..k {
                            at[p * m + ii] = am[ii * k + p];
                        }
                    }
                    matmul_into(&at, g, k, m, n, &mut db[t.min(b_b - 1) * k * n..][..k * n]);
                }
                self.accum(*a, &da);
                self.accum(*b, &db);
            }
            Op::Transpose { x } => {
                let s = self.shape(TensorId(out)).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = grad[i * c + j];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accum(*a, grad);
                self.accum(*b, grad);
            }
            Op::AddBiasRow { x, bias } => {
                self.accum(*x, grad);
                let c = self.shape(*bias)[0];
                let mut db = vec![0.0; c];
                for (i, g) in grad.iter().enumerate() {
                    db[i % c] += g;
                }
                self.accum(*bias, &db);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[b.0].tensor.data)
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].tensor.data)
                    .map(|(g, v)| g * v)
                    .collect();
                self.accum(*a, &da);
                self.accum(*b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accum(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[x.0].tensor.data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[x.0].tensor.data)
                    .map(|(g, &v)| g * gelu_bwd(v))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::LayerNorm { x, gain } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = self.nodes[x.0].tensor.data.clone();
                let gd = self.nodes[gain.0].tensor.data.clone();
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let g = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = g.iter().zip(&gd).map(|(gi, gm)| gi * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dg[j] += g[j] * xhat[j];
                        dx[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accum(*x, &dx);
                self.accum(*gain, &dg);
            }
            Op::Softmax { x, axis } => {
                let s = self.shape(TensorId(out)).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let yd = self.nodes[out].tensor.data.clone();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let dot: f64 = (0..len).map(|a| grad[at(a)] * yd[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = yd[at(a)] * (grad[at(a)] - dot);
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let s = self.shape(TensorId(out)).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let yd = self.nodes[out].tensor.data.clone();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let gsum: f64 = (0..len).map(|a| grad[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = grad[at(a)] - yd[at(a)].exp() * gsum;
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let s = self.shape(TensorId(out)).to_vec();
                let (r, c) = (s[0], s[1]);
                let yd = self.nodes[out].tensor.data.clone();
                let mut dx = vec![0.0; yd.len()];
                for i in 0..r {
                    let dot: f64 = (0..c)
                        .filter(|&j| mask[i * c + j])
                        .map(|j| grad[i * c + j] * yd[i * c + j])
                        .sum();
                    for j in 0..c {
                        if mask[i * c + j] {
                            dx[i * c + j] = yd[i * c + j] * (grad[i * c + j] - dot);
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::MaskedLogSoftmaxRows { x, mask } => {
                let s = self.shape(TensorId(out)).to_vec();
                let (r, c) = (s[0], s[1]);
                let yd = self.nodes[out].tensor.data.clone();
                let mut dx = vec![0.0; yd.len()];
                for i in 0..r {
                    let gsum: f64 = (0..c)
                        .filter(|&j| mask[i * c + j])
                        .map(|j| grad[i * c + j])
                        .sum();
                    for j in 0..c {
                        if mask[i * c + j] {
                            dx[i * c + j] = grad[i * c + j] - yd[i * c + j].exp() * gsum;
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.nodes[x.0].tensor.data.len()];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += grad[row * c + j];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::GatherElems { x, idx } => {
                let mut dx = vec![0.0; self.nodes[x.0].tensor.data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += grad[k];
                }
                self.accum(*x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let c = self.shape(*x)[1];
                let r = self.shape(*x)[0];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        dx[i * c + start + j] = grad[i * len + j];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].tensor.data.len();
                    let piece = grad[off..off + n].to_vec();
                    self.accum(x, &piece);
                    off += n;
                }
            }
            Op::ConcatCols { xs } => {
                let r = self.shape(TensorId(out))[0];
                let cols = self.shape(TensorId(out))[1];
                let mut off = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c..(i + 1) * c]
                            .copy_from_slice(&grad[i * cols + off..i * cols + off + c]);
                    }
                    self.accum(x, &dx);
                    off += c;
                }
            }
            Op::Reshape { x } => {
                self.accum(*x, grad);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].tensor.data.len();
                let dx = vec![grad[0]; n];
                self.accum(*x, &dx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].tensor.data.len();
                let dx = vec![grad[0] / n as f64; n];
                self.accum(*x, &dx);
            }
            Op::LogSumExp { x } => {
                let y = self.nodes[out].tensor.data[0];
                let dx: Vec<f64> = self.nodes[x.0]
                    .tensor
                    .data
                    .iter()
                    .map(|&v| grad[0] * (v - y).exp())
                    .collect();
                self.accum(*x, &dx);
            }
            Op::ReduceMax { x } => {
                let y = self.nodes[out].tensor.data[0];
                let pos = self.nodes[x.0]
                    .tensor
                    .data
                    .iter()
                    .position(|&v| v == y)
                    .unwrap_or(0);
                let mut dx = vec![0.0; self.nodes[x.0].tensor.data.len()];
                dx[pos] = grad[0];
                self.accum(*x, &dx);
            }
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-9;

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c += a @ b` over flat row-major buffers. ikj loop order keeps the inner
/// loop contiguous so the compiler can vectorize it.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}
