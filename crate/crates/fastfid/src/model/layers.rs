//! Transformer building blocks as graph builders. Pre-norm residual
//! layout; attention projections carry no bias (padding rows of a memory
//! therefore project to exact zeros and stay inert under masking).

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::TensorId;
use crate::error::Result;
use crate::model::Bound;

pub struct AttnParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

impl AttnParams {
    pub fn bind(b: &mut Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: b.p(&format!("{prefix}.wq"))?,
            wk: b.p(&format!("{prefix}.wk"))?,
            wv: b.p(&format!("{prefix}.wv"))?,
            wo: b.p(&format!("{prefix}.wo"))?,
        })
    }
}

/// Multi-head attention over an explicit boolean mask of shape
/// [queries × keys] (true = attend). Returns the output and, when
/// `capture` is set, the per-head attention rows.
///
/// Scores depend only on query/key content, never on a key's index in the
/// memory, so gathering a subset of memory rows cannot change them.
pub fn attention(
    b: &mut Bound,
    q_in: TensorId,
    kv_in: TensorId,
    mask: Arc<Vec<bool>>,
    p: &AttnParams,
    n_heads: usize,
    capture: Option<&mut Vec<TensorId>>,
) -> Result<TensorId> {
    let g = &mut b.graph;
    let d = g.shape(q_in)[1];
    let dh = d / n_heads;
    let q = g.matmul(q_in, p.wq)?;
    let k = g.matmul(kv_in, p.wk)?;
    let v = g.matmul(kv_in, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut captured = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scaled = g.scale(raw, scale)?;
        let attn = g.masked_softmax_rows(scaled, mask.clone())?;
        captured.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    let out = g.matmul(ctx, p.wo)?;
    if let Some(sink) = capture {
        *sink = captured;
    }
    Ok(out)
}

/// Position-wise feed-forward: relu(x @ w1) @ w2.
pub fn ffn(b: &mut Bound, x: TensorId, prefix: &str) -> Result<TensorId> {
    let w1 = b.p(&format!("{prefix}.w1"))?;
    let w2 = b.p(&format!("{prefix}.w2"))?;
    let h = b.graph.matmul(x, w1)?;
    let h = b.graph.relu(h)?;
    b.graph.matmul(h, w2)
}

pub fn layer_norm(b: &mut Bound, x: TensorId, gain_name: &str) -> Result<TensorId> {
    let gain = b.p(gain_name)?;
    b.graph.layer_norm(x, gain)
}

/// Residual add with optional dropout on the sublayer output.
pub fn residual(
    b: &mut Bound,
    x: TensorId,
    sub: TensorId,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    let sub = match rng {
        Some(rng) if dropout > 0.0 => b.graph.dropout(sub, dropout, rng)?,
        _ => sub,
    };
    b.graph.add(x, sub)
}

/// Mask where every query may attend every key.
pub fn full_mask(rows: usize, cols: usize) -> Arc<Vec<bool>> {
    Arc::new(vec![true; rows * cols])
}

/// Causal mask: query t attends keys 0..=t.
pub fn causal_mask(t: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = true;
        }
    }
    Arc::new(m)
}

/// Replicate one key mask across `rows` query rows.
pub fn broadcast_mask(rows: usize, key_mask: &[bool]) -> Arc<Vec<bool>> {
    let mut m = Vec::with_capacity(rows * key_mask.len());
    for _ in 0..rows {
        m.extend_from_slice(key_mask);
    }
    Arc::new(m)
}
