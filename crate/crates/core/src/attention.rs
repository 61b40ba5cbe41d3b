//! Multi-head self-attention and cross-frame attention over token grids.
//!
//! Every attention entry point funnels into [`attend_blocks`]: keys and values
//! are stacked in the caller's order, then each head computes
//! `softmax(Q_h K_h^T / temperature) V_h` and writes its columns back into the
//! output. Sharing one path is what makes the reduction identities
//! (cross-frame with no other frames, anchor attention with an empty cache)
//! hold bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_rows, Matrix};

/// Token features of one frame laid out as a `grid_h x grid_w` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub frame_index: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    tokens: Matrix,
}

impl FrameFeatures {
    pub fn new(frame_index: usize, grid_h: usize, grid_w: usize, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} tokens for a {grid_h}x{grid_w} grid",
                tokens.rows()
            )));
        }
        Ok(Self {
            frame_index,
            grid_h,
            grid_w,
            tokens,
        })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> Matrix {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub dim: usize,
    pub temperature: f32,
}

impl AttentionConfig {
    /// Config with the default temperature `sqrt(head_dim)`.
    pub fn new(dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || dim == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Parameter(format!(
                "dim {dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(Self {
            num_heads,
            dim,
            temperature: ((dim / num_heads) as f32).sqrt(),
        })
    }

    pub fn with_temperature(mut self, temperature: f32) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// Projected queries, keys and values of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl Qkv {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.rows() != k.rows() || k.rows() != v.rows() {
            return Err(Error::Shape(format!(
                "q/k/v rows {}/{}/{}",
                q.rows(),
                k.rows(),
                v.rows()
            )));
        }
        if q.cols() != k.cols() || k.cols() != v.cols() {
            return Err(Error::Shape(format!(
                "q/k/v cols {}/{}/{}",
                q.cols(),
                k.cols(),
                v.cols()
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn n_tokens(&self) -> usize {
        self.q.rows()
    }
}

/// Query/key/value projection matrices, each `dim x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Head-averaged, row-stochastic attention scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub scores: Matrix,
}

pub fn project_qkv(frame: &FrameFeatures, weights: &ProjectionWeights) -> Result<Qkv> {
    let t = frame.tokens();
    Qkv::new(
        matmul(t, &weights.wq)?,
        matmul(t, &weights.wk)?,
        matmul(t, &weights.wv)?,
    )
}

/// Multi-head attention of `q` over the row-wise concatenation of
/// `key_blocks` / `value_blocks`.
pub fn attend_blocks(
    q: &Matrix,
    key_blocks: &[&Matrix],
    value_blocks: &[&Matrix],
    cfg: &AttentionConfig,
) -> Result<Matrix> {
    let keys = Matrix::vstack(key_blocks)?;
    let values = Matrix::vstack(value_blocks)?;
    if keys.rows() == 0 {
        return Err(Error::EmptyContext);
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    for (name, m) in [("query", q), ("key", &keys), ("value", &values)] {
        if m.cols() != cfg.dim {
            return Err(Error::Shape(format!(
                "{name} width {} but attention dim {}",
                m.cols(),
                cfg.dim
            )));
        }
    }
    let hd = cfg.head_dim();
    let mut out = Matrix::zeros(q.rows(), cfg.dim);
    for h in 0..cfg.num_heads {
        let cols = h * hd..(h + 1) * hd;
        let probs = head_scores(q, &keys, cols.clone(), cfg.temperature)?;
        let head_out = matmul(&probs, &values.columns(cols)?)?;
        out.set_columns(h * hd, &head_out)?;
    }
    Ok(out)
}

fn head_scores(q: &Matrix, k: &Matrix, cols: std::ops::Range<usize>, temperature: f32) -> Result<Matrix> {
    let logits = matmul(&q.columns(cols.clone())?, &k.columns(cols)?.transpose())?;
    softmax_rows(&logits, temperature)
}

pub fn self_attention(qkv: &Qkv, cfg: &AttentionConfig) -> Result<Matrix> {
    attend_blocks(&qkv.q, &[&qkv.k], &[&qkv.v], cfg)
}

/// Attention of one frame's queries over its own keys (optionally) followed by
/// every frame in `others`, in list order.
pub fn cross_frame_attention(
    query_frame: &Qkv,
    others: &[&Qkv],
    cfg: &AttentionConfig,
    include_self: bool,
) -> Result<Matrix> {
    let mut keys = Vec::with_capacity(others.len() + 1);
    let mut values = Vec::with_capacity(others.len() + 1);
    if include_self {
        keys.push(&query_frame.k);
        values.push(&query_frame.v);
    }
    for o in others {
        keys.push(&o.k);
        values.push(&o.v);
    }
    if keys.is_empty() {
        return Err(Error::EmptyContext);
    }
    attend_blocks(&query_frame.q, &keys, &values, cfg)
}

/// Per-head post-softmax score matrices of `q_frame` queries against
/// `k_frame` keys.
pub fn head_attention_maps(q_frame: &Qkv, k_frame: &Qkv, cfg: &AttentionConfig) -> Result<Vec<Matrix>> {
    head_maps(&q_frame.q, &k_frame.k, cfg)
}

fn head_maps(q: &Matrix, k: &Matrix, cfg: &AttentionConfig) -> Result<Vec<Matrix>> {
    if q.cols() != cfg.dim || k.cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "query width {} / key width {} vs dim {}",
            q.cols(),
            k.cols(),
            cfg.dim
        )));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyContext);
    }
    let hd = cfg.head_dim();
    (0..cfg.num_heads)
        .map(|h| head_scores(q, k, h * hd..(h + 1) * hd, cfg.temperature))
        .collect()
}

/// Attention scores averaged over heads after the softmax.
pub fn head_avg_attention_map(q_frame: &Qkv, k_frame: &Qkv, cfg: &AttentionConfig) -> Result<AttentionMap> {
    head_avg_scores(&q_frame.q, &k_frame.k, cfg)
}

/// Head-averaged scores for an arbitrary set of query rows.
pub fn head_avg_scores(q: &Matrix, k: &Matrix, cfg: &AttentionConfig) -> Result<AttentionMap> {
    let heads = head_maps(q, k, cfg)?;
    let (rows, cols) = heads[0].shape();
    let mut acc = vec![0.0f64; rows * cols];
    for h in &heads {
        for (a, &p) in acc.iter_mut().zip(h.as_slice()) {
            *a += f64::from(p);
        }
    }
    let n = heads.len() as f64;
    let scores = Matrix::new(rows, cols, acc.into_iter().map(|a| (a / n) as f32).collect())?;
    Ok(AttentionMap { scores })
}
