//! Siamese cross-attention.
//!
//! A single query projection is attended against two key/value pairs, one
//! projected from the style prompt and one from the content prompt, using
//! the same projection weights. The two tracks share nothing else.
//!
//! Heads own contiguous channel blocks: head `i` of a `model_dim = h * d`
//! row is channels `[i * d, (i + 1) * d)`.

use rayon::prelude::*;

use crate::error::{AsiError, Result};
use crate::numeric::{matmul, softmax_rows, Matrix};

/// Shared projection weights of the replaced cross-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    heads: usize,
    head_dim: usize,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, heads: usize) -> Result<Self> {
        let (rows, cols) = w_q.shape();
        if rows != cols {
            return Err(AsiError::shape("AttentionParams", "square projection", w_q.shape_str()));
        }
        for w in [&w_k, &w_v] {
            w_q.expect_same_shape("AttentionParams", w)?;
        }
        if heads == 0 || rows == 0 || rows % heads != 0 {
            return Err(AsiError::config(
                "heads",
                format!("model dim {rows} is not divisible into {heads} heads"),
            ));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads,
            head_dim: rows / heads,
        })
    }

    pub fn identity(heads: usize, head_dim: usize) -> Self {
        let eye = Matrix::identity(heads * head_dim);
        Self::new(eye.clone(), eye.clone(), eye, heads).expect("identity params are valid")
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Encoded prompt: `tokens x model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding(Matrix);

impl PromptEmbedding {
    pub fn new(embedding: Matrix) -> Result<Self> {
        if embedding.rows() == 0 {
            return Err(AsiError::Degenerate {
                op: "PromptEmbedding::new",
                reason: "prompt needs at least one token".into(),
            });
        }
        Ok(Self(embedding))
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Multi-head activation block of shape `heads x positions x head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    heads: usize,
    positions: usize,
    head_dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(heads: usize, positions: usize, head_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * positions * head_dim {
            return Err(AsiError::shape(
                "FeatureMap::new",
                format!("{heads}x{positions}x{head_dim}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AsiError::NonFinite("FeatureMap::new"));
        }
        Ok(Self {
            heads,
            positions,
            head_dim,
            data,
        })
    }

    /// Stacks equally shaped per-head matrices.
    pub fn from_heads(heads: Vec<Matrix>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| AsiError::shape("FeatureMap::from_heads", "at least one head", 0))?;
        let (positions, head_dim) = first.shape();
        let mut data = Vec::with_capacity(heads.len() * positions * head_dim);
        for h in &heads {
            first.expect_same_shape("FeatureMap::from_heads", h)?;
            data.extend_from_slice(h.as_slice());
        }
        Ok(Self {
            heads: heads.len(),
            positions,
            head_dim,
            data,
        })
    }

    /// Splits `positions x (heads * head_dim)` into contiguous channel blocks.
    pub fn split_heads(flat: &Matrix, heads: usize) -> Result<Self> {
        if heads == 0 || !flat.cols().is_multiple_of(heads) {
            return Err(AsiError::shape(
                "split_heads",
                flat.shape_str(),
                format!("{heads} heads"),
            ));
        }
        let head_dim = flat.cols() / heads;
        let positions = flat.rows();
        let mut data = Vec::with_capacity(flat.as_slice().len());
        for h in 0..heads {
            for p in 0..positions {
                data.extend_from_slice(&flat.row(p)[h * head_dim..(h + 1) * head_dim]);
            }
        }
        Ok(Self {
            heads,
            positions,
            head_dim,
            data,
        })
    }

    /// Inverse of [`FeatureMap::split_heads`].
    pub fn merge_heads(&self) -> Matrix {
        let cols = self.heads * self.head_dim;
        let mut data = vec![0.0; self.positions * cols];
        for h in 0..self.heads {
            let slice = self.head_slice(h);
            for p in 0..self.positions {
                let src = &slice[p * self.head_dim..(p + 1) * self.head_dim];
                data[p * cols + h * self.head_dim..p * cols + (h + 1) * self.head_dim]
                    .copy_from_slice(src);
            }
        }
        Matrix::new(self.positions, cols, data).expect("merge preserves size")
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.heads, self.positions, self.head_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn head_slice(&self, i: usize) -> &[f64] {
        let n = self.positions * self.head_dim;
        &self.data[i * n..(i + 1) * n]
    }

    /// Head `i` as a `positions x head_dim` matrix.
    pub fn head(&self, i: usize) -> Matrix {
        Matrix::new(self.positions, self.head_dim, self.head_slice(i).to_vec())
            .expect("head slice is well formed")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.heads, self.positions, self.head_dim)
    }
}

/// Query projection, split into heads. Computed once and shared by both tracks.
pub fn project_q(spatial: &Matrix, params: &AttentionParams) -> Result<FeatureMap> {
    if spatial.cols() != params.model_dim() {
        return Err(AsiError::shape("project_q", spatial.shape_str(), params.w_q.shape_str()));
    }
    FeatureMap::split_heads(&matmul(spatial, &params.w_q)?, params.heads())
}

/// Key and value projections of a prompt, split into heads.
pub fn project_kv(prompt: &PromptEmbedding, params: &AttentionParams) -> Result<(FeatureMap, FeatureMap)> {
    if prompt.model_dim() != params.model_dim() {
        return Err(AsiError::shape("project_kv", prompt.matrix().shape_str(), params.w_k.shape_str()));
    }
    let k = FeatureMap::split_heads(&matmul(prompt.matrix(), &params.w_k)?, params.heads())?;
    let v = FeatureMap::split_heads(&matmul(prompt.matrix(), &params.w_v)?, params.heads())?;
    Ok((k, v))
}

/// `softmax(q kᵀ / sqrt(d))` for one head.
pub fn attention_weights(q_head: &Matrix, k_head: &Matrix) -> Result<Matrix> {
    let scale = (q_head.cols() as f64).sqrt();
    let logits = matmul(q_head, &k_head.transpose())?.scale(1.0 / scale)?;
    Ok(softmax_rows(&logits))
}

fn check_track(op: &'static str, q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<()> {
    for other in [k, v] {
        if other.heads != q.heads || other.head_dim != q.head_dim {
            return Err(AsiError::shape(op, q.shape_str(), other.shape_str()));
        }
    }
    if k.positions != v.positions {
        return Err(AsiError::shape(op, k.shape_str(), v.shape_str()));
    }
    if q.positions == 0 || k.positions == 0 {
        return Err(AsiError::Degenerate {
            op,
            reason: "attention needs at least one query and one token".into(),
        });
    }
    Ok(())
}

/// Ordinary multi-head cross-attention. Heads are computed in parallel;
/// each head's reduction order is fixed so results do not depend on the
/// thread count.
pub fn single_track_attend(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<FeatureMap> {
    check_track("single_track_attend", q, k, v)?;
    let heads = (0..q.heads)
        .into_par_iter()
        .map(|i| matmul(&attention_weights(&q.head(i), &k.head(i))?, &v.head(i)))
        .collect::<Result<Vec<_>>>()?;
    FeatureMap::from_heads(heads)
}

/// Dual-track attention returning `(f_s, f_c)`.
pub fn siamese_attend(
    q: &FeatureMap,
    k_s: &FeatureMap,
    v_s: &FeatureMap,
    k_c: &FeatureMap,
    v_c: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap)> {
    check_track("siamese_attend (style)", q, k_s, v_s)?;
    check_track("siamese_attend (content)", q, k_c, v_c)?;
    let (f_s, f_c) = rayon::join(
        || single_track_attend(q, k_s, v_s),
        || single_track_attend(q, k_c, v_c),
    );
    Ok((f_s?, f_c?))
}
