//! Dense similarity kernels shared by partitioning, selection and merging.
//!
//! Inputs are `f32` rows; every reduction accumulates in `f64`. A zero-norm
//! row has cosine similarity 0 with everything.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{AttentionStack, VideoFeatures};

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn sq_norm(a: &[f32]) -> f64 {
    dot(a, a)
}

/// Cosine from precomputed squared norms; 0 when either norm vanishes.
/// Identical rows give exactly 1.
#[inline]
pub fn cosine_with_sq_norms(a: &[f32], sq_a: f64, b: &[f32], sq_b: f64) -> f64 {
    if sq_a == 0.0 || sq_b == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    cosine_with_sq_norms(a, sq_norm(a), b, sq_norm(b))
}

fn rows_of(buf: &[f32], dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || buf.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{what}: {} values do not form rows of width {dim}",
            buf.len()
        )));
    }
    Ok(buf.len() / dim)
}

/// Squared norm of every `dim`-wide row of `buf`.
pub fn row_sq_norms(buf: &[f32], dim: usize) -> Vec<f64> {
    buf.chunks_exact(dim).map(sq_norm).collect()
}

/// `(i, j) ↦ cos(a_i, b_j)` for `a: M×d`, `b: N×d`.
pub fn cosine_matrix(a: &[f32], b: &[f32], dim: usize) -> Result<Matrix> {
    let m = rows_of(a, dim, "left operand")?;
    let n = rows_of(b, dim, "right operand")?;
    let na = row_sq_norms(a, dim);
    let nb = row_sq_norms(b, dim);
    let data: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ai = &a[i * dim..(i + 1) * dim];
            let (na, nb) = (&na, &nb);
            (0..n).map(move |j| cosine_with_sq_norms(ai, na[i], &b[j * dim..(j + 1) * dim], nb[j]))
        })
        .collect();
    Matrix::new(m, n, data)
}

/// Cosine distance `1 − cos` within one frame: exactly symmetric, zero diagonal.
pub fn pairwise_distance(frame: &[f32], dim: usize) -> Result<Matrix> {
    let n = rows_of(frame, dim, "frame")?;
    let norms = row_sq_norms(frame, dim);
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let ai = &frame[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let c = cosine_with_sq_norms(ai, norms[i], &frame[j * dim..(j + 1) * dim], norms[j]);
            let d = 1.0 - c;
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// Global-average-pooled frame embeddings, `F × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FrameEmbeddings {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }
}

pub fn frame_embeddings(features: &VideoFeatures) -> FrameEmbeddings {
    let (frames, n, dim) = (features.frames(), features.tokens_per_frame(), features.dim());
    let mut data = vec![0.0f64; frames * dim];
    for f in 0..frames {
        let out = &mut data[f * dim..(f + 1) * dim];
        for tok in features.frame(f).chunks_exact(dim) {
            for (o, &v) in out.iter_mut().zip(tok) {
                *o += v as f64;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    FrameEmbeddings { frames, dim, data }
}

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (ab / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `t_i = cos(f_i, f_{i+1})` for consecutive frame embeddings.
pub fn transition_similarities(emb: &FrameEmbeddings) -> Result<Vec<f64>> {
    if emb.frames < 2 {
        return Err(Error::Shape(format!(
            "transition similarities need at least 2 frames, got {}",
            emb.frames
        )));
    }
    Ok((0..emb.frames - 1)
        .map(|i| cosine_f64(emb.row(i), emb.row(i + 1)))
        .collect())
}

/// Event relevance: each token's raw inner product with every frame
/// embedding, averaged over frames. Returns `F × N_v`.
pub fn event_relevance(features: &VideoFeatures, emb: &FrameEmbeddings) -> Result<Matrix> {
    if emb.frames != features.frames() || emb.dim != features.dim() {
        return Err(Error::Shape(format!(
            "frame embeddings {}×{} do not match features {:?}",
            emb.frames,
            emb.dim,
            features.shape()
        )));
    }
    let (frames, n, dim) = (features.frames(), features.tokens_per_frame(), features.dim());
    let data: Vec<f64> = (0..frames * n)
        .into_par_iter()
        .map(|k| {
            let tok = &features.as_slice()[k * dim..(k + 1) * dim];
            let total: f64 = (0..frames)
                .map(|i| {
                    tok.iter()
                        .zip(emb.row(i))
                        .map(|(&t, &e)| t as f64 * e)
                        .sum::<f64>()
                })
                .sum();
            total / frames as f64
        })
        .collect();
    Matrix::new(frames, n, data)
}

/// Attention each token receives within its frame: the column mean of the
/// frame's attention map. Returns `F × N_v`, each row summing to 1.
pub fn cls_attention_derive(attn: &AttentionStack) -> Matrix {
    let (frames, n) = (attn.frames(), attn.tokens_per_frame());
    let mut out = Matrix::zeros(frames, n);
    for f in 0..frames {
        let map = attn.frame(f);
        for j in 0..n {
            let col: f64 = (0..n).map(|i| map[i * n + j] as f64).sum();
            out.set(f, j, col / n as f64);
        }
    }
    out
}
