//! Dense containers for per-frame visual features and encoder attention.
//!
//! Both containers are validated on construction and immutable afterwards.
//! Storage is `f32`, row-major (`frame`, `token`, `channel`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on attention row sums.
pub const ATTENTION_ROW_TOLERANCE: f64 = 1e-4;

/// Identity of one visual token: `(frame, pos)`.
///
/// The derived ordering is lexicographic on `(frame, pos)` and is the
/// tie-break order used throughout the crate.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct TokenRef {
    pub frame: usize,
    pub pos: usize,
}

impl TokenRef {
    pub const fn new(frame: usize, pos: usize) -> Self {
        Self { frame, pos }
    }
}

impl From<(usize, usize)> for TokenRef {
    fn from((frame, pos): (usize, usize)) -> Self {
        Self { frame, pos }
    }
}

impl From<TokenRef> for (usize, usize) {
    fn from(t: TokenRef) -> Self {
        (t.frame, t.pos)
    }
}

impl std::fmt::Display for TokenRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.frame, self.pos)
    }
}

fn first_non_finite(data: &[f32]) -> Option<(usize, f32)> {
    data.iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i, *v))
}

/// Visual embeddings of a clip, shape `frames × tokens_per_frame × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    frames: usize,
    tokens_per_frame: usize,
    dim: usize,
    data: Vec<f32>,
}

impl VideoFeatures {
    pub fn new(frames: usize, tokens_per_frame: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || tokens_per_frame == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature shape ({frames}, {tokens_per_frame}, {dim}) has an empty axis"
            )));
        }
        let expected = frames * tokens_per_frame * dim;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature buffer holds {} values, shape ({frames}, {tokens_per_frame}, {dim}) needs {expected}",
                data.len()
            )));
        }
        if let Some((index, value)) = first_non_finite(&data) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self {
            frames,
            tokens_per_frame,
            dim,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.tokens_per_frame, self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// All token vectors of one frame, `tokens_per_frame × dim`.
    pub fn frame(&self, frame: usize) -> &[f32] {
        let stride = self.tokens_per_frame * self.dim;
        &self.data[frame * stride..(frame + 1) * stride]
    }

    pub fn token(&self, t: TokenRef) -> &[f32] {
        let start = (t.frame * self.tokens_per_frame + t.pos) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Every token of the clip in `TokenRef` order.
    pub fn token_refs(&self) -> impl Iterator<Item = TokenRef> + '_ {
        (0..self.frames)
            .flat_map(move |f| (0..self.tokens_per_frame).map(move |p| TokenRef::new(f, p)))
    }
}

/// Per-frame encoder attention, shape `frames × tokens_per_frame × tokens_per_frame`.
///
/// Expected to be a single pre-reduced map per frame (for instance the last
/// encoder layer averaged over heads). Rows are post-softmax distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    frames: usize,
    tokens_per_frame: usize,
    data: Vec<f32>,
}

impl AttentionStack {
    pub fn new(frames: usize, tokens_per_frame: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || tokens_per_frame == 0 {
            return Err(Error::Shape(format!(
                "attention shape ({frames}, {tokens_per_frame}, {tokens_per_frame}) has an empty axis"
            )));
        }
        let n = tokens_per_frame;
        let expected = frames * n * n;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "attention buffer holds {} values, shape ({frames}, {n}, {n}) needs {expected}",
                data.len()
            )));
        }
        if let Some((index, value)) = first_non_finite(&data) {
            return Err(Error::NonFinite { index, value });
        }
        for (r, row) in data.chunks_exact(n).enumerate() {
            let (frame, row_idx) = (r / n, r % n);
            if let Some(v) = row.iter().find(|v| **v < 0.0) {
                return Err(Error::Attention {
                    frame,
                    row: row_idx,
                    reason: format!("negative weight {v}"),
                });
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > ATTENTION_ROW_TOLERANCE {
                return Err(Error::Attention {
                    frame,
                    row: row_idx,
                    reason: format!("row sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Self {
            frames,
            tokens_per_frame,
            data,
        })
    }

    /// Uniform attention `1/N_v` everywhere; the stand-in when no encoder
    /// attention is available.
    pub fn uniform(frames: usize, tokens_per_frame: usize) -> Result<Self> {
        let n = tokens_per_frame.max(1);
        let w = 1.0 / n as f32;
        Self::new(frames, tokens_per_frame, vec![w; frames * n * n])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.tokens_per_frame, self.tokens_per_frame]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// The `N_v × N_v` matrix of one frame.
    pub fn frame(&self, frame: usize) -> &[f32] {
        let stride = self.tokens_per_frame * self.tokens_per_frame;
        &self.data[frame * stride..(frame + 1) * stride]
    }

    pub fn check_matches(&self, features: &VideoFeatures) -> Result<()> {
        if self.frames != features.frames() || self.tokens_per_frame != features.tokens_per_frame() {
            return Err(Error::Shape(format!(
                "attention shape {:?} does not match features {:?}",
                self.shape(),
                features.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn features_reject_wrong_length() {
        let err = VideoFeatures::new(2, 3, 4, vec![0.0; 23]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn features_report_first_nan_index() {
        let mut data = vec![1.0; 24];
        data[7] = f32::NAN;
        data[9] = f32::INFINITY;
        match VideoFeatures::new(2, 3, 4, data).unwrap_err() {
            Error::NonFinite { index, .. } => assert_eq!(index, 7),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn token_accessor_is_row_major() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let f = VideoFeatures::new(2, 3, 4, data).unwrap();
        assert_eq!(f.token(TokenRef::new(1, 2)), &[20.0, 21.0, 22.0, 23.0]);
        assert_eq!(f.frame(1).len(), 12);
    }

    #[test]
    fn attention_rows_must_be_stochastic() {
        let bad = AttentionStack::new(1, 2, vec![0.6, 0.4, 0.2, 0.7]).unwrap_err();
        assert!(matches!(bad, Error::Attention { frame: 0, row: 1, .. }));
        let neg = AttentionStack::new(1, 2, vec![1.2, -0.2, 0.5, 0.5]).unwrap_err();
        assert!(matches!(neg, Error::Attention { row: 0, .. }));
        AttentionStack::new(1, 2, vec![0.6, 0.4, 0.2, 0.8]).unwrap();
    }

    #[test]
    fn uniform_attention_is_valid() {
        let a = AttentionStack::uniform(3, 7).unwrap();
        assert_eq!(a.shape(), [3, 7, 7]);
    }

    fn token_ref() -> impl Strategy<Value = TokenRef> {
        (0usize..4, 0usize..4).prop_map(|(f, p)| TokenRef::new(f, p))
    }

    proptest! {
        #[test]
        fn token_order_is_strict_total(a in token_ref(), b in token_ref(), c in token_ref()) {
            // exactly one of <, ==, > holds
            let rels = [a < b, a == b, a > b];
            prop_assert_eq!(rels.iter().filter(|r| **r).count(), 1);
            prop_assert_eq!(a < b, b > a);
            if a < b && b < c {
                prop_assert!(a < c);
            }
            prop_assert_eq!(a < b, (a.frame, a.pos) < (b.frame, b.pos));
        }

        #[test]
        fn validation_accepts_exactly_finite(vals in proptest::collection::vec(
            prop_oneof![
                8 => -1e6f32..1e6f32,
                1 => Just(f32::NAN),
                1 => Just(f32::INFINITY),
                1 => Just(f32::NEG_INFINITY),
            ], 12)) {
            let all_finite = vals.iter().all(|v| v.is_finite());
            let res = VideoFeatures::new(1, 3, 4, vals.clone());
            prop_assert_eq!(res.is_ok(), all_finite);
            if let Err(Error::NonFinite { index, .. }) = res {
                prop_assert_eq!(index, vals.iter().position(|v| !v.is_finite()).unwrap());
            }
        }
    }
}
