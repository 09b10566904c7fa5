//! Attention and diversity-based token selection.
//!
//! Each frame solves a calibrated max-min diversity problem greedily: the
//! cosine distance matrix is row-scaled by the candidate's normalized
//! attention and event relevance, then tokens are picked one at a time by
//! their largest minimum distance to the picks so far.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{
    cls_attention_derive, event_relevance, frame_embeddings, pairwise_distance, Matrix,
};
use crate::tensor::{AttentionStack, TokenRef, VideoFeatures};

/// Lower end of the calibration range, so no row is scaled to zero.
pub const CALIBRATION_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Max-min diversity on attention- and relevance-calibrated distances.
    #[default]
    Calibrated,
    /// Max-min diversity on raw cosine distances.
    Uncalibrated,
    /// Highest column-mean attention first.
    AttentionTopK,
}

/// Min-max maps `v` into `[CALIBRATION_FLOOR, 1]`; a constant vector maps to all 1.
pub fn minmax_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![1.0; v.len()];
    }
    v.iter()
        .map(|&x| CALIBRATION_FLOOR + (1.0 - CALIBRATION_FLOOR) * (x - lo) / span)
        .collect()
}

/// `D'[i,j] = D[i,j] · â_i · ŝ_i` after normalizing both vectors.
pub fn calibrate_distance(d: &Matrix, attention: &[f64], relevance: &[f64]) -> Result<Matrix> {
    let n = d.rows();
    if d.cols() != n || attention.len() != n || relevance.len() != n {
        return Err(Error::Shape(format!(
            "calibration needs a square distance matrix and matching vectors, got {}×{}, {}, {}",
            d.rows(),
            d.cols(),
            attention.len(),
            relevance.len()
        )));
    }
    let a = minmax_normalize(attention);
    let s = minmax_normalize(relevance);
    Ok(Matrix::from_fn(n, n, |i, j| d.get(i, j) * a[i] * s[i]))
}

/// Greedy max-min selection of `min(quota, n)` indices, in pick order.
///
/// The first pick maximizes `min_{j≠i} D[i,j]`; later picks maximize the
/// minimum of `D[c,s]` over already-picked `s`. Ties go to the smallest index.
pub fn mmdp_select(d: &Matrix, quota: usize) -> Result<Vec<usize>> {
    let n = d.rows();
    if d.cols() != n {
        return Err(Error::Shape(format!(
            "distance matrix must be square, got {}×{}",
            d.rows(),
            d.cols()
        )));
    }
    if quota == 0 {
        return Err(Error::Infeasible("selection quota must be at least 1".into()));
    }
    let quota = quota.min(n);
    if n == 0 {
        return Ok(Vec::new());
    }

    let argmax = |score: &dyn Fn(usize) -> f64, taken: &[bool]| {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let v = score(i);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|b| b.0)
    };

    let mut taken = vec![false; n];
    let first_score = |i: usize| {
        (0..n)
            .filter(|&j| j != i)
            .map(|j| d.get(i, j))
            .fold(f64::INFINITY, f64::min)
    };
    let first = argmax(&first_score, &taken).expect("n >= 1");
    taken[first] = true;
    let mut picks = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| d.get(i, first)).collect();

    while picks.len() < quota {
        let next = argmax(&|i: usize| nearest[i], &taken).expect("quota <= n");
        taken[next] = true;
        picks.push(next);
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(d.get(i, next));
        }
    }
    Ok(picks)
}

/// Indices of the `quota` largest scores, highest first, ties by index.
pub fn topk_select(scores: &[f64], quota: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(quota);
    order
}

/// Splits `total` uniformly over `frames`, one extra for frames `0, 1, …`,
/// capped at `per_frame` each.
pub fn frame_quotas(total: usize, frames: usize, per_frame: usize) -> Vec<usize> {
    if frames == 0 {
        return Vec::new();
    }
    let (q, r) = (total / frames, total % frames);
    (0..frames)
        .map(|f| (q + usize::from(f < r)).min(per_frame))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSelection {
    /// In pick order.
    pub selected: Vec<TokenRef>,
    /// In position order.
    pub remainder: Vec<TokenRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdtsSelection {
    pub frames: Vec<FrameSelection>,
}

impl AdtsSelection {
    pub fn selected_count(&self) -> usize {
        self.frames.iter().map(|f| f.selected.len()).sum()
    }

    pub fn remainder_positions(&self, frame: usize) -> Vec<usize> {
        self.frames[frame].remainder.iter().map(|t| t.pos).collect()
    }
}

/// Per-frame selection under `rule` with the given quotas.
pub fn adts_select(
    features: &VideoFeatures,
    attn: &AttentionStack,
    quotas: &[usize],
    rule: SelectionRule,
) -> Result<AdtsSelection> {
    attn.check_matches(features)?;
    let (frames, n) = (features.frames(), features.tokens_per_frame());
    if quotas.len() != frames {
        return Err(Error::Shape(format!(
            "{} quotas for {frames} frames",
            quotas.len()
        )));
    }
    if let Some(f) = quotas.iter().position(|&q| q > n) {
        return Err(Error::Infeasible(format!(
            "frame {f} quota {} exceeds {n} tokens",
            quotas[f]
        )));
    }
    if quotas.iter().all(|&q| q == 0) {
        let frames = (0..frames)
            .map(|f| FrameSelection {
                selected: Vec::new(),
                remainder: (0..n).map(|p| TokenRef::new(f, p)).collect(),
            })
            .collect();
        return Ok(AdtsSelection { frames });
    }

    let cls = match rule {
        SelectionRule::Uncalibrated => None,
        _ => Some(cls_attention_derive(attn)),
    };
    let relevance = match rule {
        SelectionRule::Calibrated => Some(event_relevance(features, &frame_embeddings(features))?),
        _ => None,
    };

    let picks: Vec<Vec<usize>> = (0..frames)
        .into_par_iter()
        .map(|f| -> Result<Vec<usize>> {
            if quotas[f] == 0 {
                return Ok(Vec::new());
            }
            match rule {
                SelectionRule::AttentionTopK => {
                    Ok(topk_select(cls.as_ref().expect("attention").row(f), quotas[f]))
                }
                SelectionRule::Uncalibrated => {
                    mmdp_select(&pairwise_distance(features.frame(f), features.dim())?, quotas[f])
                }
                SelectionRule::Calibrated => {
                    let d = pairwise_distance(features.frame(f), features.dim())?;
                    let a = cls.as_ref().expect("attention").row(f);
                    let s = relevance.as_ref().expect("relevance").row(f);
                    mmdp_select(&calibrate_distance(&d, a, s)?, quotas[f])
                }
            }
        })
        .collect::<Result<_>>()?;

    let frames = picks
        .into_iter()
        .enumerate()
        .map(|(f, sel)| {
            let mut chosen = vec![false; n];
            sel.iter().for_each(|&p| chosen[p] = true);
            FrameSelection {
                selected: sel.iter().map(|&p| TokenRef::new(f, p)).collect(),
                remainder: (0..n)
                    .filter(|&p| !chosen[p])
                    .map(|p| TokenRef::new(f, p))
                    .collect(),
            }
        })
        .collect();
    Ok(AdtsSelection { frames })
}
