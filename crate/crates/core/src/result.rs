//! Compression output, its on-disk form and its structural checks.
//!
//! A result is stored as two files: the output tokens as an `M × d` float32
//! NPY array, and a JSON report holding provenance, statistics and, when
//! given, the configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::config::CompressionConfig;
use crate::error::{Error, Result};
use crate::npy::{load_npy, save_npy};
use crate::pipeline::Strategy;
use crate::tensor::{TokenRef, VideoFeatures};

/// Tolerance for "output equals the mean of its provenance".
pub const AGGREGATION_TOLERANCE: f64 = 1e-5;

pub const REPORT_FORMAT: &str = "flashvid-report/1";

/// Wall time per stage in nanoseconds; all zero when timing is disabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub partition_ns: u64,
    pub selection_ns: u64,
    pub merging_ns: u64,
    pub budget_ns: u64,
}

impl StageTimings {
    pub fn total_ns(&self) -> u64 {
        self.partition_ns + self.selection_ns + self.merging_ns + self.budget_ns
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub input_tokens: usize,
    pub target_tokens: usize,
    pub output_tokens: usize,
    pub segments: usize,
    /// Tokens kept by selection.
    pub adts_selected: usize,
    /// Trees built over the remaining tokens.
    pub trees_formed: usize,
    /// Remaining tokens absorbed into a tree root: remainder minus trees.
    pub tstm_merged: usize,
    /// Trees folded together by density-peaks clustering.
    pub dpc_reduced: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionResult {
    pub strategy: Strategy,
    pub input_shape: [usize; 3],
    pub dim: usize,
    /// `len() × dim`, row-major.
    pub tokens: Vec<f32>,
    /// Members of each output token, sorted; outputs ordered by first member.
    pub provenance: Vec<Vec<TokenRef>>,
    pub stats: StageStats,
}

impl CompressionResult {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks that provenance partitions the input tokens and that every
    /// output is the mean of its members.
    pub fn verify(&self, features: &VideoFeatures) -> Result<()> {
        if self.input_shape != features.shape() || self.dim != features.dim() {
            return Err(Error::Invariant(format!(
                "result shape {:?} does not match input {:?}",
                self.input_shape,
                features.shape()
            )));
        }
        if self.tokens.len() != self.len() * self.dim {
            return Err(Error::Invariant(format!(
                "{} token values for {} outputs of width {}",
                self.tokens.len(),
                self.len(),
                self.dim
            )));
        }
        let n = features.tokens_per_frame();
        let mut owner = vec![usize::MAX; features.total_tokens()];
        for (o, members) in self.provenance.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Invariant(format!("output {o} has no members")));
            }
            for &t in members {
                if t.frame >= features.frames() || t.pos >= n {
                    return Err(Error::Invariant(format!("output {o} names unknown token {t}")));
                }
                let slot = &mut owner[t.frame * n + t.pos];
                if *slot != usize::MAX {
                    return Err(Error::Invariant(format!(
                        "token {t} belongs to outputs {} and {o}",
                        *slot
                    )));
                }
                *slot = o;
            }
            let mut mean = vec![0.0f64; self.dim];
            for &t in members {
                for (m, &v) in mean.iter_mut().zip(features.token(t)) {
                    *m += v as f64;
                }
            }
            for (c, m) in mean.iter().enumerate() {
                let want = m / members.len() as f64;
                let got = self.token(o)[c] as f64;
                if (got - want).abs() > AGGREGATION_TOLERANCE {
                    return Err(Error::Invariant(format!(
                        "output {o} channel {c} is {got}, mean of members is {want}"
                    )));
                }
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Invariant(format!(
                "token {} is not covered by any output",
                TokenRef::new(i / n, i % n)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Report {
    format: String,
    strategy: Strategy,
    input_shape: [usize; 3],
    dim: usize,
    output_count: usize,
    provenance: Vec<Vec<TokenRef>>,
    stats: StageStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<CompressionConfig>,
}

/// Canonical JSON text of the report for `result`.
pub fn report_json(result: &CompressionResult, config: Option<&CompressionConfig>) -> Result<String> {
    to_canonical_string(&Report {
        format: REPORT_FORMAT.to_string(),
        strategy: result.strategy,
        input_shape: result.input_shape,
        dim: result.dim,
        output_count: result.len(),
        provenance: result.provenance.clone(),
        stats: result.stats.clone(),
        config: config.cloned(),
    })
}

pub fn save_result(
    result: &CompressionResult,
    tokens_path: &Path,
    report_path: &Path,
    config: Option<&CompressionConfig>,
) -> Result<()> {
    save_npy(tokens_path, &[result.len(), result.dim], &result.tokens)?;
    let json = report_json(result, config)?;
    std::fs::write(report_path, json).map_err(|e| Error::io(report_path, e))
}

pub fn load_result(
    tokens_path: &Path,
    report_path: &Path,
) -> Result<(CompressionResult, Option<CompressionConfig>)> {
    let arr = load_npy(tokens_path)?;
    let text = std::fs::read_to_string(report_path).map_err(|e| Error::io(report_path, e))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| Error::Report(e.to_string()))?;
    if report.format != REPORT_FORMAT {
        return Err(Error::Report(format!("unknown report format {:?}", report.format)));
    }
    if arr.shape != [report.output_count, report.dim] || report.provenance.len() != report.output_count {
        return Err(Error::Report(format!(
            "tokens of shape {:?} do not match a report of {} outputs of width {}",
            arr.shape, report.output_count, report.dim
        )));
    }
    Ok((
        CompressionResult {
            strategy: report.strategy,
            input_shape: report.input_shape,
            dim: report.dim,
            tokens: arr.data,
            provenance: report.provenance,
            stats: report.stats,
        },
        report.config,
    ))
}
