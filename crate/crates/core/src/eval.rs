//! Strategy comparison on a fixed clip.
//!
//! Reconstruction error is the mean squared difference between every input
//! token and the output token it was folded into. It is a fidelity proxy for
//! synthetic inputs, not a task metric.
//!
//! CSV schema, one row per (strategy, threshold, frame):
//! `strategy, merge_threshold, frame, merged_tokens, mean_link_similarity,
//! output_count, reconstruction_mse, wall_ns`. `merged_tokens` counts the
//! frame's tokens linked to a parent in the previous frame;
//! `mean_link_similarity` is empty when there are none. The last three
//! columns repeat the whole-run values on every row.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::config::CompressionConfig;
use crate::error::{Error, Result};
use crate::pipeline::{run_traced, Strategy};
use crate::result::CompressionResult;
use crate::tensor::{AttentionStack, VideoFeatures};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub merge_threshold: f64,
    pub input_count: usize,
    pub target_count: usize,
    pub output_count: usize,
    pub adts_selected: usize,
    /// Tokens linked to a parent, per frame.
    pub merged_per_frame: Vec<usize>,
    pub mean_link_similarity_per_frame: Vec<Option<f64>>,
    pub mean_link_similarity: Option<f64>,
    /// Sum of `merged_per_frame`.
    pub merged_total: usize,
    pub dpc_reduced: usize,
    pub reconstruction_mse: f64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub input_shape: [usize; 3],
    pub runs: Vec<StrategyReport>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    strategy: Strategy,
    merge_threshold: f64,
    frame: usize,
    merged_tokens: usize,
    mean_link_similarity: Option<f64>,
    output_count: usize,
    reconstruction_mse: f64,
    wall_ns: u64,
}

/// Mean over inputs and channels of `(x − output(x))²`.
pub fn reconstruction_mse(result: &CompressionResult, features: &VideoFeatures) -> f64 {
    let mut sum = 0.0f64;
    for (o, members) in result.provenance.iter().enumerate() {
        let out = result.token(o);
        for &t in members {
            for (&x, &y) in features.token(t).iter().zip(out) {
                let d = x as f64 - y as f64;
                sum += d * d;
            }
        }
    }
    sum / (features.total_tokens() * features.dim()) as f64
}

pub fn evaluate(
    strategies: &[Strategy],
    thresholds: &[f64],
    features: &VideoFeatures,
    attn: &AttentionStack,
    config: &CompressionConfig,
) -> Result<EvalReport> {
    let jobs: Vec<(Strategy, f64)> = strategies
        .iter()
        .flat_map(|&s| thresholds.iter().map(move |&t| (s, t)))
        .collect();
    let frames = features.frames();
    let runs = jobs
        .par_iter()
        .map(|&(strategy, threshold)| {
            let cfg = CompressionConfig {
                merge_threshold: threshold,
                ..config.clone()
            };
            let (result, trace) = run_traced(strategy, features, attn, &cfg)?;
            let merged_per_frame = trace.links_per_frame(frames);
            Ok(StrategyReport {
                strategy,
                merge_threshold: threshold,
                input_count: result.stats.input_tokens,
                target_count: result.stats.target_tokens,
                output_count: result.len(),
                adts_selected: result.stats.adts_selected,
                merged_total: merged_per_frame.iter().sum(),
                mean_link_similarity_per_frame: trace.mean_similarity_per_frame(frames),
                mean_link_similarity: trace.mean_link_similarity(),
                merged_per_frame,
                dpc_reduced: result.stats.dpc_reduced,
                reconstruction_mse: reconstruction_mse(&result, features),
                wall_ns: result.stats.timings.total_ns(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        input_shape: features.shape(),
        runs,
    })
}

impl EvalReport {
    pub fn clear_timings(&mut self) {
        self.runs.iter_mut().for_each(|r| r.wall_ns = 0);
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_string(self)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for run in &self.runs {
            for (frame, &merged) in run.merged_per_frame.iter().enumerate() {
                w.serialize(CsvRow {
                    strategy: run.strategy,
                    merge_threshold: run.merge_threshold,
                    frame,
                    merged_tokens: merged,
                    mean_link_similarity: run.mean_link_similarity_per_frame[frame],
                    output_count: run.output_count,
                    reconstruction_mse: run.reconstruction_mse,
                    wall_ns: run.wall_ns,
                })
                .map_err(|e| Error::Report(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::Report(e.to_string()))
    }
}
