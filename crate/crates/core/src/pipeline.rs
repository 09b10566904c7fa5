//! End-to-end compression: partition, selection, segment-scoped merging and
//! budget trimming, plus the ablation strategies.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adts::{adts_select, frame_quotas, AdtsSelection, SelectionRule};
use crate::budget::dpcknn_cluster;
use crate::config::CompressionConfig;
use crate::error::{Error, Result, Stage};
use crate::partition::{partition_video, Partition};
use crate::result::{CompressionResult, StageStats, StageTimings};
use crate::tensor::{AttentionStack, TokenRef, VideoFeatures};
use crate::tstm::{aggregate_forest, build_forest, mean_of, ttm_baseline, Aggregated, FrameRun, MergeForest, TstmConstraints};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Flashvid,
    /// Same-position temporal merging only.
    TtmOnly,
    /// Attention top-k in place of calibrated diversity selection.
    AtsOnly,
    /// Uncalibrated diversity selection.
    DtsOnly,
    /// No selection; everything is merged.
    TstmOnly,
    /// Selection fills the whole budget.
    AdtsOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Flashvid,
        Strategy::TtmOnly,
        Strategy::AtsOnly,
        Strategy::DtsOnly,
        Strategy::TstmOnly,
        Strategy::AdtsOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Flashvid => "flashvid",
            Strategy::TtmOnly => "ttm_only",
            Strategy::AtsOnly => "ats_only",
            Strategy::DtsOnly => "dts_only",
            Strategy::TstmOnly => "tstm_only",
            Strategy::AdtsOnly => "adts_only",
        }
    }

    pub fn adts_ratio(self, config: &CompressionConfig) -> f64 {
        match self {
            Strategy::TtmOnly | Strategy::TstmOnly => 0.0,
            Strategy::AdtsOnly => 1.0,
            Strategy::Flashvid | Strategy::AtsOnly | Strategy::DtsOnly => config.adts_ratio,
        }
    }

    pub fn selection_rule(self) -> SelectionRule {
        match self {
            Strategy::AtsOnly => SelectionRule::AttentionTopK,
            Strategy::DtsOnly => SelectionRule::Uncalibrated,
            _ => SelectionRule::Calibrated,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
                Error::config("strategy", format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Intermediate products of one run, kept for evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub transitions: Vec<f64>,
    pub partition: Partition,
    pub selection: AdtsSelection,
    /// One forest per segment, before budget trimming.
    pub forests: Vec<MergeForest>,
}

impl Trace {
    /// Tokens merged into a parent, per frame.
    pub fn links_per_frame(&self, frames: usize) -> Vec<usize> {
        let mut out = vec![0; frames];
        for forest in &self.forests {
            for (i, c) in forest.links_per_frame().into_iter().enumerate() {
                out[forest.start_frame() + i] += c;
            }
        }
        out
    }

    /// Mean link similarity per frame; `None` where nothing merged.
    pub fn mean_similarity_per_frame(&self, frames: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; frames];
        for forest in &self.forests {
            for (i, m) in forest.mean_similarity_per_frame().into_iter().enumerate() {
                out[forest.start_frame() + i] = m;
            }
        }
        out
    }

    /// Mean over every link of the run.
    pub fn mean_link_similarity(&self) -> Option<f64> {
        let (sum, count) = self
            .forests
            .iter()
            .flat_map(|f| f.links())
            .fold((0.0, 0usize), |(s, c), l| (s + l.similarity, c + 1));
        (count > 0).then(|| sum / count as f64)
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

/// Splits `quota` over groups proportionally to `counts` by largest
/// remainder (ties to the lower index). Requires `quota <` the total and at
/// least one slot per non-empty group; groups that would get nothing borrow
/// one slot from the largest share.
pub fn proportional_allocation(counts: &[usize], quota: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut alloc: Vec<usize> = counts.iter().map(|&c| quota * c / total).collect();
    let mut rem: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (quota * c % total, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = quota - alloc.iter().sum::<usize>();
    for &(_, i) in &rem[..left] {
        alloc[i] += 1;
    }
    for i in 0..counts.len() {
        if counts[i] > 0 && alloc[i] == 0 {
            let donor = (0..alloc.len())
                .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a)))
                .expect("non-empty");
            if alloc[donor] > 1 {
                alloc[donor] -= 1;
                alloc[i] = 1;
            }
        }
    }
    alloc
}

/// Clusters `agg`'s outputs into `target` groups and re-pools each group
/// from the original input tokens.
fn dpc_trim(
    agg: Aggregated,
    target: usize,
    features: &VideoFeatures,
    config: &CompressionConfig,
) -> Result<Aggregated> {
    if target >= agg.len() {
        return Ok(agg);
    }
    let clustering = dpcknn_cluster(&agg.tokens, agg.dim, target, config.dpc_knn)?;
    let provenance: Vec<Vec<TokenRef>> = clustering
        .clusters()
        .into_iter()
        .map(|members| {
            let mut refs: Vec<TokenRef> = members
                .into_iter()
                .flat_map(|m| agg.provenance[m].iter().copied())
                .collect();
            refs.sort_unstable();
            refs
        })
        .collect();
    let tokens = provenance
        .par_iter()
        .flat_map_iter(|members| mean_of(features, members))
        .collect();
    Ok(Aggregated {
        dim: agg.dim,
        tokens,
        provenance,
    })
}

fn concat(parts: Vec<Aggregated>, dim: usize) -> Aggregated {
    let mut out = Aggregated {
        dim,
        tokens: Vec::new(),
        provenance: Vec::new(),
    };
    for p in parts {
        out.tokens.extend(p.tokens);
        out.provenance.extend(p.provenance);
    }
    out
}

fn enforce_budget(
    parts: Vec<Aggregated>,
    quota: usize,
    features: &VideoFeatures,
    config: &CompressionConfig,
) -> Result<Vec<Aggregated>> {
    let counts: Vec<usize> = parts.iter().map(Aggregated::len).collect();
    let total: usize = counts.iter().sum();
    if total <= quota {
        return Ok(parts);
    }
    let non_empty = counts.iter().filter(|&&c| c > 0).count();
    if quota < non_empty {
        // too few slots to give every segment one; cluster across segments
        let all = concat(parts, features.dim());
        return Ok(vec![dpc_trim(all, quota, features, config)?]);
    }
    let alloc = proportional_allocation(&counts, quota);
    parts
        .into_iter()
        .zip(alloc)
        .map(|(p, a)| if p.is_empty() { Ok(p) } else { dpc_trim(p, a, features, config) })
        .collect()
}

pub fn flashvid_compress(
    features: &VideoFeatures,
    attn: &AttentionStack,
    config: &CompressionConfig,
) -> Result<CompressionResult> {
    run_strategy(Strategy::Flashvid, features, attn, config)
}

pub fn run_strategy(
    strategy: Strategy,
    features: &VideoFeatures,
    attn: &AttentionStack,
    config: &CompressionConfig,
) -> Result<CompressionResult> {
    run_traced(strategy, features, attn, config).map(|(r, _)| r)
}

pub fn run_traced(
    strategy: Strategy,
    features: &VideoFeatures,
    attn: &AttentionStack,
    config: &CompressionConfig,
) -> Result<(CompressionResult, Trace)> {
    config.validate()?;
    attn.check_matches(features)?;
    let (frames, n, dim) = (features.frames(), features.tokens_per_frame(), features.dim());
    let total = frames * n;
    let target = config.target_tokens(total);
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let (transitions, partition) =
        partition_video(features, config.segment_threshold, config.min_segments);
    timings.partition_ns = elapsed_ns(clock);

    let clock = Instant::now();
    let ratio_config = CompressionConfig {
        adts_ratio: strategy.adts_ratio(config),
        ..config.clone()
    };
    let mut select_total = ratio_config.selection_total(target);
    if select_total == target && target < total {
        // keep one slot so the unselected tokens still have an output to land in
        select_total -= 1;
    }
    let quotas = frame_quotas(select_total, frames, n);
    let selection = adts_select(features, attn, &quotas, strategy.selection_rule())
        .map_err(|e| e.in_stage(Stage::Selection))?;
    timings.selection_ns = elapsed_ns(clock);
    let selected = selection.selected_count();

    let clock = Instant::now();
    let constraints = TstmConstraints {
        max_depth: config.max_depth,
        neighborhood: config.neighborhood,
    };
    let forests: Vec<MergeForest> = partition
        .segments
        .par_iter()
        .map(|seg| {
            let run = FrameRun {
                start_frame: seg.start_frame,
                positions: seg.frames().map(|f| selection.remainder_positions(f)).collect(),
            };
            match strategy {
                Strategy::TtmOnly => ttm_baseline(features, &run, config.merge_threshold),
                _ => build_forest(features, &run, config.merge_threshold, constraints),
            }
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage(Stage::Merging))?;
    let merged: Vec<Aggregated> = forests.iter().map(|f| aggregate_forest(f, features)).collect();
    timings.merging_ns = elapsed_ns(clock);
    let remainder: usize = forests.iter().map(|f| f.nodes().len()).sum();
    let trees: usize = merged.iter().map(Aggregated::len).sum();

    let clock = Instant::now();
    let merge_quota = target.saturating_sub(selected);
    let merged = if config.enforce_budget {
        enforce_budget(merged, merge_quota, features, config).map_err(|e| e.in_stage(Stage::Budget))?
    } else {
        merged
    };
    timings.budget_ns = elapsed_ns(clock);
    let merged_outputs: usize = merged.iter().map(Aggregated::len).sum();

    let mut outputs: Vec<(Vec<TokenRef>, Vec<f32>)> = selection
        .frames
        .iter()
        .flat_map(|f| f.selected.iter())
        .map(|&t| (vec![t], features.token(t).to_vec()))
        .collect();
    for part in merged {
        for (i, members) in part.provenance.into_iter().enumerate() {
            outputs.push((members, part.tokens[i * dim..(i + 1) * dim].to_vec()));
        }
    }
    outputs.sort_by(|a, b| a.0[0].cmp(&b.0[0]));

    let stats = StageStats {
        input_tokens: total,
        target_tokens: target,
        output_tokens: outputs.len(),
        segments: partition.len(),
        adts_selected: selected,
        trees_formed: trees,
        tstm_merged: remainder - trees,
        dpc_reduced: trees - merged_outputs,
        timings,
    };
    let mut tokens = Vec::with_capacity(outputs.len() * dim);
    let mut provenance = Vec::with_capacity(outputs.len());
    for (p, t) in outputs {
        provenance.push(p);
        tokens.extend(t);
    }
    let result = CompressionResult {
        strategy,
        input_shape: features.shape(),
        dim,
        tokens,
        provenance,
        stats,
    };
    let trace = Trace {
        transitions,
        partition,
        selection,
        forests,
    };
    Ok((result, trace))
}
