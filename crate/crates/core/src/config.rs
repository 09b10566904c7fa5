//! Tunables for the compression pipeline.

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::budget::{exact_ratio, floor_count, round_half_up};
use crate::error::{Error, Result};

pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_ADTS_RATIO: f64 = 0.7;
pub const DEFAULT_EXPANSION_FACTOR: f64 = 1.25;
pub const DEFAULT_SEGMENT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_MIN_SEGMENTS: usize = 8;
pub const DEFAULT_PRUNE_LAYER: usize = 20;
/// Decoder depth of the 7B LLM behind LLaVA-OneVision / LLaVA-Video.
pub const DEFAULT_NUM_LAYERS: usize = 28;
pub const DEFAULT_RETENTION: f64 = 0.10;

/// How the before-LLM token count `M` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Retention ratio `R`: `M = round(f_e · R · F · N_v)`.
    Retention(f64),
    /// `M` given directly.
    Tokens(usize),
    /// `M = F · N_v`; nothing is trimmed.
    Unlimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// `T_τ`: minimum cosine similarity for a merge link.
    pub merge_threshold: f64,
    /// `α`: share of the budget filled by diversity selection.
    pub adts_ratio: f64,
    /// `f_e`: before-LLM tokens over the average per-layer budget.
    pub expansion_factor: f64,
    /// `S_τ`: transition similarity below which a segment boundary is cut.
    pub segment_threshold: f64,
    /// `M_s`: minimum number of segments.
    pub min_segments: usize,
    /// `K`: LLM layer at which inner pruning happens; 0 disables it.
    pub prune_layer: usize,
    /// `L`: number of LLM layers.
    pub num_layers: usize,
    pub budget: Budget,
    /// Maximum merge-tree depth; `None` is unlimited.
    pub max_depth: Option<usize>,
    /// Maximum `|Δpos|` between linked tokens; `None` is unlimited.
    pub neighborhood: Option<usize>,
    pub aggregation: Aggregation,
    /// Trim merged tokens with DPC-kNN so the output hits the budget exactly.
    pub enforce_budget: bool,
    /// Neighbour count for DPC-kNN density; `None` means `min(5, n - 1)`.
    pub dpc_knn: Option<usize>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            adts_ratio: DEFAULT_ADTS_RATIO,
            expansion_factor: DEFAULT_EXPANSION_FACTOR,
            segment_threshold: DEFAULT_SEGMENT_THRESHOLD,
            min_segments: DEFAULT_MIN_SEGMENTS,
            prune_layer: DEFAULT_PRUNE_LAYER,
            num_layers: DEFAULT_NUM_LAYERS,
            budget: Budget::Retention(DEFAULT_RETENTION),
            max_depth: None,
            neighborhood: None,
            aggregation: Aggregation::Mean,
            enforce_budget: true,
            dpc_knn: None,
        }
    }
}

fn in_range(field: &'static str, v: f64, lo_open: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v > lo_open && v <= hi {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} is outside ({lo_open}, {hi}]")))
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        in_range("merge_threshold", self.merge_threshold, 0.0, 1.0)?;
        if !(self.adts_ratio.is_finite() && (0.0..=1.0).contains(&self.adts_ratio)) {
            return Err(Error::config(
                "adts_ratio",
                format!("{} is outside [0, 1]", self.adts_ratio),
            ));
        }
        if !(self.expansion_factor.is_finite() && self.expansion_factor >= 1.0) {
            return Err(Error::config(
                "expansion_factor",
                format!("{} must be a finite value >= 1", self.expansion_factor),
            ));
        }
        in_range("segment_threshold", self.segment_threshold, 0.0, 1.0)?;
        if self.min_segments == 0 {
            return Err(Error::config("min_segments", "must be at least 1"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be at least 1"));
        }
        if self.prune_layer > 0 {
            if self.prune_layer >= self.num_layers {
                return Err(Error::config(
                    "prune_layer",
                    format!("{} must be below num_layers {}", self.prune_layer, self.num_layers),
                ));
            }
            let fe = exact_ratio(self.expansion_factor);
            if fe * BigRational::from_integer(self.prune_layer.into())
                >= BigRational::from_integer(self.num_layers.into())
            {
                return Err(Error::config(
                    "expansion_factor",
                    format!(
                        "f_e·K = {}·{} must stay below L = {}",
                        self.expansion_factor, self.prune_layer, self.num_layers
                    ),
                ));
            }
        }
        match self.budget {
            Budget::Retention(r) => in_range("budget.retention", r, 0.0, 1.0)?,
            Budget::Tokens(0) => return Err(Error::config("budget.tokens", "must be at least 1")),
            Budget::Tokens(_) | Budget::Unlimited => {}
        }
        if self.max_depth == Some(0) {
            return Err(Error::config("max_depth", "must be at least 1 when set"));
        }
        if self.neighborhood == Some(0) {
            return Err(Error::config("neighborhood", "must be at least 1 when set"));
        }
        if self.dpc_knn == Some(0) {
            return Err(Error::config("dpc_knn", "must be at least 1 when set"));
        }
        Ok(())
    }

    /// Before-LLM token target `M` for a clip with `total` tokens, clamped to `1..=total`.
    pub fn target_tokens(&self, total: usize) -> usize {
        let m = match self.budget {
            Budget::Retention(r) => {
                let exact = exact_ratio(self.expansion_factor)
                    * exact_ratio(r)
                    * BigRational::from_integer(total.into());
                round_half_up(exact)
            }
            Budget::Tokens(m) => m,
            Budget::Unlimited => total,
        };
        m.clamp(1, total.max(1))
    }

    /// Token count handed to diversity selection: `⌊α·M⌋`.
    pub fn selection_total(&self, target: usize) -> usize {
        let exact = exact_ratio(self.adts_ratio) * BigRational::from_integer(target.into());
        floor_count(&exact)
    }
}
