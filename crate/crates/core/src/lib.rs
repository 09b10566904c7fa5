//! Training-free visual-token compression for video language models.
//!
//! Given per-frame visual features `F × N_v × d` and, optionally, encoder
//! attention, [`flashvid_compress`] keeps a diverse, attention-weighted subset
//! of each frame's tokens and merges the rest into spatiotemporal trees whose
//! members are mean-pooled. The output holds at most the planned token budget
//! and records, for every output token, the inputs it aggregates.
//!
//! ```
//! use flashvid::{flashvid_compress, generate, CompressionConfig, SynthSpec};
//!
//! let spec = SynthSpec { frames: 8, tokens: 49, dim: 32, ..Default::default() };
//! let (features, attention) = generate(&spec).unwrap();
//! let result = flashvid_compress(&features, &attention, &CompressionConfig::default()).unwrap();
//! assert_eq!(result.len(), 49); // round(1.25 · 0.10 · 392)
//! result.verify(&features).unwrap();
//! ```

pub mod adts;
pub mod budget;
pub mod canonical;
pub mod config;
pub mod error;
pub mod eval;
pub mod npy;
pub mod partition;
pub mod pipeline;
pub mod result;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod tstm;

pub use adts::{adts_select, calibrate_distance, mmdp_select, AdtsSelection, SelectionRule};
pub use budget::{budget_align, dpcknn_reduce, flops_gqa, flops_standard, inner_llm_prune, BudgetPlan, ModelShape};
pub use config::{Budget, CompressionConfig};
pub use error::{Error, Result, Stage};
pub use eval::{evaluate, EvalReport};
pub use npy::{load_attention, load_features, load_tensor, Tensor, TensorKind};
pub use partition::{dyseg_partition, Partition, Segment};
pub use pipeline::{flashvid_compress, run_strategy, run_traced, Strategy, Trace};
pub use result::{load_result, save_result, CompressionResult, StageStats};
pub use synth::{generate, SynthSpec};
pub use tensor::{AttentionStack, TokenRef, VideoFeatures};
pub use tstm::{aggregate_forest, build_forest, ttm_baseline, MergeForest, TstmConstraints};
