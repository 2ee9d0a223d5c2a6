//! Outlier-weighted layerwise sparsity for LLaMA-style decoders.
//!
//! The toolkit scores weights by input-feature norm times magnitude,
//! measures each layer's share of outlier scores, turns that profile into
//! per-layer sparsity (or N:M, rank, bit-width) targets, prunes, and
//! evaluates the result.

pub mod alloc;
pub mod calib;
pub mod compress;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkernel;
pub mod outlier;
pub mod pipeline;
pub mod prune;

pub use alloc::{allocate_sparsity, Scheme, SparsityPlan};
pub use calib::{CalibrationStats, TokenCorpus};
pub use error::{OwlError, Result};
pub use eval::{perplexity, EvalReport};
pub use model::{Checkpoint, LayerId, ModelConfig, Projection};
pub use numkernel::{Matrix, SeededRng};
pub use outlier::{build_profile, layer_outlier_ratio, Granularity, OutlierProfile};
pub use pipeline::{run_pipeline, RunConfig};
pub use prune::{build_mask, Grouping, Metric, PruneMask};
