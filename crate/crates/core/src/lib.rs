//! Post-training pruning for linear layers.
//!
//! Weights are scored against calibration Hessians, masked, and the
//! survivors reconstructed to minimize each layer's output error on the
//! calibration data. A global sparsity budget is split across layers by
//! their measured sensitivity.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocator;
pub mod calibration;
pub mod error;
pub mod fixture;
pub mod model_io;
pub mod pipeline;
pub mod pruner;
pub mod saliency;
pub mod tensor;

pub use allocator::{allocate, allocate_sparsity, layer_sensitivity, plan_uniform, AllocatorKind, LayerSensitivity, SparsityPlan};
pub use calibration::{invert_hessian, HessianState};
pub use error::{Error, Result};
pub use fixture::{gen_fixture, Fixture};
pub use model_io::{read_container, validate_manifest, write_container, DType, ModelManifest, TensorContainer};
pub use pipeline::{eval_model, run_pipeline, PruneConfig, PruneReport};
pub use pruner::{layer_recon_error, obs_downdate, prune_blocked, prune_iterative_obs, prune_only, reconstruct_closed_form, PruneMethod, PrunedLayer};
pub use saliency::{compute_saliency, select_mask_nm, select_mask_unstructured, Criterion, SaliencyMap, Scope, SparsityMask};
pub use tensor::{cholesky, matmul, solve_spd, spd_inverse, CholeskyFactor, Matrix};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MIXPRUNE_THREADS";
