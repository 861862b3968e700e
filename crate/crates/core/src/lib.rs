//! Adaptive style incorporation kernels.
//!
//! The crate is organised bottom-up:
//!
//! * [`numeric`] dense row-major matrices, softmax and the seeded [`Rng`].
//! * [`sica`] siamese cross-attention: one shared query, two key/value tracks.
//! * [`adablending`] head and spatial mask extraction, mask fusion and AdaIN blending.
//! * [`ddim`] noise schedule, closed-form forward noising and deterministic DDIM stepping.
//! * [`harness`] seeded synthetic pipeline, metrics, sweeps and file outputs.
//! * [`dump`] the `ASIT` tensor dump format, PGM mask rendering and CSV helpers.

pub mod adablending;
pub mod ddim;
pub mod dump;
mod error;
pub mod harness;
pub mod numeric;
pub mod selftest;
pub mod sica;

pub use adablending::{
    adain, asi_layer, blend, covariance, extract_head_mask, extract_spatial_mask, fuse_masks,
    head_distance, head_distances, AsiOutput, BlendConfig, Fusion, HeadMask, MaskBlock,
};
pub use ddim::{
    ddim_generate, ddim_invert, ddim_step, forward_noise, make_schedule, predict_x0, LatentState,
    NoiseSchedule, OracleDenoiser,
};
pub use error::{AsiError, Result};
pub use harness::{run_pipeline, sweep, synth_inputs, ExperimentConfig, RunReport, SweepParam};
pub use numeric::{matmul, randn_matrix, softmax_rows, Matrix, Rng};
pub use sica::{
    project_kv, project_q, siamese_attend, single_track_attend, AttentionParams, FeatureMap,
    PromptEmbedding,
};
