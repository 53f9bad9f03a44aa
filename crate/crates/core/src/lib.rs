//! Morphology-aware diffusion for cross-embodiment dexterous grasp generation.
//!
//! The pipeline goes from URDF hand descriptions to grasp poses:
//!
//! 1. [`urdf`] parses a hand URDF into a [`urdf::KinematicTree`] and provides
//!    forward kinematics and collision-box surface sampling.
//! 2. [`canonical`] maps heterogeneous embodiments into a unified 24-slot
//!    canonical pose with an active-joint mask.
//! 3. [`morphology`] builds the per-joint feature matrix and encodes it with
//!    graph-biased self-attention into the morph representation conditioning
//!    the denoiser.
//! 4. [`object`] loads object geometry, produces grouped point-cloud features,
//!    and answers signed-distance queries for the physics losses.
//! 5. [`denoiser`] and [`diffusion`] implement the conditional denoising
//!    network and the DDPM machinery around it.
//! 6. [`losses`] implements the kinematics-weighted pose loss and the
//!    contact/penetration losses used during training.
//! 7. [`dataset`] and [`mutate`] provide dataset ingestion, the synthetic toy
//!    grasp generator, evaluation metrics, and hand-morphology variations.

pub mod canonical;
pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod embodiments;
pub mod error;
pub mod kinematics;
pub mod losses;
pub mod morphology;
pub mod mutate;
pub mod object;
pub mod params;
pub mod tape;
pub mod train;
pub mod urdf;

pub use error::{Error, Result};

/// Number of slots in the canonical hand pose.
pub const NUM_SLOTS: usize = 24;

/// Dimension of the flattened pose vector: translation (3) + 6-D rotation (6)
/// + canonical joint angles (24).
pub const POSE_DIM: usize = 33;
