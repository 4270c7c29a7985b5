//! Desk-scale disentangled multi-modal prompt learning.
//!
//! Small coupled text/vision transformer encoders with multi-stage deep
//! prompting are trained so that linear heads split each modality's joint
//! embedding into an invariant part (aligned contrastively across modalities)
//! and a spurious part (regularized toward a uniform class posterior), with a
//! class-conditioned HSIC penalty keeping the two parts independent. A
//! deterministic synthetic benchmark with controllable spurious correlation
//! makes the robustness behavior of the objectives measurable on a laptop:
//! base-to-novel generalization, worst-group accuracy, and domain-shift
//! evaluation all run from the `dimple` CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod heads;
pub mod independence;
pub mod model;
pub mod gradcheck;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, TensorId};
