//! Meta-update transfer learning for cross-subject EEG-like classification.
//!
//! A convolutional representation network (φ) and a fully connected
//! prediction network (θ) are trained in three phases: φ is pretrained on
//! pooled source subjects, then an episodic dual-learner loop updates θ on a
//! base split and {φ, θ} on a meta split of multi-subject tasks, and finally
//! the meta-learned model is adapted to a new subject from a small budget of
//! labeled trials.

// `Real` may be f32 or f64, so casts that are no-ops in one build are
// needed in the other; negated comparisons deliberately treat NaN as invalid.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod meta_trainer;
pub mod network;
pub mod optim;
mod rng;
pub mod synth;
pub mod tensor;

pub use autograd::{GradientMap, Graph, Var};
pub use error::{Error, Result};
pub use kernels::Mode;
pub use network::{ArchConfig, GradScope, ParameterSet, RepParams};
pub use tensor::{Real, Tensor};
