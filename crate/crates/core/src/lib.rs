//! Conservative lower bounds on a language model's parameter count from its
//! next-word accuracy on popular, widely memorized texts.
//!
//! The crate measures per-(text, prefix length) accuracy profiles through a
//! chat-completions endpoint (or a simulator), then infers size two ways:
//! a first-principal-component index mapped through an exponential scaling
//! law fitted on dense reference models, and a blocked sign-permutation test
//! against those references. The larger of the two bounds is reported.

pub mod assumption;
pub mod client;
pub mod corpus;
pub mod error;
pub mod latent;
pub mod pairwise;
pub mod pipeline;
pub mod profiles;
pub mod synthetic;

pub use client::{Architecture, ModelSpec, PromptTemplate, QueryRecord, Role};
pub use corpus::{PrefixSample, SamplingPlan, TextDocument, TextKind, TokenRule};
pub use error::{Error, Result};
pub use profiles::{AccuracyCell, AccuracyProfile, BaselineCurve};
pub use latent::{LatentModelSet, ScalingLawFit, SizeEstimate};
pub use pairwise::{BlockScores, PairwiseResult};
pub use pipeline::report::{BoundSource, LowerBoundReport, TargetBound};
