//! Unsupervised metrics for multi-turn, objective-driven human/LLM interactions.
//!
//! Three metrics are provided on top of a pluggable inference gateway:
//!
//! * [`clustering`]: LLM-guided goal clustering (k-means over goal-summary
//!   embeddings, followed by LLM-adjudicated cluster merging), plus stability
//!   analysis, unseen-sample assignment and an LLM-only labeling baseline.
//! * [`completion`]: completion labeling by continuing the conversation under a
//!   model of completed interactions and detecting an end tag.
//! * [`rtree`]: response trees built from top-k token logprobs, and the
//!   uncertainty statistics derived from them.
//!
//! [`gateway`] hides the inference backends (HTTP or a deterministic mock) and
//! [`pipeline`] drives everything from a single config file.

pub mod clustering;
pub mod completion;
pub mod config;
pub mod exec;
pub mod gateway;
pub mod interaction;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod rtree;

pub use interaction::{Interaction, Role, SftPair, Turn};

/// Version string recorded in run manifests.
pub const TOOL_VERSION: &str = concat!("goalgauge ", env!("CARGO_PKG_VERSION"));
