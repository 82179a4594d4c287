//! Collaborative action recognition for unseen domains.
//!
//! A shared general elaborator and one specific elaborator per seen domain
//! refine a backbone feature; for an input from a domain never seen in
//! training, a relevance evaluator scores how much each seen domain's specific
//! feature should contribute, and the weighted average stands in for the
//! missing specific feature. The relevance evaluator is meta-trained by
//! holding out one seen domain at a time.
//!
//! The crate also carries the evaluation toolkit used around such models:
//! multi-label mAP with head/middle/tail segments, temporal-grounding recall,
//! PCK for 23-keypoint poses, annotation file formats and a stratified
//! multi-label splitter, plus a deterministic synthetic multi-domain benchmark.

pub mod annotations;
pub mod checks;
pub mod error;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{CareConfig, CareParams, Variant, WeightMode};
pub use tensor::{Graph, Tensor, Var};
