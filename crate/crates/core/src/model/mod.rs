//! The CARE network: backbone, general and per-domain specific elaborators,
//! classifier and relevance evaluator.

mod config;
mod forward;
mod params;
mod persist;

pub use config::{CareConfig, ShapePlan, WeightMode};
pub use forward::{
    ablated_forward, approximate_specific, classify, elaborate, elaborate_traced, evaluate_relevance, extract_base,
    forward_seen, forward_unseen, forward_unseen_traced, variant_forward_seen, weighted_sum, BaseFeature, ElabFeature,
    Elaborator, FeatureKind, RelevanceWeights, UnseenTrace, Variant,
};
pub use params::{
    AttentionSlots, BoundParams, CareParams, ConvSlots, ElaboratorSlots, Layout, LinearSlots, ParamEntry, ParamGroup,
    RelevanceSlots, ATTENTION_LAYERS,
};
pub use persist::config_mismatches;
