//! Conditions: per-image topic mixtures learned by a truncated hierarchical
//! Dirichlet process over visual-word documents, optionally augmented with
//! strategy and performance tokens so topics line up with competency
//! regimes.

mod codebook;
mod document;
mod hdp;

pub use codebook::{
    build_codebook, build_codebook_from_descriptors, patch_descriptors, Codebook, Descriptor,
    GRID_COLS, GRID_ROWS, TILE_HEIGHT, TILE_WIDTH,
};
pub use document::{
    CompetencyInfo, Document, ErrorTerciles, PerfLevel, TokenLabel, Tokenizer, Vocabulary,
    VISUAL_TOKENS_PER_DOC,
};
pub use hdp::{
    fit_hdp, BetaMode, ConditionModel, ConditionVector, HdpConfig, HdpSampler, NoveltyScore,
    TopicTerm,
};
