//! Cross-domain sequential recommendation by merging LoRA adapters.
//!
//! A small attention recommender is pretrained once and frozen. Low-rank
//! adapters are trained on a target domain and on target+source mixtures,
//! then merged by a weighted average of their factors. The crate also carries
//! the baseline merge operators, the ranking evaluation protocol and the
//! domain-divergence and loss-landscape instruments used to study them.

pub mod analysis;
pub mod checkpoint;
pub mod datagen;
mod error;
pub mod evaluator;
pub mod merger;
pub mod numkernel;
pub mod pipeline;
pub mod seqmodel;
pub mod trainer;

pub use checkpoint::{CheckpointError, Checkpointable};
pub use datagen::{
    CandidatePool, CandidateSet, DomainDataset, DomainId, Example, ItemId, SplitDataset, SyntheticConfig, UserSequence,
};
pub use error::{Error, Result};
pub use numkernel::{Matrix, RngStream};
pub use seqmodel::{Adaptation, BaseModel, DenseDelta, Layer, LoraAdapter, LoraConfig};
