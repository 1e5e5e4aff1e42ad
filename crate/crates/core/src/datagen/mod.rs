//! Multi-domain interaction data: generation, ingestion, filtering,
//! leave-one-out splitting, candidate sampling, mixing and instruction text.

mod candidates;
mod filter;
mod ingest;
mod instruction;
mod mix;
mod split;
mod synthetic;
mod types;

pub use candidates::{
    freeze_candidates, sample_candidates, sample_candidates_for_sequence, CandidatePool, CandidateSet,
    DEFAULT_NEGATIVES,
};
pub use filter::{five_core_filter, k_core_filter, FIVE_CORE};
pub use ingest::{
    ingest_interactions, read_interactions, read_titles, write_interactions, write_titles, IngestStats,
    INTERACTIONS_HEADER,
};
pub use instruction::{render_instruction, write_jsonl, InstructionExample, InstructionTemplate};
pub use mix::{cap_per_domain, mix_domains, mix_examples, MixMode, MixedSet};
pub use split::{leave_one_out_split, HeldOut, SplitDataset, SplitUser};
pub use synthetic::{
    domain_name, generate_synthetic, item_title, LatentWorld, SyntheticConfig, SyntheticCorpus, GENERIC_DOMAIN,
};
pub use types::{Catalog, DomainDataset, DomainId, Example, Interaction, ItemId, UserSequence};

/// Generates, five-core filters and splits every synthetic domain.
pub fn prepare_synthetic(config: &SyntheticConfig) -> crate::Result<PreparedCorpus> {
    let corpus = generate_synthetic(config)?;
    let domains = corpus
        .domains
        .iter()
        .map(|d| five_core_filter(d).and_then(|f| leave_one_out_split(&f)))
        .collect::<crate::Result<Vec<_>>>()?;
    let generic = corpus
        .generic
        .as_ref()
        .map(|d| five_core_filter(d).and_then(|f| leave_one_out_split(&f)))
        .transpose()?;
    Ok(PreparedCorpus {
        vocab_size: corpus.vocab_size(),
        corpus,
        domains,
        generic,
    })
}

/// A synthetic corpus after filtering and splitting.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub corpus: SyntheticCorpus,
    pub vocab_size: usize,
    pub domains: Vec<SplitDataset>,
    pub generic: Option<SplitDataset>,
}

impl PreparedCorpus {
    pub fn split(&self, id: &DomainId) -> Option<&SplitDataset> {
        self.domains.iter().find(|d| &d.domain == id)
    }
}
