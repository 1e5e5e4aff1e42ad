//! Renders next-item examples as textual instructions.
//!
//! The numeric model consumes item ids directly; rendering exists for export
//! and mirrors how an instruction-tuned recommender would see the data:
//! history titles, a shuffled candidate block and a task description, with a
//! ranked list of titles as the answer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::candidates::CandidateSet;
use super::types::{Catalog, DomainId, ItemId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub preamble: String,
    pub history_header: String,
    pub empty_history: String,
    pub candidate_header: String,
    pub task: String,
}

impl Default for InstructionTemplate {
    fn default() -> Self {
        Self {
            preamble: "You are a recommender system for the {domain} domain.".into(),
            history_header: "The user has interacted with the following items, in chronological order:".into(),
            empty_history: "(no previous interactions)".into(),
            candidate_header: "Candidate items:".into(),
            task: "Rank the candidate items by how likely the user is to interact with them next. \
                   Answer with a ranked list of item titles, most likely first."
                .into(),
        }
    }
}

/// Field order is the JSON-lines schema: `input`, `output`, `domain`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub input: String,
    pub output: String,
    pub domain: String,
}

fn title(catalog: &Catalog, item: ItemId) -> Result<&str> {
    catalog.title(item).ok_or(Error::MissingTitle(item))
}

pub fn render_instruction(
    domain: &DomainId,
    prefix: &[ItemId],
    candidates: &CandidateSet,
    catalog: &Catalog,
    template: &InstructionTemplate,
) -> Result<InstructionExample> {
    let mut input = String::new();
    input.push_str(&template.preamble.replace("{domain}", domain.as_str()));
    input.push('\n');
    input.push_str(&template.history_header);
    input.push('\n');
    if prefix.is_empty() {
        input.push_str(&template.empty_history);
        input.push('\n');
    }
    for (i, &item) in prefix.iter().enumerate() {
        input.push_str(&format!("{}. {}\n", i + 1, title(catalog, item)?));
    }
    input.push_str(&template.candidate_header);
    input.push('\n');
    for &item in &candidates.order {
        input.push_str(&format!("- {}\n", title(catalog, item)?));
    }
    input.push_str(&template.task);

    let mut ranked = vec![candidates.ground_truth];
    ranked.extend(
        candidates
            .order
            .iter()
            .copied()
            .filter(|&i| i != candidates.ground_truth),
    );
    let output = ranked
        .iter()
        .enumerate()
        .map(|(i, &item)| title(catalog, item).map(|t| format!("{}. {t}", i + 1)))
        .collect::<Result<Vec<_>>>()?
        .join("\n");

    Ok(InstructionExample {
        input,
        output,
        domain: domain.to_string(),
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(examples: &[InstructionExample], mut out: W) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Catalog, CandidateSet) {
        let mut catalog = Catalog::default();
        for (i, t) in ["Trail Shoes", "Water Bottle", "Yoga Mat", "Tennis Balls", "Headband"]
            .iter()
            .enumerate()
        {
            catalog.insert(i as u32, *t);
        }
        let set = CandidateSet {
            user_id: "u1".into(),
            ground_truth: 2,
            negatives: vec![3, 4],
            order: vec![4, 2, 3],
            seed: 11,
        };
        (catalog, set)
    }

    #[test]
    fn empty_history_marker() {
        let (catalog, set) = setup();
        let ex = render_instruction(&"sports".into(), &[], &set, &catalog, &InstructionTemplate::default()).unwrap();
        assert!(ex.input.contains("(no previous interactions)"));
        assert!(ex.input.contains("- Yoga Mat"));
        assert!(ex.output.starts_with("1. Yoga Mat"));
    }

    #[test]
    fn missing_title_names_item() {
        let (catalog, set) = setup();
        let err =
            render_instruction(&"sports".into(), &[42], &set, &catalog, &InstructionTemplate::default()).unwrap_err();
        assert!(matches!(err, Error::MissingTitle(42)));
    }

    #[test]
    fn deterministic_bytes() {
        let (catalog, set) = setup();
        let t = InstructionTemplate::default();
        let a = render_instruction(&"sports".into(), &[0, 1], &set, &catalog, &t).unwrap();
        let b = render_instruction(&"sports".into(), &[0, 1], &set, &catalog, &t).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_jsonl(&[a], &mut ba).unwrap();
        write_jsonl(&[b], &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert!(String::from_utf8(ba).unwrap().starts_with("{\"input\":"));
    }
}
