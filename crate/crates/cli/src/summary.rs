//! JSON shapes shared by the CLI and the HTTP service, so both print the same
//! bytes for the same inference.

use promptseg::pipeline::InferenceResult;
use promptseg::prompt::{Lexicon, ParsedPrompt};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganRef {
    pub id: u8,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRef {
    pub anchor: u8,
    pub target: u8,
}

fn relations(pairs: &[(u8, u8)]) -> Vec<RelationRef> {
    pairs.iter().map(|&(anchor, target)| RelationRef { anchor, target }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub prompt: String,
    /// One 0/1 entry per class, background first.
    pub presence: Vec<u8>,
    pub organs: Vec<OrganRef>,
    pub relations: Vec<RelationRef>,
}

impl ParseSummary {
    pub fn new(parsed: &ParsedPrompt, lex: &Lexicon) -> Self {
        Self {
            prompt: parsed.raw_text.clone(),
            presence: parsed.presence.clone(),
            organs: parsed
                .mentioned()
                .into_iter()
                .map(|id| OrganRef {
                    id,
                    name: lex.name(id).to_string(),
                })
                .collect(),
            relations: relations(&parsed.relations),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_id: Option<String>,
    /// Voxel count per class id, background first.
    pub counts: Vec<usize>,
    /// `alpha * b_c` per class; zeros on the visual-only fallback.
    pub alpha_bias: Vec<f64>,
    pub fallback: bool,
    pub presence: Vec<u8>,
    pub relations: Vec<RelationRef>,
}

impl SegmentSummary {
    pub fn new(result: &InferenceResult, classes: usize, mask_id: Option<String>) -> Self {
        let mut counts = vec![0usize; classes];
        for &l in &result.mask.data {
            counts[l as usize] += 1;
        }
        Self {
            mask_id,
            counts,
            alpha_bias: result.alpha_bias.clone(),
            fallback: result.fallback_visual_only,
            presence: result.presence_used.clone(),
            relations: relations(&result.relations_used),
        }
    }
}
