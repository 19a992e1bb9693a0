//! Directory layout shared by `gen-data`, the trainers and the service.
//!
//! ```text
//! <root>/images/<case>.vol       raw HU volume
//! <root>/labels/<case>.vol       ground-truth label map
//! <root>/specs/<case>.phantom    phantom spec the case was drawn from
//! <root>/models/<case>.model     intensity classifier for raw-volume inference
//! <root>/logits/<case>.vol       frozen oracle logits (optional)
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use promptseg::embedding::SplitMix64;

pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";
pub const SPECS: &str = "specs";
pub const MODELS: &str = "models";
pub const LOGITS: &str = "logits";

#[derive(Clone, Debug)]
pub struct CasePaths {
    pub name: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub spec: PathBuf,
    pub model: PathBuf,
    pub logits: PathBuf,
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

pub fn case_paths(root: &Path, name: &str) -> CasePaths {
    CasePaths {
        name: name.to_string(),
        image: root.join(IMAGES).join(format!("{name}.vol")),
        labels: root.join(LABELS).join(format!("{name}.vol")),
        spec: root.join(SPECS).join(format!("{name}.phantom")),
        model: root.join(MODELS).join(format!("{name}.model")),
        logits: root.join(LOGITS).join(format!("{name}.vol")),
    }
}

/// Case names with a `.vol` in `<root>/<sub>`, sorted.
pub fn list_cases(root: &Path, sub: &str) -> Result<Vec<String>> {
    let dir = root.join(sub);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "vol") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no .vol files in {}", dir.display());
    }
    Ok(out)
}

/// Independent per-case seed derived from a run seed.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::new(seed ^ (index as u64).wrapping_mul(0xd134_2543_de82_ef95)).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_seeds_differ_and_repeat() {
        let a: Vec<u64> = (0..64).map(|i| case_seed(5, i)).collect();
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len());
        assert_eq!(a, (0..64).map(|i| case_seed(5, i)).collect::<Vec<_>>());
    }

    #[test]
    fn names_sort_numerically() {
        assert!(case_name(9) < case_name(10));
        assert_eq!(case_paths(Path::new("/d"), "case_001").logits, PathBuf::from("/d/logits/case_001.vol"));
    }
}
