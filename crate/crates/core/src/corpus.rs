//! Synthetic prompt corpus: 1–3 organs drawn from each source label map, with
//! optional synonym substitution and relational phrases.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::prompt::{Lexicon, ParsedPrompt};

#[derive(Clone, Debug, PartialEq)]
pub struct PromptCorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub organs_min: usize,
    pub organs_max: usize,
    pub relation_probability: f64,
    pub synonym_probability: f64,
    pub seed: u64,
}

impl Default for PromptCorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 650,
            n_val: 130,
            organs_min: 1,
            organs_max: 3,
            relation_probability: 0.2,
            synonym_probability: 0.3,
            seed: 0,
        }
    }
}

impl PromptCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::ConfigInvalid("corpus counts must be positive".into()));
        }
        if self.organs_min == 0 || self.organs_min > self.organs_max {
            return Err(Error::ConfigInvalid("organs per prompt must be a range within 1..".into()));
        }
        if !prob(self.relation_probability) || !prob(self.synonym_probability) {
            return Err(Error::ConfigInvalid("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub text: String,
    pub parsed: ParsedPrompt,
    /// Index of the label map the organs were drawn from.
    pub source: usize,
    pub split: Split,
}

const OPENERS: [&str; 5] = [
    "segment the",
    "create a segmentation mask of the",
    "delineate the",
    "outline the",
    "please segment the",
];

fn alias_for(lex: &Lexicon, id: u8, synonym_probability: f64, rng: &mut ChaCha8Rng) -> String {
    let organ = lex.organ(id).expect("organ ids come from the lexicon");
    if !organ.synonyms.is_empty() && rng.random_bool(synonym_probability) {
        organ.synonyms.choose(rng).cloned().unwrap_or_else(|| organ.canonical.clone())
    } else {
        organ.canonical.clone()
    }
}

fn join_organs(names: &[String], rng: &mut ChaCha8Rng) -> String {
    let with_article = |s: &String, rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            format!("the {s}")
        } else {
            s.clone()
        }
    };
    match names {
        [a] => a.clone(),
        [a, b] => format!("{a} and {}", with_article(b, rng)),
        _ => {
            let mut out = names[0].clone();
            for n in &names[1..names.len() - 1] {
                let _ = write!(out, ", {}", with_article(n, rng));
            }
            let _ = write!(out, ", and {}", with_article(&names[names.len() - 1], rng));
            out
        }
    }
}

fn make_entry(
    lex: &Lexicon,
    labels: &LabelMap,
    source: usize,
    split: Split,
    cfg: &PromptCorpusConfig,
    rng: &mut ChaCha8Rng,
) -> CorpusEntry {
    let present: Vec<u8> = labels
        .present_classes()
        .into_iter()
        .filter(|&c| lex.organ(c).is_some())
        .collect();
    let hi = cfg.organs_max.min(present.len());
    let lo = cfg.organs_min.min(hi);
    let k = rng.random_range(lo..=hi);
    let mut chosen: Vec<u8> = present.choose_multiple(rng, k).copied().collect();
    chosen.shuffle(rng);

    let names: Vec<String> = chosen
        .iter()
        .map(|&id| alias_for(lex, id, cfg.synonym_probability, rng))
        .collect();
    let mut text = format!("{} {}", OPENERS.choose(rng).unwrap(), join_organs(&names, rng));

    let mut presence = vec![0u8; lex.classes()];
    for &id in &chosen {
        presence[id as usize] = 1;
    }
    let mut relations = Vec::new();

    if !lex.relation_templates.is_empty() && present.len() >= 2 && rng.random_bool(cfg.relation_probability) {
        let target = *chosen.choose(rng).unwrap();
        let anchors: Vec<u8> = present.iter().copied().filter(|&c| c != target).collect();
        let anchor = *anchors.choose(rng).unwrap();
        // A family term as anchor when every member is present and none is the target.
        let family = lex
            .families
            .iter()
            .find(|f| f.ids.contains(&anchor) && f.ids.iter().all(|id| anchors.contains(id)));
        let (anchor_text, anchor_ids) = match family {
            Some(f) if rng.random_bool(0.5) => (f.canonical.clone(), f.ids.clone()),
            _ => (alias_for(lex, anchor, cfg.synonym_probability, rng), vec![anchor]),
        };
        let target_text = alias_for(lex, target, cfg.synonym_probability, rng);
        let template = lex.relation_templates.choose(rng).unwrap();
        let _ = write!(text, " and {}", template.render(&anchor_text, &target_text));
        for a in anchor_ids {
            relations.push((a, target));
        }
    }

    CorpusEntry {
        parsed: ParsedPrompt {
            presence,
            relations,
            raw_text: text.clone(),
        },
        text,
        source,
        split,
    }
}

/// Generates `n_train + n_val` prompts. Prompt `i` of each split draws its organs
/// from label map `i % labels.len()`.
pub fn generate_prompt_corpus(
    labels: &[LabelMap],
    lex: &Lexicon,
    cfg: &PromptCorpusConfig,
) -> Result<Vec<CorpusEntry>> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (i, l) in labels.iter().enumerate() {
        if !l.present_classes().iter().any(|&c| lex.organ(c).is_some()) {
            return Err(Error::EmptyForeground(i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_train + cfg.n_val);
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val)] {
        for i in 0..n {
            let source = i % labels.len();
            out.push(make_entry(lex, &labels[source], source, split, cfg, &mut rng));
        }
    }
    Ok(out)
}

/// One record per line: `prompt_text<TAB>presence_bits<TAB>relations`, where
/// relations are `anchor>target` pairs joined by `,` (empty when none).
pub fn format_corpus(entries: &[ParsedPrompt]) -> String {
    let mut out = String::new();
    for e in entries {
        let rels: Vec<String> = e.relations.iter().map(|(a, t)| format!("{a}>{t}")).collect();
        let _ = writeln!(out, "{}\t{}\t{}", e.raw_text, e.presence_bits(), rels.join(","));
    }
    out
}

pub fn parse_corpus(text: &str) -> Result<Vec<ParsedPrompt>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::ConfigInvalid(format!("corpus line {}: {m}", lineno + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad("expected three tab-separated columns"));
        }
        let presence = cols[1]
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                _ => Err(bad("presence bits must be 0/1")),
            })
            .collect::<Result<Vec<_>>>()?;
        let relations = if cols[2].is_empty() {
            Vec::new()
        } else {
            cols[2]
                .split(',')
                .map(|pair| {
                    let (a, t) = pair.split_once('>').ok_or_else(|| bad("relation must be a>t"))?;
                    Ok((
                        a.parse().map_err(|_| bad("bad anchor id"))?,
                        t.parse().map_err(|_| bad("bad target id"))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.push(ParsedPrompt {
            presence,
            relations,
            raw_text: cols[0].to_string(),
        });
    }
    Ok(out)
}

pub fn write_corpus(entries: &[ParsedPrompt], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_corpus(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<ParsedPrompt>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing};
    use crate::prompt::parse_prompt;

    fn map_with(classes: &[u8]) -> LabelMap {
        let mut m = LabelMap::zeros(Dims::new(1, 1, 16), Spacing::UNIT);
        for (i, &c) in classes.iter().enumerate() {
            m.data[i] = c;
        }
        m
    }

    #[test]
    fn deterministic_per_seed() {
        let maps = vec![map_with(&[1, 2, 3, 6, 7])];
        let lex = Lexicon::default();
        let cfg = PromptCorpusConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_prompt_corpus(&maps, &lex, &cfg).unwrap();
        let b = generate_prompt_corpus(&maps, &lex, &cfg).unwrap();
        let texts = |v: &[CorpusEntry]| format_corpus(&v.iter().map(|e| e.parsed.clone()).collect::<Vec<_>>());
        assert_eq!(texts(&a), texts(&b));
        assert_eq!(a.len(), 780);
        assert_eq!(a.iter().filter(|e| e.split == Split::Val).count(), 130);
    }

    #[test]
    fn canonical_only_without_synonyms_or_relations() {
        let maps = vec![map_with(&[1, 2, 3, 6, 7])];
        let lex = Lexicon::default();
        let cfg = PromptCorpusConfig {
            relation_probability: 0.0,
            synonym_probability: 0.0,
            seed: 3,
            ..Default::default()
        };
        let synonyms: Vec<&String> = lex.organs.iter().flat_map(|o| &o.synonyms).collect();
        for e in generate_prompt_corpus(&maps, &lex, &cfg).unwrap() {
            assert!(e.parsed.relations.is_empty());
            assert!(!synonyms.iter().any(|s| e.text.contains(s.as_str())), "{}", e.text);
        }
    }

    #[test]
    fn single_organ_map_always_mentions_it() {
        let maps = vec![map_with(&[6])];
        let cfg = PromptCorpusConfig {
            organs_min: 1,
            organs_max: 1,
            n_train: 40,
            n_val: 10,
            relation_probability: 1.0,
            ..Default::default()
        };
        for e in generate_prompt_corpus(&maps, &Lexicon::default(), &cfg).unwrap() {
            assert_eq!(e.parsed.mentioned(), vec![6]);
            assert!(e.parsed.relations.is_empty());
        }
    }

    #[test]
    fn empty_foreground_rejected() {
        let maps = vec![map_with(&[1]), map_with(&[])];
        let err = generate_prompt_corpus(&maps, &Lexicon::default(), &PromptCorpusConfig::default());
        assert!(matches!(err, Err(Error::EmptyForeground(1))));
    }

    #[test]
    fn parse_reproduces_generated_records() {
        let maps = vec![map_with(&[1, 2, 3, 6, 7]), map_with(&[4, 5, 8, 9, 10, 11, 12, 13])];
        let lex = Lexicon::default();
        let cfg = PromptCorpusConfig {
            relation_probability: 0.5,
            synonym_probability: 0.5,
            seed: 99,
            ..Default::default()
        };
        let corpus = generate_prompt_corpus(&maps, &lex, &cfg).unwrap();
        for e in &corpus {
            assert_eq!(parse_prompt(&e.text, &lex), e.parsed, "{}", e.text);
            for c in e.parsed.mentioned() {
                assert!(maps[e.source].data.contains(&c));
            }
        }
        assert!(corpus.iter().any(|e| !e.parsed.relations.is_empty()));
    }

    #[test]
    fn corpus_file_round_trip() {
        let lex = Lexicon::default();
        let records = vec![
            parse_prompt("segment the liver", &lex),
            parse_prompt("segment the spleen and the region around the kidney that belongs to the liver", &lex),
        ];
        let text = format_corpus(&records);
        assert!(text.lines().nth(1).unwrap().ends_with("\t2>6,3>6"));
        assert_eq!(parse_corpus(&text).unwrap(), records);
    }
}
