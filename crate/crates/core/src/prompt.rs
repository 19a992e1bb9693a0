//! Organ lexicon and prompt parsing: presence vectors and anchor/target relations.
//!
//! Matching works on lowercase alphanumeric word tokens. At each position the
//! longest alias (in words) wins, so "right kidney" is consumed before the bare
//! family term "kidney" could match. Family terms ("kidney", "renal structure",
//! "adrenal gland") name several classes at once.
//!
//! Organ mentions that fill the anchor slot of a relation do not enter the
//! presence vector: "the region around the kidney that belongs to the liver"
//! asks for liver voxels, using the kidneys only as a spatial reference.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrganClass {
    pub id: u8,
    pub canonical: String,
    pub synonyms: Vec<String>,
}

/// A term covering several organ classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyTerm {
    pub ids: Vec<u8>,
    pub canonical: String,
    pub synonyms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum TemplatePart {
    Words(Vec<String>),
    Anchor,
    Target,
}

/// Relation pattern such as `region/area around the {ANCHOR} that belongs to the {TARGET}`.
/// `/` separates alternative words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationTemplate {
    pub source: String,
    parts: Vec<TemplatePart>,
}

impl RelationTemplate {
    pub fn parse(source: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for word in source.split_whitespace() {
            match word {
                "{ANCHOR}" => parts.push(TemplatePart::Anchor),
                "{TARGET}" => parts.push(TemplatePart::Target),
                alts => parts.push(TemplatePart::Words(
                    alts.split('/').map(|w| w.to_lowercase()).collect(),
                )),
            }
        }
        let anchors = parts.iter().filter(|p| **p == TemplatePart::Anchor).count();
        let targets = parts.iter().filter(|p| **p == TemplatePart::Target).count();
        if anchors != 1 || targets != 1 {
            return Err(Error::ConfigInvalid(format!(
                "relation template needs exactly one {{ANCHOR}} and one {{TARGET}}: {source:?}"
            )));
        }
        Ok(Self {
            source: source.to_string(),
            parts,
        })
    }

    /// Renders the template with the given alias strings, using the first alternative of each word slot.
    pub fn render(&self, anchor: &str, target: &str) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                TemplatePart::Words(alts) => alts[0].as_str(),
                TemplatePart::Anchor => anchor,
                TemplatePart::Target => target,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug)]
struct Alias {
    words: Vec<String>,
    ids: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    pub organs: Vec<OrganClass>,
    pub families: Vec<FamilyTerm>,
    pub relation_templates: Vec<RelationTemplate>,
    aliases: Vec<Alias>,
    classes: usize,
}

pub const DEFAULT_LEXICON: &str = "\
# id|canonical|synonyms (comma separated); an id list marks a family term
1|spleen|spleenic organ,splenic organ
2|right kidney|right renal structure,right renal organ
3|left kidney|left renal structure,left renal organ
4|gallbladder|gall bladder,biliary vesicle
5|esophagus|oesophagus,gullet
6|liver|hepatic organ,hepatic tissue
7|stomach|gastric organ,gastric chamber
8|aorta|aortic vessel,abdominal aorta
9|inferior vena cava|ivc,caval vein
10|portal and splenic vein|portal vein,splenic vein,portal venous system
11|pancreas|pancreatic organ,pancreatic gland
12|right adrenal gland|right suprarenal gland
13|left adrenal gland|left suprarenal gland
2,3|kidney|kidneys,renal structure,renal structures
12,13|adrenal gland|adrenal glands,suprarenal gland,suprarenal glands
relation|region/area around the {ANCHOR} that belongs to the {TARGET}
relation|the {TARGET} near the {ANCHOR}
";

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Lexicon {
    pub fn default_btcv() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("built-in lexicon parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut organs = Vec::new();
        let mut families = Vec::new();
        let mut templates = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::ConfigInvalid(format!("lexicon line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix("relation|") {
                templates.push(RelationTemplate::parse(rest.trim())?);
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 3 {
                return Err(bad("expected id|canonical|synonyms"));
            }
            let ids = fields[0]
                .split(',')
                .map(|s| s.trim().parse::<u8>().map_err(|_| bad("bad id")))
                .collect::<Result<Vec<_>>>()?;
            let canonical = fields[1].trim().to_lowercase();
            let synonyms: Vec<String> = fields[2]
                .split(',')
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect();
            if canonical.is_empty() {
                return Err(bad("empty canonical name"));
            }
            if ids.iter().any(|&id| id == 0) {
                return Err(bad("class 0 is reserved for background"));
            }
            if ids.len() == 1 {
                organs.push(OrganClass {
                    id: ids[0],
                    canonical,
                    synonyms,
                });
            } else {
                families.push(FamilyTerm {
                    ids,
                    canonical,
                    synonyms,
                });
            }
        }
        Self::build(organs, families, templates)
    }

    pub fn build(
        organs: Vec<OrganClass>,
        families: Vec<FamilyTerm>,
        relation_templates: Vec<RelationTemplate>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for o in &organs {
            if !ids.insert(o.id) {
                return Err(Error::ConfigInvalid(format!("duplicate organ id {}", o.id)));
            }
        }
        for f in &families {
            if let Some(id) = f.ids.iter().find(|id| !ids.contains(id)) {
                return Err(Error::ConfigInvalid(format!(
                    "family {:?} references unknown id {id}",
                    f.canonical
                )));
            }
        }
        let mut aliases: Vec<Alias> = Vec::new();
        let mut push = |text: &str, ids: &[u8]| -> Result<()> {
            let w = words(text);
            if w.is_empty() {
                return Err(Error::ConfigInvalid(format!("alias {text:?} has no words")));
            }
            if let Some(prev) = aliases.iter().find(|a| a.words == w) {
                if prev.ids != ids {
                    return Err(Error::ConfigInvalid(format!("alias {text:?} maps to two classes")));
                }
                return Ok(());
            }
            aliases.push(Alias {
                words: w,
                ids: ids.to_vec(),
            });
            Ok(())
        };
        for o in &organs {
            push(&o.canonical, &[o.id])?;
            for s in &o.synonyms {
                push(s, &[o.id])?;
            }
        }
        for f in &families {
            push(&f.canonical, &f.ids)?;
            for s in &f.synonyms {
                push(s, &f.ids)?;
            }
        }
        // Longest first; ties keep declaration order.
        aliases.sort_by(|a, b| b.words.len().cmp(&a.words.len()));
        let classes = organs.iter().map(|o| o.id as usize).max().unwrap_or(0) + 1;
        Ok(Self {
            organs,
            families,
            relation_templates,
            aliases,
            classes,
        })
    }

    /// Number of classes including background.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn organ(&self, id: u8) -> Option<&OrganClass> {
        self.organs.iter().find(|o| o.id == id)
    }

    pub fn name(&self, id: u8) -> &str {
        if id == 0 {
            return "background";
        }
        self.organ(id).map(|o| o.canonical.as_str()).unwrap_or("unknown")
    }

    pub fn family_for(&self, ids: &[u8]) -> Option<&FamilyTerm> {
        self.families.iter().find(|f| f.ids == ids)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for o in &self.organs {
            let _ = writeln!(out, "{}|{}|{}", o.id, o.canonical, o.synonyms.join(","));
        }
        for f in &self.families {
            let ids: Vec<String> = f.ids.iter().map(u8::to_string).collect();
            let _ = writeln!(out, "{}|{}|{}", ids.join(","), f.canonical, f.synonyms.join(","));
        }
        for t in &self.relation_templates {
            let _ = writeln!(out, "relation|{}", t.source);
        }
        out
    }

    fn tokenize(&self, text: &str) -> Vec<Token> {
        let w = words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < w.len() {
            let hit = self
                .aliases
                .iter()
                .find(|a| w.len() - i >= a.words.len() && w[i..i + a.words.len()] == a.words[..]);
            match hit {
                Some(a) => {
                    out.push(Token::Organ(a.ids.clone()));
                    i += a.words.len();
                }
                None => {
                    out.push(Token::Word(w[i].clone()));
                    i += 1;
                }
            }
        }
        out
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::default_btcv()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Word(String),
    Organ(Vec<u8>),
}

/// Presence vector plus relations parsed from one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedPrompt {
    /// One entry per class; index 0 (background) is always 0.
    pub presence: Vec<u8>,
    /// `(anchor_id, target_id)` pairs in order of appearance.
    pub relations: Vec<(u8, u8)>,
    pub raw_text: String,
}

impl ParsedPrompt {
    pub fn mentioned(&self) -> Vec<u8> {
        self.presence
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1)
            .map(|(c, _)| c as u8)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.iter().all(|&p| p == 0)
    }

    pub fn presence_bits(&self) -> String {
        self.presence.iter().map(|&p| if p == 1 { '1' } else { '0' }).collect()
    }
}

struct RelationMatch {
    anchor_token: usize,
    anchors: Vec<u8>,
    targets: Vec<u8>,
}

fn match_template(t: &RelationTemplate, tokens: &[Token], start: usize) -> Option<RelationMatch> {
    let mut anchor = None;
    let mut target = None;
    let mut pos = start;
    for part in &t.parts {
        let tok = tokens.get(pos)?;
        match (part, tok) {
            (TemplatePart::Words(alts), Token::Word(w)) if alts.contains(w) => {}
            (TemplatePart::Anchor, Token::Organ(ids)) => anchor = Some((pos, ids.clone())),
            (TemplatePart::Target, Token::Organ(ids)) => target = Some(ids.clone()),
            _ => return None,
        }
        pos += 1;
    }
    let (anchor_token, anchors) = anchor?;
    Some(RelationMatch {
        anchor_token,
        anchors,
        targets: target?,
    })
}

fn find_relations(lex: &Lexicon, tokens: &[Token]) -> (Vec<(u8, u8)>, BTreeSet<usize>) {
    let mut pairs = Vec::new();
    let mut anchor_tokens = BTreeSet::new();
    for start in 0..tokens.len() {
        for t in &lex.relation_templates {
            if let Some(m) = match_template(t, tokens, start) {
                anchor_tokens.insert(m.anchor_token);
                for &a in &m.anchors {
                    for &tg in &m.targets {
                        if a != tg && !pairs.contains(&(a, tg)) {
                            pairs.push((a, tg));
                        }
                    }
                }
            }
        }
    }
    (pairs, anchor_tokens)
}

/// Each template match yields one pair per (anchor class, target class); family
/// terms expand to all of their member classes.
pub fn extract_relations(text: &str, lex: &Lexicon) -> Vec<(u8, u8)> {
    find_relations(lex, &lex.tokenize(text)).0
}

pub fn parse_prompt(text: &str, lex: &Lexicon) -> ParsedPrompt {
    let tokens = lex.tokenize(text);
    let (relations, anchor_tokens) = find_relations(lex, &tokens);
    let mut presence = vec![0u8; lex.classes()];
    for (i, tok) in tokens.iter().enumerate() {
        if let Token::Organ(ids) = tok {
            if anchor_tokens.contains(&i) {
                continue;
            }
            for &id in ids {
                presence[id as usize] = 1;
            }
        }
    }
    for &(_, target) in &relations {
        presence[target as usize] = 1;
    }
    ParsedPrompt {
        presence,
        relations,
        raw_text: text.to_string(),
    }
}
