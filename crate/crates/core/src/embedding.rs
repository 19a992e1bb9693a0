//! Frozen text encoders behind a common provider interface.
//!
//! [`HashedEncoder`] is a deterministic stand-in: each lowercase alphanumeric
//! token seeds a SplitMix64 stream with its 64-bit FNV-1a hash, the stream is
//! mapped to 768 values in `[-1, 1)`, and the prompt embedding is the
//! L2-normalised mean of its token vectors. [`LookupTable`] serves vectors
//! imported from an external encoder.

use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 768;

/// Unit-norm prompt embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Vec<f64>);

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `N x E` stack of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub rows: Vec<TextEmbedding>,
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TextEmbedding>;
}

/// SplitMix64 (Steele, Lea & Flood); the state advances by the golden gamma.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`: the top 53 bits scaled by `2^-52`, minus one.
    pub fn next_signed_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 52) as f64) - 1.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn normalize(mut v: Vec<f64>) -> Result<TextEmbedding> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::NonFiniteData("embedding with zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(TextEmbedding(v))
}

#[derive(Clone, Copy, Debug)]
pub struct HashedEncoder {
    pub dim: usize,
}

impl Default for HashedEncoder {
    fn default() -> Self {
        Self { dim: EMBED_DIM }
    }
}

impl HashedEncoder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = SplitMix64::new(fnv1a64(token.as_bytes()));
        (0..self.dim).map(|_| rng.next_signed_unit()).collect()
    }
}

impl TextEncoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let toks = tokens(text);
        if toks.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        // Sorting makes the float summation order, and therefore the bits,
        // independent of token order.
        let mut sorted = toks;
        sorted.sort();
        let mut acc = vec![0.0; self.dim];
        for t in &sorted {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let n = sorted.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        normalize(acc)
    }
}

pub fn embed_hashed(text: &str) -> Result<TextEmbedding> {
    HashedEncoder::default().embed(text)
}

/// Embeddings imported from a table file: header `E=<dim>`, then
/// `<key>\t<v1> <v2> ...` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

fn normalize_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl LookupTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::BadTableFormat("empty table".into()))?;
        let dim: usize = header
            .trim()
            .strip_prefix("E=")
            .and_then(|d| d.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::BadTableFormat(format!("bad header {header:?}")))?;
        let mut entries = HashMap::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::BadTableFormat(format!("line {}: missing tab", i + 2)))?;
            let vec = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::BadTableFormat(format!("line {}: bad number", i + 2)))?;
            if vec.len() != dim || vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::BadTableFormat(format!(
                    "line {}: expected {dim} finite values, found {}",
                    i + 2,
                    vec.len()
                )));
            }
            entries.insert(normalize_key(key), vec);
        }
        Ok(Self { dim, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TextEncoder for LookupTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let key = normalize_key(text);
        let v = self
            .entries
            .get(&key)
            .ok_or_else(|| Error::KeyNotFound(key.clone()))?;
        normalize(v.clone())
    }
}

pub fn embed_lookup(text: &str, table: &LookupTable) -> Result<TextEmbedding> {
    table.embed(text)
}

pub fn embed_batch<E: TextEncoder + ?Sized>(texts: &[&str], encoder: &E) -> Result<EmbeddingBatch> {
    let rows = texts
        .iter()
        .enumerate()
        .map(|(index, t)| {
            encoder.embed(t).map_err(|e| Error::BatchElement {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingBatch { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 0 from the reference implementation.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn hashed_is_deterministic_and_unit() {
        let a = embed_hashed("liver").unwrap();
        let b = embed_hashed("liver").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 768);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization_rule() {
        assert_eq!(embed_hashed("Liver  segment").unwrap(), embed_hashed("liver segment").unwrap());
        assert_eq!(embed_hashed("a b").unwrap(), embed_hashed("b a").unwrap());
        assert!(matches!(embed_hashed("  ,;  "), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn distinct_prompts_are_separable() {
        let a = embed_hashed("segment the liver").unwrap();
        let b = embed_hashed("segment the spleen").unwrap();
        let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
        assert!(dot < 0.9);
    }

    #[test]
    fn signed_unit_range() {
        let mut r = SplitMix64::new(42);
        for _ in 0..10_000 {
            let v = r.next_signed_unit();
            assert!((-1.0..1.0).contains(&v));
        }
    }

    fn table() -> LookupTable {
        LookupTable::parse("E=3\nsegment the liver\t2 0 0\nspleen\t0 3 4\n").unwrap()
    }

    #[test]
    fn lookup_present_absent_and_renormalized() {
        let t = table();
        assert_eq!(embed_lookup("segment  the liver", &t).unwrap().0, vec![1.0, 0.0, 0.0]);
        assert_eq!(embed_lookup("spleen", &t).unwrap().0, vec![0.0, 0.6, 0.8]);
        assert!(matches!(embed_lookup("kidney", &t), Err(Error::KeyNotFound(_))));
    }

    #[test]
    fn lookup_rejects_bad_tables() {
        assert!(matches!(LookupTable::parse("E=x\n"), Err(Error::BadTableFormat(_))));
        assert!(matches!(LookupTable::parse("E=3\nk\t1 2\n"), Err(Error::BadTableFormat(_))));
        assert!(matches!(LookupTable::parse("E=3\nk 1 2 3\n"), Err(Error::BadTableFormat(_))));
    }

    #[test]
    fn batch_rows_and_errors() {
        let enc = HashedEncoder::default();
        let one = embed_batch(&["liver"], &enc).unwrap();
        assert_eq!(one.rows[0], enc.embed("liver").unwrap());
        let dup = embed_batch(&["liver", "liver"], &enc).unwrap();
        assert_eq!(dup.rows[0], dup.rows[1]);
        let err = embed_batch(&["liver", "", "spleen"], &enc).unwrap_err();
        assert!(matches!(err, Error::BatchElement { index: 1, .. }));
    }
}
