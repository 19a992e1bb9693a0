//! The `key=value` text format shared by file headers and run configurations.
//!
//! One pair per line; `#` starts a comment; `:` is accepted as a separator too.
//! Keys may repeat (phantom specs list one `organ` line per ellipsoid).

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let sep = line
                .find(['=', ':'])
                .ok_or_else(|| Error::ConfigInvalid(format!("line {}: expected key=value", lineno + 1)))?;
            let key = line[..sep].trim().to_string();
            let value = line[sep + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::ConfigInvalid(format!("line {}: empty key", lineno + 1)));
            }
            pairs.push((key, value));
        }
        Ok(Self { pairs })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.pairs.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.pairs
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::ConfigInvalid(format!("missing key {key:?}")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::ConfigInvalid(format!("bad value for {key}: {v:?}"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parses a comma-separated list such as `48,48,48`.
pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("bad list element {s:?} in {text:?}")))
        })
        .collect()
}

pub fn parse_triple<T: FromStr + Copy>(text: &str) -> Result<[T; 3]> {
    let items = parse_list::<T>(text)?;
    match items.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::ConfigInvalid(format!("expected three values, got {text:?}"))),
    }
}

pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
