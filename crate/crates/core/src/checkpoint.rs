//! Parameter checkpoints: `<name>.ckpt` holds little-endian `f64` parameters
//! followed by the first and second optimizer moments; `<name>.ckpt.hdr`
//! carries `kind`, `shape`, `len`, `epoch`, `step`, optimizer constants,
//! `config_hash` and the payload `crc32`, plus any kind-specific keys.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::header_path;
use crate::kv::{join, parse_list, KeyValues};
use crate::optim::AdamWState;

const RESERVED: [&str; 10] = [
    "kind",
    "shape",
    "len",
    "epoch",
    "step",
    "beta1",
    "beta2",
    "eps",
    "config_hash",
    "crc32",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub kind: String,
    pub shape: Vec<usize>,
    pub epoch: usize,
    pub config_hash: u32,
    pub params: Vec<f64>,
    pub optimizer: AdamWState,
    /// Kind-specific header entries.
    pub extra: KeyValues,
}

/// CRC-32 of a configuration's canonical text, used as `config_hash`.
pub fn config_hash(text: &str) -> u32 {
    crc32fast::hash(text.as_bytes())
}

fn payload(rec: &CheckpointRecord) -> Vec<u8> {
    rec.params
        .iter()
        .chain(&rec.optimizer.m)
        .chain(&rec.optimizer.v)
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn save_record(rec: &CheckpointRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if rec.optimizer.len() != rec.params.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let bytes = payload(rec);
    let mut kv = KeyValues::new();
    kv.push("kind", &rec.kind)
        .push("shape", join(&rec.shape))
        .push("len", rec.params.len())
        .push("epoch", rec.epoch)
        .push("step", rec.optimizer.step)
        .push("beta1", rec.optimizer.beta1)
        .push("beta2", rec.optimizer.beta2)
        .push("eps", rec.optimizer.eps)
        .push("config_hash", format!("{:08x}", rec.config_hash))
        .push("crc32", format!("{:08x}", crc32fast::hash(&bytes)));
    for key in rec.extra.keys() {
        if RESERVED.contains(&key) {
            return Err(Error::ConfigInvalid(format!("reserved checkpoint key {key}")));
        }
        kv.push(key, rec.extra.get(key).unwrap_or_default());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let hdr = header_path(path);
    fs::write(&hdr, kv.to_text()).map_err(|e| Error::io(&hdr, e))
}

fn hex(kv: &KeyValues, key: &str) -> Result<u32> {
    kv.get(key)
        .and_then(|s| u32::from_str_radix(s, 16).ok())
        .ok_or_else(|| Error::BadCheckpoint(format!("bad or missing {key}")))
}

fn field<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<T> {
    kv.get(key)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::BadCheckpoint(format!("bad or missing {key}")))
}

pub fn load_record(path: impl AsRef<Path>) -> Result<CheckpointRecord> {
    let path = path.as_ref();
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let kv = KeyValues::parse(&text).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let crc = crc32fast::hash(&bytes);
    let expected = hex(&kv, "crc32")?;
    if crc != expected {
        return Err(Error::BadChecksum(format!(
            "{}: crc32 {crc:08x} != header {expected:08x}",
            path.display()
        )));
    }
    let len: usize = field(&kv, "len")?;
    if bytes.len() != 3 * len * 8 {
        return Err(Error::BadCheckpoint(format!(
            "payload has {} bytes for {len} parameters",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(format!("{}", path.display())));
    }
    let shape = parse_list::<usize>(kv.get("shape").unwrap_or_default())
        .map_err(|_| Error::BadCheckpoint("bad shape".into()))?;
    let mut extra = KeyValues::new();
    for key in kv.keys() {
        if !RESERVED.contains(&key) {
            extra.push(key, kv.get(key).unwrap_or_default());
        }
    }
    Ok(CheckpointRecord {
        kind: kv.get("kind").unwrap_or_default().to_string(),
        shape,
        epoch: field(&kv, "epoch")?,
        config_hash: hex(&kv, "config_hash")?,
        params: values[..len].to_vec(),
        optimizer: AdamWState {
            m: values[len..2 * len].to_vec(),
            v: values[2 * len..].to_vec(),
            step: field(&kv, "step")?,
            beta1: field(&kv, "beta1")?,
            beta2: field(&kv, "beta2")?,
            eps: field(&kv, "eps")?,
        },
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> CheckpointRecord {
        let mut optimizer = AdamWState::new(3);
        optimizer.m = vec![0.1, -0.2, 0.3];
        optimizer.v = vec![1e-3, 2e-3, 3e-3];
        optimizer.step = 17;
        let mut extra = KeyValues::new();
        extra.push("dropout", 0.1);
        CheckpointRecord {
            kind: "test".into(),
            shape: vec![1, 3],
            epoch: 4,
            config_hash: 0xdead_beef,
            params: vec![std::f64::consts::PI, -0.0, 1e-300],
            optimizer,
            extra,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let rec = record();
        save_record(&rec, &p).unwrap();
        let back = load_record(&p).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.params[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_record(&record(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_record(&p), Err(Error::BadChecksum(_))));
    }

    #[test]
    fn reserved_extra_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record();
        rec.extra.push("epoch", 9);
        assert!(matches!(
            save_record(&rec, dir.path().join("b.ckpt")),
            Err(Error::ConfigInvalid(_))
        ));
    }
}
