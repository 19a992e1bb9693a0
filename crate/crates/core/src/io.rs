//! On-disk grids: a little-endian payload `<name>.vol` plus a text sidecar
//! `<name>.vol.hdr` carrying `dims`, `spacing`, `channels`, `dtype` and the
//! payload `crc32`.
//!
//! Volumes and logit tensors are stored as `f32`, label maps as `u8`. Values
//! are widened to `f64` on load, so a loaded grid saves back bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Dims, LabelMap, LogitTensor, Spacing, Volume};
use crate::kv::{join, parse_triple, KeyValues};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Any grid the format can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum GridFile {
    Volume(Volume),
    Labels(LabelMap),
    Logits(LogitTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub channels: usize,
    pub dtype: DType,
    pub crc32: u32,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

impl GridHeader {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("dims", join(&self.dims.as_array()))
            .push("spacing", join(&self.spacing.0))
            .push("channels", self.channels)
            .push("dtype", self.dtype.name())
            .push("crc32", format!("{:08x}", self.crc32));
        kv
    }

    fn from_kv(kv: &KeyValues) -> Result<Self> {
        let bad = |what: &str| Error::MissingHeader(format!("bad or missing {what}"));
        let [d, h, w] = parse_triple::<usize>(kv.get("dims").ok_or_else(|| bad("dims"))?)
            .map_err(|_| bad("dims"))?;
        let spacing = parse_triple::<f64>(kv.get("spacing").ok_or_else(|| bad("spacing"))?)
            .map_err(|_| bad("spacing"))?;
        let channels = kv
            .parse_value::<usize>("channels")
            .map_err(|_| bad("channels"))?
            .unwrap_or(1);
        let dtype = match kv.get("dtype") {
            Some("f32") => DType::F32,
            Some("u8") => DType::U8,
            _ => return Err(bad("dtype")),
        };
        let crc32 = kv
            .get("crc32")
            .and_then(|s| u32::from_str_radix(s, 16).ok())
            .ok_or_else(|| bad("crc32"))?;
        let dims = Dims::new(d, h, w);
        dims.validate()?;
        let spacing = Spacing(spacing);
        spacing.validate()?;
        if channels == 0 {
            return Err(bad("channels"));
        }
        Ok(Self {
            dims,
            spacing,
            channels,
            dtype,
            crc32,
        })
    }
}

fn header_text(dims: Dims, spacing: Spacing, channels: usize, dtype: DType, payload: &[u8]) -> String {
    let header = GridHeader {
        dims,
        spacing,
        channels,
        dtype,
        crc32: crc32fast::hash(payload),
    };
    header.to_kv().to_text()
}

fn write_grid(path: &Path, dims: Dims, spacing: Spacing, channels: usize, dtype: DType, payload: &[u8]) -> Result<()> {
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let hdr = header_path(path);
    fs::write(&hdr, header_text(dims, spacing, channels, dtype, payload)).map_err(|e| Error::io(&hdr, e))
}

/// The exact `(payload, sidecar text)` that [`save_labels`] writes.
pub fn encode_labels(labels: &LabelMap) -> (Vec<u8>, String) {
    let hdr = header_text(labels.dims, labels.spacing, 1, DType::U8, &labels.data);
    (labels.data.clone(), hdr)
}

pub fn read_header(path: &Path) -> Result<GridHeader> {
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr)
        .map_err(|e| Error::MissingHeader(format!("{}: {e}", hdr.display())))?;
    let kv = KeyValues::parse(&text).map_err(|e| Error::MissingHeader(e.to_string()))?;
    GridHeader::from_kv(&kv)
}

fn read_payload(path: &Path) -> Result<(GridHeader, Vec<u8>)> {
    let header = read_header(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.channels * header.dims.len() * header.dtype.width();
    if bytes.len() != expected {
        return Err(Error::DimMismatch(format!(
            "{}: header declares {expected} bytes, payload has {}",
            path.display(),
            bytes.len()
        )));
    }
    let crc = crc32fast::hash(&bytes);
    if crc != header.crc32 {
        return Err(Error::BadChecksum(format!(
            "{}: crc32 {crc:08x} != header {:08x}",
            path.display(),
            header.crc32
        )));
    }
    Ok((header, bytes))
}

fn f32_payload(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(what.to_string()));
    }
    Ok(values)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), volume.dims, volume.spacing, 1, DType::F32, &f32_payload(&volume.data))
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), labels.dims, labels.spacing, 1, DType::U8, &labels.data)
}

pub fn save_logits(logits: &LogitTensor, path: impl AsRef<Path>) -> Result<()> {
    write_grid(
        path.as_ref(),
        logits.dims,
        logits.spacing,
        logits.channels,
        DType::F32,
        &f32_payload(&logits.data),
    )
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<GridFile> {
    let path = path.as_ref();
    let (h, bytes) = read_payload(path)?;
    match (h.dtype, h.channels) {
        (DType::U8, 1) => Ok(GridFile::Labels(LabelMap::new(h.dims, h.spacing, bytes)?)),
        (DType::U8, c) => Err(Error::DimMismatch(format!("u8 payload with {c} channels"))),
        (DType::F32, 1) => Ok(GridFile::Volume(Volume::new(
            h.dims,
            h.spacing,
            decode_f32(&bytes, "volume payload")?,
        )?)),
        (DType::F32, c) => Ok(GridFile::Logits(LogitTensor::new(
            c,
            h.dims,
            h.spacing,
            decode_f32(&bytes, "logit payload")?,
        )?)),
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match load_grid(path)? {
        GridFile::Volume(v) => Ok(v),
        other => Err(Error::DimMismatch(format!("expected a volume, found {}", kind(&other)))),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match load_grid(path)? {
        GridFile::Labels(l) => Ok(l),
        other => Err(Error::DimMismatch(format!("expected a label map, found {}", kind(&other)))),
    }
}

/// Loads a logit tensor; a single-channel `f32` file is accepted as a one-channel tensor.
pub fn load_logits(path: impl AsRef<Path>) -> Result<LogitTensor> {
    match load_grid(path)? {
        GridFile::Logits(l) => Ok(l),
        GridFile::Volume(v) => LogitTensor::new(1, v.dims, v.spacing, v.data),
        other => Err(Error::DimMismatch(format!("expected logits, found {}", kind(&other)))),
    }
}

fn kind(g: &GridFile) -> &'static str {
    match g {
        GridFile::Volume(_) => "volume",
        GridFile::Labels(_) => "label map",
        GridFile::Logits(_) => "logit tensor",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> Volume {
        Volume::new(dims, Spacing::UNIT, (0..dims.len()).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn ramp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.vol");
        let v = ramp(Dims::cube(4));
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
        let hdr = fs::read_to_string(header_path(&p)).unwrap();
        assert!(hdr.contains("dims=4,4,4") && hdr.contains("dtype=f32") && hdr.contains("channels=1"));
    }

    #[test]
    fn encoded_labels_match_saved_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vol");
        let l = LabelMap::new(Dims::new(1, 2, 3), Spacing([2.0, 1.0, 0.5]), vec![0, 1, 2, 3, 0, 6]).unwrap();
        save_labels(&l, &p).unwrap();
        let (payload, hdr) = encode_labels(&l);
        assert_eq!(fs::read(&p).unwrap(), payload);
        assert_eq!(fs::read_to_string(header_path(&p)).unwrap(), hdr);
    }

    #[test]
    fn anisotropic_spacing_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.vol");
        let v = Volume::filled(Dims::cube(96), Spacing([2.0, 1.5, 1.5]), 0.25);
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.spacing.0, [2.0, 1.5, 1.5]);
        assert_eq!(back.dims, Dims::cube(96));
    }

    #[test]
    fn short_payload_is_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.vol");
        let payload: Vec<u8> = (0..7).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(&p, &payload).unwrap();
        fs::write(
            header_path(&p),
            format!("dims=2,2,2\nspacing=1,1,1\nchannels=1\ndtype=f32\ncrc32={:08x}\n", crc32fast::hash(&payload)),
        )
        .unwrap();
        assert!(matches!(load_volume(&p), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nohdr.vol");
        fs::write(&p, [0u8; 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::MissingHeader(_))));
    }

    #[test]
    fn non_finite_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.vol");
        let payload: Vec<u8> = f32::NAN.to_le_bytes().to_vec();
        fs::write(&p, &payload).unwrap();
        fs::write(
            header_path(&p),
            format!("dims=1,1,1\nspacing=1,1,1\nchannels=1\ndtype=f32\ncrc32={:08x}\n", crc32fast::hash(&payload)),
        )
        .unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonFiniteData(_))));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.vol");
        save_volume(&ramp(Dims::cube(2)), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::BadChecksum(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn all_grid_kinds_round_trip(
            raw in proptest::collection::vec(-1e6f32..1e6, 3 * 24),
            labels in proptest::collection::vec(0u8..14, 24),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let dims = Dims::new(2, 3, 4);
            let spacing = Spacing([2.0, 1.5, 0.75]);
            let wide: Vec<f64> = raw.iter().map(|&v| v as f64).collect();

            let vol = Volume::new(dims, spacing, wide[..24].to_vec()).unwrap();
            let p = dir.path().join("v.vol");
            save_volume(&vol, &p).unwrap();
            prop_assert_eq!(load_volume(&p).unwrap(), vol);

            let lm = LabelMap::new(dims, spacing, labels).unwrap();
            let p = dir.path().join("l.vol");
            save_labels(&lm, &p).unwrap();
            prop_assert_eq!(load_labels(&p).unwrap(), lm);

            let lt = LogitTensor::new(3, dims, spacing, wide).unwrap();
            let p = dir.path().join("t.vol");
            save_logits(&lt, &p).unwrap();
            prop_assert_eq!(load_logits(&p).unwrap(), lt);
        }
    }
}
