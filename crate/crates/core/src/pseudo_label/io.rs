//! On-disk pseudo-label stores.
//!
//! Per-sample records are written as JSON lines. Label maps are written one
//! file per image in the `DMTL` layout:
//!
//! ```text
//! b"DMTL" | u32 LE height | u32 LE width | height*width label bytes | height*width f32 LE confidences
//! ```
//!
//! Every store carries a `manifest.json` with per-file SHA-256 checksums.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabelSource, PseudoLabelMap, PseudoLabelRecord};
use crate::error::{DmtError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_FILE: &str = "records.jsonl";
const MAGIC: &[u8; 4] = b"DMTL";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadFormat {
    Jsonl,
    Dmtl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: PayloadFormat,
    pub iteration: u32,
    pub alpha: Option<f64>,
    pub source_model: String,
    pub files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn read_manifest(dir: &Path, expected: PayloadFormat) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| DmtError::format(&path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DmtError::format(&path, format!("malformed manifest: {e}")))?;
    if manifest.format != expected {
        return Err(DmtError::format(
            &path,
            format!("expected a {expected:?} store, found {:?}", manifest.format),
        ));
    }
    Ok(manifest)
}

/// Reads a manifest-listed file and checks its length and checksum.
fn read_checked(dir: &Path, entry: &ManifestEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| DmtError::format(&path, e.to_string()))?;
    if bytes.len() as u64 != entry.bytes {
        return Err(DmtError::format(
            &path,
            format!(
                "length {} does not match manifest {}",
                bytes.len(),
                entry.bytes
            ),
        ));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(DmtError::format(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

/// Writes records as JSON lines plus a manifest; returns the manifest.
pub fn save_pseudo_label_records(
    records: &[PseudoLabelRecord],
    dir: &Path,
    alpha: Option<f64>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(dir.join(RECORDS_FILE), &buf)?;
    let first = records.first();
    let manifest = Manifest {
        format: PayloadFormat::Jsonl,
        iteration: first.map_or(0, |r| r.iteration),
        alpha,
        source_model: first.map_or_else(String::new, |r| r.source_model.clone()),
        files: vec![ManifestEntry {
            file: RECORDS_FILE.to_string(),
            sample_id: None,
            sha256: sha256_hex(&buf),
            bytes: buf.len() as u64,
        }],
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_pseudo_label_records(dir: &Path) -> Result<(Manifest, Vec<PseudoLabelRecord>)> {
    let manifest = read_manifest(dir, PayloadFormat::Jsonl)?;
    let mut records = Vec::new();
    for entry in &manifest.files {
        let path = dir.join(&entry.file);
        let bytes = read_checked(dir, entry)?;
        for (lineno, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
            let line = line.map_err(|e| DmtError::format(&path, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: PseudoLabelRecord = serde_json::from_str(&line)
                .map_err(|e| DmtError::format(&path, format!("line {}: {e}", lineno + 1)))?;
            r.validate()
                .map_err(|e| DmtError::format(&path, format!("line {}: {e}", lineno + 1)))?;
            records.push(r);
        }
    }
    Ok((manifest, records))
}

/// Encodes one label/value grid in the `DMTL` layout.
pub fn encode_dmtl(height: usize, width: usize, labels: &[u8], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + labels.len() * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(labels);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `DMTL` payload into `(height, width, labels, values)`.
pub fn decode_dmtl(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(DmtError::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(DmtError::format(path, "bad magic bytes"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = height
        .checked_mul(width)
        .ok_or_else(|| DmtError::format(path, "dimensions overflow"))?;
    let expected = HEADER_LEN + n * 5;
    if bytes.len() != expected {
        return Err(DmtError::format(
            path,
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let labels = bytes[HEADER_LEN..HEADER_LEN + n].to_vec();
    let values = bytes[HEADER_LEN + n..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((height, width, labels, values))
}

/// Writes a single `DMTL` file (also used for dumping weight maps).
pub fn write_dmtl(
    path: &Path,
    height: usize,
    width: usize,
    labels: &[u8],
    values: &[f32],
) -> Result<()> {
    if labels.len() != height * width || values.len() != labels.len() {
        return Err(DmtError::validation(
            "DMTL grid sizes do not match its dimensions",
        ));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_dmtl(height, width, labels, values))?;
    w.flush()?;
    Ok(())
}

pub fn read_dmtl(path: &Path) -> Result<(usize, usize, Vec<u8>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| DmtError::format(path, e.to_string()))?;
    decode_dmtl(path, &bytes)
}

/// Writes one `DMTL` file per map plus a manifest; returns the manifest.
pub fn save_pseudo_label_maps(
    maps: &[PseudoLabelMap],
    dir: &Path,
    alpha: Option<f64>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let name = format!("{i:06}.dmtl");
        let bytes = encode_dmtl(m.height(), m.width(), m.labels(), m.confidences());
        fs::write(dir.join(&name), &bytes)?;
        files.push(ManifestEntry {
            file: name,
            sample_id: Some(m.sample_id().to_string()),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let first = maps.first();
    let manifest = Manifest {
        format: PayloadFormat::Dmtl,
        iteration: first.map_or(0, |m| m.iteration()),
        alpha,
        source_model: first.map_or_else(String::new, |m| m.source_model().to_string()),
        files,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Loads every map listed in the manifest. Fails without returning a partial
/// result if any file is corrupt.
pub fn load_pseudo_label_maps(dir: &Path) -> Result<(Manifest, Vec<PseudoLabelMap>)> {
    let manifest = read_manifest(dir, PayloadFormat::Dmtl)?;
    let source = LabelSource::new(manifest.source_model.clone(), manifest.iteration);
    let mut maps = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let path = dir.join(&entry.file);
        let bytes = read_checked(dir, entry)?;
        let (h, w, labels, confs) = decode_dmtl(&path, &bytes)?;
        let id = entry
            .sample_id
            .clone()
            .unwrap_or_else(|| entry.file.clone());
        let map = PseudoLabelMap::new(id, h, w, labels, confs, &source)
            .map_err(|e| DmtError::format(&path, e.to_string()))?;
        maps.push(map);
    }
    Ok((manifest, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::IGNORE_LABEL;

    #[test]
    fn one_pixel_layout() {
        let bytes = encode_dmtl(1, 1, &[3], &[0.5]);
        assert_eq!(bytes.len(), 17);
        let mut expected = b"DMTL".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, 3]);
        expected.extend(0.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = LabelSource::new("model-a", 2);
        let maps = vec![
            PseudoLabelMap::new(
                "img-0",
                2,
                2,
                vec![0, 1, IGNORE_LABEL, 2],
                vec![0.9, 0.4, 0.2, 0.7],
                &src,
            )
            .unwrap(),
            PseudoLabelMap::new("img-1", 1, 3, vec![1, 1, 1], vec![1.0, 0.5, 0.25], &src).unwrap(),
        ];
        let manifest = save_pseudo_label_maps(&maps, dir.path(), Some(0.4)).unwrap();
        assert_eq!(manifest.files.len(), 2);
        let (m2, loaded) = load_pseudo_label_maps(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(loaded, maps);
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = LabelSource::new("f0", 1);
        let records = vec![
            PseudoLabelRecord::new("a", Some(3), 0.123_456_789_012_345_67, &src).unwrap(),
            PseudoLabelRecord::new("b", None, 0.3, &src).unwrap(),
        ];
        save_pseudo_label_records(&records, dir.path(), Some(0.2)).unwrap();
        let (_, loaded) = load_pseudo_label_records(dir.path()).unwrap();
        assert_eq!(loaded, records);
        assert_eq!(
            loaded[0].confidence.to_bits(),
            records[0].confidence.to_bits()
        );
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let src = LabelSource::new("m", 1);
        let maps = vec![PseudoLabelMap::new("x", 1, 1, vec![3], vec![0.5], &src).unwrap()];
        save_pseudo_label_maps(&maps, dir.path(), None).unwrap();
        let file = dir.path().join("000000.dmtl");
        let mut bytes = fs::read(&file).unwrap();
        bytes[0] = b'X';
        fs::write(&file, &bytes).unwrap();
        let err = load_pseudo_label_maps(dir.path()).unwrap_err();
        assert!(matches!(err, DmtError::Format { ref file, .. } if file.ends_with("000000.dmtl")));

        // decoding alone also names the magic problem
        let err = decode_dmtl(Path::new("x.dmtl"), &bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_dmtl(2, 2, &[0; 4], &[0.5; 4]);
        assert!(decode_dmtl(Path::new("t"), &bytes[..bytes.len() - 1]).is_err());
        assert!(decode_dmtl(Path::new("t"), &bytes[..5]).is_err());
    }
}
