use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::ClassificationData;
use crate::error::{DmtError, Result};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
/// One label byte followed by the red, green and blue 32x32 planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

// per-channel statistics of the training set
const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// Channel-major `[3][32][32]` bytes, exactly as stored on disk.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarSplit {
    pub train: Vec<CifarRecord>,
    pub test: Vec<CifarRecord>,
}

pub fn decode_cifar_record(bytes: &[u8]) -> Result<CifarRecord> {
    if bytes.len() != CIFAR_RECORD_BYTES {
        return Err(DmtError::validation(format!(
            "CIFAR record must be {CIFAR_RECORD_BYTES} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[0] as usize >= CIFAR_CLASSES {
        return Err(DmtError::Index {
            index: bytes[0] as usize,
            len: CIFAR_CLASSES,
        });
    }
    Ok(CifarRecord {
        label: bytes[0],
        pixels: bytes[1..].to_vec(),
    })
}

pub fn encode_cifar_record(record: &CifarRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
    out.push(record.label);
    out.extend_from_slice(&record.pixels);
    out
}

fn ingestion(file: &Path, reason: impl Into<String>) -> DmtError {
    DmtError::Ingestion {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads one binary batch file. The file length must be a whole number of
/// records and every label must lie in `0..10`.
pub fn read_cifar_batch(path: &Path) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(path).map_err(|e| ingestion(path, e.to_string()))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(ingestion(
            path,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, chunk)| {
            decode_cifar_record(chunk).map_err(|_| {
                ingestion(
                    path,
                    format!("record {i} has label {} outside 0..9", chunk[0]),
                )
            })
        })
        .collect()
}

/// Accepts either the directory holding the batch files or its parent
/// containing the usual `cifar-10-batches-bin` folder.
fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(CIFAR_TEST_FILE).exists() && nested.join(CIFAR_TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Loads the standard binary distribution and checks the 50,000 / 10,000
/// record counts.
pub fn ingest_cifar10(dir: &Path) -> Result<CifarSplit> {
    ingest_cifar10_sized(dir, CIFAR_RECORDS_PER_FILE)
}

/// [`ingest_cifar10`] with a custom per-file record count, for reduced
/// archives in the same layout.
pub fn ingest_cifar10_sized(dir: &Path, records_per_file: usize) -> Result<CifarSplit> {
    let dir = batch_dir(dir);
    let read_checked = |name: &str| -> Result<Vec<CifarRecord>> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(ingestion(&path, "missing CIFAR-10 batch file"));
        }
        let records = read_cifar_batch(&path)?;
        if records.len() != records_per_file {
            return Err(ingestion(
                &path,
                format!(
                    "expected {records_per_file} records, found {}",
                    records.len()
                ),
            ));
        }
        Ok(records)
    };
    let mut train = Vec::with_capacity(5 * records_per_file);
    for name in CIFAR_TRAIN_FILES {
        train.extend(read_checked(name)?);
    }
    let test = read_checked(CIFAR_TEST_FILE)?;
    log::info!(
        "loaded CIFAR-10 from {}: {} train, {} test",
        dir.display(),
        train.len(),
        test.len()
    );
    Ok(CifarSplit { train, test })
}

/// Per-channel standardized float features, one flattened `[3][32][32]`
/// row per record.
pub fn cifar_to_data(records: &[CifarRecord]) -> ClassificationData {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut features = Array2::zeros((records.len(), 3 * plane));
    for (mut row, r) in features.rows_mut().into_iter().zip(records) {
        for (j, &b) in r.pixels.iter().enumerate() {
            let ch = j / plane;
            row[j] = (b as f32 / 255.0 - MEAN[ch]) / STD[ch];
        }
    }
    let labels = records.iter().map(|r| r.label as usize).collect();
    ClassificationData {
        features,
        labels,
        classes: CIFAR_CLASSES,
    }
}
