//! Append-only run records, checkpoints and resume state for one output
//! directory.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{DmtError, Result};
use crate::nn::{read_checkpoint, write_checkpoint, Network};
use crate::pseudo_label::ErrorReport;
use crate::trainer::{CaseCounts, StepTrace};

pub const RUN_LOG_FILE: &str = "runlog.jsonl";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";

/// Deterministic quality numbers for one trained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub accuracy: Option<f64>,
    pub fine_grained: Option<f64>,
    pub ema_accuracy: Option<f64>,
    pub ema_fine_grained: Option<f64>,
    pub mean_iou: Option<f64>,
    pub ema_mean_iou: Option<f64>,
    pub valtiny_mean_iou: Option<f64>,
    /// Curriculum fraction of this iteration; `None` for supervised training.
    pub alpha: Option<f64>,
    /// Model whose predictions produced the pseudo labels.
    pub labeler: Option<String>,
    /// Pseudo-labeled samples (or pixels, for maps) used in training.
    pub selected: u64,
    pub pool: u64,
    /// Quality of the labeler's argmax over the whole unlabeled pool.
    pub pseudo_label_errors: Option<ErrorReport>,
    pub cases: CaseCounts,
    pub steps: u64,
    pub epochs: usize,
    /// Mean optimized loss over the last epoch.
    pub final_loss: f64,
}

impl ModelMetrics {
    /// Accuracy for classifiers or test mean IoU for dense models,
    /// preferring the EMA network when `use_ema` and it was evaluated.
    pub fn headline(&self, use_ema: bool) -> Option<f64> {
        let raw = self.accuracy.or(self.mean_iou);
        let ema = self.ema_accuracy.or(self.ema_mean_iou);
        if use_ema {
            ema.or(raw)
        } else {
            raw
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

/// One line of the run log: one model after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Variant name, or `baseline` for supervised iteration-0 training.
    pub run: String,
    pub seed: u64,
    pub iteration: u32,
    /// `F` for the single classification model, `A` or `B` for a pair.
    pub model: String,
    pub metrics: ModelMetrics,
    pub checkpoint: Option<CheckpointEntry>,
    /// Kept apart from `metrics` so the latter stay bitwise reproducible.
    pub timing: Timing,
}

impl RunRecord {
    pub fn key(&self) -> (&str, u64, u32, &str) {
        (&self.run, self.seed, self.iteration, &self.model)
    }
}

/// Records and checkpoints of a run, held in memory or mirrored to a
/// directory.
#[derive(Debug)]
pub struct RunStore {
    dir: Option<PathBuf>,
    config_hash: String,
    records: Vec<RunRecord>,
    checkpoints: Vec<((String, u64, u32, String), Network)>,
}

impl RunStore {
    pub fn in_memory(config: &ExperimentConfig) -> Self {
        RunStore {
            dir: None,
            config_hash: config.hash(),
            records: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    /// Opens `dir`, creating it with a config snapshot on first use. A
    /// directory holding a different config is rejected.
    pub fn open(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let hash = config.hash();
        let snapshot = dir.join(CONFIG_SNAPSHOT_FILE);
        if snapshot.exists() {
            let previous = ExperimentConfig::from_toml_str(&fs::read_to_string(&snapshot)?)?;
            if previous.hash() != hash {
                return Err(DmtError::config(format!(
                    "{} holds a run with a different config (hash {}); use a new --out",
                    dir.display(),
                    &previous.hash()[..12]
                )));
            }
        } else {
            fs::write(&snapshot, config.to_toml())?;
        }
        let mut records = Vec::new();
        let log = dir.join(RUN_LOG_FILE);
        if log.exists() {
            let reader = BufReader::new(fs::File::open(&log)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RunRecord = serde_json::from_str(&line).map_err(|e| DmtError::Format {
                    file: log.clone(),
                    reason: format!("line {}: {e}", n + 1),
                })?;
                if rec.config_hash != hash {
                    return Err(DmtError::config(format!(
                        "{}:{}: record written under another config",
                        log.display(),
                        n + 1
                    )));
                }
                records.push(rec);
            }
        }
        Ok(RunStore {
            dir: Some(dir.to_path_buf()),
            config_hash: hash,
            records,
            checkpoints: Vec::new(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn find(&self, run: &str, seed: u64, iteration: u32, model: &str) -> Option<&RunRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.key() == (run, seed, iteration, model))
    }

    /// The network saved with a record, if it can be recovered.
    pub fn load_model(&self, record: &RunRecord) -> Result<Option<Network>> {
        let key = (
            record.run.clone(),
            record.seed,
            record.iteration,
            record.model.clone(),
        );
        if let Some((_, net)) = self.checkpoints.iter().find(|(k, _)| *k == key) {
            return Ok(Some(net.clone()));
        }
        match (&self.dir, &record.checkpoint) {
            (Some(dir), Some(entry)) => {
                let path = dir.join(&entry.path);
                if !path.exists() {
                    return Ok(None);
                }
                Ok(Some(read_checkpoint(&path)?))
            }
            _ => Ok(None),
        }
    }

    /// A completed record together with its model, when both are available.
    pub fn resume_point(
        &self,
        run: &str,
        seed: u64,
        iteration: u32,
        model: &str,
    ) -> Result<Option<(RunRecord, Network)>> {
        let Some(rec) = self.find(run, seed, iteration, model) else {
            return Ok(None);
        };
        Ok(self.load_model(rec)?.map(|net| (rec.clone(), net)))
    }

    /// Saves the checkpoint, then appends the record that points to it.
    #[allow(clippy::too_many_arguments)]
    pub fn commit(
        &mut self,
        run: &str,
        seed: u64,
        iteration: u32,
        model: &str,
        metrics: ModelMetrics,
        net: &Network,
        seconds: f64,
    ) -> Result<RunRecord> {
        let checkpoint = match &self.dir {
            Some(dir) => {
                let rel = format!("checkpoints/{run}-s{seed}-i{iteration}-{model}.ckpt");
                let path = dir.join(&rel);
                fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
                let sha256 = write_checkpoint(net, &path)?;
                Some(CheckpointEntry { path: rel, sha256 })
            }
            None => {
                self.checkpoints.push((
                    (run.to_string(), seed, iteration, model.to_string()),
                    net.clone(),
                ));
                None
            }
        };
        let record = RunRecord {
            config_hash: self.config_hash.clone(),
            run: run.to_string(),
            seed,
            iteration,
            model: model.to_string(),
            metrics,
            checkpoint,
            timing: Timing { seconds },
        };
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(RUN_LOG_FILE))?;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}")?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Per-iteration directory for pseudo labels, when persisting.
    pub fn pseudo_dir(&self, run: &str, seed: u64, iteration: u32, model: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("pseudo/{run}-s{seed}-i{iteration}-{model}")))
    }

    /// Writes a step trace as JSON lines next to the run log.
    pub fn write_traces(
        &self,
        run: &str,
        seed: u64,
        iteration: u32,
        model: &str,
        traces: &[StepTrace],
    ) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(format!("traces/{run}-s{seed}-i{iteration}-{model}.jsonl"));
        fs::create_dir_all(path.parent().expect("trace path has a parent"))?;
        let mut out = String::new();
        for t in traces {
            out.push_str(&serde_json::to_string(t).expect("trace serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Reads every record of a run log.
pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| DmtError::Format {
                file: path.to_path_buf(),
                reason: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}
