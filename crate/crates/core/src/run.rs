//! Run directories: manifest, resolved config, lock file and failure
//! marker, plus the top-level pretraining entry point.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{self, ConfigFile};
use crate::data::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::patch::{read_dataset, Dataset};
use crate::training::{run_loop, PretrainSummary, TrainConfig, Trainer};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.cfg";
pub const LOCK: &str = ".lock";
pub const FAILED: &str = "FAILED";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
    pub artifacts: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Writes `bytes` to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let ctx = || format!("writing {}", path.display());
    let mut f = File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    f.sync_all().map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

/// Exclusive handle on a run directory. Dropping it without
/// [`RunDir::finish`] leaves a failure marker.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
    done: bool,
}

impl RunDir {
    /// Creates (or reuses) `path`, takes the lock, clears an old failure
    /// marker and writes the resolved config and the manifest.
    pub fn open(path: &Path, command: &str, config_text: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let lock = path.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(path.to_path_buf())),
            Err(e) => return Err(Error::io(format!("locking {}", path.display()), e)),
        }
        let mut run = Self {
            path: path.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: config::config_hash(config_text),
                code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
                seed,
                started_unix: now(),
                finished_unix: None,
                status: "running".into(),
                artifacts: vec![RESOLVED_CONFIG.into()],
            },
            done: false,
        };
        let _ = fs::remove_file(path.join(FAILED));
        write_atomic(&path.join(RESOLVED_CONFIG), config_text.as_bytes())?;
        run.write_manifest()?;
        Ok(run)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn write_manifest(&mut self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.path.join(MANIFEST), &json)
    }

    pub fn finish(mut self, artifacts: &[&Path]) -> Result<()> {
        for a in artifacts {
            let rel = a.strip_prefix(&self.path).unwrap_or(a);
            self.manifest.artifacts.push(rel.display().to_string());
        }
        self.manifest.status = "completed".into();
        self.manifest.finished_unix = Some(now());
        self.done = true;
        let r = self.write_manifest();
        let _ = fs::remove_file(self.path.join(LOCK));
        r
    }

    pub fn fail(mut self, error: &Error) {
        self.mark_failed(&error.to_string());
    }

    fn mark_failed(&mut self, msg: &str) {
        self.done = true;
        let _ = fs::write(self.path.join(FAILED), format!("{msg}\n"));
        self.manifest.status = "failed".into();
        self.manifest.finished_unix = Some(now());
        let _ = self.write_manifest();
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            self.mark_failed("run ended without completing");
        }
    }
}

/// The pretraining corpus: the configured file, or the synthetic corpus.
pub fn load_pretrain_data(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data_path {
        Some(p) => read_dataset(p),
        None => data::generate(&SynthConfig {
            image_size: cfg.model.image_size,
            count: cfg.data_count,
            seed: cfg.data_seed,
            ..SynthConfig::default()
        }),
    }
}

/// Fields that may differ between a run and the checkpoint it resumes.
fn resumable_view(c: &TrainConfig) -> TrainConfig {
    TrainConfig {
        max_steps: 0,
        checkpoint_every: 1,
        prefetch: 0,
        ..c.clone()
    }
}

/// Drops metrics lines at or after `step` so a resumed run does not repeat
/// them.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(f) = File::open(path) else {
        return Ok(());
    };
    let mut keep = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let s = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if s.is_some_and(|s| s < step) {
            keep.push_str(&line);
            keep.push('\n');
        }
    }
    write_atomic(path, keep.as_bytes())
}

/// `pretrain`: trains from scratch or from `resume`, inside a managed run
/// directory.
pub fn pretrain(cfg: &ConfigFile, out: &Path, resume: Option<&Path>) -> Result<PretrainSummary> {
    let text = config::to_text(cfg);
    let run = RunDir::open(out, "pretrain", &text, cfg.train.seed)?;
    let result = (|| {
        let dataset = load_pretrain_data(&cfg.train)?;
        let mut trainer = match resume {
            Some(p) => {
                let ckpt = Checkpoint::load(p)?;
                let stored = config::parse_str(&ckpt.config_text, &p.display().to_string())?;
                if resumable_view(&stored.train) != resumable_view(&cfg.train) {
                    return Err(Error::CheckpointIncompatible(
                        "checkpoint was trained with a different configuration".into(),
                    ));
                }
                truncate_metrics(&out.join(METRICS), ckpt.step)?;
                Trainer::resume(cfg.train.clone(), &dataset, &ckpt)?
            }
            None => {
                let _ = fs::remove_file(out.join(METRICS));
                Trainer::new(cfg.train.clone(), &dataset)?
            }
        };
        run_loop(&mut trainer, out, &text)
    })();
    match result {
        Ok(summary) => {
            run.finish(&[&out.join(METRICS), &summary.final_checkpoint])?;
            Ok(summary)
        }
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}
