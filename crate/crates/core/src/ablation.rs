//! One-axis ablation sweeps: train every grid point from the same seed,
//! probe it, and tabulate accuracy and collapse statistics.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::data::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    collapse_report, extract_features, load_encoder, probe_encoder, ProbeConfig, ProbeTask, Representation,
};
use crate::masking::Strategy;
use crate::objective::{TargetKind, TargetMode};
use crate::patch::Dataset;
use crate::run::{self, write_atomic};
use crate::training::{read_metrics, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TargetScale,
    ContextScale,
    NTargets,
    MaskingStrategy,
    TargetMaskMode,
    PredictorDepth,
    PredictorWidth,
    WdMode,
    TargetKind,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 9] = [
        AblationAxis::TargetScale,
        AblationAxis::ContextScale,
        AblationAxis::NTargets,
        AblationAxis::MaskingStrategy,
        AblationAxis::TargetMaskMode,
        AblationAxis::PredictorDepth,
        AblationAxis::PredictorWidth,
        AblationAxis::WdMode,
        AblationAxis::TargetKind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::TargetScale => "target_scale",
            AblationAxis::ContextScale => "context_scale",
            AblationAxis::NTargets => "n_targets",
            AblationAxis::MaskingStrategy => "masking_strategy",
            AblationAxis::TargetMaskMode => "target_mask_mode",
            AblationAxis::PredictorDepth => "predictor_depth",
            AblationAxis::PredictorWidth => "predictor_width",
            AblationAxis::WdMode => "wd_mode",
            AblationAxis::TargetKind => "target_kind",
        }
    }

    /// Column header used in rendered tables.
    pub fn header(self) -> &'static str {
        match self {
            AblationAxis::TargetScale => "Target scale",
            AblationAxis::ContextScale => "Context scale",
            AblationAxis::NTargets => "Freq.",
            AblationAxis::MaskingStrategy => "Mask",
            AblationAxis::TargetMaskMode => "Target masking",
            AblationAxis::PredictorDepth => "Predictor depth",
            AblationAxis::PredictorWidth => "Predictor width",
            AblationAxis::WdMode => "Weight decay",
            AblationAxis::TargetKind => "Targets",
        }
    }

    /// Sets this axis of `cfg` to `value`.
    pub fn apply(self, value: &str, cfg: &mut TrainConfig) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{}: `{value}` is not {what}", self.name()));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("a pair (lo, hi)"));
        let pair = || -> Result<(f64, f64)> {
            let inner = value
                .trim()
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| bad("a pair (lo, hi)"))?;
            let (a, b) = inner.split_once(',').ok_or_else(|| bad("a pair (lo, hi)"))?;
            Ok((num(a)?, num(b)?))
        };
        let count = || value.trim().parse::<usize>().map_err(|_| bad("a count"));
        match self {
            AblationAxis::TargetScale => cfg.mask.targets.scale = pair()?,
            AblationAxis::ContextScale => cfg.mask.context.scale = pair()?,
            AblationAxis::NTargets => cfg.mask.targets.count = count()?,
            AblationAxis::MaskingStrategy => cfg.mask.strategy = value.parse::<Strategy>()?,
            AblationAxis::TargetMaskMode => cfg.target_mode = value.parse::<TargetMode>()?,
            AblationAxis::PredictorDepth => cfg.predictor.depth = count()?,
            AblationAxis::PredictorWidth => cfg.predictor.width = count()?,
            AblationAxis::WdMode => {
                (cfg.wd_start, cfg.wd_end) = match value {
                    "ramp" => (0.04, 0.4),
                    "fixed" => (0.05, 0.05),
                    _ => return Err(bad("`ramp` or `fixed`")),
                }
            }
            AblationAxis::TargetKind => cfg.target_kind = value.parse::<TargetKind>()?,
        }
        Ok(())
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// The `[ablation]` section of a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub name: String,
    pub axis: AblationAxis,
    pub values: Vec<String>,
}

impl AblationSpec {
    /// Every value must produce a valid config from `base`.
    pub fn check(&self, base: &TrainConfig) -> std::result::Result<(), (&'static str, String)> {
        if self.values.is_empty() {
            return Err(("ablation.values", "must not be empty".into()));
        }
        for v in &self.values {
            let mut c = base.clone();
            self.axis
                .apply(v, &mut c)
                .map_err(|e| ("ablation.values", e.to_string()))?;
            c.check()
                .map_err(|(k, m)| ("ablation.values", format!("`{v}` gives {k}: {m}")))?;
        }
        Ok(())
    }

    pub fn point_config(&self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut c = base.clone();
        self.axis.apply(value, &mut c)?;
        c.validate()?;
        Ok(c)
    }
}

/// Knobs for cutting a sweep down, e.g. for CI.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AblationOptions {
    /// Train each point for at most this many steps.
    pub max_steps: Option<u64>,
    /// Use only the first `n` grid values.
    pub limit_points: Option<usize>,
    /// Size of the synthetic probe set.
    pub probe_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub status: String,
    pub error: Option<String>,
    pub steps: u64,
    /// Mean loss over the last 50 steps (or fewer).
    pub final_loss: Option<f64>,
    pub top1: Option<f64>,
    /// Top-1 with 10% of the training labels.
    pub top1_low_shot: Option<f64>,
    pub count_top1: Option<f64>,
    pub effective_rank: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let header = [
            self.axis.header(),
            "Status",
            "Steps",
            "Loss",
            "Top-1",
            "Top-1 (10%)",
            "Count",
            "Eff. rank",
        ];
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.value.clone(),
                    r.status.clone(),
                    r.steps.to_string(),
                    r.final_loss.map_or("-".into(), |v| format!("{v:.3}")),
                    pct(r.top1),
                    pct(r.top1_low_shot),
                    pct(r.count_top1),
                    r.effective_rank.map_or("-".into(), |v| format!("{v:.2}")),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "{} ({})", self.name, self.axis);
        let line = |s: &mut String, row: &[String]| {
            let parts: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", parts.join(" | ").trim_end());
        };
        line(&mut s, &header.map(String::from));
        let _ = writeln!(
            s,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
        );
        for row in &cells {
            line(&mut s, row);
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(s, "! {}: {}", r.value, r.error.as_deref().unwrap_or(""));
        }
        s
    }
}

/// The synthetic probe set for a probe config.
pub fn probe_dataset(probe: &ProbeConfig, image_size: usize, count: Option<usize>) -> Result<Dataset> {
    data::generate(&SynthConfig {
        image_size,
        count: count.unwrap_or(probe.data_count),
        seed: probe.data_seed,
        ..SynthConfig::default()
    })
}

fn slug(v: &str) -> String {
    let s: String = v
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    s.trim_matches('_').replace("__", "_")
}

/// Trains, probes and summarizes every point of the sweep in `cfg`. A point
/// that fails is recorded and the sweep continues. Writes `results.json`
/// and `table.txt` under `out`.
pub fn run_ablation(cfg: &ConfigFile, out: &Path, opts: &AblationOptions) -> Result<AblationTable> {
    let spec = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [ablation] section".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let probe_data = probe_dataset(&cfg.probe, cfg.train.model.image_size, opts.probe_count)?;
    let n = opts.limit_points.unwrap_or(spec.values.len()).min(spec.values.len());
    let mut rows = Vec::with_capacity(n);
    for (i, value) in spec.values[..n].iter().enumerate() {
        let t0 = Instant::now();
        let dir = out.join(format!("{i:02}_{}", slug(value)));
        log::info!("ablation {} = {value}", spec.axis);
        let row = match run_point(cfg, spec, value, &dir, opts, &probe_data) {
            Ok(mut row) => {
                row.wall_s = t0.elapsed().as_secs_f64();
                row
            }
            Err(e) => {
                log::warn!("ablation point {value} failed: {e}");
                AblationRow {
                    value: value.clone(),
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    steps: 0,
                    final_loss: None,
                    top1: None,
                    top1_low_shot: None,
                    count_top1: None,
                    effective_rank: None,
                    mean_cosine: None,
                    wall_s: t0.elapsed().as_secs_f64(),
                }
            }
        };
        rows.push(row);
    }
    let table = AblationTable {
        name: spec.name.clone(),
        axis: spec.axis,
        rows,
    };
    write_atomic(&out.join("results.json"), &serde_json::to_vec_pretty(&table)?)?;
    write_atomic(&out.join("table.txt"), table.render().as_bytes())?;
    Ok(table)
}

fn run_point(
    cfg: &ConfigFile,
    spec: &AblationSpec,
    value: &str,
    dir: &Path,
    opts: &AblationOptions,
    probe_data: &Dataset,
) -> Result<AblationRow> {
    let mut train = spec.point_config(&cfg.train, value)?;
    if let Some(m) = opts.max_steps {
        train.max_steps = m;
    }
    let point = ConfigFile {
        train,
        probe: cfg.probe.clone(),
        ablation: None,
    };
    let summary = run::pretrain(&point, dir, None)?;
    let metrics = read_metrics(&dir.join(run::METRICS))?;
    let losses: Vec<f64> = metrics.iter().filter_map(|m| m.loss).collect();
    let tail = &losses[losses.len().saturating_sub(50)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);

    let ckpt = Checkpoint::load(&summary.final_checkpoint)?;
    let (_, encoder, params) = load_encoder(&ckpt)?;
    let full = probe_encoder(&encoder, &params, probe_data, &cfg.probe)?;
    let low = probe_encoder(
        &encoder,
        &params,
        probe_data,
        &ProbeConfig {
            label_fraction: 0.1,
            ..cfg.probe.clone()
        },
    )?;
    let count = probe_encoder(
        &encoder,
        &params,
        probe_data,
        &ProbeConfig {
            task: ProbeTask::Count,
            ..cfg.probe.clone()
        },
    )?;
    let feats = extract_features(&encoder, &params, &probe_data.images, Representation::LastLayerAvgPool)?;
    let collapse = collapse_report(feats.view())?;
    Ok(AblationRow {
        value: value.to_string(),
        status: "ok".into(),
        error: None,
        steps: summary.final_step,
        final_loss,
        top1: Some(full.best.accuracy),
        top1_low_shot: Some(low.best.accuracy),
        count_top1: Some(count.best.accuracy),
        effective_rank: Some(collapse.effective_rank),
        mean_cosine: Some(collapse.mean_pairwise_cosine),
        wall_s: 0.0,
    })
}
