//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [optim]
//! batch_size = 64
//! lr_peak = 5e-4
//! [mask]
//! target_scale = (0.15, 0.2)
//! ```
//!
//! Every key is optional; missing keys take the desk-scale defaults. Unknown
//! sections and keys are errors. [`to_text`] writes every key in a fixed
//! order, so `parse -> to_text -> parse -> to_text` is byte-stable.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::{AblationAxis, AblationSpec};
use crate::error::{Error, Result};
use crate::evaluation::{Head, ProbeConfig, Representation};
use crate::masking::Strategy;
use crate::objective::{TargetKind, TargetMode};
use crate::predictor::PredictorConfig;
use crate::training::TrainConfig;

/// Everything a config file can hold.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct ConfigFile {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub ablation: Option<AblationSpec>,
}


#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

const SECTIONS: &[&str] = &[
    "run",
    "data",
    "model",
    "predictor",
    "mask",
    "optim",
    "ema",
    "objective",
    "probe",
    "ablation",
];

pub fn parse_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    parse_str(&text, &path.display().to_string())
}

pub fn parse_str(text: &str, origin: &str) -> Result<ConfigFile> {
    let entries = lex(text, origin)?;
    let mut p = Parser {
        origin,
        entries,
        used: Default::default(),
    };
    let cfg = p.build()?;
    if let Some((key, e)) = p
        .entries
        .iter()
        .filter(|(k, _)| !p.used.contains(k.as_str()))
        .min_by_key(|(_, e)| e.line)
    {
        return Err(Error::ConfigKey {
            path: origin.to_string(),
            line: e.line,
            key: key.clone(),
            msg: "unknown key".into(),
        });
    }
    let line_of = |key: &str| {
        p.entries
            .iter()
            .filter(|(k, _)| *k == key || k.starts_with(&format!("{key}.")))
            .map(|(_, e)| e.line)
            .min()
            .unwrap_or(0)
    };
    let invalid = |(key, msg): (&'static str, String)| Error::ConfigKey {
        path: origin.to_string(),
        line: line_of(key),
        key: key.to_string(),
        msg,
    };
    cfg.train.check().map_err(invalid)?;
    cfg.probe.check().map_err(invalid)?;
    if let Some(a) = &cfg.ablation {
        a.check(&cfg.train).map_err(invalid)?;
    }
    Ok(cfg)
}

fn lex(text: &str, origin: &str) -> Result<HashMap<String, Entry>> {
    let mut section: Option<String> = None;
    let mut out: HashMap<String, Entry> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |key: &str, msg: &str| Error::ConfigKey {
            path: origin.to_string(),
            line,
            key: key.to_string(),
            msg: msg.to_string(),
        };
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(s, "malformed section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(name, "unknown section"));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| err(s, "expected `key = value`"))?;
        let k = k.trim();
        let sec = section.as_deref().ok_or_else(|| err(k, "key outside any section"))?;
        let key = format!("{sec}.{k}");
        if let Some(prev) = out.get(&key) {
            return Err(err(&key, &format!("duplicate key (first set on line {})", prev.line)));
        }
        out.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line,
            },
        );
    }
    Ok(out)
}

struct Parser<'a> {
    origin: &'a str,
    entries: HashMap<String, Entry>,
    used: std::collections::HashSet<String>,
}

impl Parser<'_> {
    fn get<T>(&mut self, key: &str, parse: impl FnOnce(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        parse(&e.value).map(Some).map_err(|msg| Error::ConfigKey {
            path: self.origin.to_string(),
            line: e.line,
            key: key.to_string(),
            msg,
        })
    }

    fn set<T>(
        &mut self,
        key: &str,
        slot: &mut T,
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<()> {
        if let Some(v) = self.get(key, parse)? {
            *slot = v;
        }
        Ok(())
    }

    fn build(&mut self) -> Result<ConfigFile> {
        let mut t = TrainConfig::default();
        self.set("run.seed", &mut t.seed, num)?;
        self.set("run.checkpoint_every", &mut t.checkpoint_every, num)?;
        self.set("run.max_steps", &mut t.max_steps, num)?;
        self.set("run.prefetch", &mut t.prefetch, num)?;

        self.set("data.path", &mut t.data_path, |s| {
            Ok((!s.is_empty()).then(|| PathBuf::from(s)))
        })?;
        self.set("data.count", &mut t.data_count, num)?;
        self.set("data.seed", &mut t.data_seed, num)?;

        let m = &mut t.model;
        self.set("model.width", &mut m.width, num)?;
        self.set("model.depth", &mut m.depth, num)?;
        self.set("model.heads", &mut m.heads, num)?;
        self.set("model.mlp_ratio", &mut m.mlp_ratio, num)?;
        self.set("model.patch_size", &mut m.patch_size, num)?;
        self.set("model.image_size", &mut m.image_size, num)?;
        self.set("model.channels", &mut m.channels, num)?;

        // predictor defaults follow the encoder
        t.predictor = PredictorConfig::desk_default(t.model.width, t.model.heads);
        let pr = &mut t.predictor;
        self.set("predictor.width", &mut pr.width, num)?;
        self.set("predictor.depth", &mut pr.depth, num)?;
        self.set("predictor.heads", &mut pr.heads, num)?;
        self.set("predictor.mlp_ratio", &mut pr.mlp_ratio, num)?;

        let mk = &mut t.mask;
        self.set("mask.strategy", &mut mk.strategy, enumerated::<Strategy>)?;
        self.set("mask.target_scale", &mut mk.targets.scale, pair)?;
        self.set("mask.target_aspect", &mut mk.targets.aspect, pair)?;
        self.set("mask.n_targets", &mut mk.targets.count, num)?;
        self.set("mask.context_scale", &mut mk.context.scale, pair)?;
        self.set("mask.context_aspect", &mut mk.context.aspect, pair)?;
        self.set("mask.block_scale", &mut mk.block_scale, num)?;
        self.set("mask.random_ratio", &mut mk.random_ratio, num)?;
        self.set("mask.min_context_patches", &mut mk.min_context_patches, num)?;
        self.set("mask.max_retries", &mut mk.max_retries, num)?;

        self.set("optim.batch_size", &mut t.batch_size, num)?;
        self.set("optim.epochs", &mut t.epochs, num)?;
        self.set("optim.warmup_epochs", &mut t.warmup_epochs, num)?;
        self.set("optim.lr_start", &mut t.lr_start, num)?;
        self.set("optim.lr_peak", &mut t.lr_peak, num)?;
        self.set("optim.lr_final", &mut t.lr_final, num)?;
        self.set("optim.wd_start", &mut t.wd_start, num)?;
        self.set("optim.wd_end", &mut t.wd_end, num)?;
        self.set("optim.beta1", &mut t.beta1, num)?;
        self.set("optim.beta2", &mut t.beta2, num)?;
        self.set("optim.eps", &mut t.eps, num)?;
        self.set("optim.exclude_norm_bias_decay", &mut t.exclude_norm_bias_decay, boolean)?;

        self.set("ema.start", &mut t.ema_start, num)?;
        self.set("ema.end", &mut t.ema_end, num)?;

        self.set("objective.target_mode", &mut t.target_mode, enumerated::<TargetMode>)?;
        self.set("objective.target_kind", &mut t.target_kind, enumerated::<TargetKind>)?;
        self.set("objective.normalize_per_patch", &mut t.normalize_per_patch, boolean)?;

        let mut p = ProbeConfig::default();
        self.set(
            "probe.representations",
            &mut p.representations,
            list_of::<Representation>,
        )?;
        self.set("probe.heads", &mut p.heads, list_of::<Head>)?;
        self.set("probe.epochs", &mut p.epochs, num)?;
        self.set("probe.lr_grid", &mut p.lr_grid, list_of::<f64>)?;
        self.set("probe.wd_grid", &mut p.wd_grid, list_of::<f64>)?;
        self.set("probe.task", &mut p.task, enumerated)?;
        self.set("probe.label_fraction", &mut p.label_fraction, num)?;
        self.set("probe.train_fraction", &mut p.train_fraction, num)?;
        self.set("probe.val_fraction", &mut p.val_fraction, num)?;
        self.set("probe.seed", &mut p.seed, num)?;
        self.set("probe.data_count", &mut p.data_count, num)?;
        self.set("probe.data_seed", &mut p.data_seed, num)?;

        let name = self.get("ablation.name", |s| Ok(s.to_string()))?;
        let axis = self.get("ablation.axis", enumerated::<AblationAxis>)?;
        let values = self.get("ablation.values", |s| Ok(split_list(s)))?;
        let ablation = match (axis, values) {
            (Some(axis), Some(values)) => Some(AblationSpec {
                name: name.unwrap_or_else(|| axis.to_string()),
                axis,
                values,
            }),
            (None, None) if name.is_none() => None,
            (None, _) => return Err(self.missing("ablation.axis")),
            (Some(_), None) => return Err(self.missing("ablation.values")),
        };

        Ok(ConfigFile {
            train: t,
            probe: p,
            ablation,
        })
    }

    fn missing(&self, key: &str) -> Error {
        let line = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with("ablation."))
            .map(|(_, e)| e.line)
            .min()
            .unwrap_or(0);
        Error::ConfigKey {
            path: self.origin.to_string(),
            line,
            key: key.to_string(),
            msg: "missing required field".into(),
        }
    }
}

fn num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|_| format!("`{s}` is not a valid number"))
}

fn boolean(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{s}` is not `true` or `false`")),
    }
}

fn enumerated<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|e| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    })
}

fn pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("`{s}` is not a pair `(lo, hi)`"))?;
    let (a, b) = inner
        .split_once(',')
        .ok_or_else(|| format!("`{s}` is not a pair `(lo, hi)`"))?;
    Ok((num(a.trim())?, num(b.trim())?))
}

/// Splits on commas outside parentheses.
pub fn split_list(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn list_of<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    split_list(s)
        .iter()
        .map(|v| v.parse::<T>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn fp((a, b): (f64, f64)) -> String {
    format!("({a:?}, {b:?})")
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

/// The fully resolved config, every key present, in canonical order.
pub fn to_text(cfg: &ConfigFile) -> String {
    let t = &cfg.train;
    let p = &cfg.probe;
    let mut s = String::new();
    let mut sec = |name: &str, kv: Vec<(&str, String)>| {
        let _ = writeln!(s, "[{name}]");
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push('\n');
    };
    sec(
        "run",
        vec![
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("prefetch", t.prefetch.to_string()),
        ],
    );
    sec(
        "data",
        vec![
            (
                "path",
                t.data_path.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("count", t.data_count.to_string()),
            ("seed", t.data_seed.to_string()),
        ],
    );
    let m = &t.model;
    sec(
        "model",
        vec![
            ("width", m.width.to_string()),
            ("depth", m.depth.to_string()),
            ("heads", m.heads.to_string()),
            ("mlp_ratio", f(m.mlp_ratio)),
            ("patch_size", m.patch_size.to_string()),
            ("image_size", m.image_size.to_string()),
            ("channels", m.channels.to_string()),
        ],
    );
    let pr = &t.predictor;
    sec(
        "predictor",
        vec![
            ("width", pr.width.to_string()),
            ("depth", pr.depth.to_string()),
            ("heads", pr.heads.to_string()),
            ("mlp_ratio", f(pr.mlp_ratio)),
        ],
    );
    let mk = &t.mask;
    sec(
        "mask",
        vec![
            ("strategy", mk.strategy.name().to_string()),
            ("target_scale", fp(mk.targets.scale)),
            ("target_aspect", fp(mk.targets.aspect)),
            ("n_targets", mk.targets.count.to_string()),
            ("context_scale", fp(mk.context.scale)),
            ("context_aspect", fp(mk.context.aspect)),
            ("block_scale", f(mk.block_scale)),
            ("random_ratio", f(mk.random_ratio)),
            ("min_context_patches", mk.min_context_patches.to_string()),
            ("max_retries", mk.max_retries.to_string()),
        ],
    );
    sec(
        "optim",
        vec![
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("lr_start", f(t.lr_start)),
            ("lr_peak", f(t.lr_peak)),
            ("lr_final", f(t.lr_final)),
            ("wd_start", f(t.wd_start)),
            ("wd_end", f(t.wd_end)),
            ("beta1", f(t.beta1)),
            ("beta2", f(t.beta2)),
            ("eps", f(t.eps)),
            ("exclude_norm_bias_decay", t.exclude_norm_bias_decay.to_string()),
        ],
    );
    sec("ema", vec![("start", f(t.ema_start)), ("end", f(t.ema_end))]);
    sec(
        "objective",
        vec![
            ("target_mode", t.target_mode.to_string()),
            ("target_kind", t.target_kind.to_string()),
            ("normalize_per_patch", t.normalize_per_patch.to_string()),
        ],
    );
    sec(
        "probe",
        vec![
            ("representations", join(&p.representations)),
            ("heads", join(&p.heads)),
            ("epochs", p.epochs.to_string()),
            (
                "lr_grid",
                p.lr_grid.iter().map(|&v| f(v)).collect::<Vec<_>>().join(", "),
            ),
            (
                "wd_grid",
                p.wd_grid.iter().map(|&v| f(v)).collect::<Vec<_>>().join(", "),
            ),
            ("task", p.task.to_string()),
            ("label_fraction", f(p.label_fraction)),
            ("train_fraction", f(p.train_fraction)),
            ("val_fraction", f(p.val_fraction)),
            ("seed", p.seed.to_string()),
            ("data_count", p.data_count.to_string()),
            ("data_seed", p.data_seed.to_string()),
        ],
    );
    if let Some(a) = &cfg.ablation {
        sec(
            "ablation",
            vec![
                ("name", a.name.clone()),
                ("axis", a.axis.to_string()),
                ("values", a.values.join(", ")),
            ],
        );
    }
    s.pop();
    s
}

/// SHA-256 of the resolved config text.
pub fn config_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}
