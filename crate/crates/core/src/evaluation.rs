//! Frozen-encoder evaluation: pooled features, a softmax linear probe and
//! collapse diagnostics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::Encoder;
use crate::checkpoint::Checkpoint;
use crate::config;
use crate::error::{Error, Result};
use crate::patch::{Dataset, Image, Label};
use crate::seed::derive_rng;
use crate::tensor::ParamStore;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Mean over patches of the final-normed last block output.
    LastLayerAvgPool,
    /// Means of the last four blocks (each final-normed), concatenated.
    ConcatLast4AvgPool,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::LastLayerAvgPool => "last_layer_avgpool",
            Representation::ConcatLast4AvgPool => "concat_last4_avgpool",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_layer_avgpool" => Ok(Representation::LastLayerAvgPool),
            "concat_last4_avgpool" => Ok(Representation::ConcatLast4AvgPool),
            _ => Err(Error::Config(format!("unknown representation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// Feature standardization with training-split statistics, then linear.
    BatchnormLinear,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Linear => "linear",
            Head::BatchnormLinear => "batchnorm_linear",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Head::Linear),
            "batchnorm_linear" => Ok(Head::BatchnormLinear),
            _ => Err(Error::Config(format!("unknown probe head `{s}`"))),
        }
    }
}

/// Which label the probe predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Type of the dominant shape.
    Shape,
    /// Number of shapes, as a class.
    Count,
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeTask::Shape => "shape",
            ProbeTask::Count => "count",
        })
    }
}

impl FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(ProbeTask::Shape),
            "count" => Ok(ProbeTask::Count),
            _ => Err(Error::Config(format!("unknown probe task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub representations: Vec<Representation>,
    pub heads: Vec<Head>,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub task: ProbeTask,
    /// Fraction of training labels kept (per class, at least one).
    pub label_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Size and seed of the synthetic probe set when no dataset is given.
    pub data_count: usize,
    pub data_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            representations: vec![Representation::LastLayerAvgPool],
            heads: vec![Head::Linear, Head::BatchnormLinear],
            epochs: 300,
            lr_grid: vec![0.1, 1.0],
            wd_grid: vec![1e-4, 1e-3, 1e-2],
            task: ProbeTask::Shape,
            label_fraction: 1.0,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
            data_count: 2000,
            data_seed: 1_000_003,
        }
    }
}

impl ProbeConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.representations.is_empty() {
            return Err(("probe.representations", "must not be empty".into()));
        }
        if self.heads.is_empty() {
            return Err(("probe.heads", "must not be empty".into()));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&v| !(v > 0.0)) {
            return Err(("probe.lr_grid", "must be a non-empty list of positive values".into()));
        }
        if self.wd_grid.is_empty() || self.wd_grid.iter().any(|&v| !(v >= 0.0)) {
            return Err((
                "probe.wd_grid",
                "must be a non-empty list of non-negative values".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(("probe.epochs", "must be at least 1".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err((
                "probe.label_fraction",
                format!("{} must lie in (0, 1]", self.label_fraction),
            ));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0 && t + v < 1.0) {
            return Err((
                "probe.train_fraction",
                format!("train {t} and val {v} fractions must be positive and leave a test split"),
            ));
        }
        if self.data_count < 10 {
            return Err(("probe.data_count", format!("{} is too small", self.data_count)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, m)| Error::Config(format!("{k}: {m}")))
    }

    pub fn labels(&self, labels: &[Label]) -> Vec<usize> {
        labels
            .iter()
            .map(|l| match self.task {
                ProbeTask::Shape => l.class as usize,
                ProbeTask::Count => l.count as usize,
            })
            .collect()
    }
}

/// Mean over consecutive groups of `tokens` rows.
pub fn average_pool(x: ArrayView2<'_, f32>, tokens: usize) -> Array2<f64> {
    let n = x.nrows() / tokens;
    let mut out = Array2::zeros((n, x.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for r in i * tokens..(i + 1) * tokens {
            for (o, &v) in row.iter_mut().zip(x.row(r)) {
                *o += v as f64;
            }
        }
        row /= tokens as f64;
    }
    out
}

const FEATURE_BATCH: usize = 64;

/// Pooled features for every image, one matrix per requested
/// representation, from a single pass per batch.
pub fn extract_features_many(
    encoder: &Encoder<f32>,
    params: &ParamStore<f32>,
    images: &[Image],
    reps: &[Representation],
) -> Result<Vec<Array2<f64>>> {
    let d = encoder.config.width;
    let needs_hidden = reps.contains(&Representation::ConcatLast4AvgPool);
    if needs_hidden && encoder.depth() < 4 {
        return Err(Error::Config(format!(
            "concat_last4_avgpool needs at least 4 blocks, encoder has {}",
            encoder.depth()
        )));
    }
    let n = encoder.grid.n_patches();
    let mut outs: Vec<Array2<f64>> = reps
        .iter()
        .map(|r| match r {
            Representation::LastLayerAvgPool => Array2::zeros((images.len(), d)),
            Representation::ConcatLast4AvgPool => Array2::zeros((images.len(), 4 * d)),
        })
        .collect();
    for (c, chunk) in images.chunks(FEATURE_BATCH).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let res = encoder.forward_full_batch(params, &refs, needs_hidden)?;
        let r0 = c * FEATURE_BATCH;
        for (rep, out) in reps.iter().zip(outs.iter_mut()) {
            let rows = ndarray::s![r0..r0 + chunk.len(), ..];
            match rep {
                Representation::LastLayerAvgPool => {
                    out.slice_mut(rows).assign(&average_pool(res.output.view(), n));
                }
                Representation::ConcatLast4AvgPool => {
                    let depth = res.hidden.len();
                    for (k, h) in res.hidden[depth - 4..].iter().enumerate() {
                        let normed = encoder.final_norm(params, h.view());
                        out.slice_mut(ndarray::s![r0..r0 + chunk.len(), k * d..(k + 1) * d])
                            .assign(&average_pool(normed.view(), n));
                    }
                }
            }
        }
    }
    Ok(outs)
}

pub fn extract_features(
    encoder: &Encoder<f32>,
    params: &ParamStore<f32>,
    images: &[Image],
    rep: Representation,
) -> Result<Array2<f64>> {
    Ok(extract_features_many(encoder, params, images, &[rep])?.remove(0))
}

/// Encoder, its weights and the run config stored in a checkpoint (target
/// encoder preferred).
pub fn load_encoder(ckpt: &Checkpoint) -> Result<(TrainConfig, Encoder<f32>, ParamStore<f32>)> {
    let cfg = config::parse_str(&ckpt.config_text, "<checkpoint config>")?.train;
    let params = ckpt.encoder_params()?;
    let encoder = Encoder::for_params(cfg.model, &params)
        .map_err(|e| Error::CheckpointIncompatible(format!("encoder tensors do not match the stored config: {e}")))?;
    Ok((cfg, encoder, params))
}

/// Checks that dataset images fit the encoder.
pub fn check_dataset(encoder: &Encoder<f32>, dataset: &Dataset) -> Result<()> {
    let m = &encoder.config;
    match dataset.dims() {
        Some((h, w, c)) if h == m.image_size && w == m.image_size && c == m.channels => Ok(()),
        Some((h, w, c)) => Err(Error::Dimension(format!(
            "dataset images are {h}x{w}x{c}, encoder expects {0}x{0}x{1}",
            m.image_size, m.channels
        ))),
        None => Err(Error::Contract("dataset is empty".into())),
    }
}

/// Features of a labeled dataset under a checkpoint's encoder.
pub fn extract_features_ckpt(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    rep: Representation,
) -> Result<(Array2<f64>, Vec<Label>)> {
    let (_, encoder, params) = load_encoder(ckpt)?;
    check_dataset(&encoder, dataset)?;
    let labels = dataset
        .labels
        .clone()
        .ok_or_else(|| Error::Contract("dataset has no labels".into()))?;
    Ok((extract_features(&encoder, &params, &dataset.images, rep)?, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeOutcome {
    /// Top-1 on the held-out test split for the hyperparameters with the
    /// best validation accuracy.
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    pub head: Head,
    pub lr: f64,
    pub wd: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn split(labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Split> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(cfg.seed, "probe-split", 0));
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Contract(format!("{n} samples are too few to split")));
    }
    let mut train = order[..n_train].to_vec();
    if cfg.label_fraction < 1.0 {
        let mut per_class = vec![0usize; n_classes];
        for &i in &train {
            per_class[labels[i]] += 1;
        }
        let quota: Vec<usize> = per_class
            .iter()
            .map(|&c| ((c as f64 * cfg.label_fraction).round() as usize).clamp(1.min(c), c))
            .collect();
        let mut taken = vec![0usize; n_classes];
        train.retain(|&i| {
            let c = labels[i];
            taken[c] += 1;
            taken[c] <= quota[c]
        });
    }
    Ok(Split {
        train,
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// Softmax regression `x W + b` fit by full-batch gradient descent with
/// heavy-ball momentum on mean cross-entropy plus `wd/2 |W|^2`, from zeros.
pub struct Softmax {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Softmax {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[usize], classes: usize, lr: f64, wd: f64, epochs: usize) -> Self {
        let (n, d) = x.dim();
        let mut w = Array2::<f64>::zeros((d, classes));
        let mut b = Array1::<f64>::zeros(classes);
        let mut vw = w.clone();
        let mut vb = b.clone();
        let mut onehot = Array2::<f64>::zeros((n, classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        for _ in 0..epochs {
            let mut p = softmax_rows(x.dot(&w) + &b);
            p -= &onehot;
            p /= n as f64;
            let gw = x.t().dot(&p) + &w * wd;
            let gb = p.sum_axis(Axis(0));
            vw = vw * 0.9 + gw;
            vb = vb * 0.9 + gb;
            w.scaled_add(-lr, &vw);
            b.scaled_add(-lr, &vb);
        }
        Self { w, b }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        let logits = x.dot(&self.w) + &self.b;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    hits as f64 / y.len().max(1) as f64
}

/// Multinomial logistic regression on frozen features, grid-searched over
/// head x lr x wd on a seeded validation split, reported on the test split.
pub fn linear_probe(features: ArrayView2<'_, f64>, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some((i, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            layer: i / features.ncols().max(1),
            site: "probe features",
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Contract("probe needs at least two classes".into()));
    }
    if counts.contains(&1) {
        return Err(Error::Contract("every class needs at least two samples".into()));
    }
    let sp = split(labels, classes, cfg)?;
    let take = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
        (features.select(Axis(0), idx), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = take(&sp.train);
    let (xva, yva) = take(&sp.val);
    let (xte, yte) = take(&sp.test);

    let mut best: Option<ProbeOutcome> = None;
    for &head in &cfg.heads {
        let (a, b, c) = match head {
            Head::Linear => (xtr.clone(), xva.clone(), xte.clone()),
            Head::BatchnormLinear => {
                let mean = xtr.mean_axis(Axis(0)).expect("non-empty train split");
                let std = xtr.std_axis(Axis(0), 0.0).mapv(|s| (s * s + 1e-5).sqrt());
                let norm = |x: &Array2<f64>| (x - &mean) / &std;
                (norm(&xtr), norm(&xva), norm(&xte))
            }
        };
        for &lr in &cfg.lr_grid {
            for &wd in &cfg.wd_grid {
                let model = Softmax::fit(a.view(), &ytr, classes, lr, wd, cfg.epochs);
                let val = accuracy(&model.predict(b.view()), &yva);
                if best.as_ref().is_some_and(|b| val <= b.val_accuracy) {
                    continue;
                }
                best = Some(ProbeOutcome {
                    accuracy: accuracy(&model.predict(c.view()), &yte),
                    val_accuracy: val,
                    train_accuracy: accuracy(&model.predict(a.view()), &ytr),
                    head,
                    lr,
                    wd,
                    n_train: ytr.len(),
                    n_val: yva.len(),
                    n_test: yte.len(),
                    n_classes: present,
                });
            }
        }
    }
    Ok(best.expect("grids are non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderProbe {
    pub representation: Representation,
    pub best: ProbeOutcome,
    pub all: Vec<(Representation, ProbeOutcome)>,
}

/// Probes every configured representation and keeps the one with the best
/// validation accuracy.
pub fn probe_encoder(
    encoder: &Encoder<f32>,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    cfg: &ProbeConfig,
) -> Result<EncoderProbe> {
    check_dataset(encoder, dataset)?;
    let labels = cfg.labels(
        dataset
            .labels
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset has no labels".into()))?,
    );
    let feats = extract_features_many(encoder, params, &dataset.images, &cfg.representations)?;
    let mut all = Vec::new();
    for (rep, f) in cfg.representations.iter().zip(&feats) {
        all.push((*rep, linear_probe(f.view(), &labels, cfg)?));
    }
    let (representation, best) = all
        .iter()
        .fold(None::<&(Representation, ProbeOutcome)>, |acc, x| match acc {
            Some(a) if a.1.val_accuracy >= x.1.val_accuracy => Some(a),
            _ => Some(x),
        })
        .cloned()
        .expect("at least one representation");
    Ok(EncoderProbe {
        representation,
        best,
        all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub per_dim_std: Vec<f64>,
    pub mean_std: f64,
    pub mean_pairwise_cosine: f64,
    pub effective_rank: f64,
}

/// Spread, similarity and spectrum statistics of a feature matrix.
pub fn collapse_report(features: ArrayView2<'_, f64>) -> Result<CollapseReport> {
    let (n, d) = features.dim();
    if n < 2 || d == 0 {
        return Err(Error::Contract(format!(
            "collapse report needs at least 2 samples, got {n}"
        )));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &features - &mean;
    let per_dim_std: Vec<f64> = centered
        .columns()
        .into_iter()
        .map(|c| (c.dot(&c) / n as f64).sqrt())
        .collect();
    let mean_std = per_dim_std.iter().sum::<f64>() / d as f64;

    // mean over pairs i != j of cos(x_i, x_j) via |sum of unit rows|^2
    let mut sum = Array1::<f64>::zeros(d);
    let mut nonzero = 0usize;
    for row in features.rows() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            sum.scaled_add(1.0 / norm, &row);
            nonzero += 1;
        }
    }
    let mean_pairwise_cosine = if nonzero == 0 {
        1.0
    } else {
        (sum.dot(&sum) - nonzero as f64) / (n * (n - 1)) as f64
    };

    let gram = centered.t().dot(&centered);
    let m = DMatrix::from_fn(d, d, |i, j| gram[[i, j]]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let sv: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let total: f64 = sv.iter().sum();
    let scale = sv.iter().cloned().fold(0.0, f64::max);
    let effective_rank = if total <= 1e-12 * scale.max(1e-300) || total == 0.0 {
        1.0
    } else {
        let h: f64 = sv
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / total;
                -p * p.ln()
            })
            .sum();
        h.exp()
    };
    Ok(CollapseReport {
        per_dim_std,
        mean_std,
        mean_pairwise_cosine,
        effective_rank,
    })
}
