//! Regression targets, the representation-space loss, the pixel-space
//! variant and the EMA link between context and target encoders.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::Serialize;

use crate::backbone::Encoder;
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::patch::{patchify, Image, TokenSequence};
use crate::tensor::{ParamStore, Real};

/// Linear momentum ramp for the target encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmaSchedule {
    pub m_start: f64,
    pub m_end: f64,
    pub total_steps: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            m_start: 0.996,
            m_end: 1.0,
            total_steps: 1,
        }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_start > 0.0 && self.m_start <= self.m_end && self.m_end <= 1.0) {
            return Err(Error::Config(format!(
                "ema momentum must satisfy 0 < start <= end <= 1, got {} -> {}",
                self.m_start, self.m_end
            )));
        }
        Ok(())
    }
}

/// `m_start + (m_end - m_start) * step / total_steps`; out-of-range steps
/// are clamped.
pub fn momentum_at(schedule: &EmaSchedule, step: u64) -> f64 {
    let total = schedule.total_steps.max(1);
    if step > total {
        log::warn!("momentum requested at step {step} beyond schedule end {total}; clamping");
    }
    let t = step.min(total) as f64 / total as f64;
    schedule.m_start + (schedule.m_end - schedule.m_start) * t
}

/// `target <- m * target + (1 - m) * context` for every parameter.
pub fn ema_update<F: Real>(target: &mut ParamStore<F>, context: &ParamStore<F>, m: f64) -> Result<()> {
    target.check_layout(context)?;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("ema momentum {m} outside [0, 1]")));
    }
    let keep = F::from_f64c(m);
    let take = F::from_f64c(1.0 - m);
    for (t, c) in target.params_mut().iter_mut().zip(context.params()) {
        for (a, &b) in t.data.iter_mut().zip(&c.data) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_block: Vec<f64>,
    pub n_predicted_patches: usize,
}

/// Sum over each block's patches of the squared L2 error, averaged over the
/// `M` blocks.
pub fn compute_loss<F: Real>(predictions: &[TokenSequence<F>], targets: &[TokenSequence<F>]) -> Result<LossReport> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Contract(format!(
            "{} prediction blocks for {} target blocks",
            predictions.len(),
            targets.len()
        )));
    }
    let mut per_block = Vec::with_capacity(predictions.len());
    let mut n = 0;
    for (pred, tgt) in predictions.iter().zip(targets) {
        if pred.indices != tgt.indices {
            return Err(Error::Contract("prediction and target index sets differ".into()));
        }
        if pred.width() != tgt.width() {
            return Err(Error::Dimension("prediction and target widths differ".into()));
        }
        per_block.push(sq_dist(pred.embeddings.view(), tgt.embeddings.view()));
        n += pred.len();
    }
    let total = per_block.iter().sum::<f64>() / per_block.len() as f64;
    Ok(LossReport {
        total,
        per_block,
        n_predicted_patches: n,
    })
}

fn sq_dist<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64c();
            d * d
        })
        .sum()
}

/// Loss and its gradient for batched predictions laid out image-major, then
/// block, then patch (`batch * blocks * block_len` rows). Per-block entries
/// of the report are averaged over images. With `normalize_per_patch` every
/// block sum is divided by its patch count.
pub fn batched_loss<F: Real>(
    predictions: ArrayView2<'_, F>,
    targets: ArrayView2<'_, F>,
    batch: usize,
    blocks: usize,
    block_len: usize,
    normalize_per_patch: bool,
) -> Result<(LossReport, Array2<F>)> {
    if predictions.dim() != targets.dim() || predictions.nrows() != batch * blocks * block_len {
        return Err(Error::Contract("prediction/target layouts differ".into()));
    }
    let norm = if normalize_per_patch { block_len as f64 } else { 1.0 };
    let mut per_block = vec![0.0; blocks];
    for b in 0..batch {
        for (i, pb) in per_block.iter_mut().enumerate() {
            let r0 = (b * blocks + i) * block_len;
            let rows = s![r0..r0 + block_len, ..];
            *pb += sq_dist(predictions.slice(rows), targets.slice(rows)) / norm;
        }
    }
    per_block.iter_mut().for_each(|v| *v /= batch as f64);
    let total = per_block.iter().sum::<f64>() / blocks as f64;
    let scale = F::from_f64c(2.0 / (batch as f64 * blocks as f64 * norm));
    let grad = (&predictions - &targets) * scale;
    Ok((
        LossReport {
            total,
            per_block,
            n_predicted_patches: batch * blocks * block_len,
        },
        grad,
    ))
}

/// Where the target-block mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// One full-image target-encoder pass, then select each block's rows.
    Output,
    /// A separate target-encoder pass over each block's patches only.
    Input,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::Output => "output",
            TargetMode::Input => "input",
        })
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" => Ok(TargetMode::Output),
            "input" => Ok(TargetMode::Input),
            _ => Err(Error::Config(format!("unknown target mask mode `{s}`"))),
        }
    }
}

/// What the predictor regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Representation,
    Pixels,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::Representation => "representation",
            TargetKind::Pixels => "pixels",
        })
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representation" => Ok(TargetKind::Representation),
            "pixels" => Ok(TargetKind::Pixels),
            _ => Err(Error::Config(format!("unknown target kind `{s}`"))),
        }
    }
}

/// Target representations for each mask of one image. The target
/// parameters are only read.
pub fn compute_targets<F: Real>(
    encoder: &Encoder<F>,
    target_params: &ParamStore<F>,
    image: &Image,
    masks: &[Mask],
    mode: TargetMode,
) -> Result<Vec<TokenSequence<F>>> {
    if masks.iter().any(Mask::is_empty) {
        return Err(Error::Contract("target mask is empty".into()));
    }
    if masks.iter().any(|m| m.grid != encoder.grid) {
        return Err(Error::Contract("target mask grid does not match the encoder".into()));
    }
    match mode {
        TargetMode::Output => {
            let full = encoder.forward_full_image(target_params, image)?;
            masks
                .iter()
                .map(|m| TokenSequence::new(m.indices().to_vec(), full.select(m.indices())?))
                .collect()
        }
        TargetMode::Input => masks
            .iter()
            .map(|m| encoder.forward_indices(target_params, image, m.indices()))
            .collect(),
    }
}

/// Batched targets in the predictor's row layout.
pub fn batched_targets<F: Real>(
    encoder: &Encoder<F>,
    target_params: &ParamStore<F>,
    image_patches: &[&Array2<F>],
    targets: &[Vec<&[usize]>],
    mode: TargetMode,
) -> Result<Array2<F>> {
    let batch = image_patches.len();
    let blocks = targets.first().map_or(0, Vec::len);
    let tlen = targets.first().and_then(|t| t.first()).map_or(0, |t| t.len());
    let width = encoder.config.width;
    let mut out = Array2::zeros((batch * blocks * tlen, width));
    match mode {
        TargetMode::Output => {
            let n = encoder.grid.n_patches();
            let all: Vec<usize> = (0..n).collect();
            let sets: Vec<&[usize]> = vec![&all[..]; batch];
            let full = encoder.encode(target_params, image_patches, &sets, false)?.output;
            for (b, tgts) in targets.iter().enumerate() {
                for (i, t) in tgts.iter().enumerate() {
                    let base = (b * blocks + i) * tlen;
                    for (k, &j) in t.iter().enumerate() {
                        out.row_mut(base + k).assign(&full.row(b * n + j));
                    }
                }
            }
        }
        TargetMode::Input => {
            let mut imgs = Vec::with_capacity(batch * blocks);
            let mut sets = Vec::with_capacity(batch * blocks);
            for (b, tgts) in targets.iter().enumerate() {
                for t in tgts {
                    imgs.push(image_patches[b]);
                    sets.push(*t);
                }
            }
            out = encoder.encode(target_params, &imgs, &sets, false)?.output;
        }
    }
    Ok(out)
}

/// Batched pixel targets in the predictor's row layout.
pub fn batched_pixel_targets<F: Real>(image_patches: &[&Array2<F>], targets: &[Vec<&[usize]>]) -> Array2<F> {
    let blocks = targets.first().map_or(0, Vec::len);
    let tlen = targets.first().and_then(|t| t.first()).map_or(0, |t| t.len());
    let pd = image_patches.first().map_or(0, |p| p.ncols());
    let mut out = Array2::zeros((image_patches.len() * blocks * tlen, pd));
    for (b, tgts) in targets.iter().enumerate() {
        for (i, t) in tgts.iter().enumerate() {
            let base = (b * blocks + i) * tlen;
            for (k, &j) in t.iter().enumerate() {
                out.row_mut(base + k).assign(&image_patches[b].row(j));
            }
        }
    }
    out
}

/// The loss of [`compute_loss`] against raw patch pixels (values in [0, 1]).
/// `predictions` must already be in patch-pixel space.
pub fn compute_pixel_loss<F: Real>(
    predictions: &[TokenSequence<F>],
    image: &Image,
    target_masks: &[Mask],
) -> Result<LossReport> {
    let grid = target_masks
        .first()
        .map(|m| m.grid)
        .ok_or_else(|| Error::Contract("no target masks".into()))?;
    let (_, patches) = patchify(image, grid.patch_size)?;
    let targets = target_masks
        .iter()
        .map(|m| {
            let rows = patches.select(ndarray::Axis(0), m.indices());
            TokenSequence::new(m.indices().to_vec(), rows.mapv(|v| F::from_f64c(v as f64)))
        })
        .collect::<Result<Vec<_>>>()?;
    compute_loss(predictions, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ViTConfig;
    use crate::patch::PatchGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(indices: Vec<usize>, rows: Vec<Vec<f64>>) -> TokenSequence<f64> {
        let w = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        TokenSequence::new(
            indices.clone(),
            Array2::from_shape_vec((indices.len(), w), flat).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn equal_inputs_have_zero_loss() {
        let a = seq(vec![1, 2], vec![vec![0.3, -1.0], vec![2.0, 0.5]]);
        let r = compute_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn three_four_five() {
        let p = seq(vec![7], vec![vec![3.0, 4.0]]);
        let t = seq(vec![7], vec![vec![0.0, 0.0]]);
        let r = compute_loss(&[p], &[t]).unwrap();
        assert_eq!(r.per_block, vec![25.0]);
        assert_eq!(r.total, 25.0);
    }

    #[test]
    fn two_blocks_unit_errors() {
        // brute-force oracle: sum of squared unit errors per block, mean over blocks
        let unit = |n: usize| -> (TokenSequence<f64>, TokenSequence<f64>) {
            let idx: Vec<usize> = (0..n).collect();
            let p = seq(idx.clone(), (0..n).map(|_| vec![0.6, 0.8, 0.0]).collect());
            let t = seq(idx, (0..n).map(|_| vec![0.0, 0.0, 0.0]).collect());
            (p, t)
        };
        let (p1, t1) = unit(2);
        let (p2, t2) = unit(3);
        let mut oracle = 0.0;
        for (p, t) in [(&p1, &t1), (&p2, &t2)] {
            let mut s = 0.0;
            for (a, b) in p.embeddings.iter().zip(t.embeddings.iter()) {
                s += (a - b) * (a - b);
            }
            oracle += s;
        }
        oracle /= 2.0;
        let r = compute_loss(&[p1, p2], &[t1, t2]).unwrap();
        assert!((r.total - oracle).abs() < 1e-12);
        assert!((r.total - 2.5).abs() < 1e-12);
        assert_eq!(r.n_predicted_patches, 5);
    }

    #[test]
    fn mismatched_indices_rejected() {
        let a = seq(vec![1], vec![vec![0.0]]);
        let b = seq(vec![2], vec![vec![0.0]]);
        assert!(matches!(compute_loss(&[a], &[b]), Err(Error::Contract(_))));
    }

    #[test]
    fn batched_loss_agrees_with_per_block_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, m, t, d) = (3, 2, 4, 5);
        let pred = Array2::from_shape_fn((b * m * t, d), |_| rng.random_range(-1.0..1.0));
        let tgt = Array2::from_shape_fn((b * m * t, d), |_| rng.random_range(-1.0..1.0));
        let (report, grad) = batched_loss(pred.view(), tgt.view(), b, m, t, false).unwrap();
        let mut mean_total = 0.0;
        for img in 0..b {
            let mk = |src: &Array2<f64>, i: usize| {
                let r0 = (img * m + i) * t;
                TokenSequence::new((0..t).collect(), src.slice(s![r0..r0 + t, ..]).to_owned()).unwrap()
            };
            let ps: Vec<_> = (0..m).map(|i| mk(&pred, i)).collect();
            let ts: Vec<_> = (0..m).map(|i| mk(&tgt, i)).collect();
            mean_total += compute_loss(&ps, &ts).unwrap().total / b as f64;
        }
        assert!((report.total - mean_total).abs() < 1e-12);
        // gradient by central differences on one entry
        let h = 1e-6;
        let mut plus = pred.clone();
        plus[[5, 2]] += h;
        let mut minus = pred.clone();
        minus[[5, 2]] -= h;
        let lp = batched_loss(plus.view(), tgt.view(), b, m, t, false).unwrap().0.total;
        let lm = batched_loss(minus.view(), tgt.view(), b, m, t, false).unwrap().0.total;
        assert!(((lp - lm) / (2.0 * h) - grad[[5, 2]]).abs() < 1e-7);
    }

    #[test]
    fn pixel_loss_examples() {
        let grid = PatchGrid::new(8, 8, 4).unwrap();
        let img = Image::filled(32, 32, 3, 0.5);
        let mask = Mask::from_indices(grid, [0, 1, 8, 9]).unwrap();
        let zeros = TokenSequence::new(mask.indices().to_vec(), Array2::<f64>::zeros((4, 48))).unwrap();
        let r = compute_pixel_loss(&[zeros], &img, std::slice::from_ref(&mask)).unwrap();
        assert!((r.total - 4.0 * 48.0 * 0.25).abs() < 1e-12);

        let exact = TokenSequence::new(mask.indices().to_vec(), Array2::<f64>::from_elem((4, 48), 0.5)).unwrap();
        assert_eq!(compute_pixel_loss(&[exact], &img, &[mask]).unwrap().total, 0.0);
    }

    #[test]
    fn momentum_schedule_endpoints() {
        let s = EmaSchedule {
            m_start: 0.996,
            m_end: 1.0,
            total_steps: 1000,
        };
        assert_eq!(momentum_at(&s, 0), 0.996);
        assert_eq!(momentum_at(&s, 1000), 1.0);
        assert!((momentum_at(&s, 500) - 0.998).abs() < 1e-15);
        assert_eq!(momentum_at(&s, 5000), 1.0);
        assert!(EmaSchedule {
            m_start: 0.999,
            m_end: 0.99,
            total_steps: 1
        }
        .validate()
        .is_err());
    }

    fn two_stores() -> (ParamStore<f64>, ParamStore<f64>) {
        let mut a = ParamStore::new();
        a.add("w", &[3], vec![2.0, -1.0, 0.5], true);
        let mut b = ParamStore::new();
        b.add("w", &[3], vec![4.0, 1.0, -0.5], true);
        (a, b)
    }

    #[test]
    fn ema_extremes_and_midpoint() {
        let (target, context) = two_stores();
        let mut t = target.clone();
        ema_update(&mut t, &context, 1.0).unwrap();
        assert_eq!(t, target);
        ema_update(&mut t, &context, 0.0).unwrap();
        assert_eq!(t.params()[0].data, context.params()[0].data);
        let mut t = target.clone();
        ema_update(&mut t, &context, 0.5).unwrap();
        assert_eq!(t.params()[0].data[0], 3.0);
    }

    #[test]
    fn ema_rejects_mismatched_layouts() {
        let (mut target, _) = two_stores();
        let mut other = ParamStore::new();
        other.add("v", &[3], vec![0.0; 3], true);
        assert!(matches!(
            ema_update(&mut target, &other, 0.5),
            Err(Error::CheckpointIncompatible(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn ema_twice_equals_squared_momentum(m in 0.0f64..1.0, x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let mut a = ParamStore::new();
            a.add("w", &[1], vec![x], true);
            let mut c = ParamStore::new();
            c.add("w", &[1], vec![y], true);
            let mut twice = a.clone();
            ema_update(&mut twice, &c, m).unwrap();
            ema_update(&mut twice, &c, m).unwrap();
            let mut once = a.clone();
            ema_update(&mut once, &c, m * m).unwrap();
            proptest::prop_assert!((twice.params()[0].data[0] - once.params()[0].data[0]).abs() < 1e-12);
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
            let t = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
            let ps = TokenSequence::new(vec![0, 1, 2, 3], p).unwrap();
            let ts = TokenSequence::new(vec![0, 1, 2, 3], t).unwrap();
            let r = compute_loss(&[ps], &[ts]).unwrap();
            proptest::prop_assert!(r.total > 0.0);
        }
    }

    #[test]
    fn output_mode_shares_one_forward() {
        let cfg = ViTConfig {
            width: 16,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            patch_size: 4,
            image_size: 16,
            channels: 3,
        };
        let (enc, p) = Encoder::<f64>::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(16, 16, 3, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
        let a = Mask::from_indices(enc.grid, [0, 1, 4, 5]).unwrap();
        let b = Mask::from_indices(enc.grid, [5, 6, 9, 10]).unwrap();
        let out = compute_targets(&enc, &p, &img, &[a.clone(), b.clone()], TargetMode::Output).unwrap();
        assert_eq!(out[0].select(&[5]).unwrap(), out[1].select(&[5]).unwrap());

        let input = compute_targets(&enc, &p, &img, &[a], TargetMode::Input).unwrap();
        let diff = (&input[0].embeddings - &out[0].embeddings).mapv(f64::abs).sum();
        assert!(diff > 1e-3);

        let full = Mask::full(enc.grid);
        let t = compute_targets(&enc, &p, &img, &[full], TargetMode::Output).unwrap();
        assert_eq!(t[0], enc.forward_full_image(&p, &img).unwrap());

        let empty = Mask::empty(enc.grid);
        assert!(compute_targets(&enc, &p, &img, &[empty], TargetMode::Output).is_err());
    }
}
