//! Central finite-difference checks of the analytic gradients through the
//! context encoder, the predictor and the loss, in `f64`.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Encoder, ViTConfig};
use crate::error::Result;
use crate::masking::{sample_batch, MaskSpec, MaskedBatch};
use crate::objective::{batched_loss, batched_targets, TargetMode};
use crate::patch::Image;
use crate::predictor::{Predictor, PredictorConfig};
use crate::tensor::ParamStore;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-7;

/// Spread of the random offset added to the initial parameters.
pub const PERTURB_STD: f64 = 0.1;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub encoder_probes: usize,
    pub predictor_probes: usize,
    pub encoder_max_rel_error: f64,
    pub predictor_max_rel_error: f64,
}

/// A fixed instance of the training objective: images, masks and
/// (stop-gradient) targets are frozen so the loss is a function of the
/// context-encoder and predictor parameters only.
pub struct Problem {
    pub encoder: Encoder<f64>,
    pub predictor: Predictor<f64>,
    pub encoder_params: ParamStore<f64>,
    pub predictor_params: ParamStore<f64>,
    pub patches: Vec<Array2<f64>>,
    pub masks: MaskedBatch,
    pub targets: Array2<f64>,
}

impl Problem {
    pub fn new(vit: ViTConfig, pred: PredictorConfig, batch: usize, seed: u64) -> Result<Self> {
        let (encoder, mut encoder_params) = Encoder::<f64>::init(vit, seed)?;
        let (predictor, mut predictor_params) =
            Predictor::init(pred, encoder.pos_table().clone(), vit.width, seed.wrapping_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        // Move away from the initialization, where attention is nearly uniform
        // and many gradients are too small to resolve by differencing.
        for store in [&mut encoder_params, &mut predictor_params] {
            for p in store.params_mut() {
                for v in &mut p.data {
                    *v += PERTURB_STD * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
        }
        let n = vit.image_size * vit.image_size * vit.channels;
        let mut patches = Vec::with_capacity(batch);
        for _ in 0..batch {
            let img = Image::new(
                vit.image_size,
                vit.image_size,
                vit.channels,
                (0..n).map(|_| rng.random::<f32>()).collect(),
            )?;
            patches.push(encoder.patches(&img)?);
        }
        let masks = sample_batch(&encoder.grid, &MaskSpec::default(), batch, &mut rng)?;
        // targets from a perturbed copy, standing in for an EMA encoder that has drifted
        let mut target_params = encoder_params.clone();
        for p in target_params.params_mut() {
            for v in &mut p.data {
                *v += rng.random_range(-0.01..0.01);
            }
        }
        let refs: Vec<&Array2<f64>> = patches.iter().collect();
        let tsets: Vec<Vec<&[usize]>> = masks
            .targets
            .iter()
            .map(|t| t.iter().map(|m| m.indices()).collect())
            .collect();
        let targets = batched_targets(&encoder, &target_params, &refs, &tsets, TargetMode::Output)?;
        Ok(Self {
            encoder,
            predictor,
            encoder_params,
            predictor_params,
            patches,
            masks,
            targets,
        })
    }

    fn sets(&self) -> (Vec<&[usize]>, Vec<Vec<&[usize]>>) {
        let ctx = self.masks.contexts.iter().map(|m| m.indices()).collect();
        let tgt = self
            .masks
            .targets
            .iter()
            .map(|t| t.iter().map(|m| m.indices()).collect())
            .collect();
        (ctx, tgt)
    }

    pub fn loss(&self, enc: &ParamStore<f64>, pred: &ParamStore<f64>) -> Result<f64> {
        let refs: Vec<&Array2<f64>> = self.patches.iter().collect();
        let (ctx, tgt) = self.sets();
        let pass = self.encoder.encode(enc, &refs, &ctx, false)?;
        let out = self.predictor.predict(pred, pass.output.view(), &ctx, &tgt, false)?;
        let (report, _) = batched_loss(
            out.output.view(),
            self.targets.view(),
            out.batch,
            out.blocks,
            out.target_len,
            false,
        )?;
        Ok(report.total)
    }

    /// Analytic gradients for the encoder and predictor parameters.
    pub fn gradients(&self) -> Result<(ParamStore<f64>, ParamStore<f64>)> {
        let refs: Vec<&Array2<f64>> = self.patches.iter().collect();
        let (ctx, tgt) = self.sets();
        let pass = self.encoder.encode(&self.encoder_params, &refs, &ctx, true)?;
        let out = self
            .predictor
            .predict(&self.predictor_params, pass.output.view(), &ctx, &tgt, true)?;
        let (_, dout) = batched_loss(
            out.output.view(),
            self.targets.view(),
            out.batch,
            out.blocks,
            out.target_len,
            false,
        )?;
        let mut ge = self.encoder_params.zeros_like();
        let mut gp = self.predictor_params.zeros_like();
        let dctx = self
            .predictor
            .backward(&self.predictor_params, &mut gp, &out, dout.view());
        self.encoder.backward(&self.encoder_params, &mut ge, &pass, dctx.view());
        Ok((ge, gp))
    }
}

/// The objective at the desk model size ("vit-nano") on two images.
pub fn nano_problem(seed: u64) -> Result<Problem> {
    let vit = ViTConfig::default();
    Problem::new(vit, PredictorConfig::desk_default(vit.width, vit.heads), 2, seed)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients at `probes` randomly
/// chosen parameter entries split evenly between encoder and predictor.
pub fn check(problem: &Problem, probes: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let (ge, gp) = problem.gradients()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, String::new());
    let mut part_max = [0.0f64; 2];
    let enc_probes = probes / 2;
    let pred_probes = probes - enc_probes;

    for (which, count) in [(0usize, enc_probes), (1, pred_probes)] {
        let (params, grads) = if which == 0 {
            (&problem.encoder_params, &ge)
        } else {
            (&problem.predictor_params, &gp)
        };
        let total = params.numel();
        let mut picks: Vec<usize> = index::sample(&mut rng, total, count.min(total)).into_vec();
        picks.sort_unstable();
        for flat in picks {
            let (pi, ei) = locate(params, flat);
            let mut plus = params.clone();
            plus.params_mut()[pi].data[ei] += step;
            let mut minus = params.clone();
            minus.params_mut()[pi].data[ei] -= step;
            let (lp, lm) = if which == 0 {
                (
                    problem.loss(&plus, &problem.predictor_params)?,
                    problem.loss(&minus, &problem.predictor_params)?,
                )
            } else {
                (
                    problem.loss(&problem.encoder_params, &plus)?,
                    problem.loss(&problem.encoder_params, &minus)?,
                )
            };
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads.params()[pi].data[ei];
            let err = relative_error(analytic, numeric);
            log::trace!(
                "{}[{ei}] analytic {analytic:e} numeric {numeric:e} rel {err:e}",
                params.params()[pi].name
            );
            part_max[which] = part_max[which].max(err);
            if err > worst.0 || worst.1.is_empty() {
                let prefix = if which == 0 { "encoder/" } else { "predictor/" };
                worst = (err, format!("{prefix}{}[{ei}]", params.params()[pi].name));
            }
        }
    }
    Ok(GradCheckReport {
        probes: enc_probes + pred_probes,
        max_rel_error: worst.0,
        worst_param: worst.1,
        encoder_probes: enc_probes,
        predictor_probes: pred_probes,
        encoder_max_rel_error: part_max[0],
        predictor_max_rel_error: part_max[1],
    })
}

fn locate(store: &ParamStore<f64>, mut flat: usize) -> (usize, usize) {
    for (i, p) in store.params().iter().enumerate() {
        if flat < p.numel() {
            return (i, flat);
        }
        flat -= p.numel();
    }
    unreachable!("flat index beyond store")
}
