//! Pretraining: configuration, schedules, AdamW, the training step and the
//! epoch loop with metrics and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::{Encoder, ViTConfig};
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::error::{Error, Result};
use crate::masking::{sample_batch, MaskSpec, MaskedBatch};
use crate::objective::{
    batched_loss, batched_pixel_targets, batched_targets, ema_update, momentum_at, EmaSchedule, LossReport, TargetKind,
    TargetMode,
};
use crate::patch::{Dataset, PatchGrid};
use crate::predictor::{Predictor, PredictorConfig};
use crate::seed::derive_rng;
use crate::tensor::{ParamStore, Real};

/// Every knob of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Skip weight decay for layer norms, biases and the mask token.
    pub exclude_norm_bias_decay: bool,
    pub normalize_per_patch: bool,
    pub target_mode: TargetMode,
    pub target_kind: TargetKind,
    pub mask: MaskSpec,
    pub model: ViTConfig,
    pub predictor: PredictorConfig,
    /// Dataset file; empty means the synthetic corpus.
    pub data_path: Option<PathBuf>,
    pub data_count: usize,
    pub data_seed: u64,
    pub checkpoint_every: u64,
    /// Stop after this many steps (0 runs the full schedule). The schedule
    /// itself is unaffected.
    pub max_steps: u64,
    /// Depth of the batch-preparation queue; 0 prepares batches inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ViTConfig::default();
        Self {
            seed: 0,
            batch_size: 64,
            epochs: 20,
            warmup_epochs: 2,
            // Not scaled down for the small batch: at 1/32 of these rates
            // 500 Adam steps barely move the weights.
            lr_start: 1e-4,
            lr_peak: 1e-3,
            lr_final: 1e-6,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.996,
            ema_end: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            exclude_norm_bias_decay: true,
            normalize_per_patch: false,
            target_mode: TargetMode::Output,
            target_kind: TargetKind::Representation,
            mask: MaskSpec::default(),
            model,
            predictor: PredictorConfig::desk_default(model.width, model.heads),
            data_path: None,
            data_count: 1600,
            data_seed: 0,
            checkpoint_every: 100,
            max_steps: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    /// The reference optimization recipe at the desk model size.
    pub fn reference() -> Self {
        Self {
            lr_start: 1e-4,
            lr_peak: 1e-3,
            lr_final: 1e-6,
            batch_size: 2048,
            epochs: 300,
            warmup_epochs: 15,
            ..Self::default()
        }
    }

    /// Validates every field. Errors carry the config key at fault.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        fn fail<T>(key: &'static str, msg: impl Into<String>) -> std::result::Result<T, (&'static str, String)> {
            Err((key, msg.into()))
        }
        if self.batch_size == 0 {
            return fail("optim.batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return fail("optim.epochs", "must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            return fail(
                "optim.warmup_epochs",
                format!("{} must be below epochs ({})", self.warmup_epochs, self.epochs),
            );
        }
        for (key, v) in [
            ("optim.lr_start", self.lr_start),
            ("optim.lr_peak", self.lr_peak),
            ("optim.wd_start", self.wd_start),
            ("optim.wd_end", self.wd_end),
            ("optim.eps", self.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(key, format!("{v} must be positive"));
            }
        }
        if !(self.lr_final >= 0.0 && self.lr_final.is_finite()) {
            return fail("optim.lr_final", format!("{} must be non-negative", self.lr_final));
        }
        if self.lr_start > self.lr_peak {
            return fail(
                "optim.lr_start",
                format!("{} exceeds lr_peak {}", self.lr_start, self.lr_peak),
            );
        }
        for (key, v) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(key, format!("{v} must lie in [0, 1)"));
            }
        }
        if !(self.ema_start > 0.0 && self.ema_start <= 1.0) {
            return fail("ema.start", format!("{} must lie in (0, 1]", self.ema_start));
        }
        if !(self.ema_end >= self.ema_start && self.ema_end <= 1.0) {
            return fail("ema.end", format!("{} must lie in [start, 1]", self.ema_end));
        }

        let range = |key: &'static str, (lo, hi): (f64, f64), max: f64| {
            if lo > 0.0 && lo <= hi && hi <= max {
                Ok(())
            } else {
                fail(key, format!("({lo}, {hi}) must satisfy 0 < lo <= hi <= {max}"))
            }
        };
        range("mask.target_scale", self.mask.targets.scale, 1.0)?;
        range("mask.target_aspect", self.mask.targets.aspect, f64::INFINITY)?;
        range("mask.context_scale", self.mask.context.scale, 1.0)?;
        range("mask.context_aspect", self.mask.context.aspect, f64::INFINITY)?;
        if self.mask.targets.count == 0 {
            return fail("mask.n_targets", "must be at least 1");
        }
        self.mask.validate().or_else(|e| fail("mask", e.to_string()))?;
        self.model.validate().or_else(|e| fail("model", e.to_string()))?;
        self.predictor
            .validate()
            .or_else(|e| fail("predictor", e.to_string()))?;
        let grid = self.model.grid().or_else(|e| fail("model", e.to_string()))?;
        if self.mask.min_context_patches >= grid.n_patches() {
            return fail(
                "mask.min_context_patches",
                format!(
                    "{} leaves no room on a {}-patch grid",
                    self.mask.min_context_patches,
                    grid.n_patches()
                ),
            );
        }
        if self.data_path.is_none() && self.data_count < self.batch_size {
            return fail(
                "data.count",
                format!("{} images cannot fill a batch of {}", self.data_count, self.batch_size),
            );
        }
        if self.checkpoint_every == 0 {
            return fail("run.checkpoint_every", "must be at least 1");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, m)| Error::Config(format!("{k}: {m}")))
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        self.model.grid()
    }

    pub fn out_dim(&self) -> usize {
        match self.target_kind {
            TargetKind::Representation => self.model.width,
            TargetKind::Pixels => self.model.patch_dim(),
        }
    }
}

/// Step-indexed schedules for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema: EmaSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleState {
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact at both ends
    a * (1.0 - t) + b * t
}

impl Schedule {
    pub fn new(config: &TrainConfig, steps_per_epoch: usize) -> Self {
        let spe = steps_per_epoch.max(1) as u64;
        let total = config.epochs as u64 * spe;
        Self {
            warmup_steps: config.warmup_epochs as u64 * spe,
            total_steps: total,
            lr_start: config.lr_start,
            lr_peak: config.lr_peak,
            lr_final: config.lr_final,
            wd_start: config.wd_start,
            wd_end: config.wd_end,
            ema: EmaSchedule {
                m_start: config.ema_start,
                m_end: config.ema_end,
                total_steps: total,
            },
        }
    }

    /// Linear warmup from `lr_start` to `lr_peak`, then half-cosine decay to
    /// `lr_final` at `total_steps`. Steps past the end are clamped.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return lerp(self.lr_start, self.lr_peak, step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        lerp(self.lr_final, self.lr_peak, c)
    }

    /// Linear ramp over the whole run.
    pub fn wd_at(&self, step: u64) -> f64 {
        let t = step.min(self.total_steps) as f64 / self.total_steps.max(1) as f64;
        lerp(self.wd_start, self.wd_end, t)
    }

    pub fn ema_at(&self, step: u64) -> f64 {
        momentum_at(&self.ema, step.min(self.total_steps))
    }

    pub fn state(&self, step: u64) -> ScheduleState {
        ScheduleState {
            step,
            lr: self.lr_at(step),
            wd: self.wd_at(step),
            ema_m: self.ema_at(step),
        }
    }
}

/// First and second moment buffers plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub exclude_norm_bias_decay: bool,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            exclude_norm_bias_decay: true,
        }
    }
}

/// One AdamW update:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
/// Nothing is modified if any gradient is non-finite.
pub fn optimizer_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &ParamStore<F>,
    lr: f64,
    wd: f64,
    state: &mut AdamState<F>,
    hp: &AdamW,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    params.check_layout(&state.v)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = F::from_f64c(hp.beta1);
    let b2 = F::from_f64c(hp.beta2);
    let one = F::one();
    let c1 = F::from_f64c(1.0 - hp.beta1.powi(t));
    let c2 = F::from_f64c(1.0 - hp.beta2.powi(t));
    let eps = F::from_f64c(hp.eps);
    let lr_f = F::from_f64c(lr);
    let params_mut = params.params_mut();
    let m_all = state.m.params_mut();
    let v_all = state.v.params_mut();
    for (((p, g), m), v) in params_mut.iter_mut().zip(grads.params()).zip(m_all).zip(v_all) {
        let decay = if p.decay || !hp.exclude_norm_bias_decay {
            F::from_f64c(lr * wd)
        } else {
            F::zero()
        };
        for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr_f * (m_hat / (v_hat.sqrt() + eps)) - decay * *w;
        }
    }
    Ok(())
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub context: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub predictor: ParamStore<f32>,
    pub opt_context: AdamState<f32>,
    pub opt_predictor: AdamState<f32>,
}

/// Which images and masks a step uses. A pure function of the config and
/// the step index, so it can be computed ahead of time on another thread.
#[derive(Debug, Clone)]
pub struct Plan {
    pub step: u64,
    pub images: Vec<usize>,
    /// `None` when the sampler failed twice and the step is skipped.
    pub masks: Option<MaskedBatch>,
}

#[derive(Debug, Clone)]
pub struct Planner {
    seed: u64,
    batch_size: usize,
    steps_per_epoch: usize,
    n_images: usize,
    grid: PatchGrid,
    mask: MaskSpec,
}

impl Planner {
    pub fn new(config: &TrainConfig, n_images: usize) -> Result<Self> {
        if n_images < config.batch_size {
            return Err(Error::Config(format!(
                "dataset has {n_images} images, fewer than one batch of {}",
                config.batch_size
            )));
        }
        Ok(Self {
            seed: config.seed,
            batch_size: config.batch_size,
            steps_per_epoch: n_images / config.batch_size,
            n_images,
            grid: config.grid()?,
            mask: config.mask,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Image order for an epoch: a full shuffle from the epoch's stream.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_images).collect();
        order.shuffle(&mut derive_rng(self.seed, "shuffle", epoch));
        order
    }

    pub fn plan(&self, step: u64) -> Result<Plan> {
        let spe = self.steps_per_epoch as u64;
        let order = self.epoch_order(step / spe);
        let start = (step % spe) as usize * self.batch_size;
        let images = order[start..start + self.batch_size].to_vec();
        let masks = match sample_batch(
            &self.grid,
            &self.mask,
            self.batch_size,
            &mut derive_rng(self.seed, "masks", step),
        ) {
            Ok(m) => Some(m),
            Err(Error::SamplerExhausted { reason, .. }) => {
                log::warn!("step {step}: mask sampler exhausted ({reason}); resampling");
                match sample_batch(
                    &self.grid,
                    &self.mask,
                    self.batch_size,
                    &mut derive_rng(self.seed, "masks-retry", step),
                ) {
                    Ok(m) => Some(m),
                    Err(Error::SamplerExhausted { reason, .. }) => {
                        log::warn!("step {step}: resample exhausted too ({reason}); skipping batch");
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        Ok(Plan { step, images, masks })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
    /// `None` for a skipped batch.
    pub loss: Option<f64>,
    pub per_block: Vec<f64>,
    pub context_ratio: f64,
    pub wall_ms: f64,
}

/// Gradients of one forward/backward pass. `target` is a buffer shaped like
/// the target encoder; the backward pass never writes to it.
pub struct Gradients {
    pub context: ParamStore<f32>,
    pub predictor: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub loss: LossReport,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: Encoder<f32>,
    pub predictor: Predictor<f32>,
    pub schedule: Schedule,
    pub planner: Planner,
    pub state: TrainState,
    pub optimizer: AdamW,
    patches: Vec<Array2<f32>>,
}

impl Trainer {
    /// Fresh initialization: the target encoder starts as an exact copy of
    /// the context encoder.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let (encoder, context) = Encoder::<f32>::init(config.model, derive_seed(config.seed, "encoder-init"))?;
        let (predictor, pred_params) = Predictor::init(
            config.predictor,
            encoder.pos_table().clone(),
            config.out_dim(),
            derive_seed(config.seed, "predictor-init"),
        )?;
        let state = TrainState {
            step: 0,
            target: context.clone(),
            opt_context: AdamState::new(&context),
            opt_predictor: AdamState::new(&pred_params),
            context,
            predictor: pred_params,
        };
        Self::assemble(config, encoder, predictor, state, dataset)
    }

    /// Rebuilds a trainer from a full checkpoint.
    pub fn resume(config: TrainConfig, dataset: &Dataset, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.seed != config.seed {
            return Err(Error::CheckpointIncompatible(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.seed, config.seed
            )));
        }
        let mut fresh = Self::new(config, dataset)?;
        let opt = ckpt
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::CheckpointIncompatible("checkpoint has no optimizer state; cannot resume".into()))?;
        let take = |prefix: &str, like: &ParamStore<f32>| -> Result<ParamStore<f32>> {
            let s = ckpt.group(prefix);
            like.check_layout(&s)
                .map_err(|e| Error::CheckpointIncompatible(format!("{prefix}: {e}")))?;
            Ok(s)
        };
        let st = &fresh.state;
        let state = TrainState {
            step: ckpt.step,
            context: take("context/", &st.context)?,
            target: take("target/", &st.context)?,
            predictor: take("predictor/", &st.predictor)?,
            opt_context: AdamState {
                m: take("opt/context/m/", &st.context)?,
                v: take("opt/context/v/", &st.context)?,
                t: opt.context_t,
            },
            opt_predictor: AdamState {
                m: take("opt/predictor/m/", &st.predictor)?,
                v: take("opt/predictor/v/", &st.predictor)?,
                t: opt.predictor_t,
            },
        };
        fresh.state = state;
        Ok(fresh)
    }

    fn assemble(
        config: TrainConfig,
        encoder: Encoder<f32>,
        predictor: Predictor<f32>,
        state: TrainState,
        dataset: &Dataset,
    ) -> Result<Self> {
        if let Some((h, w, c)) = dataset.dims() {
            if h != config.model.image_size || w != config.model.image_size || c != config.model.channels {
                return Err(Error::Config(format!(
                    "dataset images are {h}x{w}x{c}, model expects {0}x{0}x{1}",
                    config.model.image_size, config.model.channels
                )));
            }
        }
        let patches = dataset
            .images
            .iter()
            .map(|img| encoder.patches(img))
            .collect::<Result<Vec<_>>>()?;
        let planner = Planner::new(&config, patches.len())?;
        let schedule = Schedule::new(&config, planner.steps_per_epoch());
        let optimizer = AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            exclude_norm_bias_decay: config.exclude_norm_bias_decay,
        };
        Ok(Self {
            config,
            encoder,
            predictor,
            schedule,
            planner,
            state,
            optimizer,
            patches,
        })
    }

    /// Last step index the run will execute (exclusive).
    pub fn end_step(&self) -> u64 {
        let total = self.schedule.total_steps;
        if self.config.max_steps > 0 {
            total.min(self.config.max_steps)
        } else {
            total
        }
    }

    /// Forward and backward through context encoder, predictor and loss.
    /// Targets come from the target encoder without gradient.
    pub fn gradients(&self, images: &[usize], masks: &MaskedBatch) -> Result<Gradients> {
        let imgs: Vec<&Array2<f32>> = images.iter().map(|&i| &self.patches[i]).collect();
        let ctx: Vec<&[usize]> = masks.contexts.iter().map(|m| m.indices()).collect();
        let tgt: Vec<Vec<&[usize]>> = masks
            .targets
            .iter()
            .map(|t| t.iter().map(|m| m.indices()).collect())
            .collect();
        let st = &self.state;
        let pass = self.encoder.encode(&st.context, &imgs, &ctx, true)?;
        let out = self
            .predictor
            .predict(&st.predictor, pass.output.view(), &ctx, &tgt, true)?;
        let targets = match self.config.target_kind {
            TargetKind::Representation => {
                batched_targets(&self.encoder, &st.target, &imgs, &tgt, self.config.target_mode)?
            }
            TargetKind::Pixels => batched_pixel_targets(&imgs, &tgt),
        };
        let (loss, dout) = batched_loss(
            out.output.view(),
            targets.view(),
            out.batch,
            out.blocks,
            out.target_len,
            self.config.normalize_per_patch,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NumericalFailure {
                layer: self.config.predictor.depth,
                site: "loss",
            });
        }
        let mut gc = st.context.zeros_like();
        let mut gp = st.predictor.zeros_like();
        let dctx = self.predictor.backward(&st.predictor, &mut gp, &out, dout.view());
        self.encoder.backward(&st.context, &mut gc, &pass, dctx.view());
        Ok(Gradients {
            context: gc,
            predictor: gp,
            target: st.target.zeros_like(),
            loss,
        })
    }

    /// One optimization step for a prepared plan.
    pub fn step(&mut self, plan: &Plan) -> Result<StepReport> {
        let t0 = Instant::now();
        if plan.step != self.state.step {
            return Err(Error::Contract(format!(
                "plan for step {} given to trainer at step {}",
                plan.step, self.state.step
            )));
        }
        let sched = self.schedule.state(plan.step);
        let Some(masks) = &plan.masks else {
            self.state.step += 1;
            return Ok(StepReport {
                step: plan.step,
                lr: sched.lr,
                wd: sched.wd,
                ema_m: sched.ema_m,
                loss: None,
                per_block: Vec::new(),
                context_ratio: 0.0,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        };
        let grads = self.gradients(&plan.images, masks)?;
        let target_hash = self.state.target.content_hash();
        let st = &mut self.state;
        optimizer_step(
            &mut st.context,
            &grads.context,
            sched.lr,
            sched.wd,
            &mut st.opt_context,
            &self.optimizer,
        )?;
        optimizer_step(
            &mut st.predictor,
            &grads.predictor,
            sched.lr,
            sched.wd,
            &mut st.opt_predictor,
            &self.optimizer,
        )?;
        if st.target.content_hash() != target_hash || !grads.target.is_all_zero() {
            return Err(Error::Contract("target encoder changed outside the EMA update".into()));
        }
        ema_update(&mut st.target, &st.context, sched.ema_m)?;
        if let Some(name) = st.context.first_non_finite() {
            return Err(Error::NonFiniteGradient(format!("context/{name} after update")));
        }
        st.step += 1;
        Ok(StepReport {
            step: plan.step,
            lr: sched.lr,
            wd: sched.wd,
            ema_m: sched.ema_m,
            loss: Some(grads.loss.total),
            per_block: grads.loss.per_block,
            context_ratio: masks.context_ratio(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let st = &self.state;
        let mut tensors = ParamStore::new();
        tensors.extend_prefixed("context/", &st.context);
        tensors.extend_prefixed("target/", &st.target);
        tensors.extend_prefixed("predictor/", &st.predictor);
        tensors.extend_prefixed("opt/context/m/", &st.opt_context.m);
        tensors.extend_prefixed("opt/context/v/", &st.opt_context.v);
        tensors.extend_prefixed("opt/predictor/m/", &st.opt_predictor.m);
        tensors.extend_prefixed("opt/predictor/v/", &st.opt_predictor.v);
        Checkpoint {
            step: st.step,
            seed: self.config.seed,
            config_text: config_text.to_string(),
            optimizer: Some(OptimizerState {
                context_t: st.opt_context.t,
                predictor_t: st.opt_predictor.t,
            }),
            tensors,
        }
    }
}

/// A seed for a named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    use rand::Rng;
    derive_rng(seed, purpose, 0).random()
}

/// Summary of a finished (or stopped) run.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub skipped: u64,
    pub first_losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}"))
}

/// Runs the training loop from the trainer's current step to its end step,
/// appending one JSON line per step to `<dir>/metrics.jsonl` and writing
/// `<dir>/ckpt_<step>` every `checkpoint_every` steps and at the end.
/// Batches are prepared on a worker thread feeding a bounded queue.
pub fn run_loop(trainer: &mut Trainer, dir: &Path, config_text: &str) -> Result<PretrainSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(format!("opening {}", metrics_path.display()), e))?;
    let mut metrics = BufWriter::new(file);
    let start = trainer.state.step;
    let end = trainer.end_step();
    let every = trainer.config.checkpoint_every;
    let planner = trainer.planner.clone();
    let depth = trainer.config.prefetch;
    let mut skipped = 0;
    let mut losses = Vec::new();
    log::info!("training steps {start}..{end}");

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Plan>>(depth.max(1));
        let inline = depth == 0;
        if !inline {
            scope.spawn(move || {
                for step in start..end {
                    if tx.send(planner.plan(step)).is_err() {
                        break;
                    }
                }
            });
        }
        for step in start..end {
            let plan = if inline {
                trainer.planner.plan(step)?
            } else {
                rx.recv()
                    .map_err(|_| Error::Contract("batch worker stopped early".into()))??
            };
            let report = trainer.step(&plan)?;
            match report.loss {
                Some(l) => losses.push(l),
                None => skipped += 1,
            }
            serde_json::to_writer(&mut metrics, &report)?;
            metrics.write_all(b"\n").map_err(|e| Error::io("writing metrics", e))?;
            if step % 10 == 0 {
                log::info!(
                    "step {step} loss {:?} lr {:.3e} ctx {:.3}",
                    report.loss,
                    report.lr,
                    report.context_ratio
                );
            }
            let done = trainer.state.step;
            if done.is_multiple_of(every) && done < end {
                metrics.flush().map_err(|e| Error::io("flushing metrics", e))?;
                trainer.checkpoint(config_text).save(&checkpoint_path(dir, done))?;
            }
        }
        drop(rx);
        Ok(())
    })?;

    metrics.flush().map_err(|e| Error::io("flushing metrics", e))?;
    let final_checkpoint = checkpoint_path(dir, trainer.state.step);
    trainer.checkpoint(config_text).save(&final_checkpoint)?;
    Ok(PretrainSummary {
        steps_run: end.saturating_sub(start),
        final_step: trainer.state.step,
        skipped,
        first_losses: losses,
        final_checkpoint,
    })
}

/// One parsed line of a metrics stream.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
    pub loss: Option<f64>,
    pub per_block: Vec<f64>,
    pub context_ratio: f64,
    pub wall_ms: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
