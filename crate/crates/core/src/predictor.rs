//! The narrow predictor ViT: context tokens plus positional mask tokens in,
//! per-patch predictions for one target block out.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Linear, Transformer, TransformerCache};
use crate::patch::TokenSequence;
use crate::tensor::{ParamId, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictorConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl PredictorConfig {
    /// Three quarters of the encoder width, rounded to a multiple of
    /// `4 * heads`, two blocks, the encoder's head count.
    pub fn desk_default(encoder_width: usize, heads: usize) -> Self {
        let unit = (4 * heads).max(1);
        let width = ((encoder_width as f64 * 0.75 / unit as f64).round() as usize).max(1) * unit;
        Self {
            width,
            depth: 2,
            heads,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "predictor width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("predictor mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Predictor<F> {
    pub config: PredictorConfig,
    pub encoder_width: usize,
    pub out_dim: usize,
    in_proj: Linear,
    mask_token: ParamId,
    stack: Transformer,
    out_proj: Linear,
    /// Positional table at encoder width, shared with the encoders.
    pos: Array2<F>,
    /// Ablation switch: when false, mask tokens carry no position.
    pub use_positions: bool,
}

pub struct PredictorPass<F> {
    /// `(batch * blocks * target_len, out_dim)`, ordered image-major then
    /// block then target index.
    pub output: Array2<F>,
    pub batch: usize,
    pub blocks: usize,
    pub context_len: usize,
    pub target_len: usize,
    context: Array2<F>,
    pos_rows: Array2<F>,
    normed: Array2<F>,
    cache: Option<TransformerCache<F>>,
}

impl<F: Real> Predictor<F> {
    /// `pos` is the shared positional table (one row per grid patch, encoder
    /// width). `out_dim` is the encoder width for representation targets or
    /// the patch-pixel length for pixel targets.
    pub fn init(config: PredictorConfig, pos: Array2<F>, out_dim: usize, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let encoder_width = pos.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let in_proj = Linear::init(&mut store, "embed", encoder_width, config.width, true, &mut rng);
        let mask_token = store.add(
            "mask_token",
            &[config.width],
            trunc_normal(&mut rng, config.width, 0.02),
            false,
        );
        let stack = Transformer::init(
            &mut store,
            "",
            config.width,
            config.depth,
            config.heads,
            config.mlp_ratio,
            &mut rng,
        );
        let out_proj = Linear::init(&mut store, "proj", config.width, out_dim, true, &mut rng);
        Ok((
            Self {
                config,
                encoder_width,
                out_dim,
                in_proj,
                mask_token,
                stack,
                out_proj,
                pos,
                use_positions: true,
            },
            store,
        ))
    }

    pub fn for_params(config: PredictorConfig, pos: Array2<F>, out_dim: usize, params: &ParamStore<F>) -> Result<Self> {
        let (pred, layout) = Self::init(config, pos, out_dim, 0)?;
        layout.check_layout(params)?;
        Ok(pred)
    }

    /// Predicts every target block of every image in one batched call. Each
    /// (image, block) pair is an independent sequence made of that image's
    /// projected context tokens followed by one mask token per target index,
    /// so blocks never see each other's mask tokens.
    pub fn predict(
        &self,
        p: &ParamStore<F>,
        context: ArrayView2<'_, F>,
        context_indices: &[&[usize]],
        targets: &[Vec<&[usize]>],
        keep_cache: bool,
    ) -> Result<PredictorPass<F>> {
        let batch = context_indices.len();
        let context_len = context_indices.first().map_or(0, |c| c.len());
        let blocks = targets.first().map_or(0, Vec::len);
        let target_len = targets.first().and_then(|t| t.first()).map_or(0, |t| t.len());
        if batch == 0 || context_len == 0 || blocks == 0 || target_len == 0 {
            return Err(Error::Contract("predictor needs non-empty context and targets".into()));
        }
        if targets.len() != batch
            || context.nrows() != batch * context_len
            || context.ncols() != self.encoder_width
            || context_indices.iter().any(|c| c.len() != context_len)
            || targets
                .iter()
                .any(|t| t.len() != blocks || t.iter().any(|b| b.len() != target_len))
        {
            return Err(Error::Dimension("predictor inputs are not rectangular".into()));
        }
        for (ctx, tgts) in context_indices.iter().zip(targets) {
            for t in tgts {
                if let Some(j) = t.iter().find(|j| ctx.contains(j)) {
                    return Err(Error::Contract(format!("patch {j} is both context and target")));
                }
            }
        }

        let pw = self.config.width;
        let seq_len = context_len + target_len;
        let n_seq = batch * blocks;
        let projected = self.in_proj.forward(p, context);

        let mut pos_rows = Array2::zeros((n_seq * target_len, self.encoder_width));
        if self.use_positions {
            for (b, tgts) in targets.iter().enumerate() {
                for (i, t) in tgts.iter().enumerate() {
                    let base = (b * blocks + i) * target_len;
                    for (k, &j) in t.iter().enumerate() {
                        if j >= self.pos.nrows() {
                            return Err(Error::Contract(format!("target index {j} outside grid")));
                        }
                        pos_rows.row_mut(base + k).assign(&self.pos.row(j));
                    }
                }
            }
        }
        let mut mask_rows = pos_rows.dot(&p.matrix(self.in_proj.weight));
        mask_rows += &p.vector(self.mask_token);

        let mut x = Array2::zeros((n_seq * seq_len, pw));
        for b in 0..batch {
            let ctx = projected.slice(s![b * context_len..(b + 1) * context_len, ..]);
            for i in 0..blocks {
                let sq = b * blocks + i;
                let r0 = sq * seq_len;
                x.slice_mut(s![r0..r0 + context_len, ..]).assign(&ctx);
                x.slice_mut(s![r0 + context_len..r0 + seq_len, ..])
                    .assign(&mask_rows.slice(s![sq * target_len..(sq + 1) * target_len, ..]));
            }
        }

        let out = self.stack.forward(p, x, seq_len, keep_cache, false)?;
        let mut normed = Array2::zeros((n_seq * target_len, pw));
        for sq in 0..n_seq {
            let r0 = sq * seq_len + context_len;
            normed
                .slice_mut(s![sq * target_len..(sq + 1) * target_len, ..])
                .assign(&out.output.slice(s![r0..r0 + target_len, ..]));
        }
        let output = self.out_proj.forward(p, normed.view());
        Ok(PredictorPass {
            output,
            batch,
            blocks,
            context_len,
            target_len,
            context: context.to_owned(),
            pos_rows,
            normed,
            cache: out.cache,
        })
    }

    /// Accumulates predictor gradients; returns the gradient with respect to
    /// the context representations.
    pub fn backward(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        pass: &PredictorPass<F>,
        dout: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let cache = pass.cache.as_ref().expect("predictor pass was run without a cache");
        let (tc, tt) = (pass.context_len, pass.target_len);
        let seq_len = tc + tt;
        let n_seq = pass.batch * pass.blocks;
        let pw = self.config.width;

        let dnormed = self.out_proj.backward(p, g, pass.normed.view(), dout);
        let mut dy = Array2::zeros((n_seq * seq_len, pw));
        for sq in 0..n_seq {
            let r0 = sq * seq_len + tc;
            dy.slice_mut(s![r0..r0 + tt, ..])
                .assign(&dnormed.slice(s![sq * tt..(sq + 1) * tt, ..]));
        }
        let dx = self.stack.backward(p, g, cache, dy.view(), seq_len);

        let mut dprojected = Array2::zeros((pass.batch * tc, pw));
        let mut dmask = Array2::zeros((n_seq * tt, pw));
        for b in 0..pass.batch {
            for i in 0..pass.blocks {
                let sq = b * pass.blocks + i;
                let r0 = sq * seq_len;
                let mut acc = dprojected.slice_mut(s![b * tc..(b + 1) * tc, ..]);
                acc += &dx.slice(s![r0..r0 + tc, ..]);
                dmask
                    .slice_mut(s![sq * tt..(sq + 1) * tt, ..])
                    .assign(&dx.slice(s![r0 + tc..r0 + seq_len, ..]));
            }
        }
        let gm = dmask.sum_axis(Axis(0));
        g.vector_mut(self.mask_token).zip_mut_with(&gm, |a, &b| *a += b);
        // mask rows used the input projection weight (no bias) on positions
        ndarray::linalg::general_mat_mul(
            F::one(),
            &pass.pos_rows.t(),
            &dmask,
            F::one(),
            &mut g.matrix_mut(self.in_proj.weight),
        );
        self.in_proj.backward(p, g, pass.context.view(), dprojected.view())
    }

    /// Predictions for one target block of one image.
    pub fn predict_block(
        &self,
        p: &ParamStore<F>,
        context: &TokenSequence<F>,
        target_indices: &[usize],
    ) -> Result<TokenSequence<F>> {
        let pass = self.predict(
            p,
            context.embeddings.view(),
            &[&context.indices],
            &[vec![target_indices]],
            false,
        )?;
        let mut order: Vec<usize> = (0..target_indices.len()).collect();
        order.sort_by_key(|&k| target_indices[k]);
        let sorted: Vec<usize> = order.iter().map(|&k| target_indices[k]).collect();
        let rows = pass.output.select(Axis(0), &order);
        TokenSequence::new(sorted, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerNorm;
    use crate::patch::{positional_embedding, PatchGrid};
    use rand::Rng;

    fn setup(width: usize, depth: usize) -> (Predictor<f64>, ParamStore<f64>, TokenSequence<f64>) {
        let grid = PatchGrid::new(4, 4, 4).unwrap();
        let pos: Array2<f64> = positional_embedding(&grid, 16).unwrap();
        let cfg = PredictorConfig {
            width,
            depth,
            heads: 4,
            mlp_ratio: 4.0,
        };
        let (pred, p) = Predictor::init(cfg, pos, 16, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = TokenSequence::new(
            vec![0, 1, 4, 5, 8, 9],
            Array2::from_shape_fn((6, 16), |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        (pred, p, ctx)
    }

    #[test]
    fn desk_default_width() {
        assert_eq!(PredictorConfig::desk_default(64, 4).width, 48);
        assert_eq!(PredictorConfig::desk_default(384, 6).width, 288);
    }

    #[test]
    fn zero_depth_identity_maps_positions() {
        let (pred, mut p, ctx) = setup(16, 0);
        for name in ["embed.weight", "proj.weight"] {
            let id = p.id(name).unwrap();
            let mut m = p.matrix_mut(id);
            m.fill(0.0);
            m.diag_mut().fill(1.0);
        }
        let id = p.id("mask_token").unwrap();
        p.get_mut(id).data.fill(0.0);
        let out = pred.predict_block(&p, &ctx, &[10, 15]).unwrap();
        let rows = pred.pos.select(Axis(0), &[10, 15]);
        let (expected, _) = LayerNorm::normalize(rows.view());
        assert!(out.embeddings.abs_diff_eq(&expected, 1e-12));
    }

    #[test]
    fn output_count_matches_targets() {
        let (pred, p, ctx) = setup(16, 2);
        for targets in [vec![2usize], vec![2, 3, 6, 7], vec![3, 7, 11, 12, 13, 14, 15]] {
            let out = pred.predict_block(&p, &ctx, &targets).unwrap();
            assert_eq!(out.len(), targets.len());
            assert_eq!(out.width(), 16);
        }
    }

    #[test]
    fn overlapping_indices_rejected() {
        let (pred, p, ctx) = setup(16, 1);
        assert!(matches!(pred.predict_block(&p, &ctx, &[1, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn blocks_are_predicted_independently() {
        let (pred, p, ctx) = setup(16, 2);
        let a = [2usize, 3];
        let b = [14usize, 15];
        let batched = pred
            .predict(
                &p,
                ctx.embeddings.view(),
                &[&ctx.indices],
                &[vec![&a[..], &b[..]]],
                false,
            )
            .unwrap();
        let sa = pred.predict_block(&p, &ctx, &a).unwrap();
        let sb = pred.predict_block(&p, &ctx, &b).unwrap();
        assert!(batched.output.slice(s![0..2, ..]).abs_diff_eq(&sa.embeddings, 1e-6));
        assert!(batched.output.slice(s![2..4, ..]).abs_diff_eq(&sb.embeddings, 1e-6));
    }

    #[test]
    fn swapping_targets_permutes_outputs() {
        let (pred, p, ctx) = setup(16, 2);
        let fwd = pred
            .predict(
                &p,
                ctx.embeddings.view(),
                &[&ctx.indices],
                &[vec![&[3usize, 12][..]]],
                false,
            )
            .unwrap();
        let rev = pred
            .predict(
                &p,
                ctx.embeddings.view(),
                &[&ctx.indices],
                &[vec![&[12usize, 3][..]]],
                false,
            )
            .unwrap();
        assert!(fwd.output.row(0).abs_diff_eq(&rev.output.row(1), 1e-6));
        assert!(fwd.output.row(1).abs_diff_eq(&rev.output.row(0), 1e-6));
    }

    #[test]
    fn without_positions_block_predictions_coincide() {
        let (mut pred, p, ctx) = setup(16, 2);
        pred.use_positions = false;
        let out = pred.predict_block(&p, &ctx, &[2, 3, 6, 7, 15]).unwrap();
        for i in 1..out.len() {
            assert!(out.embeddings.row(0).abs_diff_eq(&out.embeddings.row(i), 1e-12));
        }
    }
}
