//! A class-token-free pre-norm ViT encoder that runs either on every patch
//! of an image (target encoder) or on a visible subset only (context
//! encoder).

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Linear, Transformer, TransformerCache, TransformerOutput};
use crate::patch::{patchify, positional_embedding, Image, PatchGrid, TokenSequence};
use crate::tensor::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ViTConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for ViTConfig {
    /// "vit-nano": 32px images in 4px patches (an 8x8 grid).
    fn default() -> Self {
        Self {
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            patch_size: 4,
            image_size: 32,
            channels: 3,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "width {} must be divisible by 4 for 2-D positional embeddings",
                self.width
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::for_image(self.image_size, self.image_size, self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Parameter handles and fixed tables for one encoder. The weights
/// themselves live in a [`ParamStore`], so context and target encoders share
/// one `Encoder` and differ only in their stores.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub config: ViTConfig,
    pub grid: PatchGrid,
    patch_embed: Linear,
    stack: Transformer,
    pos: Array2<F>,
}

/// Everything the backward pass needs from a batched forward.
pub struct EncoderPass<F> {
    /// `(batch * seq_len, width)`.
    pub output: Array2<F>,
    pub seq_len: usize,
    patches: Array2<F>,
    cache: Option<TransformerCache<F>>,
}

impl<F: Real> Encoder<F> {
    /// Builds the parameter layout and initial values from `seed`.
    pub fn init(config: ViTConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let grid = config.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let patch_embed = Linear::init(
            &mut store,
            "patch_embed",
            config.patch_dim(),
            config.width,
            true,
            &mut rng,
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
        let pos = positional_embedding(&grid, config.width)?;
        Ok((
            Self {
                config,
                grid,
                patch_embed,
                stack,
                pos,
            },
            store,
        ))
    }

    /// The encoder structure for `config`, checked against an existing store.
    pub fn for_params(config: ViTConfig, params: &ParamStore<F>) -> Result<Self> {
        let (enc, layout) = Self::init(config, 0)?;
        layout.check_layout(params)?;
        Ok(enc)
    }

    pub fn pos_table(&self) -> &Array2<F> {
        &self.pos
    }

    pub fn depth(&self) -> usize {
        self.stack.blocks.len()
    }

    /// Patch vectors of an image, in the model's float type.
    pub fn patches(&self, image: &Image) -> Result<Array2<F>> {
        if image.height != self.config.image_size
            || image.width != self.config.image_size
            || image.channels != self.config.channels
        {
            return Err(Error::Dimension(format!(
                "image {}x{}x{} does not match encoder input {s}x{s}x{}",
                image.height,
                image.width,
                image.channels,
                self.config.channels,
                s = self.config.image_size
            )));
        }
        let (_, patches) = patchify(image, self.config.patch_size)?;
        Ok(patches.mapv(|v| F::from_f64c(v as f64)))
    }

    /// `patch · W + b + pos[index]` for each row.
    pub fn embed(&self, p: &ParamStore<F>, patches: ArrayView2<'_, F>, indices: &[usize]) -> Array2<F> {
        let mut x = self.patch_embed.forward(p, patches);
        for (mut row, &idx) in x.rows_mut().into_iter().zip(indices) {
            row += &self.pos.row(idx);
        }
        x
    }

    /// Encodes the same number of patches from each image. `index_sets[b]`
    /// selects rows of `image_patches[b]`; only those tokens are processed.
    pub fn encode(
        &self,
        p: &ParamStore<F>,
        image_patches: &[&Array2<F>],
        index_sets: &[&[usize]],
        keep_cache: bool,
    ) -> Result<EncoderPass<F>> {
        let seq_len = index_sets.first().map_or(0, |s| s.len());
        if image_patches.len() != index_sets.len() || index_sets.iter().any(|s| s.len() != seq_len) {
            return Err(Error::Contract(
                "encode needs one equal-length index set per image".into(),
            ));
        }
        let pd = self.config.patch_dim();
        let mut patches = Array2::zeros((seq_len * index_sets.len(), pd));
        let mut flat = Vec::with_capacity(patches.nrows());
        for (b, (img, set)) in image_patches.iter().zip(index_sets).enumerate() {
            for (k, &idx) in set.iter().enumerate() {
                if idx >= self.grid.n_patches() {
                    return Err(Error::Contract(format!("patch index {idx} outside grid")));
                }
                patches.row_mut(b * seq_len + k).assign(&img.row(idx));
                flat.push(idx);
            }
        }
        let x = self.embed(p, patches.view(), &flat);
        let TransformerOutput { output, cache, .. } = self.stack.forward(p, x, seq_len, keep_cache, false)?;
        Ok(EncoderPass {
            output,
            seq_len,
            patches,
            cache,
        })
    }

    /// Accumulates parameter gradients for a pass made with `keep_cache`.
    pub fn backward(&self, p: &ParamStore<F>, g: &mut ParamStore<F>, pass: &EncoderPass<F>, dout: ArrayView2<'_, F>) {
        let cache = pass.cache.as_ref().expect("encoder pass was run without a cache");
        let dx = self.stack.backward(p, g, cache, dout, pass.seq_len);
        self.patch_embed.accumulate(g, pass.patches.view(), dx.view());
    }

    /// Runs the transformer on already-embedded tokens (positions included).
    pub fn forward(&self, p: &ParamStore<F>, tokens: &TokenSequence<F>) -> Result<TokenSequence<F>> {
        if tokens.width() != self.config.width {
            return Err(Error::Dimension(format!(
                "token width {} does not match encoder width {}",
                tokens.width(),
                self.config.width
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty token sequence".into()));
        }
        let out = self
            .stack
            .forward(p, tokens.embeddings.clone(), tokens.len(), false, false)?;
        TokenSequence::new(tokens.indices.clone(), out.output)
    }

    /// Embeds the given patches of an image and encodes them.
    pub fn forward_indices(&self, p: &ParamStore<F>, image: &Image, indices: &[usize]) -> Result<TokenSequence<F>> {
        let patches = self.patches(image)?;
        let pass = self.encode(p, &[&patches], &[indices], false)?;
        TokenSequence::new(indices.to_vec(), pass.output)
    }

    pub fn forward_full_image(&self, p: &ParamStore<F>, image: &Image) -> Result<TokenSequence<F>> {
        let all: Vec<usize> = (0..self.grid.n_patches()).collect();
        self.forward_indices(p, image, &all)
    }

    /// Final-normed output plus the raw output of every block for a batch of
    /// full images.
    pub fn forward_full_batch(
        &self,
        p: &ParamStore<F>,
        images: &[&Image],
        keep_hidden: bool,
    ) -> Result<TransformerOutput<F>> {
        let n = self.grid.n_patches();
        let pd = self.config.patch_dim();
        let mut patches = Array2::zeros((n * images.len(), pd));
        let mut flat = Vec::with_capacity(patches.nrows());
        for (b, img) in images.iter().enumerate() {
            let ip = self.patches(img)?;
            patches.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&ip);
            flat.extend(0..n);
        }
        let x = self.embed(p, patches.view(), &flat);
        self.stack.forward(p, x, n, false, keep_hidden)
    }

    /// The stack's final layer norm applied to arbitrary rows.
    pub fn final_norm(&self, p: &ParamStore<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        self.stack.norm.forward(p, x).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerNorm;
    use rand::{Rng, SeedableRng};

    fn tiny() -> ViTConfig {
        ViTConfig {
            width: 16,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            patch_size: 4,
            image_size: 16,
            channels: 3,
        }
    }

    fn random_image(seed: u64, cfg: &ViTConfig) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_size * cfg.image_size * cfg.channels;
        Image::new(
            cfg.image_size,
            cfg.image_size,
            cfg.channels,
            (0..n).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        assert!(ViTConfig {
            heads: 3,
            ..ViTConfig::default()
        }
        .validate()
        .is_err());
        assert!(ViTConfig {
            mlp_ratio: 0.0,
            ..ViTConfig::default()
        }
        .validate()
        .is_err());
        assert!(ViTConfig {
            image_size: 30,
            ..ViTConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn depth_zero_is_final_norm_only() {
        let cfg = ViTConfig { depth: 0, ..tiny() };
        let (enc, p) = Encoder::<f64>::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((5, 16), |_| rng.random_range(-1.0..1.0));
        let tokens = TokenSequence::new(vec![0, 3, 4, 9, 15], x.clone()).unwrap();
        let out = enc.forward(&p, &tokens).unwrap();
        let (expected, _) = LayerNorm::normalize(x.view());
        assert!(out.embeddings.abs_diff_eq(&expected, 1e-12));
    }

    #[test]
    fn full_image_forward_covers_grid() {
        let cfg = tiny();
        let (enc, p) = Encoder::<f64>::init(cfg, 3).unwrap();
        let out = enc.forward_full_image(&p, &random_image(4, &cfg)).unwrap();
        assert_eq!(out.indices, (0..16).collect::<Vec<_>>());
        assert_eq!(out.embeddings.dim(), (16, 16));
    }

    #[test]
    fn permutation_equivariance() {
        let (enc, p) = Encoder::<f64>::init(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((6, 16), |_| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = x.clone();
        for (i, &j) in perm.iter().enumerate() {
            xp.row_mut(i).assign(&x.row(j));
        }
        let out = enc.stack.forward(&p, x, 6, false, false).unwrap().output;
        let outp = enc.stack.forward(&p, xp, 6, false, false).unwrap().output;
        for (i, &j) in perm.iter().enumerate() {
            assert!(outp.row(i).abs_diff_eq(&out.row(j), 1e-6));
        }
    }

    #[test]
    fn attention_couples_tokens() {
        let cfg = tiny();
        let (enc, p) = Encoder::<f64>::init(cfg, 7).unwrap();
        let img = random_image(8, &cfg);
        let full = enc.forward_full_image(&p, &img).unwrap();
        let subset = [1usize, 2, 5, 6, 9];
        let alone = enc.forward_indices(&p, &img, &subset).unwrap();
        let restricted = full.select(&subset).unwrap();
        let diff = (&restricted - &alone.embeddings).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "restricted full forward should differ, diff {diff}");
    }

    #[test]
    fn zero_image_outputs_differ_only_through_positions() {
        let cfg = tiny();
        let (enc, mut p) = Encoder::<f64>::init(cfg, 9).unwrap();
        let w = p.id("patch_embed.weight").unwrap();
        p.get_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        let img = Image::filled(16, 16, 3, 0.0);
        let out = enc.forward_full_image(&p, &img).unwrap();
        for i in 1..16 {
            assert!(!out.embeddings.row(0).abs_diff_eq(&out.embeddings.row(i), 1e-9));
        }
        // without positions every token is identical
        let mut enc_nopos = enc.clone();
        enc_nopos.pos.fill(0.0);
        let out = enc_nopos.forward_full_image(&p, &img).unwrap();
        for i in 1..16 {
            assert!(out.embeddings.row(0).abs_diff_eq(&out.embeddings.row(i), 1e-12));
        }
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let (enc, mut p) = Encoder::<f64>::init(tiny(), 10).unwrap();
        let id = p.id("blocks.1.mlp.fc2.bias").unwrap();
        p.get_mut(id).data[0] = f64::NAN;
        let err = enc.forward_full_image(&p, &random_image(11, &tiny())).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { layer: 1, .. }), "{err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let (enc, p) = Encoder::<f32>::init(cfg, 12).unwrap();
        let img = random_image(13, &cfg);
        assert_eq!(
            enc.forward_full_image(&p, &img).unwrap(),
            enc.forward_full_image(&p, &img).unwrap()
        );
    }
}
