//! Transformer building blocks with explicit forward caches and backward
//! passes. Activations are `(rows, width)` matrices holding several
//! equal-length sequences stacked row-wise; attention only mixes rows of the
//! same sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Truncated normal at +-2 sigma.
pub fn trunc_normal<R: Rng + ?Sized, F: Real>(rng: &mut R, n: usize, std: f64) -> Vec<F> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break F::from_f64c(z * std);
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            trunc_normal(rng, in_dim * out_dim, INIT_STD),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], vec![F::zero(); out_dim], false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&p.matrix(self.weight));
        if let Some(b) = self.bias {
            y += &p.vector(b);
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        x: ArrayView2<'_, F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        self.accumulate(g, x, dy);
        dy.dot(&p.matrix(self.weight).t())
    }

    /// Parameter gradients only.
    pub fn accumulate<F: Real>(&self, g: &mut ParamStore<F>, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.matrix_mut(self.weight));
        if let Some(b) = self.bias {
            let gb = dy.sum_axis(Axis(0));
            g.vector_mut(b).zip_mut_with(&gb, |a, &b| *a += b);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl LayerNorm {
    pub fn init<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.weight"), &[dim], vec![F::one(); dim], false),
            shift: store.add(format!("{name}.bias"), &[dim], vec![F::zero(); dim], false),
        }
    }

    /// Per-row standardization without the affine part.
    pub fn normalize<F: Real>(x: ArrayView2<'_, F>) -> (Array2<F>, Array1<F>) {
        let d = F::from_usize(x.ncols()).unwrap_or_else(F::one);
        let eps = F::from_f64c(LN_EPS);
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *r = inv;
        }
        (xhat, rstd)
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<'_, F>) -> (Array2<F>, LayerNormCache<F>) {
        let (xhat, rstd) = Self::normalize(x);
        let mut y = &xhat * &p.vector(self.scale);
        y += &p.vector(self.shift);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let gscale = (&dy * &cache.xhat).sum_axis(Axis(0));
        g.vector_mut(self.scale).zip_mut_with(&gscale, |a, &b| *a += b);
        let gshift = dy.sum_axis(Axis(0));
        g.vector_mut(self.shift).zip_mut_with(&gshift, |a, &b| *a += b);

        let d = F::from_usize(dy.ncols()).unwrap_or_else(F::one);
        let mut dxhat = &dy * &p.vector(self.scale);
        for ((mut row, xh), &r) in dxhat
            .axis_iter_mut(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.rstd.iter())
        {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|v, &h| *v = r * (*v - mean_d - h * mean_dx));
        }
        dxhat
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub width: usize,
}

pub struct AttentionCache<F> {
    input: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    mixed: Array2<F>,
}

impl Attention {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            qkv: Linear::init(store, &format!("{name}.qkv"), width, 3 * width, true, rng),
            proj: Linear::init(store, &format!("{name}.proj"), width, width, true, rng),
            heads,
            width,
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: Array2<F>, seq_len: usize) -> (Array2<F>, AttentionCache<F>) {
        let n = x.nrows();
        let (d, hd) = (self.width, self.head_dim());
        let scale = F::one() / F::from_usize(hd).unwrap_or_else(F::one).sqrt();
        let qkv = self.qkv.forward(p, x.view());
        let mut mixed = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity((n / seq_len.max(1)) * self.heads);
        for s0 in (0..n).step_by(seq_len.max(1)) {
            let rows = s0..s0 + seq_len;
            for h in 0..self.heads {
                let c = h * hd;
                let q = qkv.slice(s![rows.clone(), c..c + hd]);
                let k = qkv.slice(s![rows.clone(), d + c..d + c + hd]);
                let v = qkv.slice(s![rows.clone(), 2 * d + c..2 * d + c + hd]);
                let mut att = q.dot(&k.t());
                att.mapv_inplace(|a| a * scale);
                softmax_rows(&mut att);
                mixed.slice_mut(s![rows.clone(), c..c + hd]).assign(&att.dot(&v));
                probs.push(att);
            }
        }
        let out = self.proj.forward(p, mixed.view());
        (
            out,
            AttentionCache {
                input: x,
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &AttentionCache<F>,
        dy: ArrayView2<'_, F>,
        seq_len: usize,
    ) -> Array2<F> {
        let n = dy.nrows();
        let (d, hd) = (self.width, self.head_dim());
        let scale = F::one() / F::from_usize(hd).unwrap_or_else(F::one).sqrt();
        let dmixed = self.proj.backward(p, g, cache.mixed.view(), dy);
        let mut dqkv = Array2::zeros((n, 3 * d));
        let mut pi = 0;
        for s0 in (0..n).step_by(seq_len.max(1)) {
            let rows = s0..s0 + seq_len;
            for h in 0..self.heads {
                let c = h * hd;
                let att = &cache.probs[pi];
                pi += 1;
                let q = cache.qkv.slice(s![rows.clone(), c..c + hd]);
                let k = cache.qkv.slice(s![rows.clone(), d + c..d + c + hd]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * d + c..2 * d + c + hd]);
                let dout = dmixed.slice(s![rows.clone(), c..c + hd]);
                let dv = att.t().dot(&dout);
                let mut datt = dout.dot(&v.t());
                // softmax backward: dS = P * (dP - rowsum(dP * P))
                for (mut drow, prow) in datt.axis_iter_mut(Axis(0)).zip(att.axis_iter(Axis(0))) {
                    let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
                }
                let dq = datt.dot(&k);
                let dk = datt.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), c..c + hd]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + c..d + c + hd]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * d + c..2 * d + c + hd]).assign(&dv);
            }
        }
        self.qkv.backward(p, g, cache.input.view(), dqkv.view())
    }
}

fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64c(GELU_C);
    let a = F::from_f64c(GELU_A);
    let half = F::from_f64c(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64c(GELU_C);
    let a = F::from_f64c(GELU_A);
    let half = F::from_f64c(0.5);
    let three = F::from_f64c(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache<F> {
    input: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl Mlp {
    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(p, x.view());
        let act = pre.mapv(gelu);
        let out = self.fc2.forward(p, act.view());
        (out, MlpCache { input: x, pre, act })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &MlpCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let mut dact = self.fc2.backward(p, g, cache.act.view(), dy);
        Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        self.fc1.backward(p, g, cache.input.view(), dact.view())
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl Block {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = ((width as f64) * mlp_ratio).round().max(1.0) as usize;
        let norm1 = LayerNorm::init(store, &format!("{name}.norm1"), width);
        let attn = Attention::init(store, &format!("{name}.attn"), width, heads, rng);
        let norm2 = LayerNorm::init(store, &format!("{name}.norm2"), width);
        let fc1 = Linear::init(store, &format!("{name}.mlp.fc1"), width, hidden, true, rng);
        let fc2 = Linear::init(store, &format!("{name}.mlp.fc2"), hidden, width, true, rng);
        Self {
            norm1,
            attn,
            norm2,
            mlp: Mlp { fc1, fc2 },
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: Array2<F>, seq_len: usize) -> (Array2<F>, BlockCache<F>) {
        let (h, ln1) = self.norm1.forward(p, x.view());
        let (a, attn) = self.attn.forward(p, h, seq_len);
        let x1 = x + &a;
        let (h2, ln2) = self.norm2.forward(p, x1.view());
        let (m, mlp) = self.mlp.forward(p, h2);
        let out = x1 + &m;
        (out, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &BlockCache<F>,
        dy: Array2<F>,
        seq_len: usize,
    ) -> Array2<F> {
        let dh2 = self.mlp.backward(p, g, &cache.mlp, dy.view());
        let dx1 = dy + &self.norm2.backward(p, g, &cache.ln2, dh2.view());
        let dh = self.attn.backward(p, g, &cache.attn, dx1.view(), seq_len);
        dx1 + &self.norm1.backward(p, g, &cache.ln1, dh.view())
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct TransformerCache<F> {
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
}

/// Result of a stack forward pass.
pub struct TransformerOutput<F> {
    /// Final-normed output.
    pub output: Array2<F>,
    /// Raw output of every block, when requested.
    pub hidden: Vec<Array2<F>>,
    pub cache: Option<TransformerCache<F>>,
}

impl Transformer {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: f64,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::init(store, &format!("{prefix}blocks.{i}"), width, heads, mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::init(store, &format!("{prefix}norm"), width);
        Self { blocks, norm }
    }

    /// Runs every block on `x` (sequences of `seq_len` rows). Fails with the
    /// offending layer index if an activation stops being finite; layer
    /// `depth` is the final norm.
    pub fn forward<F: Real>(
        &self,
        p: &ParamStore<F>,
        mut x: Array2<F>,
        seq_len: usize,
        keep_cache: bool,
        keep_hidden: bool,
    ) -> Result<TransformerOutput<F>> {
        if seq_len == 0 || !x.nrows().is_multiple_of(seq_len) {
            return Err(Error::Dimension(format!(
                "{} rows do not split into sequences of {seq_len}",
                x.nrows()
            )));
        }
        let mut caches = Vec::with_capacity(if keep_cache { self.blocks.len() } else { 0 });
        let mut hidden = Vec::new();
        for (layer, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(p, x, seq_len);
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalFailure {
                    layer,
                    site: "block output",
                });
            }
            if keep_cache {
                caches.push(cache);
            }
            if keep_hidden {
                hidden.push(y.clone());
            }
            x = y;
        }
        let (output, norm) = self.norm.forward(p, x.view());
        if !output.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure {
                layer: self.blocks.len(),
                site: "final norm",
            });
        }
        Ok(TransformerOutput {
            output,
            hidden,
            cache: keep_cache.then_some(TransformerCache { blocks: caches, norm }),
        })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        g: &mut ParamStore<F>,
        cache: &TransformerCache<F>,
        dy: ArrayView2<'_, F>,
        seq_len: usize,
    ) -> Array2<F> {
        let mut dx = self.norm.backward(p, g, &cache.norm, dy);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = block.backward(p, g, bc, dx, seq_len);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_matrix(&mut rng, 7, 16) * 5.0 + 3.0;
        let (xhat, _) = LayerNorm::normalize(x.view());
        for row in xhat.axis_iter(Axis(0)) {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = rand_matrix(&mut rng, 4, 5) * 30.0;
        softmax_rows(&mut m);
        for row in m.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    /// One attention layer written out with plain loops, no ndarray algebra.
    fn naive_attention(
        x: &Array2<f64>,
        wqkv: &Array2<f64>,
        bqkv: &Array1<f64>,
        wo: &Array2<f64>,
        bo: &Array1<f64>,
        heads: usize,
    ) -> Array2<f64> {
        let (n, d) = x.dim();
        let hd = d / heads;
        let mut qkv = vec![vec![0.0; 3 * d]; n];
        for i in 0..n {
            for j in 0..3 * d {
                let mut acc = bqkv[j];
                for k in 0..d {
                    acc += x[[i, k]] * wqkv[[k, j]];
                }
                qkv[i][j] = acc;
            }
        }
        let mut mixed = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    for k in 0..hd {
                        *s += qkv[i][h * hd + k] * qkv[j][d + h * hd + k];
                    }
                    *s /= (hd as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let pj = (s - max).exp() / z;
                    for k in 0..hd {
                        mixed[i][h * hd + k] += pj * qkv[j][2 * d + h * hd + k];
                    }
                }
            }
        }
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let mut acc = bo[j];
                for k in 0..d {
                    acc += mixed[i][k] * wo[[k, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    #[test]
    fn attention_matches_straight_line_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::init(&mut store, "a", 16, 4, &mut rng);
        // non-trivial biases
        for p in store.params_mut() {
            for v in &mut p.data {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let x = rand_matrix(&mut rng, 6, 16);
        let (y, _) = attn.forward(&store, x.clone(), 6);
        let expected = naive_attention(
            &x,
            &store.matrix(attn.qkv.weight).to_owned(),
            &store.vector(attn.qkv.bias.unwrap()).to_owned(),
            &store.matrix(attn.proj.weight).to_owned(),
            &store.vector(attn.proj.bias.unwrap()).to_owned(),
            4,
        );
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequences_in_a_batch_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let block = Block::init(&mut store, "b", 8, 2, 4.0, &mut rng);
        let a = rand_matrix(&mut rng, 5, 8);
        let b = rand_matrix(&mut rng, 5, 8);
        let both = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let (ya, _) = block.forward(&store, a, 5);
        let (yboth, _) = block.forward(&store, both, 5);
        assert!(ya.abs_diff_eq(&yboth.slice(s![0..5, ..]), 1e-14));
    }
}
