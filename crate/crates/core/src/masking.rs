//! Context/target mask sampling: multi-block masking, the per-batch
//! equal-size collation, and the rasterized / block / random comparison
//! strategies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::patch::PatchGrid;

/// An ordered set of patch indices over a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub grid: PatchGrid,
    indices: Vec<usize>,
}

impl Mask {
    /// Builds a mask from arbitrary indices, sorting and deduplicating them.
    pub fn from_indices(grid: PatchGrid, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&bad) = set.iter().next_back().filter(|&&i| i >= grid.n_patches()) {
            return Err(Error::Contract(format!(
                "mask index {bad} outside grid of {} patches",
                grid.n_patches()
            )));
        }
        Ok(Self {
            grid,
            indices: set.into_iter().collect(),
        })
    }

    pub fn full(grid: PatchGrid) -> Self {
        Self {
            grid,
            indices: (0..grid.n_patches()).collect(),
        }
    }

    pub fn empty(grid: PatchGrid) -> Self {
        Self {
            grid,
            indices: Vec::new(),
        }
    }

    /// The `h x w` rectangle with top-left corner `(top, left)`.
    pub fn rectangle(grid: PatchGrid, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > grid.rows || left + w > grid.cols {
            return Err(Error::Contract(format!(
                "block {h}x{w} at ({top},{left}) does not fit a {}x{} grid",
                grid.rows, grid.cols
            )));
        }
        let mut indices = Vec::with_capacity(h * w);
        for r in top..top + h {
            for c in left..left + w {
                indices.push(grid.index(r, c));
            }
        }
        Ok(Self { grid, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    /// `self` minus every index present in any of `others`.
    pub fn subtract(&self, others: &[Mask]) -> Mask {
        let indices = self
            .indices
            .iter()
            .copied()
            .filter(|i| !others.iter().any(|m| m.contains(*i)))
            .collect();
        Mask {
            grid: self.grid,
            indices,
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            grid: self.grid,
            indices: (0..self.grid.n_patches()).filter(|i| !self.contains(*i)).collect(),
        }
    }

    /// Keeps `keep` indices chosen uniformly at random.
    pub fn truncate_random<R: Rng + ?Sized>(&self, keep: usize, rng: &mut R) -> Mask {
        if keep >= self.len() {
            return self.clone();
        }
        let mut chosen: Vec<usize> = index::sample(rng, self.len(), keep)
            .into_iter()
            .map(|k| self.indices[k])
            .collect();
        chosen.sort_unstable();
        Mask {
            grid: self.grid,
            indices: chosen,
        }
    }
}

/// Ranges for sampling `count` rectangular blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockSpec {
    /// Fraction of the grid's patches, `(lo, hi)`.
    pub scale: (f64, f64),
    /// Height/width ratio, `(lo, hi)`.
    pub aspect: (f64, f64),
    pub count: usize,
}

impl BlockSpec {
    pub fn default_targets() -> Self {
        Self {
            scale: (0.15, 0.2),
            aspect: (0.75, 1.5),
            count: 4,
        }
    }

    pub fn default_context() -> Self {
        Self {
            scale: (0.85, 1.0),
            aspect: (1.0, 1.0),
            count: 1,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let (slo, shi) = self.scale;
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return Err(Error::Config(format!(
                "{what} scale ({slo}, {shi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        let (alo, ahi) = self.aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::Config(format!(
                "{what} aspect ({alo}, {ahi}) must satisfy 0 < lo <= hi"
            )));
        }
        if self.count == 0 {
            return Err(Error::Config(format!("{what} count must be at least 1")));
        }
        Ok(())
    }

    fn sample_dims<R: Rng + ?Sized>(&self, grid: &PatchGrid, rng: &mut R) -> (usize, usize) {
        let scale = uniform(rng, self.scale);
        let aspect = uniform(rng, self.aspect);
        block_dims(grid, scale, aspect)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    MultiBlock,
    Rasterized,
    Block,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MultiBlock,
        Strategy::Rasterized,
        Strategy::Block,
        Strategy::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::MultiBlock => "multi-block",
            Strategy::Rasterized => "rasterized",
            Strategy::Block => "block",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown masking strategy `{s}`")))
    }
}

/// Everything the sampler needs besides the grid and an RNG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskSpec {
    pub strategy: Strategy,
    pub targets: BlockSpec,
    pub context: BlockSpec,
    /// Target scale for the `block` strategy.
    pub block_scale: f64,
    /// Target fraction for the `random` strategy.
    pub random_ratio: f64,
    pub min_context_patches: usize,
    pub max_retries: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::MultiBlock,
            targets: BlockSpec::default_targets(),
            context: BlockSpec::default_context(),
            block_scale: 0.6,
            random_ratio: 0.6,
            min_context_patches: 4,
            max_retries: 20,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.targets.validate("target")?;
        self.context.validate("context")?;
        if self.context.count != 1 {
            return Err(Error::Config("context count must be 1".into()));
        }
        if !(self.block_scale > 0.0 && self.block_scale < 1.0) {
            return Err(Error::Config(format!(
                "block scale {} must lie in (0, 1)",
                self.block_scale
            )));
        }
        if !(self.random_ratio > 0.0 && self.random_ratio < 1.0) {
            return Err(Error::Config(format!(
                "random ratio {} must lie in (0, 1)",
                self.random_ratio
            )));
        }
        Ok(())
    }
}

/// Block height and width (in patches) for a scale and height/width aspect:
/// `h = round(sqrt(scale*N/aspect))`, `w = round(sqrt(scale*N*aspect))`,
/// each clamped to the grid.
pub fn block_dims(grid: &PatchGrid, scale: f64, aspect: f64) -> (usize, usize) {
    let area = scale * grid.n_patches() as f64;
    let h = (area / aspect).sqrt().round() as usize;
    let w = (area * aspect).sqrt().round() as usize;
    (h.clamp(1, grid.rows), w.clamp(1, grid.cols))
}

/// An `h x w` rectangle at a uniformly random top-left corner.
pub fn sample_block<R: Rng + ?Sized>(grid: &PatchGrid, (h, w): (usize, usize), rng: &mut R) -> Result<Mask> {
    if h == 0 || w == 0 || h > grid.rows || w > grid.cols {
        return Err(Error::Contract(format!(
            "block {h}x{w} does not fit a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let top = rng.random_range(0..=grid.rows - h);
    let left = rng.random_range(0..=grid.cols - w);
    Mask::rectangle(*grid, top, left, h, w)
}

/// One multi-block draw: independent target rectangles (overlaps allowed),
/// then a context rectangle with every target index removed. Resamples when
/// the context ends up smaller than `min_context_patches`.
pub fn sample_context_and_targets<R: Rng + ?Sized>(
    grid: &PatchGrid,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<(Mask, Vec<Mask>)> {
    for _ in 0..=spec.max_retries {
        let targets = (0..spec.targets.count)
            .map(|_| sample_block(grid, spec.targets.sample_dims(grid, rng), rng))
            .collect::<Result<Vec<_>>>()?;
        let block = sample_block(grid, spec.context.sample_dims(grid, rng), rng)?;
        let context = block.subtract(&targets);
        if context.len() >= spec.min_context_patches {
            return Ok((context, targets));
        }
    }
    Err(Error::SamplerExhausted {
        retries: spec.max_retries,
        reason: format!(
            "context kept fewer than {} patches after removing targets",
            spec.min_context_patches
        ),
    })
}

/// Context and targets for one image under any strategy.
pub fn strategy_masks<R: Rng + ?Sized>(grid: &PatchGrid, spec: &MaskSpec, rng: &mut R) -> Result<(Mask, Vec<Mask>)> {
    match spec.strategy {
        Strategy::MultiBlock => sample_context_and_targets(grid, spec, rng),
        Strategy::Rasterized => {
            let quadrants = quadrants(grid)?;
            let pick = rng.random_range(0..4);
            let context = quadrants[pick].clone();
            let targets = quadrants
                .into_iter()
                .enumerate()
                .filter(|(i, _)| *i != pick)
                .map(|(_, m)| m)
                .collect();
            Ok((context, targets))
        }
        Strategy::Block => {
            let dims = block_dims(grid, spec.block_scale, 1.0);
            let target = sample_block(grid, dims, rng)?;
            Ok((target.complement(), vec![target]))
        }
        Strategy::Random => {
            let target = random_target(grid, spec.random_ratio, rng)?;
            Ok((target.complement(), vec![target]))
        }
    }
}

fn quadrants(grid: &PatchGrid) -> Result<[Mask; 4]> {
    if !grid.rows.is_multiple_of(2) || !grid.cols.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rasterized masking needs an even grid, got {}x{}",
            grid.rows, grid.cols
        )));
    }
    let (h, w) = (grid.rows / 2, grid.cols / 2);
    Ok([
        Mask::rectangle(*grid, 0, 0, h, w)?,
        Mask::rectangle(*grid, 0, w, h, w)?,
        Mask::rectangle(*grid, h, 0, h, w)?,
        Mask::rectangle(*grid, h, w, h, w)?,
    ])
}

fn random_target<R: Rng + ?Sized>(grid: &PatchGrid, ratio: f64, rng: &mut R) -> Result<Mask> {
    let n = grid.n_patches();
    let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    Mask::from_indices(*grid, index::sample(rng, n, k))
}

/// Masks for a batch, with one context cardinality and one target
/// cardinality shared by every image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub grid: PatchGrid,
    pub contexts: Vec<Mask>,
    /// `targets[image][block]`.
    pub targets: Vec<Vec<Mask>>,
    pub context_size: usize,
    pub target_size: usize,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn context_ratio(&self) -> f64 {
        self.context_size as f64 / self.grid.n_patches() as f64
    }

    /// Checks the equal-cardinality and disjointness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.contexts.len() != self.targets.len() || self.contexts.is_empty() {
            return Err(Error::Contract("batch must hold one context per image".into()));
        }
        let m = self.n_targets();
        for (ctx, tgts) in self.contexts.iter().zip(&self.targets) {
            if ctx.len() != self.context_size {
                return Err(Error::Contract("context sizes differ within batch".into()));
            }
            if tgts.len() != m {
                return Err(Error::Contract("target counts differ within batch".into()));
            }
            for t in tgts {
                if t.len() != self.target_size {
                    return Err(Error::Contract("target sizes differ within batch".into()));
                }
                if !ctx.is_disjoint(t) {
                    return Err(Error::Contract("context overlaps a target".into()));
                }
            }
        }
        Ok(())
    }
}

/// Equalizes per-image samples: every context is cut to the batch-minimum
/// context size and every target to the batch-minimum target size, dropping
/// indices uniformly at random.
pub fn collate_batch<R: Rng + ?Sized>(
    samples: Vec<(Mask, Vec<Mask>)>,
    min_context_patches: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("cannot collate an empty batch".into()));
    };
    let grid = first.0.grid;
    let m = first.1.len();
    if m == 0 {
        return Err(Error::Contract("every image needs at least one target".into()));
    }
    for (ctx, tgts) in &samples {
        if ctx.grid != grid || tgts.iter().any(|t| t.grid != grid) {
            return Err(Error::Contract("all masks in a batch must share one grid".into()));
        }
        if tgts.len() != m {
            return Err(Error::Contract("all images need the same number of targets".into()));
        }
    }
    let context_size = samples.iter().map(|(c, _)| c.len()).min().unwrap_or(0);
    if context_size < min_context_patches {
        return Err(Error::SamplerExhausted {
            retries: 0,
            reason: format!("batch-minimum context {context_size} below {min_context_patches}"),
        });
    }
    let target_size = samples
        .iter()
        .flat_map(|(_, t)| t.iter().map(Mask::len))
        .min()
        .unwrap_or(0);
    let mut contexts = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for (ctx, tgts) in samples {
        contexts.push(ctx.truncate_random(context_size, rng));
        targets.push(tgts.iter().map(|t| t.truncate_random(target_size, rng)).collect());
    }
    Ok(MaskedBatch {
        grid,
        contexts,
        targets,
        context_size,
        target_size,
    })
}

/// Samples masks for `batch_size` images. Block dimensions are drawn once per
/// batch (one size for the context block, one for all target blocks) and
/// only positions vary per image, so target sizes agree by construction;
/// contexts are then equalized by [`collate_batch`].
pub fn sample_batch<R: Rng + ?Sized>(
    grid: &PatchGrid,
    spec: &MaskSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut last_err = None;
    for _ in 0..=spec.max_retries {
        let samples = match spec.strategy {
            Strategy::MultiBlock => sample_shared_multiblock(grid, spec, batch_size, rng),
            Strategy::Block => {
                let dims = block_dims(grid, spec.block_scale, 1.0);
                (0..batch_size)
                    .map(|_| {
                        let t = sample_block(grid, dims, rng)?;
                        Ok((t.complement(), vec![t]))
                    })
                    .collect()
            }
            Strategy::Rasterized | Strategy::Random => {
                (0..batch_size).map(|_| strategy_masks(grid, spec, rng)).collect()
            }
        };
        match samples.and_then(|s| collate_batch(s, spec.min_context_patches, rng)) {
            Ok(batch) => return Ok(batch),
            Err(e @ Error::SamplerExhausted { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::SamplerExhausted {
        retries: spec.max_retries,
        reason: last_err.map_or_else(String::new, |e| e.to_string()),
    })
}

fn sample_shared_multiblock<R: Rng + ?Sized>(
    grid: &PatchGrid,
    spec: &MaskSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(Mask, Vec<Mask>)>> {
    let target_dims = spec.targets.sample_dims(grid, rng);
    let context_dims = spec.context.sample_dims(grid, rng);
    let mut samples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut found = None;
        for _ in 0..=spec.max_retries {
            let targets = (0..spec.targets.count)
                .map(|_| sample_block(grid, target_dims, rng))
                .collect::<Result<Vec<_>>>()?;
            let context = sample_block(grid, context_dims, rng)?.subtract(&targets);
            if context.len() >= spec.min_context_patches {
                found = Some((context, targets));
                break;
            }
        }
        match found {
            Some(s) => samples.push(s),
            None => {
                return Err(Error::SamplerExhausted {
                    retries: spec.max_retries,
                    reason: format!("blocks {target_dims:?} leave no room for a context"),
                })
            }
        }
    }
    Ok(samples)
}

/// `count` independent draws on a `rows x cols` grid from one seeded
/// stream, for inspection.
pub fn sample_masks(
    rows: usize,
    cols: usize,
    spec: &MaskSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<(Mask, Vec<Mask>)>> {
    use rand::SeedableRng;
    let grid = PatchGrid::new(rows, cols, 1)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| strategy_masks(&grid, spec, &mut rng)).collect()
}

/// JSON form used by the `sample-masks` command.
#[derive(Debug, Clone, Serialize)]
pub struct MaskRecord {
    pub grid: [usize; 2],
    pub context_indices: Vec<usize>,
    pub target_indices: Vec<Vec<usize>>,
}

impl MaskRecord {
    pub fn new(context: &Mask, targets: &[Mask]) -> Self {
        Self {
            grid: [context.grid.rows, context.grid.cols],
            context_indices: context.indices().to_vec(),
            target_indices: targets.iter().map(|t| t.indices().to_vec()).collect(),
        }
    }
}

/// Text picture of a sample: `C` context, `1`-`9` the target block covering
/// a patch (`*` where several overlap), `.` unused.
pub fn render_ascii(context: &Mask, targets: &[Mask]) -> String {
    let grid = context.grid;
    let mut out = String::with_capacity(grid.n_patches() * 2 + grid.rows);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let idx = grid.index(r, c);
            let hits: Vec<usize> = targets
                .iter()
                .enumerate()
                .filter(|(_, t)| t.contains(idx))
                .map(|(i, _)| i)
                .collect();
            let ch = if context.contains(idx) {
                'C'
            } else {
                match hits.as_slice() {
                    [] => '.',
                    [i] => char::from_digit((*i as u32 + 1).min(9), 10).unwrap_or('#'),
                    _ => '*',
                }
            };
            out.push(ch);
            if c + 1 < grid.cols {
                out.push(' ');
            }
        }
        out.push('\n');
    }
    out
}
