//! Images, patch grids and the ViT front end: patchify, fixed 2-D sinusoidal
//! positional embeddings and the linear patch projection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// A planar (channel-major) float image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `channels * height * width` values, index `(c * height + y) * width + x`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("image contains non-finite value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// The patch layout of an image: `rows x cols` non-overlapping squares,
/// indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Dimension(format!(
                "patch grid {rows}x{cols} is degenerate (need at least 2x2)"
            )));
        }
        if patch_size == 0 {
            return Err(Error::Dimension("patch size must be positive".into()));
        }
        Ok(Self { rows, cols, patch_size })
    }

    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(Error::Dimension(format!(
                "image {height}x{width} is not divisible into {patch_size}px patches"
            )));
        }
        Self::new(height / patch_size, width / patch_size, patch_size)
    }

    #[inline]
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }
}

/// Patch-level representations for an ordered subset of grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    pub indices: Vec<usize>,
    /// One row per index.
    pub embeddings: Array2<F>,
}

impl<F: Real> TokenSequence<F> {
    pub fn new(indices: Vec<usize>, embeddings: Array2<F>) -> Result<Self> {
        if indices.len() != embeddings.nrows() {
            return Err(Error::Dimension(format!(
                "{} indices for {} embedding rows",
                indices.len(),
                embeddings.nrows()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("token indices must be strictly increasing".into()));
        }
        Ok(Self { indices, embeddings })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Rows for the given grid indices, each of which must be present.
    pub fn select(&self, indices: &[usize]) -> Result<Array2<F>> {
        let mut out = Array2::zeros((indices.len(), self.width()));
        for (r, &idx) in indices.iter().enumerate() {
            let pos = self
                .indices
                .binary_search(&idx)
                .map_err(|_| Error::Contract(format!("index {idx} not in token sequence")))?;
            out.row_mut(r).assign(&self.embeddings.row(pos));
        }
        Ok(out)
    }
}

/// Splits an image into flattened patch vectors, one row per patch in
/// row-major grid order. Within a patch the layout is `(dy, dx, channel)`.
pub fn patchify(image: &Image, patch_size: usize) -> Result<(PatchGrid, Array2<f32>)> {
    let grid = PatchGrid::for_image(image.height, image.width, patch_size)?;
    let p = patch_size;
    let c = image.channels;
    let mut out = Array2::zeros((grid.n_patches(), grid.patch_dim(c)));
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (pr, pc) = grid.coords(k);
        let mut j = 0;
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    row[j] = image.at(ch, pr * p + dy, pc * p + dx);
                    j += 1;
                }
            }
        }
    }
    Ok((grid, out))
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid, patches: ArrayView2<'_, f32>, channels: usize) -> Result<Image> {
    if patches.nrows() != grid.n_patches() || patches.ncols() != grid.patch_dim(channels) {
        return Err(Error::Dimension(format!(
            "expected {}x{} patch matrix, got {}x{}",
            grid.n_patches(),
            grid.patch_dim(channels),
            patches.nrows(),
            patches.ncols()
        )));
    }
    let p = grid.patch_size;
    let mut img = Image::filled(grid.rows * p, grid.cols * p, channels, 0.0);
    for (k, row) in patches.axis_iter(Axis(0)).enumerate() {
        let (pr, pc) = grid.coords(k);
        let mut j = 0;
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..channels {
                    *img.at_mut(ch, pr * p + dy, pc * p + dx) = row[j];
                    j += 1;
                }
            }
        }
    }
    Ok(img)
}

/// Fixed 2-D sin/cos positional embeddings: the first half of each vector
/// encodes the patch row, the second half the column, each as
/// `[sin(pos * w_k), cos(pos * w_k)]` with `w_k = 10000^(-k / (width/4))`.
pub fn positional_embedding<F: Real>(grid: &PatchGrid, width: usize) -> Result<Array2<F>> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding width {width} must be a positive multiple of 4"
        )));
    }
    let quarter = width / 4;
    let mut out = Array2::zeros((grid.n_patches(), width));
    for k in 0..grid.n_patches() {
        let (r, c) = grid.coords(k);
        for (half, pos) in [(0usize, r as f64), (1, c as f64)] {
            let base = half * 2 * quarter;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                out[[k, base + i]] = F::from_f64c((pos * omega).sin());
                out[[k, base + quarter + i]] = F::from_f64c((pos * omega).cos());
            }
        }
    }
    Ok(out)
}

/// `token_k = patch_k · weight + bias + pos_k` for every row.
pub fn embed_patches<F: Real>(
    indices: &[usize],
    patches: ArrayView2<'_, F>,
    weight: ArrayView2<'_, F>,
    bias: ArrayView1<'_, F>,
    pos: ArrayView2<'_, F>,
) -> Result<TokenSequence<F>> {
    if patches.ncols() != weight.nrows() {
        return Err(Error::Dimension(format!(
            "patch length {} does not match projection input {}",
            patches.ncols(),
            weight.nrows()
        )));
    }
    if bias.len() != weight.ncols() || pos.ncols() != weight.ncols() || pos.nrows() != patches.nrows() {
        return Err(Error::Dimension(format!(
            "projection width {} vs bias {} vs positions {}x{}",
            weight.ncols(),
            bias.len(),
            pos.nrows(),
            pos.ncols()
        )));
    }
    let mut tokens = patches.dot(&weight);
    tokens += &bias;
    tokens += &pos;
    TokenSequence::new(indices.to_vec(), tokens)
}

const DATASET_MAGIC: &[u8; 8] = b"IJDSET01";
const LABEL_MAGIC: &[u8; 4] = b"LBLS";

/// Per-image labels carried by the dataset file's optional trailer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub class: u32,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Option<Vec<Label>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` shared by every image.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|i| (i.height, i.width, i.channels))
    }
}

/// Writes the uncompressed dataset format: magic, then `count, H, W, C` as
/// little-endian u32, then planar f32 pixels, then an optional label trailer
/// (`LBLS` followed by `(class, count)` u32 pairs).
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let (h, w, c) = dataset.dims().unwrap_or((0, 0, 0));
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(format!("write {}", path.display()), e);
    out.write_all(DATASET_MAGIC).map_err(io)?;
    for v in [dataset.len(), h, w, c] {
        out.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for img in &dataset.images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::Dimension("dataset images must share dimensions".into()));
        }
        for v in &img.data {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    if let Some(labels) = &dataset.labels {
        out.write_all(LABEL_MAGIC).map_err(io)?;
        for l in labels {
            out.write_all(&l.class.to_le_bytes()).map_err(io)?;
            out.write_all(&l.count.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut input = BufReader::new(file);
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
    if &magic != DATASET_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut header = [0u32; 4];
    for v in &mut header {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *v = u32::from_le_bytes(b);
    }
    let [count, h, w, c] = header.map(|v| v as usize);
    let per_image = h * w * c;
    let mut buf = vec![0u8; per_image * 4];
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut buf).map_err(|_| bad("truncated pixel payload"))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        images.push(Image::new(h, w, c, data)?);
    }
    let mut tail = Vec::new();
    input
        .read_to_end(&mut tail)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let labels = if tail.is_empty() {
        None
    } else {
        if tail.len() != 4 + count * 8 || &tail[..4] != LABEL_MAGIC {
            return Err(bad("malformed label trailer"));
        }
        Some(
            tail[4..]
                .chunks_exact(8)
                .map(|b| Label {
                    class: u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                    count: u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                })
                .collect(),
        )
    };
    Ok(Dataset { images, labels })
}
