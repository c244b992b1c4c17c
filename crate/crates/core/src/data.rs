//! Synthetic shapes corpus: small images with 2 to 4 flat-colored shapes on
//! a noisy background. The class label is the type of the largest shape;
//! the auxiliary label is the number of shapes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::patch::{Dataset, Image, Label};
use crate::seed::derive_rng;

pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; N_CLASSES] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn class(self) -> usize {
        self as usize
    }

    /// Whether the offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            Shape::Cross => {
                let t = r / 3.0;
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-extent range of the dominant shape, in pixels.
    pub major_radius: (f32, f32),
    /// Half-extent range of the other shapes.
    pub minor_radius: (f32, f32),
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            count: 2048,
            seed: 0,
            min_objects: 2,
            max_objects: 4,
            major_radius: (9.0, 12.0),
            minor_radius: (2.5, 4.0),
            noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        let (a, b) = self.major_radius;
        let (c, d) = self.minor_radius;
        if !(0.0 < c && c <= d && d < a && a <= b && 2.0 * b < self.image_size as f32) {
            return Err(Error::Config(
                "shape radii must satisfy 0 < minor <= minor_max < major <= major_max < size/2".into(),
            ));
        }
        Ok(())
    }
}

/// Renders image `index` of the corpus. Each image has its own random
/// stream, so a corpus is a prefix of any larger corpus with the same seed.
pub fn render(config: &SynthConfig, index: u64) -> (Image, Label) {
    let mut rng = derive_rng(config.seed, "synth-image", index);
    let s = config.image_size;
    let mut img = Image::filled(s, s, 3, 0.0);
    let bg: [f32; 3] = [
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
    ];
    for (c, &b) in bg.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                let n = rng.random_range(-config.noise..=config.noise);
                *img.at_mut(c, y, x) = (b + n).clamp(0.0, 1.0);
            }
        }
    }

    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let class = rng.random_range(0..N_CLASSES);
    for k in 0..n_objects {
        let (shape, r) = if k == 0 {
            (
                Shape::ALL[class],
                rng.random_range(config.major_radius.0..=config.major_radius.1),
            )
        } else {
            let t = Shape::ALL[rng.random_range(0..N_CLASSES)];
            (t, rng.random_range(config.minor_radius.0..=config.minor_radius.1))
        };
        let lo = r;
        let hi = s as f32 - r;
        let cx = rng.random_range(lo..=hi);
        let cy = rng.random_range(lo..=hi);
        let color: [f32; 3] = [
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
        ];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                if shape.contains(dx, dy, r) {
                    for (c, &v) in color.iter().enumerate() {
                        *img.at_mut(c, y, x) = v;
                    }
                }
            }
        }
    }
    (
        img,
        Label {
            class: class as u32,
            count: n_objects as u32,
        },
    )
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (images, labels): (Vec<_>, Vec<_>) = (0..config.count as u64).map(|i| render(config, i)).unzip();
    Ok(Dataset {
        images,
        labels: Some(labels),
    })
}
