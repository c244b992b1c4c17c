//! Named flat parameter storage shared by the encoders, the predictor, the
//! optimizer and the checkpoint format.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Floating point element type for the model. Training runs in `f32`; the
/// finite-difference checks run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    /// Whether decoupled weight decay applies (false for norms and biases).
    pub decay: bool,
}

impl<F: Real> Param<F> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An ordered collection of named tensors. Two stores built from the same
/// config have identical layouts, which is what EMA, the optimizer and the
/// gradient buffers rely on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<F>, decay: bool) -> ParamId {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter {name}: shape/data mismatch");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            decay,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, F> {
        let p = &self.params[id.0];
        let (r, c) = as_2d(&p.shape);
        ArrayView2::from_shape((r, c), &p.data).expect("contiguous parameter")
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let p = &mut self.params[id.0];
        let (r, c) = as_2d(&p.shape);
        ArrayViewMut2::from_shape((r, c), &mut p.data).expect("contiguous parameter")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.params[id.0].data[..])
    }

    pub fn vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.params[id.0].data[..])
    }

    /// A store with the same layout and every element set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill_zero();
        out
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn same_layout<G: Real>(&self, other: &ParamStore<G>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout<G: Real>(&self, other: &ParamStore<G>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::CheckpointIncompatible(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::CheckpointIncompatible(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }

    pub fn is_all_zero(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| *v == F::zero()))
    }

    /// Converts every element to another float type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| G::from_f64c(v.to_f64c())).collect(),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value
    /// (as f64, so the hash is independent of the element type).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_f64c().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Adds every parameter of `other` under `prefix`, keeping decay flags.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Self) {
        for p in &other.params {
            self.add(format!("{prefix}{}", p.name), &p.shape, p.data.clone(), p.decay);
        }
    }

    /// The sub-store of parameters whose name starts with `prefix`, with the
    /// prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for p in &self.params {
            if let Some(rest) = p.name.strip_prefix(prefix) {
                out.add(rest, &p.shape, p.data.clone(), p.decay);
            }
        }
        out
    }
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("parameter of rank {} viewed as a matrix", shape.len()),
    }
}
