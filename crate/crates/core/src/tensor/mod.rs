//! Dense tensor layer: parameter storage, forward/backward primitives,
//! Adam and finite-difference gradient verification.
//!
//! Tensors are `ndarray` arrays in standard (row-major) layout. The float
//! type is a parameter: `f32` for training, `f64` for verification.

mod adam;
mod gradcheck;
pub mod ops;
mod primitive;

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{gradient_check, relative_error, GradCheckConfig, GradCheckReport, Stencil};
pub use primitive::{primitive_forward_backward, Backward, Primitive};

pub type Tensor<T> = ArrayD<T>;

/// Floating point element type.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Named trainable tensors plus Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub adam_m: BTreeMap<String, Tensor<T>>,
    pub adam_v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Default for ModelParameters<T> {
    fn default() -> Self {
        ModelParameters {
            tensors: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// Whether weight decay applies to a parameter: affine weights only.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".w")
}

/// Whether a tensor holds running statistics rather than a trained value.
pub fn is_statistic(name: &str) -> bool {
    name.ends_with(".mean") || name.ends_with(".var")
}

impl<T: Real> ModelParameters<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.adam_m.insert(name.clone(), Tensor::zeros(value.raw_dim()));
        self.adam_v.insert(name.clone(), Tensor::zeros(value.raw_dim()));
        self.tensors.insert(name, value);
    }

    /// Inserts an affine layer `name.w` (`fan_in × fan_out`, Glorot-uniform)
    /// and a zero bias `name.b`.
    pub fn init_affine(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Stream) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.random_range(-bound..bound)));
        self.insert(format!("{name}.w"), w.into_dyn());
        self.insert(format!("{name}.b"), Array1::<T>::zeros(fan_out).into_dyn());
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.adam_m.remove(name);
        self.adam_v.remove(name);
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        let t = self.get(name)?;
        t.view().into_dimensionality::<Ix2>().map_err(|_| Error::ShapeMismatch {
            op: "parameter lookup",
            detail: format!("`{name}` has shape {:?}, expected rank 2", t.shape()),
        })
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        let t = self.get(name)?;
        t.view().into_dimensionality::<Ix1>().map_err(|_| Error::ShapeMismatch {
            op: "parameter lookup",
            detail: format!("`{name}` has shape {:?}, expected rank 1", t.shape()),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// `Σ w²` over decayed parameters, accumulated in f64.
    pub fn decay_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(n, _)| is_decayed(n))
            .map(|(_, t)| t.iter().map(|v| v.f64() * v.f64()).sum::<f64>())
            .sum()
    }

    /// Gradient of `beta · Σ w²` over decayed parameters.
    pub fn decay_gradient(&self, beta: f64) -> GradientSet<T> {
        let mut g = GradientSet::default();
        for (n, t) in &self.tensors {
            if is_decayed(n) {
                g.accumulate(n, t.mapv(|v| T::of(2.0 * beta * v.f64())));
            }
        }
        g
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.f64()))))
                .collect()
        };
        ModelParameters {
            tensors: conv(&self.tensors),
            adam_m: conv(&self.adam_m),
            adam_v: conv(&self.adam_v),
            step: self.step,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in &self.tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{n}`")));
            }
        }
        Ok(())
    }
}

/// Gradients keyed like [`ModelParameters::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for GradientSet<T> {
    fn default() -> Self {
        GradientSet {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> GradientSet<T> {
    /// Adds `value` into the entry `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, value: Tensor<T>) {
        match self.tensors.get_mut(name) {
            Some(t) => {
                assert_eq!(t.shape(), value.shape(), "gradient shape mismatch for `{name}`");
                *t += &value;
            }
            None => {
                self.tensors.insert(name.to_string(), value);
            }
        }
    }

    pub fn accumulate2(&mut self, name: &str, value: Array2<T>) {
        self.accumulate(name, value.into_dyn());
    }

    pub fn accumulate1(&mut self, name: &str, value: Array1<T>) {
        self.accumulate(name, value.into_dyn());
    }

    /// Adds every entry of `other`.
    pub fn merge(&mut self, other: GradientSet<T>) {
        for (k, v) in other.tensors {
            self.accumulate(&k, v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| T::of(v.f64() * s));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Checks keys and shapes against `params`.
    pub fn check_against(&self, params: &ModelParameters<T>) -> Result<()> {
        for (k, v) in &self.tensors {
            let p = params
                .tensors
                .get(k)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{k}`")))?;
            if p.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "gradient",
                    detail: format!("`{k}`: gradient {:?} vs parameter {:?}", v.shape(), p.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in &self.tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient `{n}`")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GradientSet<U> {
        GradientSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.f64()))))
                .collect(),
        }
    }
}

