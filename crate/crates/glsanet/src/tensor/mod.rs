//! Dense-tensor engine: row-major `Tensor<T>` values, an eager reverse-mode
//! autodiff [`Tape`], deterministic Kaiming initialization, SGD with momentum,
//! and a multiply–accumulate counter.
//!
//! Model state is `f32`. Everything is generic over [`Scalar`] so the same
//! operations can run in `f64` as a shadow path for finite-difference oracles.

mod counter;
pub mod gradcheck;
mod params;
mod raw;
mod tape;

pub use counter::MulAddCounter;
pub use params::{kaiming_fan_in, ParamSet, SgdMomentum, TapeBinding};
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::Debug;

/// Element type of the engine: `f32` for model state, `f64` for the shadow
/// evaluation mode used by finite-difference oracles.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Debug + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense multi-dimensional array, row-major. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn byte_len(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<T>()) as u64
    }

    /// Value at a multi-index. Debug/test convenience; not a hot path.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of extent {dim} at axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Rectangular sub-tensor copy. `offsets` and `sizes` have one entry per axis.
    pub fn crop(&self, offsets: &[usize], sizes: &[usize]) -> Result<Tensor<T>> {
        check_crop(&self.shape, offsets, sizes)?;
        let mut out = vec![T::zero(); sizes.iter().product()];
        raw::crop_copy(&self.data, &self.shape, offsets, sizes, &mut out);
        Tensor::new(sizes.to_vec(), out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let (shape, spans) = check_concat(
            &parts.iter().map(|p| p.shape.as_slice()).collect::<Vec<_>>(),
            axis,
        )?;
        let mut data = vec![T::zero(); shape.iter().product()];
        raw::concat_copy(
            &parts.iter().map(|p| p.data.as_slice()).collect::<Vec<_>>(),
            &spans,
            axis,
            &shape,
            &mut data,
        );
        Tensor::new(shape, data)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Tensor::new(shape, self.data.clone())
    }
}

pub(crate) fn check_crop(shape: &[usize], offsets: &[usize], sizes: &[usize]) -> Result<()> {
    if offsets.len() != shape.len() || sizes.len() != shape.len() {
        return Err(Error::Dimension(format!(
            "crop rank mismatch: tensor {:?}, offsets {:?}, sizes {:?}",
            shape, offsets, sizes
        )));
    }
    for (axis, ((&off, &size), &dim)) in offsets.iter().zip(sizes).zip(shape).enumerate() {
        if size == 0 || off + size > dim {
            return Err(Error::Bounds(format!(
                "crop axis {axis}: offset {off} + size {size} exceeds extent {dim}"
            )));
        }
    }
    Ok(())
}

/// Validate concat inputs; returns (output shape, per-part extent along axis).
pub(crate) fn check_concat(shapes: &[&[usize]], axis: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(Error::Dimension(format!(
            "concat axis {axis} out of rank {}",
            first.len()
        )));
    }
    let mut spans = Vec::with_capacity(shapes.len());
    let mut axis_total = 0;
    for s in shapes {
        if s.len() != first.len() {
            return Err(Error::Dimension(format!(
                "concat rank mismatch: {:?} vs {:?}",
                first, s
            )));
        }
        for (ax, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
            if ax != axis && a != b {
                return Err(Error::Dimension(format!(
                    "concat extent mismatch on axis {ax}: {first:?} vs {s:?}"
                )));
            }
        }
        spans.push(s[axis]);
        axis_total += s[axis];
    }
    let mut shape = first.to_vec();
    shape[axis] = axis_total;
    Ok((shape, spans))
}
