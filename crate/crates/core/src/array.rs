//! Shape-tagged dense arrays and the elementwise primitives shared by
//! attacks and trainers.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The `f32` array every model, attack and dataset works in.
pub type DenseArray = Array<f32>;

impl<T: Scalar> fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Array{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(
                "DenseArray::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for callers that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading dimension, i.e. the batch size for batched tensors.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::contract(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                op,
                node: None,
                step: None,
            })
        }
    }

    pub fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::contract(
                op,
                format!("shape mismatch {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Elementwise sign with `sign(0) == 0`.
    pub fn sign(&self) -> Self {
        self.map(sign_scalar)
    }

    /// Element-type conversion (through `f64`).
    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn linf_distance(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "linf_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Per-row ℓ∞ distance.
    pub fn row_linf_distances(&self, other: &Self) -> Result<Vec<T>> {
        self.ensure_same_shape(other, "row_linf_distances")?;
        Ok((0..self.rows())
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(other.row(i))
                    .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
            })
            .collect())
    }

    /// Gathers the given leading-dimension rows into a new array.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(rows.len());
        } else {
            shape[0] = rows.len();
        }
        Self::from_parts(shape, data)
    }

    /// Overwrites `rows[k]` of `self` with row `k` of `src`.
    pub fn scatter_rows(&mut self, rows: &[usize], src: &Self) -> Result<()> {
        if src.rows() != rows.len() || src.row_len() != self.row_len() {
            return Err(Error::contract(
                "scatter_rows",
                format!(
                    "{} rows of width {} into {:?}",
                    rows.len(),
                    src.row_len(),
                    self.shape
                ),
            ));
        }
        for (k, &r) in rows.iter().enumerate() {
            self.row_mut(r).copy_from_slice(src.row(k));
        }
        Ok(())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v.as_f64()).sum()
    }
}

/// Mathematical sign with `sign(0) = 0`.
pub fn sign_scalar<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Nearest point to `candidate` inside `{r : |r - center|_inf <= eps} ∩ [lo, hi]^d`.
///
/// The budget clamp is applied first, then the range clamp, so for a center
/// already inside `[lo, hi]` the result satisfies both constraints.
pub fn project_linf(
    candidate: &DenseArray,
    center: &DenseArray,
    eps: f32,
    lo: f32,
    hi: f32,
) -> Result<DenseArray> {
    candidate.ensure_same_shape(center, "project_linf")?;
    if !(eps >= 0.0) {
        return Err(Error::contract("project_linf", format!("eps must be >= 0, got {eps}")));
    }
    let mut out = candidate.clone();
    project_linf_in_place(&mut out.data, &center.data, eps, lo, hi);
    Ok(out)
}

pub(crate) fn project_linf_in_place(values: &mut [f32], center: &[f32], eps: f32, lo: f32, hi: f32) {
    for (v, &c) in values.iter_mut().zip(center) {
        let delta = (*v - c).clamp(-eps, eps);
        let mut r = c + delta;
        // `c + delta` rounds at the scale of `c`, which can overshoot eps.
        while (r - c).abs() > eps {
            r = if r > c { r.next_down() } else { r.next_up() };
        }
        *v = r.clamp(lo, hi);
    }
}
