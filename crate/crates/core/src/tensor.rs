//! Dense row-major tensors.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Element type of a [`Tensor`]. Model math runs in `f32`; `f64` exists for
/// finite-difference checking.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn build(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        })
    }

    /// Standard-normal samples from a stream seeded by `seed`.
    pub fn randn(shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0);
        Self::randn_from(shape, &mut rng)
    }

    pub fn randn_from(shape: &[usize], rng: &mut RngStream) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal_f64())).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Same as `zeros` for a shape already known to be valid.
    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack equally-shaped rows into a `[n x len]` matrix.
    pub fn stack_rows(rows: &[&[T]]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("cannot stack zero rows"));
        };
        let w = first.len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            if r.len() != w {
                return Err(Error::shape("rows have different lengths"));
            }
            data.extend_from_slice(r);
        }
        Self::build(&[rows.len(), w], data)
    }

    /// Rows `idx` of a matrix, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

const COL_TILE: usize = 256;
const ROW_TILE: usize = 4;

/// `out[m x n] = a[m x k] * b[k x n]`, each output summed in increasing `k`.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = T::zero());
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        let mut i0 = 0;
        while i0 < m {
            let i1 = (i0 + ROW_TILE).min(m);
            if i1 - i0 == ROW_TILE {
                let (r0, rest) = out[i0 * n..i1 * n].split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                let (c0, c1, c2, c3) = (
                    &mut r0[j0..j1],
                    &mut r1[j0..j1],
                    &mut r2[j0..j1],
                    &mut r3[j0..j1],
                );
                for p in 0..k {
                    let brow = &b[p * n + j0..p * n + j1];
                    let a0 = a[i0 * k + p];
                    let a1 = a[(i0 + 1) * k + p];
                    let a2 = a[(i0 + 2) * k + p];
                    let a3 = a[(i0 + 3) * k + p];
                    for ((((&bv, o0), o1), o2), o3) in brow
                        .iter()
                        .zip(c0.iter_mut())
                        .zip(c1.iter_mut())
                        .zip(c2.iter_mut())
                        .zip(c3.iter_mut())
                    {
                        *o0 = *o0 + a0 * bv;
                        *o1 = *o1 + a1 * bv;
                        *o2 = *o2 + a2 * bv;
                        *o3 = *o3 + a3 * bv;
                    }
                }
            } else {
                for i in i0..i1 {
                    let crow = &mut out[i * n + j0..i * n + j1];
                    for p in 0..k {
                        let av = a[i * k + p];
                        let brow = &b[p * n + j0..p * n + j1];
                        for (o, &bv) in crow.iter_mut().zip(brow) {
                            *o = *o + av * bv;
                        }
                    }
                }
            }
            i0 = i1;
        }
    }
}

/// Transpose of a row-major `[r x c]` matrix.
pub(crate) fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Row-wise softmax of a `[rows x cols]` matrix with max subtraction.
pub fn softmax_rows<T: Real>(logits: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let x = &logits[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (oi, &xi) in o.iter_mut().zip(x) {
            *oi = (xi - mx).exp();
            s = s + *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / s;
        }
    }
    out
}
