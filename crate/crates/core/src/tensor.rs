//! Dense 4-D activation tensor, N x C x H x W row-major.
//!
//! The same container doubles as a weight holder for float convolutions,
//! read as (filters, channels, kh, kw).

use crate::error::{Result, StepError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    shape: Shape4,
    data: Vec<F>,
}

impl<F: Scalar> Tensor4<F> {
    pub fn zeros(shape: Shape4) -> Self {
        Self { shape, data: vec![F::zero(); shape.len()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<F>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(StepError::ShapeMismatch(format!(
                "shape {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Deterministically filled tensor, for tests and benches.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize) -> F) -> Self {
        let data = (0..shape.len()).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut F {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Reinterpret with a new shape of identical volume.
    pub fn reshaped(mut self, shape: Shape4) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(StepError::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F + Sync) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(StepError::ShapeMismatch(format!("{} + {}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack per-sample channel blocks of two same-shaped tensors:
    /// (n, c, h, w) x 2 -> (n, 2c, h, w).
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(StepError::ShapeMismatch(format!(
                "concat of {} and {}",
                self.shape, other.shape
            )));
        }
        let s = self.shape;
        let out_shape = Shape4::new(s.n, 2 * s.c, s.h, s.w);
        let plane = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            data.extend_from_slice(&self.data[n * plane..(n + 1) * plane]);
            data.extend_from_slice(&other.data[n * plane..(n + 1) * plane]);
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Inverse of `concat_channels`: split (n, 2c, h, w) into two halves.
    pub fn split_channels(&self) -> Result<(Self, Self)> {
        let s = self.shape;
        if s.c % 2 != 0 {
            return Err(StepError::ShapeMismatch(format!("cannot split odd channel count {}", s.c)));
        }
        let half = s.c / 2;
        let half_shape = Shape4::new(s.n, half, s.h, s.w);
        let half_plane = half * s.h * s.w;
        let mut a = Vec::with_capacity(half_shape.len());
        let mut b = Vec::with_capacity(half_shape.len());
        for n in 0..s.n {
            let base = n * 2 * half_plane;
            a.extend_from_slice(&self.data[base..base + half_plane]);
            b.extend_from_slice(&self.data[base + half_plane..base + 2 * half_plane]);
        }
        Ok((
            Self { shape: half_shape, data: a },
            Self { shape: half_shape, data: b },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4::<f32>::from_fn(Shape4::new(2, 3, 4, 5), |i| i as f32);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 0, 4), 4.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.at(1, 0, 0, 0), 60.0);
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 2, 2), |i| i as f64);
        let b = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 2, 2), |i| -(i as f64));
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), Shape4::new(2, 6, 2, 2));
        assert_eq!(cat.at(1, 0, 0, 0), a.at(1, 0, 0, 0));
        assert_eq!(cat.at(1, 3, 0, 0), b.at(1, 0, 0, 0));
        let (a2, b2) = cat.split_channels().unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_checks_volume() {
        assert!(Tensor4::<f32>::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
