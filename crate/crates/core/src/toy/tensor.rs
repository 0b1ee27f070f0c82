use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Debug;
use std::iter::Sum;

/// Scalar type of the toy model: `f64` for verification, `f32` for the fast path.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::c(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// `out = x W` for a row vector `x`.
    pub fn vec_mul(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (a, &xa) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(a)) {
                *o += xa * w;
            }
        }
    }

    /// `out += W dy` (the input gradient of `x W`).
    pub fn mul_vec_acc(&self, dy: &[T], out: &mut [T]) {
        debug_assert_eq!(dy.len(), self.cols);
        for (a, o) in out.iter_mut().enumerate() {
            *o += self.row(a).iter().zip(dy).map(|(&w, &d)| w * d).sum::<T>();
        }
    }

    /// `self += x^T dy` (the weight gradient of `x W`).
    pub fn outer_acc(&mut self, x: &[T], dy: &[T], s: T) {
        for (a, &xa) in x.iter().enumerate() {
            let xa = xa * s;
            for (g, &d) in self.row_mut(a).iter_mut().zip(dy) {
                *g += xa * d;
            }
        }
    }
}
