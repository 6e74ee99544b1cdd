//! Dense 4-D arrays in `(batch, channel, height, width)` row-major layout.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `[n, c, h, w]`.
pub type Shape = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements in one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Slice of one `(h, w)` plane.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Non-overlapping 2×2 mean pooling. Forward-only helper.
    pub fn avg_pool2x2(&self) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2x2",
                format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros([n, c, h / 2, w / 2]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        let s = self.get(b, ch, 2 * y, 2 * x)
                            + self.get(b, ch, 2 * y, 2 * x + 1)
                            + self.get(b, ch, 2 * y + 1, 2 * x)
                            + self.get(b, ch, 2 * y + 1, 2 * x + 1);
                        out.set(b, ch, y, x, s * quarter);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Element-wise cast to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        let err = Tensor::<f64>::from_vec([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(err.to_string().contains("needs 8"));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f64>::from_vec([2, 3, 4, 5], (0..120).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(1, 2, 3, 4), 119.0);
        assert_eq!(t.get(0, 1, 0, 0), 20.0);
        assert_eq!(t.plane_slice(1, 0)[0], 60.0);
    }

    #[test]
    fn avg_pool_rejects_odd() {
        assert!(Tensor::<f64>::zeros([1, 1, 3, 4]).avg_pool2x2().is_err());
    }
}
