//! Dense row-major 2-D arrays of `f64`.
//!
//! Scalars are `1x1`, row vectors `1xn`, column vectors `nx1`. Every value
//! flowing through the [`Graph`](super::Graph) is one of these.

use std::fmt;

use rand::Rng;

/// Dimension list of a [`Tensor`]: `[rows, cols]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        *self == Self::SCALAR
    }

    /// Whether `self` can be expanded to `target` by repeating along axes of
    /// extent one.
    pub fn broadcasts_to(&self, target: Shape) -> bool {
        (self.rows == target.rows || self.rows == 1) && (self.cols == target.cols || self.cols == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data.len()` does not match `shape`.
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data length does not match shape {shape}");
        Self { shape, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(Shape::new(r, c), data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(Shape::SCALAR, vec![v])
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self::new(Shape::new(1, values.len()), values)
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self::new(Shape::new(values.len(), 1), values)
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Self::new(shape, vec![v; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(Shape::new(n, n));
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `1x1` tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert!(self.shape.is_scalar(), "item() on non-scalar tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self - step * grad`, the SGD update used for every parameter.
    pub fn sgd_step(&self, grad: &Tensor, step: f64) -> Self {
        self.zip_map(grad, |p, g| p - step * g)
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let c = self.shape.cols;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row_slice(i));
        }
        Self::new(Shape::new(indices.len(), c), data)
    }

    pub(crate) fn matmul(&self, rhs: &Tensor) -> Self {
        let (n, k, m) = (self.shape.rows, self.shape.cols, rhs.shape.cols);
        debug_assert_eq!(k, rhs.shape.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::new(Shape::new(n, m), out)
    }

    pub(crate) fn transpose(&self) -> Self {
        let (r, c) = (self.shape.rows, self.shape.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(Shape::new(c, r), out)
    }

    pub(crate) fn broadcast_to(&self, target: Shape) -> Self {
        debug_assert!(self.shape.broadcasts_to(target));
        let mut out = Vec::with_capacity(target.len());
        for i in 0..target.rows {
            let si = if self.shape.rows == 1 { 0 } else { i };
            for j in 0..target.cols {
                let sj = if self.shape.cols == 1 { 0 } else { j };
                out.push(self.data[si * self.shape.cols + sj]);
            }
        }
        Self::new(target, out)
    }

    /// Sums over the axes along which `target` has extent one; the adjoint of
    /// [`broadcast_to`](Self::broadcast_to).
    pub(crate) fn sum_to(&self, target: Shape) -> Self {
        debug_assert!(target.broadcasts_to(self.shape));
        let mut out = vec![0.0; target.len()];
        for i in 0..self.shape.rows {
            let ti = if target.rows == 1 { 0 } else { i };
            for j in 0..self.shape.cols {
                let tj = if target.cols == 1 { 0 } else { j };
                out[ti * target.cols + tj] += self.data[i * self.shape.cols + j];
            }
        }
        Self::new(target, out)
    }

    pub(crate) fn softmax_rows(&self) -> Self {
        let c = self.shape.cols;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(self.shape, out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} {:?}", self.shape, self.data)
    }
}
