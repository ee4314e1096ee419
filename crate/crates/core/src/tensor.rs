//! Dense row-major tensors of rank 1 or 2.
//!
//! Rank 2 is all the model math needs (weight matrices against activation
//! vectors), so shapes are a fixed-size array instead of a heap `Vec`.

use crate::scalar::Scalar;

/// Shape of a tensor: `[n]` (rank 1) or `[rows, cols]` (rank 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    rank: u8,
    dims: [usize; 2],
}

impl Shape {
    pub fn vector(n: usize) -> Self {
        Shape {
            rank: 1,
            dims: [n, 1],
        }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape {
            rank: 2,
            dims: [rows, cols],
        }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn len(&self) -> usize {
        self.dims[..self.rank as usize].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A loss node must be a single value.
    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Columns of a rank-2 shape; 1 for rank 1.
    pub fn cols(&self) -> usize {
        if self.rank == 2 {
            self.dims[1]
        } else {
            1
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Panics if `data.len()` does not match `shape`; callers construct
    /// shapes and data together so a mismatch is a bug, not an input error.
    pub fn from_vec(shape: Shape, data: Vec<S>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            shape: Shape::vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Self {
        Self::from_vec(Shape::matrix(rows, cols), data)
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Shape::vector(1),
            data: vec![value],
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn at(&self, i: usize) -> S {
        self.data[i]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[S] {
        let c = self.shape.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.shape.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, factor: S) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn squared_sum(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the maximum element; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.data.len() {
            if self.data[i] > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// `out += a * b` for row-major matrices: a is (m,k), b is (k,n), out is (m,n).
pub fn acc_matmul_nn<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a * b^T`: a is (m,n), b is (k,n), out is (m,k).
pub fn acc_matmul_nt<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + l] += acc;
        }
    }
}

/// `out += a^T * b`: a is (m,k), b is (m,n), out is (k,n).
pub fn acc_matmul_tn<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
