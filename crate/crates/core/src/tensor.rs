//! Dense row-major matrices and the elementwise kernels shared by the fast
//! inference path and the autodiff tape.

use crate::scalar::Scalar;

/// A row-major `rows x cols` matrix. Batches are stacked along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a 1x1 tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a {}x{} tensor",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Sum accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum()
    }

    pub fn sq_norm_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(a: &Self, b: &Self, ta: bool, tb: bool) -> Self {
        let (m, k) = if ta {
            (a.cols, a.rows)
        } else {
            (a.rows, a.cols)
        };
        let (kb, n) = if tb {
            (b.cols, b.rows)
        } else {
            (b.rows, b.cols)
        };
        assert_eq!(k, kb, "matmul inner dimension mismatch: {k} vs {kb}");
        let mut out = Self::zeros(m, n);
        if m == 0 || n == 0 {
            return out;
        }
        let (rsa, csa) = if ta {
            (1, a.cols as isize)
        } else {
            (a.cols as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, b.cols as isize)
        } else {
            (b.cols as isize, 1)
        };
        // SAFETY: strides and shapes are derived from the owning tensors.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        Self::matmul_t(self, other, false, false)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Self) -> Self {
        assert_eq!(row.rows, 1);
        assert_eq!(row.cols, self.cols, "row broadcast width mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *v = *v + b;
            }
        }
        out
    }

    /// Multiplies every row elementwise by a `1 x cols` row.
    pub fn mul_row(&self, row: &Self) -> Self {
        assert_eq!(row.rows, 1);
        assert_eq!(row.cols, self.cols, "row broadcast width mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *v = *v * b;
            }
        }
        out
    }

    /// Multiplies every column elementwise by a `rows x 1` column.
    pub fn mul_col(&self, col: &Self) -> Self {
        assert_eq!(col.cols, 1);
        assert_eq!(col.rows, self.rows, "column broadcast height mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            let s = col.data[r];
            for v in out.row_mut(r) {
                *v = *v * s;
            }
        }
        out
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(&self) -> Self {
        let mut out = Self::zeros(self.rows, 1);
        for r in 0..self.rows {
            out.data[r] = self.row(r).iter().copied().sum();
        }
        out
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        out
    }

    pub fn concat_cols(parts: &[&Self]) -> Self {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "concat row mismatch");
                dst[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        out
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "row slice out of range");
        Self::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn concat_rows(parts: &[&Self]) -> Self {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "concat column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self::from_vec(rows, cols, data)
    }

    /// Repeats a `1 x cols` row `n` times.
    pub fn repeat_row(&self, n: usize) -> Self {
        assert_eq!(self.rows, 1);
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self::from_vec(n, self.cols, data)
    }

    /// Row-wise normalisation to zero mean and unit variance. Returns the
    /// normalised tensor and the per-row inverse standard deviations.
    pub fn layer_norm(&self, eps: T) -> (Self, Vec<T>) {
        let mut out = self.clone();
        let mut inv_std = Vec::with_capacity(self.rows);
        let d = T::from_usize(self.cols).unwrap();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        (out, inv_std)
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// d^2 silu / dx^2
#[inline]
pub fn silu_grad2<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    let two = T::one() + T::one();
    s * (T::one() - s) * (two + x * (T::one() - two * s))
}

/// log(1 + e^x) without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
