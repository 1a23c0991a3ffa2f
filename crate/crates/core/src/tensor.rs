//! Flat row-major matrices and the small set of linear kernels the model
//! needs. Every kernel assigns each output element to exactly one writer and
//! keeps a fixed per-element summation order, so results are bit-identical
//! at any rayon thread count.

use rayon::prelude::*;

/// Element type for all numeric code. Production runs at f32; gradient
/// checking runs the same code at f64.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> f32 {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> f64 {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 15;

/// y = x @ w, with x: [rows, in], w: [in, out], y: [rows, out].
pub fn linear_forward<T: Scalar>(x: &[T], w: &Matrix<T>, rows: usize) -> Vec<T> {
    let (n_in, n_out) = (w.rows, w.cols);
    assert_eq!(x.len(), rows * n_in);
    let mut y = vec![T::zero(); rows * n_out];
    let work = rows * n_in * n_out;
    let body = |(r, y_row): (usize, &mut [T])| {
        let x_row = &x[r * n_in..(r + 1) * n_in];
        for (k, &xv) in x_row.iter().enumerate() {
            let w_row = w.row(k);
            for (yv, &wv) in y_row.iter_mut().zip(w_row) {
                *yv += xv * wv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        y.par_chunks_mut(n_out).enumerate().for_each(body);
    } else {
        y.chunks_mut(n_out).enumerate().for_each(body);
    }
    y
}

/// dx = dy @ w^T, with dy: [rows, out], w: [in, out], dx: [rows, in].
pub fn linear_backward_input<T: Scalar>(dy: &[T], w: &Matrix<T>, rows: usize) -> Vec<T> {
    let (n_in, n_out) = (w.rows, w.cols);
    assert_eq!(dy.len(), rows * n_out);
    let mut dx = vec![T::zero(); rows * n_in];
    let work = rows * n_in * n_out;
    let body = |(r, dx_row): (usize, &mut [T])| {
        let dy_row = &dy[r * n_out..(r + 1) * n_out];
        for (k, dxv) in dx_row.iter_mut().enumerate() {
            let w_row = w.row(k);
            let mut acc = T::zero();
            for (&dyv, &wv) in dy_row.iter().zip(w_row) {
                acc += dyv * wv;
            }
            *dxv = acc;
        }
    };
    if work >= PAR_THRESHOLD {
        dx.par_chunks_mut(n_in).enumerate().for_each(body);
    } else {
        dx.chunks_mut(n_in).enumerate().for_each(body);
    }
    dx
}

/// dw += x^T @ dy, accumulated into `dw`: [in, out].
pub fn linear_backward_weight<T: Scalar>(x: &[T], dy: &[T], rows: usize, dw: &mut Matrix<T>) {
    let (n_in, n_out) = (dw.rows, dw.cols);
    assert_eq!(x.len(), rows * n_in);
    assert_eq!(dy.len(), rows * n_out);
    let work = rows * n_in * n_out;
    let body = |(k, dw_row): (usize, &mut [T])| {
        for r in 0..rows {
            let xv = x[r * n_in + k];
            let dy_row = &dy[r * n_out..(r + 1) * n_out];
            for (dwv, &dyv) in dw_row.iter_mut().zip(dy_row) {
                *dwv += xv * dyv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.data.par_chunks_mut(n_out).enumerate().for_each(body);
    } else {
        dw.data.chunks_mut(n_out).enumerate().for_each(body);
    }
}

/// y = x @ w^T, with x: [rows, in], w: [out, in], y: [rows, out].
/// Used for the tied output head, where the embedding table is [vocab, d].
pub fn linear_forward_t<T: Scalar>(x: &[T], w: &Matrix<T>, rows: usize) -> Vec<T> {
    let (n_out, n_in) = (w.rows, w.cols);
    assert_eq!(x.len(), rows * n_in);
    let mut y = vec![T::zero(); rows * n_out];
    let work = rows * n_in * n_out;
    let body = |(r, y_row): (usize, &mut [T])| {
        let x_row = &x[r * n_in..(r + 1) * n_in];
        for (o, yv) in y_row.iter_mut().enumerate() {
            let w_row = w.row(o);
            let mut acc = T::zero();
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            *yv = acc;
        }
    };
    if work >= PAR_THRESHOLD {
        y.par_chunks_mut(n_out).enumerate().for_each(body);
    } else {
        y.chunks_mut(n_out).enumerate().for_each(body);
    }
    y
}

/// dx = dy @ w, with dy: [rows, out], w: [out, in], dx: [rows, in].
pub fn linear_backward_input_t<T: Scalar>(dy: &[T], w: &Matrix<T>, rows: usize) -> Vec<T> {
    let (n_out, n_in) = (w.rows, w.cols);
    assert_eq!(dy.len(), rows * n_out);
    let mut dx = vec![T::zero(); rows * n_in];
    let work = rows * n_in * n_out;
    let body = |(r, dx_row): (usize, &mut [T])| {
        let dy_row = &dy[r * n_out..(r + 1) * n_out];
        for (o, &dyv) in dy_row.iter().enumerate() {
            let w_row = w.row(o);
            for (dxv, &wv) in dx_row.iter_mut().zip(w_row) {
                *dxv += dyv * wv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dx.par_chunks_mut(n_in).enumerate().for_each(body);
    } else {
        dx.chunks_mut(n_in).enumerate().for_each(body);
    }
    dx
}

/// dw += dy^T @ x, accumulated into `dw`: [out, in].
pub fn linear_backward_weight_t<T: Scalar>(x: &[T], dy: &[T], rows: usize, dw: &mut Matrix<T>) {
    let (n_out, n_in) = (dw.rows, dw.cols);
    assert_eq!(x.len(), rows * n_in);
    assert_eq!(dy.len(), rows * n_out);
    let work = rows * n_in * n_out;
    let body = |(o, dw_row): (usize, &mut [T])| {
        for r in 0..rows {
            let dyv = dy[r * n_out + o];
            let x_row = &x[r * n_in..(r + 1) * n_in];
            for (dwv, &xv) in dw_row.iter_mut().zip(x_row) {
                *dwv += dyv * xv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.data.par_chunks_mut(n_in).enumerate().for_each(body);
    } else {
        dw.data.chunks_mut(n_in).enumerate().for_each(body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(x: &[f64], w: &Matrix<f64>, rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * w.cols];
        for r in 0..rows {
            for k in 0..w.rows {
                for c in 0..w.cols {
                    y[r * w.cols + c] += x[r * w.rows + k] * w.data[k * w.cols + c];
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let w = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64).sin()).collect());
        assert_eq!(linear_forward(&x, &w, 2), naive_matmul(&x, &w, 2));
    }

    #[test]
    fn transposed_kernels_agree_with_plain() {
        // y = x @ w equals x @ (w^T)^T via the transposed kernel.
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let w = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64).cos()).collect());
        let mut wt = Matrix::zeros(3, 4);
        for r in 0..4 {
            for c in 0..3 {
                wt.data[c * 4 + r] = w.data[r * 3 + c];
            }
        }
        let a = linear_forward(&x, &w, 2);
        let b = linear_forward_t(&x, &wt, 2);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_input_is_forward_with_transpose() {
        let dy: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let w = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64) * 0.1).collect());
        let dx = linear_backward_input(&dy, &w, 2);
        // Reference: dx[r,k] = sum_c dy[r,c] * w[k,c]
        for r in 0..2 {
            for k in 0..4 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += dy[r * 3 + c] * w.data[k * 3 + c];
                }
                assert!((dx[r * 4 + k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_weight_accumulates() {
        let x: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0];
        let dy: Vec<f64> = vec![0.5, -0.5, 1.0, 2.0];
        let mut dw = Matrix::zeros(2, 2);
        linear_backward_weight(&x, &dy, 2, &mut dw);
        linear_backward_weight(&x, &dy, 2, &mut dw);
        // dw[k,c] = 2 * sum_r x[r,k] dy[r,c]
        assert!((dw.data[0] - 2.0 * (1.0 * 0.5 + 3.0 * 1.0)).abs() < 1e-12);
        assert!((dw.data[3] - 2.0 * (2.0 * -0.5 + 4.0 * 2.0)).abs() < 1e-12);
    }
}
