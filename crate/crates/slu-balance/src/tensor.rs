//! A minimal row-major f64 matrix. Vectors are 1×n tensors. Sizes in this
//! crate are small enough that naive loops beat the overhead of pulling in a
//! linear-algebra stack.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self += other * scale (shapes must match).
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    /// (m×k) · (k×n) -> m×n.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} . {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// (k×m)ᵀ · grad where self is the left operand value: aᵀ·g without
    /// materializing the transpose. self: m×k as `a`, g: m×n -> k×n.
    pub fn matmul_transpose_self(&self, g: &Tensor) -> Tensor {
        assert_eq!(self.rows, g.rows);
        let mut out = Tensor::zeros(self.cols, g.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let g_row = g.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(k);
                for (o, &gv) in out_row.iter_mut().zip(g_row) {
                    *o += a * gv;
                }
            }
        }
        out
    }

    /// g · bᵀ where self is the right operand value: self: k×n as `b`,
    /// g: m×n -> m×k.
    pub fn matmul_transpose_other(&self, g: &Tensor) -> Tensor {
        assert_eq!(self.cols, g.cols);
        let mut out = Tensor::zeros(g.rows, self.rows);
        for i in 0..g.rows {
            let g_row = g.row(i);
            let out_row = out.row_mut(i);
            for (k, o) in out_row.iter_mut().enumerate() {
                let b_row = self.row(k);
                let mut acc = 0.0;
                for (&gv, &bv) in g_row.iter().zip(b_row) {
                    acc += gv * bv;
                }
                *o += acc;
            }
        }
        out
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_products_match_explicit() {
        let a = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 5.0, -6.0]);
        let g = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        // aᵀ·g
        let at_g = a.matmul_transpose_self(&g);
        for i in 0..3 {
            for j in 0..2 {
                let mut expect = 0.0;
                for r in 0..2 {
                    expect += a.get(r, i) * g.get(r, j);
                }
                assert!((at_g.get(i, j) - expect).abs() < 1e-12);
            }
        }
        // g·bᵀ with b: 3×2
        let b = Tensor::from_vec(3, 2, vec![1.0, 0.0, 2.0, -1.0, 0.5, 4.0]);
        let g2 = Tensor::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let g_bt = b.matmul_transpose_other(&g2);
        for i in 0..4 {
            for j in 0..3 {
                let mut expect = 0.0;
                for c in 0..2 {
                    expect += g2.get(i, c) * b.get(j, c);
                }
                assert!((g_bt.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_sum_exp_stable() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
