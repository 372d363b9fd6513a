//! Dense row-major `f64` tensors.
//!
//! Only ranks 0 (scalar), 1 (vector) and 2 (matrix) carry arithmetic. Row-wise
//! operations treat a vector as a single row.

use std::fmt;

use crate::error::{Error, Result};

/// Floor applied to the argument of `ln` so that `ln` never returns `-inf`.
pub const LOG_FLOOR: f64 = 9.85967654375977e-305; // exp(-700)

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows. An empty slice gives a `0 x 0` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row count when viewed as a matrix (a vector is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.expect_matrix("matmul")?;
        let (k2, m) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self - rate * step`, the SGD update used for both parameter groups.
    pub fn sgd(&self, step: &Tensor, rate: f64) -> Result<Tensor> {
        self.zip_with(step, "sgd", |w, g| w - rate * g)
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("add_row")?;
        if row.shape != [m] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Column sums of an `n x m` matrix, giving a length-`m` vector.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("sum_rows")?;
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&self.data[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Per-row sums of an `n x m` matrix, giving a length-`n` vector.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("row_sums")?;
        Ok(Tensor::vector(
            (0..n).map(|i| self.data[i * m..(i + 1) * m].iter().sum()).collect(),
        ))
    }

    /// Stacks `n` copies of a length-`m` vector into an `n x m` matrix.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: self.shape.clone(),
                rhs: vec![n],
            });
        }
        let m = self.data.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Repeats each entry of a length-`n` vector across `m` columns.
    pub fn broadcast_cols(&self, m: usize) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::Shape {
                op: "broadcast_cols",
                lhs: self.shape.clone(),
                rhs: vec![m],
            });
        }
        let n = self.data.len();
        let mut data = Vec::with_capacity(n * m);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, m));
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// 1 where the entry is strictly positive, else 0.
    pub fn relu_mask(&self) -> Tensor {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = self.data.clone();
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
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
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Row-wise `z - max - ln(sum(exp(z - max)))`; the log argument is at least 1.
    pub fn log_softmax_rows(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = self.data.clone();
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = total.ln();
            for v in row.iter_mut() {
                *v = *v - max - lse;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn ln_clamped(&self) -> Tensor {
        self.map(|v| v.max(LOG_FLOOR).ln())
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let (n, m) = self.expect_matrix("pick")?;
        if labels.len() != n {
            return Err(Error::Shape {
                op: "pick",
                lhs: self.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= m) {
            return Err(Error::Label {
                row,
                label,
                classes: m,
            });
        }
        Ok(())
    }

    /// Gathers `self[i, labels[i]]` into a length-`n` vector.
    pub fn pick(&self, labels: &[usize]) -> Result<Tensor> {
        self.check_labels(labels)?;
        let m = self.cols();
        Ok(Tensor::vector(
            labels.iter().enumerate().map(|(i, &y)| self.data[i * m + y]).collect(),
        ))
    }

    /// Inverse of [`Tensor::pick`]: places `self[i]` at `(i, labels[i])` of an `n x m` zero matrix.
    pub fn scatter(&self, labels: &[usize], m: usize) -> Result<Tensor> {
        if self.shape != [labels.len()] {
            return Err(Error::Shape {
                op: "scatter",
                lhs: self.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let mut out = Tensor::zeros(&[labels.len(), m]);
        for (i, (&y, &v)) in labels.iter().zip(&self.data).enumerate() {
            if y >= m {
                return Err(Error::Label {
                    row: i,
                    label: y,
                    classes: m,
                });
            }
            out.data[i * m + y] = v;
        }
        Ok(out)
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Row index of the largest entry per row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let m = self.cols();
        if m == 0 {
            return Vec::new();
        }
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Matrix of the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let m = self.cols();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), m],
            data,
        }
    }

    /// Concatenates two matrices along rows.
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        let (n1, m1) = self.expect_matrix("vstack")?;
        let (n2, m2) = other.expect_matrix("vstack")?;
        if m1 != m2 {
            return Err(Error::Shape {
                op: "vstack",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: vec![n1 + n2, m1],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn relu_and_softmax_basics() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let s = Tensor::vector(vec![0.0; 3]).softmax_rows();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn pick_rejects_bad_label() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(matches!(z.pick(&[0, 3]), Err(Error::Label { row: 1, label: 3, .. })));
    }

    #[test]
    fn log_softmax_is_finite_for_extreme_logits() {
        let z = Tensor::vector(vec![1e6, -1e6, 0.0]);
        assert!(z.log_softmax_rows().all_finite());
        assert!(Tensor::vector(vec![0.0]).ln_clamped().all_finite());
        assert!((Tensor::vector(vec![0.0]).ln_clamped().item() + 700.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let z = Tensor::matrix(2, 3, vec![0.1, 3.0, -1.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(z.argmax_rows(), vec![1, 0]);
    }
}
