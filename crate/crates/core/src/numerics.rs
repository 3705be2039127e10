//! Dense row-major `f64` matrices and the handful of kernels the attention
//! code needs: products, row softmax, row extremes and cosine similarity.
//!
//! Every constructor and every kernel keeps the values finite; a kernel that
//! would overflow reports [`Error::NonFinite`] instead of returning Inf/NaN.

use crate::error::{Error, Result};

/// Reduction axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down each column, one result per column.
    Rows,
    /// Reduce along each row, one result per row.
    Cols,
}

/// Which row extreme [`rowwise_extreme`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "Matrix::new")?;
        Ok(Self { rows, cols, data })
    }

    /// Builds from already-validated finite data.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows<I, R>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f64]>,
    {
        let mut data = Vec::new();
        let mut n_rows = 0;
        let mut n_cols = None;
        for row in rows {
            let row = row.as_ref();
            match n_cols {
                None => n_cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Dimension(format!(
                        "ragged rows: expected {c} columns, row {n_rows} has {}",
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(row);
            n_rows += 1;
        }
        Self::new(n_rows, n_cols.unwrap_or(0), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no data anyway.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_parts(self.cols, self.rows, data)
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::Bounds {
                index: end,
                len: self.rows,
            });
        }
        Ok(Matrix::from_parts(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::Bounds {
                index: end,
                len: self.cols,
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix::from_parts(self.rows, width, data))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    lhs: (rows, cols),
                    rhs: m.shape(),
                });
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix::from_parts(rows, cols, data))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape {
                op: "hstack",
                lhs: (rows, 0),
                rhs: bad.shape(),
            });
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix::from_parts(rows, cols, data))
    }

    pub fn sum_along(&self, axis: Axis) -> Vec<f64> {
        match axis {
            Axis::Cols => self.row_iter().map(|r| r.iter().sum()).collect(),
            Axis::Rows => {
                let mut out = vec![0.0; self.cols];
                for row in self.row_iter() {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
        }
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|v| v * factor).collect();
        check_finite(&data, "scale")?;
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "map")?;
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub(crate) fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, op)?;
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    /// Largest absolute elementwise difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    check_finite(&out, "matmul")?;
    Ok(Matrix::from_parts(n, m, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_transposed",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for ar in a.row_iter() {
        for br in b.row_iter() {
            out.push(dot(ar, br));
        }
    }
    check_finite(&out, "matmul_transposed")?;
    Ok(Matrix::from_parts(a.rows, b.rows, out))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut data = logits.data.clone();
    if logits.cols > 0 {
        for row in data.chunks_exact_mut(logits.cols) {
            softmax_in_place(row);
        }
    }
    Matrix::from_parts(logits.rows, logits.cols, data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    // sum >= 1 since the max entry contributes exp(0).
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row maximum or minimum.
pub fn rowwise_extreme(m: &Matrix, which: Extreme) -> Result<Vec<f64>> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Dimension(format!(
            "row extremes of an empty {}x{} matrix",
            m.rows, m.cols
        )));
    }
    Ok(m.row_iter().map(|r| row_extreme(r, which)).collect())
}

#[inline]
pub(crate) fn row_extreme(row: &[f64], which: Extreme) -> f64 {
    match which {
        Extreme::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Extreme::Min => row.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Cosine similarity with a flag for the degenerate zero-norm case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had zero norm; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            lhs: (1, a.len()),
            rhs: (1, b.len()),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero-norm vector; returning 0");
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    let value = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "cosine_similarity",
        });
    }
    Ok(Cosine {
        value,
        zero_norm: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        Matrix::new(a.rows(), b.cols(), out).unwrap()
    }

    #[test]
    fn construction_rejects_bad_length_and_nan() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Matrix::from_rows([vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let id = Matrix::from_rows([[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows([[3.0, -1.5], [2.0, 7.0]]).unwrap();
        assert_eq!(matmul(&id, &x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Matrix::from_rows([[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows([[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
        let t = matmul_transposed(&a, &b.transpose()).unwrap();
        assert!(t.max_abs_diff(&got) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_carries_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        match matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (2, 3));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_overflow_is_reported() {
        let a = Matrix::filled(1, 2, 1e200);
        let b = Matrix::filled(2, 1, 1e200);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows([[0.0, 0.0, 0.0]]).unwrap());
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Matrix::from_rows([[1000.0, 1000.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Matrix::from_rows([[1.0, 2.0, 3.0]]).unwrap());
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn row_extremes() {
        let m = Matrix::from_rows([[1.0, 3.0], [5.0, 2.0]]).unwrap();
        assert_eq!(rowwise_extreme(&m, Extreme::Max).unwrap(), vec![3.0, 5.0]);
        assert_eq!(rowwise_extreme(&m, Extreme::Min).unwrap(), vec![1.0, 2.0]);
        let c = Matrix::filled(3, 4, 2.5);
        assert_eq!(rowwise_extreme(&c, Extreme::Max).unwrap(), vec![2.5; 3]);
        assert_eq!(rowwise_extreme(&c, Extreme::Min).unwrap(), vec![2.5; 3]);
        assert!(rowwise_extreme(&Matrix::zeros(0, 0), Extreme::Max).is_err());
        assert!(rowwise_extreme(&Matrix::zeros(2, 0), Extreme::Min).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 1.0];
        assert!((cosine_similarity(&v, &v).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value,
            0.0
        );
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap().value,
            -1.0
        );
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.zero_norm);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sums_and_stacks() {
        let m = Matrix::from_rows([[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.sum_along(Axis::Cols), vec![3.0, 7.0]);
        assert_eq!(m.sum_along(Axis::Rows), vec![4.0, 6.0]);
        let h = Matrix::hstack(&[m.col_block(0, 1).unwrap(), m.col_block(1, 2).unwrap()]).unwrap();
        assert_eq!(h, m);
        let v = Matrix::vstack(&[m.row_block(0, 1).unwrap(), m.row_block(1, 2).unwrap()]).unwrap();
        assert_eq!(v, m);
    }

    fn matrix_strategy(max_dim: usize, mag: f64) -> impl Strategy<Value = Matrix> {
        (1..=max_dim, 1..=max_dim).prop_flat_map(move |(r, c)| {
            prop::collection::vec(-mag..mag, r * c)
                .prop_map(move |data| Matrix::new(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy(12, 1e6)) {
            let s = softmax_rows(&m);
            for row in s.row_iter() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn matmul_associative_against_oracle(
            dims in prop::array::uniform4(2usize..=16),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, dims[0], dims[1]);
            let b = random(&mut rng, dims[1], dims[2]);
            let c = random(&mut rng, dims[2], dims[3]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = triple_loop(&a, &triple_loop(&b, &c));
            let scale = right.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) / scale <= 1e-10);
        }

        #[test]
        fn row_extremes_bound_their_rows(m in matrix_strategy(10, 1e3)) {
            let hi = rowwise_extreme(&m, Extreme::Max).unwrap();
            let lo = rowwise_extreme(&m, Extreme::Min).unwrap();
            for (i, row) in m.row_iter().enumerate() {
                prop_assert!(row.iter().all(|&v| v <= hi[i] && v >= lo[i]));
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            alpha in 1e-3f64..1e3,
        ) {
            prop_assume!(dot(&a, &a) > 1e-6 && dot(&b, &b) > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap().value;
            let ba = cosine_similarity(&b, &a).unwrap().value;
            let scaled: Vec<f64> = a.iter().map(|v| v * alpha).collect();
            let sb = cosine_similarity(&scaled, &b).unwrap().value;
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((ab - sb).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
