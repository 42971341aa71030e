//! Dense row-major matrices and the reference (tape-free) distribution math.

use crate::error::{shape_err, Error, Result};
use crate::flops;
use crate::scalar::Scalar;

/// Floor applied to the second argument of every KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// Row-major rank-2 array. Vectors are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(x: T) -> Self {
        Self::row_vector(vec![x])
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape("zip_map", other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// `self * other`; tallies `m*k*n` multiply-adds to the active FLOP scope.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        flops::tally(m * k * n);
        Ok(out)
    }

    /// `out += self * other^T` (no FLOP tally; used by backward passes).
    pub(crate) fn acc_matmul_nt(&self, other: &Self, out: &mut Self) {
        let (m, k, n) = (self.rows, self.cols, other.rows);
        debug_assert_eq!(k, other.cols);
        debug_assert_eq!(out.shape(), [m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            1,
            k as isize,
            T::one(),
            &mut out.data,
            n as isize,
            1,
        );
    }

    /// `out += self^T * other` (no FLOP tally; used by backward passes).
    pub(crate) fn acc_matmul_tn(&self, other: &Self, out: &mut Self) {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        debug_assert_eq!(k, other.rows);
        debug_assert_eq!(out.shape(), [m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            1,
            m as isize,
            &other.data,
            n as isize,
            1,
            T::one(),
            &mut out.data,
            n as isize,
            1,
        );
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: i,
                    limit: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }
}

fn check_finite<T: Scalar>(xs: &[T]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Softmax of one row with max subtraction.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `ln sum exp(row)` computed stably.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}

/// Row-wise softmax; every row becomes a distribution.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(x.data())?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// `sum p ln(p / max(q, floor))` with `0 ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(shape_err(
            "kl_divergence",
            format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    let floor = T::lit(KL_FLOOR);
    let mut total = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > T::zero() {
            total += pi * (pi.ln() - qi.max(floor).ln());
        }
    }
    Ok(total)
}

/// `-ln softmax(logits)[target]` in log-sum-exp form.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            what: "target token",
            index: target,
            limit: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::row_vector(vec![0.0f64, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&[0.0f64, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..28).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = Tensor::from_vec(4, 7, x.clone()).unwrap();
        let s = softmax_rows(&t).unwrap();
        for r in 0..4 {
            let row = &x[r * 7..(r + 1) * 7];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let mut total = 0.0;
            for c in 0..7 {
                assert!((s.get(r, c) - row[c].exp() / z).abs() < 1e-12);
                total += s.get(r, c);
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::row_vector(vec![0.0f64, f64::NAN]);
        assert!(matches!(softmax_rows(&t), Err(Error::NonFinite)));
        let t = Tensor::row_vector(vec![f64::INFINITY, 1.0]);
        assert!(softmax_rows(&t).unwrap_err().to_string().contains("non-finite input"));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3f64, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&[1.0f64], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_matches_termwise_sum_and_is_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..1.0)).collect();
        let mut q: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..1.0)).collect();
        let sp: f64 = p.iter().sum();
        let sq: f64 = q.iter().sum();
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        let mut oracle = 0.0;
        for i in 0..9 {
            oracle += p[i] * (p[i] / q[i]).ln();
        }
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - oracle).abs() < 1e-12);
        assert!(kl > 0.0);
        let witness_p = [0.9f64, 0.1];
        let witness_q = [0.5f64, 0.5];
        let a = kl_divergence(&witness_p, &witness_q).unwrap();
        let b = kl_divergence(&witness_q, &witness_p).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[1.5f64; 4], 2).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        let mut logits = vec![0.0f64; 5];
        logits[3] = 1e3;
        assert!(cross_entropy(&logits, 3).unwrap() < 1e-12);
        assert!(cross_entropy(&logits, 5).is_err());
        let logits = [0.3f64, -1.2, 2.2, 0.0];
        let p = softmax(&logits);
        assert!((cross_entropy(&logits, 1).unwrap() + p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn matmul_shapes_checked() {
        let a = Tensor::<f64>::zeros(2, 3);
        assert!(a.matmul(&Tensor::zeros(2, 2)).is_err());
        let b = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let a = Tensor::from_vec(2, 3, vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0, 2.0]);
    }
}
