use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type of tensors and tapes.
///
/// Training runs in `f32`; gradient checking switches the whole graph to `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn cast_from(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c (m×n) = beta·c + op(a) · op(b)` with explicit element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        c: &mut [Self],
        rsc: usize,
        accumulate: bool,
    );
}

/// Strided read-only view used by the gemm kernels.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// View of the transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn cast_from(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                c: &mut [Self],
                rsc: usize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        for i in 0..m {
                            c[i * rsc..i * rsc + n].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    return;
                }
                // Bounds of the strided views; the kernel reads exactly these ranges.
                assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
                assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
                assert!((m - 1) * rsc + n <= c.len());
                let beta = if accumulate { 1.0 } else { 0.0 };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr(),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix. Vectors are stored as `1×n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{}×{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn reshape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{}×{} -> {}×{}", self.rows, self.cols, rows, cols),
            ));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(self, false, other, false)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

fn op_dims<T>(t: &Tensor<T>, trans: bool) -> (usize, usize) {
    if trans {
        (t.cols, t.rows)
    } else {
        (t.rows, t.cols)
    }
}

pub(crate) fn view<T>(t: &Tensor<T>, trans: bool) -> MatRef<'_, T> {
    if trans {
        MatRef::transposed(&t.data, t.cols)
    } else {
        MatRef::row_major(&t.data, t.cols)
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn matmul<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (m, k) = op_dims(a, ta);
    let (k2, n) = op_dims(b, tb);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {}×{} · {}×{}", m, k, k2, n),
        ));
    }
    let mut out = Tensor::zeros(m, n);
    T::gemm(m, k, n, view(a, ta), view(b, tb), &mut out.data, n, false);
    Ok(out)
}

/// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    match axis {
        1 => {
            let mut out = x.clone();
            for r in 0..x.rows {
                softmax_in_place(out.row_mut(r));
            }
            Ok(out)
        }
        0 => Ok(softmax(&x.transpose(), 1)?.transpose()),
        _ => Err(Error::InvalidArgument(format!("softmax axis {} out of range", axis))),
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut c = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let b = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::<f64>::identity(2).matmul(&b).unwrap(), b);
        let a = Tensor::scalar(2.0f32);
        assert_eq!(a.matmul(&Tensor::scalar(3.0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = a.matmul(&b).unwrap();
        assert!(c.max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
        let ct = matmul(&a.transpose(), true, &b.transpose(), true).unwrap();
        assert!(ct.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::<f32>::zeros(2, 3);
        let err = a.matmul(&Tensor::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2×3 · 2×3"));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::row_vector(vec![0.0f64, 0.0]), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::row_vector(vec![1000.0f32, 1000.0]), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::row_vector(vec![1.0f64, 2.0, 3.0]), 1).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert!(softmax(&Tensor::row_vector(vec![f32::NAN, 0.0]), 1).is_err());
        let col = softmax(&Tensor::from_vec(2, 1, vec![0.0f64, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(col.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_permutation_consistent() {
        let x = Tensor::row_vector(vec![0.3f64, -1.2, 2.5, 0.0]);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::row_vector(perm.iter().map(|&i| x.data()[i]).collect());
        let (s, sp) = (softmax(&x, 1).unwrap(), softmax(&xp, 1).unwrap());
        for (j, &i) in perm.iter().enumerate() {
            assert!((sp.data()[j] - s.data()[i]).abs() < 1e-15);
        }
    }
}
