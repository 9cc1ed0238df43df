//! Dense row-major matrices and the reference linear algebra everything
//! else is checked against.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static KERNEL_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets how many threads a single GEMM may split its output rows across.
///
/// Defaults to 1. Results are only bitwise reproducible at 1.
pub fn set_kernel_threads(threads: usize) {
    KERNEL_THREADS.store(threads.max(1), Ordering::Relaxed);
}

pub fn kernel_threads() -> usize {
    KERNEL_THREADS.load(Ordering::Relaxed)
}

/// Dense 2-D array in row-major order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Whether a GEMM operand is read as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
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

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Reshapes in place for reuse as a scratch buffer, keeping capacity.
    /// Contents are unspecified afterwards.
    pub(crate) fn reshape_scratch(&mut self, rows: usize, cols: usize, fill: T) {
        self.rows = rows;
        self.cols = cols;
        self.data.resize(rows * cols, fill);
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    /// Builds a matrix from `f64` rows, mainly for tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend(r.iter().map(|&v| T::of(v)));
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// I.i.d. uniform entries in `[lo, hi]`.
    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.gen_range(lo..=hi)))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Largest absolute difference relative to the largest magnitude of
    /// `reference`. Infinite on shape mismatch.
    pub fn max_rel_diff(&self, reference: &Self) -> f64 {
        if self.shape() != reference.shape() {
            return f64::INFINITY;
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max);
        if diff == 0.0 {
            return 0.0;
        }
        diff / reference.max_abs().as_f64().max(f64::MIN_POSITIVE)
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "axpy",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + alpha * s;
        }
        Ok(())
    }

    /// Column sums over the rows, as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        out
    }

    /// Indices of columns whose every entry is exactly zero.
    pub fn zero_columns(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&c| (0..self.rows).all(|r| self.get(r, c) == T::zero()))
            .collect()
    }

    /// Indices of rows whose every entry is exactly zero.
    pub fn zero_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&r| self.row(r).iter().all(|&v| v == T::zero()))
            .collect()
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

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm(
            T::one(),
            self,
            Trans::No,
            rhs,
            Trans::No,
            T::zero(),
            &mut out,
        )?;
        Ok(out)
    }

    /// Textbook triple loop, kept as the oracle for the optimized path.
    pub fn matmul_naive(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = T::zero();
                for r in 0..self.cols {
                    acc = acc + self.get(i, r) * rhs.get(r, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn gather_columns(&self, keep: &[usize]) -> Result<Self> {
        let mut out = Self::default();
        self.gather_columns_into(keep, &mut out)?;
        Ok(out)
    }

    /// Copies the listed columns, in order, into a contiguous `rows×k` buffer.
    pub fn gather_columns_into(&self, keep: &[usize], out: &mut Self) -> Result<()> {
        check_indices("gather_columns", keep, self.cols)?;
        out.reshape_scratch(self.rows, keep.len(), T::zero());
        let k = keep.len();
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = &mut out.data[r * k..(r + 1) * k];
            for (d, &c) in dst.iter_mut().zip(keep) {
                *d = src[c];
            }
        }
        Ok(())
    }

    pub fn scatter_columns(&self, keep: &[usize], n: usize) -> Result<Self> {
        let mut out = Self::default();
        self.scatter_columns_into(keep, n, T::one(), &mut out)?;
        Ok(out)
    }

    /// Places column `j` of `self` at column `keep[j]` of an `rows×n`
    /// output, multiplied by `scale`; every other column is exactly zero.
    pub fn scatter_columns_into(
        &self,
        keep: &[usize],
        n: usize,
        scale: T,
        out: &mut Self,
    ) -> Result<()> {
        check_indices("scatter_columns", keep, n)?;
        if keep.len() != self.cols {
            return Err(Error::shape(
                "scatter_columns",
                format!("{} indices for {} columns", keep.len(), self.cols),
            ));
        }
        out.reshape_scratch(self.rows, n, T::zero());
        out.fill(T::zero());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = &mut out.data[r * n..(r + 1) * n];
            for (&v, &c) in src.iter().zip(keep) {
                dst[c] = v * scale;
            }
        }
        Ok(())
    }

    pub fn gather_rows(&self, keep: &[usize]) -> Result<Self> {
        let mut out = Self::default();
        self.gather_rows_into(keep, &mut out)?;
        Ok(out)
    }

    pub fn gather_rows_into(&self, keep: &[usize], out: &mut Self) -> Result<()> {
        check_indices("gather_rows", keep, self.rows)?;
        out.reshape_scratch(keep.len(), self.cols, T::zero());
        for (i, &r) in keep.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        Ok(())
    }

    pub fn scatter_rows(&self, keep: &[usize], n: usize) -> Result<Self> {
        let mut out = Self::zeros(n, self.cols);
        self.scatter_rows_add(keep, &mut out)?;
        Ok(out)
    }

    /// Adds row `i` of `self` into row `keep[i]` of `out`, leaving the
    /// other rows of `out` untouched.
    pub fn scatter_rows_add(&self, keep: &[usize], out: &mut Self) -> Result<()> {
        check_indices("scatter_rows", keep, out.rows)?;
        if keep.len() != self.rows || out.cols != self.cols {
            return Err(Error::shape(
                "scatter_rows",
                format!(
                    "{} indices, source {:?}, destination {:?}",
                    keep.len(),
                    self.shape(),
                    out.shape()
                ),
            ));
        }
        for (i, &r) in keep.iter().enumerate() {
            for (d, &s) in out.row_mut(r).iter_mut().zip(self.row(i)) {
                *d = *d + s;
            }
        }
        Ok(())
    }
}

/// Rejects index lists that are not strictly increasing or exceed `n`.
pub(crate) fn check_indices(op: &'static str, keep: &[usize], n: usize) -> Result<()> {
    if let Some(&last) = keep.last() {
        if last >= n {
            return Err(Error::index(op, format!("index {last} out of range {n}")));
        }
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::index(op, "indices must be strictly increasing"));
    }
    Ok(())
}

fn operand_dims<T>(m: &Matrix<T>, t: Trans) -> (usize, usize, isize, isize) {
    let (r, c) = (m.rows, m.cols);
    match t {
        Trans::No => (r, c, c as isize, 1),
        Trans::Yes => (c, r, 1, c as isize),
    }
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// `C = alpha * op(A) * op(B) + beta * C`. With `beta = 0` the previous
/// contents of `C` are ignored.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &Matrix<T>,
    ta: Trans,
    b: &Matrix<T>,
    tb: Trans,
    beta: T,
    c: &mut Matrix<T>,
) -> Result<()> {
    let (m, k, rsa, csa) = operand_dims(a, ta);
    let (kb, n, rsb, csb) = operand_dims(b, tb);
    if k != kb || c.rows != m || c.cols != n {
        return Err(Error::shape(
            "matmul",
            format!("op(A) {m}x{k}, op(B) {kb}x{n}, C {}x{}", c.rows, c.cols),
        ));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        if beta == T::zero() {
            c.fill(T::zero());
        } else {
            c.scale_in_place(beta);
        }
        return Ok(());
    }

    let threads = kernel_threads();
    let a_ptr = a.data.as_ptr();
    let b_ptr = b.data.as_ptr();
    let c_ptr = c.data.as_mut_ptr();
    if threads <= 1 || m < 2 * threads {
        // SAFETY: dims and strides were validated against the buffers above.
        unsafe {
            T::gemm_raw(
                m, k, n, alpha, a_ptr, rsa, csa, b_ptr, rsb, csb, beta, c_ptr, n as isize, 1,
            );
        }
        return Ok(());
    }

    let chunk = m.div_ceil(threads);
    let a_ptr = SendPtr(a_ptr as *mut T);
    let b_ptr = SendPtr(b_ptr as *mut T);
    let c_ptr = SendPtr(c_ptr);
    rayon::scope(|s| {
        for start in (0..m).step_by(chunk) {
            let rows = chunk.min(m - start);
            let (a_ptr, b_ptr, c_ptr) = (&a_ptr, &b_ptr, &c_ptr);
            s.spawn(move |_| {
                // SAFETY: each task writes a disjoint block of output rows.
                unsafe {
                    T::gemm_raw(
                        rows,
                        k,
                        n,
                        alpha,
                        a_ptr.0.offset(start as isize * rsa),
                        rsa,
                        csa,
                        b_ptr.0,
                        rsb,
                        csb,
                        beta,
                        c_ptr.0.add(start * n),
                        n as isize,
                        1,
                    );
                }
            });
        }
    });
    Ok(())
}

/// `A·Bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(T::one(), a, Trans::No, b, Trans::Yes, T::zero(), &mut out)?;
    Ok(out)
}

/// `Aᵀ·B` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm(T::one(), a, Trans::Yes, b, Trans::No, T::zero(), &mut out)?;
    Ok(out)
}

pub fn ew<T: Scalar>(op: EwOp, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "elementwise",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let f = match op {
        EwOp::Add => |x: T, y: T| x + y,
        EwOp::Sub => |x: T, y: T| x - y,
        EwOp::Hadamard => |x: T, y: T| x * y,
    };
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Derivative of sigmoid expressed through its output `a`, times `upstream`.
#[inline]
pub fn sigmoid_grad<T: Scalar>(a: T, upstream: T) -> T {
    upstream * a * (T::one() - a)
}

/// Derivative of tanh expressed through its output `a`, times `upstream`.
#[inline]
pub fn tanh_grad<T: Scalar>(a: T, upstream: T) -> T {
    upstream * (T::one() - a * a)
}

pub fn activation<T: Scalar>(kind: Activation, a: &Matrix<T>) -> Matrix<T> {
    match kind {
        Activation::Sigmoid => a.map(sigmoid),
        Activation::Tanh => a.map(T::tanh),
    }
}

/// Backpropagates `upstream` through an activation, given the activation's
/// forward output (not its input).
pub fn activation_grad<T: Scalar>(
    kind: Activation,
    activated: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    if activated.shape() != upstream.shape() {
        return Err(Error::shape(
            "activation_grad",
            format!("{:?} vs {:?}", activated.shape(), upstream.shape()),
        ));
    }
    let f = match kind {
        Activation::Sigmoid => sigmoid_grad::<T>,
        Activation::Tanh => tanh_grad::<T>,
    };
    let data = activated
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&a, &u)| f(a, u))
        .collect();
    Ok(Matrix {
        rows: activated.rows,
        cols: activated.cols,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn m(rows: &[&[f64]]) -> M {
        M::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[3., 1.], &[2., 5.]]);
        assert_eq!(M::identity(2).matmul(&b).unwrap(), b);
        let a = m(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(a.matmul(&M::zeros(2, 2)).unwrap(), M::zeros(2, 2));
        let c = a.matmul(&m(&[&[5., 6.], &[7., 8.]])).unwrap();
        assert_eq!(c, m(&[&[19., 22.], &[43., 50.]]));
    }

    #[test]
    fn matmul_shape_error() {
        let a = M::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = M::random_uniform(7, 5, -3.0, 3.0, &mut rng);
        assert_eq!(a.matmul(&M::identity(5)).unwrap(), a);
        assert_eq!(M::identity(7).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_naive_up_to_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(mm, k, n) in &[(1, 1, 1), (3, 17, 5), (64, 31, 129), (256, 256, 256)] {
            let a = M::random_uniform(mm, k, -1.0, 1.0, &mut rng);
            let b = M::random_uniform(k, n, -1.0, 1.0, &mut rng);
            let fast = a.matmul(&b).unwrap();
            let slow = a.matmul_naive(&b).unwrap();
            let scale = slow.max_abs().max(1.0);
            for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((x - y).abs() / scale <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn transposed_operands_and_threads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = M::random_uniform(40, 12, -1.0, 1.0, &mut rng);
        let b = M::random_uniform(9, 12, -1.0, 1.0, &mut rng);
        let expect = a.matmul_naive(&b.transpose()).unwrap();
        let got = matmul_nt(&a, &b).unwrap();
        let tn = matmul_tn(&a.transpose(), &b.transpose()).unwrap();
        set_kernel_threads(4);
        let par = matmul_nt(&a, &b).unwrap();
        set_kernel_threads(1);
        for other in [&got, &tn, &par] {
            for (x, y) in other.as_slice().iter().zip(expect.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_examples() {
        assert_eq!(m(&[&[1., 2., 3.]]).transpose(), m(&[&[1.], &[2.], &[3.]]));
        let s = m(&[&[1., 2.], &[2., 5.]]);
        assert_eq!(s.transpose(), s);
    }

    #[test]
    fn elementwise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = M::random_uniform(3, 4, -2.0, 2.0, &mut rng);
        assert_eq!(ew(EwOp::Hadamard, &a, &M::filled(3, 4, 1.0)).unwrap(), a);
        assert_eq!(ew(EwOp::Add, &a, &a.scale(-1.0)).unwrap(), M::zeros(3, 4));
        assert_eq!(ew(EwOp::Sub, &a, &a).unwrap(), M::zeros(3, 4));
        assert_eq!(
            ew(EwOp::Hadamard, &m(&[&[2., 3.]]), &m(&[&[4., 5.]])).unwrap(),
            m(&[&[8., 15.]])
        );
        assert!(ew(EwOp::Add, &a, &M::zeros(4, 3)).is_err());
    }

    #[test]
    fn activation_examples() {
        let z = M::zeros(2, 3);
        assert_eq!(activation(Activation::Sigmoid, &z), M::filled(2, 3, 0.5));
        assert_eq!(activation(Activation::Tanh, &z), z);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = M::random_uniform(5, 5, -6.0, 6.0, &mut rng);
        let s = activation(Activation::Sigmoid, &x);
        let sn = activation(Activation::Sigmoid, &x.scale(-1.0));
        for (a, b) in s.as_slice().iter().zip(sn.as_slice()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn activation_grad_examples() {
        let g = activation_grad(
            Activation::Sigmoid,
            &M::filled(1, 1, 0.5),
            &M::filled(1, 1, 1.0),
        )
        .unwrap();
        assert_eq!(g.get(0, 0), 0.25);
        let g = activation_grad(Activation::Tanh, &M::zeros(1, 1), &M::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.get(0, 0), 1.0);
        assert!(activation_grad(Activation::Tanh, &M::zeros(1, 2), &M::zeros(2, 1)).is_err());
    }

    #[test]
    fn activation_grad_matches_central_differences() {
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = M::random_uniform(4, 6, -3.0, 3.0, &mut rng);
        let up = M::random_uniform(4, 6, -1.0, 1.0, &mut rng);
        for kind in [Activation::Sigmoid, Activation::Tanh] {
            let analytic = activation_grad(kind, &activation(kind, &x), &up).unwrap();
            let plus = activation(kind, &x.map(|v| v + eps));
            let minus = activation(kind, &x.map(|v| v - eps));
            for i in 0..x.as_slice().len() {
                let fd =
                    (plus.as_slice()[i] - minus.as_slice()[i]) / (2.0 * eps) * up.as_slice()[i];
                assert!((fd - analytic.as_slice()[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gather_scatter_examples() {
        let a = m(&[&[1., 2., 3.], &[4., 5., 6.]]);
        assert_eq!(a.gather_columns(&[0, 1, 2]).unwrap(), a);
        assert_eq!(
            a.gather_columns(&[0, 2]).unwrap(),
            m(&[&[1., 3.], &[4., 6.]])
        );
        assert_eq!(a.gather_rows(&[1]).unwrap(), m(&[&[4., 5., 6.]]));
        assert_eq!(
            a.gather_rows(&[1]).unwrap().scatter_rows(&[1], 2).unwrap(),
            m(&[&[0., 0., 0.], &[4., 5., 6.]])
        );
        assert!(a.gather_columns(&[2, 0]).is_err());
        assert!(a.gather_columns(&[1, 1]).is_err());
        assert!(a.gather_columns(&[3]).is_err());
        assert!(a.gather_rows(&[2]).is_err());
        assert!(a.scatter_columns(&[0, 5, 6], 4).is_err());
    }

    fn arb_matrix_and_keep() -> impl Strategy<Value = (M, Vec<usize>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
            (
                proptest::collection::vec(-100.0f64..100.0, r * c),
                proptest::collection::vec(any::<bool>(), c),
            )
                .prop_map(move |(data, sel)| {
                    let keep = sel
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &s)| s.then_some(i))
                        .collect();
                    (M::from_vec(r, c, data).unwrap(), keep)
                })
        })
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution((a, _) in arb_matrix_and_keep()) {
            prop_assert_eq!(a.transpose().transpose(), a);
        }

        #[test]
        fn column_round_trip_zeroes_the_complement((a, keep) in arb_matrix_and_keep()) {
            let back = a.gather_columns(&keep).unwrap().scatter_columns(&keep, a.cols()).unwrap();
            let mut expect = a.clone();
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    if !keep.contains(&c) {
                        expect.set(r, c, 0.0);
                    }
                }
            }
            prop_assert_eq!(back, expect);
        }

        #[test]
        fn row_round_trip_zeroes_the_complement((a, keep) in arb_matrix_and_keep()) {
            let t = a.transpose();
            let back = t.gather_rows(&keep).unwrap().scatter_rows(&keep, t.rows()).unwrap();
            let expect = a.gather_columns(&keep).unwrap()
                .scatter_columns(&keep, a.cols()).unwrap().transpose();
            prop_assert_eq!(back, expect);
        }
    }
}
