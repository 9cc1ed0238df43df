//! Compaction-based GEMM kernels for the three sparsity patterns a
//! structured dropout mask induces during training.
//!
//! | phase | pattern | kernel |
//! |-------|---------|--------|
//! | forward | left operand has zero columns | [`gemm_lhs_colsparse`] |
//! | backward | output columns are masked anyway | [`gemm_output_colsparse`] |
//! | weight gradient | left operand has zero rows | [`gemm_lhs_rowsparse`] |
//!
//! Each kernel gathers the kept columns/rows into contiguous scratch
//! buffers, runs the dense GEMM on the smaller problem and scatters back.
//! The gather and scatter are part of the kernel and are timed with it.

use crate::error::{Error, Result};
use crate::masks::StructuredMask;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SparsityKind {
    /// Forward pass: `X_masked · W`.
    LhsColumnSparse,
    /// Backward pass: `mask(G · Wᵀ)`.
    OutputColumnSparse,
    /// Weight gradient: `X_maskedᵀ · G`.
    LhsRowSparse,
}

/// Reusable buffers for compacted operands. One per call site, reused
/// across time steps so steady-state kernels do not allocate.
#[derive(Clone, Debug, Default)]
pub struct Scratch<T> {
    lhs: Matrix<T>,
    rhs: Matrix<T>,
    out: Matrix<T>,
}

impl<T: Scalar> Scratch<T> {
    pub fn new() -> Self {
        Scratch {
            lhs: Matrix::default(),
            rhs: Matrix::default(),
            out: Matrix::default(),
        }
    }
}

fn check_width(op: &'static str, mask: &StructuredMask, h: usize) -> Result<()> {
    if mask.width() != h {
        return Err(Error::shape(
            op,
            format!("mask width {} for dimension {h}", mask.width()),
        ));
    }
    Ok(())
}

/// `Xm · W` where `Xm` (B×H) already has the mask's dropped columns zeroed.
/// Only the kept columns of `Xm` and kept rows of `W` are read.
pub fn gemm_lhs_colsparse<T: Scalar>(
    xm: &Matrix<T>,
    mask: &StructuredMask,
    w: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(xm.rows(), w.cols());
    gemm_lhs_colsparse_into(xm, mask, w, &mut out, false, &mut Scratch::new())?;
    Ok(out)
}

/// As [`gemm_lhs_colsparse`], writing into `out` or adding to it when
/// `accumulate` is set.
pub fn gemm_lhs_colsparse_into<T: Scalar>(
    xm: &Matrix<T>,
    mask: &StructuredMask,
    w: &Matrix<T>,
    out: &mut Matrix<T>,
    accumulate: bool,
    scratch: &mut Scratch<T>,
) -> Result<()> {
    check_width("gemm_lhs_colsparse", mask, xm.cols())?;
    if w.rows() != xm.cols() {
        return Err(Error::shape(
            "gemm_lhs_colsparse",
            format!("{:?} x {:?}", xm.shape(), w.shape()),
        ));
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if mask.drops_nothing() {
        return gemm(T::one(), xm, Trans::No, w, Trans::No, beta, out);
    }
    xm.gather_columns_into(mask.kept(), &mut scratch.lhs)?;
    w.gather_rows_into(mask.kept(), &mut scratch.rhs)?;
    gemm(
        T::one(),
        &scratch.lhs,
        Trans::No,
        &scratch.rhs,
        Trans::No,
        beta,
        out,
    )
}

/// `mask(G · Wt)` for `G` (B×M) and `Wt` (M×H): dropped output columns are
/// exact zeros and never computed, kept ones are scaled by the mask scale.
pub fn gemm_output_colsparse<T: Scalar>(
    g: &Matrix<T>,
    wt: &Matrix<T>,
    mask: &StructuredMask,
) -> Result<Matrix<T>> {
    check_width("gemm_output_colsparse", mask, wt.cols())?;
    if g.cols() != wt.rows() {
        return Err(Error::shape(
            "gemm_output_colsparse",
            format!("{:?} x {:?}", g.shape(), wt.shape()),
        ));
    }
    let wt_kept = wt.gather_columns(mask.kept())?;
    let compact = g.matmul(&wt_kept)?;
    let mut out = Matrix::default();
    compact.scatter_columns_into(mask.kept(), mask.width(), T::of(mask.scale()), &mut out)?;
    Ok(out)
}

/// `mask(G · Wᵀ)` with `W` stored untransposed (H×M), which is how the
/// engine holds its weights. Gathering kept rows of `W` is the same as
/// gathering kept columns of `Wᵀ`.
pub fn gemm_output_colsparse_nt_into<T: Scalar>(
    g: &Matrix<T>,
    w: &Matrix<T>,
    mask: &StructuredMask,
    out: &mut Matrix<T>,
    scratch: &mut Scratch<T>,
) -> Result<()> {
    check_width("gemm_output_colsparse", mask, w.rows())?;
    if g.cols() != w.cols() {
        return Err(Error::shape(
            "gemm_output_colsparse",
            format!("{:?} x {:?}ᵀ", g.shape(), w.shape()),
        ));
    }
    let scale = T::of(mask.scale());
    if mask.drops_nothing() {
        out.reshape_scratch(g.rows(), w.rows(), T::zero());
        gemm(T::one(), g, Trans::No, w, Trans::Yes, T::zero(), out)?;
        if scale != T::one() {
            out.scale_in_place(scale);
        }
        return Ok(());
    }
    w.gather_rows_into(mask.kept(), &mut scratch.rhs)?;
    scratch
        .out
        .reshape_scratch(g.rows(), mask.kept().len(), T::zero());
    gemm(
        T::one(),
        g,
        Trans::No,
        &scratch.rhs,
        Trans::Yes,
        T::zero(),
        &mut scratch.out,
    )?;
    scratch
        .out
        .scatter_columns_into(mask.kept(), mask.width(), scale, out)
}

/// `XmT · G` where `XmT` (H×B) has the mask's dropped rows zeroed. The
/// result's dropped rows are exact zeros.
pub fn gemm_lhs_rowsparse<T: Scalar>(
    xmt: &Matrix<T>,
    mask: &StructuredMask,
    g: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_width("gemm_lhs_rowsparse", mask, xmt.rows())?;
    if xmt.cols() != g.rows() {
        return Err(Error::shape(
            "gemm_lhs_rowsparse",
            format!("{:?} x {:?}", xmt.shape(), g.shape()),
        ));
    }
    let compact = xmt.gather_rows(mask.kept())?.matmul(g)?;
    compact.scatter_rows(mask.kept(), mask.width())
}

/// `accum += Xmᵀ · G` for activations `Xm` (B×H) stored untransposed.
/// Rows of `accum` outside the kept set are not touched.
pub fn gemm_lhs_rowsparse_tn_add<T: Scalar>(
    xm: &Matrix<T>,
    mask: &StructuredMask,
    g: &Matrix<T>,
    accum: &mut Matrix<T>,
    scratch: &mut Scratch<T>,
) -> Result<()> {
    check_width("gemm_lhs_rowsparse", mask, xm.cols())?;
    if xm.rows() != g.rows() || accum.shape() != (xm.cols(), g.cols()) {
        return Err(Error::shape(
            "gemm_lhs_rowsparse",
            format!(
                "{:?}ᵀ x {:?} into {:?}",
                xm.shape(),
                g.shape(),
                accum.shape()
            ),
        ));
    }
    if mask.drops_nothing() {
        return gemm(T::one(), xm, Trans::Yes, g, Trans::No, T::one(), accum);
    }
    xm.gather_columns_into(mask.kept(), &mut scratch.lhs)?;
    scratch
        .out
        .reshape_scratch(mask.kept().len(), g.cols(), T::zero());
    gemm(
        T::one(),
        &scratch.lhs,
        Trans::Yes,
        g,
        Trans::No,
        T::zero(),
        &mut scratch.out,
    )?;
    scratch.out.scatter_rows_add(mask.kept(), accum)
}

/// Multiply-add count (2 per MAC) of the compacted kernel, with `b`, `h`,
/// `m` as in the kernel signatures and `k = |kept|` replacing `h`.
pub fn flops(kind: SparsityKind, b: usize, h: usize, m: usize, mask: &StructuredMask) -> u64 {
    debug_assert_eq!(mask.width(), h);
    kind_flops(kind, b, mask.kept().len(), m)
}

/// Multiply-add count of the dense counterpart.
pub fn dense_flops(kind: SparsityKind, b: usize, h: usize, m: usize) -> u64 {
    kind_flops(kind, b, h, m)
}

fn kind_flops(kind: SparsityKind, b: usize, k: usize, m: usize) -> u64 {
    let (b, k, m) = (b as u64, k as u64, m as u64);
    match kind {
        SparsityKind::LhsColumnSparse => 2 * b * k * m,
        SparsityKind::OutputColumnSparse => 2 * b * m * k,
        SparsityKind::LhsRowSparse => 2 * k * b * m,
    }
}
