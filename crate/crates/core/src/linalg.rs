//! Small dense complex linear algebra: regularized Hermitian solves and the
//! general solve used by the LCMV and signal-dependent designs.
//!
//! Everything is factorization + solve. No explicit inverses are formed.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Dense complex matrix. All matrices in this crate are small (<= ~64x64).
pub type ComplexMat = DMatrix<C64>;
pub type ComplexVec = DVector<C64>;

/// Condition number above which a system is declared singular.
pub const MAX_CONDITION: f64 = 1e14;

/// Relative Hermitian tolerance accepted by [`solve_regularized`].
pub const HERMITIAN_TOL: f64 = 1e-10;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// ‖M − Mᴴ‖_F / ‖M‖_F, or 0 for the zero matrix.
pub fn hermitian_asymmetry(m: &ComplexMat) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let scale = m.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).norm() / scale
}

/// Ratio of extreme singular values. Infinite for a rank-deficient matrix.
pub fn condition_estimate(m: &ComplexMat) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn trace_re(m: &ComplexMat) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

fn check_finite(m: &ComplexMat, what: &str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} has non-finite entries")))
    }
}

fn add_identity(m: &ComplexMat, eps: f64) -> ComplexMat {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    out
}

/// Cholesky solve of a Hermitian positive definite system, `None` if the
/// factorization breaks down.
pub fn solve_pd(m: &ComplexMat, rhs: &ComplexMat) -> Option<ComplexMat> {
    let chol = m.clone().cholesky()?;
    let x = chol.solve(rhs);
    x.iter()
        .all(|z| z.re.is_finite() && z.im.is_finite())
        .then_some(x)
}

/// Returns `(εI + M)⁻¹·rhs` for Hermitian `M`.
///
/// The Hermitian check is relative (`HERMITIAN_TOL`). With `eps == 0` the
/// condition number is estimated and a near-singular `M` is rejected.
pub fn solve_regularized(m: &ComplexMat, rhs: &ComplexMat, eps: f64) -> Result<ComplexMat> {
    if !m.is_square() || rhs.nrows() != m.nrows() {
        return Err(Error::Shape(format!(
            "solve_regularized: M is {}x{}, rhs is {}x{}",
            m.nrows(),
            m.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Shape(format!(
            "regularization must be >= 0, got {eps}"
        )));
    }
    check_finite(m, "M")?;
    let asym = hermitian_asymmetry(m);
    if asym > HERMITIAN_TOL {
        return Err(Error::NonHermitian(asym));
    }
    let loaded = add_identity(m, eps);
    if eps == 0.0 {
        let cond = condition_estimate(&loaded);
        if cond > MAX_CONDITION {
            return Err(Error::Singular(cond));
        }
    }
    if let Some(x) = solve_pd(&loaded, rhs) {
        return Ok(x);
    }
    // Indefinite but Hermitian: fall back to pivoted LU.
    lu_solve(&loaded, rhs).ok_or_else(|| Error::Singular(condition_estimate(&loaded)))
}

fn lu_solve(m: &ComplexMat, rhs: &ComplexMat) -> Option<ComplexMat> {
    let x = m.clone().lu().solve(rhs)?;
    x.iter()
        .all(|z| z.re.is_finite() && z.im.is_finite())
        .then_some(x)
}

/// Solves `M·x = rhs` for a general square `M`, rejecting ill-conditioned systems.
pub fn hermitian_solve_general(m: &ComplexMat, rhs: &ComplexMat) -> Result<ComplexMat> {
    if !m.is_square() || rhs.nrows() != m.nrows() {
        return Err(Error::Shape(format!(
            "solve: M is {}x{}, rhs is {}x{}",
            m.nrows(),
            m.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    check_finite(m, "M")?;
    check_finite(rhs, "rhs")?;
    let cond = condition_estimate(m);
    if cond > MAX_CONDITION {
        return Err(Error::Singular(cond));
    }
    let hermitian = hermitian_asymmetry(m) <= HERMITIAN_TOL;
    if hermitian {
        if let Some(x) = solve_pd(m, rhs) {
            return Ok(x);
        }
    }
    lu_solve(m, rhs).ok_or(Error::Singular(cond))
}

/// Frobenius norm of `M·x − rhs` relative to ‖rhs‖.
pub fn relative_residual(m: &ComplexMat, x: &ComplexMat, rhs: &ComplexMat) -> f64 {
    let r = (m * x - rhs).norm();
    let s = rhs.norm();
    if s == 0.0 {
        r
    } else {
        r / s
    }
}
