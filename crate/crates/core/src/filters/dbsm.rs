use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hrtf::HrtfSet;
use crate::linalg::{hermitian_solve_general, ComplexMat, C64};
use crate::scene::SteeringSet;

use super::{check_grids, BinauralFilter, Regularization, SourceCovEstimate};

/// Absolute floor added to the noise covariance so silent bins stay solvable.
const NOISE_FLOOR: f64 = 1e-12;

/// Signal-dependent BSM for one bin: `c = Hᵀ R_s Aᴴ (A R_s Aᴴ + R_n)⁻¹`.
///
/// `h` is Q'×2 and `r_s` Q'×Q', both ordered like the columns of `a`.
pub fn design_dbsm_bin(
    a: &ComplexMat,
    h: &ComplexMat,
    r_s: &ComplexMat,
    r_n: &ComplexMat,
) -> Result<ComplexMat> {
    let (n, q) = a.shape();
    if h.nrows() != q || h.ncols() != 2 || r_s.shape() != (q, q) || r_n.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "A {}x{}, H {}x{}, R_s {}x{}, R_n {}x{}",
            n,
            q,
            h.nrows(),
            h.ncols(),
            r_s.nrows(),
            r_s.ncols(),
            r_n.nrows(),
            r_n.ncols()
        )));
    }
    let ar = a * r_s;
    let m = &ar * a.adjoint() + r_n;
    let rhs = ar * h.conjugate();
    Ok(hermitian_solve_general(&m, &rhs)?.adjoint())
}

/// Grid indices with the detected directions first, followed by the rest in grid order.
pub fn direct_then_rest(q_total: usize, detected: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = detected.to_vec();
    order.extend((0..q_total).filter(|q| !detected.contains(q)));
    order
}

/// d-BSM over all bins. `a` and `h` must already be ordered direct-first
/// (see [`direct_then_rest`]); the noise covariance is `εI` with ε resolved
/// against `A R_s Aᴴ`.
pub fn design_dbsm(
    a: &SteeringSet,
    h: &HrtfSet,
    r_s: &SourceCovEstimate,
    noise: Regularization,
) -> Result<BinauralFilter> {
    check_grids(a, h)?;
    if r_s.direct.len() != a.num_bins() || r_s.diffuse.len() != a.num_bins() {
        return Err(Error::Shape(
            "source covariance needs one entry per bin".into(),
        ));
    }
    let q = a.num_dirs();
    design_dbsm_with(a, h, |k| r_s.full(k, q), noise)
}

/// d-BSM with the source covariance of bin `k` supplied by `r_s_of(k)`.
pub(crate) fn design_dbsm_with(
    a: &SteeringSet,
    h: &HrtfSet,
    r_s_of: impl Fn(usize) -> ComplexMat + Sync,
    noise: Regularization,
) -> Result<BinauralFilter> {
    let n = a.num_mics();
    let bins = (0..a.num_bins())
        .into_par_iter()
        .map(|k| {
            let rs = r_s_of(k);
            let ak = a.at(k);
            let gram = ak * &rs * ak.adjoint();
            let e = noise.resolve(&gram) + NOISE_FLOOR;
            let rn = ComplexMat::identity(n, n) * C64::new(e, 0.0);
            design_dbsm_bin(ak, h.at(k), &rs, &rn)
        })
        .collect::<Result<Vec<_>>>()?;
    BinauralFilter::new(bins)
}
