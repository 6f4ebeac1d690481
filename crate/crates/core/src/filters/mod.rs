//! Per-frequency binaural filter design: signal-independent BSM with a
//! magnitude-LS upper band, COMPASS-style LCMV rendering, and signal-dependent
//! BSM driven by estimated source covariances.

mod compass;
mod covariance;
mod dbsm;

pub use compass::{
    design_compass, design_compass_bin, estimate_doa, lcmv_direct, DoaEstimate, LCMV_LOADING,
};
pub use covariance::{
    build_source_cov, estimate_covariance, CovEstimate, CovarianceTracker, SourceCovEstimate,
    SourceCovTracker,
};
pub(crate) use dbsm::design_dbsm_with;
pub use dbsm::{design_dbsm, design_dbsm_bin, direct_then_rest};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrtf::HrtfSet;
use crate::linalg::{solve_regularized, trace_re, ComplexMat, C64};
use crate::scene::SteeringSet;

/// 2×N_m filter per frequency bin; the binaural output is `c[f]·x[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralFilter {
    bins: Vec<ComplexMat>,
}

impl BinauralFilter {
    pub fn new(bins: Vec<ComplexMat>) -> Result<Self> {
        let n = bins.first().map_or(0, |m| m.ncols());
        if bins.iter().any(|m| m.nrows() != 2 || m.ncols() != n) {
            return Err(Error::Shape(
                "binaural filter bins must all be 2 x N_m".into(),
            ));
        }
        if bins
            .iter()
            .flatten()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::Shape(
                "binaural filter has non-finite entries".into(),
            ));
        }
        Ok(Self { bins })
    }

    pub fn zeros(num_bins: usize, num_mics: usize) -> Self {
        Self {
            bins: vec![ComplexMat::zeros(2, num_mics); num_bins],
        }
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn num_mics(&self) -> usize {
        self.bins.first().map_or(0, |m| m.ncols())
    }

    pub fn at(&self, k: usize) -> &ComplexMat {
        &self.bins[k]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut ComplexMat {
        &mut self.bins[k]
    }

    pub fn bins(&self) -> &[ComplexMat] {
        &self.bins
    }

    pub fn into_bins(self) -> Vec<ComplexMat> {
        self.bins
    }

    /// `c[k]·x` for one bin of microphone data.
    pub fn apply(&self, k: usize, x: &[C64]) -> [C64; 2] {
        apply_bin(&self.bins[k], x)
    }
}

pub fn apply_bin(c: &ComplexMat, x: &[C64]) -> [C64; 2] {
    let mut out = [C64::new(0.0, 0.0); 2];
    for (e, o) in out.iter_mut().enumerate() {
        for (m, xm) in x.iter().enumerate() {
            *o += c[(e, m)] * xm;
        }
    }
    out
}

/// How the Tikhonov weight ε is chosen per bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Regularization {
    /// Fixed ε.
    Absolute(f64),
    /// ε = value · trace(AAᴴ) / N_m, evaluated per bin.
    RelativeTrace(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::RelativeTrace(1e-4)
    }
}

impl Regularization {
    pub fn resolve(&self, gram: &ComplexMat) -> f64 {
        match *self {
            Regularization::Absolute(e) => e,
            Regularization::RelativeTrace(r) => r * trace_re(gram) / gram.nrows().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsmOptions {
    #[serde(default)]
    pub eps: Regularization,
    /// Bins strictly above this frequency use the magnitude-LS objective.
    /// `None` keeps the complex LS solution everywhere.
    #[serde(default = "default_magls_cutoff")]
    pub magls_cutoff_hz: Option<f64>,
}

fn default_magls_cutoff() -> Option<f64> {
    Some(2_000.0)
}

impl Default for BsmOptions {
    fn default() -> Self {
        Self {
            eps: Regularization::default(),
            magls_cutoff_hz: default_magls_cutoff(),
        }
    }
}

impl BsmOptions {
    pub fn complex_ls(eps: Regularization) -> Self {
        Self {
            eps,
            magls_cutoff_hz: None,
        }
    }
}

pub(crate) fn check_grids(a: &SteeringSet, h: &HrtfSet) -> Result<()> {
    if a.grid != h.grid {
        return Err(Error::GridMismatch(
            "steering and HRTF direction grids differ".into(),
        ));
    }
    if a.freqs != h.freqs {
        return Err(Error::GridMismatch(
            "steering and HRTF frequency grids differ".into(),
        ));
    }
    Ok(())
}

/// Regularized LS filter for one bin: `c = Hᵀ Aᴴ (εI + AAᴴ)⁻¹`.
///
/// `h` is Q×2 (one row per direction). Solved as `cᴴ = (εI + AAᴴ)⁻¹ A conj(H)`.
pub fn bsm_bin(a: &ComplexMat, h: &ComplexMat, eps: Regularization) -> Result<ComplexMat> {
    if a.ncols() != h.nrows() || h.ncols() != 2 {
        return Err(Error::Shape(format!(
            "A is {}x{}, H is {}x{}",
            a.nrows(),
            a.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }
    let gram = a * a.adjoint();
    let e = eps.resolve(&gram);
    let rhs = a * h.conjugate();
    let x = solve_regularized(&gram, &rhs, e)?;
    Ok(x.adjoint())
}

/// Signal-independent BSM over all bins, with the magnitude-LS variant above
/// `opts.magls_cutoff_hz`.
pub fn design_bsm(a: &SteeringSet, h: &HrtfSet, opts: &BsmOptions) -> Result<BinauralFilter> {
    check_grids(a, h)?;
    let bins = (0..a.num_bins())
        .into_par_iter()
        .map(|k| bsm_bin(a.at(k), h.at(k), opts.eps))
        .collect::<Result<Vec<_>>>()?;
    let c = BinauralFilter::new(bins)?;
    match opts.magls_cutoff_hz {
        Some(cut) => magls_refine(&c, a, h, cut, opts.eps),
        None => Ok(c),
    }
}

const MAGLS_ITERATIONS: usize = 4;

/// ‖|cA| − |Hᵀ|‖_F for one bin.
pub fn magnitude_error(c: &ComplexMat, a: &ComplexMat, h: &ComplexMat) -> f64 {
    let ca = c * a;
    let mut acc = 0.0;
    for q in 0..a.ncols() {
        for e in 0..2 {
            acc += (ca[(e, q)].norm() - h[(q, e)].norm()).powi(2);
        }
    }
    acc.sqrt()
}

/// Magnitude-LS refinement of bins strictly above `cutoff_hz`.
///
/// Bins are visited in ascending order. Each bin's target keeps |H| but takes
/// its phase from the previous bin's filter applied to this bin's steering
/// matrix, then a few fixed-point phase updates follow. A bin is only
/// replaced when its magnitude error does not exceed the complex-LS one.
pub fn magls_refine(
    c_init: &BinauralFilter,
    a: &SteeringSet,
    h: &HrtfSet,
    cutoff_hz: f64,
    eps: Regularization,
) -> Result<BinauralFilter> {
    check_grids(a, h)?;
    let mut out = c_init.clone();
    let freqs = a.freqs.bins();
    for k in 0..a.num_bins() {
        if freqs[k] <= cutoff_hz || k == 0 {
            continue;
        }
        let ak = a.at(k);
        let hk = h.at(k);
        let mut phase_src = out.at(k - 1) * ak;
        let mut best = out.at(k).clone();
        let mut best_err = magnitude_error(&best, ak, hk);
        for _ in 0..MAGLS_ITERATIONS {
            let target = ComplexMat::from_fn(hk.nrows(), 2, |q, e| {
                let p = phase_src[(e, q)];
                let mag = hk[(q, e)].norm();
                if p.norm() > 0.0 {
                    p * (mag / p.norm())
                } else {
                    hk[(q, e)]
                }
            });
            let cand = bsm_bin(ak, &target, eps)?;
            let err = magnitude_error(&cand, ak, hk);
            phase_src = &cand * ak;
            if err <= best_err {
                best_err = err;
                best = cand;
            }
        }
        *out.at_mut(k) = best;
    }
    Ok(out)
}
