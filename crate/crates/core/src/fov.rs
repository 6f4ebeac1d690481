//! Field-of-view emphasis: HRTF gain control, distortion-weighted filter
//! design, and directional gain patterns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    check_grids, design_bsm, design_dbsm_with, BinauralFilter, BsmOptions, Regularization,
    SourceCovEstimate,
};
use crate::grid::{circular_diff, DirectionGrid};
use crate::hrtf::HrtfSet;
use crate::linalg::{ComplexMat, C64};
use crate::scene::SteeringSet;

/// Grid directions that make up the field of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FovRegion {
    /// Azimuths within ±width/2 of the centre.
    Azimuth { center_deg: f64, width_deg: f64 },
    /// Explicit grid indices.
    Indices { indices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovSpec {
    pub region: FovRegion,
    /// Out-of-FoV HRTF attenuation: rows outside the region are scaled by 1 − γ.
    #[serde(default)]
    pub gamma: f64,
    /// Out-of-FoV distortion allowance: design weight 1 − δ outside the region.
    #[serde(default)]
    pub delta: f64,
    /// Extra gain on in-FoV direct paths of COMPASS-style designs.
    #[serde(default = "unit_boost")]
    pub direct_boost: f64,
}

fn unit_boost() -> f64 {
    1.0
}

impl FovSpec {
    pub fn azimuth(center_deg: f64, width_deg: f64, gamma: f64, delta: f64) -> Self {
        Self {
            region: FovRegion::Azimuth {
                center_deg,
                width_deg,
            },
            gamma,
            delta,
            direct_boost: 1.0,
        }
    }

    /// Checks parameter ranges and that the region selects at least one grid direction.
    pub fn validate(&self, grid: &DirectionGrid) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "fov.gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "fov.delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        if !(self.direct_boost >= 1.0 && self.direct_boost.is_finite()) {
            return Err(Error::Config(format!(
                "fov.direct_boost must be a finite value >= 1, got {}",
                self.direct_boost
            )));
        }
        if let FovRegion::Indices { indices } = &self.region {
            if let Some(bad) = indices.iter().find(|&&q| q >= grid.len()) {
                return Err(Error::Config(format!(
                    "fov.region.indices: {bad} is outside a grid of {} directions",
                    grid.len()
                )));
            }
        }
        if !self.mask(grid).iter().any(|&m| m) {
            return Err(Error::Config("fov.region selects no grid direction".into()));
        }
        Ok(())
    }

    /// Membership flag per grid direction.
    pub fn mask(&self, grid: &DirectionGrid) -> Vec<bool> {
        match &self.region {
            FovRegion::Azimuth {
                center_deg,
                width_deg,
            } => grid
                .iter()
                .map(|d| {
                    circular_diff(d.azimuth(), center_deg.to_radians())
                        <= 0.5 * width_deg.to_radians() + 1e-9
                })
                .collect(),
            FovRegion::Indices { indices } => {
                (0..grid.len()).map(|q| indices.contains(&q)).collect()
            }
        }
    }
}

/// Scales out-of-FoV HRTF rows by 1 − γ; in-FoV rows are untouched.
pub fn apply_gain_control(h: &HrtfSet, fov: &FovSpec) -> HrtfSet {
    let mask = fov.mask(&h.grid);
    let g = 1.0 - fov.gamma;
    h.map_rows(|q, _, v| if mask[q] { v } else { v * g })
}

/// Like [`apply_gain_control`], additionally multiplying in-FoV rows by the direct boost.
pub fn apply_direct_gain(h: &HrtfSet, fov: &FovSpec) -> HrtfSet {
    let mask = fov.mask(&h.grid);
    let g = 1.0 - fov.gamma;
    h.map_rows(|q, _, v| if mask[q] { v * fov.direct_boost } else { v * g })
}

/// Diagonal design weights: 1 inside the FoV, 1 − δ outside.
pub fn distortion_matrix(grid: &DirectionGrid, fov: &FovSpec) -> Vec<f64> {
    fov.mask(grid)
        .into_iter()
        .map(|inside| if inside { 1.0 } else { 1.0 - fov.delta })
        .collect()
}

fn check_weights(d: &[f64], q: usize) -> Result<()> {
    if d.len() != q {
        return Err(Error::Shape(format!(
            "{} distortion weights for {q} directions",
            d.len()
        )));
    }
    if d.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Shape(
            "distortion weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// Weighted steering and HRTF sets `A·D^{1/2}` and `D^{1/2}·H`.
pub fn weight_sets(a: &SteeringSet, h: &HrtfSet, d: &[f64]) -> Result<(SteeringSet, HrtfSet)> {
    check_grids(a, h)?;
    check_weights(d, a.num_dirs())?;
    let root: Vec<f64> = d.iter().map(|w| w.sqrt()).collect();
    let mats = a
        .matrices()
        .iter()
        .map(|m| ComplexMat::from_fn(m.nrows(), m.ncols(), |i, q| m[(i, q)] * root[q]))
        .collect();
    let aw = SteeringSet::from_matrices(a.grid.clone(), a.freqs.clone(), mats)?;
    let hw = h.map_rows(|q, _, v| v * root[q]);
    Ok((aw, hw))
}

/// Distortion-weighted BSM: `c = Hᵀ D Aᴴ (A D Aᴴ + εI)⁻¹` per bin.
///
/// Solved as an ordinary BSM on `A·D^{1/2}` and `D^{1/2}·H`, so `D = I`
/// reproduces [`design_bsm`] exactly.
pub fn design_weighted_bsm(
    a: &SteeringSet,
    h: &HrtfSet,
    d: &[f64],
    opts: &BsmOptions,
) -> Result<BinauralFilter> {
    let (aw, hw) = weight_sets(a, h, d)?;
    design_bsm(&aw, &hw, opts)
}

/// Distortion-weighted d-BSM with `R̃_s = D^{1/2} R_s D^{1/2}`.
pub fn design_weighted_dbsm(
    a: &SteeringSet,
    h: &HrtfSet,
    r_s: &SourceCovEstimate,
    noise: Regularization,
    d: &[f64],
) -> Result<BinauralFilter> {
    check_grids(a, h)?;
    check_weights(d, a.num_dirs())?;
    if r_s.direct.len() != a.num_bins() || r_s.diffuse.len() != a.num_bins() {
        return Err(Error::Shape(
            "source covariance needs one entry per bin".into(),
        ));
    }
    let q = a.num_dirs();
    let root: Vec<f64> = d.iter().map(|w| w.sqrt()).collect();
    design_dbsm_with(
        a,
        h,
        |k| {
            let rs = r_s.full(k, q);
            ComplexMat::from_fn(q, q, |i, j| rs[(i, j)] * (root[i] * root[j]))
        },
        noise,
    )
}

/// Directional gain per grid direction, in dB relative to the reference HRTF.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPattern {
    pub azimuth_deg: Vec<f64>,
    pub left_db: Vec<f64>,
    pub right_db: Vec<f64>,
    /// Both ears pooled.
    pub combined_db: Vec<f64>,
}

impl GainPattern {
    /// Mean combined gain over the directions where `select` is true.
    pub fn mean_db(&self, select: &[bool]) -> f64 {
        let v: Vec<f64> = self
            .combined_db
            .iter()
            .zip(select)
            .filter(|(_, &s)| s)
            .map(|(g, _)| *g)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Lowest reported gain; keeps fully suppressed directions finite.
pub const GAIN_FLOOR_DB: f64 = -200.0;

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { -GAIN_FLOOR_DB } else { 0.0 };
    }
    (10.0 * (num / den).log10()).max(GAIN_FLOOR_DB)
}

/// `gain_q = 10·log10(Σ_f ‖c·a_q‖² / Σ_f ‖H_q‖²)` for a unit plane wave from each grid direction.
pub fn directional_gain_pattern(
    c: &BinauralFilter,
    a: &SteeringSet,
    h_ref: &HrtfSet,
) -> Result<GainPattern> {
    check_grids(a, h_ref)?;
    if c.num_bins() != a.num_bins() || c.num_mics() != a.num_mics() {
        return Err(Error::Shape(
            "filter does not match the steering set".into(),
        ));
    }
    let q_count = a.num_dirs();
    let mut num = vec![[0.0; 2]; q_count];
    let mut den = vec![[0.0; 2]; q_count];
    for k in 0..a.num_bins() {
        let ca = c.at(k) * a.at(k);
        let hk = h_ref.at(k);
        for q in 0..q_count {
            for e in 0..2 {
                num[q][e] += ca[(e, q)].norm_sqr();
                den[q][e] += hk[(q, e)].norm_sqr();
            }
        }
    }
    Ok(GainPattern {
        azimuth_deg: a.grid.iter().map(|d| d.azimuth_deg()).collect(),
        left_db: (0..q_count)
            .map(|q| ratio_db(num[q][0], den[q][0]))
            .collect(),
        right_db: (0..q_count)
            .map(|q| ratio_db(num[q][1], den[q][1]))
            .collect(),
        combined_db: (0..q_count)
            .map(|q| ratio_db(num[q][0] + num[q][1], den[q][0] + den[q][1]))
            .collect(),
    })
}

/// Synthetic steering set with one square, well-conditioned matrix per bin.
///
/// Columns are a scaled DFT basis with a bin-dependent phase twist, so `A`
/// is unitary up to scale and every grid direction is matched exactly.
pub fn square_steering(grid: &DirectionGrid, freqs: &crate::grid::FreqGrid) -> SteeringSet {
    let n = grid.len();
    let mats = (0..freqs.num_bins())
        .map(|k| {
            ComplexMat::from_fn(n, n, |m, q| {
                let phase = 2.0 * std::f64::consts::PI * (m * q) as f64 / n as f64
                    + 0.01 * (k * (m + 1)) as f64;
                C64::from_polar(1.0, phase)
            })
        })
        .collect();
    SteeringSet::from_matrices(grid.clone(), freqs.clone(), mats)
        .expect("shapes are consistent by construction")
}
