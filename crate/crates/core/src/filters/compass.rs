use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::grid::Direction;
use crate::linalg::{condition_estimate, hermitian_solve_general, solve_pd, trace_re, ComplexMat};
use crate::scene::SteeringSet;

use super::{BinauralFilter, CovEstimate};

/// Diagonal loading applied to R_x before the LCMV solve, relative to trace/N_m.
pub const LCMV_LOADING: f64 = 1e-6;
const MAX_STEERING_CONDITION: f64 = 1e8;
const CONSTRAINT_TOL: f64 = 1e-8;

/// LCMV extractor `W_d = (A_dᴴ R⁻¹ A_d)⁻¹ A_dᴴ R⁻¹` (D×N_m) with `R` the loaded covariance.
///
/// `relative_loading` scales trace(R_x)/N_m; [`LCMV_LOADING`] is the default.
pub fn lcmv_direct(
    a_d: &ComplexMat,
    r_x: &ComplexMat,
    relative_loading: f64,
) -> Result<ComplexMat> {
    let n = r_x.nrows();
    if a_d.nrows() != n || !r_x.is_square() {
        return Err(Error::Shape(format!(
            "A_d is {}x{}, R_x is {}x{}",
            a_d.nrows(),
            a_d.ncols(),
            r_x.nrows(),
            r_x.ncols()
        )));
    }
    let d = a_d.ncols();
    if d == 0 {
        return Ok(ComplexMat::zeros(0, n));
    }
    if d > n || condition_estimate(a_d) > MAX_STEERING_CONDITION {
        return Err(Error::RankDeficient);
    }
    let load = relative_loading * trace_re(r_x) / n as f64;
    let mut r = r_x.clone();
    for i in 0..n {
        r[(i, i)] += load.max(f64::MIN_POSITIVE);
    }
    let y = solve_pd(&r, a_d).ok_or(Error::Singular(condition_estimate(&r)))?;
    let g = a_d.adjoint() * &y;
    let w = hermitian_solve_general(&g, &y.adjoint()).map_err(|_| Error::RankDeficient)?;
    let resid = (&w * a_d - ComplexMat::identity(d, d)).norm();
    if resid > CONSTRAINT_TOL {
        return Err(Error::RankDeficient);
    }
    Ok(w)
}

/// Single-stage COMPASS filter for one bin: `c_bsm (I − A_d W_d) + H_dᵀ W_d`.
///
/// `h_d` is D×2 (one row per direct direction).
pub fn design_compass_bin(
    a_d: &ComplexMat,
    h_d: &ComplexMat,
    w_d: &ComplexMat,
    c_bsm: &ComplexMat,
) -> ComplexMat {
    if a_d.ncols() == 0 {
        return c_bsm.clone();
    }
    let n = c_bsm.ncols();
    let proj = ComplexMat::identity(n, n) - a_d * w_d;
    c_bsm * proj + h_d.transpose() * w_d
}

/// COMPASS filter over all bins. Slices hold one matrix per bin.
pub fn design_compass(
    a_d: &[ComplexMat],
    h_d: &[ComplexMat],
    w_d: &[ComplexMat],
    c_bsm: &BinauralFilter,
) -> Result<BinauralFilter> {
    let bins = c_bsm.num_bins();
    if a_d.len() != bins || h_d.len() != bins || w_d.len() != bins {
        return Err(Error::Shape(
            "COMPASS inputs need one matrix per bin".into(),
        ));
    }
    BinauralFilter::new(
        (0..bins)
            .map(|k| design_compass_bin(&a_d[k], &h_d[k], &w_d[k], c_bsm.at(k)))
            .collect(),
    )
}

/// Steered-response-power DOA estimate over the candidate grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    pub indices: Vec<usize>,
    pub directions: Vec<Direction>,
    /// SRP per grid direction.
    pub power: Vec<f64>,
    /// Set when the response is flat (no preferred direction).
    pub low_confidence: bool,
    /// Set when fewer peaks than requested were found.
    pub incomplete: bool,
}

/// SRP `P(q) = Σ_f a_qᴴ R_x a_q / ‖a_q‖²`; picks the strongest local maxima
/// at least two grid steps apart. Ties resolve to the lowest grid index.
pub fn estimate_doa(r_x: &CovEstimate, a: &SteeringSet, num_sources: usize) -> Result<DoaEstimate> {
    if r_x.bins.len() != a.num_bins() {
        return Err(Error::Shape(
            "covariance and steering bin counts differ".into(),
        ));
    }
    let q_count = a.num_dirs();
    let power: Vec<f64> = (0..q_count)
        .map(|q| {
            (0..a.num_bins())
                .map(|k| {
                    let col = a.at(k).column(q);
                    let norm = col.norm_squared();
                    if norm == 0.0 {
                        0.0
                    } else {
                        (col.adjoint() * r_x.at(k) * col)[(0, 0)].re / norm
                    }
                })
                .sum()
        })
        .collect();
    Ok(pick_peaks(&power, a, num_sources))
}

fn pick_peaks(power: &[f64], a: &SteeringSet, num_sources: usize) -> DoaEstimate {
    let grid = &a.grid;
    let q_count = power.len();
    let step = grid.step();
    let max = power.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = power.iter().cloned().fold(f64::INFINITY, f64::min);
    let low_confidence = !(max - min > 1e-9 * max.abs().max(1e-300));

    let neighbour = 1.5 * step;
    let mut peaks: Vec<usize> = (0..q_count)
        .filter(|&q| {
            (0..q_count).all(|j| {
                j == q || grid.get(q).angle_to(&grid.get(j)) > neighbour || power[q] >= power[j]
            })
        })
        .collect();
    peaks.sort_by(|&x, &y| match power[y].partial_cmp(&power[x]) {
        Some(Ordering::Equal) | None => x.cmp(&y),
        Some(o) => o,
    });
    let min_sep = 2.0 * step - 1e-9;
    let mut chosen: Vec<usize> = Vec::new();
    for q in peaks {
        if chosen.len() == num_sources {
            break;
        }
        if chosen
            .iter()
            .all(|&c| grid.get(c).angle_to(&grid.get(q)) >= min_sep)
        {
            chosen.push(q);
        }
    }
    DoaEstimate {
        directions: chosen.iter().map(|&q| grid.get(q)).collect(),
        incomplete: chosen.len() < num_sources,
        indices: chosen,
        power: power.to_vec(),
        low_confidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::CovarianceTracker;
    use crate::grid::{DirectionGrid, FreqGrid};
    use crate::linalg::testutil::*;
    use crate::linalg::{c, ComplexVec, C64};
    use crate::scene::{build_steering_set, ArrayGeometry};
    use crate::stft::SpectralFrame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identity_covariance_gives_matched_filter() {
        let mut r = rng(30);
        let a = random_mat(&mut r, 4, 1);
        let w = lcmv_direct(&a, &ComplexMat::identity(4, 4), 0.0).unwrap();
        let expect = a.adjoint() / C64::new(a.norm_squared(), 0.0);
        assert!((w - expect).norm() < 1e-12);
    }

    #[test]
    fn distortionless_for_two_directions() {
        let mut r = rng(31);
        for _ in 0..20 {
            let a = random_mat(&mut r, 4, 2);
            let rx = random_psd(&mut r, 4);
            let w = lcmv_direct(&a, &rx, LCMV_LOADING).unwrap();
            assert!((&w * &a - ComplexMat::identity(2, 2)).norm() < 1e-8);
        }
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let mut r = rng(32);
        let col = random_mat(&mut r, 4, 1);
        let a = ComplexMat::from_fn(4, 2, |i, _| col[(i, 0)]);
        assert_eq!(
            lcmv_direct(&a, &ComplexMat::identity(4, 4), LCMV_LOADING),
            Err(Error::RankDeficient)
        );
    }

    #[test]
    fn empty_direct_set_is_plain_bsm() {
        let mut r = rng(33);
        let cb = random_mat(&mut r, 2, 4);
        let out = design_compass_bin(
            &ComplexMat::zeros(4, 0),
            &ComplexMat::zeros(0, 2),
            &ComplexMat::zeros(0, 4),
            &cb,
        );
        assert_eq!(out, cb);
    }

    #[test]
    fn single_stage_equals_two_stage() {
        let mut r = rng(34);
        for _ in 0..100 {
            let a_d = random_mat(&mut r, 4, 2);
            let h_d = random_mat(&mut r, 2, 2);
            let rx = random_psd(&mut r, 4);
            let w = lcmv_direct(&a_d, &rx, LCMV_LOADING).unwrap();
            let cb = random_mat(&mut r, 2, 4);
            let x: ComplexVec = random_mat(&mut r, 4, 1).column(0).into_owned();
            let single = design_compass_bin(&a_d, &h_d, &w, &cb) * &x;
            let s_d = &w * &x;
            let p_d = h_d.transpose() * &s_d;
            let x_r = &x - &a_d * &s_d;
            let p_r = &cb * x_r;
            let two = p_d + p_r;
            assert!((single - two).norm() < 1e-10);
        }
    }

    fn plane_wave_frames(
        a: &SteeringSet,
        q: usize,
        frames: usize,
        noise: f64,
        seed: u64,
    ) -> Vec<SpectralFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.num_mics();
        (0..frames)
            .map(|t| {
                let mut f = SpectralFrame::zeros(t, n, a.num_bins());
                for k in 0..a.num_bins() {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    let s = c(re, im);
                    for m in 0..n {
                        let nr: f64 = StandardNormal.sample(&mut rng);
                        let ni: f64 = StandardNormal.sample(&mut rng);
                        f.bin_mut(k)[m] = a.at(k)[(m, q)] * s + c(nr, ni) * noise;
                    }
                }
                f
            })
            .collect()
    }

    fn glasses_set() -> SteeringSet {
        build_steering_set(
            &ArrayGeometry::glasses(),
            &DirectionGrid::horizontal(60),
            &FreqGrid::new(48_000.0, 256),
        )
    }

    #[test]
    fn doa_single_source() {
        let a = glasses_set();
        let frames = plane_wave_frames(&a, 5, 200, 0.0, 40);
        let mut cov = CovarianceTracker::new(0.95, a.num_bins(), 4).unwrap();
        frames.iter().for_each(|f| cov.update(f));
        let est = estimate_doa(&cov.snapshot(), &a, 1).unwrap();
        assert_eq!(est.indices, vec![5]);
        assert!((est.directions[0].azimuth_deg() - 30.0).abs() < 1e-9);
        assert!(!est.low_confidence);
    }

    #[test]
    fn doa_isotropic_is_flagged() {
        let a = glasses_set();
        let cov = CovEstimate {
            bins: vec![ComplexMat::identity(4, 4); a.num_bins()],
            frames: 1,
            beta: 0.9,
        };
        let est = estimate_doa(&cov, &a, 1).unwrap();
        assert!(est.low_confidence);
        assert_eq!(est.indices, vec![0]);
    }

    #[test]
    fn doa_two_sources() {
        let a = glasses_set();
        let f1 = plane_wave_frames(&a, 0, 300, 0.0, 41);
        let f2 = plane_wave_frames(&a, 15, 300, 0.0, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut cov = CovarianceTracker::new(0.99, a.num_bins(), 4).unwrap();
        for (x, y) in f1.iter().zip(&f2) {
            let mut f = x.clone();
            for k in 0..a.num_bins() {
                for m in 0..4 {
                    let nr: f64 = StandardNormal.sample(&mut rng);
                    let ni: f64 = StandardNormal.sample(&mut rng);
                    // Unit-power sources, noise at 0 dB relative to each.
                    f.bin_mut(k)[m] += y.get(k, m) + c(nr, ni);
                }
            }
            cov.update(&f);
        }
        let est = estimate_doa(&cov.snapshot(), &a, 2).unwrap();
        let mut found: Vec<f64> = est.directions.iter().map(|d| d.azimuth_deg()).collect();
        found.sort_by(f64::total_cmp);
        assert_eq!(found.len(), 2);
        let near = |x: f64, t: f64| {
            crate::grid::circular_diff(x.to_radians(), t.to_radians()).to_degrees() <= 6.0 + 1e-9
        };
        assert!(near(found[0], 0.0) || near(found[1], 0.0), "{found:?}");
        assert!(near(found[0], 90.0) || near(found[1], 90.0), "{found:?}");
    }
}
