//! Online mixture of per-direction experts: residual losses, exponential
//! weights, filter blending, rendering and regret accounting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    check_grids, BinauralFilter, BsmOptions, CovEstimate, CovarianceTracker, Regularization,
};
use crate::fov::{
    apply_direct_gain, apply_gain_control, design_weighted_bsm, distortion_matrix, FovSpec,
};
use crate::grid::{DirectionGrid, FreqGrid};
use crate::hrtf::HrtfSet;
use crate::linalg::{hermitian_solve_general, solve_pd, trace_re, ComplexMat, ComplexVec, C64};
use crate::scene::SteeringSet;
use crate::stft::SpectralFrame;

/// Filter family used for the per-direction experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertDesign {
    /// Fixed prior concentrated on the expert's direction, diffuse elsewhere.
    BsmDirectional,
    /// Signal-dependent BSM with the direct power estimated for the expert's direction.
    Dbsm,
    /// Direct path through the expert's HRTF, residual through the BSM filter.
    Compass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertOptions {
    /// Residual BSM design used by COMPASS experts.
    #[serde(default)]
    pub bsm: BsmOptions,
    /// Noise covariance `εI` for the directional and d-BSM experts, resolved against `A R_s Aᴴ`.
    #[serde(default)]
    pub noise: Regularization,
    /// MVDR diagonal loading relative to trace(R_x)/N_m.
    #[serde(default = "default_mvdr_loading")]
    pub mvdr_loading: f64,
    /// Prior emphasis of the expert direction for the directional design.
    #[serde(default = "default_prior_peak_db")]
    pub prior_peak_db: f64,
}

/// Expert MVDR rows use heavier loading than the COMPASS LCMV: at 1e-6 the
/// small steering mismatch left by STFT framing makes them cancel their own target.
pub const EXPERT_MVDR_LOADING: f64 = 1e-2;

fn default_mvdr_loading() -> f64 {
    EXPERT_MVDR_LOADING
}

fn default_prior_peak_db() -> f64 {
    20.0
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            bsm: BsmOptions::default(),
            noise: Regularization::default(),
            mvdr_loading: default_mvdr_loading(),
            prior_peak_db: default_prior_peak_db(),
        }
    }
}

const NOISE_FLOOR: f64 = 1e-12;

/// Q per-direction experts: filters `c_q[f]` and MVDR extractors `w_q[f]`.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub grid: DirectionGrid,
    pub freqs: FreqGrid,
    steering: SteeringSet,
    /// Per bin, expert filters stacked as a 2Q×N_m matrix (rows 2q, 2q+1 are c_q).
    stacked: Vec<ComplexMat>,
    /// Per bin, Q×N_m matrix whose row q is w_q.
    extractors: Vec<ComplexMat>,
}

impl ExpertBank {
    pub fn num_experts(&self) -> usize {
        self.grid.len()
    }

    pub fn num_bins(&self) -> usize {
        self.stacked.len()
    }

    pub fn num_mics(&self) -> usize {
        self.steering.num_mics()
    }

    pub fn steering(&self) -> &SteeringSet {
        &self.steering
    }

    /// Expert `q`'s 2×N_m filter at bin `k`.
    pub fn filter_at(&self, q: usize, k: usize) -> ComplexMat {
        self.stacked[k].rows(2 * q, 2).into_owned()
    }

    pub fn filter(&self, q: usize) -> BinauralFilter {
        BinauralFilter::new((0..self.num_bins()).map(|k| self.filter_at(q, k)).collect())
            .expect("expert filters share one shape")
    }

    /// MVDR row `w_q` at bin `k`.
    pub fn extractor(&self, q: usize, k: usize) -> ComplexVec {
        self.extractors[k].row(q).transpose()
    }

    pub fn stacked(&self, k: usize) -> &ComplexMat {
        &self.stacked[k]
    }

    pub fn extractors(&self, k: usize) -> &ComplexMat {
        &self.extractors[k]
    }
}

/// MVDR rows `w_q = a_qᴴ R⁻¹ / (a_qᴴ R⁻¹ a_q)` for every column of `a`, stacked Q×N_m.
pub fn mvdr_rows(a: &ComplexMat, r_x: &ComplexMat, relative_loading: f64) -> Result<ComplexMat> {
    let n = a.nrows();
    if r_x.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "R_x is {}x{}, expected {n}x{n}",
            r_x.nrows(),
            r_x.ncols()
        )));
    }
    let load = (relative_loading * trace_re(r_x) / n as f64).max(NOISE_FLOOR);
    let mut r = r_x.clone();
    for i in 0..n {
        r[(i, i)] += load;
    }
    let y = match solve_pd(&r, a) {
        Some(y) => y,
        None => hermitian_solve_general(&r, a)?,
    };
    let mut w = y.adjoint();
    for q in 0..a.ncols() {
        let denom: C64 = (0..n).map(|m| a[(m, q)].conj() * y[(m, q)]).sum();
        if !(denom.re > 0.0) {
            return Err(Error::RankDeficient);
        }
        let scale = 1.0 / denom.re;
        w.row_mut(q).iter_mut().for_each(|v| *v *= scale);
    }
    Ok(w)
}

/// Time-invariant parts of the expert designs.
#[derive(Debug, Clone)]
pub struct ExpertContext {
    design: ExpertDesign,
    opts: ExpertOptions,
    steering: SteeringSet,
    /// HRTFs after FoV gain control.
    h_gain: HrtfSet,
    /// Distortion weights per direction.
    weights: Vec<f64>,
    /// Per bin `A D Aᴴ` and `A D conj(H̃)`.
    gram: Vec<ComplexMat>,
    cross: Vec<ComplexMat>,
    /// COMPASS: residual BSM filter and `H̃_directᵀ − c_bsm A` per bin.
    compass: Option<(BinauralFilter, Vec<ComplexMat>)>,
    /// Directional experts never change, so their stacked filters are kept.
    fixed: Option<Vec<ComplexMat>>,
}

impl ExpertContext {
    pub fn new(
        a: &SteeringSet,
        h: &HrtfSet,
        design: ExpertDesign,
        fov: Option<&FovSpec>,
        opts: &ExpertOptions,
    ) -> Result<Self> {
        check_grids(a, h)?;
        if !(opts.mvdr_loading >= 0.0 && opts.mvdr_loading.is_finite()) {
            return Err(Error::Config(format!(
                "mvdr_loading must be finite and nonnegative, got {}",
                opts.mvdr_loading
            )));
        }
        let q_count = a.num_dirs();
        let (h_gain, h_direct, weights) = match fov {
            Some(f) => {
                f.validate(&a.grid)?;
                (
                    apply_gain_control(h, f),
                    apply_direct_gain(h, f),
                    distortion_matrix(&a.grid, f),
                )
            }
            None => (h.clone(), h.clone(), vec![1.0; q_count]),
        };
        let (gram, cross): (Vec<_>, Vec<_>) = (0..a.num_bins())
            .map(|k| {
                let ak = a.at(k);
                let ad = ComplexMat::from_fn(ak.nrows(), q_count, |m, q| ak[(m, q)] * weights[q]);
                (&ad * ak.adjoint(), ad * h_gain.at(k).conjugate())
            })
            .unzip();
        let compass = if design == ExpertDesign::Compass {
            let c_bsm = design_weighted_bsm(a, &h_gain, &weights, &opts.bsm)?;
            let err = (0..a.num_bins())
                .map(|k| h_direct.at(k).transpose() - c_bsm.at(k) * a.at(k))
                .collect();
            Some((c_bsm, err))
        } else {
            None
        };
        let mut ctx = Self {
            design,
            opts: opts.clone(),
            steering: a.clone(),
            h_gain,
            weights,
            gram,
            cross,
            compass,
            fixed: None,
        };
        if design == ExpertDesign::BsmDirectional {
            let peak = 10f64.powf(ctx.opts.prior_peak_db / 10.0);
            let fixed = (0..a.num_bins())
                .into_par_iter()
                .map(|k| ctx.prior_filters(k, |_| (1.0, peak)))
                .collect::<Result<Vec<_>>>()?;
            ctx.fixed = Some(fixed);
        }
        Ok(ctx)
    }

    pub fn design(&self) -> ExpertDesign {
        self.design
    }

    /// Filters for a source prior `b·D + p·d_q e_q e_qᵀ` per expert, stacked 2Q×N_m.
    fn prior_filters(&self, k: usize, prior: impl Fn(usize) -> (f64, f64)) -> Result<ComplexMat> {
        let a = self.steering.at(k);
        let hk = self.h_gain.at(k);
        let n = a.nrows();
        let q_count = a.ncols();
        let mut out = ComplexMat::zeros(2 * q_count, n);
        for q in 0..q_count {
            let (b, p) = prior(q);
            let pd = C64::new(p * self.weights[q], 0.0);
            let col = a.column(q);
            let mut m = &self.gram[k] * C64::new(b, 0.0) + col * col.adjoint() * pd;
            let rhs = &self.cross[k] * C64::new(b, 0.0) + col * hk.row(q).conjugate() * pd;
            let e = self.opts.noise.resolve(&m) + NOISE_FLOOR;
            for i in 0..n {
                m[(i, i)] += e;
            }
            let x = match solve_pd(&m, &rhs) {
                Some(x) => x,
                None => hermitian_solve_general(&m, &rhs)?,
            };
            out.rows_mut(2 * q, 2).copy_from(&x.adjoint());
        }
        Ok(out)
    }

    /// Designs the bank for the current covariance estimate (`None` uses R_x = I).
    pub fn bank(&self, r_x: Option<&CovEstimate>) -> Result<ExpertBank> {
        let a = &self.steering;
        let n = a.num_mics();
        if let Some(r) = r_x {
            if r.bins.len() != a.num_bins() {
                return Err(Error::Shape(
                    "covariance and steering bin counts differ".into(),
                ));
            }
        }
        let identity = ComplexMat::identity(n, n);
        let per_bin = (0..a.num_bins())
            .into_par_iter()
            .map(|k| {
                let rk = r_x.map_or(&identity, |r| r.at(k));
                let ak = a.at(k);
                let w = mvdr_rows(ak, rk, self.opts.mvdr_loading)?;
                let stacked = match self.design {
                    ExpertDesign::BsmDirectional => self
                        .fixed
                        .as_ref()
                        .expect("directional filters precomputed")[k]
                        .clone(),
                    ExpertDesign::Compass => {
                        let (c_bsm, err) = self.compass.as_ref().expect("compass context present");
                        let cb = c_bsm.at(k);
                        let e = &err[k];
                        let q_count = ak.ncols();
                        let mut out = ComplexMat::zeros(2 * q_count, n);
                        for q in 0..q_count {
                            for ear in 0..2 {
                                for m in 0..n {
                                    out[(2 * q + ear, m)] = cb[(ear, m)] + e[(ear, q)] * w[(q, m)];
                                }
                            }
                        }
                        out
                    }
                    ExpertDesign::Dbsm => {
                        let nn = (n * n) as f64;
                        let powers: Vec<(f64, f64)> = (0..ak.ncols())
                            .map(|q| {
                                let wq = w.row(q);
                                let direct = (wq * rk * wq.adjoint())[(0, 0)].re.max(0.0);
                                let proj = &identity - ak.column(q) * wq;
                                let diffuse =
                                    (trace_re(&(&proj * rk * proj.adjoint())) / nn).max(0.0);
                                (diffuse, direct)
                            })
                            .collect();
                        self.prior_filters(k, |q| powers[q])?
                    }
                };
                Ok((stacked, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let (stacked, extractors) = per_bin.into_iter().unzip();
        Ok(ExpertBank {
            grid: a.grid.clone(),
            freqs: a.freqs.clone(),
            steering: a.clone(),
            stacked,
            extractors,
        })
    }
}

/// Builds the expert bank in one call; see [`ExpertContext`] for repeated redesigns.
pub fn make_expert_bank(
    a: &SteeringSet,
    h: &HrtfSet,
    design: ExpertDesign,
    fov: Option<&FovSpec>,
    r_x: Option<&CovEstimate>,
    opts: &ExpertOptions,
) -> Result<ExpertBank> {
    ExpertContext::new(a, h, design, fov, opts)?.bank(r_x)
}

/// Direct estimate, residual and loss of one expert at one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertResidual {
    pub s_hat: C64,
    pub residual: Vec<C64>,
    pub loss: f64,
}

/// `ŝ_q = w_q·x`, `r_q = x − a_q ŝ_q`, `ℓ_q = ‖r_q‖²`.
pub fn expert_residual(x: &[C64], a_q: &[C64], w_q: &[C64]) -> ExpertResidual {
    let s_hat: C64 = w_q.iter().zip(x).map(|(w, v)| w * v).sum();
    let residual: Vec<C64> = x.iter().zip(a_q).map(|(v, a)| v - a * s_hat).collect();
    let loss = residual.iter().map(|r| r.norm_sqr()).sum();
    ExpertResidual {
        s_hat,
        residual,
        loss,
    }
}

fn check_losses(losses: &[f64]) -> Result<()> {
    match losses.iter().position(|l| !(*l >= 0.0)) {
        Some(q) => Err(Error::NegativeLoss {
            expert: q,
            value: losses[q],
        }),
        None => Ok(()),
    }
}

/// `L_q ← λ·L_q + ℓ_q`. Leaves `cumulative` untouched on error.
pub fn update_losses(cumulative: &mut [f64], losses: &[f64], lambda: f64) -> Result<()> {
    if cumulative.len() != losses.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} experts",
            losses.len(),
            cumulative.len()
        )));
    }
    check_losses(losses)?;
    for (l, x) in cumulative.iter_mut().zip(losses) {
        *l = lambda * *l + x;
    }
    Ok(())
}

/// Softmax `α_q = exp(−η L_q) / Σ_j exp(−η L_j)`, shifted by min L for stability.
pub fn blend_weights(cumulative: &[f64], eta: f64) -> Vec<f64> {
    let mut out = vec![0.0; cumulative.len()];
    blend_weights_into(cumulative, eta, &mut out);
    out
}

pub fn blend_weights_into(cumulative: &[f64], eta: f64, out: &mut [f64]) {
    let min = cumulative.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(cumulative) {
        *o = (-eta * (l - min)).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// `Σ_q α_q c_q` for one bin.
pub fn blend_filters(alpha: &[f64], filters: &[ComplexMat]) -> Result<ComplexMat> {
    let first = filters
        .first()
        .ok_or_else(|| Error::Shape("no filters to blend".into()))?;
    if alpha.len() != filters.len() || filters.iter().any(|c| c.shape() != first.shape()) {
        return Err(Error::Shape("blend weights and filters disagree".into()));
    }
    let mut out = ComplexMat::zeros(first.nrows(), first.ncols());
    for (a, c) in alpha.iter().zip(filters) {
        out += c * C64::new(*a, 0.0);
    }
    Ok(out)
}

/// Blended filter of a bank at bin `k`.
pub fn blend_bank(alpha: &[f64], bank: &ExpertBank, k: usize) -> Result<ComplexMat> {
    let filters: Vec<ComplexMat> = (0..bank.num_experts())
        .map(|q| bank.filter_at(q, k))
        .collect();
    blend_filters(alpha, &filters)
}

/// Binaural output `p̂ = c·x` for one bin.
pub fn render(c: &ComplexMat, x: &[C64]) -> [C64; 2] {
    crate::filters::apply_bin(c, x)
}

/// Cumulative per-expert and mixture losses over frames.
#[derive(Debug, Clone, Default)]
pub struct RegretLedger {
    num_experts: usize,
    mixture: Vec<f64>,
    experts: Vec<Vec<f64>>,
}

/// Regret after `t` frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretPoint {
    pub t: usize,
    pub regret: f64,
    pub average: f64,
    pub best_expert: usize,
}

impl RegretLedger {
    pub fn new(num_experts: usize) -> Self {
        Self {
            num_experts,
            mixture: Vec::new(),
            experts: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.mixture.len()
    }

    pub fn record(&mut self, mixture_loss: f64, expert_losses: &[f64]) -> Result<()> {
        if expert_losses.len() != self.num_experts {
            return Err(Error::Shape(format!(
                "{} expert losses for a ledger of {}",
                expert_losses.len(),
                self.num_experts
            )));
        }
        let prev_mix = self.mixture.last().copied().unwrap_or(0.0);
        self.mixture.push(prev_mix + mixture_loss);
        let next = match self.experts.last() {
            Some(prev) => prev.iter().zip(expert_losses).map(|(p, l)| p + l).collect(),
            None => expert_losses.to_vec(),
        };
        self.experts.push(next);
        Ok(())
    }

    /// Cumulative mixture loss minus that of the best single expert over the first `t` frames.
    pub fn regret(&self, t: usize) -> Result<RegretPoint> {
        if t == 0 || t > self.frames() {
            return Err(Error::Shape(format!(
                "regret horizon {t} outside 1..={}",
                self.frames()
            )));
        }
        let cum = &self.experts[t - 1];
        let best = argmin(cum);
        let regret = self.mixture[t - 1] - cum[best];
        Ok(RegretPoint {
            t,
            regret,
            average: regret / t as f64,
            best_expert: best,
        })
    }

    pub fn cumulative_mixture(&self) -> &[f64] {
        &self.mixture
    }
}

/// How losses are aggregated over frequency before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Independent weights per frequency bin.
    PerBin,
    /// One weight vector per frame from losses summed over the pooling band.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Per-hop discount of the cumulative losses; 1 accumulates without forgetting.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Experts are redesigned every this many hops.
    #[serde(default = "default_redesign")]
    pub redesign_hops: usize,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default = "default_band")]
    pub pool_band_hz: [f64; 2],
    /// Forgetting factor of the microphone covariance used for redesigns.
    #[serde(default = "default_cov_forgetting")]
    pub cov_forgetting: f64,
    /// Divide losses by their running mean so that η is scale-free.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub experts: ExpertOptions,
}

fn default_eta() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.995
}
fn default_redesign() -> usize {
    8
}
fn default_pooling() -> Pooling {
    Pooling::PerBin
}
fn default_band() -> [f64; 2] {
    [200.0, 6000.0]
}
fn default_cov_forgetting() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            lambda: default_lambda(),
            redesign_hops: default_redesign(),
            pooling: default_pooling(),
            pool_band_hz: default_band(),
            cov_forgetting: default_cov_forgetting(),
            normalize: true,
            experts: ExpertOptions::default(),
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "moe.eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!(
                "moe.lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if self.redesign_hops == 0 {
            return Err(Error::Config("moe.redesign_hops must be at least 1".into()));
        }
        if !(self.cov_forgetting > 0.0 && self.cov_forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "moe.cov_forgetting must lie in (0, 1], got {}",
                self.cov_forgetting
            )));
        }
        let [lo, hi] = self.pool_band_hz;
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::Config(format!(
                "moe.pool_band_hz must be increasing, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Loss normalization by a running mean of the per-expert average loss.
#[derive(Debug, Clone)]
struct RunningMean {
    mean: f64,
    count: usize,
}

/// Slowest adaptation of the normalizing mean once enough frames have been seen.
const NORM_FORGETTING: f64 = 0.99;

impl RunningMean {
    fn new() -> Self {
        Self {
            mean: 0.0,
            count: 0,
        }
    }

    fn normalize(&mut self, losses: &mut [f64]) {
        let avg = losses.iter().sum::<f64>() / losses.len() as f64;
        self.count += 1;
        let rate = (1.0 / self.count as f64).max(1.0 - NORM_FORGETTING);
        self.mean += rate * (avg - self.mean);
        if self.mean > 0.0 {
            losses.iter_mut().for_each(|l| *l /= self.mean);
        } else {
            losses.iter_mut().for_each(|l| *l = 0.0);
        }
    }
}

/// Per-frame diagnostics of the frequency-pooled weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub weights: Vec<f64>,
    pub argmin: usize,
    pub losses: Vec<f64>,
}

/// Streaming mixture-of-experts renderer.
pub struct MoeProcessor {
    cfg: MoeConfig,
    context: ExpertContext,
    bank: ExpertBank,
    cov: CovarianceTracker,
    band: std::ops::Range<usize>,
    q: usize,
    /// Per-bin cumulative losses and weights (row-major, bins × Q).
    cumulative: Vec<f64>,
    weights: Vec<f64>,
    bin_norm: Vec<RunningMean>,
    pooled_cumulative: Vec<f64>,
    pooled_weights: Vec<f64>,
    pooled_norm: RunningMean,
    ledger: RegretLedger,
    frames: usize,
}

impl MoeProcessor {
    pub fn new(
        a: &SteeringSet,
        h: &HrtfSet,
        design: ExpertDesign,
        fov: Option<&FovSpec>,
        cfg: &MoeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let context = ExpertContext::new(a, h, design, fov, &cfg.experts)?;
        let bank = context.bank(None)?;
        let q = a.num_dirs();
        let bins = a.num_bins();
        let uniform = 1.0 / q as f64;
        let mut band = a.freqs.band(cfg.pool_band_hz[0], cfg.pool_band_hz[1]);
        if band.is_empty() {
            band = 0..bins;
        }
        Ok(Self {
            cfg: cfg.clone(),
            context,
            bank,
            cov: CovarianceTracker::new(cfg.cov_forgetting, bins, a.num_mics())?,
            band,
            q,
            cumulative: vec![0.0; bins * q],
            weights: vec![uniform; bins * q],
            bin_norm: (0..bins).map(|_| RunningMean::new()).collect(),
            pooled_cumulative: vec![0.0; q],
            pooled_weights: vec![uniform; q],
            pooled_norm: RunningMean::new(),
            ledger: RegretLedger::new(q),
            frames: 0,
        })
    }

    pub fn bank(&self) -> &ExpertBank {
        &self.bank
    }

    pub fn ledger(&self) -> &RegretLedger {
        &self.ledger
    }

    /// Current per-bin weights at bin `k`.
    pub fn weights_at(&self, k: usize) -> &[f64] {
        &self.weights[k * self.q..(k + 1) * self.q]
    }

    pub fn pooled_weights(&self) -> &[f64] {
        &self.pooled_weights
    }

    /// Consumes one multichannel frame and returns the two-channel rendered frame.
    pub fn process_frame(
        &mut self,
        x: &SpectralFrame,
    ) -> Result<(SpectralFrame, FrameDiagnostics)> {
        let bins = self.bank.num_bins();
        let n = self.bank.num_mics();
        if x.num_bins() != bins || x.channels() != n {
            return Err(Error::InconsistentFrames(format!(
                "frame {} has {} channels x {} bins, expected {n} x {bins}",
                x.index,
                x.channels(),
                x.num_bins()
            )));
        }
        self.cov.update(x);
        if self.frames.is_multiple_of(self.cfg.redesign_hops) {
            // Swapped in whole between frames, so rendering never sees a partial bank.
            self.bank = self.context.bank(Some(&self.cov.snapshot()))?;
        }
        let q = self.q;
        let bank = &self.bank;

        // Raw losses and every expert's output at each bin.
        let per_bin: Vec<(Vec<f64>, Vec<C64>)> = (0..bins)
            .into_par_iter()
            .map(|k| {
                let xk = x.bin(k);
                let a = bank.steering.at(k);
                let w = &bank.extractors[k];
                let c = &bank.stacked[k];
                let mut losses = vec![0.0; q];
                for (qq, l) in losses.iter_mut().enumerate() {
                    let s: C64 = (0..n).map(|m| w[(qq, m)] * xk[m]).sum();
                    *l = (0..n).map(|m| (xk[m] - a[(m, qq)] * s).norm_sqr()).sum();
                }
                let outputs: Vec<C64> = (0..2 * q)
                    .map(|r| (0..n).map(|m| c[(r, m)] * xk[m]).sum())
                    .collect();
                (losses, outputs)
            })
            .collect();

        let mut normalized: Vec<Vec<f64>> = Vec::with_capacity(bins);
        for (k, (raw, _)) in per_bin.iter().enumerate() {
            check_losses(raw)?;
            let mut l = raw.clone();
            if self.cfg.normalize {
                self.bin_norm[k].normalize(&mut l);
            }
            normalized.push(l);
        }
        let mut pooled = vec![0.0; q];
        for l in &normalized[self.band.clone()] {
            pooled.iter_mut().zip(l).for_each(|(p, v)| *p += v);
        }
        if self.cfg.normalize {
            self.pooled_norm.normalize(&mut pooled);
        }

        // Ledger uses the weights committed before this frame's losses were seen.
        let (mix, expert_totals) = match self.cfg.pooling {
            Pooling::Pooled => (dot(&self.pooled_weights, &pooled), pooled.clone()),
            Pooling::PerBin => {
                let mut totals = vec![0.0; q];
                let mut mix = 0.0;
                for (k, l) in normalized.iter().enumerate() {
                    mix += dot(&self.weights[k * q..(k + 1) * q], l);
                    totals.iter_mut().zip(l).for_each(|(t, v)| *t += v);
                }
                (mix, totals)
            }
        };
        self.ledger.record(mix, &expert_totals)?;

        let (eta, lambda) = (self.cfg.eta, self.cfg.lambda);
        update_losses(&mut self.pooled_cumulative, &pooled, lambda)?;
        blend_weights_into(&self.pooled_cumulative, eta, &mut self.pooled_weights);
        if self.cfg.pooling == Pooling::PerBin {
            for (k, l) in normalized.iter().enumerate() {
                let range = k * q..(k + 1) * q;
                update_losses(&mut self.cumulative[range.clone()], l, lambda)?;
                let (cum, w) = (&self.cumulative[range.clone()], &mut self.weights[range]);
                blend_weights_into(cum, eta, w);
            }
        }

        let mut out = SpectralFrame::zeros(x.index, 2, bins);
        for (k, (_, y)) in per_bin.iter().enumerate() {
            let alpha = match self.cfg.pooling {
                Pooling::Pooled => &self.pooled_weights[..],
                Pooling::PerBin => &self.weights[k * q..(k + 1) * q],
            };
            let o = out.bin_mut(k);
            for (qq, a) in alpha.iter().enumerate() {
                o[0] += y[2 * qq] * *a;
                o[1] += y[2 * qq + 1] * *a;
            }
        }
        self.frames += 1;
        let diag = FrameDiagnostics {
            frame: x.index,
            weights: self.pooled_weights.clone(),
            argmin: argmin(&self.pooled_cumulative),
            losses: pooled,
        };
        Ok((out, diag))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output of a full mixture-of-experts pass.
#[derive(Debug, Clone)]
pub struct MoeRun {
    pub frames: Vec<SpectralFrame>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub ledger: RegretLedger,
}

/// Runs the mixture renderer over a whole recording.
pub fn process_moe(
    frames: &[SpectralFrame],
    a: &SteeringSet,
    h: &HrtfSet,
    design: ExpertDesign,
    fov: Option<&FovSpec>,
    cfg: &MoeConfig,
) -> Result<MoeRun> {
    let mut p = MoeProcessor::new(a, h, design, fov, cfg)?;
    let mut out = Vec::with_capacity(frames.len());
    let mut diagnostics = Vec::with_capacity(frames.len());
    for f in frames {
        let (o, d) = p.process_frame(f)?;
        out.push(o);
        diagnostics.push(d);
    }
    Ok(MoeRun {
        frames: out,
        diagnostics,
        ledger: p.ledger,
    })
}
