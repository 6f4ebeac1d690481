//! End-to-end processing: simulate a scene, render it with each method, and
//! evaluate against the HRTF reference.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    itd_ild_error, reference_render, summarize_cues, tracking_report, BinauralTrack, CueError,
    CueSummary, DiagnosticsRow, TrackingReport, TruthRow, VOICED_DBFS,
};
use crate::filters::{
    direct_then_rest, estimate_doa, lcmv_direct, BinauralFilter, BsmOptions, CovarianceTracker,
    SourceCovTracker,
};
use crate::fov::{
    apply_direct_gain, apply_gain_control, design_weighted_bsm, design_weighted_dbsm,
    distortion_matrix, FovSpec,
};
use crate::grid::DirectionGrid;
use crate::hrtf::{load_hrtf_grid, sphere_hrtf_set, HrtfSet, SphereHeadParams};
use crate::linalg::{ComplexMat, ComplexVec, C64};
use crate::moe::{process_moe, ExpertDesign, FrameDiagnostics, MoeConfig, RegretLedger};
use crate::scene::{
    build_steering_set, simulate_shoebox, ArrayGeometry, SceneConfig, SceneOutput, SteeringSet,
};
use crate::signal::speech_like;
use crate::stft::{analyze, synthesize, SpectralFrame, StftConfig};

/// Rendering method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bsm,
    Compass,
    Dbsm,
    MoeBsm,
    MoeDbsm,
    MoeCompass,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Bsm,
        Method::Compass,
        Method::Dbsm,
        Method::MoeBsm,
        Method::MoeDbsm,
        Method::MoeCompass,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bsm => "bsm",
            Method::Compass => "compass",
            Method::Dbsm => "dbsm",
            Method::MoeBsm => "moe-bsm",
            Method::MoeDbsm => "moe-dbsm",
            Method::MoeCompass => "moe-compass",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn expert_design(&self) -> Option<ExpertDesign> {
        match self {
            Method::MoeBsm => Some(ExpertDesign::BsmDirectional),
            Method::MoeDbsm => Some(ExpertDesign::Dbsm),
            Method::MoeCompass => Some(ExpertDesign::Compass),
            _ => None,
        }
    }
}

/// Settings of the non-mixture signal-dependent methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Number of direct sources sought by the DOA stage.
    #[serde(default = "one")]
    pub num_sources: usize,
    #[serde(default = "default_redesign")]
    pub redesign_hops: usize,
    #[serde(default = "default_cov")]
    pub cov_forgetting: f64,
    #[serde(default)]
    pub bsm: BsmOptions,
}

fn one() -> usize {
    1
}
fn default_redesign() -> usize {
    8
}
fn default_cov() -> f64 {
    0.9
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            num_sources: 1,
            redesign_hops: 8,
            cov_forgetting: 0.9,
            bsm: BsmOptions::default(),
        }
    }
}

/// Output of one method over a recording.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub method: Method,
    pub frames: Vec<SpectralFrame>,
    pub diagnostics: Option<Vec<FrameDiagnostics>>,
    pub ledger: Option<RegretLedger>,
}

fn apply_static(filter: &BinauralFilter, frames: &[SpectralFrame]) -> Vec<SpectralFrame> {
    frames
        .iter()
        .map(|x| {
            let mut o = SpectralFrame::zeros(x.index, 2, x.num_bins());
            for k in 0..x.num_bins() {
                let y = filter.apply(k, x.bin(k));
                o.bin_mut(k).copy_from_slice(&y);
            }
            o
        })
        .collect()
}

fn check_frames(frames: &[SpectralFrame], a: &SteeringSet) -> Result<()> {
    if let Some(f) = frames
        .iter()
        .find(|f| f.channels() != a.num_mics() || f.num_bins() != a.num_bins())
    {
        return Err(Error::InconsistentFrames(format!(
            "frame {} has {} channels x {} bins, expected {} x {}",
            f.index,
            f.channels(),
            f.num_bins(),
            a.num_mics(),
            a.num_bins()
        )));
    }
    Ok(())
}

/// Renders microphone STFT frames to two-channel frames with `method`.
pub fn process(
    method: Method,
    frames: &[SpectralFrame],
    a: &SteeringSet,
    h: &HrtfSet,
    fov: Option<&FovSpec>,
    moe: &MoeConfig,
    adaptive: &AdaptiveConfig,
) -> Result<MethodOutput> {
    check_frames(frames, a)?;
    if let Some(f) = fov {
        f.validate(&a.grid)?;
    }
    let weights = fov.map_or_else(
        || vec![1.0; a.num_dirs()],
        |f| distortion_matrix(&a.grid, f),
    );
    let h_gain = fov.map_or_else(|| h.clone(), |f| apply_gain_control(h, f));
    let out = |frames, diagnostics, ledger| MethodOutput {
        method,
        frames,
        diagnostics,
        ledger,
    };
    match method {
        Method::Bsm => {
            let c = design_weighted_bsm(a, &h_gain, &weights, &adaptive.bsm)?;
            Ok(out(apply_static(&c, frames), None, None))
        }
        Method::Compass => {
            let h_direct = fov.map_or_else(|| h.clone(), |f| apply_direct_gain(h, f));
            let c_bsm = design_weighted_bsm(a, &h_gain, &weights, &adaptive.bsm)?;
            Ok(out(
                compass_stream(frames, a, &h_direct, &c_bsm, adaptive)?,
                None,
                None,
            ))
        }
        Method::Dbsm => Ok(out(
            dbsm_stream(frames, a, &h_gain, &weights, moe, adaptive)?,
            None,
            None,
        )),
        _ => {
            let design = method
                .expert_design()
                .expect("mixture methods carry an expert design");
            let run = process_moe(frames, a, h, design, fov, moe)?;
            Ok(out(run.frames, Some(run.diagnostics), Some(run.ledger)))
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = self;
        if cfg.redesign_hops == 0 {
            return Err(Error::Config(
                "adaptive.redesign_hops must be at least 1".into(),
            ));
        }
        if cfg.num_sources == 0 {
            return Err(Error::Config(
                "adaptive.num_sources must be at least 1".into(),
            ));
        }
        if !(cfg.cov_forgetting > 0.0 && cfg.cov_forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "adaptive.cov_forgetting must lie in (0, 1], got {}",
                cfg.cov_forgetting
            )));
        }
        Ok(())
    }
}

/// COMPASS with DOA and LCMV redesigned every `redesign_hops` frames.
fn compass_stream(
    frames: &[SpectralFrame],
    a: &SteeringSet,
    h_direct: &HrtfSet,
    c_bsm: &BinauralFilter,
    cfg: &AdaptiveConfig,
) -> Result<Vec<SpectralFrame>> {
    cfg.validate()?;
    let mut cov = CovarianceTracker::new(cfg.cov_forgetting, a.num_bins(), a.num_mics())?;
    let mut filter = c_bsm.clone();
    let mut out = Vec::with_capacity(frames.len());
    for (t, x) in frames.iter().enumerate() {
        cov.update(x);
        if t % cfg.redesign_hops == 0 {
            let snap = cov.snapshot();
            let doa = estimate_doa(&snap, a, cfg.num_sources)?;
            let bins = (0..a.num_bins())
                .map(|k| {
                    let a_d = a.at(k).select_columns(&doa.indices);
                    let h_d = h_direct.at(k).select_rows(&doa.indices);
                    match lcmv_direct(&a_d, snap.at(k), crate::filters::LCMV_LOADING) {
                        Ok(w) => crate::filters::design_compass_bin(&a_d, &h_d, &w, c_bsm.at(k)),
                        // Degenerate bins (e.g. DC, where all steering vectors coincide) keep the BSM filter.
                        Err(_) => c_bsm.at(k).clone(),
                    }
                })
                .collect();
            filter = BinauralFilter::new(bins)?;
        }
        out.push(apply_static(&filter, std::slice::from_ref(x)).remove(0));
    }
    Ok(out)
}

/// d-BSM with the source covariance tracked from LCMV direct estimates.
fn dbsm_stream(
    frames: &[SpectralFrame],
    a: &SteeringSet,
    h_gain: &HrtfSet,
    weights: &[f64],
    moe: &MoeConfig,
    cfg: &AdaptiveConfig,
) -> Result<Vec<SpectralFrame>> {
    cfg.validate()?;
    let bins = a.num_bins();
    let d = cfg.num_sources;
    let mut cov = CovarianceTracker::new(cfg.cov_forgetting, bins, a.num_mics())?;
    let mut src = SourceCovTracker::new(cfg.cov_forgetting, bins, d)?;
    let mut extract: Vec<Option<ComplexMat>> = vec![None; bins];
    let mut detected: Vec<usize> = Vec::new();
    let mut filter = design_weighted_bsm(a, h_gain, weights, &cfg.bsm)?;
    let mut out = Vec::with_capacity(frames.len());
    for (t, x) in frames.iter().enumerate() {
        cov.update(x);
        if t % cfg.redesign_hops == 0 {
            let snap = cov.snapshot();
            let doa = estimate_doa(&snap, a, d)?;
            if doa.indices.len() == d {
                detected = doa.indices.clone();
                for (k, e) in extract.iter_mut().enumerate() {
                    *e = lcmv_direct(
                        &a.at(k).select_columns(&detected),
                        snap.at(k),
                        crate::filters::LCMV_LOADING,
                    )
                    .ok();
                }
            }
        }
        if detected.len() == d {
            let mut s_d = Vec::with_capacity(bins);
            let mut resid = Vec::with_capacity(bins);
            for k in 0..bins {
                let xk = x.bin_vec(k);
                match &extract[k] {
                    Some(w) => {
                        let s = w * &xk;
                        let r = &xk - a.at(k).select_columns(&detected) * &s;
                        s_d.push(s);
                        resid.push(r);
                    }
                    None => {
                        s_d.push(ComplexVec::zeros(d));
                        resid.push(xk);
                    }
                }
            }
            src.update(&s_d, &resid)?;
            if t % cfg.redesign_hops == 0 {
                let order = direct_then_rest(a.num_dirs(), &detected);
                let w_ord: Vec<f64> = order.iter().map(|&q| weights[q]).collect();
                filter = design_weighted_dbsm(
                    &a.select(&order),
                    &h_gain.select(&order),
                    &src.estimate(),
                    moe.experts.noise,
                    &w_ord,
                )?;
            }
        }
        out.push(apply_static(&filter, std::slice::from_ref(x)).remove(0));
    }
    Ok(out)
}

/// Where the HRTFs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HrtfSource {
    Sphere {
        #[serde(default)]
        params: SphereHeadParams,
    },
    File {
        path: PathBuf,
    },
}

impl Default for HrtfSource {
    fn default() -> Self {
        HrtfSource::Sphere {
            params: SphereHeadParams::default(),
        }
    }
}

/// Direction grid, array and HRTF settings shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupConfig {
    /// Number of equally spaced horizontal directions.
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default = "ArrayGeometry::glasses")]
    pub array: ArrayGeometry,
    #[serde(default)]
    pub hrtf: HrtfSource,
}

fn default_grid() -> usize {
    60
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            grid_size: 60,
            array: ArrayGeometry::glasses(),
            hrtf: HrtfSource::default(),
        }
    }
}

/// Steering and HRTF sets on a common grid.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: DirectionGrid,
    pub steering: SteeringSet,
    pub hrtf: HrtfSet,
}

impl SetupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::Config("setup.grid_size must be at least 1".into()));
        }
        self.array.validate()?;
        if let HrtfSource::Sphere { params } = &self.hrtf {
            params.validate()?;
        }
        Ok(())
    }

    pub fn build(&self, stft: &StftConfig) -> Result<Setup> {
        self.validate()?;
        let grid = DirectionGrid::horizontal(self.grid_size);
        let freqs = stft.freq_grid();
        let steering = build_steering_set(&self.array, &grid, &freqs);
        let hrtf = match &self.hrtf {
            HrtfSource::Sphere { params } => sphere_hrtf_set(params, &grid, &freqs)?,
            HrtfSource::File { path } => load_hrtf_grid(path, &grid, &freqs)?,
        };
        Ok(Setup {
            grid,
            steering,
            hrtf,
        })
    }
}

/// Scene plus per-method renders and metrics.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub scene: SceneOutput,
    pub truth: Vec<TruthRow>,
    pub reference: BinauralTrack,
    pub methods: Vec<MethodResult>,
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub track: BinauralTrack,
    pub cues: Vec<CueError>,
    pub cue_summary: CueSummary,
    pub diagnostics: Option<Vec<FrameDiagnostics>>,
    pub ledger: Option<RegretLedger>,
    pub tracking: Option<TrackingReport>,
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
    #[serde(default = "default_tol")]
    pub tolerance_deg: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in_s: f64,
    #[serde(default = "default_voiced")]
    pub voiced_dbfs: f64,
}

fn default_frame_ms() -> f64 {
    20.0
}
fn default_tol() -> f64 {
    12.0
}
fn default_burn_in() -> f64 {
    0.5
}
fn default_voiced() -> f64 {
    VOICED_DBFS
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_ms > 0.0) {
            return Err(Error::Config(format!(
                "eval.frame_ms must be positive, got {}",
                self.frame_ms
            )));
        }
        if !(self.tolerance_deg >= 0.0) {
            return Err(Error::Config(format!(
                "eval.tolerance_deg must be >= 0, got {}",
                self.tolerance_deg
            )));
        }
        if !(self.burn_in_s >= 0.0) {
            return Err(Error::Config(format!(
                "eval.burn_in_s must be >= 0, got {}",
                self.burn_in_s
            )));
        }
        if !self.voiced_dbfs.is_finite() {
            return Err(Error::Config("eval.voiced_dbfs must be finite".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_ms: 20.0,
            tolerance_deg: 12.0,
            burn_in_s: 0.5,
            voiced_dbfs: VOICED_DBFS,
        }
    }
}

pub fn diagnostics_rows(diags: &[FrameDiagnostics], grid: &DirectionGrid) -> Vec<DiagnosticsRow> {
    diags
        .iter()
        .map(|d| DiagnosticsRow {
            frame: d.frame,
            argmin: d.argmin,
            argmin_az_deg: grid.get(d.argmin).azimuth_deg(),
            weights: d.weights.clone(),
            losses: d.losses.clone(),
        })
        .collect()
}

/// Everything needed to run the simulated experiment.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub scene: &'a SceneConfig,
    pub stft: &'a StftConfig,
    pub setup: &'a Setup,
    pub array: &'a ArrayGeometry,
    pub methods: &'a [Method],
    pub moe: &'a MoeConfig,
    pub adaptive: &'a AdaptiveConfig,
    pub fov: Option<&'a FovSpec>,
    pub eval: &'a EvalConfig,
    pub seed: u64,
}

/// The bundled test source: a speech-like signal covering the whole trajectory.
pub fn bundled_source(scene: &SceneConfig, seed: u64) -> Vec<f64> {
    let samples = (scene.trajectory.duration() * scene.sample_rate)
        .round()
        .max((scene.step_samples() * scene.trajectory.num_steps) as f64);
    speech_like(
        samples / scene.sample_rate + 0.5 / scene.sample_rate,
        scene.sample_rate,
        seed,
    )
}

fn track_from(mut y: Vec<Vec<f64>>, sample_rate: f64) -> Result<BinauralTrack> {
    let right = y.pop().unwrap_or_default();
    let left = y.pop().unwrap_or_default();
    BinauralTrack::new(left, right, sample_rate)
}

impl Experiment<'_> {
    /// Simulates the scene from `source`, renders each method and evaluates it.
    pub fn run(&self, source: &[f64]) -> Result<ExperimentResult> {
        let mut timings = Vec::new();
        let mut clock = Instant::now();
        let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
            timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
            clock = Instant::now();
        };
        if self.stft.sample_rate != self.scene.sample_rate {
            return Err(Error::Config(format!(
                "stft.sample_rate {} differs from scene.sample_rate {}",
                self.stft.sample_rate, self.scene.sample_rate
            )));
        }
        let scene = simulate_shoebox(self.scene, self.array, source, self.seed)?;
        lap("simulate", &mut timings);
        let frames = analyze(&scene.mics, self.stft)?;
        let truth_frames = scene.truth_per_frame(self.stft);
        let truth: Vec<TruthRow> = truth_frames.iter().map(TruthRow::from).collect();
        let directions: Vec<_> = truth_frames.iter().map(|t| t.direction).collect();
        let reference = reference_render(
            &scene.direct_reference,
            &directions,
            &self.setup.hrtf,
            self.stft,
        )?;
        lap("reference", &mut timings);

        let frame_len = (self.eval.frame_ms * 1e-3 * self.scene.sample_rate).round() as usize;
        let burn_in =
            (self.eval.burn_in_s * self.scene.sample_rate / self.stft.hop as f64).ceil() as usize;
        let cue_from = (self.eval.burn_in_s * 1e3 / (0.5 * self.eval.frame_ms)).ceil() as usize;
        let mut methods = Vec::with_capacity(self.methods.len());
        for &m in self.methods {
            let out = process(
                m,
                &frames,
                &self.setup.steering,
                &self.setup.hrtf,
                self.fov,
                self.moe,
                self.adaptive,
            )?;
            let track = track_from(synthesize(&out.frames, self.stft)?, self.scene.sample_rate)?;
            let cues = itd_ild_error(&track, &reference, frame_len)?;
            let tracking = match &out.diagnostics {
                Some(d) => Some(tracking_report(
                    &diagnostics_rows(d, &self.setup.grid),
                    &truth,
                    self.eval.tolerance_deg,
                    self.eval.voiced_dbfs,
                    burn_in,
                )?),
                None => None,
            };
            methods.push(MethodResult {
                method: m,
                cue_summary: summarize_cues(&cues, cue_from),
                track,
                cues,
                diagnostics: out.diagnostics,
                ledger: out.ledger,
                tracking,
            });
            lap(m.name(), &mut timings);
        }
        Ok(ExperimentResult {
            scene,
            truth,
            reference,
            methods,
            timings,
        })
    }
}

/// Builds a frame from per-bin channel vectors.
pub fn frame_from_bins(index: usize, bins: &[Vec<C64>]) -> SpectralFrame {
    let channels = bins.first().map_or(0, |b| b.len());
    let mut f = SpectralFrame::zeros(index, channels, bins.len());
    for (k, b) in bins.iter().enumerate() {
        f.bin_mut(k).copy_from_slice(b);
    }
    f
}
