//! Free-field steering, shoebox image-source reverberation and the moving
//! talker simulation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Direction, DirectionGrid, FreqGrid};
use crate::linalg::{ComplexMat, ComplexVec, C64};
use crate::stft::StftConfig;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width, in samples, of the windowed-sinc fractional delay kernel.
const SINC_HALF_WIDTH: i64 = 40;
/// Linear crossfade between consecutive trajectory steps.
const CROSSFADE_SECONDS: f64 = 0.010;

/// Microphone positions in array coordinates (meters). Steering phases are
/// referenced to the centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::glasses()
    }
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>) -> Result<Self> {
        let g = Self { mic_positions };
        g.validate()?;
        Ok(g)
    }

    /// Four microphones on the corners of a horizontal 0.05 m (front-back,
    /// x) by 0.15 m (left-right, y) rectangle.
    pub fn glasses() -> Self {
        Self {
            mic_positions: vec![
                [0.025, 0.075, 0.0],
                [0.025, -0.075, 0.0],
                [-0.025, 0.075, 0.0],
                [-0.025, -0.075, 0.0],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mic_positions.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "array needs at least 2 microphones, got {n}"
            )));
        }
        let mut aperture: f64 = 0.0;
        for i in 0..n {
            if self.mic_positions[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "microphone {i} has a non-finite position"
                )));
            }
            for j in (i + 1)..n {
                let d = dist(&self.mic_positions[i], &self.mic_positions[j]);
                if d < 1e-6 {
                    return Err(Error::Config(format!("microphones {i} and {j} coincide")));
                }
                aperture = aperture.max(d);
            }
        }
        if aperture >= 1.0 {
            return Err(Error::Config(format!(
                "array aperture {aperture:.3} m must be < 1 m"
            )));
        }
        Ok(())
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.mic_positions.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for i in 0..3 {
                c[i] += p[i] / n;
            }
        }
        c
    }

    /// Positions relative to the centroid.
    pub fn relative_positions(&self) -> Vec<[f64; 3]> {
        let c = self.centroid();
        self.mic_positions
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect()
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Far-field plane-wave response of the array for one direction, per bin.
pub fn steering_vector(geom: &ArrayGeometry, dir: &Direction, freqs: &FreqGrid) -> Vec<ComplexVec> {
    let u = dir.unit_vector();
    let delays: Vec<f64> = geom
        .relative_positions()
        .iter()
        .map(|r| -(u[0] * r[0] + u[1] * r[1] + u[2] * r[2]) / SPEED_OF_SOUND)
        .collect();
    freqs
        .bins()
        .iter()
        .map(|&f| {
            ComplexVec::from_iterator(
                delays.len(),
                delays
                    .iter()
                    .map(|&tau| C64::from_polar(1.0, -2.0 * PI * f * tau)),
            )
        })
        .collect()
}

/// Frequency-indexed steering matrices `A[f]` (N_m × Q) over a direction grid.
#[derive(Debug, Clone)]
pub struct SteeringSet {
    pub grid: DirectionGrid,
    pub freqs: FreqGrid,
    matrices: Vec<ComplexMat>,
}

impl SteeringSet {
    pub fn from_matrices(
        grid: DirectionGrid,
        freqs: FreqGrid,
        matrices: Vec<ComplexMat>,
    ) -> Result<Self> {
        if matrices.len() != freqs.num_bins() {
            return Err(Error::Shape(format!(
                "steering set has {} bins, frequency grid {}",
                matrices.len(),
                freqs.num_bins()
            )));
        }
        let rows = matrices.first().map_or(0, |m| m.nrows());
        if matrices
            .iter()
            .any(|m| m.ncols() != grid.len() || m.nrows() != rows)
        {
            return Err(Error::Shape("steering matrices must all be N_m x Q".into()));
        }
        Ok(Self {
            grid,
            freqs,
            matrices,
        })
    }

    pub fn num_mics(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn num_dirs(&self) -> usize {
        self.grid.len()
    }

    pub fn num_bins(&self) -> usize {
        self.matrices.len()
    }

    pub fn at(&self, k: usize) -> &ComplexMat {
        &self.matrices[k]
    }

    pub fn matrices(&self) -> &[ComplexMat] {
        &self.matrices
    }

    pub fn column(&self, k: usize, q: usize) -> ComplexVec {
        self.matrices[k].column(q).into_owned()
    }

    /// Steering set restricted to the given grid indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            grid: self.grid.subset(indices),
            freqs: self.freqs.clone(),
            matrices: self
                .matrices
                .iter()
                .map(|m| m.select_columns(indices))
                .collect(),
        }
    }
}

pub fn build_steering_set(
    geom: &ArrayGeometry,
    grid: &DirectionGrid,
    freqs: &FreqGrid,
) -> SteeringSet {
    let n = geom.num_mics();
    let columns: Vec<Vec<ComplexVec>> = grid
        .iter()
        .map(|d| steering_vector(geom, d, freqs))
        .collect();
    let matrices = (0..freqs.num_bins())
        .map(|k| ComplexMat::from_fn(n, grid.len(), |m, q| columns[q][k][m]))
        .collect();
    SteeringSet {
        grid: grid.clone(),
        freqs: freqs.clone(),
        matrices,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    #[default]
    Ccw,
    Cw,
}

/// Stepwise circular motion around the array centre at constant radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub start_position: [f64; 3],
    pub azimuth_step_deg: f64,
    pub step_duration: f64,
    pub num_steps: usize,
    #[serde(default)]
    pub sense: Sense,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        SceneConfig::moving_talker().trajectory
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig::moving_talker()
    }
}

impl TrajectoryConfig {
    pub fn static_at(position: [f64; 3], duration: f64) -> Self {
        Self {
            start_position: position,
            azimuth_step_deg: 0.0,
            step_duration: duration,
            num_steps: 1,
            sense: Sense::Ccw,
        }
    }

    pub fn duration(&self) -> f64 {
        self.step_duration * self.num_steps as f64
    }

    fn signed_step(&self) -> f64 {
        let s = self.azimuth_step_deg.to_radians();
        match self.sense {
            Sense::Ccw => s,
            Sense::Cw => -s,
        }
    }

    /// Horizontal radius from the array centre.
    pub fn radius(&self, center: &[f64; 3]) -> f64 {
        let p = &self.start_position;
        ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt()
    }

    /// Tangential speed in m/s.
    pub fn speed(&self, center: &[f64; 3]) -> f64 {
        self.radius(center) * self.azimuth_step_deg.to_radians().abs() / self.step_duration
    }

    pub fn position(&self, center: &[f64; 3], step: usize) -> [f64; 3] {
        let p = &self.start_position;
        let r = self.radius(center);
        let az0 = (p[1] - center[1]).atan2(p[0] - center[0]);
        let az = az0 + self.signed_step() * step as f64;
        [center[0] + r * az.cos(), center[1] + r * az.sin(), p[2]]
    }

    /// Direction of step `step` as seen from the array centre.
    pub fn direction(&self, center: &[f64; 3], step: usize) -> Direction {
        let p = self.position(center, step);
        Direction::from_vector([p[0] - center[0], p[1] - center[1], p[2] - center[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub room_dims: [f64; 3],
    /// Target reverberation time in seconds; 0 renders an anechoic scene.
    pub rt60_target: f64,
    pub array_center: [f64; 3],
    pub trajectory: TrajectoryConfig,
    /// Sensor noise level in dB relative to the direct-path source RMS at the array centre.
    #[serde(default = "default_noise_db")]
    pub noise_level_db: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_max_order")]
    pub max_image_order: usize,
}

fn default_noise_db() -> f64 {
    -40.0
}
fn default_sample_rate() -> f64 {
    48_000.0
}
fn default_max_order() -> usize {
    20
}

impl SceneConfig {
    /// Moving talker: 8x8x5 m room, RT60 0.2 s, array at [4,4,2], source from
    /// [7,4,2] in 6 degree counter-clockwise steps of 167 ms.
    pub fn moving_talker() -> Self {
        Self {
            room_dims: [8.0, 8.0, 5.0],
            rt60_target: 0.2,
            array_center: [4.0, 4.0, 2.0],
            trajectory: TrajectoryConfig {
                start_position: [7.0, 4.0, 2.0],
                azimuth_step_deg: 6.0,
                step_duration: 0.167,
                num_steps: 60,
                sense: Sense::Ccw,
            },
            noise_level_db: -40.0,
            sample_rate: 48_000.0,
            max_image_order: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("scene.room_dims must be positive".into()));
        }
        if !(self.rt60_target >= 0.0) {
            return Err(Error::Config("scene.rt60_target must be >= 0".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Config("scene.sample_rate must be positive".into()));
        }
        if !(self.trajectory.step_duration > 0.0) {
            return Err(Error::Config(
                "scene.trajectory.step_duration must be > 0".into(),
            ));
        }
        if self.trajectory.num_steps == 0 {
            return Err(Error::Config(
                "scene.trajectory.num_steps must be >= 1".into(),
            ));
        }
        if !inside(&self.room_dims, &self.array_center) {
            return Err(Error::Config(
                "scene.array_center lies outside the room".into(),
            ));
        }
        if !inside(&self.room_dims, &self.trajectory.start_position) {
            return Err(Error::SourceOutsideRoom(self.trajectory.start_position));
        }
        for step in 0..self.trajectory.num_steps {
            let p = self.trajectory.position(&self.array_center, step);
            if !inside(&self.room_dims, &p) {
                return Err(Error::TrajectoryExitsRoom { step, position: p });
            }
        }
        Ok(())
    }

    pub fn step_samples(&self) -> usize {
        (self.trajectory.step_duration * self.sample_rate).round() as usize
    }

    pub fn source_distance(&self) -> f64 {
        dist(&self.trajectory.start_position, &self.array_center)
    }
}

fn inside(room: &[f64; 3], p: &[f64; 3]) -> bool {
    (0..3).all(|i| p[i] > 0.0 && p[i] < room[i])
}

/// Sabine estimate of the uniform energy absorption coefficient.
pub fn sabine_absorption(room: &[f64; 3], rt60: f64) -> f64 {
    let [lx, ly, lz] = *room;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    (0.161 * volume / (surface * rt60)).min(1.0)
}

/// Shoebox image-source impulse response between `src` and `mic` (room
/// coordinates), with uniform pressure reflection coefficient `beta`. Each
/// image contributes `beta^reflections / distance` at delay `distance / c`.
pub fn image_source_rir(
    room: &[f64; 3],
    src: &[f64; 3],
    mic: &[f64; 3],
    sample_rate: f64,
    beta: f64,
    max_order: usize,
    len: usize,
) -> Vec<f64> {
    let mut h = vec![0.0; len];
    let max_dist = len as f64 / sample_rate * SPEED_OF_SOUND;
    let order = if beta > 0.0 { max_order as i64 } else { 0 };
    let mut images: Vec<(f64, f64)> = Vec::new();
    // Fewest wall hits an image index can have along one axis.
    let min_hits = |n: i64| (2 * n.abs() - 1).max(0);
    for nx in -order..=order {
        for ny in -order..=order {
            if min_hits(nx) + min_hits(ny) > order {
                continue;
            }
            for nz in -order..=order {
                if min_hits(nx) + min_hits(ny) + min_hits(nz) > order {
                    continue;
                }
                for px in 0..2i64 {
                    for py in 0..2i64 {
                        for pz in 0..2i64 {
                            let refl = (nx - px).abs()
                                + nx.abs()
                                + (ny - py).abs()
                                + ny.abs()
                                + (nz - pz).abs()
                                + nz.abs();
                            if refl > order {
                                continue;
                            }
                            let img = [
                                (1 - 2 * px) as f64 * src[0] + 2.0 * nx as f64 * room[0],
                                (1 - 2 * py) as f64 * src[1] + 2.0 * ny as f64 * room[1],
                                (1 - 2 * pz) as f64 * src[2] + 2.0 * nz as f64 * room[2],
                            ];
                            let d = dist(&img, mic);
                            if d > max_dist {
                                continue;
                            }
                            let gain = if refl == 0 {
                                1.0
                            } else {
                                beta.powi(refl as i32)
                            } / d;
                            images.push((d / SPEED_OF_SOUND * sample_rate, gain));
                        }
                    }
                }
            }
        }
    }
    // Fixed summation order keeps the result independent of enumeration details.
    images.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (delay, gain) in images {
        add_fractional_impulse(&mut h, delay, gain);
    }
    h
}

fn add_fractional_impulse(h: &mut [f64], delay: f64, gain: f64) {
    let center = delay.round() as i64;
    let frac = delay - center as f64;
    if frac.abs() < 1e-12 {
        if let Some(v) = h.get_mut(center as usize) {
            *v += gain;
        }
        return;
    }
    let width = SINC_HALF_WIDTH as f64 + 1.0;
    for n in (center - SINC_HALF_WIDTH)..=(center + SINC_HALF_WIDTH) {
        if n < 0 || n as usize >= h.len() {
            continue;
        }
        let x = n as f64 - delay;
        let sinc = (PI * x).sin() / (PI * x);
        let win = 0.5 + 0.5 * (PI * x / width).cos();
        h[n as usize] += gain * sinc * win;
    }
}

/// Linear convolution via FFT; output length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<C64> = a.iter().map(|&v| C64::new(v, 0.0)).collect();
    fa.resize(n, C64::new(0.0, 0.0));
    let mut fb: Vec<C64> = b.iter().map(|&v| C64::new(v, 0.0)).collect();
    fb.resize(n, C64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.truncate(out_len);
    fa.into_iter().map(|z| z.re / n as f64).collect()
}

/// Schroeder backward-integration RT60 from a -5 to -25 dB line fit, extrapolated to 60 dB.
pub fn measure_rt60(rir: &[f64], sample_rate: f64) -> Result<f64> {
    let total: f64 = rir.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::DecayTooShort);
    }
    let mut edc = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for i in (0..rir.len()).rev() {
        acc += rir[i] * rir[i];
        edc[i] = acc;
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &e) in edc.iter().enumerate() {
        if e <= 0.0 {
            break;
        }
        let db = 10.0 * (e / total).log10();
        if db > -5.0 {
            continue;
        }
        if db < -25.0 {
            break;
        }
        let t = i as f64 / sample_rate;
        n += 1.0;
        sx += t;
        sy += db;
        sxx += t * t;
        sxy += t * db;
    }
    let reaches = edc
        .iter()
        .any(|&e| e > 0.0 && 10.0 * (e / total).log10() < -25.0);
    if n < 10.0 || !reaches {
        return Err(Error::DecayTooShort);
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if !(slope < 0.0) {
        return Err(Error::DecayTooShort);
    }
    Ok(-60.0 / slope)
}

/// Result of a simulated recording.
#[derive(Debug, Clone)]
pub struct SceneOutput {
    /// One channel per microphone.
    pub mics: Vec<Vec<f64>>,
    /// Source signal as it arrives at the array centre over the direct path
    /// (delayed by distance/c and scaled by 1/distance).
    pub direct_reference: Vec<f64>,
    /// Source direction per trajectory step, seen from the array centre.
    pub step_directions: Vec<Direction>,
    pub step_samples: usize,
    pub propagation_delay: f64,
    pub sample_rate: f64,
    /// Uniform pressure reflection coefficient used for the walls.
    pub reflection: f64,
    pub noise_rms: f64,
}

/// Per-frame ground truth derived from a simulated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthFrame {
    pub frame: usize,
    pub direction: Direction,
    /// Source level inside the frame (dBFS of the direct-path reference).
    pub source_dbfs: f64,
}

impl SceneOutput {
    /// Index of the trajectory step that emitted the sound reaching the array at `sample`.
    pub fn step_at(&self, sample: f64) -> usize {
        let emitted = sample - self.propagation_delay * self.sample_rate;
        let step = (emitted.max(0.0) / self.step_samples as f64).floor() as usize;
        step.min(self.step_directions.len() - 1)
    }

    pub fn truth_per_frame(&self, stft: &StftConfig) -> Vec<TruthFrame> {
        let frames = stft.num_frames(self.mics.first().map_or(0, |m| m.len()));
        (0..frames)
            .map(|t| {
                let center = (t * stft.hop) as f64 + stft.fft_size as f64 / 2.0;
                let seg = &self.direct_reference[t * stft.hop..t * stft.hop + stft.fft_size];
                let ms = seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64;
                TruthFrame {
                    frame: t,
                    direction: self.step_directions[self.step_at(center)],
                    source_dbfs: 10.0 * ms.max(1e-30).log10(),
                }
            })
            .collect()
    }
}

/// Finds the wall reflection coefficient whose simulated RIR reaches `cfg.rt60_target`.
///
/// Starts from the Sabine absorption and refines by bisection on the
/// measured Schroeder RT60 of the source-to-array-centre response.
pub fn fit_reflection(cfg: &SceneConfig) -> Result<f64> {
    if cfg.rt60_target == 0.0 {
        return Ok(0.0);
    }
    let target = cfg.rt60_target;
    let len = rir_len(cfg);
    let measure = |beta: f64| -> f64 {
        let h = image_source_rir(
            &cfg.room_dims,
            &cfg.trajectory.start_position,
            &cfg.array_center,
            cfg.sample_rate,
            beta,
            cfg.max_image_order,
            len,
        );
        measure_rt60(&h, cfg.sample_rate).unwrap_or(0.0)
    };
    let sabine = (1.0 - sabine_absorption(&cfg.room_dims, target))
        .max(0.0)
        .sqrt();
    let (mut lo, mut hi) = (0.0_f64, 0.9999_f64);
    let mut beta = sabine.clamp(0.05, 0.99);
    let mut best = (f64::INFINITY, beta);
    for _ in 0..40 {
        let t = measure(beta);
        let err = (t - target).abs() / target;
        if err < best.0 {
            best = (err, beta);
        }
        if err < 0.005 {
            break;
        }
        if t < target {
            lo = beta;
        } else {
            hi = beta;
        }
        beta = 0.5 * (lo + hi);
    }
    Ok(best.1)
}

fn rir_len(cfg: &SceneConfig) -> usize {
    let room_diag = dist(&[0.0; 3], &cfg.room_dims);
    let seconds = room_diag / SPEED_OF_SOUND + 1.5 * cfg.rt60_target;
    (seconds * cfg.sample_rate).ceil() as usize + 2 * SINC_HALF_WIDTH as usize
}

/// Multichannel impulse responses from trajectory step `step` to each microphone.
pub fn step_rirs(cfg: &SceneConfig, geom: &ArrayGeometry, step: usize, beta: f64) -> Vec<Vec<f64>> {
    let src = cfg.trajectory.position(&cfg.array_center, step);
    let len = rir_len(cfg);
    geom.mic_positions
        .par_iter()
        .map(|p| {
            let mic = [
                cfg.array_center[0] + p[0],
                cfg.array_center[1] + p[1],
                cfg.array_center[2] + p[2],
            ];
            image_source_rir(
                &cfg.room_dims,
                &src,
                &mic,
                cfg.sample_rate,
                beta,
                cfg.max_image_order,
                len,
            )
        })
        .collect()
}

/// Renders `source` through the room along the configured trajectory.
///
/// Each step is convolved with its own static RIR set; consecutive steps are
/// joined with complementary 10 ms linear ramps. White Gaussian noise is
/// added independently per microphone.
pub fn simulate_shoebox(
    cfg: &SceneConfig,
    geom: &ArrayGeometry,
    source: &[f64],
    seed: u64,
) -> Result<SceneOutput> {
    cfg.validate()?;
    geom.validate()?;
    let step_len = cfg.step_samples();
    let steps = cfg.trajectory.num_steps;
    let needed =
        ((cfg.trajectory.duration() * cfg.sample_rate).round() as usize).max(step_len * steps);
    if source.len() < needed {
        return Err(Error::TooShort {
            len: source.len(),
            need: needed,
        });
    }
    let beta = fit_reflection(cfg)?;
    let len = source.len();
    let xf = (CROSSFADE_SECONDS * cfg.sample_rate).round() as usize;
    let half = xf / 2;

    let contributions: Vec<Vec<Vec<f64>>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let start = (k * step_len).saturating_sub(if k == 0 { 0 } else { half });
            let end = if k + 1 == steps {
                len
            } else {
                ((k + 1) * step_len + half).min(len)
            };
            let seg: Vec<f64> = (start..end)
                .map(|i| source[i] * step_weight(i, k, steps, step_len, xf))
                .collect();
            let rirs = step_rirs(cfg, geom, k, beta);
            rirs.iter().map(|h| fft_convolve(&seg, h)).collect()
        })
        .collect();

    let mut mics = vec![vec![0.0; len]; geom.num_mics()];
    for (k, per_mic) in contributions.iter().enumerate() {
        let start = (k * step_len).saturating_sub(if k == 0 { 0 } else { half });
        for (m, y) in per_mic.iter().enumerate() {
            for (i, v) in y.iter().enumerate() {
                if let Some(o) = mics[m].get_mut(start + i) {
                    *o += v;
                }
            }
        }
    }

    let r = cfg.source_distance();
    let delay = r / SPEED_OF_SOUND;
    let mut direct_reference = vec![0.0; len];
    add_delayed(
        &mut direct_reference,
        source,
        delay * cfg.sample_rate,
        1.0 / r,
    );

    let ref_ms = direct_reference.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let ref_rms = if ref_ms > 0.0 { ref_ms.sqrt() } else { 1.0 };
    let noise_rms = ref_rms * 10f64.powf(cfg.noise_level_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in mics.iter_mut() {
        for v in ch.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += noise_rms * g;
        }
    }

    Ok(SceneOutput {
        mics,
        direct_reference,
        step_directions: (0..steps)
            .map(|k| cfg.trajectory.direction(&cfg.array_center, k))
            .collect(),
        step_samples: step_len,
        propagation_delay: delay,
        sample_rate: cfg.sample_rate,
        reflection: beta,
        noise_rms,
    })
}

// Complementary linear ramps centred on the step boundaries.
fn step_weight(i: usize, k: usize, steps: usize, step_len: usize, xf: usize) -> f64 {
    if xf == 0 {
        return if i / step_len == k || (k + 1 == steps && i >= k * step_len) {
            1.0
        } else {
            0.0
        };
    }
    let i = i as f64 + 0.5;
    let half = xf as f64 / 2.0;
    let rise = if k == 0 {
        1.0
    } else {
        ((i - (k * step_len) as f64 + half) / xf as f64).clamp(0.0, 1.0)
    };
    let fall = if k + 1 == steps {
        1.0
    } else {
        (((k + 1) * step_len) as f64 + half - i).clamp(0.0, xf as f64) / xf as f64
    };
    rise.min(fall)
}

fn add_delayed(out: &mut [f64], src: &[f64], delay: f64, gain: f64) {
    let mut kernel = vec![0.0; delay.ceil() as usize + SINC_HALF_WIDTH as usize + 2];
    add_fractional_impulse(&mut kernel, delay, gain);
    let y = fft_convolve(src, &kernel);
    for (o, v) in out.iter_mut().zip(y) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_geometry(spacing: f64) -> ArrayGeometry {
        ArrayGeometry::new(vec![[spacing / 2.0, 0.0, 0.0], [-spacing / 2.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn broadside_pair_has_equal_entries() {
        let g = pair_geometry(0.2);
        let freqs = FreqGrid::new(48_000.0, 64);
        let sv = steering_vector(&g, &Direction::from_degrees(90.0, 0.0), &freqs);
        for v in &sv {
            assert!((v[0] - v[1]).norm() < 1e-12);
        }
    }

    #[test]
    fn endfire_pair_phase() {
        let g = pair_geometry(0.343);
        let freqs = FreqGrid::new(8_000.0, 16); // bin 1 = 500 Hz
        let sv = steering_vector(&g, &Direction::from_degrees(0.0, 0.0), &freqs);
        let rel = (sv[1][0] * sv[1][1].conj()).arg();
        assert!((rel.abs() - PI).abs() < 1e-9, "{rel}");
        for z in sv[0].iter() {
            assert!((z - C64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn steering_entries_unit_modulus() {
        let g = ArrayGeometry::glasses();
        let freqs = FreqGrid::new(48_000.0, 256);
        let set = build_steering_set(&g, &DirectionGrid::horizontal(12), &freqs);
        for m in set.matrices() {
            assert!(m.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        }
        let col = steering_vector(&g, &set.grid.get(3), &freqs);
        for k in 0..freqs.num_bins() {
            assert_eq!(set.column(k, 3), col[k]);
        }
    }

    #[test]
    fn paper_trajectory_speed() {
        let cfg = SceneConfig::moving_talker();
        let v = cfg.trajectory.speed(&cfg.array_center);
        assert!((v - 1.88).abs() < 0.01, "{v}");
        let d = cfg.trajectory.direction(&cfg.array_center, 15);
        assert!((d.azimuth_deg() - 90.0).abs() < 1e-9);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_errors() {
        let mut cfg = SceneConfig::moving_talker();
        cfg.trajectory.start_position = [9.0, 4.0, 2.0];
        assert!(matches!(cfg.validate(), Err(Error::SourceOutsideRoom(_))));
        let mut cfg = SceneConfig::moving_talker();
        cfg.room_dims = [8.0, 6.5, 5.0];
        cfg.trajectory.start_position = [6.0, 4.0, 2.0];
        cfg.array_center = [3.0, 4.0, 2.0];
        assert!(matches!(
            cfg.validate(),
            Err(Error::TrajectoryExitsRoom { .. })
        ));
    }

    #[test]
    fn rt60_of_exponential_noise() {
        use rand::Rng;
        let fs = 16_000.0;
        for t60 in [0.2, 0.4] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let h: Vec<f64> = (0..(fs * 1.5 * t60) as usize)
                .map(|i| {
                    let t = i as f64 / fs;
                    (-t * 6.91 / t60).exp() * rng.random_range(-1.0..1.0)
                })
                .collect();
            let m = measure_rt60(&h, fs).unwrap();
            assert!((m - t60).abs() / t60 < 0.1, "{m} vs {t60}");
        }
    }

    #[test]
    fn rt60_of_impulse_fails() {
        let mut h = vec![0.0; 1000];
        h[10] = 1.0;
        assert_eq!(measure_rt60(&h, 16_000.0), Err(Error::DecayTooShort));
        assert_eq!(
            measure_rt60(&[0.0; 10], 16_000.0),
            Err(Error::DecayTooShort)
        );
    }

    #[test]
    fn crossfade_weights_sum_to_one() {
        let (steps, step_len, xf) = (5, 100, 20);
        for i in 0..steps * step_len {
            let s: f64 = (0..steps)
                .map(|k| step_weight(i, k, steps, step_len, xf))
                .sum();
            assert!((s - 1.0).abs() < 1e-12, "sample {i}: {s}");
        }
    }

    #[test]
    fn convolve_matches_direct() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.5, -1.0];
        let y = fft_convolve(&a, &b);
        let expect = [0.5, 0.0, -0.5, -3.0];
        for (u, v) in y.iter().zip(expect) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
