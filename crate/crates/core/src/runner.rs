//! Config-driven runs: simulate, process, evaluate and export artifacts with
//! a hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PatternSteering, RunConfig, SourceConfig};
use crate::error::Error;
use crate::eval::{
    diagnostics_csv, metrics_csv, truth_csv, BinauralTrack, CueSummary, TrackingFrame, TruthRow,
};
use crate::fov::{
    apply_gain_control, design_weighted_bsm, directional_gain_pattern, square_steering, FovSpec,
};
use crate::moe::RegretLedger;
use crate::pipeline::{bundled_source, process, Experiment, ExperimentResult, Method, Setup};
use crate::scene::simulate_shoebox;
use crate::stft::{analyze, synthesize};

/// Peak level of exported WAV files.
pub const WAV_PEAK_DBFS: f64 = -1.0;

/// A failure during a run, tagged with the stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn is_config(&self) -> bool {
        matches!(self.source, Error::Config(_))
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for crate::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// Linear gain applied before quantization (WAV files only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Written last, atomically, once every artifact exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
    pub versions: BTreeMap<String, String>,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
    pub timings: Vec<StageTiming>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects artifacts in one output directory.
struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, StageError> {
        fs::create_dir_all(dir)
            .map_err(Error::from)
            .stage("output")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8], gain: Option<f64>) -> Result<(), StageError> {
        write_atomic(&self.dir.join(name), bytes).stage("output")?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
            gain,
        });
        Ok(())
    }

    fn text(&mut self, name: &str, text: crate::Result<String>) -> Result<(), StageError> {
        let text = text.stage("output")?;
        self.put(name, text.as_bytes(), None)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), StageError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Io(e.to_string()))
            .stage("output")?;
        text.push('\n');
        self.put(name, text.as_bytes(), None)
    }

    fn wav(
        &mut self,
        name: &str,
        channels: &[Vec<f64>],
        sample_rate: f64,
    ) -> Result<(), StageError> {
        let (bytes, gain) = wav_bytes(channels, sample_rate).stage("output")?;
        self.put(name, &bytes, Some(gain))
    }

    fn finish(
        self,
        command: &str,
        cfg: &RunConfig,
        started: SystemTime,
        clock: Instant,
        timings: Vec<(String, f64)>,
    ) -> Result<RunManifest, StageError> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: cfg.clone(),
            artifacts: self.artifacts,
            versions: versions(),
            started_unix_s: started
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
            wall_clock_s: clock.elapsed().as_secs_f64(),
            timings: timings
                .into_iter()
                .map(|(stage, seconds)| StageTiming { stage, seconds })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Io(e.to_string()))
            .stage("manifest")?;
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes()).stage("manifest")?;
        Ok(manifest)
    }
}

fn versions() -> BTreeMap<String, String> {
    let mut v = BTreeMap::new();
    v.insert("bsm-moe".to_string(), env!("CARGO_PKG_VERSION").to_string());
    v.insert(
        "schema".to_string(),
        crate::config::SCHEMA_VERSION.to_string(),
    );
    v
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Encodes channels as 24-bit PCM peak-normalized to [`WAV_PEAK_DBFS`].
/// Returns the bytes and the gain applied.
pub fn wav_bytes(channels: &[Vec<f64>], sample_rate: f64) -> crate::Result<(Vec<u8>, f64)> {
    let n = channels.first().map_or(0, |c| c.len());
    if let Some(c) = channels.iter().find(|c| c.len() != n) {
        return Err(Error::ChannelMismatch(n, c.len()));
    }
    let peak = channels
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 {
        10f64.powf(WAV_PEAK_DBFS / 20.0) / peak
    } else {
        1.0
    };
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate: sample_rate.round() as u32,
        bits_per_sample: 24,
        sample_format: hound::SampleFormat::Int,
    };
    let full = (1i32 << 23) - 1;
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(wav_err)?;
        for i in 0..n {
            for c in channels {
                let s = (c[i] * gain * full as f64)
                    .round()
                    .clamp(-(full as f64) - 1.0, full as f64) as i32;
                w.write_sample(s).map_err(wav_err)?;
            }
        }
        w.finalize().map_err(wav_err)?;
    }
    Ok((cursor.into_inner(), gain))
}

fn wav_err(e: hound::Error) -> Error {
    Error::Io(format!("wav: {e}"))
}

/// Reads a WAV file into per-channel samples scaled to [-1, 1], plus its sample rate.
pub fn read_wav(path: &Path) -> crate::Result<(Vec<Vec<f64>>, f64)> {
    let mut r =
        hound::WavReader::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    let ch = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / ch.max(1)); ch];
    for (i, v) in interleaved.into_iter().enumerate() {
        out[i % ch].push(v);
    }
    Ok((out, spec.sample_rate as f64))
}

/// The dry source for `cfg`.
pub fn load_source(cfg: &RunConfig) -> crate::Result<Vec<f64>> {
    match &cfg.source {
        SourceConfig::Synthetic => Ok(bundled_source(&cfg.scene, cfg.seed)),
        SourceConfig::Wav { path } => {
            let (mut ch, fs) = read_wav(path)?;
            if fs != cfg.scene.sample_rate {
                return Err(Error::Config(format!(
                    "source.path sample rate {fs} differs from scene.sample_rate {}",
                    cfg.scene.sample_rate
                )));
            }
            if ch.is_empty() {
                return Err(Error::Config("source.path has no channels".into()));
            }
            Ok(ch.swap_remove(0))
        }
    }
}

/// Per-method entry of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub cues: CueSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scored_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_regret: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_average_regret: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub sample_rate: f64,
    pub samples: usize,
    pub stft_frames: usize,
    pub reflection_coefficient: f64,
    pub noise_rms: f64,
    pub methods: Vec<MethodSummary>,
}

#[derive(Serialize)]
struct TrackingRow {
    frame: usize,
    time_s: f64,
    true_az_deg: f64,
    est_az_deg: f64,
    voiced: bool,
    hit: bool,
}

fn tracking_csv(frames: &[TrackingFrame], hop_s: f64) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for f in frames {
        w.serialize(TrackingRow {
            frame: f.frame,
            time_s: f.frame as f64 * hop_s,
            true_az_deg: f.true_az_deg,
            est_az_deg: f.est_az_deg,
            voiced: f.voiced,
            hit: f.hit,
        })
        .map_err(csv_err)?;
    }
    csv_string(w)
}

fn regret_csv(ledger: &RegretLedger) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "regret", "average_regret", "best_expert"])
        .map_err(csv_err)?;
    for t in 1..=ledger.frames() {
        let p = ledger.regret(t)?;
        w.write_record([
            p.t.to_string(),
            p.regret.to_string(),
            p.average.to_string(),
            p.best_expert.to_string(),
        ])
        .map_err(csv_err)?;
    }
    csv_string(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(format!("csv: {e}"))
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> crate::Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn build_setup(cfg: &RunConfig) -> Result<Setup, StageError> {
    cfg.setup.build(&cfg.stft).stage("setup")
}

fn run_experiment(cfg: &RunConfig, setup: &Setup) -> Result<ExperimentResult, StageError> {
    let source = load_source(cfg).stage("source")?;
    let exp = Experiment {
        scene: &cfg.scene,
        stft: &cfg.stft,
        setup,
        array: &cfg.setup.array,
        methods: &cfg.methods,
        moe: &cfg.moe,
        adaptive: &cfg.adaptive,
        fov: cfg.fov.as_ref(),
        eval: &cfg.eval,
        seed: cfg.seed,
    };
    exp.run(&source).stage("experiment")
}

fn summary(cfg: &RunConfig, res: &ExperimentResult) -> RunSummary {
    RunSummary {
        seed: cfg.seed,
        sample_rate: cfg.scene.sample_rate,
        samples: res.scene.mics.first().map_or(0, |m| m.len()),
        stft_frames: res.truth.len(),
        reflection_coefficient: res.scene.reflection,
        noise_rms: res.scene.noise_rms,
        methods: res
            .methods
            .iter()
            .map(|m| {
                let last = m.ledger.as_ref().and_then(|l| l.regret(l.frames()).ok());
                MethodSummary {
                    method: m.method,
                    cues: m.cue_summary,
                    hit_rate: m.tracking.as_ref().map(|t| t.hit_rate),
                    scored_frames: m.tracking.as_ref().map(|t| t.scored_frames),
                    final_regret: last.map(|p| p.regret),
                    final_average_regret: last.map(|p| p.average),
                }
            })
            .collect(),
    }
}

fn write_metrics(
    out: &mut Outputs,
    cfg: &RunConfig,
    setup: &Setup,
    res: &ExperimentResult,
) -> Result<(), StageError> {
    let hop_s = cfg.stft.hop as f64 / cfg.stft.sample_rate;
    out.text("truth.csv", truth_csv(&res.truth))?;
    let mut tracking_written = false;
    for m in &res.methods {
        let name = m.method.name();
        out.text(&format!("{name}_cues.csv"), metrics_csv(&m.cues))?;
        if let Some(d) = &m.diagnostics {
            out.text(
                &format!("{name}_weights.csv"),
                diagnostics_csv(d, &setup.grid),
            )?;
        }
        if let Some(l) = &m.ledger {
            out.text(&format!("{name}_regret.csv"), regret_csv(l))?;
        }
        if let (Some(t), false) = (&m.tracking, tracking_written) {
            out.text("moe_tracking.csv", tracking_csv(&t.frames, hop_s))?;
            tracking_written = true;
        }
    }
    out.json("summary.json", &summary(cfg, res))
}

fn write_tracks(out: &mut Outputs, res: &ExperimentResult) -> Result<(), StageError> {
    let stereo = |t: &BinauralTrack| vec![t.left.clone(), t.right.clone()];
    let fs = res.reference.sample_rate;
    out.wav("reference.wav", &stereo(&res.reference), fs)?;
    for m in &res.methods {
        out.wav(&format!("{}.wav", m.method.name()), &stereo(&m.track), fs)?;
    }
    Ok(())
}

/// Full pipeline: simulate, render every method, evaluate and export.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, StageError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    cfg.validate().stage("config")?;
    let mut out = Outputs::new(out_dir)?;
    let setup_clock = Instant::now();
    let setup = build_setup(cfg)?;
    let mut timings = vec![("setup".to_string(), setup_clock.elapsed().as_secs_f64())];
    let res = run_experiment(cfg, &setup)?;
    timings.extend(res.timings.iter().cloned());
    let write_clock = Instant::now();
    write_tracks(&mut out, &res)?;
    write_metrics(&mut out, cfg, &setup, &res)?;
    timings.push(("write".to_string(), write_clock.elapsed().as_secs_f64()));
    out.finish("run", cfg, started, clock, timings)
}

/// Metrics only: same computation as [`run`] without audio exports.
pub fn eval(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, StageError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    cfg.validate().stage("config")?;
    let mut out = Outputs::new(out_dir)?;
    let setup = build_setup(cfg)?;
    let res = run_experiment(cfg, &setup)?;
    let timings = res.timings.clone();
    write_metrics(&mut out, cfg, &setup, &res)?;
    out.finish("eval", cfg, started, clock, timings)
}

/// Scene only: microphone signals, dry source and ground truth.
pub fn simulate(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, StageError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    cfg.validate().stage("config")?;
    let mut out = Outputs::new(out_dir)?;
    let source = load_source(cfg).stage("source")?;
    let scene =
        simulate_shoebox(&cfg.scene, &cfg.setup.array, &source, cfg.seed).stage("simulate")?;
    let t_sim = clock.elapsed().as_secs_f64();
    let truth: Vec<TruthRow> = scene
        .truth_per_frame(&cfg.stft)
        .iter()
        .map(TruthRow::from)
        .collect();
    out.wav("mics.wav", &scene.mics, cfg.scene.sample_rate)?;
    out.wav(
        "direct.wav",
        std::slice::from_ref(&scene.direct_reference),
        cfg.scene.sample_rate,
    )?;
    out.text("truth.csv", truth_csv(&truth))?;
    out.finish(
        "simulate",
        cfg,
        started,
        clock,
        vec![("simulate".to_string(), t_sim)],
    )
}

/// Renders an existing multichannel recording with every configured method.
pub fn process_recording(
    cfg: &RunConfig,
    input: &Path,
    out_dir: &Path,
) -> Result<RunManifest, StageError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    cfg.validate().stage("config")?;
    let (mics, fs) = read_wav(input).stage("input")?;
    if fs != cfg.stft.sample_rate {
        return Err(StageError {
            stage: "input",
            source: Error::Config(format!(
                "input sample rate {fs} differs from stft.sample_rate {}",
                cfg.stft.sample_rate
            )),
        });
    }
    if mics.len() != cfg.setup.array.num_mics() {
        return Err(StageError {
            stage: "input",
            source: Error::Config(format!(
                "input has {} channels but setup.array has {} microphones",
                mics.len(),
                cfg.setup.array.num_mics()
            )),
        });
    }
    let mut out = Outputs::new(out_dir)?;
    let setup = build_setup(cfg)?;
    let frames = analyze(&mics, &cfg.stft).stage("analyze")?;
    let mut timings = vec![("analyze".to_string(), clock.elapsed().as_secs_f64())];
    for &m in &cfg.methods {
        let lap = Instant::now();
        let res = process(
            m,
            &frames,
            &setup.steering,
            &setup.hrtf,
            cfg.fov.as_ref(),
            &cfg.moe,
            &cfg.adaptive,
        )
        .stage("process")?;
        let y = synthesize(&res.frames, &cfg.stft).stage("synthesize")?;
        out.wav(&format!("{}.wav", m.name()), &y, fs)?;
        if let Some(d) = &res.diagnostics {
            out.text(
                &format!("{}_weights.csv", m.name()),
                diagnostics_csv(d, &setup.grid),
            )?;
        }
        if let Some(l) = &res.ledger {
            out.text(&format!("{}_regret.csv", m.name()), regret_csv(l))?;
        }
        timings.push((m.name().to_string(), lap.elapsed().as_secs_f64()));
    }
    out.finish("process", cfg, started, clock, timings)
}

#[derive(Serialize)]
struct PatternRow {
    gamma: f64,
    azimuth_deg: f64,
    in_fov: bool,
    left_db: f64,
    right_db: f64,
    combined_db: f64,
}

/// Mean directional gain inside and outside the field of view for one γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub gamma: f64,
    pub in_fov_db: f64,
    pub out_fov_db: f64,
}

/// Directional gain of gain-control BSM for each γ in `pattern.gammas`.
pub fn pattern_sweep(
    cfg: &RunConfig,
    setup: &Setup,
) -> crate::Result<(Vec<PatternSummary>, String)> {
    let fov = cfg.fov.clone().ok_or_else(|| {
        Error::Config("fov must be set to export directional gain patterns".into())
    })?;
    let steering = match cfg.pattern.steering {
        PatternSteering::Physical => setup.steering.clone(),
        PatternSteering::Square => square_steering(&setup.grid, &setup.steering.freqs),
    };
    let mask = fov.mask(&setup.grid);
    let outside: Vec<bool> = mask.iter().map(|m| !m).collect();
    let unit = vec![1.0; setup.grid.len()];
    let mut summaries = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    for &gamma in &cfg.pattern.gammas {
        let spec = FovSpec {
            gamma,
            ..fov.clone()
        };
        let target = apply_gain_control(&setup.hrtf, &spec);
        let c = design_weighted_bsm(&steering, &target, &unit, &cfg.adaptive.bsm)?;
        let g = directional_gain_pattern(&c, &steering, &setup.hrtf)?;
        for q in 0..g.azimuth_deg.len() {
            w.serialize(PatternRow {
                gamma,
                azimuth_deg: g.azimuth_deg[q],
                in_fov: mask[q],
                left_db: g.left_db[q],
                right_db: g.right_db[q],
                combined_db: g.combined_db[q],
            })
            .map_err(csv_err)?;
        }
        summaries.push(PatternSummary {
            gamma,
            in_fov_db: g.mean_db(&mask),
            out_fov_db: g.mean_db(&outside),
        });
    }
    Ok((summaries, csv_string(w)?))
}

/// Exports the directional gain sweep.
pub fn pattern(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, StageError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    cfg.validate().stage("config")?;
    if cfg.fov.is_none() {
        return Err(StageError {
            stage: "config",
            source: Error::Config("fov must be set to export directional gain patterns".into()),
        });
    }
    let mut out = Outputs::new(out_dir)?;
    let setup = build_setup(cfg)?;
    let (summaries, table) = pattern_sweep(cfg, &setup).stage("pattern")?;
    out.text("pattern.csv", Ok(table))?;
    out.json("pattern_summary.json", &summaries)?;
    let t = clock.elapsed().as_secs_f64();
    out.finish(
        "pattern",
        cfg,
        started,
        clock,
        vec![("pattern".to_string(), t)],
    )
}
