//! Evaluation: interaural cue errors against a reference rendering,
//! HRTF reference rendering, and tracking hit rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{circular_diff, Direction, DirectionGrid};
use crate::hrtf::HrtfSet;
use crate::moe::FrameDiagnostics;
use crate::scene::TruthFrame;
use crate::signal::bandpass;
use crate::stft::{analyze, synthesize, SpectralFrame, StftConfig};

pub const ITD_BAND_HZ: [f64; 2] = [200.0, 1500.0];
pub const ILD_BAND_HZ: [f64; 2] = [500.0, 8000.0];
pub const MAX_ITD_SECONDS: f64 = 1e-3;
/// Frames quieter than this (mean square over both ears) are skipped.
pub const SILENCE_DBFS: f64 = -80.0;
pub const VOICED_DBFS: f64 = -50.0;
const BAND_TAPER_HZ: f64 = 50.0;

/// Two-channel time signal.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralTrack {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate: f64,
}

impl BinauralTrack {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::ChannelMismatch(left.len(), right.len()));
        }
        Ok(Self {
            left,
            right,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    fn band(&self, [lo, hi]: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        (
            bandpass(&self.left, self.sample_rate, lo, hi, BAND_TAPER_HZ),
            bandpass(&self.right, self.sample_rate, lo, hi, BAND_TAPER_HZ),
        )
    }
}

/// Interaural time difference of one frame by band-limited cross-correlation.
///
/// Positive when the right channel lags the left. Returns seconds.
pub fn frame_itd(left: &[f64], right: &[f64], sample_rate: f64) -> f64 {
    let max_lag = (MAX_ITD_SECONDS * sample_rate).round() as isize;
    let n = left.len() as isize;
    let cc = |lag: isize| -> f64 {
        let (start, end) = ((-lag).max(0), (n - lag).min(n));
        (start..end)
            .map(|i| left[i as usize] * right[(i + lag) as usize])
            .sum()
    };
    let values: Vec<f64> = (-max_lag..=max_lag).map(cc).collect();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    let mut offset = 0.0;
    if best > 0 && best + 1 < values.len() {
        let (a, b, c) = (values[best - 1], values[best], values[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            offset = 0.5 * (a - c) / denom;
        }
    }
    (best as f64 - max_lag as f64 + offset) / sample_rate
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Interaural level difference `10·log10(E_L / E_R)` in dB.
pub fn frame_ild(left: &[f64], right: &[f64]) -> f64 {
    let floor = 1e-30;
    10.0 * ((energy(left) + floor) / (energy(right) + floor)).log10()
}

/// Cue errors of one analysis frame; `None` marks a skipped silent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueError {
    pub frame: usize,
    pub itd_err_us: Option<f64>,
    pub ild_err_db: Option<f64>,
}

/// Per-frame `|ITD_test − ITD_ref|` (µs) and `|ILD_test − ILD_ref|` (dB) over
/// frames of `frame_len` samples with 50% overlap.
pub fn itd_ild_error(
    test: &BinauralTrack,
    reference: &BinauralTrack,
    frame_len: usize,
) -> Result<Vec<CueError>> {
    if test.sample_rate != reference.sample_rate {
        return Err(Error::Shape(format!(
            "sample rates differ: {} vs {}",
            test.sample_rate, reference.sample_rate
        )));
    }
    let len = test.len().min(reference.len());
    let hop = (frame_len / 2).max(1);
    if frame_len == 0 || len < frame_len {
        return Err(Error::TooShort {
            len,
            need: frame_len,
        });
    }
    let fs = test.sample_rate;
    let (t_itd, r_itd) = (test.band(ITD_BAND_HZ), reference.band(ITD_BAND_HZ));
    let (t_ild, r_ild) = (test.band(ILD_BAND_HZ), reference.band(ILD_BAND_HZ));
    let silence = frame_len as f64 * 10f64.powf(SILENCE_DBFS / 10.0);
    let frames = (len - frame_len) / hop + 1;
    Ok((0..frames)
        .map(|f| {
            let s = f * hop..f * hop + frame_len;
            let loud = |t: &BinauralTrack| {
                0.5 * (energy(&t.left[s.clone()]) + energy(&t.right[s.clone()])) >= silence
            };
            if !(loud(test) && loud(reference)) {
                return CueError {
                    frame: f,
                    itd_err_us: None,
                    ild_err_db: None,
                };
            }
            let itd_t = frame_itd(&t_itd.0[s.clone()], &t_itd.1[s.clone()], fs);
            let itd_r = frame_itd(&r_itd.0[s.clone()], &r_itd.1[s.clone()], fs);
            let ild_t = frame_ild(&t_ild.0[s.clone()], &t_ild.1[s.clone()]);
            let ild_r = frame_ild(&r_ild.0[s.clone()], &r_ild.1[s.clone()]);
            CueError {
                frame: f,
                itd_err_us: Some((itd_t - itd_r).abs() * 1e6),
                ild_err_db: Some((ild_t - ild_r).abs()),
            }
        })
        .collect())
}

/// Summary statistics over the non-silent frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueSummary {
    pub frames: usize,
    pub silent_frames: usize,
    pub median_itd_err_us: f64,
    pub mean_itd_err_us: f64,
    pub median_ild_err_db: f64,
    pub mean_ild_err_db: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Summarizes frames at or after `from_frame`.
pub fn summarize_cues(errors: &[CueError], from_frame: usize) -> CueSummary {
    let used: Vec<&CueError> = errors.iter().filter(|e| e.frame >= from_frame).collect();
    let itd: Vec<f64> = used.iter().filter_map(|e| e.itd_err_us).collect();
    let ild: Vec<f64> = used.iter().filter_map(|e| e.ild_err_db).collect();
    CueSummary {
        frames: used.len(),
        silent_frames: used.len() - itd.len(),
        median_itd_err_us: median(&itd),
        mean_itd_err_us: mean(&itd),
        median_ild_err_db: median(&ild),
        mean_ild_err_db: mean(&ild),
    }
}

/// Renders `source` through the HRTF of the true direction of each STFT frame.
///
/// `directions` holds one entry per STFT frame of `source`; every direction
/// must lie on the HRTF grid.
pub fn reference_render(
    source: &[f64],
    directions: &[Direction],
    h: &HrtfSet,
    stft: &StftConfig,
) -> Result<BinauralTrack> {
    let frames = analyze(&[source.to_vec()], stft)?;
    if frames.len() != directions.len() {
        return Err(Error::TimelineMismatch(format!(
            "{} STFT frames but {} directions",
            frames.len(),
            directions.len()
        )));
    }
    if h.num_bins() != stft.num_bins() {
        return Err(Error::GridMismatch(
            "HRTF and STFT bin counts differ".into(),
        ));
    }
    let out = frames
        .iter()
        .zip(directions)
        .map(|(f, d)| {
            let q = h.grid.index_of(d).ok_or(Error::DirectionOffGrid {
                az_deg: d.azimuth_deg(),
                el_deg: d.elevation_deg(),
            })?;
            let mut o = SpectralFrame::zeros(f.index, 2, f.num_bins());
            for k in 0..f.num_bins() {
                let s = f.get(k, 0);
                let b = o.bin_mut(k);
                b[0] = h.left(q, k) * s;
                b[1] = h.right(q, k) * s;
            }
            Ok(o)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut y = synthesize(&out, stft)?;
    let right = y.pop().unwrap_or_default();
    let left = y.pop().unwrap_or_default();
    BinauralTrack::new(left, right, stft.sample_rate)
}

/// One row of the mixture diagnostics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRow {
    pub frame: usize,
    pub argmin: usize,
    pub argmin_az_deg: f64,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// CSV with columns `frame, argmin, argmin_az_deg, alpha_0.., loss_0..`.
pub fn diagnostics_csv(diags: &[FrameDiagnostics], grid: &DirectionGrid) -> Result<String> {
    let q = grid.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string(), "argmin".into(), "argmin_az_deg".into()];
    header.extend((0..q).map(|i| format!("alpha_{i}")));
    header.extend((0..q).map(|i| format!("loss_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for d in diags {
        let mut row = vec![
            d.frame.to_string(),
            d.argmin.to_string(),
            grid.get(d.argmin).azimuth_deg().to_string(),
        ];
        row.extend(d.weights.iter().map(|v| v.to_string()));
        row.extend(d.losses.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    into_string(w)
}

pub fn parse_diagnostics_csv(text: &str) -> Result<Vec<DiagnosticsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    let q = header.iter().filter(|h| h.starts_with("alpha_")).count();
    if header.len() != 3 + 2 * q
        || &header[0] != "frame"
        || &header[1] != "argmin"
        || &header[2] != "argmin_az_deg"
    {
        return Err(Error::Parse {
            line: 1,
            msg: "expected columns frame,argmin,argmin_az_deg,alpha_*,loss_*".into(),
        });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            let num = |j: usize| -> Result<f64> {
                rec[j].trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("column {}: {e}", &header[j]),
                })
            };
            Ok(DiagnosticsRow {
                frame: num(0)? as usize,
                argmin: num(1)? as usize,
                argmin_az_deg: num(2)?,
                weights: (3..3 + q).map(num).collect::<Result<_>>()?,
                losses: (3 + q..3 + 2 * q).map(num).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Ground truth per STFT frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub frame: usize,
    pub az_deg: f64,
    pub el_deg: f64,
    pub source_dbfs: f64,
}

impl From<&TruthFrame> for TruthRow {
    fn from(t: &TruthFrame) -> Self {
        Self {
            frame: t.frame,
            az_deg: t.direction.azimuth_deg(),
            el_deg: t.direction.elevation_deg(),
            source_dbfs: t.source_dbfs,
        }
    }
}

pub fn truth_csv(truth: &[TruthRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in truth {
        w.serialize(t).map_err(csv_err)?;
    }
    if truth.is_empty() {
        w.write_record(["frame", "az_deg", "el_deg", "source_dbfs"])
            .map_err(csv_err)?;
    }
    into_string(w)
}

pub fn parse_truth_csv(text: &str) -> Result<Vec<TruthRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Per-frame metrics CSV: `frame, itd_err_us, ild_err_db` (empty for silent frames).
pub fn metrics_csv(errors: &[CueError]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "itd_err_us", "ild_err_db"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for e in errors {
        w.write_record([e.frame.to_string(), opt(e.itd_err_us), opt(e.ild_err_db)])
            .map_err(csv_err)?;
    }
    into_string(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingFrame {
    pub frame: usize,
    pub true_az_deg: f64,
    pub est_az_deg: f64,
    pub voiced: bool,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub frames: Vec<TrackingFrame>,
    /// Frames counted in the hit rate (voiced and past the burn-in).
    pub scored_frames: usize,
    pub hits: usize,
    pub hit_rate: f64,
}

/// Compares the argmin-expert azimuth against the truth, frame by frame.
///
/// Only frames with index ≥ `burn_in_frames` whose source level is above
/// `voiced_dbfs` are scored.
pub fn tracking_report(
    diags: &[DiagnosticsRow],
    truth: &[TruthRow],
    tol_deg: f64,
    voiced_dbfs: f64,
    burn_in_frames: usize,
) -> Result<TrackingReport> {
    if diags.len() != truth.len() {
        return Err(Error::TimelineMismatch(format!(
            "{} diagnostic frames vs {} truth frames",
            diags.len(),
            truth.len()
        )));
    }
    let mut frames = Vec::with_capacity(diags.len());
    for (d, t) in diags.iter().zip(truth) {
        if d.frame != t.frame {
            return Err(Error::TimelineMismatch(format!(
                "diagnostics frame {} paired with truth frame {}",
                d.frame, t.frame
            )));
        }
        let err = circular_diff(d.argmin_az_deg.to_radians(), t.az_deg.to_radians()).to_degrees();
        frames.push(TrackingFrame {
            frame: d.frame,
            true_az_deg: t.az_deg,
            est_az_deg: d.argmin_az_deg,
            voiced: t.source_dbfs > voiced_dbfs,
            hit: err <= tol_deg + 1e-9,
        });
    }
    let scored: Vec<&TrackingFrame> = frames
        .iter()
        .filter(|f| f.voiced && f.frame >= burn_in_frames)
        .collect();
    let hits = scored.iter().filter(|f| f.hit).count();
    Ok(TrackingReport {
        scored_frames: scored.len(),
        hits,
        hit_rate: if scored.is_empty() {
            0.0
        } else {
            hits as f64 / scored.len() as f64
        },
        frames,
    })
}
