//! Short-time Fourier analysis and weighted overlap-add synthesis.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FreqGrid;
use crate::linalg::{ComplexVec, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
    pub sample_rate: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            window: Window::Hann,
            sample_rate: 48_000.0,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 || !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "stft.fft_size must be a power of two >= 4, got {}",
                self.fft_size
            )));
        }
        // Squared Hann sums to a constant only for hops of fft_size/4 or finer.
        if self.hop == 0 || !self.fft_size.is_multiple_of(self.hop) || self.hop > self.fft_size / 4
        {
            return Err(Error::Config(format!(
                "stft.hop must divide fft_size and be <= fft_size/4, got {}",
                self.hop
            )));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Config("stft.sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn freq_grid(&self) -> FreqGrid {
        FreqGrid::new(self.sample_rate, self.fft_size)
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            Window::Hann => hann(self.fft_size),
        }
    }

    /// Number of frames produced by [`analyze`] for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// Time of the centre of frame `t`, in seconds.
    pub fn frame_center(&self, t: usize) -> f64 {
        (t * self.hop) as f64 / self.sample_rate + self.fft_size as f64 / (2.0 * self.sample_rate)
    }

    /// Constant Σ_k w²(n + k·hop) of the analysis/synthesis window pair,
    /// averaged over the offsets inside one hop.
    pub fn ola_gain(&self) -> f64 {
        let w = self.window();
        let phases = self.fft_size / self.hop;
        let total: f64 = (0..self.hop)
            .map(|n| {
                (0..phases)
                    .map(|k| w[n + k * self.hop].powi(2))
                    .sum::<f64>()
            })
            .sum();
        total / self.hop as f64
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Multichannel STFT data at one time index. Storage is bin-major:
/// `data[bin * channels + mic]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub index: usize,
    channels: usize,
    data: Vec<C64>,
}

impl SpectralFrame {
    pub fn zeros(index: usize, channels: usize, num_bins: usize) -> Self {
        Self {
            index,
            channels,
            data: vec![C64::new(0.0, 0.0); channels * num_bins],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_bins(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.data.len() / self.channels
        }
    }

    pub fn bin(&self, k: usize) -> &[C64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn bin_mut(&mut self, k: usize) -> &mut [C64] {
        &mut self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn bin_vec(&self, k: usize) -> ComplexVec {
        ComplexVec::from_column_slice(self.bin(k))
    }

    pub fn get(&self, k: usize, m: usize) -> C64 {
        self.data[k * self.channels + m]
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Windowed FFT of every channel, one frame per hop.
pub fn analyze(audio: &[Vec<f64>], cfg: &StftConfig) -> Result<Vec<SpectralFrame>> {
    cfg.validate()?;
    let channels = audio.len();
    if channels == 0 {
        return Err(Error::Shape("no channels".into()));
    }
    let len = audio[0].len();
    if let Some(ch) = audio.iter().find(|ch| ch.len() != len) {
        return Err(Error::ChannelMismatch(len, ch.len()));
    }
    if len < cfg.fft_size {
        return Err(Error::TooShort {
            len,
            need: cfg.fft_size,
        });
    }
    let n = cfg.fft_size;
    let bins = cfg.num_bins();
    let win = cfg.window();
    let plans = plans(n);
    let frames = cfg.num_frames(len);
    let out = (0..frames)
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![C64::new(0.0, 0.0); n],
                    vec![C64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()],
                )
            },
            |(buf, scratch), t| {
                let start = t * cfg.hop;
                let mut frame = SpectralFrame::zeros(t, channels, bins);
                for (m, ch) in audio.iter().enumerate() {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = C64::new(ch[start + i] * win[i], 0.0);
                    }
                    plans.forward.process_with_scratch(buf, scratch);
                    for k in 0..bins {
                        frame.data[k * channels + m] = buf[k];
                    }
                }
                frame
            },
        )
        .collect();
    Ok(out)
}

/// Weighted overlap-add resynthesis with the analysis window, normalized by
/// the constant overlap gain. Output length is `(T−1)·hop + fft_size`.
pub fn synthesize(frames: &[SpectralFrame], cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let bins = cfg.num_bins();
    let channels = first.channels();
    for f in frames {
        if f.channels() != channels || f.num_bins() != bins {
            return Err(Error::InconsistentFrames(format!(
                "frame {} has {} channels x {} bins, expected {} x {}",
                f.index,
                f.channels(),
                f.num_bins(),
                channels,
                bins
            )));
        }
    }
    let n = cfg.fft_size;
    let win = cfg.window();
    let gain = cfg.ola_gain();
    let plans = plans(n);
    let len = (frames.len() - 1) * cfg.hop + n;
    let out: Vec<Vec<f64>> = (0..channels)
        .into_par_iter()
        .map(|m| {
            let mut y = vec![0.0; len];
            let mut buf = vec![C64::new(0.0, 0.0); n];
            let mut scratch = vec![C64::new(0.0, 0.0); plans.inverse.get_inplace_scratch_len()];
            for (t, f) in frames.iter().enumerate() {
                for k in 0..bins {
                    buf[k] = f.get(k, m);
                }
                for k in 1..n - bins + 1 {
                    buf[n - k] = buf[k].conj();
                }
                plans.inverse.process_with_scratch(&mut buf, &mut scratch);
                let start = t * cfg.hop;
                for i in 0..n {
                    y[start + i] += buf[i].re / n as f64 * win[i] / gain;
                }
            }
            y
        })
        .collect();
    Ok(out)
}
