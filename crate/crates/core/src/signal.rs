//! Synthetic test signals.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::linalg::C64;

/// Zero-phase band-pass by spectral masking with raised-cosine edges of width `taper_hz`.
pub fn bandpass(x: &[f64], sample_rate: f64, lo_hz: f64, hi_hz: f64, taper_hz: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let gain = |f: f64| -> f64 {
        let edge = |d: f64| {
            if d <= 0.0 {
                0.0
            } else if d >= taper_hz {
                1.0
            } else {
                0.5 - 0.5 * (PI * d / taper_hz).cos()
            }
        };
        edge(f - lo_hz + taper_hz / 2.0).min(edge(hi_hz + taper_hz / 2.0 - f))
    };
    for (i, v) in buf.iter_mut().enumerate() {
        let bin = if i <= n / 2 { i } else { n - i };
        *v *= gain(bin as f64 * sample_rate / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|v| v.re / n as f64).collect()
}

/// Speech-like test signal: 100–4000 Hz noise under a syllabic (3–6 Hz)
/// envelope, grouped into words separated by short pauses. Peak −6 dBFS.
pub fn speech_like(duration: f64, sample_rate: f64, seed: u64) -> Vec<f64> {
    let n = (duration * sample_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let carrier = bandpass(&noise, sample_rate, 100.0, 4000.0, 50.0);

    let mut envelope = vec![0.0; n];
    let mut t = 0usize;
    while t < n {
        let word = (rng.random_range(0.4..0.9) * sample_rate) as usize;
        let pause = (rng.random_range(0.05..0.2) * sample_rate) as usize;
        let rate = rng.random_range(3.0..6.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let end = (t + word).min(n);
        for (i, e) in envelope[t..end].iter_mut().enumerate() {
            let s = i as f64 / sample_rate;
            let ramp = (PI * i as f64 / word as f64).sin();
            *e = ramp * (0.6 + 0.4 * (2.0 * PI * rate * s + phase).sin());
        }
        t = end + pause;
    }
    let mut out: Vec<f64> = carrier.iter().zip(&envelope).map(|(c, e)| c * e).collect();
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}
