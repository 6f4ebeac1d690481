//! Direction and frequency grids shared by every stage of the pipeline.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angular tolerance used when comparing directions.
pub const ANGLE_TOL: f64 = 1e-9;

/// A direction on the unit sphere. Azimuth is measured counter-clockwise from
/// the +x axis in the horizontal plane; elevation upward from that plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Direction {
    azimuth: f64,
    elevation: f64,
}

impl Direction {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        let mut az = azimuth.rem_euclid(TAU);
        if TAU - az < ANGLE_TOL * 1e-3 {
            az = 0.0;
        }
        Self {
            azimuth: az,
            elevation: elevation.clamp(-PI / 2.0, PI / 2.0),
        }
    }

    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64) -> Self {
        Self::new(azimuth_deg.to_radians(), elevation_deg.to_radians())
    }

    /// Horizontal-plane direction.
    pub fn horizontal(azimuth: f64) -> Self {
        Self::new(azimuth, 0.0)
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn azimuth_deg(&self) -> f64 {
        self.azimuth.to_degrees()
    }

    pub fn elevation_deg(&self) -> f64 {
        self.elevation.to_degrees()
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }

    pub fn from_vector(v: [f64; 3]) -> Self {
        let horiz = (v[0] * v[0] + v[1] * v[1]).sqrt();
        Self::new(v[1].atan2(v[0]), v[2].atan2(horiz))
    }

    /// Great-circle angle to `other`, in radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let cn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        cn.atan2(dot)
    }
}

impl PartialEq for Direction {
    fn eq(&self, other: &Self) -> bool {
        let daz = circular_diff(self.azimuth, other.azimuth);
        let at_pole = (self.elevation.abs() - PI / 2.0).abs() < ANGLE_TOL;
        (self.elevation - other.elevation).abs() <= ANGLE_TOL && (at_pole || daz <= ANGLE_TOL)
    }
}

/// Absolute circular difference between two angles, in [0, π].
pub fn circular_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Ordered candidate direction set. Index `q` names the expert / column.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrid {
    directions: Vec<Direction>,
}

impl DirectionGrid {
    pub fn new(directions: Vec<Direction>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Config("direction grid must not be empty".into()));
        }
        for (i, d) in directions.iter().enumerate() {
            if let Some(j) = directions[..i].iter().position(|e| e == d) {
                return Err(Error::Config(format!(
                    "duplicate grid direction at indices {j} and {i} (az {:.3} deg)",
                    d.azimuth_deg()
                )));
            }
        }
        Ok(Self { directions })
    }

    /// `count` azimuths evenly spaced around the horizontal plane, starting at 0.
    pub fn horizontal(count: usize) -> Self {
        assert!(count >= 1, "grid needs at least one direction");
        let step = TAU / count as f64;
        Self {
            directions: (0..count)
                .map(|i| Direction::horizontal(i as f64 * step))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn get(&self, q: usize) -> Direction {
        self.directions[q]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Direction> {
        self.directions.iter()
    }

    pub fn index_of(&self, dir: &Direction) -> Option<usize> {
        self.directions.iter().position(|d| d == dir)
    }

    /// Index of the grid direction closest to `dir` (ties resolve to the lower index).
    pub fn nearest(&self, dir: &Direction) -> usize {
        let mut best = 0;
        let mut best_angle = f64::INFINITY;
        for (q, d) in self.directions.iter().enumerate() {
            let a = d.angle_to(dir);
            if a < best_angle - 1e-12 {
                best = q;
                best_angle = a;
            }
        }
        best
    }

    /// Smallest nearest-neighbour spacing, in radians. Zero for a single direction.
    pub fn step(&self) -> f64 {
        let n = self.directions.len();
        if n < 2 {
            return 0.0;
        }
        let mut step = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                step = step.min(self.directions[i].angle_to(&self.directions[j]));
            }
        }
        step
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            directions: indices.iter().map(|&i| self.directions[i]).collect(),
        }
    }
}

/// One-sided STFT frequency axis, bins 0..=fft_size/2.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqGrid {
    sample_rate: f64,
    fft_size: usize,
    bins: Vec<f64>,
}

impl FreqGrid {
    pub fn new(sample_rate: f64, fft_size: usize) -> Self {
        assert!(sample_rate > 0.0 && fft_size >= 2);
        let bins = (0..=fft_size / 2)
            .map(|k| k as f64 * sample_rate / fft_size as f64)
            .collect();
        Self {
            sample_rate,
            fft_size,
            bins,
        }
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn hz(&self, k: usize) -> f64 {
        self.bins[k]
    }

    /// First bin whose frequency is at or above `hz`.
    pub fn bin_at_or_above(&self, hz: f64) -> usize {
        self.bins
            .iter()
            .position(|&f| f >= hz - 1e-9)
            .unwrap_or(self.bins.len())
    }

    /// Bin indices inside the closed band [lo, hi].
    pub fn band(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let start = self.bin_at_or_above(lo);
        let end = self
            .bins
            .iter()
            .rposition(|&f| f <= hi + 1e-9)
            .map_or(0, |k| k + 1);
        start..end.max(start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn azimuth_wraps_into_range() {
        let d = Direction::from_degrees(-90.0, 0.0);
        assert!((d.azimuth_deg() - 270.0).abs() < 1e-12);
        let d = Direction::from_degrees(720.0 + 6.0, 0.0);
        assert!((d.azimuth_deg() - 6.0).abs() < 1e-9);
        assert_eq!(
            Direction::from_degrees(360.0, 0.0),
            Direction::from_degrees(0.0, 0.0)
        );
    }

    #[test]
    fn unit_vector_round_trip() {
        let d = Direction::from_degrees(123.0, -20.0);
        let back = Direction::from_vector(d.unit_vector());
        assert_eq!(d, back);
    }

    #[test]
    fn grid_rejects_duplicates() {
        let dirs = vec![
            Direction::from_degrees(0.0, 0.0),
            Direction::from_degrees(360.0, 0.0),
        ];
        assert!(DirectionGrid::new(dirs).is_err());
    }

    #[test]
    fn horizontal_grid_step() {
        let g = DirectionGrid::horizontal(60);
        assert_eq!(g.len(), 60);
        assert!((g.step().to_degrees() - 6.0).abs() < 1e-9);
        assert_eq!(g.index_of(&Direction::from_degrees(354.0, 0.0)), Some(59));
        assert_eq!(g.nearest(&Direction::from_degrees(8.0, 0.0)), 1);
    }

    #[test]
    fn freq_grid_bins() {
        let f = FreqGrid::new(48_000.0, 1024);
        assert_eq!(f.num_bins(), 513);
        assert_eq!(f.hz(1), 46.875);
        assert_eq!(f.hz(512), 24_000.0);
        assert!(f.bins().windows(2).all(|w| w[1] > w[0]));
        let band = f.band(200.0, 1500.0);
        assert_eq!(band.start, 5);
        assert_eq!(band.end, 33);
    }
}
