//! Head-related transfer functions on the direction grid: an analytic
//! rigid-sphere model and a plain CSV grid format.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Direction, DirectionGrid, FreqGrid};
use crate::linalg::{ComplexMat, C64};

const SERIES_MAX_TERMS: usize = 100;
const SERIES_REL_TOL: f64 = 1e-6;
const LOW_FREQ_LIMIT: f64 = 50.0;

/// Left/right transfer functions per grid direction and frequency bin.
///
/// Stored per bin as a Q×2 matrix (column 0 left ear, column 1 right ear).
#[derive(Debug, Clone)]
pub struct HrtfSet {
    pub grid: DirectionGrid,
    pub freqs: FreqGrid,
    bins: Vec<ComplexMat>,
    /// Set when bins above this frequency were filled by holding the last
    /// available value of a loaded file.
    pub held_above_hz: Option<f64>,
}

impl HrtfSet {
    pub fn from_bins(grid: DirectionGrid, freqs: FreqGrid, bins: Vec<ComplexMat>) -> Result<Self> {
        if bins.len() != freqs.num_bins()
            || bins
                .iter()
                .any(|m| m.nrows() != grid.len() || m.ncols() != 2)
        {
            return Err(Error::Shape(format!(
                "HRTF set must have {} bins of {}x2",
                freqs.num_bins(),
                grid.len()
            )));
        }
        if bins
            .iter()
            .flatten()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::Shape("HRTF set has non-finite entries".into()));
        }
        Ok(Self {
            grid,
            freqs,
            bins,
            held_above_hz: None,
        })
    }

    pub fn num_dirs(&self) -> usize {
        self.grid.len()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    /// H[f] as a Q×2 matrix.
    pub fn at(&self, k: usize) -> &ComplexMat {
        &self.bins[k]
    }

    pub fn bins(&self) -> &[ComplexMat] {
        &self.bins
    }

    pub fn left(&self, q: usize, k: usize) -> C64 {
        self.bins[k][(q, 0)]
    }

    pub fn right(&self, q: usize, k: usize) -> C64 {
        self.bins[k][(q, 1)]
    }

    /// Hᵀ[f] restricted to one direction: the 2-vector (left, right).
    pub fn pair(&self, q: usize, k: usize) -> [C64; 2] {
        [self.left(q, k), self.right(q, k)]
    }

    /// Set restricted to the given grid indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            grid: self.grid.subset(indices),
            freqs: self.freqs.clone(),
            bins: self.bins.iter().map(|m| m.select_rows(indices)).collect(),
            held_above_hz: self.held_above_hz,
        }
    }

    /// Applies `f(q, k, h)` to every entry, returning a new set.
    pub fn map_rows(&self, f: impl Fn(usize, usize, C64) -> C64) -> Self {
        let bins = self
            .bins
            .iter()
            .enumerate()
            .map(|(k, m)| ComplexMat::from_fn(m.nrows(), 2, |q, e| f(q, k, m[(q, e)])))
            .collect();
        Self {
            grid: self.grid.clone(),
            freqs: self.freqs.clone(),
            bins,
            held_above_hz: self.held_above_hz,
        }
    }
}

/// Rigid spherical head with point receivers on its surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereHeadParams {
    pub radius: f64,
    /// Ear azimuth in degrees; the left ear sits at +ear_azimuth_deg, the right at its negative.
    pub ear_azimuth_deg: f64,
    pub speed_of_sound: f64,
}

impl Default for SphereHeadParams {
    fn default() -> Self {
        Self {
            radius: 0.0875,
            ear_azimuth_deg: 100.0,
            speed_of_sound: 343.0,
        }
    }
}

impl SphereHeadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.speed_of_sound > 0.0) {
            return Err(Error::Config(
                "sphere radius and speed of sound must be positive".into(),
            ));
        }
        Ok(())
    }

    fn ears(&self) -> [Direction; 2] {
        [
            Direction::from_degrees(self.ear_azimuth_deg, 0.0),
            Direction::from_degrees(-self.ear_azimuth_deg, 0.0),
        ]
    }
}

/// Pressure on a rigid sphere relative to the free field at its centre, for
/// a plane wave whose source direction makes angle acos(`cos_incidence`)
/// with the receiver point. Phase convention matches the steering vectors
/// (a receiver nearer the source leads: positive phase).
pub fn sphere_response(params: &SphereHeadParams, cos_incidence: f64, freq: f64) -> Result<C64> {
    let k = 2.0 * PI * freq / params.speed_of_sound;
    if freq < LOW_FREQ_LIMIT {
        return Ok(C64::from_polar(1.0, k * params.radius * cos_incidence));
    }
    let x = k * params.radius;
    let i = C64::new(0.0, 1.0);
    let eix = C64::from_polar(1.0, x);
    // Spherical Hankel functions of the first kind, upward recurrence.
    let mut h_prev = -i * eix / x; // h_0
    let mut h_cur = eix * (-i / (x * x) - 1.0 / x); // h_1
    let mut p_prev = 1.0; // P_0
    let mut p_cur = cos_incidence; // P_1
    let mut minus_i_pow = C64::new(1.0, 0.0);

    // n = 0 term: h_0' = -h_1.
    let mut sum = C64::new(1.0, 0.0) * p_prev / (-h_cur);
    let mut small_run = 0;
    for n in 1..SERIES_MAX_TERMS {
        minus_i_pow *= -i;
        let dh = h_prev - (n as f64 + 1.0) / x * h_cur;
        let term = minus_i_pow * (2 * n + 1) as f64 * p_cur / dh;
        sum += term;
        if !sum.re.is_finite() || !sum.im.is_finite() {
            return Err(Error::SeriesNotConverged(n));
        }
        if n as f64 > x && term.norm() < SERIES_REL_TOL * sum.norm() {
            small_run += 1;
            if small_run >= 2 {
                let phys = i / (x * x) * sum;
                return Ok(phys.conj());
            }
        } else {
            small_run = 0;
        }
        let h_next = (2 * n + 1) as f64 / x * h_cur - h_prev;
        h_prev = h_cur;
        h_cur = h_next;
        let p_next =
            ((2 * n + 1) as f64 * cos_incidence * p_cur - n as f64 * p_prev) / (n as f64 + 1.0);
        p_prev = p_cur;
        p_cur = p_next;
    }
    Err(Error::SeriesNotConverged(SERIES_MAX_TERMS))
}

/// Left and right ear responses of the sphere model for one source direction.
pub fn sphere_hrtf(
    params: &SphereHeadParams,
    dir: &Direction,
    freqs: &FreqGrid,
) -> Result<(Vec<C64>, Vec<C64>)> {
    params.validate()?;
    let u = dir.unit_vector();
    let [el, er] = params.ears().map(|e| e.unit_vector());
    let cos_l = (u[0] * el[0] + u[1] * el[1] + u[2] * el[2]).clamp(-1.0, 1.0);
    let cos_r = (u[0] * er[0] + u[1] * er[1] + u[2] * er[2]).clamp(-1.0, 1.0);
    let mut left = Vec::with_capacity(freqs.num_bins());
    let mut right = Vec::with_capacity(freqs.num_bins());
    for &f in freqs.bins() {
        left.push(sphere_response(params, cos_l, f)?);
        right.push(sphere_response(params, cos_r, f)?);
    }
    Ok((left, right))
}

/// Sphere-model HRTF set over a whole grid.
pub fn sphere_hrtf_set(
    params: &SphereHeadParams,
    grid: &DirectionGrid,
    freqs: &FreqGrid,
) -> Result<HrtfSet> {
    let per_dir = grid
        .iter()
        .map(|d| sphere_hrtf(params, d, freqs))
        .collect::<Result<Vec<_>>>()?;
    let bins = (0..freqs.num_bins())
        .map(|k| {
            ComplexMat::from_fn(grid.len(), 2, |q, e| {
                if e == 0 {
                    per_dir[q].0[k]
                } else {
                    per_dir[q].1[k]
                }
            })
        })
        .collect();
    HrtfSet::from_bins(grid.clone(), freqs.clone(), bins)
}

/// Interaural time difference (right-ear lag, seconds) from the HRTF phase,
/// averaged over 200–1500 Hz.
pub fn itd_of(set: &HrtfSet, dir: &Direction) -> Result<f64> {
    let q = set.grid.index_of(dir).ok_or(Error::DirectionOffGrid {
        az_deg: dir.azimuth_deg(),
        el_deg: dir.elevation_deg(),
    })?;
    let mut unwrapped = Vec::with_capacity(set.num_bins());
    let mut prev = 0.0;
    for k in 0..set.num_bins() {
        let raw = (set.left(q, k) * set.right(q, k).conj()).arg();
        let mut ph = raw;
        if k > 0 {
            ph = raw + 2.0 * PI * ((prev - raw) / (2.0 * PI)).round();
        }
        unwrapped.push(ph);
        prev = ph;
    }
    let band = set.freqs.band(200.0, 1500.0);
    let n = band.len();
    if n == 0 {
        return Err(Error::Shape("no bins in the 200-1500 Hz ITD band".into()));
    }
    let total: f64 = band
        .map(|k| unwrapped[k] / (2.0 * PI * set.freqs.hz(k)))
        .sum();
    Ok(total / n as f64)
}

/// Interaural level difference (left over right, dB) for direction index `q` at bin `k`.
pub fn ild_db(set: &HrtfSet, q: usize, k: usize) -> f64 {
    20.0 * (set.left(q, k).norm() / set.right(q, k).norm()).log10()
}

const CSV_HEADER: &str = "az_deg,el_deg,freq_hz,re_L,im_L,re_R,im_R";

/// Serializes a set in the grid CSV format.
pub fn hrtf_to_csv(set: &HrtfSet) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (q, d) in set.grid.iter().enumerate() {
        for k in 0..set.num_bins() {
            let (l, r) = (set.left(q, k), set.right(q, k));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                d.azimuth_deg(),
                d.elevation_deg(),
                set.freqs.hz(k),
                l.re,
                l.im,
                r.re,
                r.im
            );
        }
    }
    out
}

pub fn save_hrtf_grid(set: &HrtfSet, path: &Path) -> Result<()> {
    std::fs::write(path, hrtf_to_csv(set))?;
    Ok(())
}

pub fn load_hrtf_grid(path: &Path, grid: &DirectionGrid, freqs: &FreqGrid) -> Result<HrtfSet> {
    let text = std::fs::read_to_string(path)?;
    parse_hrtf_csv(&text, grid, freqs)
}

type Row = (f64, C64, C64);

/// Parses grid CSV text and resamples it onto `grid` × `freqs`.
///
/// Frequencies are linearly interpolated (real and imaginary parts); bins
/// above the file's highest frequency hold its last value and set
/// `held_above_hz`.
pub fn parse_hrtf_csv(text: &str, grid: &DirectionGrid, freqs: &FreqGrid) -> Result<HrtfSet> {
    let mut saw_header = false;
    let mut entries: Vec<(Direction, Vec<Row>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.join(",") != CSV_HEADER {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected header `{CSV_HEADER}`"),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 7];
        for (j, f) in fields.iter().enumerate() {
            v[j] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("column {} (`{f}`): {e}", j + 1),
            })?;
            if !v[j].is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("column {} is not finite", j + 1),
                });
            }
        }
        let dir = Direction::from_degrees(v[0], v[1]);
        let row = (v[2], C64::new(v[3], v[4]), C64::new(v[5], v[6]));
        match entries.iter_mut().find(|(d, _)| *d == dir) {
            Some((_, rows)) => rows.push(row),
            None => entries.push((dir, vec![row])),
        }
    }
    if !saw_header {
        return Err(Error::Parse {
            line: 0,
            msg: "missing header".into(),
        });
    }
    let mut held = None;
    let mut per_dir: Vec<(Vec<C64>, Vec<C64>)> = Vec::with_capacity(grid.len());
    for d in grid.iter() {
        let Some((_, rows)) = entries.iter().find(|(e, _)| e == d) else {
            return Err(Error::GridMismatch(format!(
                "file has no data for direction az {:.3} deg, el {:.3} deg",
                d.azimuth_deg(),
                d.elevation_deg()
            )));
        };
        // Deduplicate by frequency, keeping the last row.
        let mut by_freq: BTreeMap<u64, Row> = BTreeMap::new();
        for r in rows {
            by_freq.insert(r.0.to_bits(), *r);
        }
        let mut sorted: Vec<Row> = by_freq.into_values().collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let top = sorted.last().map_or(0.0, |r| r.0);
        if freqs.bins().iter().any(|&f| f > top + 1e-9) {
            held = Some(top);
        }
        let mut left = Vec::with_capacity(freqs.num_bins());
        let mut right = Vec::with_capacity(freqs.num_bins());
        for &f in freqs.bins() {
            let (l, r) = interpolate(&sorted, f);
            left.push(l);
            right.push(r);
        }
        per_dir.push((left, right));
    }
    let bins = (0..freqs.num_bins())
        .map(|k| {
            ComplexMat::from_fn(grid.len(), 2, |q, e| {
                if e == 0 {
                    per_dir[q].0[k]
                } else {
                    per_dir[q].1[k]
                }
            })
        })
        .collect();
    let mut set = HrtfSet::from_bins(grid.clone(), freqs.clone(), bins)?;
    set.held_above_hz = held;
    Ok(set)
}

fn interpolate(rows: &[Row], f: f64) -> (C64, C64) {
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    if f <= first.0 {
        return (first.1, first.2);
    }
    if f >= last.0 {
        return (last.1, last.2);
    }
    let j = rows.partition_point(|r| r.0 <= f);
    let (a, b) = (&rows[j - 1], &rows[j]);
    if a.0 == f {
        return (a.1, a.2);
    }
    let t = (f - a.0) / (b.0 - a.0);
    (a.1 + (b.1 - a.1) * t, a.2 + (b.2 - a.2) * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn freqs() -> FreqGrid {
        FreqGrid::new(48_000.0, 512)
    }

    #[test]
    fn ipsilateral_ear_louder_at_3k() {
        let p = SphereHeadParams::default();
        let f = FreqGrid::new(48_000.0, 48); // 1 kHz spacing
        let (l, r) = sphere_hrtf(&p, &Direction::from_degrees(100.0, 0.0), &f).unwrap();
        assert!(l[3].norm() >= r[3].norm());
        assert!(l[3].norm() > 1.5 * r[3].norm());
    }

    #[test]
    fn frontal_source_symmetric() {
        let p = SphereHeadParams::default();
        let (l, r) = sphere_hrtf(&p, &Direction::from_degrees(0.0, 0.0), &freqs()).unwrap();
        for (a, b) in l.iter().zip(&r) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn transparent_at_dc() {
        let p = SphereHeadParams::default();
        for az in [0.0, 45.0, 100.0, 200.0] {
            let (l, r) = sphere_hrtf(&p, &Direction::from_degrees(az, 0.0), &freqs()).unwrap();
            assert!((l[0].norm() - 1.0).abs() < 1e-3 && (r[0].norm() - 1.0).abs() < 1e-3);
            assert_eq!(l[0].im, 0.0);
            // Series at its lowest evaluated frequency agrees with the limit.
            let s = sphere_response(&p, 0.3, 50.0).unwrap();
            assert!((s.norm() - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn ipsilateral_doubling_at_high_frequency() {
        let p = SphereHeadParams::default();
        let h = sphere_response(&p, 1.0, 20_000.0).unwrap();
        assert!((h.norm() - 2.0).abs() < 0.3, "{}", h.norm());
    }

    #[test]
    fn series_limit_reported() {
        let p = SphereHeadParams {
            radius: 2.0,
            ..SphereHeadParams::default()
        };
        assert!(matches!(
            sphere_response(&p, 0.5, 20_000.0),
            Err(Error::SeriesNotConverged(_))
        ));
    }

    #[test]
    fn mirror_symmetry() {
        let p = SphereHeadParams::default();
        for az in [10.0, 35.0, 90.0, 150.0] {
            let (l, r) = sphere_hrtf(&p, &Direction::from_degrees(az, 0.0), &freqs()).unwrap();
            let (lm, rm) = sphere_hrtf(&p, &Direction::from_degrees(-az, 0.0), &freqs()).unwrap();
            for k in 0..l.len() {
                assert!((l[k] - rm[k]).norm() < 1e-9);
                assert!((r[k] - lm[k]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn itd_examples() {
        let p = SphereHeadParams::default();
        let grid = DirectionGrid::horizontal(60);
        let set = sphere_hrtf_set(&p, &grid, &FreqGrid::new(48_000.0, 1024)).unwrap();
        let front = itd_of(&set, &Direction::from_degrees(0.0, 0.0)).unwrap();
        assert!(front.abs() < 5e-6);
        let lateral = itd_of(&set, &Direction::from_degrees(90.0, 0.0)).unwrap();
        let woodworth = 0.0875 * (PI / 2.0 + 1.0) / 343.0;
        assert!(
            (lateral - woodworth).abs() / woodworth < 0.2,
            "{lateral} vs {woodworth}"
        );
        for az in [30.0, 60.0, 90.0, 150.0] {
            let a = itd_of(&set, &Direction::from_degrees(az, 0.0)).unwrap();
            let b = itd_of(&set, &Direction::from_degrees(-az, 0.0)).unwrap();
            assert!((a + b).abs() < 5e-6);
        }
    }

    #[test]
    fn head_shadow_grows_with_frequency() {
        let p = SphereHeadParams::default();
        let grid = DirectionGrid::horizontal(12);
        let f = FreqGrid::new(48_000.0, 192); // 250 Hz spacing
        let set = sphere_hrtf_set(&p, &grid, &f).unwrap();
        for q in [2, 3, 4, 8, 9, 10] {
            assert!(
                ild_db(&set, q, 1).abs() < ild_db(&set, q, 16).abs(),
                "q {q}"
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = SphereHeadParams::default();
        let grid = DirectionGrid::horizontal(8);
        let f = FreqGrid::new(16_000.0, 64);
        let set = sphere_hrtf_set(&p, &grid, &f).unwrap();
        let text = hrtf_to_csv(&set);
        let back = parse_hrtf_csv(&text, &grid, &f).unwrap();
        assert!(back.held_above_hz.is_none());
        for k in 0..set.num_bins() {
            assert!((set.at(k) - back.at(k)).norm() < 1e-12);
        }
        // Row order does not matter; comments are skipped.
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("# comment\n{header}\n{}\n", lines.join("\n"));
        let again = parse_hrtf_csv(&shuffled, &grid, &f).unwrap();
        assert!((again.at(5) - set.at(5)).norm() < 1e-12);
    }

    #[test]
    fn missing_direction_is_named() {
        let p = SphereHeadParams::default();
        let f = FreqGrid::new(16_000.0, 32);
        let small = sphere_hrtf_set(&p, &DirectionGrid::horizontal(4), &f).unwrap();
        let text = hrtf_to_csv(&small);
        let err = parse_hrtf_csv(&text, &DirectionGrid::horizontal(8), &f).unwrap_err();
        match err {
            Error::GridMismatch(msg) => assert!(msg.contains("az 45.000"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn upper_bins_held_from_lower_rate_file() {
        let p = SphereHeadParams::default();
        let grid = DirectionGrid::horizontal(4);
        let lo = FreqGrid::new(24_000.0, 64);
        let hi = FreqGrid::new(48_000.0, 128);
        let set = sphere_hrtf_set(&p, &grid, &lo).unwrap();
        let loaded = parse_hrtf_csv(&hrtf_to_csv(&set), &grid, &hi).unwrap();
        assert_eq!(loaded.held_above_hz, Some(12_000.0));
        // Same bin spacing: shared bins are copied, the upper half repeats the last file bin.
        for k in 0..=32 {
            assert!((loaded.at(k) - set.at(k)).norm() < 1e-12);
        }
        for k in 33..=64 {
            assert!((loaded.at(k) - set.at(32)).norm() < 1e-12);
        }
        // Between file bins the value is the linear midpoint.
        let half = FreqGrid::new(24_000.0, 128);
        let mid = parse_hrtf_csv(&hrtf_to_csv(&set), &grid, &half).unwrap();
        let expect = (set.at(3) + set.at(4)) * C64::new(0.5, 0.0);
        assert!((mid.at(7) - expect).norm() < 1e-12);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let grid = DirectionGrid::horizontal(1);
        let f = FreqGrid::new(16_000.0, 4);
        let bad = format!("{CSV_HEADER}\n0,0,0,1,0,1,0\n0,0,x,1,0,1,0\n");
        match parse_hrtf_csv(&bad, &grid, &f) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_hrtf_csv("a,b\n", &grid, &f) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
