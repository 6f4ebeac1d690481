use crate::error::{Error, Result};
use crate::linalg::{hermitian_asymmetry, trace_re, ComplexMat, ComplexVec, C64};
use crate::stft::SpectralFrame;

/// Diagonal term added to the first outer product so R_x starts positive definite.
const INIT_LOADING: f64 = 1e-8;

/// Per-bin microphone covariance R_x[f].
#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    pub bins: Vec<ComplexMat>,
    pub frames: usize,
    pub beta: f64,
}

impl CovEstimate {
    pub fn at(&self, k: usize) -> &ComplexMat {
        &self.bins[k]
    }

    /// Checks Hermitian symmetry and positive semidefiniteness of every bin.
    pub fn is_valid(&self) -> bool {
        self.bins.iter().all(|r| {
            let tr = trace_re(r).abs().max(1e-300);
            let eig = r.clone().symmetric_eigenvalues();
            hermitian_asymmetry(r) <= 1e-12 && eig.iter().all(|&l| l >= -1e-10 * tr)
        })
    }
}

/// Recursive covariance average, `R[t] = β·R[t−1] + (1−β)·x xᴴ`.
#[derive(Debug, Clone)]
pub struct CovarianceTracker {
    beta: f64,
    bins: Vec<ComplexMat>,
    frames: usize,
}

impl CovarianceTracker {
    pub fn new(beta: f64, num_bins: usize, num_mics: usize) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!(
                "forgetting factor must lie in (0, 1], got {beta}"
            )));
        }
        Ok(Self {
            beta,
            bins: vec![ComplexMat::zeros(num_mics, num_mics); num_bins],
            frames: 0,
        })
    }

    pub fn update(&mut self, frame: &SpectralFrame) {
        let first = self.frames == 0;
        let beta = self.beta;
        for (k, r) in self.bins.iter_mut().enumerate() {
            let x = frame.bin(k);
            let n = x.len();
            if first {
                for i in 0..n {
                    for j in 0..n {
                        r[(i, j)] = x[i] * x[j].conj();
                    }
                    r[(i, i)] += INIT_LOADING;
                }
            } else {
                for i in 0..n {
                    for j in 0..n {
                        r[(i, j)] = r[(i, j)] * beta + x[i] * x[j].conj() * (1.0 - beta);
                    }
                }
            }
        }
        self.frames += 1;
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn at(&self, k: usize) -> &ComplexMat {
        &self.bins[k]
    }

    pub fn bins(&self) -> &[ComplexMat] {
        &self.bins
    }

    pub fn snapshot(&self) -> CovEstimate {
        CovEstimate {
            bins: self.bins.clone(),
            frames: self.frames,
            beta: self.beta,
        }
    }
}

/// Covariance estimate after every frame of `frames`.
pub fn estimate_covariance(frames: &[SpectralFrame], beta: f64) -> Result<Vec<CovEstimate>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut tracker = CovarianceTracker::new(beta, first.num_bins(), first.channels())?;
    Ok(frames
        .iter()
        .map(|f| {
            tracker.update(f);
            tracker.snapshot()
        })
        .collect())
}

/// Source covariance model `R̂_s = R̂_sd + σ̂_r²·I` per bin: a direct block
/// over the detected directions plus a diffuse floor on every direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCovEstimate {
    pub direct: Vec<ComplexMat>,
    pub diffuse: Vec<f64>,
}

impl SourceCovEstimate {
    /// Full Q'×Q' matrix with the direct block first.
    pub fn full(&self, k: usize, total_dirs: usize) -> ComplexMat {
        let d = self.direct[k].nrows();
        let mut r = ComplexMat::zeros(total_dirs, total_dirs);
        r.view_mut((0, 0), (d, d)).copy_from(&self.direct[k]);
        for i in 0..total_dirs {
            r[(i, i)] += C64::new(self.diffuse[k], 0.0);
        }
        r
    }
}

/// Streaming estimator for [`SourceCovEstimate`]: recursive averages of
/// ŝ_d ŝ_dᴴ and of the per-microphone residual power divided by N_m.
#[derive(Debug, Clone)]
pub struct SourceCovTracker {
    beta: f64,
    direct: Vec<ComplexMat>,
    diffuse: Vec<f64>,
    frames: usize,
}

impl SourceCovTracker {
    pub fn new(beta: f64, num_bins: usize, num_direct: usize) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!(
                "forgetting factor must lie in (0, 1], got {beta}"
            )));
        }
        Ok(Self {
            beta,
            direct: vec![ComplexMat::zeros(num_direct, num_direct); num_bins],
            diffuse: vec![0.0; num_bins],
            frames: 0,
        })
    }

    /// `s_d` is the direct estimate per bin, `residual` the residual microphone vector per bin.
    pub fn update(&mut self, s_d: &[ComplexVec], residual: &[ComplexVec]) -> Result<()> {
        if s_d.len() != self.direct.len() || residual.len() != self.direct.len() {
            return Err(Error::Shape(
                "source covariance update needs one entry per bin".into(),
            ));
        }
        let first = self.frames == 0;
        let beta = self.beta;
        for k in 0..self.direct.len() {
            let s = &s_d[k];
            let r = &residual[k];
            if s.len() != self.direct[k].nrows() {
                return Err(Error::Shape("direct estimate has the wrong length".into()));
            }
            let outer = s * s.adjoint();
            let n = r.len().max(1) as f64;
            let sigma = r.norm_squared() / n / n;
            if first {
                self.direct[k] = outer;
                self.diffuse[k] = sigma;
            } else {
                self.direct[k] =
                    &self.direct[k] * C64::new(beta, 0.0) + outer * C64::new(1.0 - beta, 0.0);
                self.diffuse[k] = beta * self.diffuse[k] + (1.0 - beta) * sigma;
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn estimate(&self) -> SourceCovEstimate {
        SourceCovEstimate {
            direct: self.direct.clone(),
            diffuse: self.diffuse.clone(),
        }
    }
}

/// Builds the source covariance from per-frame direct estimates and residuals
/// (`[frame][bin]`), averaging with forgetting factor `beta`.
pub fn build_source_cov(
    s_d_frames: &[Vec<ComplexVec>],
    residual_frames: &[Vec<ComplexVec>],
    beta: f64,
) -> Result<SourceCovEstimate> {
    if s_d_frames.len() != residual_frames.len() {
        return Err(Error::Shape(format!(
            "{} direct frames vs {} residual frames",
            s_d_frames.len(),
            residual_frames.len()
        )));
    }
    let bins = s_d_frames.first().map_or(0, |f| f.len());
    let d = s_d_frames
        .first()
        .and_then(|f| f.first())
        .map_or(0, |v| v.len());
    let mut tracker = SourceCovTracker::new(beta, bins, d)?;
    for (s, r) in s_d_frames.iter().zip(residual_frames) {
        tracker.update(s, r)?;
    }
    Ok(tracker.estimate())
}
