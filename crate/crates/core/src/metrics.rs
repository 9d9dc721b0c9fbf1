//! Objective metrics over caller-provided arrays and feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::tensor::Array;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("non-finite input")]
    NonFinite,
    #[error("feature set contains only duplicates of one point")]
    Degenerate,
    #[error("audio duration must be positive (got {0})")]
    Duration(f64),
    #[error("empty input")]
    Empty,
}

/// Frame shift of the synthetic spectrograms, in seconds.
pub const FRAME_SHIFT_SECONDS: f64 = 0.010;

/// SSIM stabilizers used when none are given.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Rows of feature vectors, one per item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    values: DMatrix<f64>,
}

impl FeatureSet {
    pub fn from_array(a: &Array) -> Self {
        Self {
            values: DMatrix::from_row_slice(a.rows(), a.cols(), a.data()),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(MetricError::Dim(dim, bad.len()));
        }
        let flat: Vec<f64> = rows.concat();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self {
            values: DMatrix::from_row_slice(rows.len(), dim, &flat),
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>), MetricError> {
        let n = self.rows();
        if n < 2 {
            return Err(MetricError::TooFewRows { need: 2, got: n });
        }
        let mean = self.values.row_mean().transpose();
        let mut centered = self.values.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mean, cov))
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_1 - mu_2|^2 + Tr(S_1 + S_2 - 2 (S_1 S_2)^(1/2))`, the squared
/// 2-Wasserstein distance between two Gaussians.
///
/// The trace of the cross term is computed as `Tr((S_1^½ S_2 S_1^½)^½)` with
/// negative eigenvalues clamped to zero.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64, MetricError> {
    if mu1.len() != mu2.len() {
        return Err(MetricError::Dim(mu1.len(), mu2.len()));
    }
    let root1 = sym_sqrt(cov1);
    let inner = &root1 * cov2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(MetricError::NonFinite);
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64, MetricError> {
    if real.dim() != gen.dim() {
        return Err(MetricError::Dim(real.dim(), gen.dim()));
    }
    let (m1, c1) = real.moments()?;
    let (m2, c2) = gen.moments()?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// 2-Wasserstein distance between the Gaussian fit of `samples` and an
/// analytic target `N(mean, cov)`.
pub fn gaussian_w2(
    samples: &FeatureSet,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64, MetricError> {
    let (m, c) = samples.moments()?;
    Ok(frechet_distance(&m, &c, mean, cov)?.sqrt())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Structural similarity computed once over the whole array.
pub fn ssim(p: &Array, a: &Array, c1: f64, c2: f64) -> Result<f64, MetricError> {
    if p.shape() != a.shape() {
        return Err(MetricError::Length(p.len(), a.len()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = p.len() as f64;
    let mp = p.mean();
    let ma = a.mean();
    let (mut vp, mut va, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in p.data().iter().zip(a.data()) {
        vp += (x - mp) * (x - mp);
        va += (y - ma) * (y - ma);
        cov += (x - mp) * (y - ma);
    }
    let (vp, va, cov) = (vp / n, va / n, cov / n);
    Ok(((2.0 * mp * ma + c1) * (2.0 * cov + c2))
        / ((mp * mp + ma * ma + c1) * (vp + va + c2)))
}

fn paired(f: &[f64], g: &[f64]) -> Result<(), MetricError> {
    if f.len() != g.len() {
        return Err(MetricError::Length(f.len(), g.len()));
    }
    if f.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(f: &[f64], g: &[f64]) -> Result<f64, MetricError> {
    paired(f, g)?;
    let ms = f.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.len() as f64;
    Ok(ms.sqrt())
}

/// Frame error of two per-frame F0 tracks, as their mean absolute difference.
pub fn ffe(f: &[f64], g: &[f64]) -> Result<f64, MetricError> {
    paired(f, g)?;
    Ok(f.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum McdScale {
    /// Mean Euclidean distance between frame vectors.
    #[default]
    Plain,
    /// Scaled by `10 / ln 10 * sqrt 2`, the usual dB convention.
    Decibel,
}

/// Mean per-frame distance between two `[frames, coeffs]` arrays.
pub fn mcd(p: &Array, a: &Array, scale: McdScale) -> Result<f64, MetricError> {
    if p.rows() != a.rows() {
        return Err(MetricError::Length(p.rows(), a.rows()));
    }
    if p.cols() != a.cols() {
        return Err(MetricError::Dim(p.cols(), a.cols()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = (0..p.rows())
        .map(|r| {
            p.row(r)
                .iter()
                .zip(a.row(r))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    let factor = match scale {
        McdScale::Plain => 1.0,
        McdScale::Decibel => 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2,
    };
    Ok(factor * total / p.rows() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Fraction of real points inside the generated manifold.
///
/// A real point is inside when its distance to the nearest generated point
/// `g` is at most the distance from `g` to its own `k`-th nearest generated
/// neighbour.
pub fn recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<f64, MetricError> {
    if real.dim() != gen.dim() {
        return Err(MetricError::Dim(real.dim(), gen.dim()));
    }
    if k == 0 || gen.rows() < k + 1 || real.rows() < k + 1 {
        return Err(MetricError::TooFewRows {
            need: k + 1,
            got: gen.rows().min(real.rows()),
        });
    }
    let g: Vec<Vec<f64>> = (0..gen.rows()).map(|i| gen.row(i)).collect();
    if g.iter().all(|r| *r == g[0]) {
        return Err(MetricError::Degenerate);
    }
    let radii: Vec<f64> = (0..g.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..g.len())
                .filter(|&j| j != i)
                .map(|j| sq_dist(&g[i], &g[j]))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect();
    let inside = (0..real.rows())
        .filter(|&i| {
            let r = real.row(i);
            let (nn, d) = g
                .iter()
                .enumerate()
                .map(|(j, gj)| (j, sq_dist(&r, gj)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("gen is non-empty");
            d <= radii[nn]
        })
        .count();
    Ok(inside as f64 / real.rows() as f64)
}

/// Compute seconds per second of produced audio.
pub fn rtf(synthesis_seconds: f64, audio_seconds: f64) -> Result<f64, MetricError> {
    if !(audio_seconds > 0.0) {
        return Err(MetricError::Duration(audio_seconds));
    }
    Ok(synthesis_seconds / audio_seconds)
}

/// Duration covered by `frames` spectrogram frames.
pub fn audio_seconds(frames: usize) -> f64 {
    frames as f64 * FRAME_SHIFT_SECONDS
}

/// `|A - B|_F` of two equally sized matrices.
pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}
