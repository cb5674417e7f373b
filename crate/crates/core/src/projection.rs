//! Distance metrics and PCA reduction of embedding matrices.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{CorpusError, EmbeddingMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("zero-norm vector has no cosine direction")]
    ZeroNorm,
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("component count {k} out of range 1..={max} (n = {n}, d = {d})")]
    ComponentsOutOfRange { k: usize, max: usize, n: usize, d: usize },
    #[error("PCA needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("only {positive} directions with positive variance, {requested} requested")]
    RankDeficient { requested: usize, positive: usize },
}

/// Distance used for neighborhood queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "l2" | "euclidean" => Ok(Metric::L2),
            other => Err(format!("unknown metric {other:?} (expected cosine or l2)")),
        }
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `1 - u.v / (|u| |v|)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, ProjectionError> {
    if u.len() != v.len() {
        return Err(ProjectionError::LengthMismatch(u.len(), v.len()));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ProjectionError::ZeroNorm);
    }
    Ok(cosine_kernel(u, v, nu, nv))
}

/// Identical vectors are exactly 0 apart; the dot-product form can leave a
/// rounding residue.
#[inline]
pub(crate) fn cosine_kernel(u: &[f64], v: &[f64], norm_u: f64, norm_v: f64) -> f64 {
    if u == v {
        return 0.0;
    }
    (1.0 - dot(u, v) / (norm_u * norm_v)).clamp(0.0, 2.0)
}

/// Euclidean distance. Summation runs in coordinate order; the neighbor
/// index uses the same kernel so boundary decisions agree bit-for-bit.
pub fn l2_distance(u: &[f64], v: &[f64]) -> Result<f64, ProjectionError> {
    if u.len() != v.len() {
        return Err(ProjectionError::LengthMismatch(u.len(), v.len()));
    }
    Ok(l2_unchecked(u, v))
}

#[inline]
pub(crate) fn l2_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        let t = a - b;
        acc += t * t;
    }
    acc.sqrt()
}

/// Mean-centered PCA projection.
#[derive(Clone, Debug)]
pub struct ProjectedSpace {
    pub k: usize,
    pub d: usize,
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `d`, row-major.
    pub components: Vec<f64>,
    /// `n` rows of length `k`, row-major.
    pub projected: Vec<f64>,
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl ProjectedSpace {
    pub fn n(&self) -> usize {
        self.projected.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn component(&self, j: usize) -> &[f64] {
        &self.components[j * self.d..(j + 1) * self.d]
    }

    pub fn projected_row(&self, i: usize) -> &[f64] {
        &self.projected[i * self.k..(i + 1) * self.k]
    }

    /// Projects an arbitrary length-`d` vector onto the basis.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (0..self.k).map(|j| dot(&centered, self.component(j))).collect()
    }

    /// Projected coordinates narrowed into the corpus matrix format.
    pub fn to_matrix(&self) -> Result<EmbeddingMatrix, CorpusError> {
        EmbeddingMatrix::new(
            self.n(),
            self.k,
            self.projected.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Flips `row` so its largest-magnitude coordinate is positive (first index
/// wins ties).
fn canonical_sign(row: &mut [f64]) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[best].abs() {
            best = i;
        }
    }
    if row.get(best).is_some_and(|v| *v < 0.0) {
        row.iter_mut().for_each(|v| *v = -*v);
    }
}

/// PCA of `matrix` keeping `k` components.
///
/// The sample covariance uses the `n - 1` denominator. When `d <= n` the
/// `d x d` covariance is eigendecomposed; otherwise the `n x n` Gram matrix
/// is, and components are recovered from it. Either way all arithmetic is
/// `f64`.
pub fn compute_pca(matrix: &EmbeddingMatrix, k: usize) -> Result<ProjectedSpace, ProjectionError> {
    let (n, d) = (matrix.n(), matrix.d());
    if n < 2 {
        return Err(ProjectionError::TooFewPoints(n));
    }
    let max_k = (n - 1).min(d);
    if k == 0 || k > max_k {
        return Err(ProjectionError::ComponentsOutOfRange { k, max: max_k, n, d });
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(matrix.row(i)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| f64::from(matrix.row(i)[j]) - mean[j]);
    let denom = (n - 1) as f64;

    let (eigenvalues, basis) = if d <= n {
        let cov = (centered.transpose() * &centered) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending_order(eig.eigenvalues.as_slice());
        let values: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
        let vectors: Vec<Vec<f64>> = order
            .iter()
            .map(|&j| eig.eigenvectors.column(j).iter().copied().collect())
            .collect();
        (values, vectors)
    } else {
        let gram = (&centered * centered.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending_order(eig.eigenvalues.as_slice());
        let values: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
        // v = X^T u / sqrt((n-1) lambda); only meaningful for positive lambda.
        let vectors: Vec<Vec<f64>> = order
            .iter()
            .take(k.min(order.len()))
            .map(|&j| {
                let lambda = eig.eigenvalues[j].max(f64::MIN_POSITIVE);
                let u = eig.eigenvectors.column(j);
                let v = centered.transpose() * u;
                let scale = 1.0 / (denom * lambda).sqrt();
                v.iter().map(|x| x * scale).collect()
            })
            .collect();
        (values, vectors)
    };

    let total_variance: f64 = (0..d)
        .map(|j| centered.column(j).iter().map(|x| x * x).sum::<f64>() / denom)
        .sum();
    let top = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let tolerance = top * (n.max(d) as f64) * f64::EPSILON * 16.0;
    let positive = eigenvalues.iter().filter(|&&l| l > tolerance && l > 0.0).count();
    if positive < k {
        return Err(ProjectionError::RankDeficient {
            requested: k,
            positive,
        });
    }

    let mut components = Vec::with_capacity(k * d);
    for mut row in basis.into_iter().take(k) {
        let norm = dot(&row, &row).sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
        canonical_sign(&mut row);
        components.extend(row);
    }

    let projected: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            (0..k)
                .map(|j| dot(&row, &components[j * d..(j + 1) * d]))
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(ProjectedSpace {
        k,
        d,
        mean,
        components,
        projected,
        explained_variance: eigenvalues[..k].to_vec(),
        total_variance,
    })
}

/// Indices sorting `values` descending; equal values keep ascending index.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}
