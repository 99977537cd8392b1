//! 2-D projections: principal components and exact t-SNE.

use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMethod {
    Tsne,
    Pca,
}

impl FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsne" => Ok(Self::Tsne),
            "pca" => Ok(Self::Pca),
            other => Err(Error::Config(format!("unknown projection '{other}' (expected tsne or pca)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

fn to_matrix<T: AsRef<[f64]>>(points: &[T]) -> Result<DMatrix<f64>> {
    let m = points[0].as_ref().len();
    if m == 0 || points.iter().any(|p| p.as_ref().len() != m) {
        return Err(Error::Shape("projection inputs must share a non-zero length".into()));
    }
    if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("projection input".into()));
    }
    Ok(DMatrix::from_fn(points.len(), m, |i, j| points[i].as_ref()[j]))
}

/// Top-two principal component scores of the rows of `x`. Each axis is
/// signed so that its largest-magnitude score is positive.
fn pca_scores(x: &DMatrix<f64>) -> Vec<[f64; 2]> {
    let (n, m) = x.shape();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    if n <= m {
        let gram = &c * c.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &k in idx.iter().take(2) {
            let s = eig.eigenvalues[k].max(0.0).sqrt();
            axes.push((0..n).map(|i| eig.eigenvectors[(i, k)] * s).collect());
        }
    } else {
        let cov = c.transpose() * &c;
        let eig = SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &k in idx.iter().take(2) {
            let v = eig.eigenvectors.column(k);
            axes.push((0..n).map(|i| c.row(i).dot(&v.transpose())).collect());
        }
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; n]);
    }
    for a in axes.iter_mut() {
        let big = a.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if big < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
    }
    (0..n).map(|i| [axes[0][i], axes[1][i]]).collect()
}

fn sq_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities with per-point precision matched to `perplexity`
/// by bisection, symmetrized and normalized to sum 1.
fn joint_probabilities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut dsum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[i * n + j] - dmin) * beta).exp() };
                sum += row[j];
                dsum += (d[i * n + j] - dmin) * row[j];
            }
            let h = sum.ln() + beta * dsum / sum;
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    let mut joint = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = p[i * n + j] + p[j * n + i];
            total += joint[i * n + j];
        }
    }
    joint.iter_mut().for_each(|v| *v = (*v / total).max(1e-12));
    for i in 0..n {
        joint[i * n + i] = 0.0;
    }
    joint
}

/// Exact t-SNE with principal-component initialization. Identical inputs
/// all map to the origin.
pub fn tsne<T: AsRef<[f64]>>(points: &[T], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if !(cfg.perplexity.is_finite() && cfg.perplexity > 0.0) {
        return Err(Error::Config("perplexity must be positive".into()));
    }
    let x = to_matrix(points)?;
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0);
    let p = joint_probabilities(&sq_distances(&x), n, perplexity);

    let mut y = pca_scores(&x);
    let mean0 = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
    let std0 = (y.iter().map(|v| (v[0] - mean0).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std0 == 0.0 {
        // the largest-variance axis has no spread: every input is the same point
        return Ok(vec![[0.0, 0.0]; n]);
    }
    y.iter_mut().for_each(|v| *v = [v[0] / std0 * 1e-4, v[1] / std0 * 1e-4]);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                let q = 1.0 / (1.0 + d);
                num[i * n + j] = q;
                num[j * n + i] = q;
                zsum += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let coef = (exaggeration * p[i * n + j] - q / zsum) * q;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                let flipped = grad[i][k] * update[i][k] < 0.0;
                gains[i][k] = if flipped { gains[i][k] + 0.2 } else { gains[i][k] * 0.8 };
                gains[i][k] = gains[i][k].max(0.01);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let c = y.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        let c = [c[0] / n as f64, c[1] / n as f64];
        y.iter_mut().for_each(|v| *v = [v[0] - c[0], v[1] - c[1]]);
    }
    if y.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
        return Err(Error::NonFinite("t-SNE embedding".into()));
    }
    Ok(y)
}

/// Projects embeddings to 2-D. t-SNE needs at least 3 points, PCA at least 2.
/// Both methods are deterministic; `seed` is part of the interface for
/// randomized projections and does not affect the built-in ones.
pub fn project_2d<T: AsRef<[f64]>>(
    embeddings: &[T],
    method: ProjectionMethod,
    _seed: u64,
    perplexity: f64,
) -> Result<Vec<[f64; 2]>> {
    match method {
        ProjectionMethod::Pca => {
            if embeddings.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "PCA needs at least 2 points, got {}",
                    embeddings.len()
                )));
            }
            Ok(pca_scores(&to_matrix(embeddings)?))
        }
        ProjectionMethod::Tsne => tsne(
            embeddings,
            &TsneConfig {
                perplexity,
                ..TsneConfig::default()
            },
        ),
    }
}

impl AsRef<[f64]> for super::DegradationEmbedding {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}
