//! Degradation analysis: pooled patch-token statistics, ground-truth-relative
//! difference embeddings, 2-D projection and cluster statistics.

mod extractor;
mod project;

pub use extractor::{extract_patch_tokens, FeatureExtractor, PatchTokenGrid, ToyExtractor, TOY_SEED};
pub use project::{project_2d, ProjectionMethod, TsneConfig};

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-channel mean followed by per-channel population std (length `2D`).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding(Vec<f64>);

impl PooledEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || !v.len().is_multiple_of(2) {
            return Err(Error::Shape(format!("pooled embedding length {} is not even", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pooled embedding".into()));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Elementwise absolute difference of two pooled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationEmbedding(Vec<f64>);

impl DegradationEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidInput("degradation embedding entries must be finite and >= 0".into()));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean and population std per channel. Each channel's values are sorted
/// before summation, so the result does not depend on token order.
pub fn pool_embedding(tokens: &PatchTokenGrid) -> PooledEmbedding {
    let (l, d) = (tokens.len(), tokens.dim());
    let mut out = vec![0.0; 2 * d];
    let mut col = vec![0.0; l];
    for c in 0..d {
        for (i, v) in col.iter_mut().enumerate() {
            *v = tokens.token(i)[c];
        }
        col.sort_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / l as f64;
        let mut dev: Vec<f64> = col.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        out[c] = mean;
        out[d + c] = (dev.iter().sum::<f64>() / l as f64).sqrt();
    }
    PooledEmbedding(out)
}

/// `|deg - gt|`, elementwise.
pub fn degradation_embedding(deg: &PooledEmbedding, gt: &PooledEmbedding) -> Result<DegradationEmbedding> {
    if deg.0.len() != gt.0.len() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            deg.0.len(),
            gt.0.len()
        )));
    }
    Ok(DegradationEmbedding(deg.0.iter().zip(&gt.0).map(|(a, b)| (a - b).abs()).collect()))
}

/// Pooled embedding of one image.
pub fn embed_image(image: &Image, extractor: &dyn FeatureExtractor) -> Result<PooledEmbedding> {
    Ok(pool_embedding(&extract_patch_tokens(image, extractor)?))
}

/// Degradation embedding of `deg` relative to `gt`.
pub fn embed_pair(deg: &Image, gt: &Image, extractor: &dyn FeatureExtractor) -> Result<DegradationEmbedding> {
    degradation_embedding(&embed_image(deg, extractor)?, &embed_image(gt, extractor)?)
}

/// Componentwise mean of a set of embeddings.
pub fn centroid(embeddings: &[DegradationEmbedding]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("no embeddings".into()))?;
    let mut acc = vec![0.0; first.0.len()];
    for e in embeddings {
        if e.0.len() != acc.len() {
            return Err(Error::Shape("embeddings differ in length".into()));
        }
        acc.iter_mut().zip(&e.0).for_each(|(a, v)| *a += v);
    }
    let n = embeddings.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub label: String,
    pub mean: [f64; 2],
    pub count_kept: usize,
    pub count_dropped: usize,
    /// Per input point of this label, in input order: whether it was kept.
    pub kept: Vec<bool>,
}

fn mean_of(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Per label, in order of first appearance: drop points whose distance to
/// the cluster mean exceeds the mean distance by more than one (population)
/// standard deviation of the distances, then recompute the mean.
pub fn cluster_summaries(points: &[[f64; 2]], labels: &[String]) -> Result<Vec<ClusterSummary>> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} points for {} labels", points.len(), labels.len())));
    }
    let mut order: Vec<&String> = Vec::new();
    for l in labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    if order.is_empty() {
        log::warn!("cluster summary requested for an empty point set");
    }
    let mut out = Vec::with_capacity(order.len());
    for label in order {
        let group: Vec<[f64; 2]> = points.iter().zip(labels).filter(|(_, l)| *l == label).map(|(p, _)| *p).collect();
        let m = mean_of(&group);
        let d: Vec<f64> = group.iter().map(|p| dist(*p, m)).collect();
        let n = d.len() as f64;
        let md = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - md) * (v - md)).sum::<f64>() / n).sqrt();
        let kept: Vec<bool> = d.iter().map(|&v| v <= md + sd).collect();
        let kept_pts: Vec<[f64; 2]> = group.iter().zip(&kept).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
        out.push(ClusterSummary {
            label: label.clone(),
            mean: mean_of(&kept_pts),
            count_kept: kept_pts.len(),
            count_dropped: group.len() - kept_pts.len(),
            kept,
        });
    }
    Ok(out)
}

/// Mean silhouette coefficient of a labelled 2-D point set (0 for points
/// whose label is unique to them).
pub fn silhouette(points: &[[f64; 2]], labels: &[String]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Shape("silhouette needs matching, non-empty points and labels".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut by_label: Vec<(&String, f64, usize)> = Vec::new();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist(*p, *q);
            match by_label.iter_mut().find(|(l, _, _)| *l == &labels[j]) {
                Some(e) => {
                    e.1 += d;
                    e.2 += 1;
                }
                None => by_label.push((&labels[j], d, 1)),
            }
        }
        let a = by_label.iter().find(|(l, _, _)| *l == &labels[i]).map(|(_, s, n)| s / *n as f64);
        let b = by_label
            .iter()
            .filter(|(l, _, _)| *l != &labels[i])
            .map(|(_, s, n)| s / *n as f64)
            .fold(f64::INFINITY, f64::min);
        if let (Some(a), true) = (a, b.is_finite()) {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(tokens: Vec<f64>, l: usize, d: usize) -> PatchTokenGrid {
        PatchTokenGrid::new(tokens, l, 1, d).unwrap()
    }

    #[test]
    fn pooling_small_cases() {
        let one = pool_embedding(&grid(vec![1.5, -2.0], 1, 2));
        assert_eq!(one.as_slice(), &[1.5, -2.0, 0.0, 0.0]);
        let two = pool_embedding(&grid(vec![0.0, 2.0], 2, 1));
        assert_eq!(two.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn pooling_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = pool_embedding(&grid(t.clone(), 16, 4));
        for c in 0..4 {
            let col: Vec<f64> = (0..16).map(|i| t[i * 4 + c]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!((p.as_slice()[c] - mean).abs() < 1e-7);
            assert!((p.as_slice()[4 + c] - var.sqrt()).abs() < 1e-7);
        }
    }

    #[test]
    fn embedding_arithmetic() {
        let a = PooledEmbedding::new(vec![1.0, 3.0]).unwrap();
        let b = PooledEmbedding::new(vec![4.0, 1.0]).unwrap();
        assert_eq!(degradation_embedding(&a, &b).unwrap().as_slice(), &[3.0, 2.0]);
        assert_eq!(degradation_embedding(&a, &a).unwrap().as_slice(), &[0.0, 0.0]);
        let c = PooledEmbedding::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(degradation_embedding(&a, &c).is_err());
        assert!(PooledEmbedding::new(vec![1.0]).is_err());
    }

    #[test]
    fn cluster_drops_far_point() {
        let mut pts = vec![[0.0, 0.0]; 9];
        pts.push([100.0, 100.0]);
        let labels = vec!["a".to_string(); 10];
        let s = cluster_summaries(&pts, &labels).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, [0.0, 0.0]);
        assert_eq!((s[0].count_kept, s[0].count_dropped), (9, 1));
        assert!(!s[0].kept[9]);
    }

    #[test]
    fn cluster_single_point_and_order() {
        let pts = [[1.0, 2.0], [5.0, 5.0], [7.0, 5.0]];
        let labels: Vec<String> = ["x", "y", "y"].iter().map(|s| s.to_string()).collect();
        let s = cluster_summaries(&pts, &labels).unwrap();
        assert_eq!(s[0].label, "x");
        assert_eq!((s[0].mean, s[0].count_kept, s[0].count_dropped), ([1.0, 2.0], 1, 0));
        assert_eq!((s[1].mean, s[1].count_kept), ([6.0, 5.0], 2));
        assert_eq!(s, cluster_summaries(&pts, &labels).unwrap());
        assert!(cluster_summaries(&pts, &labels[..2]).is_err());
    }

    #[test]
    fn silhouette_of_separated_pairs() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let s = silhouette(&pts, &labels).unwrap();
        // a = 1, b = (10 + sqrt(101)) / 2 for every point
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
    }
}
