use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::embeddings;
use crate::error::{Error, Result};
use crate::nn::ClassifierModel;
use crate::par::Parallelism;
use crate::tensor::Tensor;

const MAX_ITERATIONS: usize = 5000;
const TOLERANCE: f64 = 1e-13;

/// Top-two principal axes of a point cloud and the projected coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component.
    pub variances: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

impl Projection {
    /// Point reconstructed from its two coordinates.
    pub fn reconstruct(&self, coords: [f64; 2]) -> Vec<f64> {
        self.mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + coords[0] * self.components[0][j] + coords[1] * self.components[1][j])
            .collect()
    }
}

/// PCA of `points` (`n × m`, n ≥ 2) by power iteration with deflation.
pub fn pca_2d(points: &Tensor) -> Result<Projection> {
    if points.rank() != 2 {
        return Err(Error::shape("pca_2d", format!("expected a matrix, got {:?}", points.shape())));
    }
    let (n, m) = (points.shape()[0], points.shape()[1]);
    if n < 2 {
        return Err(Error::config("projection needs at least 2 samples"));
    }
    if m < 2 {
        return Err(Error::shape("pca_2d", "embeddings need at least 2 dimensions"));
    }
    let mut mean = vec![0.0; m];
    for row in points.rows() {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let centered: Vec<Vec<f64>> = points
        .rows()
        .map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect())
        .collect();
    let mut cov = vec![vec![0.0; m]; m];
    for r in &centered {
        for i in 0..m {
            for j in 0..m {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);

    let first = power_iteration(&cov, &[]);
    let lambda1 = rayleigh(&cov, &first);
    for i in 0..m {
        for j in 0..m {
            cov[i][j] -= lambda1 * first[i] * first[j];
        }
    }
    let second = power_iteration(&cov, std::slice::from_ref(&first));
    let components = [first, second];
    let coords: Vec<[f64; 2]> = centered.iter().map(|r| [dot(r, &components[0]), dot(r, &components[1])]).collect();
    let var = |k: usize| coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / (n - 1) as f64;
    Ok(Projection {
        variances: [var(0), var(1)],
        mean,
        components,
        coords,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, v)).collect()
}

fn rayleigh(a: &[Vec<f64>], v: &[f64]) -> f64 {
    dot(v, &mat_vec(a, v))
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let c = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
    }
}

/// Dominant unit eigenvector orthogonal to `against`, with its largest
/// entry made positive.
fn power_iteration(a: &[Vec<f64>], against: &[Vec<f64>]) -> Vec<f64> {
    let m = a.len();
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + 0.1 * ((i * 7919) % 97) as f64 / 97.0).collect();
    orthogonalize(&mut v, against);
    if normalize(&mut v) == 0.0 {
        v = (0..m).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
        orthogonalize(&mut v, against);
        normalize(&mut v);
    }
    for _ in 0..MAX_ITERATIONS {
        let mut next = mat_vec(a, &v);
        orthogonalize(&mut next, against);
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        v = next;
        if delta < TOLERANCE {
            break;
        }
    }
    let lead = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Writes `x,y,label` rows of the 2-D projection of the embeddings.
pub fn export_embeddings_2d(
    classifier: &ClassifierModel,
    patterns: &Tensor,
    labels: Option<&[usize]>,
    path: impl AsRef<Path>,
    p: Parallelism,
) -> Result<Projection> {
    if let Some(labels) = labels {
        if labels.len() != patterns.shape()[0] {
            return Err(Error::shape("export_embeddings_2d", "one label per pattern required"));
        }
    }
    let e = embeddings(classifier, patterns, p)?;
    let proj = pca_2d(&e)?;
    let mut text = String::from("x,y,label\n");
    for (i, c) in proj.coords.iter().enumerate() {
        let label = labels.map_or(String::new(), |l| l[i].to_string());
        writeln!(text, "{},{},{label}", c[0], c[1]).expect("writing to a String");
    }
    fs::write(path, text)?;
    Ok(proj)
}
