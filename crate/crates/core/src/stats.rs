//! Running moments and covariance helpers for the Monte-Carlo estimators.

use crate::linalg::{Mat, Vector};

/// Mean and standard error of a sample, in index order.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}

/// Accumulates the empirical covariance of vector samples together with the
/// per-entry standard error of the covariance estimate.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    n: usize,
    sum: Vector,
    outer: Mat,
    samples: Vec<Vector>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, n: 0, sum: Vector::zeros(dim), outer: Mat::zeros(dim, dim), samples: Vec::new() }
    }

    pub fn push(&mut self, x: &Vector) {
        self.n += 1;
        self.sum += x;
        self.outer += x * x.transpose();
        self.samples.push(x.clone());
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean(&self) -> Vector {
        &self.sum / self.n as f64
    }

    /// Covariance around the known mean zero (the priors here are centered).
    pub fn centered_covariance(&self) -> Mat {
        &self.outer / self.n as f64
    }

    /// Standard error of each entry of `centered_covariance`.
    pub fn centered_covariance_stderr(&self) -> Mat {
        let cov = self.centered_covariance();
        let mut acc = Mat::zeros(self.dim, self.dim);
        for x in &self.samples {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let dev = x[i] * x[j] - cov[(i, j)];
                    acc[(i, j)] += dev * dev;
                }
            }
        }
        let n = self.n as f64;
        acc.map(|v| (v / (n - 1.0) / n).sqrt())
    }

    /// Largest entrywise deviation from `target`, measured in standard errors.
    pub fn max_z_score_against(&self, target: &Mat) -> f64 {
        let cov = self.centered_covariance();
        let se = self.centered_covariance_stderr();
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let z = (cov[(i, j)] - target[(i, j)]).abs() / se[(i, j)].max(1e-300);
                worst = worst.max(z);
            }
        }
        worst
    }
}
