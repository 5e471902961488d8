//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn solve(a: &Mat, b: &Vector, what: &str) -> Result<Vector> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular(what.to_string()))
}

pub fn inverse(a: &Mat, what: &str) -> Result<Mat> {
    a.clone().lu().try_inverse().ok_or_else(|| Error::Singular(what.to_string()))
}

pub fn cholesky(a: &Mat, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn symmetry_defect(a: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_singular_value(a: &Mat) -> f64 {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn sup_norm(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn vec_sup_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn diag(v: &Vector) -> Mat {
    Mat::from_diagonal(v)
}

pub fn rows_to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}
