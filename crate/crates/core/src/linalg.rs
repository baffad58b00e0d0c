//! Dense vector and matrix numerics shared by selection, fitting and editing.
//!
//! Everything here works in `f64`. Eigendecompositions of symmetric Gram and
//! covariance matrices are delegated to `nalgebra`; the rest is plain loops.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this magnitude a sign-orientation score counts as a tie.
const SIGN_TIE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("empty vector")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("component count {k} out of range 1..={max}")]
    ComponentRange { k: usize, max: usize },
    #[error("zero direction")]
    ZeroDirection,
    #[error("degenerate matrix")]
    Degenerate,
}

/// A finite, non-empty vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dim must be positive");
        Self(vec![0.0; dim])
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, LinalgError> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, LinalgError> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * factor).collect())
    }

    /// Unit-norm copy; fails on the zero vector.
    pub fn normalized(&self) -> Result<Vector, LinalgError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(LinalgError::ZeroDirection);
        }
        Ok(Vector(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn cosine(&self, other: &Vector) -> Result<f64, LinalgError> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        if n == 0.0 {
            return Err(LinalgError::ZeroDirection);
        }
        Ok(d / n)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = LinalgError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix with at least one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || dim == 0 {
            return Err(LinalgError::Empty);
        }
        if values.len() != rows * dim {
            return Err(LinalgError::Shape {
                expected: rows * dim,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let first = rows.first().ok_or(LinalgError::Empty)?.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * first);
        for r in rows {
            let r = r.as_ref();
            check_dims(first, r.len())?;
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), first, values)
    }

    /// Stacks matrices of equal width top to bottom.
    pub fn vstack(parts: &[&Matrix]) -> Result<Self, LinalgError> {
        let first = parts.first().ok_or(LinalgError::Empty)?;
        let mut values = Vec::with_capacity(parts.iter().map(|m| m.values.len()).sum());
        let mut rows = 0;
        for m in parts {
            check_dims(first.dim, m.dim)?;
            values.extend_from_slice(&m.values);
            rows += m.rows;
        }
        Ok(Self {
            rows,
            dim: first.dim,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_vector(&self, i: usize) -> Vector {
        Vector(self.row(i).to_vec())
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn column_mean(&self) -> Vector {
        let mut mean = vec![0.0; self.dim];
        for row in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Vector(mean)
    }

    pub fn centered(&self, mean: &Vector) -> Matrix {
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(self.dim) {
            for (v, m) in row.iter_mut().zip(mean.as_slice()) {
                *v -= m;
            }
        }
        Matrix {
            rows: self.rows,
            dim: self.dim,
            values,
        }
    }

    /// `selfᵀ·self`, dim × dim.
    fn gram_columns(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        for row in self.iter_rows() {
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let out = &mut g[i * d..(i + 1) * d];
                for j in i..d {
                    out[j] += ri * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g[i * d + j] = g[j * d + i];
            }
        }
        DMatrix::from_row_slice(d, d, &g)
    }

    /// `self·selfᵀ`, rows × rows.
    fn gram_rows(&self) -> DMatrix<f64> {
        let n = self.rows;
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// `selfᵀ·u` for a length-`rows` weight vector.
    fn transpose_times(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, &w) in self.iter_rows().zip(u) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        out
    }
}

/// Top principal components of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// k × dim, orthonormal rows ordered by descending variance.
    pub components: Matrix,
    pub explained_variance: Vector,
    pub mean: Vector,
}

impl PcaResult {
    /// Coordinates of `(x − mean)` in the component basis.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_dims(self.mean.dim(), x.len())?;
        let centered: Vec<f64> = x
            .iter()
            .zip(self.mean.as_slice())
            .map(|(a, m)| a - m)
            .collect();
        Ok(self
            .components
            .iter_rows()
            .map(|c| dot(c, &centered))
            .collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(left: usize, right: usize) -> Result<(), LinalgError> {
    if left != right {
        return Err(LinalgError::DimMismatch { left, right });
    }
    Ok(())
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
/// Eigenvectors are returned as rows.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(j, &val)| (val, eig.eigenvectors.column(j).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Flips `v` so that `score(v) ≥ 0`; when the score ties at zero the first
/// non-negligible component is made positive.
fn orient(v: &mut [f64], score: f64, scale: f64) {
    let flip = if score.abs() > SIGN_TIE_TOL * scale.max(f64::MIN_POSITIVE) {
        score < 0.0
    } else {
        v.iter()
            .find(|c| c.abs() > SIGN_TIE_TOL)
            .is_some_and(|c| *c < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|c| *c = -*c);
    }
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|c| *c /= n);
    }
    n
}

/// Extends `basis` (orthonormal rows) with vectors orthogonal to it until it
/// holds `target` rows, drawing candidates from the standard basis.
fn complete_basis(basis: &mut Vec<Vec<f64>>, target: usize, dim: usize) {
    let mut e = 0;
    while basis.len() < target && e < dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        e += 1;
        // two Gram-Schmidt passes keep the completion orthonormal to 1e-15
        for _ in 0..2 {
            for b in basis.iter() {
                let p = dot(&cand, b);
                cand.iter_mut().zip(b).for_each(|(c, bv)| *c -= p * bv);
            }
        }
        if normalize_in_place(&mut cand) > 1e-6 {
            basis.push(cand);
        }
    }
}

/// Principal component analysis on mean-centered data.
///
/// Covariance uses the `n − 1` denominator (plain `n` for a single row).
/// When `dim > rows` the eigenproblem is solved on the rows × rows Gram
/// matrix instead; null-space components are completed orthonormally and
/// carry zero variance.
pub fn pca(data: &Matrix, k: usize) -> Result<PcaResult, LinalgError> {
    let max = data.rows.min(data.dim);
    if k == 0 || k > max {
        return Err(LinalgError::ComponentRange { k, max });
    }
    let mean = data.column_mean();
    let centered = data.centered(&mean);
    let denom = (data.rows.saturating_sub(1)).max(1) as f64;

    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    if data.dim <= data.rows {
        for (val, vec) in sorted_eigen(centered.gram_columns()).into_iter().take(k) {
            variances.push((val / denom).max(0.0));
            comps.push(vec);
        }
    } else {
        let pairs = sorted_eigen(centered.gram_rows());
        let top = pairs.first().map_or(0.0, |p| p.0).max(0.0);
        for (val, u) in pairs.into_iter().take(k) {
            if val <= top * 1e-12 || val <= 0.0 {
                break;
            }
            let mut v = centered.transpose_times(&u);
            normalize_in_place(&mut v);
            variances.push(val / denom);
            comps.push(v);
        }
        complete_basis(&mut comps, k, data.dim);
        variances.resize(k, 0.0);
    }

    let mean_norm = mean.norm();
    for c in comps.iter_mut() {
        let score = dot(c, mean.as_slice());
        orient(c, score, mean_norm);
    }
    let values: Vec<f64> = comps.into_iter().flatten().collect();
    Ok(PcaResult {
        components: Matrix::new(k, data.dim, values)?,
        explained_variance: Vector::new(variances)?,
        mean,
    })
}

/// Unit right singular vector for the largest singular value of `data`.
///
/// Oriented so the mean projection of rows onto it is non-negative.
pub fn top_right_singular_vector(data: &Matrix) -> Result<Vector, LinalgError> {
    let fro = norm(&data.values);
    if fro == 0.0 {
        return Err(LinalgError::Degenerate);
    }
    let mut v = if data.dim <= data.rows {
        let (_, vec) = sorted_eigen(data.gram_columns())
            .into_iter()
            .next()
            .ok_or(LinalgError::Degenerate)?;
        vec
    } else {
        let (_, u) = sorted_eigen(data.gram_rows())
            .into_iter()
            .next()
            .ok_or(LinalgError::Degenerate)?;
        data.transpose_times(&u)
    };
    if normalize_in_place(&mut v) == 0.0 {
        return Err(LinalgError::Degenerate);
    }
    let row_sum = data.transpose_times(&vec![1.0; data.rows]);
    let mean_proj = dot(&row_sum, &v) / data.rows as f64;
    orient(&mut v, mean_proj, fro / (data.rows as f64).sqrt());
    Vector::new(v)
}

/// Orthogonal projection of `x` onto the line spanned by `theta`.
pub fn project(x: &Vector, theta: &Vector) -> Result<Vector, LinalgError> {
    Ok(theta.scaled(projection_coefficient(x, theta)?))
}

/// `⟨x,θ⟩ / ⟨θ,θ⟩`.
pub fn projection_coefficient(x: &Vector, theta: &Vector) -> Result<f64, LinalgError> {
    check_dims(x.dim(), theta.dim())?;
    let tt = dot(&theta.0, &theta.0);
    if tt == 0.0 {
        return Err(LinalgError::ZeroDirection);
    }
    Ok(dot(&x.0, &theta.0) / tt)
}
