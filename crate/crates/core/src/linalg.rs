//! Dense matrices, Haar-uniform orthogonal keys, and Frobenius-ball geometry
//! on the orthogonal group.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// Counter-clockwise rotation of the plane by `phi` radians.
    pub fn rotation_2d(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            rows: 2,
            cols: 2,
            data: vec![c, -s, s, c],
        }
    }

    /// Reflection `R(phi)·diag(1, -1)`; determinant −1.
    pub fn reflection_2d(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            rows: 2,
            cols: 2,
            data: vec![c, s, s, -c],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "transpose of {}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// `‖M Mᵀ − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g = dot(self.row(i), self.row(j)) - if i == j { 1.0 } else { 0.0 };
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    pub fn determinant(&self) -> Result<f64> {
        let lu = Lu::decompose(self)?;
        Ok(lu.determinant())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Householder QR of a square matrix: returns `(Q, R)` with `Q` orthogonal
/// and `R` upper triangular.
pub fn qr_decompose(a: &Matrix) -> Result<(Matrix, Matrix)> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch("QR requires a square matrix".into()));
    }
    let n = a.rows;
    let mut r = a.clone();
    let mut q = Matrix::identity(n);
    let mut v = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = r.get(k, k);
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for i in 0..n {
            v[i] = if i < k { 0.0 } else { r.get(i, k) };
        }
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vvᵀ/vᵀv) R
        for j in 0..n {
            let s: f64 = (k..n).map(|i| v[i] * r.get(i, j)).sum::<f64>() * 2.0 / vnorm2;
            for i in k..n {
                let val = r.get(i, j) - s * v[i];
                r.set(i, j, val);
            }
        }
        // Q <- Q (I - 2vvᵀ/vᵀv)
        for i in 0..n {
            let s: f64 = (k..n).map(|j| q.get(i, j) * v[j]).sum::<f64>() * 2.0 / vnorm2;
            for j in k..n {
                let val = q.get(i, j) - s * v[j];
                q.set(i, j, val);
            }
        }
        for i in k + 1..n {
            r.set(i, k, 0.0);
        }
    }
    Ok((q, r))
}

/// LU factorization with partial pivoting, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct Lu {
    /// `perm[i]` is the row of `A` placed at row `i`.
    pub perm: Vec<usize>,
    pub lower: Matrix,
    pub upper: Matrix,
    swaps: usize,
}

impl Lu {
    pub fn decompose(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::ShapeMismatch("LU requires a square matrix".into()));
        }
        let n = a.rows;
        let mut u = a.clone();
        let mut l = Matrix::identity(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| u.get(i, k).abs().total_cmp(&u.get(j, k).abs()))
                .unwrap_or(k);
            if u.get(p, k) == 0.0 {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            if p != k {
                swaps += 1;
                perm.swap(p, k);
                for j in 0..n {
                    let t = u.get(k, j);
                    u.set(k, j, u.get(p, j));
                    u.set(p, j, t);
                }
                for j in 0..k {
                    let t = l.get(k, j);
                    l.set(k, j, l.get(p, j));
                    l.set(p, j, t);
                }
            }
            for i in k + 1..n {
                let f = u.get(i, k) / u.get(k, k);
                l.set(i, k, f);
                for j in k..n {
                    let val = u.get(i, j) - f * u.get(k, j);
                    u.set(i, j, val);
                }
            }
        }
        Ok(Self {
            perm,
            lower: l,
            upper: u,
            swaps,
        })
    }

    pub fn determinant(&self) -> f64 {
        let n = self.upper.rows;
        let d: f64 = (0..n).map(|i| self.upper.get(i, i)).product();
        if self.swaps % 2 == 0 {
            d
        } else {
            -d
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.upper.rows;
        if b.len() != n {
            return Err(Error::ShapeMismatch("right-hand side length".into()));
        }
        let pb: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        let y = solve_unit_lower(&self.lower, &pb);
        solve_upper(&self.upper, &y)
    }
}

pub(crate) fn solve_unit_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| l.get(i, j) * y[j]).sum();
        y[i] = b[i] - s;
    }
    y
}

pub(crate) fn solve_upper(u: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let d = u.get(i, i);
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Singular(format!("zero diagonal at {i}")));
        }
        let s: f64 = (i + 1..n).map(|j| u.get(i, j) * x[j]).sum();
        x[i] = (b[i] - s) / d;
    }
    Ok(x)
}

/// Draws a Haar-uniform element of O(dim): Gaussian fill, Householder QR,
/// then column `j` of `Q` multiplied by `sign(R[j][j])`.
pub fn sample_haar_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Matrix> {
    if dim == 0 {
        return Err(Error::InvalidDimension("orthogonal key dimension must be >= 1".into()));
    }
    let data: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
    let g = Matrix::new(dim, dim, data)?;
    let (mut q, r) = qr_decompose(&g)?;
    for j in 0..dim {
        if r.get(j, j) < 0.0 {
            for i in 0..dim {
                let v = -q.get(i, j);
                q.set(i, j, v);
            }
        }
    }
    Ok(q)
}

/// Tolerance on `‖AAᵀ − I‖_F` when accepting a matrix as a key.
pub const KEY_ORTHOGONALITY_TOL: f64 = 1e-8;

/// The secret orthogonal matrix applied in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalKey {
    matrix: Matrix,
    /// Seed the key was generated from; `None` for keys built from a matrix.
    seed: Option<u64>,
}

impl OrthogonalKey {
    pub fn generate(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let matrix = sample_haar_orthogonal(dim, &mut rng)?;
        Ok(Self {
            matrix,
            seed: Some(seed),
        })
    }

    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            matrix: sample_haar_orthogonal(dim, rng)?,
            seed: None,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("key dimension must be >= 1".into()));
        }
        Ok(Self {
            matrix: Matrix::identity(dim),
            seed: None,
        })
    }

    /// Accepts `matrix` if it is square and orthogonal to within
    /// [`KEY_ORTHOGONALITY_TOL`].
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() || matrix.rows() == 0 {
            return Err(Error::Validation(format!(
                "key must be a non-empty square matrix, got {:?}",
                matrix.shape()
            )));
        }
        let err = matrix.orthogonality_error();
        if !(err < KEY_ORTHOGONALITY_TOL) {
            return Err(Error::Validation(format!(
                "matrix is not orthogonal: ||AA^T - I||_F = {err:e}"
            )));
        }
        Ok(Self { matrix, seed: None })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(x)
    }

    /// `Aᵀ x`, the inverse rotation.
    pub fn apply_inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.tr_matvec(x)
    }

    /// Key for `self` followed by `then`, i.e. `then.A · self.A`.
    pub fn compose(&self, then: &OrthogonalKey) -> Result<OrthogonalKey> {
        Ok(OrthogonalKey {
            matrix: then.matrix.matmul(&self.matrix)?,
            seed: None,
        })
    }
}

pub fn frobenius_distance(m: &Matrix, a: &Matrix) -> Result<f64> {
    Ok(m.sub(a)?.frobenius_norm())
}

/// Smallest Frobenius ball around a key holding a `theta` fraction of Haar
/// measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub theta: f64,
    pub dim: usize,
    pub radius: f64,
    /// Bootstrap 95% half-width of the radius estimate.
    pub radius_ci: f64,
}

/// Distances closer than this are treated as one point mass when locating
/// the quantile.
const ATOM_TOL: f64 = 1e-9;
const BOOTSTRAP_ROUNDS: usize = 64;
/// Slack on the ball boundary for round-off in the distance computation.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Estimates the `theta`-ball radius as the `theta`-quantile of `‖M − I‖_F`
/// over Haar draws `M`. The radius does not depend on the center because
/// `‖M − A‖_F = ‖AᵀM − I‖_F` and `AᵀM` is again Haar.
pub fn ball_radius_for_volume<R: Rng + ?Sized>(
    theta: f64,
    dim: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<BallSpec> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidArgument(format!("theta must lie in (0, 1], got {theta}")));
    }
    if dim == 0 {
        return Err(Error::InvalidDimension("ball dimension must be >= 1".into()));
    }
    if mc_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 Monte Carlo samples, got {mc_samples}"
        )));
    }
    let max_radius = 2.0 * (dim as f64).sqrt();
    if theta == 1.0 {
        return Ok(BallSpec {
            theta,
            dim,
            radius: max_radius,
            radius_ci: 0.0,
        });
    }
    let eye = Matrix::identity(dim);
    let mut dists = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples {
        let m = sample_haar_orthogonal(dim, rng)?;
        dists.push(frobenius_distance(&m, &eye)?);
    }
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let radius = quantile_sorted(&sorted, theta).min(max_radius);

    let mut reps = Vec::with_capacity(BOOTSTRAP_ROUNDS);
    let mut resample = vec![0.0; mc_samples];
    for _ in 0..BOOTSTRAP_ROUNDS {
        for r in resample.iter_mut() {
            *r = dists[rng.random_range(0..mc_samples)];
        }
        resample.sort_by(f64::total_cmp);
        reps.push(quantile_sorted(&resample, theta));
    }
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let var = reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64;
    Ok(BallSpec {
        theta,
        dim,
        radius,
        radius_ci: 1.96 * var.sqrt(),
    })
}

/// Smallest sample whose empirical CDF reaches `theta`. When that sample sits
/// on a point mass (the reflection coset at distance exactly 2 when m = 2, or
/// the two points of O(1)), no ball has volume exactly `theta`; the radius
/// then stops just short of the atom so the ball's volume does not overshoot.
fn quantile_sorted(sorted: &[f64], theta: f64) -> f64 {
    let n = sorted.len();
    let k = ((theta * n as f64).ceil() as usize).clamp(1, n) - 1;
    let q = sorted[k];
    let lo = sorted.partition_point(|&d| d < q - ATOM_TOL);
    let hi = sorted.partition_point(|&d| d <= q + ATOM_TOL);
    let atom_threshold = (n / 1000).max(2);
    if hi - lo >= atom_threshold {
        if lo == 0 {
            q
        } else {
            sorted[lo - 1]
        }
    } else {
        q
    }
}

/// True iff `candidate` lies in the ball around `key`.
pub fn is_successful_recovery(
    candidate: &Matrix,
    key: &OrthogonalKey,
    ball: &BallSpec,
) -> Result<bool> {
    if candidate.shape() != (ball.dim, ball.dim) || key.dim() != ball.dim {
        return Err(Error::ShapeMismatch(format!(
            "candidate {:?} / key {} against ball of dim {}",
            candidate.shape(),
            key.dim(),
            ball.dim
        )));
    }
    Ok(frobenius_distance(candidate, key.matrix())? <= ball.radius + BOUNDARY_SLACK)
}
