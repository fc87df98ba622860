//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec_of(m: &Mat) -> Vector {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Mat {
    DMatrix::from_column_slice(rows, cols, v)
}

pub fn sym_eigenvalues(m: &Mat) -> Vector {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sym_eigenvalues(m).min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sym_eigenvalues(m).max()
}

/// Cholesky attempt with a scale-aware pivot threshold `1e-12 * (1 + |M|_F)`.
///
/// Returns `true` when every pivot clears the threshold.
pub fn is_positive_definite(m: &Mat) -> bool {
    let n = m.nrows();
    let threshold = 1e-12 * (1.0 + m.norm());
    let a = symmetrize(m);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > threshold) {
            return false;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    true
}

/// Moore-Penrose pseudoinverse of a symmetric matrix through its eigendecomposition.
///
/// Eigenvalues with magnitude at most `rel_tol * max|lambda|` are treated as zero.
pub fn pinv_sym(m: &Mat, rel_tol: f64) -> Mat {
    let n = m.nrows();
    if n == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.amax();
    let cutoff = rel_tol * scale;
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= cutoff || lambda == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (&v * v.transpose()) / lambda;
    }
    symmetrize(&out)
}

/// Solves `a x = b` by LU with partial pivoting. `None` when `a` is numerically singular.
pub fn lu_solve(a: &Mat, b: &Vector) -> Option<Vector> {
    let n = a.nrows();
    if n == 0 {
        return Some(b.clone());
    }
    let scale = a.amax();
    if scale == 0.0 {
        return None;
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot = 0.0_f64;
    for k in 0..n {
        let p = u[(k, k)].abs();
        min_pivot = min_pivot.min(p);
        max_pivot = max_pivot.max(p);
    }
    if min_pivot <= f64::EPSILON * n as f64 * max_pivot {
        return None;
    }
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves `a X = b` for a small square `a`; `None` when singular.
pub fn solve_mat(a: &Mat, b: &Mat) -> Option<Mat> {
    if a.nrows() == 0 {
        return Some(b.clone());
    }
    let lu = a.clone().lu();
    if !lu.is_invertible() {
        return None;
    }
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn identity(n: usize) -> Mat {
    DMatrix::identity(n, n)
}

pub fn zeros(r: usize, c: usize) -> Mat {
    DMatrix::zeros(r, c)
}
