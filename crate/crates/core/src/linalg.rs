//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn mat_pow(a: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Numerical rank from singular values, relative to the largest one.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax.max(1.0)).count()
}

pub fn pinv(m: &Mat) -> Mat {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Mat::zeros(m.ncols(), m.nrows());
    }
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-12 * smax.max(1.0) * (m.nrows().max(m.ncols()) as f64);
    svd.pseudo_inverse(eps)
        .expect("SVD computed with both factors")
}

/// Largest singular value.
pub fn sigma_max(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Orthogonal polar factor `U Vᵀ` of a square matrix.
pub fn polar_orthogonal(m: &Mat) -> Mat {
    if m.nrows() == 0 {
        return m.clone();
    }
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    u * vt
}

/// `‖MᵀM − I‖_F`
pub fn orthogonality_residual(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    (m.transpose() * m - Mat::identity(m.ncols(), m.ncols())).norm()
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
        }
    }
    out
}

pub fn blkdiag(blocks: &[&Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(sym: &Mat) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(sym)).eigenvalues.min()
}

/// Orthonormal basis (as columns) of the null space of `m`.
pub fn null_space(m: &Mat, rel_tol: f64) -> Mat {
    let n = m.ncols();
    let gram = symmetrize(&(m.transpose() * m));
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<Vector> = (0..n)
        .filter(|&i| eig.eigenvalues[i] <= rel_tol * rel_tol * scale)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        Mat::zeros(n, 0)
    } else {
        Mat::from_columns(&cols)
    }
}

/// Orthonormal basis of `span(cols)` built by pivoted Gram-Schmidt, preferring
/// columns with the largest residual and, on ties, the lowest index. Applied to
/// an orthogonal projector this reproduces coordinate axes whenever the
/// subspace is coordinate aligned.
pub fn pivoted_basis(cols: &Mat, target_rank: usize) -> Mat {
    let d = cols.nrows();
    let mut residual: Vec<Vector> = (0..cols.ncols())
        .map(|j| cols.column(j).into_owned())
        .collect();
    let mut basis: Vec<Vector> = Vec::with_capacity(target_rank);
    for _ in 0..target_rank {
        let mut best = None;
        let mut best_norm = 0.0;
        for (j, r) in residual.iter().enumerate() {
            let n = r.norm();
            if n > best_norm + 1e-12 {
                best_norm = n;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        let q = &residual[j] / best_norm;
        for r in residual.iter_mut() {
            let c = q.dot(r);
            *r -= &q * c;
        }
        basis.push(q);
    }
    if basis.is_empty() {
        Mat::zeros(d, 0)
    } else {
        Mat::from_columns(&basis)
    }
}

/// Real 2n×2n embedding of `M − λI` for complex `λ`; its rank is twice the
/// complex rank.
pub fn shifted_real_embedding(m: &Mat, re: f64, im: f64) -> Mat {
    let n = m.nrows();
    let mut out = Mat::zeros(2 * n, 2 * n);
    let shifted = m - Mat::identity(n, n) * re;
    let imag = Mat::identity(n, n) * im;
    out.view_mut((0, 0), (n, n)).copy_from(&shifted);
    out.view_mut((n, n), (n, n)).copy_from(&shifted);
    out.view_mut((0, n), (n, n)).copy_from(&imag);
    out.view_mut((n, 0), (n, n)).copy_from(&(-imag));
    out
}

pub fn vec_from(values: &[f64]) -> Vector {
    Vector::from_column_slice(values)
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.amax()
}

/// Mean of a row-major list of matrices would be clumsy; this helper appends
/// `w · a bᵀ` to `acc` in place.
pub fn add_outer(acc: &mut Mat, a: &[f64], b: &[f64], w: f64) {
    debug_assert_eq!(acc.nrows(), a.len());
    debug_assert_eq!(acc.ncols(), b.len());
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        let s = w * bj;
        let mut col = acc.column_mut(j);
        for (i, &ai) in a.iter().enumerate() {
            col[i] += ai * s;
        }
    }
}
