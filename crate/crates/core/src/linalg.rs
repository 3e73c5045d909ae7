//! Dense linear-algebra helpers shared by the estimators.
//!
//! The block-Toeplitz solver implements the multichannel Levinson recursion
//! for systems whose block `(a, b)` equals `B_{b-a}` with `B_{-s} = B_sᵀ`.
//! It is the production route for the non-parametric kernel inversion; the
//! tests check it against a dense Cholesky solve of the assembled matrix.

use nalgebra::{DMatrix, SymmetricEigen};

pub type Mat = DMatrix<f64>;

/// Relative pivot threshold below which a matrix is treated as singular.
pub const SINGULAR_RCOND: f64 = 1e-13;

/// Mean of the diagonal entries.
pub fn diag_mean(m: &Mat) -> f64 {
    let n = m.nrows().min(m.ncols());
    if n == 0 {
        return f64::NAN;
    }
    (0..n).map(|i| m[(i, i)]).sum::<f64>() / n as f64
}

/// Mean of the off-diagonal entries, `None` for a 1×1 (or empty) matrix.
pub fn off_mean(m: &Mat) -> Option<f64> {
    let n = m.nrows();
    if n < 2 || m.ncols() != n {
        return None;
    }
    let total: f64 = m.iter().sum();
    let diag: f64 = (0..n).map(|i| m[(i, i)]).sum();
    Some((total - diag) / (n * n - n) as f64)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm()
}

/// Inverse through LU with a relative pivot check.
pub fn checked_inverse(m: &Mat) -> Option<Mat> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..n {
        let p = u[(i, i)].abs();
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if hi == 0.0 || lo / hi < SINGULAR_RCOND {
        return None;
    }
    lu.try_inverse()
}

/// Symmetric square root `V diag(√λ) Vᵀ` of a positive semidefinite matrix.
/// Returns `None` if an eigenvalue is negative beyond rounding.
pub fn psd_sqrt(m: &Mat) -> Option<Mat> {
    let sym = symmetrize(m);
    let scale = sym.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-300);
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-10 * scale {
            return None;
        }
        *v = v.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Some(v * Mat::from_diagonal(&roots) * v.transpose())
}

/// `ln det` of a symmetric positive definite matrix via Cholesky.
pub fn ln_det_spd(m: &Mat) -> Option<f64> {
    let chol = symmetrize(m).cholesky()?;
    let l = chol.l();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingularBlockSystem {
    /// Recursion order at which the failure occurred (1-based).
    pub order: usize,
}

/// Solves `Γ x = y` where `Γ` is the symmetric block-Toeplitz matrix with
/// block `(a, b) = B_{b−a}` (`B_{−s} = B_sᵀ`) plus `ridge · I`.
///
/// `blocks[s]` holds `B_s` for `s = 0..L−1`; `rhs[a]` holds the `a`-th block
/// row of `y` (each `N × m`). Returns the blocks of `x`.
pub fn block_toeplitz_solve(
    blocks: &[Mat],
    rhs: &[Mat],
    ridge: f64,
) -> Result<Vec<Mat>, SingularBlockSystem> {
    let order = rhs.len();
    assert!(blocks.len() >= order, "need one block per lag");
    if order == 0 {
        return Ok(Vec::new());
    }
    let n = blocks[0].nrows();
    let eye = Mat::identity(n, n);
    let b0 = &blocks[0] + &eye * ridge;
    // B_{d} for signed d.
    let block = |d: isize| -> Mat {
        if d == 0 {
            b0.clone()
        } else if d > 0 {
            blocks[d as usize].clone()
        } else {
            blocks[(-d) as usize].transpose()
        }
    };

    let b0_inv = checked_inverse(&b0).ok_or(SingularBlockSystem { order: 1 })?;
    let mut fwd: Vec<Mat> = vec![b0_inv.clone()];
    let mut bwd: Vec<Mat> = vec![b0_inv.clone()];
    let mut x: Vec<Mat> = vec![&b0_inv * &rhs[0]];

    for k in 1..order {
        // k = current size n; extend to n + 1.
        let mut eps_f = Mat::zeros(n, n);
        let mut eps_b = Mat::zeros(n, n);
        let mut theta = Mat::zeros(n, rhs[k].ncols());
        for a in 0..k {
            // block(n+1, a+1) = B_{a-n}
            let lower = block(a as isize - k as isize);
            eps_f += &lower * &fwd[a];
            theta += &lower * &x[a];
            eps_b += block(a as isize + 1) * &bwd[a];
        }
        let alpha = checked_inverse(&(&eye - &eps_b * &eps_f))
            .ok_or(SingularBlockSystem { order: k + 1 })?;
        let delta = checked_inverse(&(&eye - &eps_f * &eps_b))
            .ok_or(SingularBlockSystem { order: k + 1 })?;

        let f_coef = -(&eps_f * &alpha);
        let b_coef = -(&eps_b * &delta);
        let mut new_fwd = Vec::with_capacity(k + 1);
        let mut new_bwd = Vec::with_capacity(k + 1);
        for a in 0..=k {
            let f_top = if a < k { Some(&fwd[a]) } else { None };
            let b_low = if a >= 1 { Some(&bwd[a - 1]) } else { None };
            let mut f = Mat::zeros(n, n);
            let mut b = Mat::zeros(n, n);
            if let Some(ft) = f_top {
                f += ft * &alpha;
                b += ft * &b_coef;
            }
            if let Some(bl) = b_low {
                f += bl * &f_coef;
                b += bl * &delta;
            }
            new_fwd.push(f);
            new_bwd.push(b);
        }
        fwd = new_fwd;
        bwd = new_bwd;

        let correction = &rhs[k] - theta;
        x.push(Mat::zeros(n, rhs[k].ncols()));
        for a in 0..=k {
            x[a] += &bwd[a] * &correction;
        }
    }
    Ok(x)
}
