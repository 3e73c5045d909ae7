//! Propagator estimation under three nested parameterizations.
//!
//! Returns follow `x_t = Σ_{τ=1..L} g_τ ε_{t−τ} + w_t` with `N × N` lag
//! matrices `g_τ`. The integrated kernel is `G_τ = Σ_{τ'=1..τ} g_τ'`.
//!
//! * full: every `g_τ` free, solved from the stationary Yule-Walker system
//!   `r_τ = Σ_τ' g_τ' ĉ_{τ−τ'}` by block Levinson recursion;
//! * factorized: `G_τ = G φ_τ` with `φ_τ = (1 + τ/τ₀)^{−β}`;
//! * homogeneous: factorized with `G = g_diag I + g_off (J − I)`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{mat, mats};
use crate::lagstats::LagStats;
use crate::linalg::{
    block_toeplitz_solve, checked_inverse, diag_mean, ln_det_spd, off_mean, symmetrize, Mat,
};
use crate::panel::Panel;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("block-Toeplitz system is singular at order {order}")]
    SingularSystem { order: usize },
    #[error("sign-shape matrix B is singular")]
    SingularB,
    #[error("market and idiosyncratic means of B coincide")]
    DegenerateMeans,
    #[error("residual covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("profile is not positive at lag {lag}")]
    NonPositiveProfile { lag: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model needs at least 2 assets, got {n}")]
    TooFewAssets { n: usize },
}

/// `φ_τ = (1 + τ/τ₀)^{−β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayLaw {
    pub beta: f64,
    pub tau0: f64,
}

impl DecayLaw {
    pub fn phi(&self, tau: f64) -> f64 {
        (1.0 + tau / self.tau0).powf(-self.beta)
    }

    /// `φ_1, …, φ_L`.
    pub fn shape(&self, support: usize) -> Vec<f64> {
        (1..=support).map(|t| self.phi(t as f64)).collect()
    }

    /// Differential shape `ψ_1 = φ_1`, `ψ_τ = φ_τ − φ_{τ−1}`.
    pub fn diff_shape(&self, support: usize) -> Vec<f64> {
        let phi = self.shape(support);
        (0..support)
            .map(|k| if k == 0 { phi[0] } else { phi[k] - phi[k - 1] })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// Differential lag matrices `g_1..g_L`.
    Full {
        #[serde(with = "mats")]
        lags: Vec<Mat>,
    },
    Factorized {
        #[serde(with = "mat")]
        amplitude: Mat,
        decay: DecayLaw,
        support: usize,
    },
    Homogeneous {
        n: usize,
        g_diag: f64,
        g_off: f64,
        decay: DecayLaw,
        support: usize,
    },
}

impl Kernel {
    pub fn model(&self) -> ModelKind {
        match self {
            Kernel::Full { .. } => ModelKind::Full,
            Kernel::Factorized { .. } => ModelKind::Factorized,
            Kernel::Homogeneous { .. } => ModelKind::Homogeneous,
        }
    }

    pub fn n_assets(&self) -> usize {
        match self {
            Kernel::Full { lags } => lags.first().map_or(0, Mat::nrows),
            Kernel::Factorized { amplitude, .. } => amplitude.nrows(),
            Kernel::Homogeneous { n, .. } => *n,
        }
    }

    pub fn support(&self) -> usize {
        match self {
            Kernel::Full { lags } => lags.len(),
            Kernel::Factorized { support, .. } | Kernel::Homogeneous { support, .. } => *support,
        }
    }

    /// Zero kernel with the given support.
    pub fn zero(n: usize, support: usize) -> Self {
        Kernel::Full {
            lags: vec![Mat::zeros(n, n); support],
        }
    }

    /// `g_1..g_L`.
    pub fn differential(&self) -> Vec<Mat> {
        match self {
            Kernel::Full { lags } => lags.clone(),
            _ => {
                let (amp, decay, support) = self.factor_parts().unwrap();
                decay
                    .diff_shape(support)
                    .into_iter()
                    .map(|p| &amp * p)
                    .collect()
            }
        }
    }

    /// `G_1..G_L`; `G_τ = G_L` for `τ > L`.
    pub fn integrated(&self) -> Vec<Mat> {
        integrate_kernel(&self.differential())
    }

    /// `G_τ` at any `τ ≥ 0`.
    pub fn integrated_at(&self, integrated: &[Mat], tau: usize) -> Mat {
        let n = self.n_assets();
        if tau == 0 || integrated.is_empty() {
            Mat::zeros(n, n)
        } else {
            integrated[tau.min(integrated.len()) - 1].clone()
        }
    }

    /// Amplitude, decay and support of a factorized or homogeneous kernel.
    pub fn factor_parts(&self) -> Option<(Mat, DecayLaw, usize)> {
        match self {
            Kernel::Full { .. } => None,
            Kernel::Factorized {
                amplitude,
                decay,
                support,
            } => Some((amplitude.clone(), *decay, *support)),
            Kernel::Homogeneous {
                n,
                g_diag,
                g_off,
                decay,
                support,
            } => Some((homogeneous_matrix(*n, *g_diag, *g_off), *decay, *support)),
        }
    }

    /// The same dynamics as a factorized kernel (homogeneous only; others unchanged).
    pub fn to_factorized(&self) -> Self {
        match self {
            Kernel::Homogeneous { .. } => {
                let (amplitude, decay, support) = self.factor_parts().unwrap();
                Kernel::Factorized {
                    amplitude,
                    decay,
                    support,
                }
            }
            other => other.clone(),
        }
    }

    pub fn to_full(&self) -> Self {
        Kernel::Full {
            lags: self.differential(),
        }
    }

    /// Model parameter count including the `N²` residual covariance entries.
    pub fn parameter_count(&self) -> usize {
        let n = self.n_assets();
        match self {
            Kernel::Full { lags } => n * n * lags.len() + n * n,
            Kernel::Factorized { .. } => n * n + 2 + n * n,
            Kernel::Homogeneous { .. } => 2 + 2 + 2,
        }
    }
}

pub fn homogeneous_matrix(n: usize, diag: f64, off: f64) -> Mat {
    Mat::from_fn(n, n, |i, j| if i == j { diag } else { off })
}

/// Cumulative sum over lag.
pub fn integrate_kernel(g: &[Mat]) -> Vec<Mat> {
    let mut out: Vec<Mat> = Vec::with_capacity(g.len());
    for m in g {
        let next = match out.last() {
            Some(prev) => prev + m,
            None => m.clone(),
        };
        out.push(next);
    }
    out
}

/// Lag differences, inverse of [`integrate_kernel`].
pub fn differentiate_kernel(big_g: &[Mat]) -> Vec<Mat> {
    (0..big_g.len())
        .map(|k| {
            if k == 0 {
                big_g[0].clone()
            } else {
                &big_g[k] - &big_g[k - 1]
            }
        })
        .collect()
}

/// Duplicates asset `i` into two identical copies appended as `i` and `N`.
/// Blocks involving either copy repeat the original entries, so that with
/// `ε^i = ε^{i₁} + ε^{i₂}` both copies follow the original price path.
pub fn duplicate_asset(kernel: &Kernel, i: usize) -> Kernel {
    let n = kernel.n_assets();
    let src = |a: usize| if a == n { i } else { a };
    Kernel::Full {
        lags: kernel
            .differential()
            .iter()
            .map(|g| Mat::from_fn(n + 1, n + 1, |a, b| g[(src(a), src(b))]))
            .collect(),
    }
}

/// `Σ_{τ=1..L} g_τ ε_{t−τ}` within each session; history before a session
/// start counts as zero.
pub fn impact_series(kernel: &Kernel, signs: &Mat, sessions: &[Range<usize>]) -> Mat {
    let t = signs.nrows();
    let n = signs.ncols();
    match kernel.factor_parts() {
        Some((amp, decay, support)) => {
            let psi = decay.diff_shape(support);
            let mut f = Mat::zeros(t, n);
            for r in sessions {
                let len = r.end - r.start;
                for (k, &p) in psi.iter().enumerate() {
                    let tau = k + 1;
                    if len <= tau {
                        break;
                    }
                    let src = signs.rows(r.start, len - tau) * p;
                    let mut dst = f.rows_mut(r.start + tau, len - tau);
                    dst += src;
                }
            }
            f * amp.transpose()
        }
        None => {
            let lags: Vec<Mat> = kernel.differential().iter().map(|g| g.transpose()).collect();
            let mut out = Mat::zeros(t, n);
            for r in sessions {
                let len = r.end - r.start;
                for (k, gt) in lags.iter().enumerate() {
                    let tau = k + 1;
                    if len <= tau {
                        break;
                    }
                    let src = signs.rows(r.start, len - tau);
                    let mut dst = out.rows_mut(r.start + tau, len - tau);
                    dst.gemm(1.0, &src, gt, 1.0);
                }
            }
            out
        }
    }
}

/// Per-bin noise covariance `σ_W`; `Σ_{W,τ} = σ_W τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCov {
    #[serde(with = "mat")]
    pub sigma_w: Mat,
}

impl ResidualCov {
    pub fn at_lag(&self, tau: usize) -> Mat {
        &self.sigma_w * tau as f64
    }
}

#[derive(Debug, Clone)]
pub struct Residuals {
    /// Residual rows after the per-session warm-up.
    pub series: Mat,
    /// Panel row of each residual.
    pub rows: Vec<usize>,
    pub cov: ResidualCov,
}

/// `w_t = x_t − Σ_τ g_τ ε_{t−τ}` after discarding the first `L` bins of each
/// session, and `σ̂_W = (1/T) Σ_t w_t w_tᵀ` (symmetrized).
pub fn residuals(panel: &Panel, kernel: &Kernel) -> Residuals {
    let sessions = panel.session_ranges();
    let support = kernel.support();
    let impact = impact_series(kernel, &panel.signs, &sessions);
    let rows: Vec<usize> = sessions
        .iter()
        .flat_map(|r| (r.start + support).min(r.end)..r.end)
        .collect();
    let n = panel.n_assets();
    let series = Mat::from_fn(rows.len(), n, |k, j| {
        panel.returns[(rows[k], j)] - impact[(rows[k], j)]
    });
    let cov = if rows.is_empty() {
        Mat::zeros(n, n)
    } else {
        symmetrize(&(series.transpose() * &series / rows.len() as f64))
    };
    Residuals {
        series,
        rows,
        cov: ResidualCov { sigma_w: cov },
    }
}

/// `−ln 𝓛 = (T/2) ln det σ_W + ½ Σ_t w_tᵀ σ_W⁻¹ w_t`.
pub fn neg_loglik(w: &Mat, sigma_w: &Mat) -> Result<f64, KernelError> {
    let sym = symmetrize(sigma_w);
    let ln_det = ln_det_spd(&sym).ok_or(KernelError::NotPositiveDefinite)?;
    let chol = Cholesky::new(sym).ok_or(KernelError::NotPositiveDefinite)?;
    let y = chol.l().solve_lower_triangular(&w.transpose()).ok_or(KernelError::NotPositiveDefinite)?;
    Ok(0.5 * w.nrows() as f64 * ln_det + 0.5 * y.norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub r_diag: f64,
    /// Absent for a single asset.
    pub r_off: Option<f64>,
    pub r_lnl: f64,
}

/// Scores of a residual covariance against the baseline `σ_0 = Σ_1`.
pub fn score(sigma_w: &Mat, sigma0: &Mat) -> Result<Scores, KernelError> {
    let n = sigma_w.nrows();
    if sigma0.shape() != sigma_w.shape() {
        return Err(KernelError::DimensionMismatch(format!(
            "σ_W is {n}×{n}, σ_0 is {:?}",
            sigma0.shape()
        )));
    }
    let ln_det = ln_det_spd(sigma_w).ok_or(KernelError::NotPositiveDefinite)?;
    let offsum = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)].abs();
                }
            }
        }
        s
    };
    Ok(Scores {
        r_diag: diag_mean(sigma_w),
        r_off: (n > 1).then(|| offsum(sigma_w) / offsum(sigma0)),
        r_lnl: 0.5 * (1.0 - ln_det / n as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub beta: f64,
    pub tau0: f64,
    /// `exp` of the fitted intercept: the profile reads `amplitude · φ_τ`.
    pub amplitude: f64,
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
}

impl DecayFit {
    pub fn law(&self) -> DecayLaw {
        DecayLaw {
            beta: self.beta,
            tau0: self.tau0,
        }
    }
}

/// Linear least squares of `y` on `(1, u)`: returns (intercept, slope, rss).
fn line_fit(u: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = u.iter().map(|a| (a - mu).powi(2)).sum();
    let sxy: f64 = u.iter().zip(y).map(|(a, b)| (a - mu) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mu;
    let rss = u
        .iter()
        .zip(y)
        .map(|(a, b)| (b - icpt - slope * a).powi(2))
        .sum();
    (icpt, slope, rss)
}

/// Fits `log G_τ = a − β log(1 + τ/τ₀)` over `τ = 1..=len`, profiling out
/// `(a, β)` for each `τ₀` and searching `ln τ₀ ∈ [ln 10⁻³, ln 10³]`.
pub fn fit_decay(profile: &[f64]) -> Result<DecayFit, KernelError> {
    if profile.len() < 3 {
        return Err(KernelError::DimensionMismatch(
            "decay fit needs at least 3 lags".into(),
        ));
    }
    if let Some(k) = profile.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(KernelError::NonPositiveProfile { lag: k + 1 });
    }
    let y: Vec<f64> = profile.iter().map(|v| v.ln()).collect();
    let eval = |ln_t0: f64| -> (f64, f64, f64) {
        let t0 = ln_t0.exp();
        let u: Vec<f64> = (1..=profile.len())
            .map(|t| (1.0 + t as f64 / t0).ln())
            .collect();
        line_fit(&u, &y)
    };
    let (lo, hi) = (1e-3_f64.ln(), 1e3_f64.ln());
    let steps = 240;
    let h = (hi - lo) / steps as f64;
    let mut best = (0, f64::INFINITY);
    for k in 0..=steps {
        let rss = eval(lo + h * k as f64).2;
        if rss < best.1 {
            best = (k, rss);
        }
    }
    let mut a = lo + h * (best.0 as f64 - 1.0).max(0.0);
    let mut b = lo + h * (best.0 as f64 + 1.0).min(steps as f64);
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (eval(c).2, eval(d).2);
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c).2;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d).2;
        }
    }
    let ln_t0 = 0.5 * (a + b);
    let (icpt, slope, rss) = eval(ln_t0);
    Ok(DecayFit {
        beta: -slope,
        tau0: ln_t0.exp(),
        amplitude: icpt.exp(),
        residual: (rss / profile.len() as f64).sqrt(),
    })
}

fn check_lags(stats: &LagStats, support: usize) -> Result<(), KernelError> {
    if support == 0 {
        return Err(KernelError::DimensionMismatch("kernel support must be positive".into()));
    }
    if support > stats.tau_max() {
        return Err(KernelError::DimensionMismatch(format!(
            "support {support} exceeds the response lags ({})",
            stats.tau_max()
        )));
    }
    if support > stats.c_horizon() + 1 {
        return Err(KernelError::DimensionMismatch(format!(
            "support {support} needs sign correlations to lag {}",
            support - 1
        )));
    }
    Ok(())
}

/// Solves `r_τ = Σ_{τ'=1..L} g_τ' ĉ_{τ−τ'}` for `τ = 1..L` with `ridge · I`
/// added to the diagonal blocks.
pub fn fit_nonparametric(stats: &LagStats, support: usize, ridge: f64) -> Result<Kernel, KernelError> {
    check_lags(stats, support)?;
    // Transposed form: Σ_τ' ĉ_{τ'−τ} g_τ'ᵀ = r_τᵀ.
    let blocks: Vec<Mat> = (0..support).map(|s| stats.c_lagged[s].clone()).collect();
    let rhs: Vec<Mat> = (1..=support).map(|t| stats.r(t).transpose()).collect();
    let x = block_toeplitz_solve(&blocks, &rhs, ridge)
        .map_err(|e| KernelError::SingularSystem { order: e.order })?;
    Ok(Kernel::Full {
        lags: x.into_iter().map(|m| m.transpose()).collect(),
    })
}

/// Sufficient statistics of the factorized estimator:
/// `A = Σ_τ ψ_τ r_τ`, `B = Σ_{τ,τ'} ψ_τ ψ_τ' ĉ_{τ−τ'}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMoments {
    #[serde(with = "mat")]
    pub a: Mat,
    #[serde(with = "mat")]
    pub b: Mat,
}

pub fn shape_moments(stats: &LagStats, decay: DecayLaw, support: usize) -> Result<ShapeMoments, KernelError> {
    check_lags(stats, support)?;
    let n = stats.n_assets;
    let psi = decay.diff_shape(support);
    let mut a = Mat::zeros(n, n);
    for (k, p) in psi.iter().enumerate() {
        a += stats.r(k + 1) * *p;
    }
    // Collect Σ_{τ−τ'=s} ψ_τ ψ_τ' per signed lag s, then weight ĉ_s.
    let mut w = vec![0.0; 2 * support - 1];
    for (i, pi) in psi.iter().enumerate() {
        for (j, pj) in psi.iter().enumerate() {
            w[i + support - 1 - j] += pi * pj;
        }
    }
    let mut b = Mat::zeros(n, n);
    for (k, wk) in w.iter().enumerate() {
        let s = k as i64 - (support as i64 - 1);
        b += stats.c(s) * *wk;
    }
    Ok(ShapeMoments { a, b: symmetrize(&b) })
}

/// `Ĝ = A (Bᵀ)⁻¹` from shape moments.
pub fn factorized_from_moments(m: &ShapeMoments) -> Result<Mat, KernelError> {
    let bt_inv = checked_inverse(&m.b.transpose()).ok_or(KernelError::SingularB)?;
    Ok(&m.a * bt_inv)
}

pub fn fit_factorized(stats: &LagStats, decay: DecayLaw, support: usize) -> Result<Kernel, KernelError> {
    let m = shape_moments(stats, decay, support)?;
    Ok(Kernel::Factorized {
        amplitude: factorized_from_moments(&m)?,
        decay,
        support,
    })
}

/// Market/idiosyncratic means and the closed-form estimates of the
/// homogeneous model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousFit {
    pub a_m: f64,
    pub a_i: f64,
    pub b_m: f64,
    pub b_i: f64,
    /// Market mean of `σ_0`.
    pub sigma0_m: f64,
    /// Diagonal mean of `σ_0`.
    pub sigma0_i: f64,
    pub g_diag: f64,
    pub g_off: f64,
    pub lambda_m: f64,
    pub lambda_i: f64,
    pub inv_sigma_w_diag: f64,
    pub inv_sigma_w_off: f64,
    pub sigma_w_diag: f64,
    pub sigma_w_off: f64,
}

fn market_idio(m: &Mat) -> (f64, f64) {
    let n = m.nrows() as f64;
    (m.sum() / (n * n), m.trace() / n)
}

pub fn homogeneous_from_moments(m: &ShapeMoments, sigma0: &Mat) -> Result<HomogeneousFit, KernelError> {
    let n = m.a.nrows();
    if n < 2 {
        return Err(KernelError::TooFewAssets { n });
    }
    let nf = n as f64;
    let (a_m, a_i) = market_idio(&m.a);
    let (b_m, b_i) = market_idio(&m.b);
    let (s_m, s_i) = market_idio(sigma0);
    let db = b_m - b_i;
    if db.abs() <= 1e-12 * b_m.abs().max(b_i.abs()) || b_m == 0.0 {
        return Err(KernelError::DegenerateMeans);
    }
    let market = a_m / b_m;
    let idio = (a_m - a_i) / db;
    let g_diag = (market + (nf - 1.0) * idio) / nf;
    let g_off = (market - idio) / nf;
    let lambda_m = 1.0 / (nf * (s_m - a_m * a_m / b_m));
    let lambda_i = (nf - 1.0) / nf / (s_i - s_m + (a_m - a_i).powi(2) / db);
    Ok(HomogeneousFit {
        a_m,
        a_i,
        b_m,
        b_i,
        sigma0_m: s_m,
        sigma0_i: s_i,
        g_diag,
        g_off,
        lambda_m,
        lambda_i,
        inv_sigma_w_diag: (lambda_m + (nf - 1.0) * lambda_i) / nf,
        inv_sigma_w_off: (lambda_m - lambda_i) / nf,
        sigma_w_diag: (1.0 / lambda_m + (nf - 1.0) / lambda_i) / nf,
        sigma_w_off: (1.0 / lambda_m - 1.0 / lambda_i) / nf,
    })
}

pub fn fit_homogeneous(
    stats: &LagStats,
    decay: DecayLaw,
    support: usize,
) -> Result<(Kernel, ResidualCov, HomogeneousFit), KernelError> {
    let m = shape_moments(stats, decay, support)?;
    let h = homogeneous_from_moments(&m, stats.sigma(1))?;
    let n = stats.n_assets;
    Ok((
        Kernel::Homogeneous {
            n,
            g_diag: h.g_diag,
            g_off: h.g_off,
            decay,
            support,
        },
        ResidualCov {
            sigma_w: homogeneous_matrix(n, h.sigma_w_diag, h.sigma_w_off),
        },
        h,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Full,
    Factorized,
    Homogeneous,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Full, ModelKind::Factorized, ModelKind::Homogeneous];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Full => "full",
            ModelKind::Factorized => "factorized",
            ModelKind::Homogeneous => "homogeneous",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" | "nonparametric" => Ok(ModelKind::Full),
            "factorized" => Ok(ModelKind::Factorized),
            "homogeneous" => Ok(ModelKind::Homogeneous),
            _ => Err(format!("unknown model `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sample {
    InSample,
    OutOfSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub model: ModelKind,
    pub support: usize,
    pub ridge: f64,
    /// Overrides the decay law fitted on the non-parametric kernel.
    pub decay: Option<DecayLaw>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            model: ModelKind::Factorized,
            support: 30,
            ridge: 1e-4,
            decay: None,
        }
    }
}

/// Headline scalars of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub g_diag: f64,
    pub g_off: Option<f64>,
    pub beta: Option<f64>,
    pub tau0: Option<f64>,
    pub sigma_w_diag: f64,
    pub sigma_w_off: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub sample: Sample,
    pub n_assets: usize,
    /// Residual rows used for `σ̂_W` and the likelihood.
    pub t_eff: usize,
    pub support: usize,
    pub ridge: f64,
    pub n_params: usize,
    pub kernel: Kernel,
    pub residual: ResidualCov,
    pub scores: Scores,
    pub neg_loglik: f64,
    pub summary: KernelSummary,
    pub decay_diag: Option<DecayFit>,
    pub decay_off: Option<DecayFit>,
    pub homogeneous: Option<HomogeneousFit>,
}

/// Diagonal and off-diagonal mean profiles of the integrated kernel.
pub fn integrated_profiles(kernel: &Kernel) -> (Vec<f64>, Option<Vec<f64>>) {
    let big = kernel.integrated();
    let diag = big.iter().map(diag_mean).collect();
    let off = if kernel.n_assets() > 1 {
        Some(big.iter().map(|m| off_mean(m).unwrap()).collect())
    } else {
        None
    };
    (diag, off)
}

/// Estimated model with its in-sample report.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub kernel: Kernel,
    pub decay_diag: Option<DecayFit>,
    pub decay_off: Option<DecayFit>,
    pub homogeneous: Option<HomogeneousFit>,
}

/// Estimates the requested model from lag statistics. The factorized and
/// homogeneous models take `φ` from the diagonal profile of the
/// non-parametric kernel unless a decay law is supplied.
pub fn estimate(stats: &LagStats, opts: &FitOptions) -> Result<Fitted, KernelError> {
    let nonparam = fit_nonparametric(stats, opts.support, opts.ridge)?;
    let (diag, off) = integrated_profiles(&nonparam);
    let decay_diag = fit_decay(&diag).ok();
    let decay_off = off.as_deref().and_then(|o| fit_decay(o).ok());
    let decay = || -> Result<DecayLaw, KernelError> {
        match (opts.decay, decay_diag) {
            (Some(d), _) => Ok(d),
            (None, Some(f)) => Ok(f.law()),
            (None, None) => Err(fit_decay(&diag).unwrap_err()),
        }
    };
    let (kernel, homogeneous) = match opts.model {
        ModelKind::Full => (nonparam, None),
        ModelKind::Factorized => (fit_factorized(stats, decay()?, opts.support)?, None),
        ModelKind::Homogeneous => {
            let (k, _, h) = fit_homogeneous(stats, decay()?, opts.support)?;
            (k, Some(h))
        }
    };
    Ok(Fitted {
        kernel,
        decay_diag,
        decay_off,
        homogeneous,
    })
}

/// Scores a fitted kernel on a panel (in or out of sample).
pub fn evaluate(
    panel: &Panel,
    sigma0: &Mat,
    fitted: &Fitted,
    opts: &FitOptions,
    sample: Sample,
) -> Result<(FitReport, Residuals), KernelError> {
    let res = residuals(panel, &fitted.kernel);
    let sw = &res.cov.sigma_w;
    let scores = score(sw, sigma0)?;
    let nll = neg_loglik(&res.series, sw)?;
    let kernel = &fitted.kernel;
    let (g_diag, g_off, beta, tau0) = match kernel {
        Kernel::Full { .. } => (
            fitted.decay_diag.map_or(f64::NAN, |d| d.amplitude),
            fitted.decay_off.map(|d| d.amplitude),
            fitted.decay_diag.map(|d| d.beta),
            fitted.decay_diag.map(|d| d.tau0),
        ),
        Kernel::Factorized { amplitude, decay, .. } => (
            diag_mean(amplitude),
            off_mean(amplitude),
            Some(decay.beta),
            Some(decay.tau0),
        ),
        Kernel::Homogeneous {
            g_diag,
            g_off,
            decay,
            ..
        } => (*g_diag, Some(*g_off), Some(decay.beta), Some(decay.tau0)),
    };
    let report = FitReport {
        model: kernel.model(),
        sample,
        n_assets: kernel.n_assets(),
        t_eff: res.rows.len(),
        support: kernel.support(),
        ridge: opts.ridge,
        n_params: kernel.parameter_count(),
        kernel: kernel.clone(),
        residual: res.cov.clone(),
        scores,
        neg_loglik: nll,
        summary: KernelSummary {
            g_diag,
            g_off,
            beta,
            tau0,
            sigma_w_diag: diag_mean(sw),
            sigma_w_off: off_mean(sw),
        },
        decay_diag: fitted.decay_diag,
        decay_off: fitted.decay_off,
        homogeneous: fitted.homogeneous.clone(),
    };
    Ok((report, res))
}

/// Fits on `stats` (computed from `panel`) and scores in sample.
pub fn fit(panel: &Panel, stats: &LagStats, opts: &FitOptions) -> Result<(FitReport, Residuals), KernelError> {
    let fitted = estimate(stats, opts)?;
    evaluate(panel, stats.sigma(1), &fitted, opts, Sample::InSample)
}

/// Fits all three models, in parallel.
pub fn fit_all(
    panel: &Panel,
    stats: &LagStats,
    base: &FitOptions,
) -> Vec<Result<(FitReport, Residuals), KernelError>> {
    ModelKind::ALL
        .par_iter()
        .map(|&model| {
            let opts = FitOptions {
                model,
                ..base.clone()
            };
            fit(panel, stats, &opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lagstats::{compute, LagConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::BTreeMap;

    fn gaussian(t: usize, n: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(t, n, |_, _| StandardNormal.sample(&mut rng))
    }

    fn panel(returns: Mat, signs: Mat) -> Panel {
        let n = returns.ncols();
        Panel::from_matrices(
            (0..n).map(|i| format!("A{i}")).collect(),
            BTreeMap::new(),
            returns,
            signs,
        )
    }

    fn cfg(lags: usize) -> LagConfig {
        LagConfig {
            tau_max: lags,
            t_lag: lags,
            response_min: 0,
            c_horizon: lags,
            guard: 0,
            se_blocks: 20,
        }
    }

    fn random_kernel(n: usize, support: usize, seed: u64) -> Kernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Kernel::Full {
            lags: (0..support)
                .map(|k| {
                    Mat::from_fn(n, n, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * 0.3 / (1.0 + k as f64)
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn integrate_examples() {
        let n = 2;
        let mut delta = vec![Mat::zeros(n, n); 4];
        delta[0] = Mat::identity(n, n);
        for m in integrate_kernel(&delta) {
            assert_eq!(m, Mat::identity(n, n));
        }
        let c = vec![Mat::from_element(n, n, 0.5); 4];
        for (k, m) in integrate_kernel(&c).iter().enumerate() {
            assert_eq!(*m, Mat::from_element(n, n, 0.5 * (k + 1) as f64));
        }
        let k = random_kernel(3, 6, 1);
        let g = k.differential();
        let back = differentiate_kernel(&integrate_kernel(&g));
        for (a, b) in g.iter().zip(&back) {
            assert!((a - b).abs().max() < 1e-15);
        }
        assert_eq!(k.integrated()[0], g[0]);
    }

    #[test]
    fn factorized_shape_integrates_to_phi() {
        let d = DecayLaw { beta: 0.14, tau0: 0.3 };
        let k = Kernel::Factorized {
            amplitude: Mat::from_row_slice(2, 2, &[0.3, 0.01, 0.02, 0.25]),
            decay: d,
            support: 10,
        };
        let big = k.integrated();
        for (t, m) in big.iter().enumerate() {
            let expect = Mat::from_row_slice(2, 2, &[0.3, 0.01, 0.02, 0.25]) * d.phi((t + 1) as f64);
            assert!((m - expect).abs().max() < 1e-14);
        }
    }

    #[test]
    fn white_signs_nonparametric_equals_response() {
        // ĉ_τ = δ_τ I exactly: rows of a Hadamard-like orthogonal design.
        let p = panel(gaussian(4000, 2, 1), gaussian(4000, 2, 2));
        let mut stats = compute(&p, &cfg(5)).unwrap();
        stats.c_lagged = (0..=5)
            .map(|s| if s == 0 { Mat::identity(2, 2) } else { Mat::zeros(2, 2) })
            .collect();
        let k = fit_nonparametric(&stats, 5, 0.0).unwrap();
        for (t, g) in k.differential().iter().enumerate() {
            assert!((g - stats.r(t + 1)).abs().max() < 1e-14);
        }
    }

    #[test]
    fn nonparametric_parameter_count() {
        let k = Kernel::zero(275, 30);
        assert_eq!(k.parameter_count(), 275 * 275 * 31);
        assert_eq!(k.parameter_count(), 2_344_375);
    }

    #[test]
    fn singular_sign_correlation_needs_ridge() {
        let n = 2;
        let p = panel(gaussian(500, n, 1), gaussian(500, n, 2));
        let mut stats = compute(&p, &cfg(3)).unwrap();
        stats.c_lagged = vec![Mat::from_element(n, n, 1.0), Mat::zeros(n, n), Mat::zeros(n, n), Mat::zeros(n, n)];
        assert!(matches!(
            fit_nonparametric(&stats, 3, 0.0),
            Err(KernelError::SingularSystem { .. })
        ));
        assert!(fit_nonparametric(&stats, 3, 1e-4).is_ok());
        assert!(matches!(
            fit_nonparametric(&stats, 4, 1e-4),
            Err(KernelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn decay_fit_recovers_exact_profile() {
        let d = DecayLaw { beta: 0.25, tau0: 0.3 };
        let prof: Vec<f64> = d.shape(30).iter().map(|p| 0.7 * p).collect();
        let f = fit_decay(&prof).unwrap();
        assert!((f.beta - 0.25).abs() < 1e-6, "{f:?}");
        assert!((f.tau0 - 0.3).abs() < 1e-6, "{f:?}");
        assert!((f.amplitude - 0.7).abs() < 1e-6);
        let mut bad = prof.clone();
        bad[4] = -0.1;
        assert_eq!(fit_decay(&bad), Err(KernelError::NonPositiveProfile { lag: 5 }));
    }

    #[test]
    fn step_shape_collapses_to_first_response() {
        // β = 0: φ ≡ 1, so ψ = (1, 0, …) and Ĝ = r̂_1 ĉ_0⁻¹.
        let p = panel(gaussian(3000, 1, 3), gaussian(3000, 1, 4));
        let stats = compute(&p, &cfg(5)).unwrap();
        let step = DecayLaw { beta: 0.0, tau0: 1.0 };
        let k = fit_factorized(&stats, step, 5).unwrap();
        let Kernel::Factorized { amplitude, .. } = k else { unreachable!() };
        let expect = stats.response(1)[(0, 0)] / stats.c_lagged[0][(0, 0)];
        assert_relative_eq!(amplitude[(0, 0)], expect, max_relative = 1e-12);
        let mut white = stats.clone();
        white.c_lagged[0] = Mat::identity(1, 1);
        let k = fit_factorized(&white, step, 5).unwrap();
        let Kernel::Factorized { amplitude, .. } = k else { unreachable!() };
        assert_relative_eq!(amplitude[(0, 0)], stats.response(1)[(0, 0)], max_relative = 1e-12);
    }

    #[test]
    fn homogeneous_closed_form_matches_eigen_solution() {
        // For homogeneous A, B the closed form equals A B⁻¹ exactly.
        let n = 4;
        let a = homogeneous_matrix(n, 0.3, 0.05);
        let b = homogeneous_matrix(n, 1.2, 0.2);
        let s0 = homogeneous_matrix(n, 1.0, 0.25);
        let m = ShapeMoments { a: a.clone(), b: b.clone() };
        let h = homogeneous_from_moments(&m, &s0).unwrap();
        let g = &a * checked_inverse(&b).unwrap();
        assert_relative_eq!(h.g_diag, g[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(h.g_off, g[(0, 1)], max_relative = 1e-12);
        let sw = &s0 - &a * checked_inverse(&b).unwrap() * a.transpose();
        assert_relative_eq!(h.sigma_w_diag, sw[(0, 0)], max_relative = 1e-10);
        assert_relative_eq!(h.sigma_w_off, sw[(0, 1)], max_relative = 1e-10);
        let inv = checked_inverse(&sw).unwrap();
        assert_relative_eq!(h.inv_sigma_w_diag, inv[(0, 0)], max_relative = 1e-10);
        assert_relative_eq!(h.inv_sigma_w_off, inv[(0, 1)], max_relative = 1e-10);

        let flat = ShapeMoments { a, b: Mat::from_element(n, n, 0.5) };
        assert_eq!(homogeneous_from_moments(&flat, &s0), Err(KernelError::DegenerateMeans));
    }

    #[test]
    fn neg_loglik_examples() {
        let eye = Mat::identity(3, 3);
        assert_eq!(neg_loglik(&Mat::zeros(10, 3), &eye).unwrap(), 0.0);
        // Orthogonal design with empirical covariance I.
        let t = 8;
        let w = Mat::from_fn(t, 2, |r, c| {
            let v = if c == 0 { r % 2 } else { (r / 2) % 2 };
            if v == 0 { 1.0 } else { -1.0 }
        });
        let nll = neg_loglik(&w, &Mat::identity(2, 2)).unwrap();
        assert_relative_eq!(nll, 2.0 * t as f64 / 2.0, max_relative = 1e-14);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(neg_loglik(&w, &bad), Err(KernelError::NotPositiveDefinite));
    }

    #[test]
    fn zero_kernel_residuals_are_returns() {
        let p = panel(gaussian(300, 3, 1), gaussian(300, 3, 2));
        let r = residuals(&p, &Kernel::zero(3, 5));
        let x = p.returns.rows(5, 295);
        let cov = x.transpose() * x / 295.0;
        assert!((r.cov.sigma_w - cov).abs().max() < 1e-14);
    }

    #[test]
    fn vanishing_residuals_score_zero() {
        let s0 = Mat::identity(3, 3) + Mat::from_element(3, 3, 0.1);
        let s = score(&(Mat::identity(3, 3) * 1e-12), &s0).unwrap();
        assert!(s.r_diag < 1e-11);
        assert_eq!(s.r_off, Some(0.0));
    }

    #[test]
    fn nested_kernels_score_identically() {
        let p = panel(gaussian(2000, 4, 5), gaussian(2000, 4, 6));
        let h = Kernel::Homogeneous {
            n: 4,
            g_diag: 0.29,
            g_off: 0.02,
            decay: DecayLaw { beta: 0.14, tau0: 0.3 },
            support: 8,
        };
        let f = h.to_factorized();
        let full = f.to_full();
        let s0 = p.returns.transpose() * &p.returns / 2000.0;
        let sc = |k: &Kernel| score(&residuals(&p, k).cov.sigma_w, &s0).unwrap();
        let (a, b, c) = (sc(&h), sc(&f), sc(&full));
        for (x, y) in [(a, b), (b, c)] {
            assert!((x.r_diag - y.r_diag).abs() < 1e-10);
            assert!((x.r_off.unwrap() - y.r_off.unwrap()).abs() < 1e-10);
            assert!((x.r_lnl - y.r_lnl).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_asset_follows_original_path() {
        let n = 3;
        let k = random_kernel(n, 6, 9);
        let signs = gaussian(200, n, 10);
        let split = gaussian(200, 1, 11);
        let sessions = [0..200];
        let base = impact_series(&k, &signs, &sessions);
        let dup = duplicate_asset(&k, 1);
        let signs2 = Mat::from_fn(200, n + 1, |t, j| match j {
            1 => split[(t, 0)],
            3 => signs[(t, 1)] - split[(t, 0)],
            _ => signs[(t, j)],
        });
        let out = impact_series(&dup, &signs2, &sessions);
        for t in 0..200 {
            for j in 0..n {
                assert!((out[(t, j)] - base[(t, j)]).abs() < 1e-10);
            }
            assert!((out[(t, 3)] - base[(t, 1)]).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_json_round_trip() {
        for k in [
            random_kernel(2, 3, 1),
            Kernel::Homogeneous { n: 3, g_diag: 0.29, g_off: 0.0046, decay: DecayLaw { beta: 0.14, tau0: 0.3 }, support: 30 },
        ] {
            let text = serde_json::to_string(&k).unwrap();
            let back: Kernel = serde_json::from_str(&text).unwrap();
            assert_eq!(back, k);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn homogeneous_fit_is_permutation_invariant(seed in 0u64..500) {
            let n = 4;
            let eps = gaussian(3000, n, seed);
            let mix = eps.column_sum() * 0.3;
            let eps = Mat::from_fn(3000, n, |t, j| eps[(t, j)] + mix[t]);
            let p = panel(gaussian(3000, n, seed + 1), eps);
            let perm = [2usize, 0, 3, 1];
            let q = p.subset(&perm);
            let d = DecayLaw { beta: 0.2, tau0: 0.5 };
            let (a, ..) = fit_homogeneous(&compute(&p, &cfg(5)).unwrap(), d, 5).unwrap();
            let (b, ..) = fit_homogeneous(&compute(&q, &cfg(5)).unwrap(), d, 5).unwrap();
            let (Kernel::Homogeneous { g_diag: ad, g_off: ao, .. }, Kernel::Homogeneous { g_diag: bd, g_off: bo, .. }) = (a, b) else { unreachable!() };
            prop_assert!((ad - bd).abs() < 1e-12);
            prop_assert!((ao - bo).abs() < 1e-12);
        }
    }
}
