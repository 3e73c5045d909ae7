//! Model-implied response and return covariance, and their split into
//! impact channels.
//!
//! With `Z_t = Σ_{u=1..L} g_u ε_{t−u}` the impact part of a return and
//! `c_s = E[ε_{t+s} ε_tᵀ]`:
//!
//! * `r_s = Σ_u g_u c_{s−u}` and `R_τ = Σ_{s=1..τ} r_s`;
//! * `Γ(k) = E[Z_{t+k} Z_tᵀ] = Σ_{u,u'} g_u c_{k−u+u'} g_{u'}ᵀ` and
//!   `Σ_{G,τ} = Σ_{|k|<τ} (τ − |k|) Γ(k)`.
//!
//! Sign correlations beyond the horizon are treated as zero. Lags past the
//! estimated range either fail or are filled by a power-law tail.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::mats;
use crate::kernels::Kernel;
use crate::linalg::{diag_mean, off_mean, Mat};

#[derive(Debug, Error, PartialEq)]
pub enum DecompError {
    #[error("sign correlations known to lag {available}, need {needed}")]
    HorizonTooShort { needed: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompOptions {
    /// Largest sign-correlation lag entering the sums.
    pub horizon: usize,
    /// Fill missing lags up to the horizon with a fitted power law.
    pub extrapolate_tail: bool,
}

impl Default for DecompOptions {
    fn default() -> Self {
        Self {
            horizon: 100,
            extrapolate_tail: false,
        }
    }
}

/// Sign correlations `c_s` for `|s| ≤ max_lag`, zero beyond the horizon.
#[derive(Debug, Clone)]
pub struct SignCorrelation {
    pos: Vec<Mat>,
    n: usize,
}

impl SignCorrelation {
    /// `c_lagged[s]` holds `c_s` for `s ≥ 0`.
    pub fn new(
        c_lagged: &[Mat],
        needed: usize,
        opts: &DecompOptions,
    ) -> Result<Self, DecompError> {
        let n = c_lagged.first().map_or(0, Mat::nrows);
        let max_lag = needed.min(opts.horizon);
        let available = c_lagged.len().saturating_sub(1);
        let mut pos: Vec<Mat> = c_lagged.iter().take(max_lag + 1).cloned().collect();
        if max_lag > available {
            if !opts.extrapolate_tail {
                return Err(DecompError::HorizonTooShort {
                    needed: max_lag,
                    available,
                });
            }
            pos.extend(power_law_tail(c_lagged, available + 1, max_lag));
        }
        Ok(Self { pos, n })
    }

    pub fn get(&self, s: i64) -> Mat {
        let k = s.unsigned_abs() as usize;
        match self.pos.get(k) {
            None => Mat::zeros(self.n, self.n),
            Some(m) if s >= 0 => m.clone(),
            Some(m) => m.transpose(),
        }
    }

    pub fn max_lag(&self) -> usize {
        self.pos.len() - 1
    }
}

/// Extends `c` to lags `from..=to` as `c̄ (s / s̄)^{−γ}`, with `c̄` the
/// average of the last five lags at mean lag `s̄` and `γ` fitted on the
/// diagonal mean over the last half of the known lags.
fn power_law_tail(c: &[Mat], from: usize, to: usize) -> Vec<Mat> {
    let n = c[0].nrows();
    let last = c.len() - 1;
    let lo = (last / 2).max(1);
    let pts: Vec<(f64, f64)> = (lo..=last)
        .filter_map(|s| {
            let d = diag_mean(&c[s]);
            (d > 0.0).then(|| ((s as f64).ln(), d.ln()))
        })
        .collect();
    if pts.len() < 2 || last < 1 {
        return vec![Mat::zeros(n, n); to + 1 - from];
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let first = last.saturating_sub(4).max(1);
    let count = (last - first + 1) as f64;
    let mut base = Mat::zeros(n, n);
    for m in &c[first..=last] {
        base += m;
    }
    base /= count;
    let s_ref = (first + last) as f64 / 2.0;
    (from..=to)
        .map(|s| &base * (s as f64 / s_ref).powf(slope))
        .collect()
}

fn check_dims(kernel: &Kernel, c_lagged: &[Mat]) -> Result<(), DecompError> {
    let n = kernel.n_assets();
    match c_lagged.first() {
        Some(c) if c.shape() == (n, n) => Ok(()),
        Some(c) => Err(DecompError::DimensionMismatch(format!(
            "kernel has {n} assets, sign correlations are {:?}",
            c.shape()
        ))),
        None => Err(DecompError::DimensionMismatch("no sign correlations".into())),
    }
}

/// Model differential response `r_s`, `s = 1..=tau_max`.
pub fn model_differential(
    kernel: &Kernel,
    c_lagged: &[Mat],
    tau_max: usize,
    opts: &DecompOptions,
) -> Result<Vec<Mat>, DecompError> {
    check_dims(kernel, c_lagged)?;
    let g = kernel.differential();
    let l = g.len();
    let needed = tau_max.saturating_sub(1).max(l.saturating_sub(1));
    let c = SignCorrelation::new(c_lagged, needed, opts)?;
    Ok((1..=tau_max)
        .into_par_iter()
        .map(|s| {
            let n = kernel.n_assets();
            let mut acc = Mat::zeros(n, n);
            for (k, gu) in g.iter().enumerate() {
                acc += gu * c.get(s as i64 - (k as i64 + 1));
            }
            acc
        })
        .collect())
}

/// Model response `R_τ`, `τ = 1..=tau_max`.
pub fn model_response(
    kernel: &Kernel,
    c_lagged: &[Mat],
    tau_max: usize,
    opts: &DecompOptions,
) -> Result<Vec<Mat>, DecompError> {
    let r = model_differential(kernel, c_lagged, tau_max, opts)?;
    Ok(crate::kernels::integrate_kernel(&r))
}

/// Autocovariance `Γ(k)` of the impact returns for `k = 0..k_max`.
fn impact_autocovariance(g: &[Mat], c: &SignCorrelation, k_max: usize) -> Vec<Mat> {
    let l = g.len() as i64;
    let n = g.first().map_or(0, Mat::nrows);
    let gt: Vec<Mat> = g.iter().map(Mat::transpose).collect();
    // P(j) = Σ_{u'} c_{j+u'} g_{u'}ᵀ for j ∈ [−L, k_max − 2].
    let j_lo = -l;
    let j_hi = k_max as i64 - 2;
    let p: Vec<Mat> = (j_lo..=j_hi)
        .into_par_iter()
        .map(|j| {
            let mut acc = Mat::zeros(n, n);
            for (k, gtu) in gt.iter().enumerate() {
                acc += c.get(j + k as i64 + 1) * gtu;
            }
            acc
        })
        .collect();
    (0..k_max)
        .into_par_iter()
        .map(|k| {
            let mut acc = Mat::zeros(n, n);
            for (idx, gu) in g.iter().enumerate() {
                let j = k as i64 - (idx as i64 + 1);
                acc += gu * &p[(j - j_lo) as usize];
            }
            acc
        })
        .collect()
}

/// `Σ_{G,τ}` for `τ = 1..=tau_max`.
pub fn impact_covariance(
    kernel: &Kernel,
    c_lagged: &[Mat],
    tau_max: usize,
    opts: &DecompOptions,
) -> Result<Vec<Mat>, DecompError> {
    check_dims(kernel, c_lagged)?;
    let g = kernel.differential();
    let l = g.len();
    if l == 0 || tau_max == 0 {
        let n = kernel.n_assets();
        return Ok(vec![Mat::zeros(n, n); tau_max]);
    }
    let needed = tau_max + l - 2;
    let c = SignCorrelation::new(c_lagged, needed, opts)?;
    let gamma = impact_autocovariance(&g, &c, tau_max);
    Ok((1..=tau_max)
        .map(|tau| {
            let mut acc = &gamma[0] * tau as f64;
            for (k, gk) in gamma.iter().enumerate().take(tau).skip(1) {
                acc += (gk + gk.transpose()) * (tau - k) as f64;
            }
            acc
        })
        .collect())
}

/// Empirical covariance split into impact and noise parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovDecomposition {
    pub lags: Vec<usize>,
    #[serde(with = "mats")]
    pub sigma_total: Vec<Mat>,
    #[serde(with = "mats")]
    pub sigma_g: Vec<Mat>,
    #[serde(with = "mats")]
    pub sigma_w: Vec<Mat>,
    /// Mean diagonal of `Σ_G` over mean diagonal of `Σ`.
    pub explained_diag: Vec<f64>,
    /// Same for off-diagonal means; absent for one asset.
    pub explained_off: Option<Vec<f64>>,
}

/// Decomposes `sigma_total[τ−1] = Σ_τ`, `τ = 1..=tau_max`.
pub fn model_covariance(
    kernel: &Kernel,
    c_lagged: &[Mat],
    sigma_w: &Mat,
    sigma_total: &[Mat],
    tau_max: usize,
    opts: &DecompOptions,
) -> Result<CovDecomposition, DecompError> {
    if sigma_total.len() < tau_max {
        return Err(DecompError::DimensionMismatch(format!(
            "empirical covariance known to lag {}, requested {tau_max}",
            sigma_total.len()
        )));
    }
    let sigma_g = impact_covariance(kernel, c_lagged, tau_max, opts)?;
    let n = kernel.n_assets();
    let explained_diag = (0..tau_max)
        .map(|k| diag_mean(&sigma_g[k]) / diag_mean(&sigma_total[k]))
        .collect();
    let explained_off = (n > 1).then(|| {
        (0..tau_max)
            .map(|k| off_mean(&sigma_g[k]).unwrap() / off_mean(&sigma_total[k]).unwrap())
            .collect()
    });
    Ok(CovDecomposition {
        lags: (1..=tau_max).collect(),
        sigma_total: sigma_total[..tau_max].to_vec(),
        sigma_g,
        sigma_w: (1..=tau_max).map(|t| sigma_w * t as f64).collect(),
        explained_diag,
        explained_off,
    })
}

/// Channel contributions to the model response at one lag, averaged over
/// self pairs (`a1`, `a2`) and cross pairs (`b1`, `b2`, `b3`):
///
/// * `a1`: own kernel, own signs; `a2`: kernel to other assets and their
///   correlation with the own signs;
/// * `b1`: `G^{ii}` with `c^{ij}`; `b2`: `G^{ij}` with `c^{jj}`;
///   `b3`: `G^{ik}` with `c^{kj}` over `k ∉ {i, j}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSplit {
    pub tau: usize,
    pub a1: f64,
    pub a2: f64,
    pub b1: Option<f64>,
    pub b2: Option<f64>,
    pub b3: Option<f64>,
    /// `(a1, a2)` over their sum.
    pub self_weights: Option<[f64; 2]>,
    /// `(b1, b2, b3)` over their sum.
    pub cross_weights: Option<[f64; 3]>,
}

/// Index pairs `(u − 1, s − u)` for `s = 1..=τ`, `u = 1..=L`.
fn lag_pairs(l: usize, tau: usize) -> Vec<(usize, i64)> {
    let mut out = Vec::with_capacity(l * tau);
    for s in 1..=tau {
        for u in 1..=l {
            out.push((u - 1, s as i64 - u as i64));
        }
    }
    out
}

/// Channel splits for `τ = 1..=tau_max`.
pub fn channel_splits(
    kernel: &Kernel,
    c_lagged: &[Mat],
    tau_max: usize,
    opts: &DecompOptions,
) -> Result<Vec<ChannelSplit>, DecompError> {
    if tau_max == 0 {
        return Err(DecompError::DimensionMismatch("channel split needs τ ≥ 1".into()));
    }
    let resp = model_response(kernel, c_lagged, tau_max, opts)?;
    let g = kernel.differential();
    let needed = tau_max.saturating_sub(1).max(g.len().saturating_sub(1));
    let c = SignCorrelation::new(c_lagged, needed, opts)?;
    let n = kernel.n_assets();
    // d1[i][j] = Σ g^{ii} c^{ij}, d2[i][j] = Σ g^{ij} c^{jj}, accumulated
    // over s = 1..τ.
    let mut d1 = Mat::zeros(n, n);
    let mut d2 = Mat::zeros(n, n);
    let mut out = Vec::with_capacity(tau_max);
    for tau in 1..=tau_max {
        for (u, gu) in g.iter().enumerate() {
            let cd = c.get(tau as i64 - u as i64 - 1);
            for i in 0..n {
                for j in 0..n {
                    d1[(i, j)] += gu[(i, i)] * cd[(i, j)];
                    d2[(i, j)] += gu[(i, j)] * cd[(j, j)];
                }
            }
        }
        out.push(split_from(tau, &d1, &d2, &resp[tau - 1]));
    }
    Ok(out)
}

pub fn channel_split(
    kernel: &Kernel,
    c_lagged: &[Mat],
    tau: usize,
    opts: &DecompOptions,
) -> Result<ChannelSplit, DecompError> {
    Ok(channel_splits(kernel, c_lagged, tau, opts)?.pop().unwrap())
}

fn split_from(tau: usize, d1: &Mat, d2: &Mat, total: &Mat) -> ChannelSplit {
    let n = total.nrows();
    let a1 = diag_mean(d1);
    let a2 = diag_mean(total) - a1;
    let (b1, b2, b3) = if n > 1 {
        let b1 = off_mean(d1).unwrap();
        let b2 = off_mean(d2).unwrap();
        (Some(b1), Some(b2), Some(off_mean(total).unwrap() - b1 - b2))
    } else {
        (None, None, None)
    };
    let self_sum = a1 + a2;
    let self_weights = (self_sum != 0.0).then(|| [a1 / self_sum, a2 / self_sum]);
    let cross_weights = match (b1, b2, b3) {
        (Some(x), Some(y), Some(z)) if x + y + z != 0.0 => {
            let s = x + y + z;
            Some([x / s, y / s, z / s])
        }
        _ => None,
    };
    ChannelSplit {
        tau,
        a1,
        a2,
        b1,
        b2,
        b3,
        self_weights,
        cross_weights,
    }
}

/// Brute-force channel terms `T^{(k)}_{ij} = Σ g^{ik} c^{kj}` summed over
/// the lag structure, for verification.
pub fn channel_terms_brute(kernel: &Kernel, c: &SignCorrelation, tau: usize) -> Vec<Mat> {
    let g = kernel.differential();
    let n = kernel.n_assets();
    let mut out = vec![Mat::zeros(n, n); n];
    for (u, d) in lag_pairs(g.len(), tau) {
        let cd = c.get(d);
        for (k, t) in out.iter_mut().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    t[(i, j)] += g[u][(i, k)] * cd[(k, j)];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{homogeneous_matrix, DecayLaw};
    use crate::linalg::max_asymmetry;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(n: usize, lags: usize) -> Vec<Mat> {
        (0..=lags)
            .map(|s| if s == 0 { Mat::identity(n, n) } else { Mat::zeros(n, n) })
            .collect()
    }

    /// fGn correlations with an equal cross-correlation `rho`.
    pub(crate) fn long_memory(n: usize, lags: usize, gamma: f64, rho: f64) -> Vec<Mat> {
        let h2 = 2.0 - gamma;
        (0..=lags)
            .map(|s| {
                let k = s as f64;
                let a = 0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2));
                homogeneous_matrix(n, a, rho * a)
            })
            .collect()
    }

    fn random_kernel(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Kernel {
        Kernel::Full {
            lags: (0..l)
                .map(|_| Mat::from_fn(n, n, |_, _| StandardNormal.sample(rng)))
                .collect(),
        }
    }

    fn random_c(n: usize, lags: usize, rng: &mut ChaCha8Rng) -> Vec<Mat> {
        (0..=lags)
            .map(|_| Mat::from_fn(n, n, |_, _| StandardNormal.sample(rng)))
            .collect()
    }

    /// Direct evaluation with `H_m = G_m − G_{m−τ}`.
    fn brute_response_and_cov(kernel: &Kernel, c: &SignCorrelation, tau: usize) -> (Mat, Mat) {
        let big = kernel.integrated();
        let n = kernel.n_assets();
        let at = |m: i64| -> Mat {
            if m <= 0 {
                Mat::zeros(n, n)
            } else {
                kernel.integrated_at(&big, m as usize)
            }
        };
        let m_max = big.len() + tau - 1;
        let h: Vec<Mat> = (1..=m_max as i64).map(|m| at(m) - at(m - tau as i64)).collect();
        let mut r = Mat::zeros(n, n);
        let mut s = Mat::zeros(n, n);
        for (a, ha) in h.iter().enumerate() {
            r += ha * c.get(tau as i64 - (a as i64 + 1));
            for (b, hb) in h.iter().enumerate() {
                s += ha * c.get(b as i64 - a as i64) * hb.transpose();
            }
        }
        (r, s)
    }

    #[test]
    fn white_signs_give_integrated_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernel(3, 6, &mut rng);
        let resp = model_response(&k, &white(3, 20), 12, &DecompOptions::default()).unwrap();
        let big = k.integrated();
        for (t, r) in resp.iter().enumerate() {
            let expect = k.integrated_at(&big, t + 1);
            assert!((r - expect).abs().max() < 1e-10);
        }
    }

    #[test]
    fn matches_direct_double_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_kernel(3, 4, &mut rng);
        let c = long_memory(3, 40, 0.5, 0.3);
        let opts = DecompOptions::default();
        let table = SignCorrelation::new(&c, 40, &opts).unwrap();
        let resp = model_response(&k, &c, 8, &opts).unwrap();
        let cov = impact_covariance(&k, &c, 8, &opts).unwrap();
        for tau in 1..=8 {
            let (r, s) = brute_response_and_cov(&k, &table, tau);
            assert!((&resp[tau - 1] - r).abs().max() < 1e-10);
            assert!((&cov[tau - 1] - s).abs().max() < 1e-10);
            assert!(max_asymmetry(&cov[tau - 1]) < 1e-10);
        }
    }

    #[test]
    fn zero_kernel_explains_nothing() {
        let k = Kernel::zero(2, 5);
        let c = long_memory(2, 30, 0.5, 0.2);
        let total: Vec<Mat> = (1..=5).map(|t| homogeneous_matrix(2, t as f64, 0.2 * t as f64)).collect();
        let d = model_covariance(&k, &c, &Mat::identity(2, 2), &total, 5, &DecompOptions::default()).unwrap();
        for k in 0..5 {
            assert_eq!(d.sigma_g[k], Mat::zeros(2, 2));
            assert_eq!(d.explained_diag[k], 0.0);
            assert_eq!(d.explained_off.as_ref().unwrap()[k], 0.0);
        }
    }

    #[test]
    fn horizon_checks_and_tail() {
        let k = Kernel::zero(1, 10);
        let c = long_memory(1, 5, 0.5, 0.0);
        let opts = DecompOptions::default();
        assert_eq!(
            impact_covariance(&k, &c, 10, &opts),
            Err(DecompError::HorizonTooShort { needed: 18, available: 5 })
        );
        let ext = DecompOptions { extrapolate_tail: true, ..opts };
        assert!(impact_covariance(&k, &c, 10, &ext).is_ok());
        // The tail of an exact power law continues it.
        let c = long_memory(1, 200, 0.5, 0.0);
        let tail = power_law_tail(&c[..=100], 101, 200);
        for (k, m) in tail.iter().enumerate() {
            let exact = c[101 + k][(0, 0)];
            assert!((m[(0, 0)] / exact - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn horizon_truncation_is_bounded_by_tail() {
        let d = DecayLaw { beta: 0.25, tau0: 1.0 };
        let k = Kernel::Homogeneous { n: 2, g_diag: 0.3, g_off: 0.05, decay: d, support: 30 };
        let c = long_memory(2, 120, 0.5, 0.2);
        let g = k.differential();
        let tau = 20;
        let full = impact_covariance(&k, &c, tau, &DecompOptions { horizon: 100, extrapolate_tail: false }).unwrap();
        for h in [20usize, 35, 45] {
            let cut = impact_covariance(&k, &c, tau, &DecompOptions { horizon: h, extrapolate_tail: false }).unwrap();
            // Bound: every dropped term |g_u c g_u'| over |lag| > h.
            let cmax = c[h + 1..].iter().map(|m| m.abs().max()).fold(0.0, f64::max);
            let mut bound = 0.0;
            for kk in -(tau as i64 - 1)..tau as i64 {
                for (u, gu) in g.iter().enumerate() {
                    for (v, gv) in g.iter().enumerate() {
                        let lag = kk - u as i64 + v as i64;
                        if lag.unsigned_abs() as usize > h {
                            bound += (tau as i64 - kk.abs()) as f64 * gu.abs().sum() * gv.abs().max() * cmax * 2.0;
                        }
                    }
                }
            }
            let diff = (&full[tau - 1] - &cut[tau - 1]).abs().max();
            assert!(diff <= bound + 1e-15, "h={h}: {diff} > {bound}");
        }
    }

    #[test]
    fn decoupled_market_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<Mat> = (0..4)
            .map(|_| Mat::from_diagonal(&nalgebra::DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng))))
            .collect();
        let k = Kernel::Full { lags: g };
        let c: Vec<Mat> = long_memory(3, 20, 0.5, 0.0);
        let s = channel_split(&k, &c, 5, &DecompOptions::default()).unwrap();
        assert!(s.a2.abs() < 1e-12);
        assert_eq!(s.b1, Some(0.0));
        assert_eq!(s.b2, Some(0.0));
        assert!(s.b3.unwrap().abs() < 1e-12);
    }

    #[test]
    fn homogeneous_channels_by_hand() {
        // N = 3, homogeneous kernel and correlations: each term is a product
        // of a kernel scalar and a correlation scalar.
        let n = 3;
        let d = DecayLaw { beta: 0.14, tau0: 0.3 };
        let (gd, go) = (0.29, 0.05);
        let k = Kernel::Homogeneous { n, g_diag: gd, g_off: go, decay: d, support: 5 };
        let c = long_memory(n, 20, 0.5, 0.3);
        let tau = 4;
        let s = channel_split(&k, &c, tau, &DecompOptions::default()).unwrap();
        // Σ ψ_u c_{s−u} summed over the lag structure, for the c scalar a_d.
        let psi = d.diff_shape(5);
        let mut w = 0.0;
        for (u, d_) in lag_pairs(5, tau) {
            let cd = &c[d_.unsigned_abs() as usize];
            w += psi[u] * cd[(0, 0)];
        }
        let (cd, co) = (w, 0.3 * w);
        assert!((s.a1 - gd * cd).abs() < 1e-12);
        assert!((s.a2 - (n - 1) as f64 * go * co).abs() < 1e-12);
        assert!((s.b1.unwrap() - gd * co).abs() < 1e-12);
        assert!((s.b2.unwrap() - go * cd).abs() < 1e-12);
        assert!((s.b3.unwrap() - (n - 2) as f64 * go * co).abs() < 1e-12);
    }

    #[test]
    fn market_mode_is_carried_by_b3() {
        let n = 100;
        let k = Kernel::Homogeneous {
            n,
            g_diag: 0.29,
            g_off: 0.0046,
            decay: DecayLaw { beta: 0.14, tau0: 0.3 },
            support: 30,
        };
        let c = long_memory(n, 60, 0.5, 0.15);
        let s = channel_split(&k, &c, 10, &DecompOptions::default()).unwrap();
        let w = s.cross_weights.unwrap();
        assert!(w[2] > w[0] && w[2] > w[1], "{w:?}");
    }

    #[test]
    fn large_cap_response_is_flat() {
        let n = 10;
        let k = Kernel::Homogeneous {
            n,
            g_diag: 0.29,
            g_off: 0.0046,
            decay: DecayLaw { beta: 0.25, tau0: 0.3 },
            support: 30,
        };
        let c = long_memory(n, 100, 0.5, 0.15);
        let r = model_response(&k, &c, 30, &DecompOptions::default()).unwrap();
        let d: Vec<f64> = r[4..30].iter().map(diag_mean).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v / mean - 1.0).abs()).fold(0.0, f64::max);
        assert!(var < 0.25, "relative variation {var}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn channels_are_complete(seed in 0u64..1_000_000, n in 1usize..5, l in 1usize..5, tau in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_kernel(n, l, &mut rng);
            let c = random_c(n, 12, &mut rng);
            let opts = DecompOptions::default();
            let s = channel_split(&k, &c, tau, &opts).unwrap();
            let table = SignCorrelation::new(&c, 12, &opts).unwrap();
            let terms = channel_terms_brute(&k, &table, tau);
            let resp = &model_response(&k, &c, tau, &opts).unwrap()[tau - 1];
            let nf = n as f64;
            let a1: f64 = (0..n).map(|i| terms[i][(i, i)]).sum::<f64>() / nf;
            let a2: f64 = (0..n).map(|i| (0..n).filter(|&k| k != i).map(|k| terms[k][(i, i)]).sum::<f64>()).sum::<f64>() / nf;
            prop_assert!((s.a1 - a1).abs() < 1e-10);
            prop_assert!((s.a2 - a2).abs() < 1e-10);
            prop_assert!((s.a1 + s.a2 - diag_mean(resp)).abs() < 1e-10);
            if n > 1 {
                let pairs = (n * n - n) as f64;
                let mut b = [0.0; 3];
                for i in 0..n { for j in 0..n { if i != j {
                    b[0] += terms[i][(i, j)];
                    b[1] += terms[j][(i, j)];
                    b[2] += (0..n).filter(|&k| k != i && k != j).map(|k| terms[k][(i, j)]).sum::<f64>();
                }}}
                prop_assert!((s.b1.unwrap() - b[0] / pairs).abs() < 1e-10);
                prop_assert!((s.b2.unwrap() - b[1] / pairs).abs() < 1e-10);
                prop_assert!((s.b3.unwrap() - b[2] / pairs).abs() < 1e-10);
                let sum = s.b1.unwrap() + s.b2.unwrap() + s.b3.unwrap();
                prop_assert!((sum - off_mean(resp).unwrap()).abs() < 1e-10);
            }
        }
    }
}
