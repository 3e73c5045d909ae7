//! Empirical lagged second-order statistics of a panel.
//!
//! With `X_t` the cumulated return and `𝓔_t` the cumulated imbalance:
//!
//! * `Σ_τ = ⟨(X_{t+τ} − X_t)(X_{t+τ} − X_t)ᵀ⟩`
//! * `C_τ = ⟨(𝓔_{t+τ} − 𝓔_t)(𝓔_{t+τ} − 𝓔_t)ᵀ⟩`
//! * `R_τ = ⟨(X_{t+τ} − X_t) ε_tᵀ⟩`, negative `τ` allowed, and `r_τ = R_τ − R_{τ−1}`
//! * `ĉ_τ = (1/T) Σ_t ε_t ε_{t−τ}ᵀ`
//!
//! Windows never straddle a session boundary. Windowed statistics divide by
//! their number of windows; `ĉ` divides by the total bin count `T`.
//! Standard errors of the diagonal and off-diagonal profiles use batch means
//! over equal blocks of window start times.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Settings};
use crate::io::mats;
use crate::linalg::Mat;
use crate::panel::Panel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LagError {
    #[error("insufficient data: {t} bins for a maximum lag of {lag} (need at least {need})")]
    InsufficientData { t: usize, lag: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagConfig {
    /// Largest lag of `Σ`, `C`, `R` and `r`.
    pub tau_max: usize,
    /// Kernel support used by the fits; must not exceed `tau_max`.
    pub t_lag: usize,
    /// Most negative response lag (≤ 0).
    pub response_min: i64,
    /// Largest lag of `ĉ`.
    pub c_horizon: usize,
    /// Require `T ≥ guard · max(tau_max, t_lag)`; 0 disables the check.
    pub guard: usize,
    pub se_blocks: usize,
}

impl Default for LagConfig {
    fn default() -> Self {
        Self {
            tau_max: 30,
            t_lag: 30,
            response_min: -10,
            c_horizon: 100,
            guard: 10,
            se_blocks: 20,
        }
    }
}

impl LagConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let d = Self::default();
        let cfg = Self {
            tau_max: s.parsed_or("tau_max", d.tau_max)?,
            t_lag: s.parsed_or("lags", d.t_lag)?,
            response_min: s.parsed_or("response_min", d.response_min)?,
            c_horizon: s.parsed_or("horizon", d.c_horizon)?,
            guard: s.parsed_or("guard_factor", d.guard)?,
            se_blocks: s.parsed_or("se_blocks", d.se_blocks)?,
        };
        if cfg.tau_max == 0 || cfg.t_lag == 0 {
            return Err(ConfigError::Invalid("tau_max and lags must be positive".into()));
        }
        if cfg.response_min > 0 {
            return Err(ConfigError::Invalid("response_min must be <= 0".into()));
        }
        if cfg.se_blocks < 2 {
            return Err(ConfigError::Invalid("se_blocks must be at least 2".into()));
        }
        Ok(cfg)
    }

    /// `tau_max` raised to `t_lag` so that `r` covers the kernel support.
    fn effective_tau_max(&self) -> usize {
        self.tau_max.max(self.t_lag)
    }
}

/// Diagonal and off-diagonal mean profile of a lag-indexed matrix family.
/// `off` is absent for a single asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub lags: Vec<i64>,
    pub diag: Vec<f64>,
    pub diag_se: Vec<f64>,
    pub off: Option<Vec<f64>>,
    pub off_se: Option<Vec<f64>>,
}

impl Profile {
    fn from_points(lags: Vec<i64>, pts: Vec<Point>, single: bool) -> Self {
        Self {
            lags,
            diag: pts.iter().map(|p| p.diag).collect(),
            diag_se: pts.iter().map(|p| p.diag_se).collect(),
            off: (!single).then(|| pts.iter().map(|p| p.off).collect()),
            off_se: (!single).then(|| pts.iter().map(|p| p.off_se).collect()),
        }
    }

    pub fn index_of(&self, lag: i64) -> Option<usize> {
        self.lags.iter().position(|&l| l == lag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagStats {
    pub n_assets: usize,
    pub t_eff: usize,
    pub config: LagConfig,
    /// `Σ_τ` for `τ = 1..=tau_max`.
    #[serde(with = "mats")]
    pub sigma: Vec<Mat>,
    /// `C_τ` for `τ = 1..=tau_max`.
    #[serde(with = "mats")]
    pub c_cum: Vec<Mat>,
    /// `ĉ_τ` for `τ = 0..=c_horizon`; negative lags by transposition.
    #[serde(with = "mats")]
    pub c_lagged: Vec<Mat>,
    /// `R_τ` for `τ = response_min..=tau_max`.
    #[serde(with = "mats")]
    pub response: Vec<Mat>,
    /// `r_τ` for `τ = 1..=tau_max`.
    #[serde(with = "mats")]
    pub r_diff: Vec<Mat>,
    pub sigma_profile: Profile,
    pub c_cum_profile: Profile,
    pub c_lagged_profile: Profile,
    pub response_profile: Profile,
}

impl LagStats {
    pub fn tau_max(&self) -> usize {
        self.sigma.len()
    }

    pub fn c_horizon(&self) -> usize {
        self.c_lagged.len() - 1
    }

    pub fn sigma(&self, tau: usize) -> &Mat {
        &self.sigma[tau - 1]
    }

    pub fn c_cum(&self, tau: usize) -> &Mat {
        &self.c_cum[tau - 1]
    }

    /// `ĉ_τ` for any `|τ| ≤ c_horizon`.
    pub fn c(&self, tau: i64) -> Mat {
        if tau >= 0 {
            self.c_lagged[tau as usize].clone()
        } else {
            self.c_lagged[(-tau) as usize].transpose()
        }
    }

    pub fn response(&self, tau: i64) -> &Mat {
        &self.response[(tau - self.config.response_min) as usize]
    }

    pub fn r(&self, tau: usize) -> &Mat {
        &self.r_diff[tau - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Point {
    diag: f64,
    diag_se: f64,
    off: f64,
    off_se: f64,
}

/// Paired rows `(a_k, b_k)` whose mean outer product is a statistic.
struct Pairs {
    a: Mat,
    b: Mat,
    starts: Vec<usize>,
}

impl Pairs {
    fn with_capacity(rows: usize, n: usize) -> Self {
        Self {
            a: Mat::zeros(rows, n),
            b: Mat::zeros(rows, n),
            starts: Vec::with_capacity(rows),
        }
    }

    /// `Σ_k a_k b_kᵀ / denom` with the batch-means profile point. The block
    /// means use the per-block window count, rescaled by `count / denom`.
    fn reduce(&self, denom: f64, t: usize, blocks: usize) -> (Mat, Point) {
        let n = self.a.ncols();
        let count = self.starts.len();
        let m = if count == 0 {
            Mat::zeros(n, n)
        } else {
            self.a.transpose() * &self.b / denom
        };
        let pairs = (n * n - n).max(1) as f64;
        let mut cnt = vec![0usize; blocks];
        let mut dsum = vec![0.0; blocks];
        let mut osum = vec![0.0; blocks];
        for (k, &s) in self.starts.iter().enumerate() {
            let blk = (s * blocks / t.max(1)).min(blocks - 1);
            let ra = self.a.row(k);
            let rb = self.b.row(k);
            let d = ra.dot(&rb);
            let tot = ra.sum() * rb.sum();
            cnt[blk] += 1;
            dsum[blk] += d;
            osum[blk] += tot - d;
        }
        let scale = if denom > 0.0 { count as f64 / denom } else { 0.0 };
        let se = |sums: &[f64], norm: f64| -> f64 {
            let means: Vec<f64> = (0..blocks)
                .filter(|&b| cnt[b] > 0)
                .map(|b| sums[b] / cnt[b] as f64 / norm)
                .collect();
            let k = means.len();
            if k < 2 {
                return f64::NAN;
            }
            let mu = means.iter().sum::<f64>() / k as f64;
            let var = means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt() * scale
        };
        let diag = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n as f64;
        let off = if n > 1 {
            (m.sum() - diag * n as f64) / pairs
        } else {
            f64::NAN
        };
        let point = Point {
            diag,
            diag_se: se(&dsum, n as f64),
            off,
            off_se: if n > 1 { se(&osum, pairs) } else { f64::NAN },
        };
        (m, point)
    }
}

/// Prefix sums of each session block: `P[0] = 0`, `P[k] = Σ_{s<k} row_s`.
fn prefixes(m: &Mat, sessions: &[Range<usize>]) -> Vec<Mat> {
    sessions
        .iter()
        .map(|r| {
            let len = r.end - r.start;
            let mut p = Mat::zeros(len + 1, m.ncols());
            for k in 0..len {
                for j in 0..m.ncols() {
                    p[(k + 1, j)] = p[(k, j)] + m[(r.start + k, j)];
                }
            }
            p
        })
        .collect()
}

fn check(t: usize, lag: usize, guard: usize) -> Result<(), LagError> {
    let need = (guard * lag).max(lag + 1);
    if t < need {
        return Err(LagError::InsufficientData { t, lag, need });
    }
    Ok(())
}

/// `Σ_τ`-style windowed covariance of the cumulated columns of `m`.
fn cumulated_covariance(
    m: &Mat,
    sessions: &[Range<usize>],
    tau_max: usize,
    blocks: usize,
) -> Vec<(Mat, Point)> {
    let t = m.nrows();
    let n = m.ncols();
    let pre = prefixes(m, sessions);
    (1..=tau_max)
        .into_par_iter()
        .map(|tau| {
            let rows: usize = sessions
                .iter()
                .map(|r| (r.end - r.start + 1).saturating_sub(tau))
                .sum();
            let mut pairs = Pairs::with_capacity(rows, n);
            let mut k = 0;
            for (r, p) in sessions.iter().zip(&pre) {
                let len = r.end - r.start;
                if len < tau {
                    continue;
                }
                for a in 0..=(len - tau) {
                    for j in 0..n {
                        let d = p[(a + tau, j)] - p[(a, j)];
                        pairs.a[(k, j)] = d;
                        pairs.b[(k, j)] = d;
                    }
                    pairs.starts.push(r.start + a);
                    k += 1;
                }
            }
            let count = pairs.starts.len() as f64;
            pairs.reduce(count, t, blocks)
        })
        .collect()
}

/// Return covariance `Σ_τ`, `τ = 1..=tau_max`.
pub fn return_covariance(panel: &Panel, tau_max: usize, guard: usize) -> Result<Vec<Mat>, LagError> {
    check(panel.n_bins(), tau_max, guard)?;
    Ok(cumulated_covariance(&panel.returns, &panel.session_ranges(), tau_max, 2)
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

/// Cumulated sign covariance `C_τ`, `τ = 1..=tau_max`.
pub fn sign_covariance_cumulated(
    panel: &Panel,
    tau_max: usize,
    guard: usize,
) -> Result<Vec<Mat>, LagError> {
    check(panel.n_bins(), tau_max, guard)?;
    Ok(cumulated_covariance(&panel.signs, &panel.session_ranges(), tau_max, 2)
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

fn lagged_products(
    m: &Mat,
    sessions: &[Range<usize>],
    horizon: usize,
    blocks: usize,
) -> Vec<(Mat, Point)> {
    let t = m.nrows();
    let n = m.ncols();
    (0..=horizon)
        .into_par_iter()
        .map(|tau| {
            let rows: usize = sessions
                .iter()
                .map(|r| (r.end - r.start).saturating_sub(tau))
                .sum();
            let mut pairs = Pairs::with_capacity(rows, n);
            let mut k = 0;
            for r in sessions {
                for s in (r.start + tau)..r.end {
                    pairs.a.row_mut(k).copy_from(&m.row(s));
                    pairs.b.row_mut(k).copy_from(&m.row(s - tau));
                    pairs.starts.push(s - tau);
                    k += 1;
                }
            }
            pairs.reduce(t as f64, t, blocks)
        })
        .collect()
}

/// `ĉ_τ = (1/T) Σ_t ε_t ε_{t−τ}ᵀ` for `τ = 0..=horizon`.
pub fn lagged_sign_correlation(
    panel: &Panel,
    horizon: usize,
    guard: usize,
) -> Result<Vec<Mat>, LagError> {
    check(panel.n_bins(), horizon, guard)?;
    Ok(lagged_products(&panel.signs, &panel.session_ranges(), horizon, 2)
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

fn response_impl(
    x: &Mat,
    eps: &Mat,
    sessions: &[Range<usize>],
    tau_min: i64,
    tau_max: i64,
    blocks: usize,
) -> Vec<(Mat, Point)> {
    let t = x.nrows();
    let n = x.ncols();
    let pre = prefixes(x, sessions);
    (tau_min..=tau_max)
        .into_par_iter()
        .map(|tau| {
            if tau == 0 {
                let zero = Point {
                    diag: 0.0,
                    diag_se: 0.0,
                    off: if n > 1 { 0.0 } else { f64::NAN },
                    off_se: if n > 1 { 0.0 } else { f64::NAN },
                };
                return (Mat::zeros(n, n), zero);
            }
            let m_abs = tau.unsigned_abs() as usize;
            let rows: usize = sessions
                .iter()
                .map(|r| {
                    let len = r.end - r.start;
                    if tau > 0 {
                        len.saturating_sub(m_abs)
                    } else {
                        len - (m_abs - 1).min(len)
                    }
                })
                .sum();
            let mut pairs = Pairs::with_capacity(rows, n);
            let mut k = 0;
            for (r, p) in sessions.iter().zip(&pre) {
                let len = r.end - r.start;
                let span: Box<dyn Iterator<Item = usize>> = if tau > 0 {
                    Box::new(0..len.saturating_sub(m_abs))
                } else {
                    Box::new((m_abs - 1).min(len)..len)
                };
                for s in span {
                    for j in 0..n {
                        pairs.a[(k, j)] = if tau > 0 {
                            p[(s + 1 + m_abs, j)] - p[(s + 1, j)]
                        } else {
                            p[(s + 1 - m_abs, j)] - p[(s + 1, j)]
                        };
                        pairs.b[(k, j)] = eps[(r.start + s, j)];
                    }
                    pairs.starts.push(r.start + s);
                    k += 1;
                }
            }
            debug_assert_eq!(k, rows);
            let count = pairs.starts.len() as f64;
            pairs.reduce(count.max(1.0), t, blocks)
        })
        .collect()
}

/// Response `R_τ` for `τ = tau_min..=tau_max` and the differential response
/// `r_τ = R_τ − R_{τ−1}` for `τ = 1..=tau_max`.
pub fn response(
    panel: &Panel,
    tau_min: i64,
    tau_max: usize,
    guard: usize,
) -> Result<(Vec<Mat>, Vec<Mat>), LagError> {
    let tau_min = tau_min.min(0);
    check(panel.n_bins(), tau_max.max(tau_min.unsigned_abs() as usize), guard)?;
    let all = response_impl(
        &panel.returns,
        &panel.signs,
        &panel.session_ranges(),
        tau_min,
        tau_max as i64,
        2,
    );
    let resp: Vec<Mat> = all.into_iter().map(|(m, _)| m).collect();
    let zero = (-tau_min) as usize;
    let r = (1..=tau_max)
        .map(|k| &resp[zero + k] - &resp[zero + k - 1])
        .collect();
    Ok((resp, r))
}

/// All statistics with batch-means profile errors.
pub fn compute(panel: &Panel, cfg: &LagConfig) -> Result<LagStats, LagError> {
    let t = panel.n_bins();
    let n = panel.n_assets();
    let tau_max = cfg.effective_tau_max();
    let response_min = cfg.response_min.min(0);
    check(t, tau_max, cfg.guard)?;
    check(t, response_min.unsigned_abs() as usize, 0)?;
    let c_horizon = cfg.c_horizon.max(cfg.t_lag);
    check(t, c_horizon, 0)?;
    let sessions = panel.session_ranges();
    let blocks = cfg.se_blocks.max(2);

    let split = |v: Vec<(Mat, Point)>| -> (Vec<Mat>, Vec<Point>) { v.into_iter().unzip() };
    let (sigma, sp) = split(cumulated_covariance(&panel.returns, &sessions, tau_max, blocks));
    let (c_cum, cp) = split(cumulated_covariance(&panel.signs, &sessions, tau_max, blocks));
    let (c_lagged, lp) = split(lagged_products(&panel.signs, &sessions, c_horizon, blocks));
    let (resp, rp) = split(response_impl(
        &panel.returns,
        &panel.signs,
        &sessions,
        response_min,
        tau_max as i64,
        blocks,
    ));
    let zero = (-response_min) as usize;
    let r_diff = (1..=tau_max)
        .map(|k| &resp[zero + k] - &resp[zero + k - 1])
        .collect();
    let single = n == 1;
    let pos: Vec<i64> = (1..=tau_max as i64).collect();
    Ok(LagStats {
        n_assets: n,
        t_eff: t,
        config: LagConfig {
            tau_max,
            c_horizon,
            response_min,
            ..cfg.clone()
        },
        sigma,
        c_cum,
        c_lagged,
        response: resp,
        r_diff,
        sigma_profile: Profile::from_points(pos.clone(), sp, single),
        c_cum_profile: Profile::from_points(pos, cp, single),
        c_lagged_profile: Profile::from_points((0..=c_horizon as i64).collect(), lp, single),
        response_profile: Profile::from_points((response_min..=tau_max as i64).collect(), rp, single),
    })
}

/// One row of the long-format profile table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub statistic: &'static str,
    pub lag: i64,
    pub value: f64,
    pub stderr: f64,
}

/// Diagonal/off-diagonal profiles in long format. `Σ` and `C` appear divided
/// by `τ`; `epps_ratio` is `Σ^off_τ / Σ^diag_τ`. Off-diagonal rows are
/// omitted for a single asset.
pub fn lag_profiles(stats: &LagStats) -> Vec<ProfileRow> {
    let mut rows = Vec::new();
    let mut push = |name_d: &'static str, name_o: &'static str, p: &Profile, per_tau: bool| {
        for (k, &lag) in p.lags.iter().enumerate() {
            let s = if per_tau { lag as f64 } else { 1.0 };
            rows.push(ProfileRow {
                statistic: name_d,
                lag,
                value: p.diag[k] / s,
                stderr: p.diag_se[k] / s,
            });
        }
        if let (Some(off), Some(off_se)) = (&p.off, &p.off_se) {
            for (k, &lag) in p.lags.iter().enumerate() {
                let s = if per_tau { lag as f64 } else { 1.0 };
                rows.push(ProfileRow {
                    statistic: name_o,
                    lag,
                    value: off[k] / s,
                    stderr: off_se[k] / s,
                });
            }
        }
    };
    push("sigma_diag_over_tau", "sigma_off_over_tau", &stats.sigma_profile, true);
    push("c_cum_diag_over_tau", "c_cum_off_over_tau", &stats.c_cum_profile, true);
    push("response_diag", "response_off", &stats.response_profile, false);
    push("c_lagged_diag", "c_lagged_off", &stats.c_lagged_profile, false);
    let p = &stats.sigma_profile;
    if let (Some(off), Some(off_se)) = (&p.off, &p.off_se) {
        for (k, &lag) in p.lags.iter().enumerate() {
            let ratio = off[k] / p.diag[k];
            let rel = ((off_se[k] / off[k]).powi(2) + (p.diag_se[k] / p.diag[k]).powi(2)).sqrt();
            rows.push(ProfileRow {
                statistic: "epps_ratio",
                lag,
                value: ratio,
                stderr: (ratio * rel).abs(),
            });
        }
    }
    rows
}
