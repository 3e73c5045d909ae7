//! Synthetic markets with known propagator, sign memory and noise.
//!
//! Each asset's imbalance starts as fractional Gaussian noise with Hurst
//! exponent `H = 1 − γ/2` (autocorrelation `∼ τ^{−γ}`), drawn exactly by
//! circulant embedding. The independent series are then mixed to the target
//! cross-correlation and rescaled to unit variance. Returns follow the
//! propagator model with Gaussian noise of covariance `σ_W`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Settings;
use crate::io::{self, mat};
use crate::kernels::{homogeneous_matrix, impact_series, DecayLaw, Kernel};
use crate::linalg::{psd_sqrt, Mat};
use crate::panel::{normalize_global, synthetic_times, Panel, PanelConfig, SessionBreak};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("sign memory exponent {0} outside (0, 1)")]
    InvalidGamma(f64),
    #[error("{0} is not positive semidefinite")]
    NotPsd(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SignCross {
    Independent,
    /// Equal correlation `rho` between every pair.
    Homogeneous { rho: f64 },
    /// `within` for pairs in the same sector, `between` otherwise.
    Sectored { within: f64, between: f64 },
    /// `N × k` loadings on `k` common factors; the rest is idiosyncratic.
    Loadings {
        #[serde(with = "mat")]
        matrix: Mat,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub n: usize,
    pub t: usize,
    pub kernel: Kernel,
    pub sign_gamma: Vec<f64>,
    pub sign_cross: SignCross,
    #[serde(with = "mat")]
    pub sigma_w: Mat,
    pub seed: u64,
    pub sectors: Option<Vec<String>>,
    pub hard_signs: bool,
}

/// Warm-up bins discarded before the returned sample.
pub fn warmup(spec: &MarketSpec) -> usize {
    2 * spec.kernel.support()
}

impl MarketSpec {
    /// Homogeneous market with the scalars of a typical large-cap fit.
    pub fn large_cap(n: usize, t: usize, seed: u64) -> Self {
        Self {
            n,
            t,
            kernel: Kernel::Homogeneous {
                n,
                g_diag: 0.29,
                g_off: 0.0046,
                decay: DecayLaw { beta: 0.14, tau0: 0.30 },
                support: 30,
            },
            sign_gamma: vec![0.5; n],
            sign_cross: SignCross::Homogeneous { rho: 0.15 },
            sigma_w: homogeneous_matrix(n, 0.13, 0.005),
            seed,
            sectors: None,
            hard_signs: false,
        }
    }

    pub fn sector_labels(&self) -> Vec<String> {
        match &self.sectors {
            Some(s) => s.clone(),
            None => vec!["ALL".to_string(); self.n],
        }
    }

    pub fn asset_ids(&self) -> Vec<String> {
        let width = self.n.saturating_sub(1).to_string().len().max(3);
        (0..self.n).map(|i| format!("A{i:0width$}")).collect()
    }

    fn validate(&self) -> Result<(), SynthError> {
        let n = self.n;
        if self.kernel.n_assets() != n || self.sigma_w.shape() != (n, n) || self.sign_gamma.len() != n {
            return Err(SynthError::DimensionMismatch(format!(
                "spec for {n} assets has kernel {}, σ_W {:?}, {} exponents",
                self.kernel.n_assets(),
                self.sigma_w.shape(),
                self.sign_gamma.len()
            )));
        }
        if let Some(s) = &self.sectors {
            if s.len() != n {
                return Err(SynthError::DimensionMismatch("one sector label per asset".into()));
            }
        }
        for &g in &self.sign_gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(SynthError::InvalidGamma(g));
            }
        }
        Ok(())
    }
}

const SIGN_STREAM: u64 = 0;
const FACTOR_STREAM: u64 = 1 << 20;
const NOISE_STREAM: u64 = 1 << 21;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fractional Gaussian noise of length `len` and unit variance with
/// autocovariance `½(|k+1|^{2H} − 2|k|^{2H} + |k−1|^{2H})`.
pub fn fractional_noise(len: usize, hurst: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let m = len.next_power_of_two().max(2);
    let two_h = 2.0 * hurst;
    let acov = |k: usize| -> f64 {
        let k = k as f64;
        0.5 * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
    };
    let size = 2 * m;
    let mut row: Vec<Complex<f64>> = (0..size)
        .map(|j| Complex::new(acov(if j <= m { j } else { size - j }), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(size);
    fft.process(&mut row);
    let eig: Vec<f64> = row.iter().map(|c| c.re.max(0.0)).collect();
    let mut w = vec![Complex::new(0.0, 0.0); size];
    for j in 0..=m {
        let scale = (eig[j] / size as f64).sqrt();
        if j == 0 || j == m {
            let z: f64 = StandardNormal.sample(rng);
            w[j] = Complex::new(scale * z, 0.0);
        } else {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let v = Complex::new(a, b) * (scale / 2.0_f64.sqrt());
            w[j] = v;
            w[size - j] = v.conj();
        }
    }
    fft.process(&mut w);
    w.iter().take(len).map(|c| c.re).collect()
}

fn target_correlation(spec: &MarketSpec) -> Result<Option<Mat>, SynthError> {
    let n = spec.n;
    Ok(match &spec.sign_cross {
        SignCross::Independent => None,
        SignCross::Homogeneous { rho } => Some(homogeneous_matrix(n, 1.0, *rho)),
        SignCross::Sectored { within, between } => {
            let labels = spec.sector_labels();
            Some(Mat::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else if labels[i] == labels[j] {
                    *within
                } else {
                    *between
                }
            }))
        }
        SignCross::Loadings { .. } => None,
    })
}

/// Raw mixed sign series of `len` rows, before rescaling.
fn raw_signs(spec: &MarketSpec, len: usize) -> Result<Mat, SynthError> {
    spec.validate()?;
    let n = spec.n;
    let own: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(spec.seed, SIGN_STREAM + i as u64);
            fractional_noise(len, 1.0 - spec.sign_gamma[i] / 2.0, &mut rng)
        })
        .collect();
    let z = Mat::from_fn(len, n, |t, i| own[i][t]);
    if let SignCross::Loadings { matrix } = &spec.sign_cross {
        if matrix.nrows() != n {
            return Err(SynthError::DimensionMismatch("loadings need one row per asset".into()));
        }
        let k = matrix.ncols();
        let mean_gamma = spec.sign_gamma.iter().sum::<f64>() / n as f64;
        let factors: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|f| {
                let mut rng = stream(spec.seed, FACTOR_STREAM + f as u64);
                fractional_noise(len, 1.0 - mean_gamma / 2.0, &mut rng)
            })
            .collect();
        let fm = Mat::from_fn(len, k, |t, f| factors[f][t]);
        let mut idio = Vec::with_capacity(n);
        for i in 0..n {
            let load = matrix.row(i).norm_squared();
            if load > 1.0 {
                return Err(SynthError::NotPsd("factor loading matrix"));
            }
            idio.push((1.0 - load).sqrt());
        }
        let common = fm * matrix.transpose();
        return Ok(Mat::from_fn(len, n, |t, i| common[(t, i)] + idio[i] * z[(t, i)]));
    }
    match target_correlation(spec)? {
        None => Ok(z),
        Some(k) => {
            let chol = k.cholesky().ok_or(SynthError::NotPsd("sign correlation"))?;
            Ok(z * chol.l().transpose())
        }
    }
}

fn unit_variance(m: Mat, hard: bool) -> Mat {
    let m = if hard { m.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }) } else { m };
    match normalize_global(&m) {
        Ok((out, _)) => out,
        Err(_) => m,
    }
}

fn signs_with_len(spec: &MarketSpec, len: usize) -> Result<Mat, SynthError> {
    Ok(unit_variance(raw_signs(spec, len)?, spec.hard_signs))
}

/// `T × N` unit-variance sign imbalances.
pub fn gen_signs(spec: &MarketSpec) -> Result<Mat, SynthError> {
    signs_with_len(spec, spec.t)
}

/// `x_t = Σ_τ g_τ ε_{t−τ} + w_t`, `w_t ∼ N(0, σ_W)` i.i.d. History before
/// the first row counts as zero.
pub fn gen_prices(signs: &Mat, kernel: &Kernel, sigma_w: &Mat, seed: u64) -> Result<Mat, SynthError> {
    let (t, n) = signs.shape();
    if kernel.n_assets() != n || sigma_w.shape() != (n, n) {
        return Err(SynthError::DimensionMismatch(format!(
            "signs have {n} columns, kernel {} assets, σ_W {:?}",
            kernel.n_assets(),
            sigma_w.shape()
        )));
    }
    let root = psd_sqrt(sigma_w).ok_or(SynthError::NotPsd("noise covariance"))?;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, NOISE_STREAM + i as u64);
            (0..t).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let z = Mat::from_fn(t, n, |r, i| cols[i][r]);
    Ok(impact_series(kernel, signs, &[0..t]) + z * root.transpose())
}

/// Simulated sample after the warm-up.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub signs: Mat,
    pub returns: Mat,
}

pub fn simulate(spec: &MarketSpec) -> Result<Simulation, SynthError> {
    let w = warmup(spec);
    let total = spec.t + w;
    let signs = signs_with_len(spec, total)?;
    let returns = gen_prices(&signs, &spec.kernel, &spec.sigma_w, spec.seed)?;
    Ok(Simulation {
        signs: signs.rows(w, spec.t).into_owned(),
        returns: returns.rows(w, spec.t).into_owned(),
    })
}

impl Simulation {
    /// Globally standardized single-session panel.
    pub fn to_panel(&self, spec: &MarketSpec) -> Panel {
        let assets = spec.asset_ids();
        let sectors: BTreeMap<String, String> = assets
            .iter()
            .cloned()
            .zip(spec.sector_labels())
            .collect();
        let (returns, norm_return) = normalize_global(&self.returns).expect("non-degenerate returns");
        let (signs, norm_sign) = normalize_global(&self.signs).expect("non-degenerate signs");
        let mut p = Panel::from_matrices(assets, sectors, returns, signs);
        p.norm_return = norm_return;
        p.norm_sign = norm_sign;
        p
    }
}

/// Ground truth expressed in the units of a standardized panel:
/// `G'^{ij} = G^{ij} s_ε^j / s_x^i` and `σ_W'^{ij} = σ_W^{ij} / (s_x^i s_x^j)`.
pub fn truth_in_panel_units(
    kernel: &Kernel,
    sigma_w: &Mat,
    norm_return: &[f64],
    norm_sign: &[f64],
) -> (Kernel, Mat) {
    let n = kernel.n_assets();
    let scale = |g: &Mat| Mat::from_fn(n, n, |i, j| g[(i, j)] * norm_sign[j] / norm_return[i]);
    let k = match kernel.factor_parts() {
        Some((amp, decay, support)) => Kernel::Factorized {
            amplitude: scale(&amp),
            decay,
            support,
        },
        None => Kernel::Full {
            lags: kernel.differential().iter().map(scale).collect(),
        },
    };
    let sw = Mat::from_fn(n, n, |i, j| sigma_w[(i, j)] / (norm_return[i] * norm_return[j]));
    (k, sw)
}

pub const PANEL_FILE: &str = "panel.csv";
pub const SECTOR_FILE: &str = "sectors.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const PANEL_CONFIG_FILE: &str = "panel.cfg";
/// Trade counts written per unit of simulated imbalance.
pub const COUNT_SCALE: f64 = 1e6;

/// Writes the simulated market in the panel CSV schema, with the sector
/// map, the ground truth and a panel configuration reading it back as one
/// contiguous session. Returns the written paths.
pub fn write_market(dir: &Path, spec: &MarketSpec, sim: &Simulation) -> Result<Vec<PathBuf>, SynthError> {
    let assets = spec.asset_ids();
    let bins = sim.returns.nrows() + 1;
    let times = synthetic_times(bins, chrono::Duration::minutes(5));
    let panel_path = dir.join(PANEL_FILE);
    let mut w = csv::Writer::from_path(&panel_path).map_err(std::io::Error::from)?;
    w.write_record(["time", "asset", "price", "n_buy", "n_sell"])
        .map_err(std::io::Error::from)?;
    let mut log_p: Vec<f64> = vec![100.0_f64.ln(); spec.n];
    for (b, ts) in times.iter().enumerate() {
        let stamp = ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        for (i, id) in assets.iter().enumerate() {
            let imbalance = if b == 0 {
                0i64
            } else {
                log_p[i] += sim.returns[(b - 1, i)];
                (sim.signs[(b - 1, i)] * COUNT_SCALE).round() as i64
            };
            let (buy, sell) = if imbalance >= 0 { (imbalance, 0) } else { (0, -imbalance) };
            w.write_record([
                stamp.clone(),
                id.clone(),
                io::fmt_f64(log_p[i].exp()),
                buy.to_string(),
                sell.to_string(),
            ])
            .map_err(std::io::Error::from)?;
        }
    }
    w.flush()?;

    let sector_path = dir.join(SECTOR_FILE);
    io::write_table_csv(
        &sector_path,
        &["asset", "sector"],
        assets
            .iter()
            .zip(spec.sector_labels())
            .map(|(a, s)| vec![a.clone(), s]),
    )?;

    let truth_path = dir.join(TRUTH_FILE);
    io::write_json(&truth_path, spec)?;

    let cfg_path = dir.join(PANEL_CONFIG_FILE);
    let mut s = Settings::new();
    PanelConfig {
        open_skip: chrono::Duration::zero(),
        close_skip: chrono::Duration::zero(),
        session_break: SessionBreak::Gap,
        ..PanelConfig::default()
    }
    .to_settings(&mut s);
    std::fs::write(&cfg_path, s.canonical())?;
    Ok(vec![panel_path, sector_path, truth_path, cfg_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lagstats::{compute, LagConfig};
    use crate::panel::{load_panel, Schema};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn small(n: usize, t: usize, kernel: Kernel, cross: SignCross) -> MarketSpec {
        MarketSpec {
            n,
            t,
            kernel,
            sign_gamma: vec![0.5; n],
            sign_cross: cross,
            sigma_w: Mat::identity(n, n),
            seed: 7,
            sectors: None,
            hard_signs: false,
        }
    }

    /// Slope of log ĉ against log τ on `τ ∈ [lo, hi]`.
    fn decay_slope(c: &[f64], lo: usize, hi: usize) -> f64 {
        let pts: Vec<(f64, f64)> = (lo..=hi).map(|t| ((t as f64).ln(), c[t].ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn fractional_noise_autocorrelation() {
        // Average over independent paths against the exact autocovariance.
        let h = 0.75;
        let len = 4096;
        let paths = 64;
        let mut acc = vec![0.0; 11];
        for p in 0..paths {
            let mut rng = stream(99, p);
            let x = fractional_noise(len, h, &mut rng);
            for (k, a) in acc.iter_mut().enumerate() {
                *a += (k..len).map(|t| x[t] * x[t - k]).sum::<f64>() / (len - k) as f64;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            let kf = k as f64;
            let exact = 0.5 * ((kf + 1.0).powf(1.5) - 2.0 * kf.powf(1.5) + (kf - 1.0).abs().powf(1.5));
            let est = a / paths as f64;
            assert!((est - exact).abs() < 0.05, "lag {k}: {est} vs {exact}");
        }
    }

    #[test]
    fn long_memory_exponent_is_recovered() {
        let spec = small(1, 100_000, Kernel::zero(1, 1), SignCross::Independent);
        let s = gen_signs(&spec).unwrap();
        let p = Panel::from_matrices(vec!["A".into()], BTreeMap::new(), s.clone(), s);
        let stats = compute(
            &p,
            &LagConfig {
                tau_max: 1,
                t_lag: 1,
                response_min: 0,
                c_horizon: 100,
                guard: 10,
                se_blocks: 20,
            },
        )
        .unwrap();
        let c: Vec<f64> = stats.c_lagged.iter().map(|m| m[(0, 0)]).collect();
        let slope = decay_slope(&c, 5, 100);
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn cross_correlation_targets() {
        let spec = small(5, 20_000, Kernel::zero(5, 1), SignCross::Independent);
        let s = gen_signs(&spec).unwrap();
        let c0 = s.transpose() * &s / 20_000.0;
        // Bartlett variance of the cross-correlation of two independent
        // series with the fGn autocorrelation ρ_k.
        let t = 20_000usize;
        let rho = |k: usize| {
            let k = k as f64;
            0.5 * ((k + 1.0).powf(1.5) - 2.0 * k.powf(1.5) + (k - 1.0).abs().powf(1.5))
        };
        let var: f64 = 1.0
            + 2.0 * (1..t).map(|k| (1.0 - k as f64 / t as f64) * rho(k).powi(2)).sum::<f64>();
        let se = (var / t as f64).sqrt();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(c0[(i, j)].abs() < 3.0 * se, "{} {}", c0[(i, j)], se);
                }
            }
        }
        let spec = small(10, 20_000, Kernel::zero(10, 1), SignCross::Homogeneous { rho: 0.2 });
        let s = gen_signs(&spec).unwrap();
        let c0 = s.transpose() * &s / 20_000.0;
        let off = crate::linalg::off_mean(&c0).unwrap();
        assert!((off - 0.2).abs() < 0.02, "{off}");
        assert!(matches!(
            gen_signs(&small(3, 10, Kernel::zero(3, 1), SignCross::Homogeneous { rho: -0.9 })),
            Err(SynthError::NotPsd(_))
        ));
        let mut bad = small(1, 10, Kernel::zero(1, 1), SignCross::Independent);
        bad.sign_gamma = vec![1.2];
        assert!(matches!(gen_signs(&bad), Err(SynthError::InvalidGamma(_))));
    }

    #[test]
    fn pure_noise_returns_are_standard_normal() {
        let t = 10_000;
        let signs = Mat::zeros(t, 1);
        let x = gen_prices(&signs, &Kernel::zero(1, 1), &Mat::identity(1, 1), 5).unwrap();
        let mut v: Vec<f64> = x.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let d = v
            .iter()
            .enumerate()
            .map(|(k, &z)| {
                let f = norm.cdf(z);
                (f - k as f64 / t as f64).abs().max(((k + 1) as f64 / t as f64 - f).abs())
            })
            .fold(0.0_f64, f64::max);
        // Kolmogorov–Smirnov critical value at p = 0.01.
        assert!(d < 1.628 / (t as f64).sqrt(), "D = {d}");
    }

    #[test]
    fn delta_kernel_copies_signs() {
        let mut lags = vec![Mat::zeros(2, 2); 3];
        lags[0] = Mat::identity(2, 2);
        let k = Kernel::Full { lags };
        let signs = Mat::from_fn(50, 2, |t, j| ((t * 7 + j * 3) % 5) as f64 - 2.0);
        let x = gen_prices(&signs, &k, &Mat::zeros(2, 2), 1).unwrap();
        for t in 1..50 {
            for j in 0..2 {
                assert_eq!(x[(t, j)], signs[(t - 1, j)]);
            }
        }
    }

    #[test]
    fn identical_seed_is_bit_identical() {
        let spec = MarketSpec::large_cap(4, 2000, 3);
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a.signs, b.signs);
        assert_eq!(a.returns, b.returns);
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(simulate(&other).unwrap().returns, a.returns);
    }

    #[test]
    fn hard_signs_are_binary_before_scaling() {
        let mut spec = small(2, 1000, Kernel::zero(2, 1), SignCross::Homogeneous { rho: 0.3 });
        spec.hard_signs = true;
        let s = gen_signs(&spec).unwrap();
        for j in 0..2 {
            let mut vals: Vec<f64> = s.column(j).iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            assert_eq!(vals.len(), 2);
        }
    }

    #[test]
    fn csv_round_trip_matches_in_memory_panel() {
        let spec = MarketSpec::large_cap(3, 500, 11);
        let sim = simulate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_market(dir.path(), &spec, &sim).unwrap();
        let cfg = PanelConfig::from_settings(
            &Settings::from_file(&dir.path().join(PANEL_CONFIG_FILE)).unwrap(),
        )
        .unwrap();
        let p = load_panel(
            &dir.path().join(PANEL_FILE),
            &dir.path().join(SECTOR_FILE),
            &Schema::default(),
            &cfg,
        )
        .unwrap();
        let q = sim.to_panel(&spec);
        assert_eq!(p.assets, q.assets);
        assert_eq!(p.n_bins(), 500);
        assert!((&p.returns - &q.returns).abs().max() < 1e-9);
        assert!((&p.signs - &q.signs).abs().max() < 1e-5);
        let truth: MarketSpec = io::read_json(&dir.path().join(TRUTH_FILE)).unwrap();
        assert_eq!(truth, spec);
    }
}
