//! Finite-size scaling of the factorized amplitude over random asset
//! subsets.
//!
//! The factorized estimate only involves entries of the full-universe shape
//! moments, so a subset fit is `A_S B_S⁻¹` on the restricted moments.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{shape_moments, DecayLaw, KernelError, ShapeMoments};
use crate::lagstats::LagStats;
use crate::linalg::{checked_inverse, Mat};
use crate::panel::Panel;

#[derive(Debug, Error, PartialEq)]
pub enum ScalingError {
    #[error("subset size {0} is below 2")]
    SubsetTooSmall(usize),
    #[error("subset size {size} exceeds the {n} available assets")]
    SubsetTooLarge { size: usize, n: usize },
    #[error("at least 2 samples per size are needed, got {0}")]
    TooFewSamples(usize),
    #[error("no subset contains enough same-sector pairs")]
    NoSectorPairs,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Smallest number of same-sector ordered pairs for a sample to count.
pub const MIN_SECTOR_PAIRS: usize = 5;

/// Starting values of the scale parameter in the nonlinear fits.
pub const SCALE_STARTS: [f64; 5] = [1.0, 3.0, 10.0, 30.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingOptions {
    pub sizes: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self {
            sizes: vec![5, 10, 20, 40, 80, 160],
            samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub mean_diag: f64,
    pub se_diag: f64,
    pub mean_off: f64,
    pub se_off: f64,
    pub mean_off_same_sector: Option<f64>,
    pub se_off_same_sector: Option<f64>,
    /// Samples that had enough same-sector pairs.
    pub sector_samples: usize,
}

/// `k₁ N^{−ν₁}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub k1: f64,
    pub nu1: f64,
    pub r2: f64,
}

/// `k₂ (1 + N/N₂)^{−1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffFit {
    pub k2: f64,
    pub n2: f64,
    pub r2: f64,
}

/// `k₃ (1 + N/N₃)^{−ν₃}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorFit {
    pub k3: f64,
    pub n3: f64,
    pub nu3: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFits {
    pub diag: Option<PowerFit>,
    pub off: Option<OffFit>,
    pub same_sector: Option<SectorFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub points: Vec<ScalingPoint>,
    pub fits: ScalingFits,
}

struct Sample {
    diag: f64,
    off: f64,
    same: Option<f64>,
}

fn subset_estimate(m: &ShapeMoments, idx: &[usize], sectors: &[String]) -> Result<Sample, KernelError> {
    let n = idx.len();
    let a = Mat::from_fn(n, n, |r, c| m.a[(idx[r], idx[c])]);
    let b = Mat::from_fn(n, n, |r, c| m.b[(idx[r], idx[c])]);
    let g = a * checked_inverse(&b).ok_or(KernelError::SingularB)?;
    let mut diag = 0.0;
    let (mut off, mut same, mut same_count) = (0.0, 0.0, 0usize);
    for r in 0..n {
        diag += g[(r, r)];
        for c in 0..n {
            if r == c {
                continue;
            }
            off += g[(r, c)];
            if sectors[idx[r]] == sectors[idx[c]] {
                same += g[(r, c)];
                same_count += 1;
            }
        }
    }
    Ok(Sample {
        diag: diag / n as f64,
        off: off / (n * n - n) as f64,
        same: (same_count >= MIN_SECTOR_PAIRS).then(|| same / same_count as f64),
    })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Runs the study on precomputed full-universe shape moments.
pub fn bootstrap_from_moments(
    moments: &ShapeMoments,
    sectors: &[String],
    opts: &ScalingOptions,
) -> Result<ScalingCurve, ScalingError> {
    let n_all = moments.a.nrows();
    if opts.samples < 2 {
        return Err(ScalingError::TooFewSamples(opts.samples));
    }
    for &size in &opts.sizes {
        if size < 2 {
            return Err(ScalingError::SubsetTooSmall(size));
        }
        if size > n_all {
            return Err(ScalingError::SubsetTooLarge { size, n: n_all });
        }
    }
    let mut points = Vec::with_capacity(opts.sizes.len());
    for (si, &size) in opts.sizes.iter().enumerate() {
        let samples: Vec<Sample> = (0..opts.samples)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(((si as u64) << 32) | k as u64);
                let idx = index::sample(&mut rng, n_all, size).into_vec();
                subset_estimate(moments, &idx, sectors)
            })
            .collect::<Result<_, _>>()?;
        let diag: Vec<f64> = samples.iter().map(|s| s.diag).collect();
        let off: Vec<f64> = samples.iter().map(|s| s.off).collect();
        let same: Vec<f64> = samples.iter().filter_map(|s| s.same).collect();
        let (mean_diag, se_diag) = mean_se(&diag);
        let (mean_off, se_off) = mean_se(&off);
        let same_stats = (!same.is_empty()).then(|| mean_se(&same));
        points.push(ScalingPoint {
            n: size,
            mean_diag,
            se_diag,
            mean_off,
            se_off,
            mean_off_same_sector: same_stats.map(|s| s.0),
            se_off_same_sector: same_stats.map(|s| s.1),
            sector_samples: same.len(),
        });
    }
    if points.iter().all(|p| p.sector_samples == 0) {
        return Err(ScalingError::NoSectorPairs);
    }
    let fits = fit_laws(&points);
    Ok(ScalingCurve { points, fits })
}

/// Fits the laws with the decay fixed to the full-universe one.
pub fn bootstrap_scaling(
    panel: &Panel,
    stats: &LagStats,
    decay: DecayLaw,
    support: usize,
    opts: &ScalingOptions,
) -> Result<ScalingCurve, ScalingError> {
    let m = shape_moments(stats, decay, support)?;
    bootstrap_from_moments(&m, &panel.sector_labels(), opts)
}

/// Ordinary least squares `y ≈ a + b x`; returns `(a, b, rss)`.
fn line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let rss = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    (a, b, rss)
}

fn r_squared(y: &[f64], fitted: &[f64]) -> f64 {
    let k = y.len() as f64;
    let my = y.iter().sum::<f64>() / k;
    let tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let res: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b).powi(2)).sum();
    if tot > 0.0 {
        1.0 - res / tot
    } else if res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Minimizes `f` over `ln s` by golden section around each start.
fn multistart(f: impl Fn(f64) -> f64) -> f64 {
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut best = (f64::INFINITY, 0.0);
    for s in SCALE_STARTS {
        let (mut a, mut b) = (s.ln() - 10.0_f64.ln(), s.ln() + 10.0_f64.ln());
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        while b - a > 1e-10 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d);
            }
        }
        let x = 0.5 * (a + b);
        let v = f(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    best.1
}

pub fn fit_power(n: &[f64], y: &[f64]) -> Option<PowerFit> {
    if y.len() < 2 || y.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (a, b, _) = line(&lx, &ly);
    let (k1, nu1) = (a.exp(), -b);
    let fitted: Vec<f64> = n.iter().map(|v| k1 * v.powf(-nu1)).collect();
    Some(PowerFit { k1, nu1, r2: r_squared(y, &fitted) })
}

pub fn fit_off(n: &[f64], y: &[f64]) -> Option<OffFit> {
    if y.len() < 2 || y.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    // Profile: ln k₂ = mean(ln y + ln(1 + N/N₂)).
    let profile = |ln_n2: f64| -> (f64, f64) {
        let n2 = ln_n2.exp();
        let u: Vec<f64> = n.iter().map(|v| (1.0 + v / n2).ln()).collect();
        let ln_k = ly.iter().zip(&u).map(|(a, b)| a + b).sum::<f64>() / ly.len() as f64;
        let rss = ly.iter().zip(&u).map(|(a, b)| (a + b - ln_k).powi(2)).sum();
        (ln_k, rss)
    };
    let ln_n2 = multistart(|x| profile(x).1);
    let (ln_k, _) = profile(ln_n2);
    let (k2, n2) = (ln_k.exp(), ln_n2.exp());
    let fitted: Vec<f64> = n.iter().map(|v| k2 / (1.0 + v / n2)).collect();
    Some(OffFit { k2, n2, r2: r_squared(y, &fitted) })
}

pub fn fit_sector(n: &[f64], y: &[f64]) -> Option<SectorFit> {
    if y.len() < 3 || y.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let profile = |ln_n3: f64| -> (f64, f64, f64) {
        let n3 = ln_n3.exp();
        let u: Vec<f64> = n.iter().map(|v| (1.0 + v / n3).ln()).collect();
        line(&u, &ly)
    };
    let ln_n3 = multistart(|x| profile(x).2);
    let (a, b, _) = profile(ln_n3);
    let (k3, n3, nu3) = (a.exp(), ln_n3.exp(), -b);
    let fitted: Vec<f64> = n.iter().map(|v| k3 * (1.0 + v / n3).powf(-nu3)).collect();
    Some(SectorFit { k3, n3, nu3, r2: r_squared(y, &fitted) })
}

pub fn fit_laws(points: &[ScalingPoint]) -> ScalingFits {
    let n: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let diag: Vec<f64> = points.iter().map(|p| p.mean_diag).collect();
    let off: Vec<f64> = points.iter().map(|p| p.mean_off).collect();
    let (sn, same): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter_map(|p| p.mean_off_same_sector.map(|v| (p.n as f64, v)))
        .unzip();
    ScalingFits {
        diag: fit_power(&n, &diag),
        off: fit_off(&n, &off),
        same_sector: fit_sector(&sn, &same),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::homogeneous_matrix;

    fn labels(n: usize, per: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{}", i / per)).collect()
    }

    /// Population moments `A = G B` for homogeneous `G` and `B`.
    fn population(n: usize, g_off: f64, rho: f64) -> ShapeMoments {
        let b = homogeneous_matrix(n, 1.0, rho);
        let g = homogeneous_matrix(n, 0.29, g_off);
        ShapeMoments { a: &g * &b, b }
    }

    #[test]
    fn no_hidden_flow_no_bias() {
        let m = population(60, 0.0046, 0.0);
        let opts = ScalingOptions { sizes: vec![5, 10, 20, 40], samples: 50, seed: 1 };
        let c = bootstrap_from_moments(&m, &labels(60, 10), &opts).unwrap();
        for p in &c.points {
            assert!((p.mean_off - 0.0046).abs() < 1e-12);
            assert!((p.mean_diag - 0.29).abs() < 1e-12);
        }
        assert!(c.fits.diag.unwrap().nu1.abs() < 1e-9);
    }

    #[test]
    fn hidden_assets_inflate_small_subsets() {
        let (n, g_off, rho) = (60, 0.0046, 0.15);
        let m = population(n, g_off, rho);
        let opts = ScalingOptions { sizes: vec![5, 10, 20, 40], samples: 20, seed: 2 };
        let c = bootstrap_from_moments(&m, &labels(n, 10), &opts).unwrap();
        // Closed form: the hidden N − n assets load on the visible ones through
        // the sign correlation.
        for p in &c.points {
            let k = p.n as f64;
            let hidden = (n - p.n) as f64;
            let b_inv_sum = 1.0 / (1.0 + (k - 1.0) * rho);
            let expect_off = g_off + hidden * g_off * rho * b_inv_sum;
            assert!((p.mean_off - expect_off).abs() < 1e-10, "{} vs {expect_off}", p.mean_off);
        }
        assert!(c.points.windows(2).all(|w| w[1].mean_off < w[0].mean_off));
        let f = c.fits.off.unwrap();
        assert!(f.r2 > 0.9 && f.n2 > 0.0);
    }

    #[test]
    fn exact_laws_are_recovered() {
        let n = [5.0_f64, 10.0, 20.0, 40.0, 80.0, 160.0];
        let y: Vec<f64> = n.iter().map(|v| 0.36 * v.powf(-0.04)).collect();
        let f = fit_power(&n, &y).unwrap();
        assert!((f.k1 - 0.36).abs() < 1e-10 && (f.nu1 - 0.04).abs() < 1e-10);
        let y: Vec<f64> = n.iter().map(|v| 0.06 / (1.0 + v / 24.0)).collect();
        let f = fit_off(&n, &y).unwrap();
        assert!((f.k2 - 0.06).abs() < 1e-6 && (f.n2 / 24.0 - 1.0).abs() < 1e-6);
        assert!((f.k2 * f.n2 - 1.44).abs() < 1e-4);
        let y: Vec<f64> = n.iter().map(|v| 0.078 * (1.0 + v / 10.4).powf(-0.54)).collect();
        let f = fit_sector(&n, &y).unwrap();
        assert!((f.k3 / 0.078 - 1.0).abs() < 1e-5 && (f.n3 / 10.4 - 1.0).abs() < 1e-5);
        assert!((f.nu3 - 0.54).abs() < 1e-5 && f.r2 > 0.999_999);
    }

    fn ragged(n: usize) -> ShapeMoments {
        let b = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.1 + 0.05 * ((i * j) % 3) as f64 });
        let g = Mat::from_fn(n, n, |i, j| if i == j { 0.3 + 0.01 * (i % 7) as f64 } else { 0.004 * (1 + (i + 2 * j) % 5) as f64 });
        ShapeMoments { a: &g * &b, b }
    }

    #[test]
    fn reproducible_and_se_scales() {
        let m = ragged(40);
        let s = labels(40, 8);
        let small = ScalingOptions { sizes: vec![6, 12], samples: 200, seed: 3 };
        let a = bootstrap_from_moments(&m, &s, &small).unwrap();
        assert_eq!(a, bootstrap_from_moments(&m, &s, &small).unwrap());
        let big = ScalingOptions { samples: 800, ..small };
        let b = bootstrap_from_moments(&m, &s, &big).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!(p.se_off > 0.0 && p.se_diag > 0.0);
            let ratio = p.se_off / q.se_off;
            assert!((ratio / 2.0 - 1.0).abs() < 0.3, "ratio {ratio}");
        }
    }

    #[test]
    fn errors() {
        let m = ragged(10);
        let s = labels(10, 5);
        let run = |sizes: Vec<usize>, samples| bootstrap_from_moments(&m, &s, &ScalingOptions { sizes, samples, seed: 0 });
        assert_eq!(run(vec![1, 5], 10), Err(ScalingError::SubsetTooSmall(1)));
        assert_eq!(run(vec![11], 10), Err(ScalingError::SubsetTooLarge { size: 11, n: 10 }));
        assert_eq!(run(vec![5], 1), Err(ScalingError::TooFewSamples(1)));
        let singletons = labels(10, 1);
        assert_eq!(
            bootstrap_from_moments(&m, &singletons, &ScalingOptions { sizes: vec![4], samples: 5, seed: 0 }),
            Err(ScalingError::NoSectorPairs)
        );
    }
}
