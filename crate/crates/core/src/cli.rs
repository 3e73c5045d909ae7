//! Command-line pipeline over an output directory of CSV and JSON artifacts.
//!
//! Settings are layered: built-in defaults, then `--config`, then
//! `CROSSIMPACT_*` environment variables, then flags. Every subcommand
//! writes `manifest_<command>.json` listing the effective settings, their
//! digest, the seed and the digests of inputs and artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Settings};
use crate::decomp::{channel_splits, impact_covariance, model_covariance, model_response, DecompOptions};
use crate::io::{self, fmt_f64, fmt_opt};
use crate::kernels::{
    estimate, evaluate, integrated_profiles, homogeneous_matrix, DecayLaw, FitOptions, FitReport, Kernel,
    ModelKind, Sample,
};
use crate::lagstats::{self, lag_profiles, LagConfig, LagStats};
use crate::linalg::{diag_mean, off_mean, symmetrize, Mat};
use crate::panel::{load_panel, Normalization, Panel, PanelConfig, Schema};
use crate::scaling::{bootstrap_scaling, ScalingOptions};
use crate::spectra::{eig_sym, marchenko_pastur, overlap_and_common_modes, svd, BaselineOptions};
use crate::synth::{self, MarketSpec, SignCross};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {0} (run the producing subcommand first)")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::MissingArtifact(_) | CliError::Data(_) => 2,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    std::io::Error,
    crate::panel::PanelError,
    crate::lagstats::LagError,
    crate::kernels::KernelError,
    crate::decomp::DecompError,
    crate::spectra::SpectraError,
    crate::scaling::ScalingError,
    crate::synth::SynthError,
    rayon::ThreadPoolBuildError
);

pub const STATS_FILE: &str = "stats.json";
pub const FIT_FILE: &str = "fit.json";

#[derive(Debug, Parser)]
#[command(name = "crossimpact", version, about = "Cross-impact propagator estimation")]
pub struct Cli {
    /// `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic market with known kernel.
    Simulate(SimulateArgs),
    /// Lagged covariance, sign correlation and response statistics.
    Stats(StatsArgs),
    /// Fit one propagator model.
    Fit(FitArgs),
    /// Model response, covariance decomposition and impact channels.
    Decompose(DecomposeArgs),
    /// Spectra, Marčenko–Pastur band and common modes.
    Spectra(SpectraArgs),
    /// Finite-size scaling over random asset subsets.
    Scale(ScaleArgs),
    /// In- and out-of-sample scores of all models.
    Score(ScoreArgs),
    /// Collect figure-ready tables.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Stats(_) => "stats",
            Command::Fit(_) => "fit",
            Command::Decompose(_) => "decompose",
            Command::Spectra(_) => "spectra",
            Command::Scale(_) => "scale",
            Command::Score(_) => "score",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n_assets: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Binary ±1 signs.
    #[arg(long, conflicts_with = "soft_signs")]
    pub hard_signs: bool,
    /// Continuous Gaussian imbalances.
    #[arg(long)]
    pub soft_signs: bool,
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub sectors: Option<PathBuf>,
    /// Per-session standardization.
    #[arg(long, conflicts_with = "global_normalization")]
    pub local_normalization: bool,
    #[arg(long)]
    pub global_normalization: bool,
    /// `YYYY-MM-DD`, `half` or `none`.
    #[arg(long)]
    pub split_date: Option<String>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// Kernel support and sign-correlation lags.
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub tau_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Extend sign correlations by a power-law tail.
    #[arg(long, conflicts_with = "no_extrapolate_tail")]
    pub extrapolate_tail: bool,
    #[arg(long)]
    pub no_extrapolate_tail: bool,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    /// Leading modes in the common-mode curves.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Histogram bins of the return spectrum.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Comma-separated subset sizes.
    #[arg(long)]
    pub sizes: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
}

fn set_toggle(s: &mut Settings, key: &str, on: bool, off: bool) {
    if on {
        s.set(key, true);
    } else if off {
        s.set(key, false);
    }
}

fn set_opt<T: ToString>(s: &mut Settings, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        s.set(key, v.to_string());
    }
}

impl PanelArgs {
    fn apply(&self, s: &mut Settings) {
        set_opt(s, "panel", &self.panel.as_ref().map(|p| p.display().to_string()));
        set_opt(s, "sectors", &self.sectors.as_ref().map(|p| p.display().to_string()));
        if self.local_normalization {
            s.set("normalization", "local");
        } else if self.global_normalization {
            s.set("normalization", "global");
        }
        set_opt(s, "split_date", &self.split_date);
    }
}

impl Command {
    fn apply(&self, s: &mut Settings) {
        match self {
            Command::Simulate(a) => {
                set_opt(s, "n_assets", &a.n_assets);
                set_opt(s, "bins", &a.bins);
                set_toggle(s, "hard_signs", a.hard_signs, a.soft_signs);
            }
            Command::Stats(a) => {
                a.panel.apply(s);
                set_opt(s, "lags", &a.lags);
                set_opt(s, "tau_max", &a.tau_max);
            }
            Command::Fit(a) => {
                a.panel.apply(s);
                set_opt(s, "model", &a.model);
                set_opt(s, "lags", &a.lags);
                set_opt(s, "ridge", &a.ridge);
            }
            Command::Score(a) => {
                a.panel.apply(s);
                set_opt(s, "lags", &a.lags);
                set_opt(s, "ridge", &a.ridge);
            }
            Command::Decompose(a) => {
                set_toggle(s, "extrapolate_tail", a.extrapolate_tail, a.no_extrapolate_tail);
                set_opt(s, "decomp_horizon", &a.horizon);
            }
            Command::Spectra(a) => {
                set_opt(s, "modes", &a.modes);
                set_opt(s, "histogram_bins", &a.bins);
                set_opt(s, "baseline_draws", &a.draws);
            }
            Command::Scale(a) => {
                set_opt(s, "sizes", &a.sizes);
                set_opt(s, "samples", &a.samples);
            }
            Command::Report => {}
        }
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T, E, K, V>(args: I, env: E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    E: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Effective run settings.
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub settings: Settings,
}

pub fn resolve<E, K, V>(cli: &Cli, env: E) -> Result<RunConfig, CliError>
where
    E: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut s = match &cli.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::new(),
    };
    s.apply_env(env);
    cli.command.apply(&mut s);
    set_opt(&mut s, "seed", &cli.seed);
    set_opt(&mut s, "threads", &cli.threads);
    let out = match (&cli.out, s.remove("out")) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => PathBuf::from("."),
    };
    let seed = s.parsed_or("seed", 0u64)?;
    let threads = s.parsed::<usize>("threads")?;
    s.remove("threads");
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", out.display())))?;
    Ok(RunConfig {
        out,
        seed,
        threads,
        settings: s,
    })
}

fn execute<E, K, V>(cli: Cli, env: E) -> Result<(), CliError>
where
    E: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let cfg = resolve(&cli, env)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build()?;
    pool.install(|| dispatch(&cli.command, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_digest: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
}

struct Ctx {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    s: Settings,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An upstream artifact in the output directory.
    fn require(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(CliError::MissingArtifact(p));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn wrote(&mut self, p: PathBuf) {
        println!("wrote {}", p.display());
        self.artifacts.push(p);
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), CliError> {
        let p = self.path(name);
        io::write_json(&p, v)?;
        self.wrote(p);
        Ok(())
    }

    fn table<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let p = self.path(name);
        io::write_table_csv(&p, header, rows)?;
        self.wrote(p);
        Ok(())
    }

    fn matrix(&mut self, name: &str, labels: &[String], m: &Mat) -> Result<(), CliError> {
        let p = self.path(name);
        io::write_matrix_csv(&p, labels, m)?;
        self.wrote(p);
        Ok(())
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn finish(self) -> Result<(), CliError> {
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>, CliError> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: self.rel(p),
                        sha256: io::sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: self.s.digest(),
            config: self.s.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            seed: self.seed,
            inputs: digest(&self.inputs)?,
            artifacts: digest(&self.artifacts)?,
        };
        let p = self.path(&format!("manifest_{}.json", self.command));
        io::write_json(&p, &manifest)?;
        println!("wrote {}", p.display());
        Ok(())
    }
}

fn dispatch(cmd: &Command, cfg: RunConfig) -> Result<(), CliError> {
    let mut ctx = Ctx {
        command: cmd.name(),
        out: cfg.out,
        seed: cfg.seed,
        s: cfg.settings,
        inputs: Vec::new(),
        artifacts: Vec::new(),
    };
    match cmd {
        Command::Simulate(_) => simulate(&mut ctx)?,
        Command::Stats(_) => stats(&mut ctx)?,
        Command::Fit(_) => fit(&mut ctx)?,
        Command::Decompose(_) => decompose(&mut ctx)?,
        Command::Spectra(_) => spectra(&mut ctx)?,
        Command::Scale(_) => scale(&mut ctx)?,
        Command::Score(_) => score(&mut ctx)?,
        Command::Report => report(&mut ctx)?,
    }
    ctx.finish()
}

/// Market specification from settings, starting from the large-cap one.
pub fn market_spec(s: &Settings, seed: u64) -> Result<MarketSpec, ConfigError> {
    let n = s.parsed_or("n_assets", 20usize)?;
    let t = s.parsed_or("bins", 50_000usize)?;
    let mut spec = MarketSpec::large_cap(n, t, seed);
    let d = spec.kernel.clone();
    let Kernel::Homogeneous { g_diag, g_off, decay, support, .. } = d else {
        unreachable!()
    };
    spec.kernel = Kernel::Homogeneous {
        n,
        g_diag: s.parsed_or("g_diag", g_diag)?,
        g_off: s.parsed_or("g_off", g_off)?,
        decay: DecayLaw {
            beta: s.parsed_or("beta", decay.beta)?,
            tau0: s.parsed_or("tau0", decay.tau0)?,
        },
        support: s.parsed_or("support", support)?,
    };
    let gamma = s.parsed_or("gamma", spec.sign_gamma[0])?;
    spec.sign_gamma = vec![gamma; n];
    if let Some(rho) = s.parsed::<f64>("rho")? {
        spec.sign_cross = SignCross::Homogeneous { rho };
    }
    let (sd, so) = (spec.sigma_w[(0, 0)], if n > 1 { spec.sigma_w[(0, 1)] } else { 0.0 });
    spec.sigma_w = homogeneous_matrix(
        n,
        s.parsed_or("sigma_w_diag", sd)?,
        s.parsed_or("sigma_w_off", so)?,
    );
    let k = s.parsed_or("n_sectors", 1usize)?;
    if k > 1 {
        spec.sectors = Some((0..n).map(|i| format!("S{}", i % k)).collect());
    }
    spec.hard_signs = s.flag("hard_signs")?.unwrap_or(false);
    Ok(spec)
}

fn simulate(ctx: &mut Ctx) -> Result<(), CliError> {
    let spec = market_spec(&ctx.s, ctx.seed)?;
    let sim = synth::simulate(&spec)?;
    for p in synth::write_market(&ctx.out, &spec, &sim)? {
        ctx.wrote(p);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Split {
    None,
    Half,
    Date(NaiveDate),
}

impl Split {
    fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        match s.get("split_date") {
            None | Some("none") => Ok(Split::None),
            Some("half") => Ok(Split::Half),
            Some(v) => NaiveDate::parse_from_str(v, "%Y-%m-%d")
                .map(Split::Date)
                .map_err(|_| ConfigError::BadValue {
                    key: "split_date".into(),
                    value: v.into(),
                }),
        }
    }

    fn label(&self) -> String {
        match self {
            Split::None => "none".into(),
            Split::Half => "half".into(),
            Split::Date(d) => d.to_string(),
        }
    }
}

struct Inputs {
    train: Panel,
    test: Option<Panel>,
    split: Split,
    panel_sha256: String,
}

/// Loads the panel named in the settings (default: the simulated one in the
/// output directory), reading a `panel.cfg` beside it as lowest-priority
/// settings.
fn load_inputs(ctx: &mut Ctx) -> Result<Inputs, CliError> {
    let panel_path = ctx
        .s
        .get("panel")
        .map(PathBuf::from)
        .unwrap_or_else(|| ctx.path(synth::PANEL_FILE));
    let sector_path = ctx
        .s
        .get("sectors")
        .map(PathBuf::from)
        .unwrap_or_else(|| ctx.path(synth::SECTOR_FILE));
    let side = panel_path.with_file_name(synth::PANEL_CONFIG_FILE);
    if side.is_file() {
        let extra = Settings::from_file(&side)?;
        for (k, v) in extra.iter() {
            ctx.s.set_default(k, v);
        }
        ctx.inputs.push(side);
    }
    for p in [&panel_path, &sector_path] {
        if !p.is_file() {
            return Err(CliError::MissingArtifact(p.clone()));
        }
    }
    let cfg = PanelConfig::from_settings(&ctx.s)?;
    let schema = Schema::from_settings(&ctx.s);
    let full = load_panel(&panel_path, &sector_path, &schema, &cfg)?;
    let split = Split::from_settings(&ctx.s)?;
    let (train, test) = match &split {
        Split::None => (full, None),
        Split::Half => {
            let (a, b) = full.split(None)?;
            (a, Some(b))
        }
        Split::Date(d) => {
            let (a, b) = full.split(Some(*d))?;
            (a, Some(b))
        }
    };
    let panel_sha256 = io::sha256_file(&panel_path)?;
    ctx.inputs.push(panel_path);
    ctx.inputs.push(sector_path);
    Ok(Inputs {
        train,
        test,
        split,
        panel_sha256,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub split: String,
    pub panel_sha256: String,
    pub normalization: Normalization,
    pub assets: Vec<String>,
    pub sectors: Vec<String>,
    /// Per-asset scales of returns and imbalances removed by standardization.
    pub norm_return: Vec<f64>,
    pub norm_sign: Vec<f64>,
    pub stats: LagStats,
}

fn stats(ctx: &mut Ctx) -> Result<(), CliError> {
    let inputs = load_inputs(ctx)?;
    let lag_cfg = LagConfig::from_settings(&ctx.s)?;
    let st = lagstats::compute(&inputs.train, &lag_cfg)?;
    let rows = lag_profiles(&st).into_iter().map(|r| {
        vec![
            r.statistic.to_string(),
            r.lag.to_string(),
            fmt_f64(r.value),
            fmt_f64(r.stderr),
        ]
    });
    ctx.table("lag_profiles.csv", &["statistic", "lag", "value", "stderr"], rows)?;
    let artifact = StatsArtifact {
        split: inputs.split.label(),
        panel_sha256: inputs.panel_sha256,
        normalization: PanelConfig::from_settings(&ctx.s)?.normalization,
        assets: inputs.train.assets.clone(),
        sectors: inputs.train.sector_labels(),
        norm_return: inputs.train.norm_return.clone(),
        norm_sign: inputs.train.norm_sign.clone(),
        stats: st,
    };
    ctx.json(STATS_FILE, &artifact)
}

fn read_stats(ctx: &mut Ctx) -> Result<StatsArtifact, CliError> {
    let p = ctx.require(STATS_FILE)?;
    Ok(io::read_json(&p)?)
}

/// Stats computed on the same panel and split as the current inputs.
fn matching_stats(ctx: &mut Ctx, inputs: &Inputs) -> Result<StatsArtifact, CliError> {
    let a = read_stats(ctx)?;
    if a.panel_sha256 != inputs.panel_sha256 || a.split != inputs.split.label() {
        return Err(CliError::Data(format!(
            "{STATS_FILE} was computed on another panel or split (split `{}`); rerun stats",
            a.split
        )));
    }
    Ok(a)
}

fn fit_options(s: &Settings, stats: &LagStats) -> Result<FitOptions, ConfigError> {
    let d = FitOptions::default();
    let decay = match (s.parsed::<f64>("decay_beta")?, s.parsed::<f64>("decay_tau0")?) {
        (Some(beta), Some(tau0)) => Some(DecayLaw { beta, tau0 }),
        (None, None) => None,
        _ => {
            return Err(ConfigError::Invalid(
                "decay_beta and decay_tau0 must be set together".into(),
            ))
        }
    };
    Ok(FitOptions {
        model: s.parsed_or("model", d.model)?,
        support: s.parsed_or("lags", stats.config.t_lag)?,
        ridge: s.parsed_or("ridge", d.ridge)?,
        decay,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub split: String,
    pub assets: Vec<String>,
    pub in_sample: FitReport,
    pub out_of_sample: Option<FitReport>,
}

fn oos_sigma0(test: &Panel, stats: &LagStats) -> Result<Mat, CliError> {
    Ok(lagstats::return_covariance(test, 1, stats.config.guard)?.remove(0))
}

fn fit_one(inputs: &Inputs, st: &LagStats, opts: &FitOptions) -> Result<(FitReport, Option<FitReport>), CliError> {
    let fitted = estimate(st, opts)?;
    let (ins, _) = evaluate(&inputs.train, st.sigma(1), &fitted, opts, Sample::InSample)?;
    let oos = match &inputs.test {
        Some(test) => {
            let sigma0 = oos_sigma0(test, st)?;
            Some(evaluate(test, &sigma0, &fitted, opts, Sample::OutOfSample)?.0)
        }
        None => None,
    };
    Ok((ins, oos))
}

fn fit(ctx: &mut Ctx) -> Result<(), CliError> {
    let inputs = load_inputs(ctx)?;
    let sa = matching_stats(ctx, &inputs)?;
    let opts = fit_options(&ctx.s, &sa.stats)?;
    let (ins, oos) = fit_one(&inputs, &sa.stats, &opts)?;
    let labels = inputs.train.assets.clone();
    let big = ins.kernel.integrated();
    let amplitude = match &ins.kernel {
        Kernel::Full { .. } => big.last().cloned().unwrap_or_else(|| Mat::zeros(labels.len(), labels.len())),
        k => k.factor_parts().map(|p| p.0).unwrap(),
    };
    ctx.matrix("G_matrix.csv", &labels, &amplitude)?;
    ctx.matrix("sigma_w.csv", &labels, &ins.residual.sigma_w)?;
    let (diag, off) = integrated_profiles(&ins.kernel);
    let rows = diag.iter().enumerate().map(|(k, d)| {
        vec![
            (k + 1).to_string(),
            fmt_f64(*d),
            fmt_opt(off.as_ref().map(|o| o[k])),
        ]
    });
    ctx.table("kernel_profiles.csv", &["lag", "g_diag", "g_off"], rows)?;
    let art = FitArtifact {
        split: inputs.split.label(),
        assets: labels,
        in_sample: ins,
        out_of_sample: oos,
    };
    ctx.json(FIT_FILE, &art)
}

fn score(ctx: &mut Ctx) -> Result<(), CliError> {
    let inputs = load_inputs(ctx)?;
    let sa = matching_stats(ctx, &inputs)?;
    let base = fit_options(&ctx.s, &sa.stats)?;
    let results: Vec<(FitReport, Option<FitReport>)> = ModelKind::ALL
        .par_iter()
        .map(|&model| fit_one(&inputs, &sa.stats, &FitOptions { model, ..base.clone() }))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (ins, oos) in &results {
        for r in std::iter::once(ins).chain(oos.iter()) {
            rows.push(vec![
                r.model.to_string(),
                match r.sample {
                    Sample::InSample => "in-sample".to_string(),
                    Sample::OutOfSample => "out-of-sample".to_string(),
                },
                r.n_params.to_string(),
                fmt_f64(r.scores.r_diag),
                fmt_opt(r.scores.r_off),
                fmt_f64(r.scores.r_lnl),
                fmt_f64(r.neg_loglik),
            ]);
        }
    }
    ctx.table(
        "scores.csv",
        &["model", "sample", "n_params", "r_diag", "r_off", "r_lnl", "neg_loglik"],
        rows,
    )
}

fn read_fit(ctx: &mut Ctx) -> Result<FitArtifact, CliError> {
    let p = ctx.require(FIT_FILE)?;
    Ok(io::read_json(&p)?)
}

fn decomp_options(s: &Settings) -> Result<DecompOptions, ConfigError> {
    let d = DecompOptions::default();
    Ok(DecompOptions {
        horizon: s.parsed_or("decomp_horizon", d.horizon)?,
        extrapolate_tail: s.flag("extrapolate_tail")?.unwrap_or(d.extrapolate_tail),
    })
}

fn parse_list(s: &Settings, key: &str, default: &str) -> Result<Vec<usize>, ConfigError> {
    let raw = s.get(key).unwrap_or(default);
    raw.split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: raw.into(),
            })
        })
        .collect()
}

fn decompose(ctx: &mut Ctx) -> Result<(), CliError> {
    let sa = read_stats(ctx)?;
    let fa = read_fit(ctx)?;
    let opts = decomp_options(&ctx.s)?;
    let st = &sa.stats;
    let kernel = &fa.in_sample.kernel;
    let tau_max = st.tau_max();
    let d = model_covariance(kernel, &st.c_lagged, &fa.in_sample.residual.sigma_w, &st.sigma, tau_max, &opts)?;
    let rows = (0..tau_max).map(|k| {
        vec![
            (k + 1).to_string(),
            fmt_f64(d.explained_diag[k]),
            fmt_opt(d.explained_off.as_ref().map(|v| v[k])),
            fmt_f64(diag_mean(&d.sigma_total[k])),
            fmt_f64(diag_mean(&d.sigma_g[k])),
            fmt_f64(diag_mean(&d.sigma_w[k])),
            fmt_opt(off_mean(&d.sigma_total[k])),
            fmt_opt(off_mean(&d.sigma_g[k])),
            fmt_opt(off_mean(&d.sigma_w[k])),
        ]
    });
    ctx.table(
        "explained.csv",
        &[
            "lag",
            "explained_diag",
            "explained_off",
            "sigma_diag",
            "sigma_g_diag",
            "sigma_w_diag",
            "sigma_off",
            "sigma_g_off",
            "sigma_w_off",
        ],
        rows,
    )?;
    let resp = model_response(kernel, &st.c_lagged, tau_max, &opts)?;
    let rows = (0..tau_max).map(|k| {
        let emp = st.response((k + 1) as i64);
        vec![
            (k + 1).to_string(),
            fmt_f64(diag_mean(&resp[k])),
            fmt_opt(off_mean(&resp[k])),
            fmt_f64(diag_mean(emp)),
            fmt_opt(off_mean(emp)),
        ]
    });
    ctx.table(
        "model_response.csv",
        &["lag", "model_diag", "model_off", "empirical_diag", "empirical_off"],
        rows,
    )?;
    let splits = channel_splits(kernel, &st.c_lagged, tau_max, &opts)?;
    let rows = splits.iter().map(|c| {
        let sw = c.self_weights.map(|w| w.map(Some)).unwrap_or([None; 2]);
        let cw = c.cross_weights.map(|w| w.map(Some)).unwrap_or([None; 3]);
        vec![
            c.tau.to_string(),
            fmt_f64(c.a1),
            fmt_f64(c.a2),
            fmt_opt(c.b1),
            fmt_opt(c.b2),
            fmt_opt(c.b3),
            fmt_opt(sw[0]),
            fmt_opt(sw[1]),
            fmt_opt(cw[0]),
            fmt_opt(cw[1]),
            fmt_opt(cw[2]),
        ]
    });
    ctx.table(
        "channels.csv",
        &["lag", "a1", "a2", "b1", "b2", "b3", "w_a1", "w_a2", "w_b1", "w_b2", "w_b3"],
        rows,
    )?;
    for lag in parse_list(&ctx.s, "matrix_lags", "1,5,10")? {
        if lag == 0 || lag > tau_max {
            return Err(CliError::Usage(format!("matrix lag {lag} outside 1..={tau_max}")));
        }
        ctx.matrix(&format!("sigma_g_tau{lag}.csv"), &sa.assets, &d.sigma_g[lag - 1])?;
        ctx.matrix(&format!("sigma_w_tau{lag}.csv"), &sa.assets, &d.sigma_w[lag - 1])?;
    }
    Ok(())
}

fn spectrum_rows(values: &[f64]) -> Vec<Vec<String>> {
    values
        .iter()
        .enumerate()
        .map(|(k, v)| vec![k.to_string(), fmt_f64(*v)])
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpectraSummary {
    lag: usize,
    n_assets: usize,
    t_eff: usize,
    top_eigenvalue: f64,
    top_fraction: f64,
    marchenko_pastur: crate::spectra::MarchenkoPastur,
    fraction_inside_band: f64,
    kernel_top_singular_value: f64,
    kernel_top_left: crate::spectra::Loadings,
    kernel_top_right: crate::spectra::Loadings,
}

fn spectra(ctx: &mut Ctx) -> Result<(), CliError> {
    let sa = read_stats(ctx)?;
    let fa = read_fit(ctx)?;
    let st = &sa.stats;
    let n = st.n_assets;
    let lag = ctx.s.parsed_or("spectra_lag", 1usize)?;
    if lag == 0 || lag > st.tau_max() {
        return Err(CliError::Usage(format!("spectra_lag {lag} outside 1..={}", st.tau_max())));
    }
    let sigma = symmetrize(st.sigma(lag));
    let er = eig_sym(&sigma, Some(&sa.sectors))?;
    ctx.table("spectrum_returns.csv", &["mode", "value"], spectrum_rows(&er.values))?;
    let rows = er
        .sector_weights
        .iter()
        .flatten()
        .enumerate()
        .flat_map(|(a, w)| w.iter().map(move |(s, v)| vec![a.to_string(), s.clone(), fmt_f64(*v)]))
        .collect::<Vec<_>>();
    ctx.table("sector_weights.csv", &["mode", "sector", "weight"], rows)?;
    ctx.matrix("eigenvectors_returns.csv", &sa.assets, &er.vectors)?;
    let es = eig_sym(&symmetrize(st.c_cum(lag)), Some(&sa.sectors))?;
    ctx.table("spectrum_signs.csv", &["mode", "value"], spectrum_rows(&es.values))?;

    let mp = marchenko_pastur(n as f64 / st.t_eff as f64, diag_mean(&sigma) / lag as f64)?;
    let scaled: Vec<f64> = er.values.iter().map(|v| v / lag as f64).collect();
    let bins = ctx.s.parsed_or("histogram_bins", 50usize)?.max(1);
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min).min(mp.lower);
    let hi = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(mp.upper);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &scaled {
        let k = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        counts[k.min(bins - 1)] += 1;
    }
    let rows = counts.iter().enumerate().map(|(k, c)| {
        let a = lo + width * k as f64;
        vec![
            fmt_f64(a),
            fmt_f64(a + width),
            c.to_string(),
            fmt_f64(*c as f64 / (n as f64 * width.max(f64::MIN_POSITIVE))),
            fmt_f64(mp.density(a + 0.5 * width)),
        ]
    });
    ctx.table("histogram.csv", &["lower", "upper", "count", "density", "mp_density"], rows)?;

    let kernel = &fa.in_sample.kernel;
    let amplitude = match kernel {
        Kernel::Full { .. } => kernel.integrated().pop().unwrap(),
        k => k.factor_parts().unwrap().0,
    };
    let sv = svd(&amplitude)?;
    ctx.table("svd_kernel.csv", &["mode", "value"], spectrum_rows(&sv.values))?;

    let opts = decomp_options(&ctx.s)?;
    let sigma_g = impact_covariance(kernel, &st.c_lagged, lag, &opts)?.pop().unwrap();
    let eg = eig_sym(&symmetrize(&sigma_g), None)?;
    let modes = ctx.s.parsed_or("modes", 50usize)?.min(n);
    let draws = ctx.s.parsed_or("baseline_draws", 200usize)?;
    let base = BaselineOptions { draws, seed: ctx.seed };
    let with_impact = overlap_and_common_modes(&er.vectors, &eg.vectors, modes, Some(&base))?;
    let with_signs = overlap_and_common_modes(&er.vectors, &es.vectors, modes, None)?;
    let baseline = with_impact.noise_baseline.clone().unwrap_or_default();
    let rows = (0..modes).map(|k| {
        vec![
            (k + 1).to_string(),
            fmt_f64(with_impact.common_modes[k]),
            fmt_f64(with_signs.common_modes[k]),
            fmt_opt(baseline.get(k).copied()),
        ]
    });
    ctx.table("common_modes.csv", &["n", "impact", "signs", "baseline"], rows)?;
    ctx.matrix("overlap_impact.csv", &sa.assets, &with_impact.overlap)?;
    ctx.matrix("overlap_signs.csv", &sa.assets, &with_signs.overlap)?;

    let total: f64 = er.values.iter().sum();
    let summary = SpectraSummary {
        lag,
        n_assets: n,
        t_eff: st.t_eff,
        top_eigenvalue: er.values[0],
        top_fraction: er.values[0] / total,
        marchenko_pastur: mp,
        fraction_inside_band: mp.fraction_inside(&scaled, 0.05),
        kernel_top_singular_value: sv.values[0],
        kernel_top_left: sv.top_left,
        kernel_top_right: sv.top_right,
    };
    ctx.json("spectra.json", &summary)
}

fn scale(ctx: &mut Ctx) -> Result<(), CliError> {
    let inputs = load_inputs(ctx)?;
    let sa = matching_stats(ctx, &inputs)?;
    let fa = read_fit(ctx)?;
    let decay = match &fa.in_sample.kernel {
        Kernel::Full { .. } => fa
            .in_sample
            .decay_diag
            .map(|d| d.law())
            .ok_or_else(|| CliError::Data("no decay law in fit.json".into()))?,
        k => k.factor_parts().unwrap().1,
    };
    let d = ScalingOptions::default();
    let default_sizes: String = d.sizes.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let opts = ScalingOptions {
        sizes: parse_list(&ctx.s, "sizes", &default_sizes)?,
        samples: ctx.s.parsed_or("samples", d.samples)?,
        seed: ctx.seed,
    };
    let curve = bootstrap_scaling(&inputs.train, &sa.stats, decay, fa.in_sample.support, &opts)?;
    let rows = curve.points.iter().map(|p| {
        vec![
            p.n.to_string(),
            fmt_f64(p.mean_diag),
            fmt_f64(p.se_diag),
            fmt_f64(p.mean_off),
            fmt_f64(p.se_off),
            fmt_opt(p.mean_off_same_sector),
            fmt_opt(p.se_off_same_sector),
            p.sector_samples.to_string(),
        ]
    });
    ctx.table(
        "scaling_points.csv",
        &[
            "n",
            "mean_diag",
            "se_diag",
            "mean_off",
            "se_off",
            "mean_off_same_sector",
            "se_off_same_sector",
            "sector_samples",
        ],
        rows,
    )?;
    ctx.json("scaling_fits.json", &curve.fits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub model: ModelKind,
    pub n_assets: usize,
    pub t_eff: usize,
    pub split: String,
    pub g_diag: f64,
    pub g_off: Option<f64>,
    pub beta: Option<f64>,
    pub tau0: Option<f64>,
    pub r_diag_in_sample: f64,
    pub r_diag_out_of_sample: Option<f64>,
    pub tables: Vec<String>,
}

fn report(ctx: &mut Ctx) -> Result<(), CliError> {
    let sa = read_stats(ctx)?;
    let fa = read_fit(ctx)?;
    let st = &sa.stats;
    let mut tables = Vec::new();

    // Lag profiles of Σ/τ, C/τ and R.
    let rows = (1..=st.tau_max()).map(|t| {
        let tf = t as f64;
        vec![
            t.to_string(),
            fmt_f64(diag_mean(st.sigma(t)) / tf),
            fmt_opt(off_mean(st.sigma(t)).map(|v| v / tf)),
            fmt_f64(diag_mean(st.c_cum(t)) / tf),
            fmt_opt(off_mean(st.c_cum(t)).map(|v| v / tf)),
            fmt_f64(diag_mean(st.response(t as i64))),
            fmt_opt(off_mean(st.response(t as i64))),
        ]
    });
    ctx.table(
        "report_lag_profiles.csv",
        &["lag", "sigma_diag_over_tau", "sigma_off_over_tau", "c_diag_over_tau", "c_off_over_tau", "response_diag", "response_off"],
        rows,
    )?;
    tables.push("report_lag_profiles.csv".to_string());

    // Integrated kernel profiles with their fitted decay laws.
    let ins = &fa.in_sample;
    let (diag, off) = integrated_profiles(&ins.kernel);
    let curve = |d: Option<crate::kernels::DecayFit>, t: usize| d.map(|f| f.amplitude * f.law().phi(t as f64));
    let rows = diag.iter().enumerate().map(|(k, d)| {
        vec![
            (k + 1).to_string(),
            fmt_f64(*d),
            fmt_opt(off.as_ref().map(|o| o[k])),
            fmt_opt(curve(ins.decay_diag, k + 1)),
            fmt_opt(curve(ins.decay_off, k + 1)),
        ]
    });
    ctx.table("report_kernel.csv", &["lag", "g_diag", "g_off", "fit_diag", "fit_off"], rows)?;
    tables.push("report_kernel.csv".to_string());

    for (src, dst) in [
        ("explained.csv", "report_explained.csv"),
        ("common_modes.csv", "report_common_modes.csv"),
        ("scores.csv", "report_scores.csv"),
    ] {
        let p = ctx.path(src);
        if p.is_file() {
            ctx.inputs.push(p.clone());
            let q = ctx.path(dst);
            std::fs::copy(&p, &q)?;
            ctx.wrote(q);
            tables.push(dst.to_string());
        }
    }
    let rep = Report {
        model: ins.model,
        n_assets: ins.n_assets,
        t_eff: st.t_eff,
        split: fa.split.clone(),
        g_diag: ins.summary.g_diag,
        g_off: ins.summary.g_off,
        beta: ins.summary.beta,
        tau0: ins.summary.tau0,
        r_diag_in_sample: ins.scores.r_diag,
        r_diag_out_of_sample: fa.out_of_sample.as_ref().map(|r| r.scores.r_diag),
        tables,
    };
    ctx.json("report.json", &rep)
}
