//! Binned trades-and-quotes ingestion.
//!
//! Raw records carry one bin per `(bin_end_time, asset)`: the closing price
//! and the number of buyer- and seller-initiated market orders. The panel
//! holds, per asset, the log-return of each bin and its order imbalance
//! `n_buy − n_sell`, both standardized by their whole-period standard
//! deviation. Returns are only formed between consecutive bins of the same
//! session, so the first bin of every session is consumed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Settings};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("asset `{0}` has no sector entry")]
    MissingSector(String),
    #[error("no timestamps common to all assets")]
    EmptyIntersection,
    #[error("non-positive price {price} for asset `{asset}` at {time}")]
    NonPositivePrice {
        asset: String,
        time: DateTime<Utc>,
        price: f64,
    },
    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },
    #[error("split leaves an empty sample")]
    EmptySplit,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawBinRecord {
    pub bin_end_time: DateTime<Utc>,
    pub asset_id: String,
    pub close_price: f64,
    pub n_buy: u64,
    pub n_sell: u64,
}

/// Column names of the input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub time: String,
    pub asset: String,
    pub price: String,
    pub n_buy: String,
    pub n_sell: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            time: "time".into(),
            asset: "asset".into(),
            price: "price".into(),
            n_buy: "n_buy".into(),
            n_sell: "n_sell".into(),
        }
    }
}

impl Schema {
    /// Reads `column_time`, `column_asset`, ... overrides.
    pub fn from_settings(s: &Settings) -> Self {
        let d = Self::default();
        let pick = |k: &str, dflt: String| s.get(k).map(String::from).unwrap_or(dflt);
        Self {
            time: pick("column_time", d.time),
            asset: pick("column_asset", d.asset),
            price: pick("column_price", d.price),
            n_buy: pick("column_n_buy", d.n_buy),
            n_sell: pick("column_n_sell", d.n_sell),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Global,
    /// Per-session standardization. Breaks extensivity; kept for comparison.
    Local,
}

/// How the bin timeline is cut into sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionBreak {
    /// New session on every calendar-day change or gap in the bin grid.
    Daily,
    /// New session only on a gap in the bin grid.
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingBins {
    /// Keep only timestamps observed for every asset.
    Intersect,
    /// Union of timestamps; a missing bin carries the last price and zero imbalance.
    Fill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelConfig {
    pub bin_width: Duration,
    pub session_hours: Option<(NaiveTime, NaiveTime)>,
    pub open_skip: Duration,
    pub close_skip: Duration,
    pub normalization: Normalization,
    pub session_break: SessionBreak,
    pub missing: MissingBins,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self {
            bin_width: Duration::minutes(5),
            session_hours: None,
            open_skip: Duration::minutes(60),
            close_skip: Duration::minutes(30),
            normalization: Normalization::Global,
            session_break: SessionBreak::Daily,
            missing: MissingBins::Intersect,
        }
    }
}

impl PanelConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let d = Self::default();
        let minutes = |key: &str, dflt: Duration| -> Result<Duration, ConfigError> {
            Ok(s.parsed::<f64>(key)?
                .map(|m| Duration::milliseconds((m * 60_000.0).round() as i64))
                .unwrap_or(dflt))
        };
        let bin_width = minutes("bin_width_minutes", d.bin_width)?;
        if bin_width <= Duration::zero() {
            return Err(ConfigError::Invalid("bin_width_minutes must be positive".into()));
        }
        let open_skip = minutes("open_skip_minutes", d.open_skip)?;
        let close_skip = minutes("close_skip_minutes", d.close_skip)?;
        if open_skip < Duration::zero() || close_skip < Duration::zero() {
            return Err(ConfigError::Invalid("skip windows must be nonnegative".into()));
        }
        let session_hours = match (s.get("session_open"), s.get("session_close")) {
            (None, None) => None,
            (Some(o), Some(c)) => {
                let parse = |key: &str, v: &str| {
                    NaiveTime::parse_from_str(v, "%H:%M").map_err(|_| ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                    })
                };
                Some((parse("session_open", o)?, parse("session_close", c)?))
            }
            _ => {
                return Err(ConfigError::Invalid(
                    "session_open and session_close must be given together".into(),
                ))
            }
        };
        let normalization = match s.get("normalization") {
            None | Some("global") => Normalization::Global,
            Some("local") => Normalization::Local,
            Some(v) => return Err(bad("normalization", v)),
        };
        let session_break = match s.get("session_break") {
            None | Some("daily") => SessionBreak::Daily,
            Some("gap") => SessionBreak::Gap,
            Some(v) => return Err(bad("session_break", v)),
        };
        let missing = match s.get("missing_bins") {
            None | Some("intersect") => MissingBins::Intersect,
            Some("fill") => MissingBins::Fill,
            Some(v) => return Err(bad("missing_bins", v)),
        };
        Ok(Self {
            bin_width,
            session_hours,
            open_skip,
            close_skip,
            normalization,
            session_break,
            missing,
        })
    }

    /// Writes this configuration as settings keys.
    pub fn to_settings(&self, s: &mut Settings) {
        let mins = |d: Duration| d.num_milliseconds() as f64 / 60_000.0;
        s.set("bin_width_minutes", mins(self.bin_width));
        s.set("open_skip_minutes", mins(self.open_skip));
        s.set("close_skip_minutes", mins(self.close_skip));
        if let Some((o, c)) = self.session_hours {
            s.set("session_open", o.format("%H:%M"));
            s.set("session_close", c.format("%H:%M"));
        }
        s.set(
            "normalization",
            match self.normalization {
                Normalization::Global => "global",
                Normalization::Local => "local",
            },
        );
        s.set(
            "session_break",
            match self.session_break {
                SessionBreak::Daily => "daily",
                SessionBreak::Gap => "gap",
            },
        );
        s.set(
            "missing_bins",
            match self.missing {
                MissingBins::Intersect => "intersect",
                MissingBins::Fill => "fill",
            },
        );
    }
}

fn bad(key: &str, v: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
    }
}

/// Standardized panel of returns and imbalances (rows = bins, columns = assets).
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub assets: Vec<String>,
    pub sectors: BTreeMap<String, String>,
    /// End time of the bin each row belongs to.
    pub times: Vec<DateTime<Utc>>,
    /// End time of the bin each return starts from (same session as `times`).
    pub from_times: Vec<DateTime<Utc>>,
    /// Session index of each row; rows of one session are contiguous.
    pub sessions: Vec<usize>,
    pub returns: Mat,
    pub signs: Mat,
    pub norm_return: Vec<f64>,
    pub norm_sign: Vec<f64>,
    pub dropped_bins: usize,
}

impl Panel {
    /// Builds a single-session panel from already standardized matrices.
    pub fn from_matrices(
        assets: Vec<String>,
        sectors: BTreeMap<String, String>,
        returns: Mat,
        signs: Mat,
    ) -> Self {
        let t = returns.nrows();
        let n = returns.ncols();
        assert_eq!(signs.shape(), (t, n), "returns and signs must have equal shape");
        assert_eq!(assets.len(), n, "one asset id per column");
        let times = synthetic_times(t + 1, Duration::minutes(5));
        Self {
            assets,
            sectors,
            from_times: times[..t].to_vec(),
            times: times[1..].to_vec(),
            sessions: vec![0; t],
            returns,
            signs,
            norm_return: vec![1.0; n],
            norm_sign: vec![1.0; n],
            dropped_bins: 0,
        }
    }

    /// Standardizes raw series under the given mode.
    pub fn standardize(
        series: Series,
        sectors: BTreeMap<String, String>,
        mode: Normalization,
    ) -> Result<Self, PanelError> {
        let (returns, norm_return, signs, norm_sign) = match mode {
            Normalization::Global => {
                let (r, nr) = normalize_global(&series.returns)?;
                let (s, ns) = normalize_global(&series.signs)?;
                (r, nr, s, ns)
            }
            Normalization::Local => {
                let (r, nr) = normalize_local(&series.returns, &series.sessions)?;
                let (s, ns) = normalize_local(&series.signs, &series.sessions)?;
                (r, nr, s, ns)
            }
        };
        Ok(Self {
            assets: series.assets,
            sectors,
            times: series.times,
            from_times: series.from_times,
            sessions: series.sessions,
            returns,
            signs,
            norm_return,
            norm_sign,
            dropped_bins: series.dropped_bins,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn n_bins(&self) -> usize {
        self.returns.nrows()
    }

    /// Row ranges of each session, in order.
    pub fn session_ranges(&self) -> Vec<Range<usize>> {
        session_ranges(&self.sessions)
    }

    pub fn sector_of(&self, i: usize) -> &str {
        self.sectors
            .get(&self.assets[i])
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn sector_labels(&self) -> Vec<String> {
        (0..self.n_assets())
            .map(|i| self.sector_of(i).to_string())
            .collect()
    }

    /// Columns restricted to `idx` (in that order).
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |m: &Mat| Mat::from_fn(m.nrows(), idx.len(), |t, k| m[(t, idx[k])]);
        let assets: Vec<String> = idx.iter().map(|&i| self.assets[i].clone()).collect();
        let sectors = assets
            .iter()
            .filter_map(|a| self.sectors.get(a).map(|s| (a.clone(), s.clone())))
            .collect();
        Self {
            assets,
            sectors,
            times: self.times.clone(),
            from_times: self.from_times.clone(),
            sessions: self.sessions.clone(),
            returns: pick(&self.returns),
            signs: pick(&self.signs),
            norm_return: idx.iter().map(|&i| self.norm_return[i]).collect(),
            norm_sign: idx.iter().map(|&i| self.norm_sign[i]).collect(),
            dropped_bins: self.dropped_bins,
        }
    }

    /// Rows restricted to `range`; the standardization is kept.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        let len = range.end - range.start;
        Self {
            assets: self.assets.clone(),
            sectors: self.sectors.clone(),
            times: self.times[range.clone()].to_vec(),
            from_times: self.from_times[range.clone()].to_vec(),
            sessions: self.sessions[range.clone()].to_vec(),
            returns: self.returns.rows(range.start, len).into_owned(),
            signs: self.signs.rows(range.start, len).into_owned(),
            norm_return: self.norm_return.clone(),
            norm_sign: self.norm_sign.clone(),
            dropped_bins: self.dropped_bins,
        }
    }

    /// In-sample / out-of-sample split. Rows strictly before `date` go in
    /// sample; without a date the first half of the rows does.
    pub fn split(&self, date: Option<NaiveDate>) -> Result<(Self, Self), PanelError> {
        let t = self.n_bins();
        let cut = match date {
            Some(d) => self
                .times
                .iter()
                .position(|ts| ts.date_naive() >= d)
                .unwrap_or(t),
            None => t / 2,
        };
        if cut == 0 || cut == t {
            return Err(PanelError::EmptySplit);
        }
        Ok((self.slice_rows(0..cut), self.slice_rows(cut..t)))
    }
}

pub fn session_ranges(sessions: &[usize]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=sessions.len() {
        if t == sessions.len() || sessions[t] != sessions[t - 1] {
            if t > start {
                out.push(start..t);
            }
            start = t;
        }
    }
    out
}

/// Bin end times of a synthetic contiguous grid starting 2012-01-03 09:30 UTC.
pub fn synthetic_times(count: usize, width: Duration) -> Vec<DateTime<Utc>> {
    let start = Utc.with_ymd_and_hms(2012, 1, 3, 9, 30, 0).unwrap();
    (0..count).map(|k| start + width * (k as i32 + 1)).collect()
}

/// Raw (unstandardized) aligned series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub assets: Vec<String>,
    pub times: Vec<DateTime<Utc>>,
    pub from_times: Vec<DateTime<Utc>>,
    pub sessions: Vec<usize>,
    pub returns: Mat,
    pub signs: Mat,
    pub dropped_bins: usize,
}

fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    None
}

/// Reads bin records. Line numbers in errors are 1-based file lines.
pub fn read_records(path: &Path, schema: &Schema) -> Result<Vec<RawBinRecord>, PanelError> {
    let shown = path.display().to_string();
    let err = |line: usize, msg: String| PanelError::Parse {
        path: shown.clone(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing column `{name}`")))
    };
    let (ct, ca, cp, cb, cs) = (
        col(&schema.time)?,
        col(&schema.asset)?,
        col(&schema.price)?,
        col(&schema.n_buy)?,
        col(&schema.n_sell)?,
    );
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let time = parse_time(field(ct))
            .ok_or_else(|| err(line, format!("bad timestamp `{}`", field(ct))))?;
        let asset = field(ca).to_string();
        if asset.is_empty() {
            return Err(err(line, "empty asset id".into()));
        }
        let price: f64 = field(cp)
            .parse()
            .map_err(|_| err(line, format!("bad price `{}`", field(cp))))?;
        let n_buy: u64 = field(cb)
            .parse()
            .map_err(|_| err(line, format!("bad n_buy `{}`", field(cb))))?;
        let n_sell: u64 = field(cs)
            .parse()
            .map_err(|_| err(line, format!("bad n_sell `{}`", field(cs))))?;
        if !seen.insert((time, asset.clone())) {
            return Err(err(line, format!("duplicate bin {time} for `{asset}`")));
        }
        out.push(RawBinRecord {
            bin_end_time: time,
            asset_id: asset,
            close_price: price,
            n_buy,
            n_sell,
        });
    }
    Ok(out)
}

/// Reads an `asset,sector` CSV.
pub fn read_sectors(path: &Path) -> Result<BTreeMap<String, String>, PanelError> {
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PanelError::Parse {
            path: shown.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PanelError::Parse {
            path: shown.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        match (rec.get(0), rec.get(1)) {
            (Some(a), Some(s)) if !a.is_empty() => {
                out.insert(a.to_string(), s.to_string());
            }
            _ => {
                return Err(PanelError::Parse {
                    path: shown.clone(),
                    line,
                    msg: "expected `asset,sector`".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Drops bins that overlap the first `open_skip` or the last `close_skip`
/// of their session. A bin covers `(end − bin_width, end]`. Session bounds
/// are the configured hours when given, else the observed first/last bin of
/// each calendar day.
pub fn session_filter<I>(
    records: I,
    open_skip: Duration,
    close_skip: Duration,
    bin_width: Duration,
    hours: Option<(NaiveTime, NaiveTime)>,
) -> Vec<RawBinRecord>
where
    I: IntoIterator<Item = RawBinRecord>,
{
    let records: Vec<RawBinRecord> = records.into_iter().collect();
    let open_skip = open_skip.max(Duration::zero());
    let close_skip = close_skip.max(Duration::zero());
    if open_skip.is_zero() && close_skip.is_zero() && hours.is_none() {
        return records;
    }
    let mut bounds: HashMap<NaiveDate, (DateTime<Utc>, DateTime<Utc>)> = HashMap::new();
    for r in &records {
        let date = r.bin_end_time.date_naive();
        let start = r.bin_end_time - bin_width;
        let e = bounds.entry(date).or_insert((start, r.bin_end_time));
        e.0 = e.0.min(start);
        e.1 = e.1.max(r.bin_end_time);
    }
    if let Some((o, c)) = hours {
        for (date, b) in bounds.iter_mut() {
            *b = (
                Utc.from_utc_datetime(&date.and_time(o)),
                Utc.from_utc_datetime(&date.and_time(c)),
            );
        }
    }
    records
        .into_iter()
        .filter(|r| {
            let (open, close) = bounds[&r.bin_end_time.date_naive()];
            r.bin_end_time - bin_width >= open + open_skip && r.bin_end_time <= close - close_skip
        })
        .collect()
}

/// Aligns assets on a common bin grid and forms log-returns and imbalances.
pub fn build_series(records: &[RawBinRecord], cfg: &PanelConfig) -> Result<Series, PanelError> {
    let mut assets: Vec<String> = Vec::new();
    let mut by_asset: HashMap<String, BTreeMap<DateTime<Utc>, (f64, f64)>> = HashMap::new();
    for r in records {
        if !(r.close_price > 0.0) || !r.close_price.is_finite() {
            return Err(PanelError::NonPositivePrice {
                asset: r.asset_id.clone(),
                time: r.bin_end_time,
                price: r.close_price,
            });
        }
        let entry = by_asset.entry(r.asset_id.clone()).or_insert_with(|| {
            assets.push(r.asset_id.clone());
            BTreeMap::new()
        });
        entry.insert(
            r.bin_end_time,
            (r.close_price, r.n_buy as f64 - r.n_sell as f64),
        );
    }
    if assets.is_empty() {
        return Err(PanelError::EmptyIntersection);
    }
    let union: BTreeSet<DateTime<Utc>> = by_asset.values().flat_map(|m| m.keys().copied()).collect();
    let grid: Vec<DateTime<Utc>> = match cfg.missing {
        MissingBins::Intersect => union
            .iter()
            .copied()
            .filter(|t| by_asset.values().all(|m| m.contains_key(t)))
            .collect(),
        MissingBins::Fill => union.iter().copied().collect(),
    };

    // Cut the grid into sessions.
    let mut session_of_bin = Vec::with_capacity(grid.len());
    let mut sid = 0usize;
    for (k, t) in grid.iter().enumerate() {
        if k > 0 {
            let prev = grid[k - 1];
            let gap = *t - prev > cfg.bin_width;
            let day = cfg.session_break == SessionBreak::Daily && t.date_naive() != prev.date_naive();
            if gap || day {
                sid += 1;
            }
        }
        session_of_bin.push(sid);
    }

    let n = assets.len();
    // Prices/imbalances on the grid; None where the asset has no usable price yet.
    let mut cells: Vec<Vec<Option<(f64, f64)>>> = vec![vec![None; n]; grid.len()];
    for (j, a) in assets.iter().enumerate() {
        let m = &by_asset[a];
        let mut last: Option<f64> = None;
        for (k, t) in grid.iter().enumerate() {
            if k > 0 && session_of_bin[k] != session_of_bin[k - 1] {
                last = None;
            }
            match m.get(t) {
                Some(&(p, e)) => {
                    last = Some(p);
                    cells[k][j] = Some((p, e));
                }
                None => cells[k][j] = last.map(|p| (p, 0.0)),
            }
        }
    }
    let usable: Vec<bool> = cells.iter().map(|row| row.iter().all(Option::is_some)).collect();

    let mut times = Vec::new();
    let mut from_times = Vec::new();
    let mut sessions = Vec::new();
    let mut ret_rows: Vec<Vec<f64>> = Vec::new();
    let mut sign_rows: Vec<Vec<f64>> = Vec::new();
    let mut kept_bins = 0usize;
    let mut out_session = 0usize;
    let mut k = 0;
    while k < grid.len() {
        // Maximal run of usable bins within one session.
        if !usable[k] {
            k += 1;
            continue;
        }
        let start = k;
        while k + 1 < grid.len() && usable[k + 1] && session_of_bin[k + 1] == session_of_bin[start] {
            k += 1;
        }
        let end = k + 1;
        k += 1;
        if end - start < 2 {
            continue;
        }
        kept_bins += end - start;
        for b in (start + 1)..end {
            let mut xr = Vec::with_capacity(n);
            let mut er = Vec::with_capacity(n);
            for j in 0..n {
                let (p, e) = cells[b][j].unwrap();
                let (p0, _) = cells[b - 1][j].unwrap();
                xr.push(p.ln() - p0.ln());
                er.push(e);
            }
            ret_rows.push(xr);
            sign_rows.push(er);
            times.push(grid[b]);
            from_times.push(grid[b - 1]);
            sessions.push(out_session);
        }
        out_session += 1;
    }
    if ret_rows.is_empty() {
        return Err(PanelError::EmptyIntersection);
    }
    let t = ret_rows.len();
    Ok(Series {
        assets,
        times,
        from_times,
        sessions,
        returns: Mat::from_fn(t, n, |r, c| ret_rows[r][c]),
        signs: Mat::from_fn(t, n, |r, c| sign_rows[r][c]),
        dropped_bins: union.len() - kept_bins,
    })
}

fn column_moments(m: &Mat, j: usize, rows: Range<usize>) -> (f64, f64, f64) {
    let len = (rows.end - rows.start) as f64;
    let col = m.column(j);
    let mean = rows.clone().map(|t| col[t]).sum::<f64>() / len;
    let var = rows.clone().map(|t| (col[t] - mean).powi(2)).sum::<f64>() / len;
    let peak = rows.map(|t| col[t].abs()).fold(0.0_f64, f64::max);
    (mean, var.sqrt(), peak)
}

fn is_degenerate(std: f64, peak: f64) -> bool {
    !(std > 1e-12 * peak.max(f64::MIN_POSITIVE)) || !std.is_finite()
}

/// Subtracts each column's mean and divides by its (population) standard
/// deviation over the whole sample. Returns the matrix and the scales.
pub fn normalize_global(m: &Mat) -> Result<(Mat, Vec<f64>), PanelError> {
    let t = m.nrows();
    let mut out = m.clone();
    let mut scales = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let (mean, std, peak) = column_moments(m, j, 0..t);
        if t == 0 || is_degenerate(std, peak) {
            return Err(PanelError::ZeroVariance { column: j });
        }
        for r in 0..t {
            out[(r, j)] = (m[(r, j)] - mean) / std;
        }
        scales.push(std);
    }
    Ok((out, scales))
}

/// Standardizes each session block separately. The reported scale of a
/// column is the root-mean-square of its session scales.
pub fn normalize_local(m: &Mat, sessions: &[usize]) -> Result<(Mat, Vec<f64>), PanelError> {
    let ranges = session_ranges(sessions);
    let mut out = m.clone();
    let mut scales = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut acc = 0.0;
        for r in &ranges {
            let (mean, std, peak) = column_moments(m, j, r.clone());
            if is_degenerate(std, peak) {
                return Err(PanelError::ZeroVariance { column: j });
            }
            for t in r.clone() {
                out[(t, j)] = (m[(t, j)] - mean) / std;
            }
            acc += std * std;
        }
        scales.push((acc / ranges.len().max(1) as f64).sqrt());
    }
    Ok((out, scales))
}

/// Reads, filters, aligns and standardizes a panel.
pub fn load_panel(
    path: &Path,
    sector_path: &Path,
    schema: &Schema,
    cfg: &PanelConfig,
) -> Result<Panel, PanelError> {
    let records = read_records(path, schema)?;
    let sectors = read_sectors(sector_path)?;
    let mut missing: Vec<&str> = records
        .iter()
        .map(|r| r.asset_id.as_str())
        .filter(|a| !sectors.contains_key(*a))
        .collect();
    missing.sort_unstable();
    if let Some(a) = missing.first() {
        return Err(PanelError::MissingSector(a.to_string()));
    }
    let filtered = session_filter(
        records,
        cfg.open_skip,
        cfg.close_skip,
        cfg.bin_width,
        cfg.session_hours,
    );
    let series = build_series(&filtered, cfg)?;
    let sectors = series
        .assets
        .iter()
        .map(|a| (a.clone(), sectors[a].clone()))
        .collect();
    Panel::standardize(series, sectors, cfg.normalization)
}
