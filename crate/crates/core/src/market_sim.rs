//! GBM path simulation under the physical measure, path fixtures, and the
//! state variables fed to the QLBS solvers.
//!
//! Paths are generated with the exact log-normal step
//! `ln S_{t+1} = ln S_t + (mu - sigma^2/2) dt + sigma sqrt(dt) eps`, so prices stay
//! strictly positive and the drift-adjusted state is a discrete martingale.
//!
//! Random numbers come from ChaCha8 seeded with `seed`; path `k` draws from
//! stream `k`. Serial and parallel generation therefore produce identical bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QlbsError, Result};

/// GBM dynamics plus the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketParams {
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
    pub maturity: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for MarketParams {
    fn default() -> Self {
        MarketParams {
            s0: 100.0,
            mu: 0.05,
            sigma: 0.15,
            r: 0.03,
            maturity: 1.0,
            n_steps: 24,
            n_paths: 10_000,
            seed: 42,
        }
    }
}

impl MarketParams {
    pub fn dt(&self) -> f64 {
        self.maturity / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("s0", self.s0),
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("r", self.r),
            ("maturity", self.maturity),
        ] {
            if !v.is_finite() {
                return Err(QlbsError::invalid(name, format!("must be finite, got {v}")));
            }
        }
        if self.s0 <= 0.0 {
            return Err(QlbsError::invalid("s0", "must be positive"));
        }
        if self.sigma < 0.0 {
            return Err(QlbsError::invalid("sigma", "must be non-negative"));
        }
        if self.maturity <= 0.0 {
            return Err(QlbsError::invalid("maturity", "must be positive"));
        }
        if self.n_steps < 1 {
            return Err(QlbsError::invalid("n_steps", "need at least one step"));
        }
        if self.n_paths < 1 {
            return Err(QlbsError::invalid("n_paths", "need at least one path"));
        }
        Ok(())
    }
}

/// Simulated (or loaded) price matrix, one row per path, `n_steps + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub prices: Array2<f64>,
    pub dt: f64,
    pub params: MarketParams,
}

impl PathSet {
    /// Wraps an externally produced price matrix. `mu`, `sigma` and `r` are
    /// only used by the drift-adjusted state and the increments.
    pub fn from_prices(prices: Array2<f64>, dt: f64, mu: f64, sigma: f64, r: f64) -> Result<Self> {
        let (n_paths, n_cols) = prices.dim();
        if n_paths == 0 || n_cols < 2 {
            return Err(QlbsError::MalformedTable(format!(
                "need at least one path and one step, got {n_paths}x{n_cols}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(QlbsError::invalid(
                "dt",
                format!("must be positive, got {dt}"),
            ));
        }
        if let Some(bad) = prices.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(QlbsError::MalformedTable(format!(
                "prices must be positive and finite, found {bad}"
            )));
        }
        let s0 = prices[[0, 0]];
        if prices.column(0).iter().any(|&p| p != s0) {
            return Err(QlbsError::MalformedTable(
                "all paths must start from the same spot".into(),
            ));
        }
        let n_steps = n_cols - 1;
        let params = MarketParams {
            s0,
            mu,
            sigma,
            r,
            maturity: dt * n_steps as f64,
            n_steps,
            n_paths,
            seed: 0,
        };
        params.validate()?;
        Ok(PathSet { prices, dt, params })
    }

    pub fn n_paths(&self) -> usize {
        self.prices.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.prices.ncols() - 1
    }

    pub fn terminal(&self) -> ArrayView1<'_, f64> {
        self.prices.column(self.n_steps())
    }
}

/// Which transform of the price is used as the regression state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    /// `S_t` itself.
    Price,
    /// Log-price level `ln S_t`.
    LogPrice,
    /// `X_t = ln S_t - (mu - sigma^2/2) t`, a martingale under GBM.
    DriftAdjusted,
    /// One-step log return `ln(S_t / S_{t-1})`, zero at `t = 0`.
    LogReturn,
}

impl StateKind {
    pub const ALL: [StateKind; 4] = [
        StateKind::DriftAdjusted,
        StateKind::Price,
        StateKind::LogPrice,
        StateKind::LogReturn,
    ];

    /// Short column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            StateKind::Price => "S",
            StateKind::LogPrice => "lnS",
            StateKind::DriftAdjusted => "X",
            StateKind::LogReturn => "dlnS",
        }
    }

    pub fn from_label(label: &str) -> Option<StateKind> {
        match label.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "s" | "price" => Some(StateKind::Price),
            "lns" | "logprice" => Some(StateKind::LogPrice),
            "x" | "driftadjusted" => Some(StateKind::DriftAdjusted),
            "dlns" | "logreturn" | "return" => Some(StateKind::LogReturn),
            _ => None,
        }
    }
}

impl std::fmt::Display for StateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSeries {
    pub values: Array2<f64>,
    pub kind: StateKind,
}

impl StateSeries {
    /// Global (min, max) over all paths and time steps.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Discounted price increments `S_{t+1} - e^{r dt} S_t` and their
/// cross-sectionally demeaned version.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub delta_s: Array2<f64>,
    pub delta_s_hat: Array2<f64>,
}

pub fn simulate_gbm(params: &MarketParams) -> Result<PathSet> {
    params.validate()?;
    let dt = params.dt();
    let drift = (params.mu - 0.5 * params.sigma * params.sigma) * dt;
    let vol = params.sigma * dt.sqrt();
    let n_cols = params.n_steps + 1;

    let rows: Vec<Vec<f64>> = (0..params.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(k as u64);
            let mut row = Vec::with_capacity(n_cols);
            row.push(params.s0);
            let mut log_return = 0.0;
            for _ in 0..params.n_steps {
                let eps: f64 = StandardNormal.sample(&mut rng);
                log_return += drift + vol * eps;
                row.push(params.s0 * log_return.exp());
            }
            row
        })
        .collect();

    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let prices = Array2::from_shape_vec((params.n_paths, n_cols), flat)
        .expect("row lengths fixed by construction");
    Ok(PathSet {
        prices,
        dt,
        params: *params,
    })
}

pub fn compute_states(paths: &PathSet, kind: StateKind) -> StateSeries {
    let prices = &paths.prices;
    let values = match kind {
        StateKind::Price => prices.clone(),
        StateKind::LogPrice => prices.mapv(f64::ln),
        StateKind::DriftAdjusted => {
            let p = &paths.params;
            let drift = p.mu - 0.5 * p.sigma * p.sigma;
            let mut x = prices.mapv(f64::ln);
            for (t, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
                let shift = drift * t as f64 * paths.dt;
                col.mapv_inplace(|v| v - shift);
            }
            x
        }
        StateKind::LogReturn => {
            let mut x = Array2::zeros(prices.dim());
            for t in 1..prices.ncols() {
                let ret = (&prices.column(t) / &prices.column(t - 1)).mapv(f64::ln);
                x.column_mut(t).assign(&ret);
            }
            x
        }
    };
    StateSeries { values, kind }
}

pub fn price_increments(paths: &PathSet, r: f64) -> Increments {
    let growth = (r * paths.dt).exp();
    let n_steps = paths.n_steps();
    let mut delta_s = Array2::zeros((paths.n_paths(), n_steps));
    for t in 0..n_steps {
        let inc = &paths.prices.column(t + 1) - &(&paths.prices.column(t) * growth);
        delta_s.column_mut(t).assign(&inc);
    }
    let mut delta_s_hat = delta_s.clone();
    for mut col in delta_s_hat.axis_iter_mut(Axis(1)) {
        let mean = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - mean);
    }
    Increments {
        delta_s,
        delta_s_hat,
    }
}

/// Writes paths as CSV: a `# key=value,...` metadata line, a `t0..tN` header,
/// then one path per row.
pub fn write_paths(paths: &PathSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| QlbsError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let p = &paths.params;
    writeln!(
        out,
        "# dt={},mu={},sigma={},r={},seed={}",
        paths.dt, p.mu, p.sigma, p.r, p.seed
    )
    .map_err(|e| QlbsError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(out);
    let header: Vec<String> = (0..=paths.n_steps()).map(|t| format!("t{t}")).collect();
    writer
        .write_record(&header)
        .map_err(|e| QlbsError::csv(path, e))?;
    for row in paths.prices.rows() {
        // `{}` on f64 is the shortest round-trip representation.
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| QlbsError::csv(path, e))?;
    }
    writer.flush().map_err(|e| QlbsError::io(path, e))?;
    Ok(())
}

/// Reads a path table written by [`write_paths`] (or by hand). `dt` comes from
/// the metadata line; `dt_override` wins when given.
pub fn load_paths(path: &Path, dt_override: Option<f64>) -> Result<PathSet> {
    let file = File::open(path).map_err(|e| QlbsError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| QlbsError::io(path, e))?;

    let mut meta = PathMeta::default();
    let body: Box<dyn std::io::Read> = if let Some(rest) = first.trim().strip_prefix('#') {
        meta = PathMeta::parse(rest)?;
        Box::new(reader)
    } else {
        Box::new(std::io::Read::chain(
            std::io::Cursor::new(first.into_bytes()),
            reader,
        ))
    };

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(body);
    let mut flat = Vec::new();
    let mut width = None;
    for (i, record) in csv_reader.records().enumerate() {
        let record = record.map_err(|e| QlbsError::csv(path, e))?;
        let row: Vec<f64> = record
            .iter()
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    QlbsError::MalformedTable(format!("row {i}: cannot parse `{field}`"))
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(QlbsError::MalformedTable(format!(
                    "ragged rows: row {i} has {} columns, expected {w}",
                    row.len()
                )))
            }
            _ => {}
        }
        flat.extend(row);
    }
    let width = width.ok_or_else(|| QlbsError::MalformedTable("no data rows".into()))?;
    let n_paths = flat.len() / width;
    let prices = Array2::from_shape_vec((n_paths, width), flat)
        .expect("rectangularity checked while reading");

    let dt = dt_override.or(meta.dt).ok_or_else(|| {
        QlbsError::MalformedTable("dt missing: no metadata row and no override".into())
    })?;
    let mut set = PathSet::from_prices(prices, dt, meta.mu, meta.sigma, meta.r)?;
    set.params.seed = meta.seed;
    Ok(set)
}

#[derive(Debug, Default)]
struct PathMeta {
    dt: Option<f64>,
    mu: f64,
    sigma: f64,
    r: f64,
    seed: u64,
}

impl PathMeta {
    fn parse(line: &str) -> Result<Self> {
        let mut meta = PathMeta::default();
        for pair in line.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| QlbsError::MalformedTable(format!("bad metadata entry `{pair}`")))?;
            let bad = || QlbsError::MalformedTable(format!("bad metadata value `{pair}`"));
            match key.trim() {
                "dt" => meta.dt = Some(value.trim().parse().map_err(|_| bad())?),
                "mu" => meta.mu = value.trim().parse().map_err(|_| bad())?,
                "sigma" => meta.sigma = value.trim().parse().map_err(|_| bad())?,
                "r" => meta.r = value.trim().parse().map_err(|_| bad())?,
                "seed" => meta.seed = value.trim().parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        Ok(meta)
    }
}
