use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QlbsError, Result};

use super::runner::{ResultRow, ScenarioResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

pub const CSV_COLUMNS: [&str; 23] = [
    "cell",
    "state",
    "seed",
    "sigma",
    "n_paths",
    "n_steps",
    "noise",
    "strike",
    "lambda",
    "cost_rate",
    "n_basis",
    "spline_order",
    "bsm_price",
    "bsm_delta",
    "dp_price",
    "dp_hedge_t0",
    "fqi_price",
    "tw_mean",
    "tw_median",
    "dp_ms",
    "fqi_ms",
    "config_hash",
    "error",
];

/// Six significant digits, without exponent notation for ordinary magnitudes.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..15).contains(&mag) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

fn csv_fields(r: &ResultRow) -> Vec<String> {
    let p = &r.params;
    vec![
        r.cell.to_string(),
        r.state.label().to_string(),
        r.seed.to_string(),
        sig6(p.sigma),
        p.n_paths.to_string(),
        p.n_steps.to_string(),
        sig6(p.noise),
        sig6(p.strike),
        sig6(p.lambda),
        opt(p.cost_rate),
        p.n_basis.to_string(),
        p.spline_order.to_string(),
        sig6(r.bsm_price),
        sig6(r.bsm_delta),
        opt(r.dp_price),
        opt(r.dp_hedge_t0),
        opt(r.fqi_price),
        opt(r.tw_mean),
        opt(r.tw_median),
        opt(r.dp_ms),
        opt(r.fqi_ms),
        r.config_hash.clone(),
        r.error.clone().unwrap_or_default(),
    ]
}

/// Writes the per-seed rows. CSV starts with a `#` header block echoing the
/// configuration, the seeds and every knot vector; JSON holds the full
/// result including the seed-averaged summary.
pub fn emit_report(result: &ScenarioResult, path: &Path, format: ReportFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| QlbsError::io(dir, e))?;
    }
    match format {
        ReportFormat::Json => {
            let file = File::create(path).map_err(|e| QlbsError::io(path, e))?;
            serde_json::to_writer_pretty(BufWriter::new(file), result)
                .map_err(|e| QlbsError::json(path, e))
        }
        ReportFormat::Csv => write_csv(result, path),
    }
}

fn write_csv(result: &ScenarioResult, path: &Path) -> Result<()> {
    let io = |e| QlbsError::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let cfg = &result.config;
    writeln!(out, "# scenario={}", cfg.scenario.name()).map_err(io)?;
    writeln!(
        out,
        "# config={}",
        serde_json::to_string(cfg).expect("config serializes")
    )
    .map_err(io)?;
    let seeds: Vec<String> = cfg.seeds().iter().map(u64::to_string).collect();
    writeln!(out, "# seeds={}", seeds.join(";")).map_err(io)?;
    for r in &result.rows {
        let knots: Vec<String> = r.knots.iter().map(f64::to_string).collect();
        writeln!(
            out,
            "# knots[cell={},state={},seed={}]={}",
            r.cell,
            r.state.label(),
            r.seed,
            knots.join(";")
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)?;

    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)
        .map_err(|e| QlbsError::csv(path, e))?;
    for r in &result.rows {
        w.write_record(csv_fields(r))
            .map_err(|e| QlbsError::csv(path, e))?;
    }
    w.flush().map_err(io)
}

pub fn load_json_report(path: &Path) -> Result<ScenarioResult> {
    let text = std::fs::read_to_string(path).map_err(|e| QlbsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| QlbsError::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run_scenario, ScenarioConfig, ScenarioKind};
    use crate::market_sim::MarketParams;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(4.529571), "4.52957");
        assert_eq!(sig6(-0.3910348), "-0.391035");
        assert_eq!(sig6(12345678.9), "12345679");
        assert_eq!(sig6(100.0), "100");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(0.0), "0");
    }

    fn tiny() -> ScenarioResult {
        let mut cfg = ScenarioConfig::for_scenario(ScenarioKind::Single);
        cfg.market = MarketParams {
            n_paths: 200,
            n_steps: 4,
            ..MarketParams::default()
        };
        cfg.n_basis = 5;
        run_scenario(&cfg).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let res = tiny();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("r.json");
        emit_report(&res, &file, ReportFormat::Json).unwrap();
        assert_eq!(load_json_report(&file).unwrap(), res);
    }

    #[test]
    fn csv_layout() {
        let res = tiny();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("nested/r.csv");
        emit_report(&res, &file, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body[0], CSV_COLUMNS.join(","));
        assert_eq!(body.len(), 1 + res.rows.len());
        assert!(text.contains("# knots[cell=0,state=X,seed=42]="));
        assert!(text.lines().any(|l| l.starts_with("# config={")));
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut res = tiny();
        res.rows.clear();
        res.summary.clear();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("e.csv");
        emit_report(&res, &file, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, vec![CSV_COLUMNS.join(",")]);
    }
}
