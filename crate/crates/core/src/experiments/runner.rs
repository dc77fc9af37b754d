use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic_bsm::bsm_put;
use crate::basis::BasisSpec;
use crate::error::Result;
use crate::market_sim::{compute_states, simulate_gbm, PathSet, StateKind};
use crate::qlbs_dp::{build_features, solve_with_features, RiskParams};
use crate::qlbs_fqi::{build_offline_dataset, perturb_actions, run_fqi};

use super::config::{expand_cells, Cell, ScenarioConfig, ScenarioKind};
use super::wealth::{mean_median, terminal_wealth};

/// One (cell, state, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: usize,
    pub state: StateKind,
    pub seed: u64,
    #[serde(flatten)]
    pub params: Cell,
    pub bsm_price: f64,
    pub bsm_delta: f64,
    pub dp_price: Option<f64>,
    pub dp_hedge_t0: Option<f64>,
    pub fqi_price: Option<f64>,
    pub tw_mean: Option<f64>,
    pub tw_median: Option<f64>,
    pub dp_ms: Option<f64>,
    pub fqi_ms: Option<f64>,
    /// Hash of [`ScenarioConfig::for_cell`] plus the state; identifies the
    /// configuration that reproduces this row.
    pub config_hash: String,
    pub knots: Vec<f64>,
    pub error: Option<String>,
}

/// Seed average of one (cell, state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: usize,
    pub state: StateKind,
    #[serde(flatten)]
    pub params: Cell,
    pub n_ok: usize,
    pub n_failed: usize,
    pub bsm_price: f64,
    pub bsm_delta: f64,
    pub dp_price: Option<f64>,
    pub dp_price_stderr: Option<f64>,
    pub dp_hedge_t0: Option<f64>,
    pub fqi_price: Option<f64>,
    pub tw_mean: Option<f64>,
    pub tw_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl ScenarioResult {
    pub fn n_failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn summary_for(&self, cell: usize, state: StateKind) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.cell == cell && s.state == state)
    }
}

impl ScenarioConfig {
    /// Single-cell, single-seed configuration that reruns one row.
    pub fn for_cell(&self, cell: &Cell, seed: u64) -> ScenarioConfig {
        let mut cfg = self.clone();
        cfg.scenario = ScenarioKind::Single;
        cfg.market = cell.market(&self.market, seed);
        cfg.noise = cell.noise;
        cfg.strike = cell.strike;
        cfg.lambda = cell.lambda;
        cfg.n_basis = cell.n_basis;
        cfg.spline_order = cell.spline_order;
        cfg.sweep.cost_rates = cell.cost_rate.into_iter().collect();
        cfg.n_seeds = 1;
        cfg.output = None;
        cfg
    }
}

fn config_hash(cfg: &ScenarioConfig, state: StateKind) -> String {
    let json = serde_json::to_string(&(cfg, state)).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct StateOutcome {
    dp_price: f64,
    dp_hedge_t0: f64,
    fqi_price: Option<f64>,
    tw: Option<(f64, f64)>,
    dp_ms: f64,
    fqi_ms: Option<f64>,
    knots: Vec<f64>,
}

fn run_state(
    cfg: &ScenarioConfig,
    cell: &Cell,
    paths: &PathSet,
    state: StateKind,
    seed: u64,
) -> Result<StateOutcome> {
    let risk = RiskParams::new(cell.lambda, cfg.pure_risk, paths.params.r, paths.dt)?;
    let states = compute_states(paths, state);
    let spec = BasisSpec::for_states(&states, cell.n_basis, cell.spline_order)?;
    let clock = Instant::now();
    let features = build_features(&states, &spec);
    let dp = solve_with_features(paths, &features, cell.strike, &risk, cfg.ridge)?;
    let dp_ms = clock.elapsed().as_secs_f64() * 1e3;

    let (fqi_price, fqi_ms) = if cfg.run_fqi {
        let clock = Instant::now();
        let noisy = perturb_actions(dp.hedges.view(), cell.noise, seed)?;
        let dataset = build_offline_dataset(paths, state, noisy.view(), cell.strike, &risk)?;
        let fqi = run_fqi(&dataset, &spec, risk.gamma, cfg.ridge, cfg.action_rule)?;
        (
            Some(fqi.price_t0),
            Some(clock.elapsed().as_secs_f64() * 1e3),
        )
    } else {
        (None, None)
    };

    let tw = match cell.cost_rate {
        Some(c) => {
            let tw = terminal_wealth(
                paths,
                dp.hedges.view(),
                cell.strike,
                c,
                dp.price_t0,
                cfg.wealth_formula,
            )?;
            Some(mean_median(tw.as_slice().expect("contiguous")))
        }
        None => None,
    };
    Ok(StateOutcome {
        dp_price: dp.price_t0,
        dp_hedge_t0: dp.hedge_t0,
        fqi_price,
        tw,
        dp_ms,
        fqi_ms,
        knots: spec.knots,
    })
}

fn run_job(cfg: &ScenarioConfig, cell_idx: usize, cell: &Cell, seed: u64) -> Vec<ResultRow> {
    let market = cell.market(&cfg.market, seed);
    let bsm = bsm_put(
        market.s0,
        cell.strike,
        market.r,
        market.sigma,
        market.maturity,
    );
    let cell_cfg = cfg.for_cell(cell, seed);
    let paths = simulate_gbm(&market);
    cfg.state_kinds
        .iter()
        .map(|&state| {
            let mut row = ResultRow {
                cell: cell_idx,
                state,
                seed,
                params: *cell,
                bsm_price: bsm.price,
                bsm_delta: bsm.delta,
                dp_price: None,
                dp_hedge_t0: None,
                fqi_price: None,
                tw_mean: None,
                tw_median: None,
                dp_ms: None,
                fqi_ms: None,
                config_hash: config_hash(&cell_cfg, state),
                knots: Vec::new(),
                error: None,
            };
            let outcome = paths
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|p| run_state(cfg, cell, p, state, seed).map_err(|e| e.to_string()));
            match outcome {
                Ok(o) => {
                    row.dp_price = Some(o.dp_price);
                    row.dp_hedge_t0 = Some(o.dp_hedge_t0);
                    row.fqi_price = o.fqi_price;
                    row.tw_mean = o.tw.map(|t| t.0);
                    row.tw_median = o.tw.map(|t| t.1);
                    row.dp_ms = Some(o.dp_ms);
                    row.fqi_ms = o.fqi_ms;
                    row.knots = o.knots;
                }
                Err(e) => {
                    warn!(
                        "cell {cell_idx} state {} seed {seed} failed: {e}",
                        state.label()
                    );
                    row.error = Some(e);
                }
            }
            row
        })
        .collect()
}

fn average(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(cfg: &ScenarioConfig, cells: &[Cell], rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        for &state in &cfg.state_kinds {
            let group: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.cell == ci && r.state == state)
                .collect();
            let ok: Vec<&&ResultRow> = group.iter().filter(|r| r.error.is_none()).collect();
            let dp_prices: Vec<f64> = ok.iter().filter_map(|r| r.dp_price).collect();
            let stderr = (dp_prices.len() > 1).then(|| {
                let n = dp_prices.len() as f64;
                let m = dp_prices.iter().sum::<f64>() / n;
                let var = dp_prices.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            });
            out.push(SummaryRow {
                cell: ci,
                state,
                params: *cell,
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                bsm_price: group.first().map_or(f64::NAN, |r| r.bsm_price),
                bsm_delta: group.first().map_or(f64::NAN, |r| r.bsm_delta),
                dp_price: average(ok.iter().map(|r| r.dp_price)),
                dp_price_stderr: stderr,
                dp_hedge_t0: average(ok.iter().map(|r| r.dp_hedge_t0)),
                fqi_price: average(ok.iter().map(|r| r.fqi_price)),
                tw_mean: average(ok.iter().map(|r| r.tw_mean)),
                tw_median: average(ok.iter().map(|r| r.tw_median)),
            });
        }
    }
    out
}

/// Runs every (cell, seed) job in parallel. Failures are recorded in the
/// affected rows and never abort the sweep.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let cells = expand_cells(cfg);
    let seeds = cfg.seeds();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    info!(
        "{}: {} cells x {} seeds x {} states",
        cfg.scenario.name(),
        cells.len(),
        seeds.len(),
        cfg.state_kinds.len()
    );
    let mut rows: Vec<ResultRow> = jobs
        .par_iter()
        .flat_map_iter(|&(c, seed)| run_job(cfg, c, &cells[c], seed))
        .collect();
    let state_pos = |s: StateKind| cfg.state_kinds.iter().position(|&k| k == s);
    rows.sort_by_key(|r| (r.cell, state_pos(r.state), r.seed));
    let summary = summarize(cfg, &cells, &rows);
    Ok(ScenarioResult {
        config: cfg.clone(),
        rows,
        summary,
    })
}
