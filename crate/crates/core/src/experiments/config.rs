use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QlbsError, Result};
use crate::market_sim::{MarketParams, StateKind};
use crate::numerics::Regularizer;
use crate::qlbs_fqi::ActionRule;

use super::wealth::WealthFormula;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    VolSweep,
    NoiseGrid,
    HedgeFrequency,
    Moneyness,
    TransactionCosts,
    BasisSensitivity,
    Single,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::VolSweep,
        ScenarioKind::NoiseGrid,
        ScenarioKind::HedgeFrequency,
        ScenarioKind::Moneyness,
        ScenarioKind::TransactionCosts,
        ScenarioKind::BasisSensitivity,
        ScenarioKind::Single,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::VolSweep => "vol-sweep",
            ScenarioKind::NoiseGrid => "noise-grid",
            ScenarioKind::HedgeFrequency => "hedge-frequency",
            ScenarioKind::Moneyness => "moneyness",
            ScenarioKind::TransactionCosts => "transaction-costs",
            ScenarioKind::BasisSensitivity => "basis-sensitivity",
            ScenarioKind::Single => "single",
        }
    }

    pub fn from_name(name: &str) -> Option<ScenarioKind> {
        let norm = name.replace('_', "-").to_ascii_lowercase();
        ScenarioKind::ALL.into_iter().find(|k| k.name() == norm)
    }
}

/// Values swept by a scenario. Only the lists relevant to the scenario are
/// read; the rest keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepValues {
    pub volatilities: Vec<f64>,
    pub n_paths: Vec<usize>,
    pub noises: Vec<f64>,
    pub n_steps: Vec<usize>,
    pub strikes: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub cost_rates: Vec<f64>,
    pub n_basis: Vec<usize>,
    pub orders: Vec<usize>,
}

impl Default for SweepValues {
    fn default() -> Self {
        SweepValues {
            volatilities: vec![0.15, 0.25, 0.40],
            n_paths: vec![100, 1000, 5000, 10_000],
            noises: vec![0.4, 0.8],
            // weekly, bi-weekly, monthly, semi-annual over one year
            n_steps: vec![52, 26, 12, 2],
            strikes: (0..17).map(|i| 60.0 + 5.0 * i as f64).collect(),
            lambdas: vec![1e-4, 1e-3],
            cost_rates: vec![0.01],
            n_basis: vec![15, 20, 50, 100],
            orders: vec![1, 3, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub market: MarketParams,
    pub strike: f64,
    pub lambda: f64,
    pub pure_risk: bool,
    pub n_basis: usize,
    pub spline_order: usize,
    pub state_kinds: Vec<StateKind>,
    pub noise: f64,
    pub ridge: Regularizer,
    /// Also run fitted Q iteration on a perturbed-action dataset.
    pub run_fqi: bool,
    pub action_rule: ActionRule,
    pub wealth_formula: WealthFormula,
    pub sweep: SweepValues,
    /// Seeds are `market.seed, market.seed + 1, ...`.
    pub n_seeds: usize,
    pub output: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::Single,
            market: MarketParams::default(),
            strike: 100.0,
            lambda: 1e-4,
            pure_risk: true,
            n_basis: 12,
            spline_order: 4,
            state_kinds: vec![
                StateKind::DriftAdjusted,
                StateKind::Price,
                StateKind::LogReturn,
            ],
            noise: 0.2,
            ridge: Regularizer::default(),
            run_fqi: true,
            action_rule: ActionRule::default(),
            wealth_formula: WealthFormula::default(),
            sweep: SweepValues::default(),
            n_seeds: 5,
            output: None,
        }
    }
}

impl ScenarioConfig {
    /// Defaults for a named study.
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        let mut cfg = ScenarioConfig {
            scenario: kind,
            ..ScenarioConfig::default()
        };
        match kind {
            ScenarioKind::NoiseGrid => {
                cfg.market.sigma = 0.2;
            }
            ScenarioKind::Moneyness | ScenarioKind::BasisSensitivity => {
                cfg.run_fqi = false;
            }
            ScenarioKind::TransactionCosts => {
                cfg.run_fqi = false;
                cfg.lambda = 0.002;
            }
            ScenarioKind::Single => {
                cfg.n_seeds = 1;
            }
            ScenarioKind::VolSweep | ScenarioKind::HedgeFrequency => {}
        }
        cfg
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QlbsError::io(path, e))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| QlbsError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        if self.n_seeds < 1 {
            return Err(QlbsError::invalid("n_seeds", "must be >= 1"));
        }
        if self.state_kinds.is_empty() {
            return Err(QlbsError::invalid("state_kinds", "must not be empty"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.strike > 0.0) {
            return Err(QlbsError::invalid("strike", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(QlbsError::invalid("noise", "must be in [0, 1]"));
        }
        if self.n_basis < self.spline_order || self.spline_order < 1 {
            return Err(QlbsError::invalid(
                "n_basis",
                "need n_basis >= spline_order >= 1",
            ));
        }
        let s = &self.sweep;
        let empty = match self.scenario {
            ScenarioKind::VolSweep => s.volatilities.is_empty(),
            ScenarioKind::NoiseGrid => s.n_paths.is_empty() || s.noises.is_empty(),
            ScenarioKind::HedgeFrequency => s.n_steps.is_empty(),
            ScenarioKind::Moneyness => s.strikes.is_empty() || s.lambdas.is_empty(),
            ScenarioKind::TransactionCosts => s.cost_rates.is_empty(),
            ScenarioKind::BasisSensitivity => s.n_basis.is_empty() || s.orders.is_empty(),
            ScenarioKind::Single => false,
        };
        if empty {
            return Err(QlbsError::invalid(
                "sweep",
                format!("no sweep values for {}", self.scenario.name()),
            ));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64)
            .map(|i| self.market.seed.wrapping_add(i))
            .collect()
    }
}

/// Parameters of one sweep cell after applying its overrides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sigma: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub noise: f64,
    pub strike: f64,
    pub lambda: f64,
    pub cost_rate: Option<f64>,
    pub n_basis: usize,
    pub spline_order: usize,
}

impl Cell {
    /// Path-defining part of a cell: cells that agree here can share paths.
    pub(crate) fn market(&self, base: &MarketParams, seed: u64) -> MarketParams {
        MarketParams {
            sigma: self.sigma,
            n_paths: self.n_paths,
            n_steps: self.n_steps,
            seed,
            ..*base
        }
    }
}

/// Expands the sweep of `cfg` into cells, in report order.
pub fn expand_cells(cfg: &ScenarioConfig) -> Vec<Cell> {
    let base = Cell {
        sigma: cfg.market.sigma,
        n_paths: cfg.market.n_paths,
        n_steps: cfg.market.n_steps,
        noise: cfg.noise,
        strike: cfg.strike,
        lambda: cfg.lambda,
        cost_rate: None,
        n_basis: cfg.n_basis,
        spline_order: cfg.spline_order,
    };
    let s = &cfg.sweep;
    match cfg.scenario {
        ScenarioKind::Single => vec![base],
        ScenarioKind::VolSweep => s
            .volatilities
            .iter()
            .map(|&sigma| Cell { sigma, ..base })
            .collect(),
        ScenarioKind::NoiseGrid => s
            .noises
            .iter()
            .flat_map(|&noise| {
                s.n_paths.iter().map(move |&n_paths| Cell {
                    noise,
                    n_paths,
                    ..base
                })
            })
            .collect(),
        ScenarioKind::HedgeFrequency => s
            .n_steps
            .iter()
            .map(|&n_steps| Cell { n_steps, ..base })
            .collect(),
        ScenarioKind::Moneyness => s
            .lambdas
            .iter()
            .flat_map(|&lambda| {
                s.strikes.iter().map(move |&strike| Cell {
                    strike,
                    lambda,
                    ..base
                })
            })
            .collect(),
        ScenarioKind::TransactionCosts => s
            .cost_rates
            .iter()
            .map(|&c| Cell {
                cost_rate: Some(c),
                ..base
            })
            .collect(),
        ScenarioKind::BasisSensitivity => s
            .orders
            .iter()
            .flat_map(|&spline_order| {
                s.n_basis.iter().map(move |&n_basis| Cell {
                    n_basis,
                    spline_order,
                    ..base
                })
            })
            .collect(),
    }
}
