//! Scenario runner for the pricing studies: volatility, noise, hedging
//! frequency, moneyness, transaction costs and basis sensitivity.

mod config;
mod report;
mod runner;
mod wealth;

pub use config::{expand_cells, Cell, ScenarioConfig, ScenarioKind, SweepValues};
pub use report::{emit_report, load_json_report, sig6, ReportFormat, CSV_COLUMNS};
pub use runner::{run_scenario, ResultRow, ScenarioResult, SummaryRow};
pub use wealth::{mean_median, terminal_wealth, TerminalWealthReport, WealthFormula};
