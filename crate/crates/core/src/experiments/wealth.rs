//! Option writer's terminal wealth from the hedging cash flows, with
//! proportional transaction costs. Cash is not accrued at the risk-free rate.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{QlbsError, Result};
use crate::market_sim::{PathSet, StateKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WealthFormula {
    /// Cost charged on the trade actually executed at each date, in shares
    /// times price.
    #[default]
    Corrected,
    /// Cost term with the forward index `|a_{t+1} - a_t|` and the opening
    /// cost `c |S_0 - a_0|`, exactly as printed.
    PaperLiteral,
}

/// Per-path terminal wealth, premium included.
pub fn terminal_wealth(
    paths: &PathSet,
    hedges: ArrayView2<'_, f64>,
    strike: f64,
    cost_rate: f64,
    premium: f64,
    formula: WealthFormula,
) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&cost_rate) {
        return Err(QlbsError::invalid(
            "cost_rate",
            format!("must be in [0, 1), got {cost_rate}"),
        ));
    }
    let (k, cols) = paths.prices.dim();
    if hedges.dim() != (k, cols) {
        return Err(QlbsError::ShapeMismatch(format!(
            "hedges {:?} vs paths {:?}",
            hedges.dim(),
            (k, cols)
        )));
    }
    let n = cols - 1;
    let s = &paths.prices;
    let a = hedges;
    let c = cost_rate;
    let mut tw = Array1::from_elem(k, premium);
    for i in 0..k {
        let mut w = match formula {
            WealthFormula::Corrected => -s[[i, 0]] * a[[i, 0]] - c * a[[i, 0]].abs() * s[[i, 0]],
            WealthFormula::PaperLiteral => {
                -s[[i, 0]] * a[[i, 0]] - c * (s[[i, 0]] - a[[i, 0]]).abs()
            }
        };
        for t in 1..n {
            let trade = match formula {
                WealthFormula::Corrected => a[[i, t]] - a[[i, t - 1]],
                WealthFormula::PaperLiteral => a[[i, t + 1]] - a[[i, t]],
            };
            w += s[[i, t]] * (a[[i, t - 1]] - a[[i, t]]) - c * trade.abs() * s[[i, t]];
        }
        w += s[[i, n]] * (a[[i, n - 1]] - a[[i, n]]) - (strike - s[[i, n]]).max(0.0);
        tw[i] += w;
    }
    Ok(tw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalWealthReport {
    pub per_path: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub state_kind: StateKind,
    pub cost_rate: f64,
}

impl TerminalWealthReport {
    pub fn new(per_path: Array1<f64>, state_kind: StateKind, cost_rate: f64) -> Self {
        let per_path = per_path.to_vec();
        let (mean, median) = mean_median(&per_path);
        TerminalWealthReport {
            per_path,
            mean,
            median,
            state_kind,
            cost_rate,
        }
    }
}

pub fn mean_median(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[m - 1] + sorted[m])
    } else {
        sorted[m]
    };
    (mean, median)
}
