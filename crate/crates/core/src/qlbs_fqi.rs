//! Model-free QLBS via fitted Q iteration on an offline dataset.
//!
//! The dataset is generated by perturbing the optimal hedges multiplicatively
//! and re-rolling the replicating portfolio with the perturbed actions. The
//! Q-function is quadratic in the action with state-dependent coefficients,
//! `Q(x, a) = Psi(x, a) . vec(W)` with `Psi = [Phi, a Phi, a^2/2 Phi]`, and is
//! fitted backwards one step at a time.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, FeatureMatrix};
use crate::error::{QlbsError, Result};
use crate::market_sim::{compute_states, price_increments, PathSet, StateKind};
use crate::numerics::{cross_sectional_stats, ridge_solve, Regularizer, RidgeProblem};
use crate::qlbs_dp::{build_features, compute_rewards, rollback_portfolio, RiskParams};

/// Keeps the action noise stream disjoint from the path simulation stream
/// when both are driven by the same user seed.
const NOISE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Multiplies every action by an independent `U(1 - eta, 1 + eta)` draw.
pub fn perturb_actions(actions: ArrayView2<'_, f64>, eta: f64, seed: u64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(QlbsError::invalid(
            "eta",
            format!("must be in [0, 1], got {eta}"),
        ));
    }
    let mut out = actions.to_owned();
    if eta == 0.0 {
        return Ok(out);
    }
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SEED_SALT);
        rng.set_stream(k as u64);
        for a in row.iter_mut() {
            *a *= rng.random_range(1.0 - eta..=1.0 + eta);
        }
    }
    Ok(out)
}

/// Transitions `(X_t, a_t, R_t, X_{t+1})` laid out as `K x (T+1)` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub state_kind: StateKind,
    pub states: Array2<f64>,
    /// Last column is zero: no hedge at maturity.
    pub actions: Array2<f64>,
    /// Last column holds the terminal variance penalty.
    pub rewards: Array2<f64>,
    /// Option payoff at maturity, per path.
    pub payoff: Array1<f64>,
}

impl OfflineDataset {
    pub fn n_paths(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.states.ncols() - 1
    }

    fn validate(&self) -> Result<()> {
        let shape = self.states.dim();
        if shape.1 < 2 || shape.0 == 0 {
            return Err(QlbsError::MalformedDataset(format!(
                "need >= 1 path and >= 1 step, got {shape:?}"
            )));
        }
        if self.actions.dim() != shape
            || self.rewards.dim() != shape
            || self.payoff.len() != shape.0
        {
            return Err(QlbsError::MalformedDataset(format!(
                "inconsistent shapes: states {shape:?}, actions {:?}, rewards {:?}, payoff {}",
                self.actions.dim(),
                self.rewards.dim(),
                self.payoff.len()
            )));
        }
        Ok(())
    }

    /// One row per `(t, k)`; `next_state` is empty at maturity and `payoff`
    /// is filled only there.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| QlbsError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| QlbsError::io(path, e);
        writeln!(w, "# state_kind={}", self.state_kind.label()).map_err(io)?;
        writeln!(w, "t,k,state,action,reward,next_state,payoff").map_err(io)?;
        let n = self.n_steps();
        for t in 0..=n {
            for k in 0..self.n_paths() {
                let (next, payoff) = if t < n {
                    (self.states[[k, t + 1]].to_string(), String::new())
                } else {
                    (String::new(), self.payoff[k].to_string())
                };
                writeln!(
                    w,
                    "{t},{k},{},{},{},{next},{payoff}",
                    self.states[[k, t]],
                    self.actions[[k, t]],
                    self.rewards[[k, t]]
                )
                .map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QlbsError::io(path, e))?;
        let mut state_kind = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for pair in meta.split(',') {
                    if let Some(("state_kind", v)) = pair.trim().split_once('=') {
                        state_kind = StateKind::from_label(v.trim());
                    }
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.starts_with('t') {
                    continue;
                }
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(QlbsError::MalformedDataset(format!(
                    "line {}: expected 7 fields, got {}",
                    i + 1,
                    fields.len()
                )));
            }
            let num = |j: usize| -> Result<Option<f64>> {
                let f = fields[j].trim();
                if f.is_empty() {
                    return Ok(None);
                }
                f.parse::<f64>().map(Some).map_err(|_| {
                    QlbsError::MalformedDataset(format!("line {}: cannot parse `{f}`", i + 1))
                })
            };
            let idx = |j: usize| -> Result<usize> {
                fields[j].trim().parse::<usize>().map_err(|_| {
                    QlbsError::MalformedDataset(format!(
                        "line {}: bad index `{}`",
                        i + 1,
                        fields[j]
                    ))
                })
            };
            rows.push((idx(0)?, idx(1)?, num(2)?, num(3)?, num(4)?, num(6)?));
        }
        let n_t = rows.iter().map(|r| r.0).max().map(|m| m + 1).unwrap_or(0);
        let n_k = rows.iter().map(|r| r.1).max().map(|m| m + 1).unwrap_or(0);
        if n_t < 2 || rows.len() != n_t * n_k {
            return Err(QlbsError::MalformedDataset(format!(
                "{} rows do not form a complete {n_k} x {n_t} grid",
                rows.len()
            )));
        }
        let mut states = Array2::from_elem((n_k, n_t), f64::NAN);
        let mut actions = states.clone();
        let mut rewards = states.clone();
        let mut payoff = Array1::from_elem(n_k, f64::NAN);
        for (t, k, x, a, r, p) in rows {
            let missing =
                |name: &str| QlbsError::MalformedDataset(format!("t={t}, k={k}: missing {name}"));
            states[[k, t]] = x.ok_or_else(|| missing("state"))?;
            actions[[k, t]] = a.ok_or_else(|| missing("action"))?;
            rewards[[k, t]] = r.ok_or_else(|| missing("reward"))?;
            if t == n_t - 1 {
                payoff[k] = p.ok_or_else(|| missing("payoff"))?;
            }
        }
        if states.iter().any(|v| v.is_nan()) {
            return Err(QlbsError::MalformedDataset("duplicate (t, k) rows".into()));
        }
        let ds = OfflineDataset {
            state_kind: state_kind.unwrap_or(StateKind::DriftAdjusted),
            states,
            actions,
            rewards,
            payoff,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Rolls the portfolio back under the given (typically perturbed) actions
/// and records the resulting one-step rewards.
pub fn build_offline_dataset(
    paths: &PathSet,
    state_kind: StateKind,
    actions: ArrayView2<'_, f64>,
    strike: f64,
    risk: &RiskParams,
) -> Result<OfflineDataset> {
    risk.validate()?;
    let (k, cols) = paths.prices.dim();
    if actions.dim() != (k, cols) {
        return Err(QlbsError::ShapeMismatch(format!(
            "actions {:?} vs paths {:?}",
            actions.dim(),
            (k, cols)
        )));
    }
    let n = cols - 1;
    let inc = price_increments(paths, paths.params.r);
    let payoff = paths.terminal().mapv(|s| (strike - s).max(0.0));

    let mut actions = actions.to_owned();
    actions.column_mut(n).fill(0.0);
    let mut rewards = Array2::zeros((k, cols));
    rewards
        .column_mut(n)
        .fill(-risk.lambda * cross_sectional_stats(payoff.view()).variance);
    let mut pi_next = payoff.clone();
    for t in (0..n).rev() {
        let pi = rollback_portfolio(
            pi_next.view(),
            actions.column(t),
            inc.delta_s.column(t),
            risk.gamma,
        );
        rewards.column_mut(t).assign(&compute_rewards(
            pi_next.view(),
            pi.view(),
            risk.gamma,
            risk.lambda,
        ));
        pi_next = pi;
    }
    Ok(OfflineDataset {
        state_kind,
        states: compute_states(paths, state_kind).values,
        actions,
        rewards,
        payoff,
    })
}

/// `[Phi, a Phi, a^2/2 Phi]`, `K x 3N`.
pub fn psi_features(features: &FeatureMatrix, actions: ArrayView1<'_, f64>) -> Array2<f64> {
    let (k, n) = features.values.dim();
    let mut psi = Array2::zeros((k, 3 * n));
    for (i, (phi, &a)) in features
        .values
        .rows()
        .into_iter()
        .zip(actions.iter())
        .enumerate()
    {
        let mut row = psi.row_mut(i);
        row.slice_mut(s![..n]).assign(&phi);
        row.slice_mut(s![n..2 * n]).assign(&(&phi * a));
        row.slice_mut(s![2 * n..]).assign(&(&phi * (0.5 * a * a)));
    }
    psi
}

/// Quadratic-in-action coefficients, `3 x N`. Rows multiply `1`, `a` and
/// `a^2/2` respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WMatrix {
    pub values: Array2<f64>,
}

impl WMatrix {
    /// From the row-major stacking used by [`psi_features`].
    pub fn from_flat(flat: Array1<f64>) -> Result<Self> {
        if !flat.len().is_multiple_of(3) || flat.is_empty() {
            return Err(QlbsError::ShapeMismatch(format!(
                "W needs 3N entries, got {}",
                flat.len()
            )));
        }
        let n = flat.len() / 3;
        let values = flat.into_shape_with_order((3, n)).expect("length checked");
        Ok(WMatrix { values })
    }

    /// `U = W Phi(x)`.
    pub fn coefficients(&self, phi_x: ArrayView1<'_, f64>) -> [f64; 3] {
        let u = self.values.dot(&phi_x);
        [u[0], u[1], u[2]]
    }

    pub fn q_value(&self, phi_x: ArrayView1<'_, f64>, action: f64) -> f64 {
        let [u1, u2, u3] = self.coefficients(phi_x);
        u1 + action * u2 + 0.5 * action * action * u3
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyAction {
    pub action: f64,
    pub value: f64,
    /// Whether the fitted Q was strictly concave in the action here.
    pub concave: bool,
}

/// Maximizer `-u2/u3` of the fitted quadratic. When the fit is not concave
/// the maximizer does not exist and `fallback` is used instead.
pub fn greedy_action(w: &WMatrix, phi_x: ArrayView1<'_, f64>, fallback: f64) -> GreedyAction {
    let [u1, u2, u3] = w.coefficients(phi_x);
    let concave = u3 < 0.0;
    let action = if concave { -u2 / u3 } else { fallback };
    GreedyAction {
        action,
        value: u1 + action * u2 + 0.5 * action * action * u3,
        concave,
    }
}

/// Which action the fitted `Q_{t}` is evaluated at when forming the
/// previous step's target and the price.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRule {
    /// The recorded action. Stable: the target never extrapolates beyond
    /// the actions seen in the data.
    #[default]
    Observed,
    /// The analytic maximizer, falling back to the recorded action when the
    /// fit is not concave.
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqiStep {
    pub w: WMatrix,
    pub q_values: Array1<f64>,
    pub actions: Array1<f64>,
    pub non_concave: usize,
}

/// Fits `W_t` to `R_t + gamma Q_{t+1}` and evaluates `Q_t` per sample.
pub fn fqi_backward_step(
    features: &FeatureMatrix,
    actions: ArrayView1<'_, f64>,
    rewards: ArrayView1<'_, f64>,
    q_next: ArrayView1<'_, f64>,
    gamma: f64,
    regularizer: Regularizer,
    rule: ActionRule,
) -> Result<FqiStep> {
    let k = features.n_rows();
    let n = features.n_basis();
    if actions.len() != k || rewards.len() != k || q_next.len() != k {
        return Err(QlbsError::ShapeMismatch(format!(
            "features have {k} rows, actions {}, rewards {}, q {}",
            actions.len(),
            rewards.len(),
            q_next.len()
        )));
    }
    if k < 3 * n {
        warn!(
            "fitted Q step has {k} samples for {} unknowns; the fit is underdetermined",
            3 * n
        );
    }
    let psi = psi_features(features, actions);
    let target = &rewards + &(&q_next * gamma);
    let flat = ridge_solve(&RidgeProblem {
        design: psi,
        target,
        regularizer,
    })?;
    let w = WMatrix::from_flat(flat)?;

    let mut q = Array1::zeros(k);
    let mut chosen = Array1::zeros(k);
    let mut non_concave = 0;
    for (i, phi) in features.values.rows().into_iter().enumerate() {
        let observed = actions[i];
        let (a, v) = match rule {
            ActionRule::Observed => (observed, w.q_value(phi, observed)),
            ActionRule::Greedy => {
                let g = greedy_action(&w, phi, observed);
                if !g.concave {
                    non_concave += 1;
                }
                (g.action, g.value)
            }
        };
        chosen[i] = a;
        q[i] = v;
    }
    Ok(FqiStep {
        w,
        q_values: q,
        actions: chosen,
        non_concave,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FQISolution {
    /// Fitted coefficients per step `t = 0..T-1`.
    pub w: Vec<WMatrix>,
    pub q_values: Array2<f64>,
    /// Actions at which each `Q_t` was evaluated.
    pub actions: Array2<f64>,
    pub price_t0: f64,
    /// Samples where the greedy rule had to fall back.
    pub non_concave: usize,
}

pub fn run_fqi(
    dataset: &OfflineDataset,
    spec: &BasisSpec,
    gamma: f64,
    regularizer: Regularizer,
    rule: ActionRule,
) -> Result<FQISolution> {
    dataset.validate()?;
    let (k, cols) = dataset.states.dim();
    let n = cols - 1;
    let series = crate::market_sim::StateSeries {
        values: dataset.states.clone(),
        kind: dataset.state_kind,
    };
    let features = build_features(&series, spec);

    let mut q_values = Array2::zeros((k, cols));
    let terminal_q = &dataset.rewards.column(n) - &dataset.payoff;
    q_values.column_mut(n).assign(&terminal_q);
    let mut actions = Array2::zeros((k, cols));
    let mut w_hist = vec![
        WMatrix {
            values: Array2::zeros((3, spec.n_basis))
        };
        n
    ];
    let mut non_concave = 0;
    for t in (0..n).rev() {
        let step = fqi_backward_step(
            &features[t],
            dataset.actions.column(t),
            dataset.rewards.column(t),
            q_values.column(t + 1),
            gamma,
            regularizer,
            rule,
        )?;
        q_values.column_mut(t).assign(&step.q_values);
        actions.column_mut(t).assign(&step.actions);
        non_concave += step.non_concave;
        w_hist[t] = step.w;
    }
    if non_concave > 0 {
        warn!("fitted Q was not concave in the action for {non_concave} samples; used recorded actions");
    }
    let price_t0 = -q_values.column(0).mean().unwrap_or(f64::NAN);
    Ok(FQISolution {
        w: w_hist,
        q_values,
        actions,
        price_t0,
        non_concave,
    })
}
