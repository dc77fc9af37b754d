//! Model-based QLBS: backward dynamic programming over Monte Carlo paths.
//!
//! At each step `t = T-1, ..., 0` the hedge is the basis expansion whose
//! coefficients minimize the one-step portfolio variance (optionally plus the
//! drift term), the replicating portfolio is rolled back with the
//! self-financing rule, rewards are computed with the cross-sectional
//! variance penalty, and the optimal Q-function is regressed on the same
//! basis. The price is `-mean(Q_0)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{feature_matrix, BasisSpec, FeatureMatrix};
use crate::error::{QlbsError, Result};
use crate::market_sim::{compute_states, price_increments, PathSet, StateKind, StateSeries};
use crate::numerics::{
    cross_sectional_stats, demean, ridge_solve, solve_normal_equations, Regularizer, RidgeProblem,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    /// Risk aversion, per unit of currency.
    pub lambda: f64,
    /// Drop the `dS / (2 lambda gamma)` drift term from the hedge.
    pub pure_risk: bool,
    /// One-step discount factor `exp(-r dt)`.
    pub gamma: f64,
}

impl RiskParams {
    pub fn new(lambda: f64, pure_risk: bool, r: f64, dt: f64) -> Result<Self> {
        let risk = RiskParams {
            lambda,
            pure_risk,
            gamma: (-r * dt).exp(),
        };
        risk.validate()?;
        Ok(risk)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(QlbsError::invalid(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(QlbsError::invalid(
                "gamma",
                format!("must be in (0, 1], got {}", self.gamma),
            ));
        }
        if !self.pure_risk && self.lambda == 0.0 {
            return Err(QlbsError::invalid(
                "lambda",
                "the drift term of the full hedge divides by lambda; use pure_risk or lambda > 0",
            ));
        }
        Ok(())
    }
}

/// Everything known at maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalConditions {
    pub portfolio: Array1<f64>,
    pub portfolio_hat: Array1<f64>,
    pub hedge: Array1<f64>,
    pub rewards: Array1<f64>,
    pub q_values: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DPSolution {
    /// Optimal hedges `a*`, `K x (T+1)`; the last column is zero.
    pub hedges: Array2<f64>,
    /// Replicating portfolio values.
    pub portfolio: Array2<f64>,
    pub rewards: Array2<f64>,
    pub q_values: Array2<f64>,
    /// Hedge coefficients per step `t = 0..T-1`.
    pub phi: Vec<Array1<f64>>,
    /// Q-function coefficients per step `t = 0..T-1`.
    pub omega: Vec<Array1<f64>>,
    pub price_t0: f64,
    pub hedge_t0: f64,
    /// Bank account `B_t = Pi_t - a_t S_t`.
    pub cash: Array2<f64>,
}

pub fn terminal_conditions(
    paths: &PathSet,
    strike: f64,
    risk: &RiskParams,
) -> Result<TerminalConditions> {
    if !(strike.is_finite() && strike > 0.0) {
        return Err(QlbsError::invalid(
            "strike",
            format!("must be positive, got {strike}"),
        ));
    }
    let portfolio = paths.terminal().mapv(|s| (strike - s).max(0.0));
    let stats = cross_sectional_stats(portfolio.view());
    let penalty = risk.lambda * stats.variance;
    let portfolio_hat = portfolio.mapv(|p| p - stats.mean);
    let k = portfolio.len();
    Ok(TerminalConditions {
        q_values: portfolio.mapv(|p| -p - penalty),
        rewards: Array1::from_elem(k, -penalty),
        hedge: Array1::zeros(k),
        portfolio,
        portfolio_hat,
    })
}

/// Hedge coefficients from the weighted normal equations
/// `[sum Phi Phi^T dS_hat^2] phi = sum Phi (Pi_hat_next dS_hat + dS / (2 lambda gamma))`,
/// with the last term dropped for a pure-risk hedge.
pub fn fit_hedge_coefficients(
    features: &FeatureMatrix,
    delta_s: ArrayView1<'_, f64>,
    delta_s_hat: ArrayView1<'_, f64>,
    portfolio_hat_next: ArrayView1<'_, f64>,
    risk: &RiskParams,
    regularizer: Regularizer,
) -> Result<Array1<f64>> {
    let k = features.n_rows();
    if delta_s.len() != k || delta_s_hat.len() != k || portfolio_hat_next.len() != k {
        return Err(QlbsError::ShapeMismatch(format!(
            "features have {k} rows, increments {}/{}, portfolio {}",
            delta_s.len(),
            delta_s_hat.len(),
            portfolio_hat_next.len()
        )));
    }
    let phi = &features.values;
    let weights = delta_s_hat.mapv(|d| d * d);
    let weighted = phi * &weights.view().insert_axis(Axis(1));
    let gram = phi.t().dot(&weighted);

    let mut target = &portfolio_hat_next * &delta_s_hat;
    if !risk.pure_risk {
        let drift_scale = 1.0 / (2.0 * risk.lambda * risk.gamma);
        target.scaled_add(drift_scale, &delta_s);
    }
    let rhs = phi.t().dot(&target);
    solve_normal_equations(gram, rhs.view(), regularizer)
}

pub fn optimal_hedge_values(
    features: &FeatureMatrix,
    coefficients: ArrayView1<'_, f64>,
) -> Array1<f64> {
    features.values.dot(&coefficients)
}

/// `gamma (Pi_{t+1} - a_t dS_t)`.
pub fn rollback_portfolio(
    portfolio_next: ArrayView1<'_, f64>,
    hedge: ArrayView1<'_, f64>,
    delta_s: ArrayView1<'_, f64>,
    gamma: f64,
) -> Array1<f64> {
    let mut out = &portfolio_next - &(&hedge * &delta_s);
    out *= gamma;
    out
}

/// `gamma Pi_{t+1} - Pi_t - lambda Var(Pi_t)`, variance taken across paths.
pub fn compute_rewards(
    portfolio_next: ArrayView1<'_, f64>,
    portfolio: ArrayView1<'_, f64>,
    gamma: f64,
    lambda: f64,
) -> Array1<f64> {
    let penalty = lambda * cross_sectional_stats(portfolio).variance;
    let mut r = &portfolio_next * gamma - portfolio;
    r -= penalty;
    r
}

/// Least-squares fit of `R_t + gamma Q_{t+1}` on the basis.
pub fn fit_q_coefficients(
    features: &FeatureMatrix,
    rewards: ArrayView1<'_, f64>,
    q_next: ArrayView1<'_, f64>,
    gamma: f64,
    regularizer: Regularizer,
) -> Result<Array1<f64>> {
    if rewards.len() != features.n_rows() || q_next.len() != features.n_rows() {
        return Err(QlbsError::ShapeMismatch(format!(
            "features have {} rows, rewards {}, q {}",
            features.n_rows(),
            rewards.len(),
            q_next.len()
        )));
    }
    let target = &rewards + &(&q_next * gamma);
    ridge_solve(&RidgeProblem {
        design: features.values.clone(),
        target,
        regularizer,
    })
}

/// Feature matrices for every time step `0..=T`, evaluated in parallel.
pub fn build_features(states: &StateSeries, spec: &BasisSpec) -> Vec<FeatureMatrix> {
    (0..states.values.ncols())
        .into_par_iter()
        .map(|t| feature_matrix(spec, states.values.column(t)))
        .collect()
}

pub fn run_model_based(
    paths: &PathSet,
    state_kind: StateKind,
    spec: &BasisSpec,
    strike: f64,
    risk: &RiskParams,
    regularizer: Regularizer,
) -> Result<DPSolution> {
    let states = compute_states(paths, state_kind);
    let features = build_features(&states, spec);
    solve_with_features(paths, &features, strike, risk, regularizer)
}

/// Backward recursion given precomputed features for `t = 0..T` (the
/// terminal step's features are not used).
pub fn solve_with_features(
    paths: &PathSet,
    features: &[FeatureMatrix],
    strike: f64,
    risk: &RiskParams,
    regularizer: Regularizer,
) -> Result<DPSolution> {
    risk.validate()?;
    let k = paths.n_paths();
    let n_steps = paths.n_steps();
    if features.len() < n_steps {
        return Err(QlbsError::ShapeMismatch(format!(
            "{} feature matrices for {n_steps} steps",
            features.len()
        )));
    }
    if let Some(bad) = features.iter().find(|f| f.n_rows() != k) {
        return Err(QlbsError::ShapeMismatch(format!(
            "feature matrix has {} rows, expected {k}",
            bad.n_rows()
        )));
    }

    let inc = price_increments(paths, paths.params.r);
    let terminal = terminal_conditions(paths, strike, risk)?;

    let mut hedges = Array2::zeros((k, n_steps + 1));
    let mut portfolio = Array2::zeros((k, n_steps + 1));
    let mut rewards = Array2::zeros((k, n_steps + 1));
    let mut q_values = Array2::zeros((k, n_steps + 1));
    portfolio.column_mut(n_steps).assign(&terminal.portfolio);
    rewards.column_mut(n_steps).assign(&terminal.rewards);
    q_values.column_mut(n_steps).assign(&terminal.q_values);

    let mut phi_hist = vec![Array1::zeros(0); n_steps];
    let mut omega_hist = vec![Array1::zeros(0); n_steps];

    for t in (0..n_steps).rev() {
        let feats = &features[t];
        let pi_next = portfolio.column(t + 1).to_owned();
        let pi_hat_next = demean(pi_next.view());
        let ds = inc.delta_s.column(t);
        let ds_hat = inc.delta_s_hat.column(t);

        let phi = fit_hedge_coefficients(feats, ds, ds_hat, pi_hat_next.view(), risk, regularizer)?;
        let a = optimal_hedge_values(feats, phi.view());
        let pi = rollback_portfolio(pi_next.view(), a.view(), ds, risk.gamma);
        let r = compute_rewards(pi_next.view(), pi.view(), risk.gamma, risk.lambda);
        let omega = fit_q_coefficients(
            feats,
            r.view(),
            q_values.column(t + 1),
            risk.gamma,
            regularizer,
        )?;
        let q = feats.values.dot(&omega);

        hedges.column_mut(t).assign(&a);
        portfolio.column_mut(t).assign(&pi);
        rewards.column_mut(t).assign(&r);
        q_values.column_mut(t).assign(&q);
        phi_hist[t] = phi;
        omega_hist[t] = omega;
    }

    let price_t0 = -q_values.column(0).mean().unwrap_or(f64::NAN);
    let hedge_t0 = hedges.column(0).mean().unwrap_or(f64::NAN);
    let cash = &portfolio - &(&hedges * &paths.prices);
    Ok(DPSolution {
        hedges,
        portfolio,
        rewards,
        q_values,
        phi: phi_hist,
        omega: omega_hist,
        price_t0,
        hedge_t0,
        cash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::make_spec;
    use crate::market_sim::{simulate_gbm, MarketParams};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table3() -> PathSet {
        let prices = array![
            [100.0, 118.27, 124.43, 127.10],
            [100.0, 86.20, 85.25, 83.75],
            [100.0, 100.58, 96.50, 97.38],
            [100.0, 97.20, 87.87, 96.10],
            [100.0, 109.33, 128.43, 130.66],
        ];
        PathSet::from_prices(prices, 1.0 / 3.0, 0.05, 0.15, 0.03).unwrap()
    }

    fn risk(lambda: f64) -> RiskParams {
        RiskParams::new(lambda, true, 0.03, 1.0 / 3.0).unwrap()
    }

    /// Action-dependent objective G_t summed over paths: the (optional) drift
    /// term plus lambda gamma (Pi_hat - a dS_hat)^2.
    fn hedge_objective(
        a: &Array1<f64>,
        ds: &Array1<f64>,
        ds_hat: &Array1<f64>,
        pi_hat: &Array1<f64>,
        risk: &RiskParams,
    ) -> f64 {
        let mut g = 0.0;
        for k in 0..a.len() {
            if !risk.pure_risk {
                g -= a[k] * ds[k];
            }
            let e = pi_hat[k] - a[k] * ds_hat[k];
            g += risk.lambda * risk.gamma * e * e;
        }
        g
    }

    #[test]
    fn terminal_conditions_match_worked_example() {
        let tc = terminal_conditions(&table3(), 100.0, &risk(0.001)).unwrap();
        for (a, b) in tc.portfolio.iter().zip([0.0, 16.25, 2.62, 3.90, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        for (a, b) in tc.q_values.iter().zip([-0.04, -16.29, -2.66, -3.94, -0.04]) {
            assert_abs_diff_eq!(*a, b, epsilon = 0.01);
        }
        assert!(tc.hedge.iter().all(|&h| h == 0.0));
        assert!(tc.rewards.iter().all(|&r| r == tc.rewards[0]));
    }

    #[test]
    fn out_of_the_money_everywhere_gives_zero_terminal_q() {
        let tc = terminal_conditions(&table3(), 50.0, &risk(0.001)).unwrap();
        assert!(tc.portfolio.iter().all(|&p| p == 0.0));
        assert!(tc.q_values.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn zero_target_gives_zero_coefficients() {
        let spec = make_spec(80.0, 135.0, 3, 3).unwrap();
        let paths = table3();
        let inc = price_increments(&paths, 0.03);
        let feats = feature_matrix(&spec, paths.prices.column(2));
        let phi = fit_hedge_coefficients(
            &feats,
            inc.delta_s.column(2),
            inc.delta_s_hat.column(2),
            Array1::zeros(5).view(),
            &risk(0.001),
            Regularizer::default(),
        )
        .unwrap();
        assert!(phi.iter().all(|&p| p.abs() < 1e-12));
        assert!(optimal_hedge_values(&feats, phi.view())
            .iter()
            .all(|&a| a.abs() < 1e-12));
    }

    #[test]
    fn rollback_and_reward_identities() {
        let next = array![3.0, -1.0, 2.5];
        let ds = array![0.5, -0.2, 1.0];
        let gamma = 0.99;
        let discounted = rollback_portfolio(next.view(), Array1::zeros(3).view(), ds.view(), gamma);
        assert_eq!(discounted, &next * gamma);
        let r = compute_rewards(next.view(), discounted.view(), gamma, 0.0);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        // gamma = 1 and a dS = Pi_next gives a flat portfolio
        let a = &next / &ds;
        let flat = rollback_portfolio(next.view(), a.view(), ds.view(), 1.0);
        assert!(flat.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_target_is_reproduced() {
        let spec = make_spec(80.0, 135.0, 3, 3).unwrap();
        let feats = feature_matrix(&spec, table3().prices.column(1));
        let omega = fit_q_coefficients(
            &feats,
            Array1::from_elem(5, 2.0).view(),
            Array1::from_elem(5, 1.0).view(),
            0.5,
            Regularizer::default(),
        )
        .unwrap();
        for v in feats.values.dot(&omega) {
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn square_design_interpolates() {
        let spec = make_spec(0.0, 1.0, 4, 2).unwrap();
        let x = array![0.0, 0.3, 0.7, 1.0];
        let feats = feature_matrix(&spec, x.view());
        let rewards = array![1.0, -2.0, 0.5, 3.0];
        let q_next = array![0.2, 0.1, -0.4, 0.0];
        let omega = fit_q_coefficients(
            &feats,
            rewards.view(),
            q_next.view(),
            0.9,
            Regularizer::none(),
        )
        .unwrap();
        let fitted = feats.values.dot(&omega);
        let target = &rewards + &(&q_next * 0.9);
        for (a, b) in fitted.iter().zip(target.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn full_hedge_needs_positive_lambda() {
        assert!(RiskParams::new(0.0, false, 0.03, 0.1).is_err());
        assert!(RiskParams::new(0.0, true, 0.03, 0.1).is_ok());
        assert!(RiskParams::new(-1.0, true, 0.03, 0.1).is_err());
    }

    #[test]
    fn hedge_objective_is_concave_in_uniform_shift() {
        // Q as a function of a uniform hedge shift c has second difference
        // -2 lambda gamma^2 sum(dS_hat^2).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let a = Array::from_shape_fn(n, |_| rng.random_range(-1.0..0.0));
        let ds = Array::from_shape_fn(n, |_| rng.random_range(-3.0..3.0));
        let ds_hat = demean(ds.view());
        let pi_hat = Array::from_shape_fn(n, |_| rng.random_range(-5.0..5.0));
        let (lambda, gamma) = (0.01, 0.99);
        let q = |c: f64| -> f64 {
            (0..n)
                .map(|k| {
                    let e = pi_hat[k] - (a[k] + c) * ds_hat[k];
                    gamma * (a[k] + c) * ds[k] - lambda * gamma * gamma * e * e
                })
                .sum()
        };
        let h = 0.1;
        let second = (q(h) - 2.0 * q(0.0) + q(-h)) / (h * h);
        let expected = -2.0 * lambda * gamma * gamma * ds_hat.dot(&ds_hat);
        assert_abs_diff_eq!(second, expected, epsilon = 1e-8 * expected.abs());
        assert!(second < 0.0);
    }

    #[test]
    fn hedge_beats_random_perturbations() {
        let params = MarketParams {
            n_paths: 50,
            n_steps: 4,
            seed: 3,
            ..MarketParams::default()
        };
        let paths = simulate_gbm(&params).unwrap();
        let spec = make_spec(
            paths
                .prices
                .column(1)
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min),
            paths
                .prices
                .column(1)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
            4,
            3,
        )
        .unwrap();
        let inc = price_increments(&paths, params.r);
        let feats = feature_matrix(&spec, paths.prices.column(1));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi_hat = demean(Array::from_shape_fn(50, |_| rng.random_range(0.0..10.0)).view());
        for pure_risk in [true, false] {
            let risk = RiskParams::new(0.01, pure_risk, params.r, paths.dt).unwrap();
            let ds = inc.delta_s.column(1).to_owned();
            let ds_hat = inc.delta_s_hat.column(1).to_owned();
            let phi = fit_hedge_coefficients(
                &feats,
                ds.view(),
                ds_hat.view(),
                pi_hat.view(),
                &risk,
                Regularizer::none(),
            )
            .unwrap();
            let a = optimal_hedge_values(&feats, phi.view());
            let best = hedge_objective(&a, &ds, &ds_hat, &pi_hat, &risk);
            for _ in 0..200 {
                let eps = Array::from_shape_fn(4, |_| rng.random_range(-0.05..0.05));
                let perturbed = optimal_hedge_values(&feats, (&phi + &eps).view());
                assert!(hedge_objective(&perturbed, &ds, &ds_hat, &pi_hat, &risk) >= best - 1e-12);
                let shift = rng.random_range(-0.05..0.05);
                let shifted = &a + shift;
                assert!(hedge_objective(&shifted, &ds, &ds_hat, &pi_hat, &risk) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn solution_invariants_on_simulated_paths() {
        let params = MarketParams {
            n_paths: 2000,
            n_steps: 6,
            ..MarketParams::default()
        };
        let paths = simulate_gbm(&params).unwrap();
        let states = compute_states(&paths, StateKind::DriftAdjusted);
        let spec = BasisSpec::for_states(&states, 8, 4).unwrap();
        let risk = RiskParams::new(1e-3, true, params.r, paths.dt).unwrap();
        let sol = run_model_based(
            &paths,
            StateKind::DriftAdjusted,
            &spec,
            100.0,
            &risk,
            Regularizer::default(),
        )
        .unwrap();
        assert!(sol.hedges.column(6).iter().all(|&a| a == 0.0));
        let r_t = sol.rewards.column(6);
        assert!(r_t.iter().all(|&r| r == r_t[0]));
        let q0 = sol.q_values.column(0);
        assert!(cross_sectional_stats(q0).variance < 1e-18);
        assert!(sol
            .hedges
            .column(0)
            .iter()
            .all(|&a| (a - sol.hedge_t0).abs() < 1e-12));
        assert_abs_diff_eq!(sol.price_t0, -q0.mean().unwrap(), epsilon = 1e-12);
        let b = &sol.cash;
        assert_abs_diff_eq!(
            b[[3, 2]],
            sol.portfolio[[3, 2]] - sol.hedges[[3, 2]] * paths.prices[[3, 2]],
            epsilon = 1e-12
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reward_forms_agree(seed in 0u64..10_000, lambda in 0.0f64..0.01) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let next = Array::from_shape_fn(n, |_| rng.random_range(-20.0..20.0));
            let a = Array::from_shape_fn(n, |_| rng.random_range(-2.0..1.0));
            let ds = Array::from_shape_fn(n, |_| rng.random_range(-5.0..5.0));
            let gamma = rng.random_range(0.9..1.0);
            let pi = rollback_portfolio(next.view(), a.view(), ds.view(), gamma);
            let r = compute_rewards(next.view(), pi.view(), gamma, lambda);
            let var = cross_sectional_stats(pi.view()).variance;
            for k in 0..n {
                let alt = gamma * a[k] * ds[k] - lambda * var;
                prop_assert!((r[k] - alt).abs() <= 1e-8);
            }
        }
    }
}
