//! Five-path worked example: every intermediate of the last backward step
//! and the final premium.

mod common;

use common::{rounded_features, table3_paths as fixture};
use ndarray::{Array1, ArrayView1};
use qlbs_core::basis::{feature_matrix, make_spec, FeatureMatrix};
use qlbs_core::market_sim::{price_increments, PathSet};
use qlbs_core::numerics::{demean, Regularizer};
use qlbs_core::qlbs_dp::{solve_with_features, terminal_conditions, DPSolution, RiskParams};
use qlbs_core::qlbs_fqi::build_offline_dataset;

const STRIKE: f64 = 100.0;
const LAMBDA: f64 = 0.001;

fn risk(paths: &PathSet) -> RiskParams {
    RiskParams::new(LAMBDA, true, paths.params.r, paths.dt).unwrap()
}

fn solve() -> (PathSet, Vec<FeatureMatrix>, DPSolution) {
    let paths = fixture();
    let feats = rounded_features(&paths);
    let sol = solve_with_features(
        &paths,
        &feats,
        STRIKE,
        &risk(&paths),
        Regularizer::Absolute(1e-3),
    )
    .unwrap();
    (paths, feats, sol)
}

fn assert_close(actual: ArrayView1<'_, f64>, expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= tol, "{what}[{i}]: {a} vs {e} (tol {tol})");
    }
}

#[test]
fn terminal_step() {
    let paths = fixture();
    let tc = terminal_conditions(&paths, STRIKE, &risk(&paths)).unwrap();
    assert_close(
        tc.portfolio.view(),
        &[0.00, 16.25, 2.62, 3.90, 0.00],
        0.01,
        "Pi_T",
    );
    assert_close(
        tc.portfolio_hat.view(),
        &[-4.55, 11.70, -1.93, -0.65, -4.55],
        0.01,
        "Pi_hat_T",
    );
    assert_close(
        tc.q_values.view(),
        &[-0.04, -16.29, -2.66, -3.94, -0.04],
        0.01,
        "Q_T",
    );
}

#[test]
fn price_increments_at_t2() {
    let paths = fixture();
    let inc = price_increments(&paths, paths.params.r);
    assert_close(
        inc.delta_s.column(2),
        &[1.42, -2.36, -0.09, 7.35, 0.94],
        0.01,
        "dS_2",
    );
    assert_close(
        inc.delta_s_hat.column(2),
        &[-0.03, -3.81, -1.54, 5.90, -0.51],
        0.01,
        "dS_hat_2",
    );
}

#[test]
fn feature_matrix_at_t2() {
    let paths = fixture();
    let feats = rounded_features(&paths);
    let expected = [
        [0.02, 0.23, 0.75],
        [0.94, 0.06, 0.0],
        [0.53, 0.4, 0.07],
        [0.83, 0.16, 0.01],
        [0.0, 0.09, 0.91],
    ];
    for (row, e) in feats[2].values.rows().into_iter().zip(expected) {
        assert_close(row, &e, 0.01, "Phi_2");
    }
}

#[test]
fn backward_step_at_t2() {
    let (paths, feats, sol) = solve();
    assert_close(sol.phi[2].view(), &[-3.05, 11.37, 8.2], 0.05, "phi_2");
    assert_close(
        sol.hedges.column(2),
        &[8.70, -2.18, 3.51, -0.63, 8.49],
        0.05,
        "a_2",
    );
    assert_close(
        sol.portfolio.column(2),
        &[-12.24, 10.98, 2.91, 8.45, -7.90],
        0.05,
        "Pi_2",
    );
    assert_close(
        sol.rewards.column(2),
        &[12.15, 5.02, -0.39, -4.67, 7.81],
        0.05,
        "R_2",
    );
    assert_close(sol.omega[2].view(), &[-12.85, 10.71, 9.74], 0.05, "omega_2");
    assert_close(
        sol.q_values.column(2),
        &[9.51, -11.41, -1.84, -8.85, 9.83],
        0.05,
        "Q_2",
    );

    // the regression target of the Q step
    let gamma = (-paths.params.r * paths.dt).exp();
    let target: Array1<f64> = &sol.rewards.column(2) + &(&sol.q_values.column(3) * gamma);
    let rhs = feats[2].values.t().dot(&target);
    assert_close(
        rhs.view(),
        &[-18.91, 0.24, 15.87],
        0.05,
        "Phi^T (R + gamma Q)",
    );
    assert_close(
        demean(sol.portfolio.column(3)).view(),
        &[-4.55, 11.70, -1.93, -0.65, -4.55],
        0.01,
        "Pi_hat_3",
    );
}

#[test]
fn premium_and_full_tables() {
    let (_, _, sol) = solve();
    assert!(
        (sol.price_t0 - 2.38).abs() <= 0.02,
        "price {}",
        sol.price_t0
    );
    assert!(sol.hedges.column(3).iter().all(|&a| a == 0.0));
    assert!(sol
        .hedges
        .column(0)
        .iter()
        .all(|&a| (a - sol.hedge_t0).abs() < 1e-12));
    let q_expected = [
        [-2.38, -4.10, 9.51, -0.04],
        [-2.38, -4.45, -11.44, -16.29],
        [-2.38, -0.76, -1.84, -2.66],
        [-2.38, -1.08, -8.85, -3.94],
        [-2.38, -1.34, 9.83, -0.04],
    ];
    let a_expected = [
        [-2.86, 8.70],
        [-4.02, -2.18],
        [-0.25, 3.51],
        [-0.63, -0.63],
        [-0.55, 8.49],
    ];
    for k in 0..5 {
        assert_close(sol.q_values.row(k), &q_expected[k], 0.05, "Q*");
        assert_close(
            sol.hedges.row(k).slice(ndarray::s![1..3]),
            &a_expected[k],
            0.05,
            "a*",
        );
    }
}

#[test]
fn unrounded_features_stay_in_the_neighbourhood() {
    // Full-precision splines shift the five-path estimate, but only by a few
    // cents.
    let paths = fixture();
    let spec = make_spec(83.75, 130.66, 3, 3).unwrap();
    let feats: Vec<_> = (0..=3)
        .map(|t| feature_matrix(&spec, paths.prices.column(t)))
        .collect();
    let sol = solve_with_features(
        &paths,
        &feats,
        STRIKE,
        &risk(&paths),
        Regularizer::Absolute(1e-3),
    )
    .unwrap();
    assert!((sol.price_t0 - 2.38).abs() < 0.25, "price {}", sol.price_t0);
}

#[test]
fn dataset_rewards_under_stored_hedges() {
    let (paths, _, sol) = solve();
    let ds = build_offline_dataset(
        &paths,
        qlbs_core::market_sim::StateKind::Price,
        sol.hedges.view(),
        STRIKE,
        &risk(&paths),
    )
    .unwrap();
    assert_close(
        ds.rewards.column(2),
        &[12.15, 5.02, -0.39, -4.67, 7.81],
        0.05,
        "R_2",
    );
}
