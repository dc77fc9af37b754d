//! Regularized least squares in normal-equation form and cross-sectional
//! statistics shared by both solvers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{QlbsError, Result};

/// Ridge added to the diagonal of a normal matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// Fixed amount added to every diagonal entry.
    Absolute(f64),
    /// `factor * trace(A) / M`, which tracks the scale of the design.
    TraceScaled(f64),
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer::TraceScaled(1e-9)
    }
}

impl Regularizer {
    pub fn none() -> Self {
        Regularizer::Absolute(0.0)
    }

    /// Diagonal increment for the given normal matrix.
    pub fn amount(&self, gram: ArrayView2<'_, f64>) -> f64 {
        match *self {
            Regularizer::Absolute(v) => v,
            Regularizer::TraceScaled(f) => {
                let m = gram.nrows().max(1) as f64;
                f * gram.diag().sum() / m
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            Regularizer::Absolute(v) | Regularizer::TraceScaled(v) => v,
        };
        if !(v.is_finite() && v >= 0.0) {
            return Err(QlbsError::invalid(
                "regularizer",
                format!("must be >= 0, got {v}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProblem {
    pub design: Array2<f64>,
    pub target: Array1<f64>,
    pub regularizer: Regularizer,
}

/// Solves `(A^T A + reg I) x = A^T b`.
pub fn ridge_solve(problem: &RidgeProblem) -> Result<Array1<f64>> {
    let (k, m) = problem.design.dim();
    if k == 0 || m == 0 {
        return Err(QlbsError::ShapeMismatch(format!("empty design {k}x{m}")));
    }
    if problem.target.len() != k {
        return Err(QlbsError::ShapeMismatch(format!(
            "design has {k} rows, target has {}",
            problem.target.len()
        )));
    }
    let gram = problem.design.t().dot(&problem.design);
    let rhs = problem.design.t().dot(&problem.target);
    solve_normal_equations(gram, rhs.view(), problem.regularizer)
}

/// Solves `(gram + reg I) x = rhs` for a symmetric positive semi-definite
/// `gram` by Cholesky factorization.
pub fn solve_normal_equations(
    mut gram: Array2<f64>,
    rhs: ArrayView1<'_, f64>,
    regularizer: Regularizer,
) -> Result<Array1<f64>> {
    regularizer.validate()?;
    let m = gram.nrows();
    if gram.ncols() != m || rhs.len() != m {
        return Err(QlbsError::ShapeMismatch(format!(
            "normal matrix {}x{}, rhs {}",
            gram.nrows(),
            gram.ncols(),
            rhs.len()
        )));
    }
    if gram.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(QlbsError::invalid("normal equations", "non-finite entry"));
    }
    let reg = regularizer.amount(gram.view());
    gram.diag_mut().mapv_inplace(|d| d + reg);

    let scale = gram
        .diag()
        .iter()
        .fold(0.0f64, |a, &d| a.max(d.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = 1e-13 * scale;
    let lower = cholesky_in_place(gram, tol)?;

    // forward then backward substitution
    let mut y = rhs.to_owned();
    for i in 0..m {
        let mut s = y[i];
        for j in 0..i {
            s -= lower[[i, j]] * y[j];
        }
        y[i] = s / lower[[i, i]];
    }
    for i in (0..m).rev() {
        let mut s = y[i];
        for j in i + 1..m {
            s -= lower[[j, i]] * y[j];
        }
        y[i] = s / lower[[i, i]];
    }
    Ok(y)
}

fn cholesky_in_place(mut a: Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let m = a.nrows();
    for j in 0..m {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d <= tol {
            return Err(QlbsError::RankDeficient {
                column: j,
                pivot: d,
            });
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..m {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossSectionStats {
    pub mean: f64,
    /// Population variance (divides by the number of paths).
    pub variance: f64,
}

pub fn cross_sectional_stats(values: ArrayView1<'_, f64>) -> CrossSectionStats {
    let n = values.len();
    if n == 0 {
        return CrossSectionStats {
            mean: f64::NAN,
            variance: f64::NAN,
        };
    }
    let mean = values.sum() / n as f64;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    CrossSectionStats { mean, variance }
}

/// `values - mean(values)`.
pub fn demean(values: ArrayView1<'_, f64>) -> Array1<f64> {
    let mean = cross_sectional_stats(values).mean;
    values.mapv(|v| v - mean)
}
