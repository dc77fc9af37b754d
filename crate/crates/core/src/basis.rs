//! Clamped B-spline bases and the per-time-step feature matrices built from them.
//!
//! `order` follows the de Boor convention: polynomial degree + 1. A spec with
//! `n_basis` functions carries `n_basis + order` knots, the first and last
//! `order` of which coincide with the domain ends.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{QlbsError, Result};
use crate::market_sim::StateSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n_basis: usize,
    pub order: usize,
    pub knots: Vec<f64>,
    pub domain: (f64, f64),
}

/// Basis values for a batch of states, `n_points x n_basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.values.ncols()
    }
}

/// Relative padding applied to the data range so that the extreme states sit
/// strictly inside the clamped domain.
pub const DOMAIN_PADDING: f64 = 1e-6;

/// Clamped knot vector with uniform interior breaks over `[data_lo, data_hi]`
/// padded by `DOMAIN_PADDING * (data_hi - data_lo)` on each side.
pub fn make_spec(data_lo: f64, data_hi: f64, n_basis: usize, order: usize) -> Result<BasisSpec> {
    if !(data_lo.is_finite() && data_hi.is_finite()) || data_lo >= data_hi {
        return Err(QlbsError::invalid(
            "domain",
            format!("need finite lo < hi, got [{data_lo}, {data_hi}]"),
        ));
    }
    if order < 1 {
        return Err(QlbsError::invalid("order", "must be at least 1"));
    }
    if n_basis < order {
        return Err(QlbsError::invalid(
            "n_basis",
            format!("n_basis ({n_basis}) must be >= order ({order})"),
        ));
    }
    let pad = DOMAIN_PADDING * (data_hi - data_lo);
    let (lo, hi) = (data_lo - pad, data_hi + pad);
    let n_interior = n_basis - order;
    let mut knots = Vec::with_capacity(n_basis + order);
    knots.extend(std::iter::repeat_n(lo, order));
    for j in 1..=n_interior {
        knots.push(lo + (hi - lo) * j as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(hi, order));
    Ok(BasisSpec {
        n_basis,
        order,
        knots,
        domain: (lo, hi),
    })
}

impl BasisSpec {
    /// One shared spec spanning the global range of a state series (all
    /// paths, all time steps). A degenerate range is widened by one unit.
    pub fn for_states(states: &StateSeries, n_basis: usize, order: usize) -> Result<BasisSpec> {
        let (mut lo, mut hi) = states.range();
        if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
            lo -= 0.5;
            hi += 0.5;
        }
        make_spec(lo, hi, n_basis, order)
    }

    /// Validates an explicit knot vector.
    pub fn from_knots(knots: Vec<f64>, order: usize) -> Result<BasisSpec> {
        if order < 1 || knots.len() < 2 * order {
            return Err(QlbsError::invalid(
                "knots",
                format!("need at least {} knots for order {order}", 2 * order),
            ));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if knots.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(QlbsError::invalid(
                "knots",
                "must be finite and nondecreasing",
            ));
        }
        let n_basis = knots.len() - order;
        let domain = (knots[order - 1], knots[n_basis]);
        if domain.0 >= domain.1 {
            return Err(QlbsError::invalid("knots", "empty domain"));
        }
        Ok(BasisSpec {
            n_basis,
            order,
            knots,
            domain,
        })
    }

    pub fn degree(&self) -> usize {
        self.order - 1
    }

    /// Index `i` of the knot span `[knots[i], knots[i+1])` containing `x`,
    /// with `x` already clamped to the domain.
    fn span(&self, x: f64) -> usize {
        let p = self.degree();
        let i = self.knots.partition_point(|&k| k <= x).saturating_sub(1);
        i.clamp(p, self.n_basis - 1)
    }

    /// Writes all `n_basis` values at `x` into `out`, clamping `x` to the
    /// domain first.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_basis);
        out.fill(0.0);
        let x = x.clamp(self.domain.0, self.domain.1);
        let p = self.degree();
        let i = self.span(x);

        let mut vals = [0.0f64; 32];
        let mut left = [0.0f64; 32];
        let mut right = [0.0f64; 32];
        let (vals, left, right) = if p < 32 {
            (&mut vals[..=p], &mut left[..=p], &mut right[..=p])
        } else {
            // High orders are rare; fall back to the heap.
            return self.eval_into_heap(x, i, out);
        };
        triangular_basis(&self.knots, x, i, p, vals, left, right);
        out[i - p..=i].copy_from_slice(vals);
    }

    fn eval_into_heap(&self, x: f64, i: usize, out: &mut [f64]) {
        let p = self.degree();
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        triangular_basis(&self.knots, x, i, p, &mut vals, &mut left, &mut right);
        out[i - p..=i].copy_from_slice(&vals);
    }
}

/// The `p + 1` nonzero basis values on span `i` (de Boor's triangular scheme).
fn triangular_basis(
    knots: &[f64],
    x: f64,
    i: usize,
    p: usize,
    vals: &mut [f64],
    left: &mut [f64],
    right: &mut [f64],
) {
    vals[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[i + 1 - j];
        right[j] = knots[i + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
}

pub fn eval_basis(spec: &BasisSpec, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.n_basis];
    spec.eval_into(x, &mut out);
    out
}

pub fn feature_matrix(spec: &BasisSpec, states_at_t: ArrayView1<'_, f64>) -> FeatureMatrix {
    let mut values = Array2::zeros((states_at_t.len(), spec.n_basis));
    for (mut row, &x) in values.rows_mut().into_iter().zip(states_at_t.iter()) {
        spec.eval_into(
            x,
            row.as_slice_mut()
                .expect("rows of a fresh array are contiguous"),
        );
    }
    FeatureMatrix { values }
}
