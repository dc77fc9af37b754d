//! Closed-form Black-Scholes-Merton European put, the benchmark for every
//! QLBS run.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsmQuote {
    pub price: f64,
    pub delta: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Standard normal CDF via the complementary error function.
///
/// `erfc` keeps full relative precision in the left tail, so the result is
/// accurate to well under 1e-15 absolute for all finite `x`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// European put quote. `sigma == 0` or `maturity == 0` return the
/// deterministic limits instead of dividing by zero; `d1`/`d2` are then
/// reported as +/- infinity (or 0 exactly at the money).
pub fn bsm_put(s0: f64, strike: f64, r: f64, sigma: f64, maturity: f64) -> BsmQuote {
    let discounted_strike = strike * (-r * maturity).exp();
    let vol_sqrt_t = sigma * maturity.sqrt();
    if vol_sqrt_t <= 0.0 {
        let intrinsic = (discounted_strike - s0).max(0.0);
        let (d, delta) = if discounted_strike > s0 {
            (f64::NEG_INFINITY, -1.0)
        } else if discounted_strike < s0 {
            (f64::INFINITY, 0.0)
        } else {
            (0.0, -0.5)
        };
        return BsmQuote {
            price: intrinsic,
            delta,
            d1: d,
            d2: d,
        };
    }
    let d1 = ((s0 / strike).ln() + (r + 0.5 * sigma * sigma) * maturity) / vol_sqrt_t;
    let d2 = d1 - vol_sqrt_t;
    let price = discounted_strike * norm_cdf(-d2) - s0 * norm_cdf(-d1);
    BsmQuote {
        price,
        delta: norm_cdf(d1) - 1.0,
        d1,
        d2,
    }
}

pub fn bsm_put_price(s0: f64, strike: f64, r: f64, sigma: f64, maturity: f64) -> f64 {
    bsm_put(s0, strike, r, sigma, maturity).price
}

pub fn bsm_put_delta(s0: f64, strike: f64, r: f64, sigma: f64, maturity: f64) -> f64 {
    bsm_put(s0, strike, r, sigma, maturity).delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Composite Simpson quadrature of the Gaussian density on [-12, x].
    fn cdf_by_quadrature(x: f64) -> f64 {
        let lo = -12.0;
        let n = 200_000;
        let h = (x - lo) / n as f64;
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut sum = pdf(lo) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * pdf(lo + i as f64 * h);
        }
        sum * h / 3.0
    }

    #[test]
    fn cdf_symmetry() {
        assert_eq!(norm_cdf(0.0), 0.5);
        for x in [0.1, 0.5, 1.3, 2.7, 5.0, 8.0] {
            assert_abs_diff_eq!(norm_cdf(x) + norm_cdf(-x), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn cdf_matches_quadrature() {
        for x in [-3.0, -1.0, 0.25, 1.0, 2.5] {
            assert_abs_diff_eq!(norm_cdf(x), cdf_by_quadrature(x), epsilon = 1e-10);
        }
    }

    #[test]
    fn reference_prices() {
        for (sigma, price, delta) in [
            (0.15, 4.53, -0.39),
            (0.25, 8.39, -0.40),
            (0.40, 14.18, -0.39),
        ] {
            let q = bsm_put(100.0, 100.0, 0.03, sigma, 1.0);
            assert_abs_diff_eq!(q.price, price, epsilon = 0.005);
            assert_abs_diff_eq!(q.delta, delta, epsilon = 0.005);
            assert_abs_diff_eq!(q.d2, q.d1 - sigma, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_volatility_limit() {
        let z = 100.0 * 0.03f64.exp() + 5.0;
        let q = bsm_put(100.0, z, 0.03, 0.0, 1.0);
        assert_abs_diff_eq!(q.price, z * (-0.03f64).exp() - 100.0, epsilon = 1e-12);
        assert_eq!(q.delta, -1.0);
        let otm = bsm_put(100.0, 80.0, 0.03, 0.0, 1.0);
        assert_eq!(otm.price, 0.0);
        assert_eq!(otm.delta, 0.0);
        // tiny sigma approaches the limit continuously
        let near = bsm_put_price(100.0, z, 0.03, 1e-8, 1.0);
        assert_abs_diff_eq!(near, q.price, epsilon = 1e-9);
    }

    #[test]
    fn delta_limits() {
        assert!(bsm_put_delta(1000.0, 100.0, 0.03, 0.2, 1.0) > -1e-12);
        assert!(bsm_put_delta(10.0, 100.0, 0.03, 0.2, 1.0) < -1.0 + 1e-12);
    }

    #[test]
    fn delta_matches_central_difference() {
        for (s0, z, sigma) in [
            (100.0, 100.0, 0.15),
            (90.0, 110.0, 0.3),
            (120.0, 95.0, 0.25),
        ] {
            let h = 1e-4 * s0;
            let fd = (bsm_put_price(s0 + h, z, 0.03, sigma, 1.0)
                - bsm_put_price(s0 - h, z, 0.03, sigma, 1.0))
                / (2.0 * h);
            let delta = bsm_put_delta(s0, z, 0.03, sigma, 1.0);
            assert!(((fd - delta) / delta).abs() <= 1e-5, "{fd} vs {delta}");
        }
    }

    proptest! {
        #[test]
        fn price_bounds_and_delta_range(
            s0 in 20.0f64..200.0,
            z in 20.0f64..200.0,
            r in 0.0f64..0.1,
            sigma in 0.01f64..1.0,
            t in 0.05f64..3.0,
        ) {
            let q = bsm_put(s0, z, r, sigma, t);
            let dz = z * (-r * t).exp();
            prop_assert!(q.price >= (dz - s0).max(0.0) - 1e-9);
            prop_assert!(q.price <= dz + 1e-9);
            prop_assert!((-1.0..=0.0).contains(&q.delta));
        }

        #[test]
        fn price_monotonicity(
            s0 in 50.0f64..150.0,
            z in 50.0f64..150.0,
            sigma in 0.05f64..0.8,
        ) {
            let base = bsm_put_price(s0, z, 0.03, sigma, 1.0);
            prop_assert!(bsm_put_price(s0 * 1.01, z, 0.03, sigma, 1.0) <= base + 1e-12);
            prop_assert!(bsm_put_price(s0, z * 1.01, 0.03, sigma, 1.0) >= base - 1e-12);
            prop_assert!(bsm_put_price(s0, z, 0.03, sigma * 1.01, 1.0) >= base - 1e-12);
        }
    }
}
