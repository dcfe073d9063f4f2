//! Logistic-binomial observation model and its local Gaussian approximation.
//!
//! A word's usage probability is sigma(nu + tau + eta_global + eta_region);
//! counts are binomial in the exposure. Smoothing linearizes each observation
//! around an expansion point zeta, giving a Gaussian pseudo-observation
//! (m, Sigma^2) of eta_region + eta_global.

use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::panel::CountsPanel;

/// Probability clamp inside `binomial_loglik`; guards log(0) under extreme
/// particles.
pub const THETA_EPS: f64 = 1e-12;

/// Additive smoothing default for logit initializers, keeping c=0 and c=s
/// finite.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Clamp for the background regional activation solver, where a (region,
/// week) cell has zero (or saturated) usage and the balance root escapes to
/// infinity.
const TAU_CLAMP: f64 = 35.0;

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `logistic`; requires p in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Log-likelihood of c successes in s binomial trials at success probability
/// theta. The combinatorial term uses log-gamma; theta is clamped to
/// [THETA_EPS, 1 - THETA_EPS].
pub fn binomial_loglik(c: u64, s: u64, theta: f64) -> Result<f64> {
    if c > s {
        return Err(Error::data(format!("binomial count {c} exceeds trials {s}")));
    }
    if s == 0 {
        return Ok(0.0);
    }
    let theta = theta.clamp(THETA_EPS, 1.0 - THETA_EPS);
    let (cf, sf) = (c as f64, s as f64);
    Ok(log_comb(cf, sf) + cf * theta.ln() + (sf - cf) * (1.0 - theta).ln())
}

fn log_comb(cf: f64, sf: f64) -> f64 {
    ln_gamma(sf + 1.0) - ln_gamma(cf + 1.0) - ln_gamma(sf - cf + 1.0)
}

/// Binomial log-likelihood parameterized by the log-odds x (theta =
/// sigma(x)). Avoids the 1 - theta cancellation near saturation:
/// log sigma(x) = -ln(1 + e^{-x}) and log sigma(-x) = -x - ln(1 + e^{-x}).
pub fn binomial_loglik_logit(c: u64, s: u64, x: f64) -> Result<f64> {
    if c > s {
        return Err(Error::data(format!("binomial count {c} exceeds trials {s}")));
    }
    if s == 0 {
        return Ok(0.0);
    }
    let (cf, sf) = (c as f64, s as f64);
    let (log_p, log_q) = if x >= 0.0 {
        let l = (-x).exp().ln_1p();
        (-l, -x - l)
    } else {
        let l = x.exp().ln_1p();
        (x - l, -l)
    };
    Ok(log_comb(cf, sf) + cf * log_p + (sf - cf) * log_q)
}

/// Gaussian pseudo-observation site for one (word, region, week) cell.
///
/// A missing observation (zero exposure) is encoded with infinite variance so
/// the smoother skips the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorSite {
    /// Expansion point of the linearization, on the full logit scale.
    pub zeta: f64,
    /// Pseudo-observation of eta_region + eta_global.
    pub m: f64,
    /// Pseudo-observation variance.
    pub sigma2: f64,
}

impl TaylorSite {
    pub fn missing() -> Self {
        TaylorSite { zeta: 0.0, m: 0.0, sigma2: f64::INFINITY }
    }

    pub fn is_missing(&self) -> bool {
        !self.sigma2.is_finite()
    }
}

/// Linearizes the binomial emission for (c, s) around `zeta`.
///
/// sigma2 = 1 / (s sigma(zeta) (1 - sigma(zeta)));
/// m = sigma2 (c - s sigma(zeta)) + zeta - tau - nu.
pub fn taylor_params(c: u64, s: u64, zeta: f64, tau: f64, nu: f64) -> TaylorSite {
    if s == 0 {
        return TaylorSite::missing();
    }
    let p = logistic(zeta);
    let sigma2 = 1.0 / (s as f64 * p * (1.0 - p));
    let m = sigma2 * (c as f64 - s as f64 * p) + zeta - tau - nu;
    TaylorSite { zeta, m, sigma2 }
}

/// Initial expansion point: the smoothed relative-frequency logit
/// sigma^{-1}((c + alpha) / (s + 2 alpha)).
pub fn init_zeta(c: u64, s: u64, alpha: f64) -> f64 {
    logit((c as f64 + alpha) / (s as f64 + 2.0 * alpha))
}

/// Refreshed expansion point: the current smoothed posterior mean of the full
/// logit, eta_region + eta_global + tau + nu.
pub fn update_zeta(eta_region: f64, eta_global: f64, tau: f64, nu: f64) -> f64 {
    eta_region + eta_global + tau + nu
}

/// Background parameters: per-word baseline log-odds and the regional-weekly
/// activity offsets.
#[derive(Debug, Clone)]
pub struct BackgroundParams {
    /// Word log-odds baseline, length V.
    pub nu: Vec<f64>,
    /// Regional-temporal activation, R x T; zero where exposure is zero.
    pub tau: Array2<f64>,
}

/// Maximum-likelihood point estimates of (nu, tau) assuming all latent
/// activations are zero.
///
/// nu_i pools counts over all cells; tau_{r,t} solves the count balance
/// sum_i c[i,r,t] = s[r,t] sum_i sigma(nu_i + tau) by a monotone
/// Newton/bisection hybrid.
pub fn estimate_background(panel: &CountsPanel, alpha: f64) -> BackgroundParams {
    let (v, r, t) = (panel.n_words(), panel.n_regions(), panel.n_weeks());

    let total_s: f64 = panel.s.iter().map(|&x| x as f64).sum();
    let mut nu = Vec::with_capacity(v);
    for i in 0..v {
        let total_c: f64 = panel
            .c
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .map(|&x| x as f64)
            .sum();
        nu.push(logit((total_c + alpha) / (total_s + 2.0 * alpha)));
    }

    let mut tau = Array2::<f64>::zeros((r, t));
    for rr in 0..r {
        for tt in 0..t {
            let s_rt = panel.s[[rr, tt]];
            if s_rt == 0 {
                continue;
            }
            let c_total: f64 = (0..v).map(|i| panel.c[[i, rr, tt]] as f64).sum();
            tau[[rr, tt]] = solve_tau(&nu, s_rt as f64, c_total);
        }
    }
    BackgroundParams { nu, tau }
}

/// Root of g(tau) = s * sum_i sigma(nu_i + tau) - c_total, clamped to
/// +-TAU_CLAMP when the root escapes (all-zero or saturated cells).
fn solve_tau(nu: &[f64], s: f64, c_total: f64) -> f64 {
    let g = |tau: f64| -> f64 { s * nu.iter().map(|&n| logistic(n + tau)).sum::<f64>() - c_total };
    let tol = 1e-10 * s.max(1.0);

    let (mut lo, mut hi) = (-TAU_CLAMP, TAU_CLAMP);
    if g(lo) >= 0.0 {
        return lo;
    }
    if g(hi) <= 0.0 {
        return hi;
    }
    let mut tau = 0.0;
    for _ in 0..200 {
        let val = g(tau);
        if val.abs() <= tol {
            return tau;
        }
        if val > 0.0 {
            hi = tau;
        } else {
            lo = tau;
        }
        // Newton step, falling back to bisection when it leaves the bracket.
        let deriv: f64 = s * nu
            .iter()
            .map(|&n| {
                let p = logistic(n + tau);
                p * (1.0 - p)
            })
            .sum::<f64>();
        let newton = tau - val / deriv;
        tau = if deriv > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    use crate::panel::{CountsPanel, RegionInfo};

    fn panel_from(c: Array3<u32>, s: Array2<u32>) -> CountsPanel {
        let (v, r, _) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        CountsPanel {
            c,
            s,
            vocab: (0..v).map(|i| format!("w{i}")).collect(),
            regions: (0..r)
                .map(|i| RegionInfo {
                    region_id: i as u32,
                    name: format!("r{i}"),
                    lat: 0.0,
                    lon: i as f64,
                })
                .collect(),
            week_origin: chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
        }
    }

    #[test]
    fn logistic_midpoint_and_known_value() {
        assert_eq!(logistic(0.0), 0.5);
        assert_abs_diff_eq!(logistic(2.0), 0.88079708, epsilon = 1e-8);
    }

    #[test]
    fn logistic_symmetry_and_extremes() {
        for &x in &[-700.0, -30.5, -2.0, 0.1, 5.0, 700.0] {
            assert_abs_diff_eq!(logistic(x) + logistic(-x), 1.0, epsilon = 1e-15);
            assert!(logistic(x).is_finite());
        }
    }

    #[test]
    fn binomial_loglik_values() {
        // Empty product.
        assert_eq!(binomial_loglik(0, 0, 0.3).unwrap(), 0.0);
        // ln 0.5
        assert_abs_diff_eq!(binomial_loglik(1, 1, 0.5).unwrap(), -0.693147, epsilon = 1e-6);
        // ln(3 * 0.125), enumerating the 3 arrangements of 2 successes in 3 trials.
        assert_abs_diff_eq!(binomial_loglik(2, 3, 0.5).unwrap(), -0.980829, epsilon = 1e-6);
    }

    #[test]
    fn binomial_loglik_rejects_c_above_s() {
        assert!(binomial_loglik(4, 3, 0.5).is_err());
    }

    /// Exact probability by explicit product over outcomes, s <= 20.
    fn brute_force_binomial(c: u64, s: u64, theta: f64) -> f64 {
        let mut comb = 1.0f64;
        for k in 0..c {
            comb = comb * (s - k) as f64 / (k + 1) as f64;
        }
        comb * theta.powi(c as i32) * (1.0 - theta).powi((s - c) as i32)
    }

    #[test]
    fn binomial_loglik_matches_brute_force() {
        for s in 1..=20u64 {
            for c in 0..=s {
                for &theta in &[0.05, 0.3, 0.5, 0.77] {
                    let expected = brute_force_binomial(c, s, theta).ln();
                    assert_abs_diff_eq!(
                        binomial_loglik(c, s, theta).unwrap(),
                        expected,
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn loglik_logit_agrees_with_probability_form() {
        for &(c, s) in &[(0u64, 7u64), (3, 7), (7, 7), (250, 1000)] {
            for &x in &[-8.0, -1.5, 0.0, 2.0, 8.0] {
                let a = binomial_loglik_logit(c, s, x).unwrap();
                let b = binomial_loglik(c, s, logistic(x)).unwrap();
                assert_abs_diff_eq!(a, b, epsilon = 1e-8 * a.abs().max(1.0));
            }
        }
        assert_eq!(binomial_loglik_logit(0, 0, 1.0).unwrap(), 0.0);
        assert!(binomial_loglik_logit(3, 2, 0.0).is_err());
        // Stays finite far beyond where the probability form saturates.
        assert!(binomial_loglik_logit(5, 100, -600.0).unwrap().is_finite());
        assert!(binomial_loglik_logit(5, 100, 600.0).unwrap().is_finite());
    }

    #[test]
    fn taylor_params_examples() {
        let site = taylor_params(50, 100, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(site.sigma2, 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(site.m, 0.0, epsilon = 1e-12);

        let site = taylor_params(75, 100, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(site.sigma2, 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(site.m, 1.0, epsilon = 1e-12);

        let site = taylor_params(20, 200, -2.197225, 0.5, -3.0);
        assert_abs_diff_eq!(site.sigma2, 0.055556, epsilon = 1e-5);
        assert_abs_diff_eq!(site.m, 0.302775, epsilon = 1e-5);
    }

    #[test]
    fn taylor_params_zero_exposure_is_missing() {
        assert!(taylor_params(0, 0, 0.3, 0.1, -2.0).is_missing());
    }

    /// The linearization must match the true emission log-likelihood locally:
    /// curvature -1/sigma2 and gradient (m - (zeta - tau - nu)) / sigma2 at
    /// x = zeta, checked by central finite differences. Tolerance is relative
    /// to the curvature scale 1/sigma2, which floors the comparison when the
    /// gradient itself crosses zero.
    pub(crate) fn check_taylor_identities(c: u64, s: u64, zeta: f64, tau: f64, nu: f64, rel_tol: f64) {
        let site = taylor_params(c, s, zeta, tau, nu);
        let f = |x: f64| binomial_loglik_logit(c, s, x).unwrap();
        // Fixed step: balances O(h^2) truncation against roundoff in the
        // second difference for the (c, s, zeta) ranges exercised here.
        let h = 1.5e-3;
        let grad_fd = (f(zeta + h) - f(zeta - h)) / (2.0 * h);
        let curv_fd = (f(zeta + h) - 2.0 * f(zeta) + f(zeta - h)) / (h * h);
        let grad = (site.m - (zeta - tau - nu)) / site.sigma2;
        let curv = -1.0 / site.sigma2;
        let scale = 1.0 / site.sigma2;
        let grad_err = (grad_fd - grad).abs();
        let curv_err = (curv_fd - curv).abs();
        assert!(
            grad_err <= rel_tol * grad.abs().max(scale),
            "gradient mismatch: fd={grad_fd} analytic={grad} (c={c}, s={s}, zeta={zeta})"
        );
        assert!(
            curv_err <= rel_tol * curv.abs(),
            "curvature mismatch: fd={curv_fd} analytic={curv} (c={c}, s={s}, zeta={zeta})"
        );
    }

    #[test]
    fn taylor_gradient_and_curvature_identities() {
        check_taylor_identities(50, 100, 0.0, 0.0, 0.0, 1e-6);
        check_taylor_identities(3, 870, -4.2, 0.3, -2.0, 1e-6);
        check_taylor_identities(0, 55, -2.0, -0.5, 1.0, 1e-6);
    }

    #[test]
    fn init_zeta_values() {
        assert_abs_diff_eq!(init_zeta(50, 100, 0.5), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(init_zeta(0, 100, 0.5), -5.3033, epsilon = 1e-4);
        assert_abs_diff_eq!(init_zeta(10, 100, 0.0), -2.197225, epsilon = 1e-6);
        assert!(init_zeta(0, 50, 0.5).is_finite());
        assert!(init_zeta(50, 50, 0.5).is_finite());
    }

    #[test]
    fn update_zeta_is_the_logit_sum() {
        assert_eq!(update_zeta(0.0, 0.0, 0.0, -2.0), -2.0);
        let z = update_zeta(0.4, -0.1, 0.2, -3.0);
        assert_eq!(update_zeta(0.4, -0.1, 0.2, -3.0), z);
        assert_abs_diff_eq!(update_zeta(1.5, 0.25, -0.75, -2.0), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn background_single_word_rate_half() {
        let mut c = Array3::zeros((1, 1, 2));
        let mut s = Array2::zeros((1, 2));
        s[[0, 0]] = 10;
        s[[0, 1]] = 10;
        c[[0, 0, 0]] = 5;
        c[[0, 0, 1]] = 5;
        let bg = estimate_background(&panel_from(c, s), 0.0);
        assert_abs_diff_eq!(bg.nu[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn background_single_word_tau_closed_form() {
        // V=1: tau = logit(c/s) - nu exactly.
        let mut c = Array3::zeros((1, 2, 2));
        let mut s = Array2::zeros((2, 2));
        for r in 0..2 {
            for t in 0..2 {
                s[[r, t]] = 100;
            }
        }
        c[[0, 0, 0]] = 30;
        c[[0, 0, 1]] = 50;
        c[[0, 1, 0]] = 10;
        c[[0, 1, 1]] = 70;
        let panel = panel_from(c, s);
        let bg = estimate_background(&panel, 0.0);
        for r in 0..2 {
            for t in 0..2 {
                let expected = logit(panel.c[[0, r, t]] as f64 / 100.0) - bg.nu[0];
                assert_abs_diff_eq!(bg.tau[[r, t]], expected, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn background_uniform_panel_has_equal_tau() {
        let mut c = Array3::zeros((3, 2, 2));
        let mut s = Array2::zeros((2, 2));
        for r in 0..2 {
            for t in 0..2 {
                s[[r, t]] = 50;
                for i in 0..3 {
                    c[[i, r, t]] = 4 + i as u32;
                }
            }
        }
        let bg = estimate_background(&panel_from(c, s), 0.5);
        let first = bg.tau[[0, 0]];
        for r in 0..2 {
            for t in 0..2 {
                assert_abs_diff_eq!(bg.tau[[r, t]], first, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn background_balance_residuals() {
        let mut c = Array3::zeros((4, 3, 3));
        let mut s = Array2::zeros((3, 3));
        let mut x = 17u32;
        for r in 0..3 {
            for t in 0..3 {
                if (r + t) % 4 == 3 {
                    continue; // leave an s=0 hole
                }
                s[[r, t]] = 200;
                for i in 0..4 {
                    x = x.wrapping_mul(1103515245).wrapping_add(12345);
                    c[[i, r, t]] = x % 40;
                }
            }
        }
        let panel = panel_from(c, s);
        let bg = estimate_background(&panel, 0.5);
        for r in 0..3 {
            for t in 0..3 {
                let s_rt = panel.s[[r, t]] as f64;
                if s_rt == 0.0 {
                    assert_eq!(bg.tau[[r, t]], 0.0);
                    continue;
                }
                let c_total: f64 = (0..4).map(|i| panel.c[[i, r, t]] as f64).sum();
                let model: f64 = bg
                    .nu
                    .iter()
                    .map(|&n| s_rt * logistic(n + bg.tau[[r, t]]))
                    .sum();
                assert!((c_total - model).abs() <= 1e-6 * s_rt);
            }
        }
    }

    #[test]
    fn background_all_zero_cell_clamps() {
        let mut c = Array3::zeros((2, 1, 1));
        let mut s = Array2::zeros((1, 1));
        s[[0, 0]] = 100;
        c[[0, 0, 0]] = 0;
        c[[1, 0, 0]] = 0;
        let panel = panel_from(c, s);
        let bg = estimate_background(&panel, 0.5);
        // Root is at -infinity; clamp must still satisfy the residual bound.
        let model: f64 = bg.nu.iter().map(|&n| 100.0 * logistic(n + bg.tau[[0, 0]])).sum();
        assert!(model.abs() <= 1e-6 * 100.0);
    }

    proptest! {
        #[test]
        fn logistic_sigmoid_bounds(x in -700.0f64..700.0) {
            let p = logistic(x);
            // Open interval while representable; f64 saturates to 1.0 above
            // roughly x = 36.7.
            prop_assert!(p > 0.0 && p <= 1.0);
            if x.abs() < 36.0 {
                prop_assert!(p < 1.0);
            }
            prop_assert!((logistic(x) + logistic(-x) - 1.0).abs() < 1e-14);
        }

        #[test]
        fn logit_inverts_logistic(x in -12.0f64..12.0) {
            // Beyond |x| ~ 12 the 1-p subtraction loses enough precision to
            // push the roundtrip error past 1e-9.
            prop_assert!((logit(logistic(x)) - x).abs() < 1e-9 * x.abs().max(1.0));
        }

        #[test]
        fn taylor_identities_random(
            s in 1u64..5000,
            frac in 0.0f64..1.0,
            zeta in -6.0f64..6.0,
            tau in -2.0f64..2.0,
            nu in -6.0f64..2.0,
        ) {
            let c = ((s as f64) * frac).floor() as u64;
            check_taylor_identities(c, s, zeta, tau, nu, 1e-6);
        }
    }
}
