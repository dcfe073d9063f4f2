//! Gaussian state-space smoothing over the (R+1)-dimensional latent vector
//! (per-region activations plus the global activation in the last slot) and
//! EM estimation of the shared dynamics.
//!
//! The transition matrix is diagonal here; pseudo-observations come from the
//! emission module's Taylor sites. Each present site observes
//! eta_region + eta_global with its own variance, so updates run as
//! sequential scalar corrections.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emission::{init_zeta, taylor_params, BackgroundParams, TaylorSite};
use crate::error::{Error, Result};
use crate::panel::CountsPanel;

pub const CHECKPOINT_FORMAT_VERSION: &str = "checkpoint/1";

/// Eigenvalue floor applied when a covariance loses positive definiteness.
const COV_EIGEN_FLOOR: f64 = 1e-12;

/// Process noise floor keeping Gamma positive definite through degenerate
/// M-steps.
const GAMMA_FLOOR: f64 = 1e-12;

/// Process covariance: constrained diagonal by default, with a pooled full
/// option.
#[derive(Debug, Clone)]
pub enum ProcessNoise {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl ProcessNoise {
    pub fn dim(&self) -> usize {
        match self {
            ProcessNoise::Diagonal(d) => d.len(),
            ProcessNoise::Full(m) => m.nrows(),
        }
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        match self {
            ProcessNoise::Diagonal(d) => DMatrix::from_diagonal(d),
            ProcessNoise::Full(m) => m.clone(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, ProcessNoise::Diagonal(_))
    }
}

/// Shared dynamics: diagonal autocorrelations (last entry is the global
/// activation) and the process covariance.
#[derive(Debug, Clone)]
pub struct DynamicsParams {
    pub a_diag: DVector<f64>,
    pub gamma: ProcessNoise,
}

impl DynamicsParams {
    pub fn default_diagonal(dim: usize) -> Self {
        DynamicsParams {
            a_diag: DVector::from_element(dim, 0.5),
            gamma: ProcessNoise::Diagonal(DVector::from_element(dim, 0.5)),
        }
    }

    pub fn dim(&self) -> usize {
        self.a_diag.len()
    }
}

/// Prior belief over the state at the first week.
#[derive(Debug, Clone)]
pub struct InitialBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Output of the RTS smoother for one word.
#[derive(Debug, Clone)]
pub struct SmoothedBelief {
    /// Smoothed means, D x T.
    pub means: DMatrix<f64>,
    /// Per-time smoothed covariances.
    pub covs: Vec<DMatrix<f64>>,
    /// Lag-one cross covariances: lag_one[t] = Cov(x_t, x_{t+1} | all data).
    pub lag_one: Vec<DMatrix<f64>>,
    /// Gaussian evidence of the pseudo-observations.
    pub loglik_bound: f64,
    /// Number of covariance repairs applied during the pass.
    pub psd_fixups: u32,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Re-symmetrizes and clamps eigenvalues at the floor. Returns true when a
/// repair actually changed the matrix.
fn ensure_psd(m: &mut DMatrix<f64>) -> bool {
    symmetrize(m);
    let min_diag = (0..m.nrows()).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_diag >= 0.0 && nalgebra::Cholesky::new(m.clone()).is_some() {
        return false;
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let clamped = eig.eigenvalues.map(|v| v.max(COV_EIGEN_FLOOR));
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(m);
    true
}

/// Cholesky that falls back to an eigenvalue-clamped repair.
fn psd_cholesky(m: &DMatrix<f64>, fixups: &mut u32) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let mut repaired = m.clone();
    if ensure_psd(&mut repaired) {
        *fixups += 1;
        log::warn!("covariance lost positive definiteness; eigenvalues clamped at {COV_EIGEN_FLOOR}");
    }
    nalgebra::Cholesky::new(repaired)
        .ok_or_else(|| Error::numerical("covariance not positive definite after repair"))
}

struct ForwardPass {
    filt_means: Vec<DVector<f64>>,
    filt_covs: Vec<DMatrix<f64>>,
    /// pred[t] is the belief over x_t given sites before t; pred[0] is the
    /// prior.
    pred_means: Vec<DVector<f64>>,
    pred_covs: Vec<DMatrix<f64>>,
    evidence: f64,
    psd_fixups: u32,
}

fn sites_at(sites: &Array2<TaylorSite>, t: usize) -> impl Iterator<Item = (usize, TaylorSite)> + '_ {
    (0..sites.shape()[0]).filter_map(move |r| {
        let site = sites[[r, t]];
        (!site.is_missing()).then_some((r, site))
    })
}

fn forward_pass(
    sites: &Array2<TaylorSite>,
    dynamics: &DynamicsParams,
    init: &InitialBelief,
) -> Result<ForwardPass> {
    let d = dynamics.dim();
    let t_len = sites.shape()[1];
    let gamma = dynamics.gamma.as_matrix();
    let a = &dynamics.a_diag;
    let global = d - 1;

    let mut out = ForwardPass {
        filt_means: Vec::with_capacity(t_len),
        filt_covs: Vec::with_capacity(t_len),
        pred_means: Vec::with_capacity(t_len),
        pred_covs: Vec::with_capacity(t_len),
        evidence: 0.0,
        psd_fixups: 0,
    };

    let mut mean = init.mean.clone();
    let mut cov = init.cov.clone();
    for t in 0..t_len {
        if t > 0 {
            // Predict through the diagonal transition.
            mean = mean.component_mul(a);
            let mut next = gamma.clone();
            for i in 0..d {
                for j in 0..d {
                    next[(i, j)] += a[i] * a[j] * cov[(i, j)];
                }
            }
            cov = next;
        }
        out.pred_means.push(mean.clone());
        out.pred_covs.push(cov.clone());

        for (r, site) in sites_at(sites, t) {
            // Observation of x_r + x_global with variance site.sigma2.
            let ph: DVector<f64> =
                DVector::from_fn(d, |i, _| cov[(i, r)] + cov[(i, global)]);
            let s_pred = ph[r] + ph[global] + site.sigma2;
            if !(s_pred.is_finite() && s_pred > 0.0) {
                return Err(Error::numerical(format!(
                    "non-positive innovation variance {s_pred} at site (r={r}, t={t})"
                )));
            }
            let v = site.m - (mean[r] + mean[global]);
            out.evidence +=
                -0.5 * ((2.0 * std::f64::consts::PI * s_pred).ln() + v * v / s_pred);
            let k = &ph / s_pred;
            mean += &k * v;
            // Rank-one covariance correction.
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] -= k[i] * ph[j];
                }
            }
        }
        symmetrize(&mut cov);
        if (0..d).any(|i| cov[(i, i)] < 0.0) && ensure_psd(&mut cov) {
            out.psd_fixups += 1;
            log::warn!("filtered covariance repaired at t={t}");
        }
        out.filt_means.push(mean.clone());
        out.filt_covs.push(cov.clone());
    }
    Ok(out)
}

/// Gaussian evidence of the pseudo-observations under the dynamics (filter
/// pass only).
pub fn forward_evidence(
    sites: &Array2<TaylorSite>,
    dynamics: &DynamicsParams,
    init: &InitialBelief,
) -> Result<f64> {
    Ok(forward_pass(sites, dynamics, init)?.evidence)
}

/// Exact RTS smoothing under the Gaussian pseudo-observations. Missing sites
/// are skipped in the update step.
pub fn kalman_smooth(
    sites: &Array2<TaylorSite>,
    dynamics: &DynamicsParams,
    init: &InitialBelief,
) -> Result<SmoothedBelief> {
    let d = dynamics.dim();
    let t_len = sites.shape()[1];
    if t_len == 0 {
        return Err(Error::data("cannot smooth an empty time axis"));
    }
    let a = &dynamics.a_diag;
    let mut fwd = forward_pass(sites, dynamics, init)?;

    let mut sm_means: Vec<DVector<f64>> = vec![DVector::zeros(d); t_len];
    let mut sm_covs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); t_len];
    let mut lag_one: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); t_len.saturating_sub(1)];

    sm_means[t_len - 1] = fwd.filt_means[t_len - 1].clone();
    sm_covs[t_len - 1] = fwd.filt_covs[t_len - 1].clone();

    for t in (0..t_len.saturating_sub(1)).rev() {
        let ppred = &fwd.pred_covs[t + 1];
        let chol = psd_cholesky(ppred, &mut fwd.psd_fixups)?;
        // B = A P_t (rows of the filtered covariance scaled by a_i), so that
        // J = P_t A' inv(P_pred) = solve(P_pred, B)'.
        let mut b = fwd.filt_covs[t].clone();
        for i in 0..d {
            for j in 0..d {
                b[(i, j)] *= a[i];
            }
        }
        let j_gain = chol.solve(&b).transpose();

        let mean_diff = &sm_means[t + 1] - &fwd.pred_means[t + 1];
        sm_means[t] = &fwd.filt_means[t] + &j_gain * mean_diff;

        let cov_diff = &sm_covs[t + 1] - ppred;
        let mut cov = &fwd.filt_covs[t] + &j_gain * cov_diff * j_gain.transpose();
        symmetrize(&mut cov);
        if (0..d).any(|i| cov[(i, i)] < 0.0) && ensure_psd(&mut cov) {
            fwd.psd_fixups += 1;
            log::warn!("smoothed covariance repaired at t={t}");
        }
        sm_covs[t] = cov;
        // Backward-decomposition identity: Cov(x_t, x_{t+1}) = J Cov(x_{t+1}).
        lag_one[t] = &j_gain * &sm_covs[t + 1];
    }

    let mut means = DMatrix::zeros(d, t_len);
    for (t, m) in sm_means.iter().enumerate() {
        means.set_column(t, m);
    }
    Ok(SmoothedBelief {
        means,
        covs: sm_covs,
        lag_one,
        loglik_bound: fwd.evidence,
        psd_fixups: fwd.psd_fixups,
    })
}

/// Per-word state initialization: moving-average (window 3) of the logit
/// residual relative to the background, zero where exposure is zero, with an
/// isotropic initial covariance.
pub fn initialize_state(
    c_word: ArrayView2<'_, u32>,
    s: &Array2<u32>,
    nu_word: f64,
    tau: &Array2<f64>,
    alpha: f64,
    init_var: f64,
) -> (InitialBelief, DMatrix<f64>) {
    let (r_len, t_len) = (c_word.shape()[0], c_word.shape()[1]);
    let d = r_len + 1;
    let mut eta_init = DMatrix::zeros(d, t_len);
    for r in 0..r_len {
        for t in 0..t_len {
            // Centered window of up to three weeks, using observed cells only.
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(t_len - 1);
            let mut sum = 0.0;
            let mut n = 0usize;
            for u in lo..=hi {
                if s[[r, u]] > 0 {
                    sum += init_zeta(c_word[[r, u]] as u64, s[[r, u]] as u64, alpha)
                        - nu_word
                        - tau[[r, u]];
                    n += 1;
                }
            }
            if n > 0 {
                eta_init[(r, t)] = sum / n as f64;
            }
        }
    }
    let belief = InitialBelief {
        mean: eta_init.column(0).into_owned(),
        cov: DMatrix::identity(d, d) * init_var,
    };
    (belief, eta_init)
}

/// Builds the initial Taylor sites for every word from the relative-frequency
/// expansion points.
pub fn init_sites(panel: &CountsPanel, background: &BackgroundParams, alpha: f64) -> Vec<Array2<TaylorSite>> {
    let (v, r_len, t_len) = (panel.n_words(), panel.n_regions(), panel.n_weeks());
    (0..v)
        .map(|i| {
            Array2::from_shape_fn((r_len, t_len), |(r, t)| {
                let s = panel.s[[r, t]] as u64;
                if s == 0 {
                    TaylorSite::missing()
                } else {
                    let c = panel.c[[i, r, t]] as u64;
                    taylor_params(
                        c,
                        s,
                        init_zeta(c, s, alpha),
                        background.tau[[r, t]],
                        background.nu[i],
                    )
                }
            })
        })
        .collect()
}

/// Expected sufficient statistics for the transition M-step, pooled across
/// words.
#[derive(Debug, Clone)]
pub struct SuffStats {
    /// sum E[x_t x_t'] over t = 1..T-1.
    pub s00: DMatrix<f64>,
    /// sum E[x_{t+1} x_{t+1}'].
    pub s11: DMatrix<f64>,
    /// sum E[x_{t+1} x_t'].
    pub s10: DMatrix<f64>,
    pub n_pairs: usize,
}

impl SuffStats {
    pub fn zeros(dim: usize) -> Self {
        SuffStats {
            s00: DMatrix::zeros(dim, dim),
            s11: DMatrix::zeros(dim, dim),
            s10: DMatrix::zeros(dim, dim),
            n_pairs: 0,
        }
    }

    pub fn absorb(&mut self, belief: &SmoothedBelief) {
        let t_len = belief.covs.len();
        for t in 0..t_len.saturating_sub(1) {
            let m0 = belief.means.column(t);
            let m1 = belief.means.column(t + 1);
            self.s00 += &belief.covs[t] + m0 * m0.transpose();
            self.s11 += &belief.covs[t + 1] + m1 * m1.transpose();
            // lag_one[t] = Cov(x_t, x_{t+1}); its transpose is Cov(x_{t+1}, x_t).
            self.s10 += belief.lag_one[t].transpose() + m1 * m0.transpose();
            self.n_pairs += 1;
        }
    }
}

/// Closed-form M-step for the diagonal transition; the full-covariance
/// variant takes a conditional-maximization step (a given previous Gamma,
/// then Gamma given the new a), which preserves EM monotonicity.
pub fn m_step(stats: &SuffStats, full_gamma: bool, previous: &DynamicsParams) -> Result<DynamicsParams> {
    let d = stats.s00.nrows();
    let n = stats.n_pairs.max(1) as f64;
    let mut a = DVector::zeros(d);
    if full_gamma {
        let gamma_prev = previous.gamma.as_matrix();
        let chol = nalgebra::Cholesky::new(gamma_prev)
            .ok_or_else(|| Error::numerical("previous Gamma not positive definite"))?;
        let gamma_inv = chol.inverse();
        let mut q = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for i in 0..d {
            for j in 0..d {
                q[(i, j)] = gamma_inv[(i, j)] * stats.s00[(i, j)];
                b[j] += gamma_inv[(i, j)] * stats.s10[(i, j)];
            }
        }
        let chol_q = nalgebra::Cholesky::new(q)
            .ok_or_else(|| Error::numerical("degenerate sufficient statistics in M-step"))?;
        a = chol_q.solve(&b);
    } else {
        for i in 0..d {
            let den = stats.s00[(i, i)];
            a[i] = if den > 1e-12 { stats.s10[(i, i)] / den } else { 0.0 };
        }
    }

    let gamma = if full_gamma {
        let a_mat = DMatrix::from_diagonal(&a);
        let mut g = (&stats.s11 - &a_mat * stats.s10.transpose() - &stats.s10 * &a_mat
            + &a_mat * &stats.s00 * &a_mat)
            / n;
        symmetrize(&mut g);
        let eig = nalgebra::SymmetricEigen::new(g.clone());
        if eig.eigenvalues.iter().any(|&v| v < GAMMA_FLOOR) {
            let clamped = eig.eigenvalues.map(|v| v.max(GAMMA_FLOOR));
            g = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            symmetrize(&mut g);
        }
        ProcessNoise::Full(g)
    } else {
        let mut g = DVector::zeros(d);
        for i in 0..d {
            let v = (stats.s11[(i, i)] - 2.0 * a[i] * stats.s10[(i, i)]
                + a[i] * a[i] * stats.s00[(i, i)])
                / n;
            g[i] = v.max(GAMMA_FLOOR);
        }
        ProcessNoise::Diagonal(g)
    };
    Ok(DynamicsParams { a_diag: a, gamma })
}

/// Knobs for `em_fit`.
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative change of the bound that stops iteration.
    pub rel_tol: f64,
    /// Additive smoothing for logit initializers.
    pub alpha: f64,
    pub init_state_var: f64,
    pub full_gamma: bool,
    /// Refresh expansion points each iteration (the production setting).
    pub update_zeta: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 100,
            rel_tol: 1e-6,
            alpha: crate::emission::DEFAULT_ALPHA,
            init_state_var: 1.0,
            full_gamma: false,
            update_zeta: true,
        }
    }
}

/// One row of the EM convergence trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmTraceRow {
    pub iter: usize,
    /// Evidence after re-smoothing (current sites, current dynamics).
    pub bound: f64,
    /// Evidence under the new dynamics with sites held fixed; must not fall
    /// below the previous bound.
    pub bound_check: f64,
    /// Same-site improvement from the M-step.
    pub m_step_gain: f64,
    pub max_zeta_delta: f64,
    pub rel_change: f64,
}

/// Result of the EM fit.
pub struct EmFit {
    pub dynamics: DynamicsParams,
    pub sites: Vec<Array2<TaylorSite>>,
    pub beliefs: Vec<SmoothedBelief>,
    pub init_beliefs: Vec<InitialBelief>,
    pub trace: Vec<EmTraceRow>,
    pub converged: bool,
}

fn e_step(
    sites: &[Array2<TaylorSite>],
    dynamics: &DynamicsParams,
    inits: &[InitialBelief],
) -> Result<(Vec<SmoothedBelief>, f64)> {
    let beliefs: Vec<SmoothedBelief> = sites
        .par_iter()
        .zip(inits.par_iter())
        .map(|(s, init)| kalman_smooth(s, dynamics, init))
        .collect::<Result<_>>()?;
    // Bound summed in word order for bitwise reproducibility.
    let bound = beliefs.iter().map(|b| b.loglik_bound).sum();
    Ok((beliefs, bound))
}

/// Alternates per-word smoothing, expansion-point refreshes, and the pooled
/// M-step until the bound stabilizes.
pub fn em_fit(
    panel: &CountsPanel,
    background: &BackgroundParams,
    init_dynamics: Option<DynamicsParams>,
    opts: &EmOptions,
) -> Result<EmFit> {
    panel.validate()?;
    let (v, _r_len, t_len) = (panel.n_words(), panel.n_regions(), panel.n_weeks());
    if t_len < 2 {
        return Err(Error::data("EM needs at least two weeks of data"));
    }
    let d = panel.n_regions() + 1;
    let mut dynamics = init_dynamics.unwrap_or_else(|| DynamicsParams::default_diagonal(d));
    if dynamics.dim() != d {
        return Err(Error::config(format!(
            "dynamics dimension {} does not match panel ({} regions + global)",
            dynamics.dim(),
            d - 1
        )));
    }

    let mut sites = init_sites(panel, background, opts.alpha);
    let init_beliefs: Vec<InitialBelief> = (0..v)
        .map(|i| {
            initialize_state(
                panel.c.index_axis(Axis(0), i),
                &panel.s,
                background.nu[i],
                &background.tau,
                opts.alpha,
                opts.init_state_var,
            )
            .0
        })
        .collect();

    let (mut beliefs, mut bound) = e_step(&sites, &dynamics, &init_beliefs)?;
    let mut trace: Vec<EmTraceRow> = vec![EmTraceRow {
        iter: 0,
        bound,
        bound_check: bound,
        m_step_gain: 0.0,
        max_zeta_delta: 0.0,
        rel_change: f64::INFINITY,
    }];
    let mut converged = false;

    for iter in 1..=opts.max_iter {
        let mut stats = SuffStats::zeros(d);
        for b in &beliefs {
            stats.absorb(b);
        }
        let new_dynamics = m_step(&stats, opts.full_gamma, &dynamics)?;

        // The M-step must not decrease the evidence while the sites are held
        // fixed; a violation means the approximation collapsed numerically.
        let bound_check: f64 = sites
            .par_iter()
            .zip(init_beliefs.par_iter())
            .map(|(s, init)| forward_evidence(s, &new_dynamics, init))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum();
        let tol = 1e-8 * bound.abs().max(1.0);
        if bound_check < bound - tol {
            return Err(Error::numerical(format!(
                "EM bound decreased at iteration {iter}: {bound} -> {bound_check} \
                 (a_diag range [{:.4}, {:.4}]); approximation failure",
                new_dynamics.a_diag.min(),
                new_dynamics.a_diag.max()
            )));
        }

        let mut max_dzeta = 0.0f64;
        if opts.update_zeta {
            max_dzeta = refresh_sites(panel, background, &beliefs, &mut sites);
        }
        dynamics = new_dynamics;

        let (new_beliefs, new_bound) = e_step(&sites, &dynamics, &init_beliefs)?;
        beliefs = new_beliefs;
        let rel = (new_bound - bound).abs() / bound.abs().max(1.0);
        trace.push(EmTraceRow {
            iter,
            bound: new_bound,
            bound_check,
            m_step_gain: bound_check - bound,
            max_zeta_delta: max_dzeta,
            rel_change: rel,
        });
        bound = new_bound;
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(EmFit {
        dynamics,
        sites,
        beliefs,
        init_beliefs,
        trace,
        converged,
    })
}

/// Moves every present site's expansion point to the smoothed posterior mean
/// of the full logit; returns max |delta zeta|.
fn refresh_sites(
    panel: &CountsPanel,
    background: &BackgroundParams,
    beliefs: &[SmoothedBelief],
    sites: &mut [Array2<TaylorSite>],
) -> f64 {
    let (r_len, t_len) = (panel.n_regions(), panel.n_weeks());
    let global = r_len;
    let mut max_delta = 0.0f64;
    for (i, word_sites) in sites.iter_mut().enumerate() {
        let means = &beliefs[i].means;
        for r in 0..r_len {
            for t in 0..t_len {
                let s = panel.s[[r, t]] as u64;
                if s == 0 {
                    continue;
                }
                let zeta = crate::emission::update_zeta(
                    means[(r, t)],
                    means[(global, t)],
                    background.tau[[r, t]],
                    background.nu[i],
                );
                let delta = (zeta - word_sites[[r, t]].zeta).abs();
                max_delta = max_delta.max(delta);
                word_sites[[r, t]] = taylor_params(
                    panel.c[[i, r, t]] as u64,
                    s,
                    zeta,
                    background.tau[[r, t]],
                    background.nu[i],
                );
            }
        }
    }
    max_delta
}

/// Serialized model state: dynamics, background, and the expansion points.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub a_diag: Vec<f64>,
    pub gamma_diag: Option<Vec<f64>>,
    pub gamma_full: Option<Vec<Vec<f64>>>,
    pub nu: Vec<f64>,
    pub tau: Vec<Vec<f64>>,
    /// zeta[i][r][t]; ignored where exposure is zero.
    pub zeta: Vec<Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn from_fit(dynamics: &DynamicsParams, background: &BackgroundParams, sites: &[Array2<TaylorSite>]) -> Self {
        let (gamma_diag, gamma_full) = match &dynamics.gamma {
            ProcessNoise::Diagonal(dd) => (Some(dd.iter().copied().collect()), None),
            ProcessNoise::Full(m) => (
                None,
                Some((0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()),
            ),
        };
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION.to_string(),
            a_diag: dynamics.a_diag.iter().copied().collect(),
            gamma_diag,
            gamma_full,
            nu: background.nu.clone(),
            tau: background
                .tau
                .rows()
                .into_iter()
                .map(|row| row.iter().copied().collect())
                .collect(),
            zeta: sites
                .iter()
                .map(|word| {
                    (0..word.shape()[0])
                        .map(|r| (0..word.shape()[1]).map(|t| word[[r, t]].zeta).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint format {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn dynamics(&self) -> Result<DynamicsParams> {
        let a_diag = DVector::from_vec(self.a_diag.clone());
        let gamma = match (&self.gamma_diag, &self.gamma_full) {
            (Some(d), None) => ProcessNoise::Diagonal(DVector::from_vec(d.clone())),
            (None, Some(rows)) => {
                let n = rows.len();
                let mut m = DMatrix::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                ProcessNoise::Full(m)
            }
            _ => return Err(Error::data("checkpoint must carry exactly one Gamma form")),
        };
        Ok(DynamicsParams { a_diag, gamma })
    }

    pub fn background(&self) -> BackgroundParams {
        let r = self.tau.len();
        let t = self.tau.first().map(|x| x.len()).unwrap_or(0);
        let mut tau = Array2::zeros((r, t));
        for (i, row) in self.tau.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                tau[[i, j]] = v;
            }
        }
        BackgroundParams { nu: self.nu.clone(), tau }
    }

    /// Rebuilds the Taylor sites against a panel (m and sigma2 are derived
    /// from the stored expansion points).
    pub fn sites_for(&self, panel: &CountsPanel) -> Result<Vec<Array2<TaylorSite>>> {
        let (v, r_len, t_len) = (panel.n_words(), panel.n_regions(), panel.n_weeks());
        if self.zeta.len() != v {
            return Err(Error::data("checkpoint zeta does not match panel vocabulary"));
        }
        let background = self.background();
        let mut out = Vec::with_capacity(v);
        for i in 0..v {
            if self.zeta[i].len() != r_len || self.zeta[i].iter().any(|row| row.len() != t_len) {
                return Err(Error::data("checkpoint zeta shape mismatch"));
            }
            out.push(Array2::from_shape_fn((r_len, t_len), |(r, t)| {
                let s = panel.s[[r, t]] as u64;
                if s == 0 {
                    TaylorSite::missing()
                } else {
                    taylor_params(
                        panel.c[[i, r, t]] as u64,
                        s,
                        self.zeta[i][r][t],
                        background.tau[[r, t]],
                        background.nu[i],
                    )
                }
            }));
        }
        Ok(out)
    }
}
