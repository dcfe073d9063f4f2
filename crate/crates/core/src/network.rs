//! Cross-region influence estimation: per-draw OLS of next-week activations
//! on lagged activations pooled over words, Monte Carlo moments across FFBS
//! draws, Wald z-scores, and a one-tailed FDR-controlled threshold.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::panel::RegionInfo;
use crate::smc::TrajectorySample;

pub const NETWORK_FORMAT_VERSION: &str = "network/1";

/// Gram-matrix condition limit before OLS refuses and suggests ridge.
const OLS_CONDITION_LIMIT: f64 = 1e12;

/// Upper tail of the standard normal, accurate far into the tail.
pub fn normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Least-squares fit of outcomes on lagged states plus bias.
#[derive(Debug, Clone)]
pub struct LinearFit {
    /// a[(m, n)]: coefficient of lagged regressor n in outcome m.
    pub a: DMatrix<f64>,
    pub bias: DVector<f64>,
}

fn solve_normal_equations(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    check_condition: bool,
) -> Result<LinearFit> {
    let n = x.nrows();
    let p = x.ncols(); // lagged regressors + bias column (last)
    if y.nrows() != n {
        return Err(Error::config("design and outcome row counts differ"));
    }
    if check_condition && n < p {
        return Err(Error::data(format!("need at least {p} rows for OLS, got {n}")));
    }
    let mut gram = x.transpose() * x;
    if lambda > 0.0 {
        // Bias (last column) stays unpenalized.
        for i in 0..p - 1 {
            gram[(i, i)] += lambda;
        }
    }
    if check_condition {
        let eig = nalgebra::SymmetricEigen::new(gram.clone());
        let max_e = eig.eigenvalues.max();
        let min_e = eig.eigenvalues.min();
        if !(min_e > 0.0) || max_e / min_e > OLS_CONDITION_LIMIT {
            return Err(Error::numerical(format!(
                "Gram matrix condition {:.3e} exceeds {OLS_CONDITION_LIMIT:.0e}; \
                 use ridge_fit with a positive lambda",
                if min_e > 0.0 { max_e / min_e } else { f64::INFINITY }
            )));
        }
    }
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or_else(|| Error::numerical("Gram matrix not positive definite; use ridge_fit"))?;
    let coef = chol.solve(&(x.transpose() * y)); // p x m
    let m = y.ncols();
    let mut a = DMatrix::zeros(m, p - 1);
    let mut bias = DVector::zeros(m);
    for out in 0..m {
        for reg in 0..p - 1 {
            a[(out, reg)] = coef[(reg, out)];
        }
        bias[out] = coef[(p - 1, out)];
    }
    Ok(LinearFit { a, bias })
}

/// Ordinary least squares via the normal equations with a Cholesky solve.
/// `lagged` must carry the bias column last. Errors with a ridge suggestion
/// when the Gram matrix is ill-conditioned.
pub fn ols_fit(lagged: &DMatrix<f64>, outcomes: &DMatrix<f64>) -> Result<LinearFit> {
    solve_normal_equations(lagged, outcomes, 0.0, true)
}

/// Ridge regression with the bias column unpenalized; lambda = 0 reduces to
/// OLS apart from the condition check.
pub fn ridge_fit(lagged: &DMatrix<f64>, outcomes: &DMatrix<f64>, lambda: f64) -> Result<LinearFit> {
    if lambda < 0.0 {
        return Err(Error::config("ridge lambda must be nonnegative"));
    }
    solve_normal_equations(lagged, outcomes, lambda, false)
}

/// Forward-chaining time-series cross-validation over candidate ridge
/// penalties: the second half of the rows is split into `n_splits`
/// consecutive test chunks, each predicted from all earlier rows.
/// Returns (best lambda, mean squared error per candidate).
pub fn select_ridge_lambda(
    lagged: &DMatrix<f64>,
    outcomes: &DMatrix<f64>,
    candidates: &[f64],
    n_splits: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = lagged.nrows();
    if candidates.is_empty() {
        return Err(Error::config("no ridge candidates supplied"));
    }
    if n < 2 * n_splits.max(1) + 2 {
        return Err(Error::data("too few rows for forward-chaining CV"));
    }
    let start = n / 2;
    let chunk = ((n - start) as f64 / n_splits as f64).ceil() as usize;
    let mut scores = Vec::with_capacity(candidates.len());
    for &lambda in candidates {
        let mut sse = 0.0;
        let mut count = 0usize;
        for split in 0..n_splits {
            let test_lo = start + split * chunk;
            let test_hi = ((test_lo + chunk).min(n)).max(test_lo);
            if test_lo >= n || test_lo == test_hi {
                continue;
            }
            let train_x = lagged.rows(0, test_lo).into_owned();
            let train_y = outcomes.rows(0, test_lo).into_owned();
            let fit = ridge_fit(&train_x, &train_y, lambda)?;
            for row in test_lo..test_hi {
                let x_row = lagged.row(row);
                for out in 0..outcomes.ncols() {
                    let mut pred = fit.bias[out];
                    for reg in 0..lagged.ncols() - 1 {
                        pred += fit.a[(out, reg)] * x_row[reg];
                    }
                    let err = outcomes[(row, out)] - pred;
                    sse += err * err;
                    count += 1;
                }
            }
        }
        scores.push(sse / count.max(1) as f64);
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| candidates[i])
        .unwrap();
    Ok((best, scores))
}

/// Per-ordered-pair network statistics across Monte Carlo draws.
#[derive(Debug, Clone)]
pub struct NetworkEstimate {
    /// Sample mean of A[(m, n)] across draws.
    pub mu: Array2<f64>,
    /// Population variance (divisor K) across draws.
    pub sigma2: Array2<f64>,
    /// Wald statistic; NaN on the diagonal and for degenerate entries.
    pub z: Array2<f64>,
    pub threshold: f64,
    pub significant: Array2<bool>,
    /// Entries with zero Monte Carlo variance, excluded from testing.
    pub degenerate: Array2<bool>,
    pub n_draws: usize,
    pub q: f64,
}

/// Options for `estimate_network`.
#[derive(Debug, Clone)]
pub struct NetworkOptions {
    /// FDR target.
    pub q: f64,
    /// Use the literal mu/sigma^2 statistic instead of the Wald mu/sigma.
    pub literal_wald: bool,
    /// Fit one OLS per word per draw and average, instead of pooling lag
    /// pairs across words into a single regression.
    pub per_word: bool,
    /// Optional ridge penalty for the per-draw regressions.
    pub ridge_lambda: Option<f64>,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions { q: 0.01, literal_wald: false, per_word: false, ridge_lambda: None }
    }
}

/// Builds the lagged design (regional components only, bias last) and
/// outcomes from one trajectory per word.
fn build_design(trajs: &[&TrajectorySample], r_len: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_rows: usize = trajs.iter().map(|t| t.eta.ncols().saturating_sub(1)).sum();
    let mut x = DMatrix::zeros(n_rows, r_len + 1);
    let mut y = DMatrix::zeros(n_rows, r_len);
    let mut row = 0usize;
    for traj in trajs {
        let eta = &traj.eta;
        for t in 1..eta.ncols() {
            for r in 0..r_len {
                x[(row, r)] = eta[(r, t - 1)];
                y[(row, r)] = eta[(r, t)];
            }
            x[(row, r_len)] = 1.0;
            row += 1;
        }
    }
    (x, y)
}

/// Estimates the full cross-region matrix from FFBS draws: one regression per
/// draw (pooled over words), then per-entry mean, variance, and Wald
/// statistic across draws, with the FDR threshold over off-diagonal entries.
pub fn estimate_network(
    samples: &[Vec<TrajectorySample>],
    opts: &NetworkOptions,
) -> Result<NetworkEstimate> {
    let first = samples
        .iter()
        .find(|w| !w.is_empty())
        .ok_or_else(|| Error::data("no successful words to estimate from"))?;
    let n_draws = first.len();
    if n_draws < 2 {
        return Err(Error::data(format!("need at least 2 draws, got {n_draws}")));
    }
    if samples.iter().any(|w| !w.is_empty() && w.len() != n_draws) {
        return Err(Error::data("words carry differing draw counts"));
    }
    let d = first[0].eta.nrows();
    let r_len = d - 1; // global activation excluded from the regression

    let mut per_draw: Vec<DMatrix<f64>> = Vec::with_capacity(n_draws);
    for k in 0..n_draws {
        let a_k = if opts.per_word {
            let mut acc = DMatrix::zeros(r_len, r_len);
            let mut n_words = 0usize;
            for (w, word) in samples.iter().enumerate() {
                if word.is_empty() {
                    continue;
                }
                let (x, y) = build_design(&[&word[k]], r_len);
                let fit = match opts.ridge_lambda {
                    Some(l) => ridge_fit(&x, &y, l)?,
                    None => ols_fit(&x, &y).map_err(|e| {
                        Error::numerical(format!("per-word OLS failed for word {w}: {e}"))
                    })?,
                };
                acc += fit.a;
                n_words += 1;
            }
            acc / n_words.max(1) as f64
        } else {
            let trajs: Vec<&TrajectorySample> = samples
                .iter()
                .filter(|w| !w.is_empty())
                .map(|w| &w[k])
                .collect();
            let (x, y) = build_design(&trajs, r_len);
            let fit = match opts.ridge_lambda {
                Some(l) => ridge_fit(&x, &y, l)?,
                None => ols_fit(&x, &y)?,
            };
            fit.a
        };
        per_draw.push(a_k);
    }

    let kf = n_draws as f64;
    let mut mu = Array2::<f64>::zeros((r_len, r_len));
    let mut sigma2 = Array2::<f64>::zeros((r_len, r_len));
    for m in 0..r_len {
        for n in 0..r_len {
            let mean = per_draw.iter().map(|a| a[(m, n)]).sum::<f64>() / kf;
            let var = per_draw
                .iter()
                .map(|a| (a[(m, n)] - mean) * (a[(m, n)] - mean))
                .sum::<f64>()
                / kf;
            mu[[m, n]] = mean;
            sigma2[[m, n]] = var;
        }
    }

    let mut z = Array2::<f64>::from_elem((r_len, r_len), f64::NAN);
    let mut degenerate = Array2::<bool>::from_elem((r_len, r_len), false);
    let mut off_diag_z = Vec::new();
    for m in 0..r_len {
        for n in 0..r_len {
            if m == n {
                continue;
            }
            if sigma2[[m, n]] == 0.0 {
                degenerate[[m, n]] = true;
                continue;
            }
            let stat = if opts.literal_wald {
                mu[[m, n]] / sigma2[[m, n]]
            } else {
                mu[[m, n]] / sigma2[[m, n]].sqrt()
            };
            z[[m, n]] = stat;
            off_diag_z.push(stat);
        }
    }

    let n_tests = r_len * (r_len.max(1) - 1);
    let threshold = fdr_threshold(&off_diag_z, n_tests, opts.q);
    let mut significant = Array2::<bool>::from_elem((r_len, r_len), false);
    for m in 0..r_len {
        for n in 0..r_len {
            if m != n && !degenerate[[m, n]] && z[[m, n]].is_finite() {
                significant[[m, n]] = z[[m, n]] >= threshold;
            }
        }
    }

    Ok(NetworkEstimate {
        mu,
        sigma2,
        z,
        threshold,
        significant,
        degenerate,
        n_draws,
        q: opts.q,
    })
}

/// One-tailed Benjamini-Hochberg threshold over candidate cutoffs: the
/// smallest observed z-bar with
/// n_tests * tail(z-bar) / #{z >= z-bar} <= q, or +inf when none qualifies.
pub fn fdr_threshold(z_values: &[f64], n_tests: usize, q: f64) -> f64 {
    let mut sorted: Vec<f64> = z_values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return f64::INFINITY;
    }
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best = f64::INFINITY;
    for (j, &cand) in sorted.iter().enumerate() {
        // Skip duplicate candidates except the last of each tie group, so the
        // pass count includes the whole group.
        if j + 1 < sorted.len() && sorted[j + 1] == cand {
            continue;
        }
        let passes = (j + 1) as f64;
        let ratio = n_tests as f64 * normal_tail(cand) / passes;
        if ratio <= q {
            best = best.min(cand);
        }
    }
    best
}

/// A selected directed influence edge: lagged activation in `sender` predicts
/// activation in `receiver`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceEdge {
    pub sender: u32,
    pub receiver: u32,
    pub mu: f64,
    pub sigma: f64,
    pub z: f64,
}

/// Emits significant edges (optionally also mu > mu_min), sorted by z
/// descending with (sender, receiver) breaking ties.
pub fn extract_edges(estimate: &NetworkEstimate, mu_min: Option<f64>) -> Vec<InfluenceEdge> {
    let r_len = estimate.mu.shape()[0];
    let mut edges = Vec::new();
    for m in 0..r_len {
        for n in 0..r_len {
            if m == n || !estimate.significant[[m, n]] {
                continue;
            }
            if let Some(min) = mu_min {
                if estimate.mu[[m, n]] <= min {
                    continue;
                }
            }
            edges.push(InfluenceEdge {
                sender: n as u32,
                receiver: m as u32,
                mu: estimate.mu[[m, n]],
                sigma: estimate.sigma2[[m, n]].sqrt(),
                z: estimate.z[[m, n]],
            });
        }
    }
    edges.sort_by(|a, b| {
        b.z.partial_cmp(&a.z)
            .unwrap()
            .then_with(|| (a.sender, a.receiver).cmp(&(b.sender, b.receiver)))
    });
    edges
}

/// Writes one row per ordered pair with the significance flag; deterministic
/// (sender, receiver) order.
pub fn write_edges_csv(estimate: &NetworkEstimate, path: &Path) -> Result<()> {
    let r_len = estimate.mu.shape()[0];
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sender_id,receiver_id,mu,sigma,z,significant")?;
    for sender in 0..r_len {
        for receiver in 0..r_len {
            if sender == receiver {
                continue;
            }
            let (m, n) = (receiver, sender);
            writeln!(
                out,
                "{sender},{receiver},{},{},{},{}",
                estimate.mu[[m, n]],
                estimate.sigma2[[m, n]].sqrt(),
                estimate.z[[m, n]],
                estimate.significant[[m, n]]
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One row of edges.csv.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRow {
    pub sender_id: u32,
    pub receiver_id: u32,
    pub mu: f64,
    pub sigma: f64,
    pub z: f64,
    pub significant: bool,
}

/// Reads the full ordered-pair table written by `write_edges_csv`.
pub fn read_edges_csv(path: &Path) -> Result<Vec<EdgeRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Rebuilds the significance matrix and the significant edge list from
/// edges.csv rows.
pub fn edges_from_rows(rows: &[EdgeRow]) -> Result<(Array2<bool>, Vec<InfluenceEdge>)> {
    let r_len = rows
        .iter()
        .map(|e| e.sender_id.max(e.receiver_id) as usize + 1)
        .max()
        .ok_or_else(|| Error::data("edges.csv contains no rows"))?;
    let mut significant = Array2::from_elem((r_len, r_len), false);
    let mut edges = Vec::new();
    for row in rows {
        if row.significant {
            significant[[row.receiver_id as usize, row.sender_id as usize]] = true;
            edges.push(InfluenceEdge {
                sender: row.sender_id,
                receiver: row.receiver_id,
                mu: row.mu,
                sigma: row.sigma,
                z: row.z,
            });
        }
    }
    edges.sort_by(|a, b| {
        b.z.partial_cmp(&a.z)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.sender, a.receiver).cmp(&(b.sender, b.receiver)))
    });
    Ok((significant, edges))
}

#[derive(Serialize, Deserialize)]
pub struct NetworkJson {
    pub format_version: String,
    pub n_regions: usize,
    pub n_draws: usize,
    pub q: f64,
    pub wald_statistic: String,
    /// None encodes an infinite threshold (no discoveries).
    pub threshold: Option<f64>,
    pub n_significant: usize,
    pub mu: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// None encodes diagonal / degenerate entries.
    pub z: Vec<Vec<Option<f64>>>,
}

pub fn write_network_json(estimate: &NetworkEstimate, literal_wald: bool, path: &Path) -> Result<()> {
    let r_len = estimate.mu.shape()[0];
    let doc = NetworkJson {
        format_version: NETWORK_FORMAT_VERSION.to_string(),
        n_regions: r_len,
        n_draws: estimate.n_draws,
        q: estimate.q,
        wald_statistic: if literal_wald { "mu_over_sigma2" } else { "mu_over_sigma" }.to_string(),
        threshold: estimate.threshold.is_finite().then_some(estimate.threshold),
        n_significant: estimate.significant.iter().filter(|&&b| b).count(),
        mu: (0..r_len)
            .map(|m| (0..r_len).map(|n| estimate.mu[[m, n]]).collect())
            .collect(),
        sigma2: (0..r_len)
            .map(|m| (0..r_len).map(|n| estimate.sigma2[[m, n]]).collect())
            .collect(),
        z: (0..r_len)
            .map(|m| {
                (0..r_len)
                    .map(|n| estimate.z[[m, n]].is_finite().then_some(estimate.z[[m, n]]))
                    .collect()
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT digraph of significant edges; node labels are region names, edge
/// weight attribute is mu.
pub fn write_network_dot(
    edges: &[InfluenceEdge],
    regions: &[RegionInfo],
    path: &Path,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "digraph influence {{")?;
    let mut used: Vec<u32> = edges.iter().flat_map(|e| [e.sender, e.receiver]).collect();
    used.sort_unstable();
    used.dedup();
    for id in used {
        let name = regions
            .get(id as usize)
            .map(|r| r.name.as_str())
            .unwrap_or("unknown");
        writeln!(out, "  n{id} [label=\"{}\"];", dot_escape(name))?;
    }
    for e in edges {
        writeln!(out, "  n{} -> n{} [weight={:.6}, label=\"{:.4}\"];", e.sender, e.receiver, e.mu, e.mu)?;
    }
    writeln!(out, "}}")?;
    out.flush()?;
    Ok(())
}
