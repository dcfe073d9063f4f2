//! Bootstrap particle filtering and forward-filtering backward-sampling,
//! yielding unweighted posterior trajectory draws of the latent activations
//! under the exact binomial emission model.
//!
//! The proposal is the transition prior, so forward weights are the running
//! product of emission likelihoods, kept in log space. Resampling is off by
//! default; the plain bootstrap filter is the reference configuration.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::emission::{BackgroundParams, TaylorSite};
use crate::error::{Error, Result};
use crate::kalman::{initialize_state, DynamicsParams, InitialBelief, ProcessNoise};
use crate::panel::CountsPanel;
use crate::rng::substream_rng;

/// Emission model driving the particle weights: binomial counts in
/// production, Gaussian pseudo-observations for linear-Gaussian verification.
pub enum EmissionModel<'a> {
    Binomial(BinomialEmission<'a>),
    Gaussian { sites: &'a Array2<TaylorSite> },
}

/// Binomial counts with the particle-independent log-combinatorial terms
/// precomputed; the per-particle cost is two stable log-sigmoid evaluations.
pub struct BinomialEmission<'a> {
    c: ArrayView2<'a, u32>,
    s: ArrayView2<'a, u32>,
    nu: f64,
    tau: &'a Array2<f64>,
    log_comb: Array2<f64>,
}

impl<'a> BinomialEmission<'a> {
    pub fn new(
        c: ArrayView2<'a, u32>,
        s: ArrayView2<'a, u32>,
        nu: f64,
        tau: &'a Array2<f64>,
    ) -> Self {
        use statrs::function::gamma::ln_gamma;
        let log_comb = Array2::from_shape_fn(c.raw_dim(), |(r, t)| {
            let (cf, sf) = (c[[r, t]] as f64, s[[r, t]] as f64);
            if sf == 0.0 {
                0.0
            } else {
                ln_gamma(sf + 1.0) - ln_gamma(cf + 1.0) - ln_gamma(sf - cf + 1.0)
            }
        });
        BinomialEmission { c, s, nu, tau, log_comb }
    }
}

impl<'a> EmissionModel<'a> {
    pub fn binomial(
        c: ArrayView2<'a, u32>,
        s: ArrayView2<'a, u32>,
        nu: f64,
        tau: &'a Array2<f64>,
    ) -> Self {
        EmissionModel::Binomial(BinomialEmission::new(c, s, nu, tau))
    }

    pub fn n_regions(&self) -> usize {
        match self {
            EmissionModel::Binomial(b) => b.c.shape()[0],
            EmissionModel::Gaussian { sites } => sites.shape()[0],
        }
    }

    pub fn n_weeks(&self) -> usize {
        match self {
            EmissionModel::Binomial(b) => b.c.shape()[1],
            EmissionModel::Gaussian { sites } => sites.shape()[1],
        }
    }

    /// Log-likelihood of the week-t observations for one particle state.
    fn loglik(&self, t: usize, state: &DVector<f64>) -> Result<f64> {
        let r_len = self.n_regions();
        let global = state.len() - 1;
        let mut total = 0.0;
        match self {
            EmissionModel::Binomial(b) => {
                for r in 0..r_len {
                    let s_rt = b.s[[r, t]];
                    if s_rt == 0 {
                        continue;
                    }
                    let (cf, sf) = (b.c[[r, t]] as f64, s_rt as f64);
                    if cf > sf {
                        return Err(Error::data(format!("count exceeds exposure at ({r},{t})")));
                    }
                    let x = b.nu + b.tau[[r, t]] + state[global] + state[r];
                    let (log_p, log_q) = if x >= 0.0 {
                        let l = (-x).exp().ln_1p();
                        (-l, -x - l)
                    } else {
                        let l = x.exp().ln_1p();
                        (x - l, -l)
                    };
                    total += b.log_comb[[r, t]] + cf * log_p + (sf - cf) * log_q;
                }
            }
            EmissionModel::Gaussian { sites } => {
                for r in 0..r_len {
                    let site = sites[[r, t]];
                    if site.is_missing() {
                        continue;
                    }
                    let v = state[r] + state[global] - site.m;
                    total += -0.5
                        * ((2.0 * std::f64::consts::PI * site.sigma2).ln()
                            + v * v / site.sigma2);
                }
            }
        }
        Ok(total)
    }
}

/// Transition density kernel with a fast diagonal path.
pub(crate) struct TransitionKernel {
    a: DVector<f64>,
    prec: Precision,
    chol_scale: DMatrix<f64>,
}

enum Precision {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

impl TransitionKernel {
    fn new(dynamics: &DynamicsParams) -> Result<Self> {
        let (prec, chol_scale) = match &dynamics.gamma {
            ProcessNoise::Diagonal(g) => {
                if g.iter().any(|&v| v <= 0.0) {
                    return Err(Error::numerical("process noise must be positive"));
                }
                let prec = Precision::Diag(g.map(|v| 1.0 / v));
                let scale = DMatrix::from_diagonal(&g.map(|v| v.sqrt()));
                (prec, scale)
            }
            ProcessNoise::Full(m) => {
                let chol = nalgebra::Cholesky::new(m.clone())
                    .ok_or_else(|| Error::numerical("process covariance not positive definite"))?;
                let inv = chol.inverse();
                let scale = chol.l();
                (Precision::Full(inv), scale)
            }
        };
        Ok(TransitionKernel { a: dynamics.a_diag.clone(), prec, chol_scale })
    }

    /// Log density of `next` given `prev`, up to the normalization constant
    /// shared by all particles.
    fn logpdf_unnormalized(&self, next: &DVector<f64>, prev: &DVector<f64>) -> f64 {
        let delta = next - prev.component_mul(&self.a);
        match &self.prec {
            Precision::Diag(p) => -0.5 * delta.iter().zip(p.iter()).map(|(d, q)| d * d * q).sum::<f64>(),
            Precision::Full(pm) => -0.5 * (delta.transpose() * pm * &delta)[(0, 0)],
        }
    }

    fn sample_step(&self, prev: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let d = prev.len();
        let z = DVector::from_fn(d, |_, _| standard_normal(rng));
        prev.component_mul(&self.a) + &self.chol_scale * z
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Forward filter output: particles and normalized log-weights per week.
pub struct ForwardParticles {
    /// Per week: D x K particle states.
    pub states: Vec<DMatrix<f64>>,
    /// Per week: K normalized log-weights (logsumexp = 0).
    pub log_weights: Vec<Vec<f64>>,
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
}

/// Bootstrap filter: proposal equals the transition, weights accumulate the
/// emission likelihood. Optional multinomial resampling when ESS < K/2.
pub fn bootstrap_forward(
    emission: &EmissionModel<'_>,
    dynamics: &DynamicsParams,
    init: &InitialBelief,
    k: usize,
    rng: &mut ChaCha8Rng,
    resample: bool,
) -> Result<ForwardParticles> {
    if k < 2 {
        return Err(Error::config("need at least 2 particles"));
    }
    let d = dynamics.dim();
    let t_len = emission.n_weeks();
    let kernel = TransitionKernel::new(dynamics)?;
    let init_chol = nalgebra::Cholesky::new(init.cov.clone())
        .ok_or_else(|| Error::numerical("initial covariance not positive definite"))?;
    let init_l = init_chol.l();

    let mut out = ForwardParticles {
        states: Vec::with_capacity(t_len),
        log_weights: Vec::with_capacity(t_len),
        ess: Vec::with_capacity(t_len),
        resampled: vec![false; t_len],
    };

    let mut states = DMatrix::zeros(d, k);
    let mut log_w = vec![0.0f64; k];
    for t in 0..t_len {
        // Propagate.
        for p in 0..k {
            let col = if t == 0 {
                let z = DVector::from_fn(d, |_, _| standard_normal(rng));
                &init.mean + &init_l * z
            } else {
                let prev = out.states[t - 1].column(p).into_owned();
                kernel.sample_step(&prev, rng)
            };
            states.set_column(p, &col);
        }
        // Weight.
        for p in 0..k {
            let col = states.column(p).into_owned();
            log_w[p] += emission.loglik(t, &col)?;
        }
        let lse = logsumexp(&log_w);
        if !lse.is_finite() {
            return Err(Error::numerical(format!(
                "all particle weights vanished at week {t}; model/parameter mismatch"
            )));
        }
        for w in log_w.iter_mut() {
            *w -= lse;
        }
        let ess = 1.0 / log_w.iter().map(|&w| (2.0 * w).exp()).sum::<f64>();
        out.ess.push(ess);

        if resample && ess < k as f64 / 2.0 {
            let weights: Vec<f64> = log_w.iter().map(|&w| w.exp()).collect();
            let mut resampled = DMatrix::zeros(d, k);
            for p in 0..k {
                let idx = categorical(&weights, rng);
                resampled.set_column(p, &states.column(idx));
            }
            states = resampled;
            let uniform = -(k as f64).ln();
            log_w.iter_mut().for_each(|w| *w = uniform);
            out.resampled[t] = true;
        }
        out.states.push(states.clone());
        out.log_weights.push(log_w.clone());
    }
    Ok(out)
}

/// Draws one index from normalized (linear) weights via the inverse CDF.
fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Backward selection probabilities at week t, given the selected particle at
/// week t+1: filtering weight times transition density, normalized.
pub(crate) fn backward_weights(
    log_weights_t: &[f64],
    states_t: &DMatrix<f64>,
    next_state: &DVector<f64>,
    kernel: &TransitionKernel,
) -> Result<Vec<f64>> {
    let k = log_weights_t.len();
    let mut log_probs = Vec::with_capacity(k);
    for p in 0..k {
        let prev = states_t.column(p).into_owned();
        log_probs.push(log_weights_t[p] + kernel.logpdf_unnormalized(next_state, &prev));
    }
    let lse = logsumexp(&log_probs);
    if !lse.is_finite() {
        return Err(Error::numerical("backward weights vanished"));
    }
    Ok(log_probs.into_iter().map(|lp| (lp - lse).exp()).collect())
}

/// One unweighted posterior draw of the whole trajectory.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    /// D x T latent states; the global activation is the last row.
    pub eta: DMatrix<f64>,
}

/// Backward pass of FFBS: categorical draw at T from the final weights, then
/// backward selection proportional to weight times transition probability.
pub fn ffbs_backward(
    fwd: &ForwardParticles,
    dynamics: &DynamicsParams,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectorySample> {
    let t_len = fwd.states.len();
    if t_len == 0 {
        return Err(Error::data("empty forward pass"));
    }
    let d = fwd.states[0].nrows();
    let kernel = TransitionKernel::new(dynamics)?;
    let mut eta = DMatrix::zeros(d, t_len);

    let final_weights: Vec<f64> = fwd.log_weights[t_len - 1].iter().map(|&w| w.exp()).collect();
    let mut idx = categorical(&final_weights, rng);
    eta.set_column(t_len - 1, &fwd.states[t_len - 1].column(idx));

    for t in (0..t_len - 1).rev() {
        let next_state = eta.column(t + 1).into_owned();
        let probs = backward_weights(&fwd.log_weights[t], &fwd.states[t], &next_state, &kernel)?;
        idx = categorical(&probs, rng);
        eta.set_column(t, &fwd.states[t].column(idx));
    }
    Ok(TrajectorySample { eta })
}

/// FFBS draws for every word in the panel.
pub struct SampledTrajectories {
    /// per_word[i] holds n_samples draws; empty when the word failed.
    pub per_word: Vec<Vec<TrajectorySample>>,
    pub failures: Vec<(usize, String)>,
}

/// Options for trajectory sampling.
#[derive(Debug, Clone)]
pub struct SmcOptions {
    pub n_particles: usize,
    pub n_samples: usize,
    /// Independent forward passes the draws are spread over. Draws sharing
    /// one particle set are correlated through it; batching folds the
    /// particle-set variability into the across-draw spread that the network
    /// stage turns into confidence intervals. The backward pass dominates the
    /// cost, so extra forward passes are nearly free.
    pub n_batches: usize,
    pub seed: u64,
    pub resample: bool,
    pub alpha: f64,
    pub init_state_var: f64,
}

impl Default for SmcOptions {
    fn default() -> Self {
        SmcOptions {
            n_particles: 200,
            n_samples: 100,
            n_batches: 10,
            seed: 0,
            resample: true,
            alpha: crate::emission::DEFAULT_ALPHA,
            init_state_var: 1.0,
        }
    }
}

/// RNG substream offset for per-batch forward passes; draw substreams use
/// 1..=n_samples.
const FORWARD_SUBSTREAM_BASE: u64 = 2_000_000_000;

/// Runs batched forward filters per word and FFBS draws against them. Words
/// are independent; RNG substreams derive from (seed, word, batch/draw), so
/// worker scheduling cannot change results.
pub fn sample_trajectories(
    panel: &CountsPanel,
    background: &BackgroundParams,
    dynamics: &DynamicsParams,
    opts: &SmcOptions,
) -> Result<SampledTrajectories> {
    let v = panel.n_words();
    if opts.n_samples == 0 {
        return Ok(SampledTrajectories { per_word: vec![Vec::new(); v], failures: Vec::new() });
    }
    let n_batches = opts.n_batches.max(1).min(opts.n_samples);
    let results: Vec<std::result::Result<Vec<TrajectorySample>, String>> = (0..v)
        .into_par_iter()
        .map(|w| {
            let c_word = panel.c.index_axis(Axis(0), w);
            let emission =
                EmissionModel::binomial(c_word, panel.s.view(), background.nu[w], &background.tau);
            let (init, _) = initialize_state(
                c_word,
                &panel.s,
                background.nu[w],
                &background.tau,
                opts.alpha,
                opts.init_state_var,
            );
            let mut forwards = Vec::with_capacity(n_batches);
            for b in 0..n_batches {
                let mut fwd_rng =
                    substream_rng(opts.seed, w as u64, FORWARD_SUBSTREAM_BASE + b as u64);
                forwards.push(
                    bootstrap_forward(
                        &emission,
                        dynamics,
                        &init,
                        opts.n_particles,
                        &mut fwd_rng,
                        opts.resample,
                    )
                    .map_err(|e| e.to_string())?,
                );
            }
            let mut draws = Vec::with_capacity(opts.n_samples);
            for j in 0..opts.n_samples {
                let fwd = &forwards[j % n_batches];
                let mut rng = substream_rng(opts.seed, w as u64, 1 + j as u64);
                draws.push(ffbs_backward(fwd, dynamics, &mut rng).map_err(|e| e.to_string())?);
            }
            Ok(draws)
        })
        .collect();

    let mut per_word = Vec::with_capacity(v);
    let mut failures = Vec::new();
    for (w, res) in results.into_iter().enumerate() {
        match res {
            Ok(draws) => per_word.push(draws),
            Err(msg) => {
                log::warn!("word {w} excluded from sampling: {msg}");
                failures.push((w, msg));
                per_word.push(Vec::new());
            }
        }
    }
    Ok(SampledTrajectories { per_word, failures })
}

/// Index file for the binary trajectory dump.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct TrajectoryDumpIndex {
    pub format_version: String,
    pub state_dim: usize,
    pub n_weeks: usize,
    /// (word, draw, byte offset) per stored matrix.
    pub entries: Vec<(usize, usize, u64)>,
}

pub const TRAJECTORY_DUMP_FORMAT_VERSION: &str = "trajdump/1";

/// Writes every draw as a little-endian f64 matrix (dimension-major rows,
/// weeks as columns) into trajectories.bin, with offsets in index.json.
pub fn dump_trajectories(samples: &SampledTrajectories, dir: &std::path::Path) -> Result<()> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;
    let first = samples
        .per_word
        .iter()
        .find(|w| !w.is_empty())
        .ok_or_else(|| Error::data("nothing to dump: no successful words"))?;
    let (d, t_len) = (first[0].eta.nrows(), first[0].eta.ncols());
    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join("trajectories.bin"))?);
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (w, draws) in samples.per_word.iter().enumerate() {
        for (j, draw) in draws.iter().enumerate() {
            entries.push((w, j, offset));
            for dim in 0..d {
                for t in 0..t_len {
                    bin.write_all(&draw.eta[(dim, t)].to_le_bytes())?;
                }
            }
            offset += (d * t_len * 8) as u64;
        }
    }
    bin.flush()?;
    let index = TrajectoryDumpIndex {
        format_version: TRAJECTORY_DUMP_FORMAT_VERSION.to_string(),
        state_dim: d,
        n_weeks: t_len,
        entries,
    };
    std::fs::write(dir.join("index.json"), serde_json::to_string(&index)?)?;
    Ok(())
}

/// Reads one dumped trajectory back.
pub fn load_trajectory(dir: &std::path::Path, word: usize, draw: usize) -> Result<TrajectorySample> {
    use std::io::{Read as _, Seek as _};
    let index: TrajectoryDumpIndex =
        serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
    if index.format_version != TRAJECTORY_DUMP_FORMAT_VERSION {
        return Err(Error::data(format!("unsupported dump format {}", index.format_version)));
    }
    let (_, _, offset) = index
        .entries
        .iter()
        .find(|&&(w, j, _)| w == word && j == draw)
        .copied()
        .ok_or_else(|| Error::data(format!("no dump entry for word {word}, draw {draw}")))?;
    let mut file = std::fs::File::open(dir.join("trajectories.bin"))?;
    file.seek(std::io::SeekFrom::Start(offset))?;
    let mut eta = DMatrix::zeros(index.state_dim, index.n_weeks);
    let mut buf = [0u8; 8];
    for dim in 0..index.state_dim {
        for t in 0..index.n_weeks {
            file.read_exact(&mut buf)?;
            eta[(dim, t)] = f64::from_le_bytes(buf);
        }
    }
    Ok(TrajectorySample { eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2 as NdArray2;

    use crate::kalman::{kalman_smooth, ProcessNoise};

    fn diag_dynamics(a: &[f64], g: &[f64]) -> DynamicsParams {
        DynamicsParams {
            a_diag: DVector::from_vec(a.to_vec()),
            gamma: ProcessNoise::Diagonal(DVector::from_vec(g.to_vec())),
        }
    }

    fn unit_init(d: usize) -> InitialBelief {
        InitialBelief { mean: DVector::zeros(d), cov: DMatrix::identity(d, d) }
    }

    #[test]
    fn no_evidence_keeps_uniform_weights() {
        let c = NdArray2::<u32>::zeros((2, 5));
        let s = NdArray2::<u32>::zeros((2, 5));
        let tau = NdArray2::<f64>::zeros((2, 5));
        let emission = EmissionModel::binomial(c.view(), s.view(), -3.0, &tau);
        let dynamics = diag_dynamics(&[0.9, 0.9, 0.9], &[0.1, 0.1, 0.1]);
        let mut rng = substream_rng(1, 0, 0);
        let fwd =
            bootstrap_forward(&emission, &dynamics, &unit_init(3), 64, &mut rng, false).unwrap();
        for t in 0..5 {
            assert_abs_diff_eq!(fwd.ess[t], 64.0, epsilon = 1e-9);
            for &w in &fwd.log_weights[t] {
                assert_abs_diff_eq!(w, -(64f64).ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn log_weights_normalized_every_step() {
        let mut c = NdArray2::<u32>::zeros((2, 6));
        let mut s = NdArray2::<u32>::zeros((2, 6));
        for t in 0..6 {
            s[[0, t]] = 300;
            s[[1, t]] = 200;
            c[[0, t]] = 3 + t as u32;
            c[[1, t]] = 2;
        }
        let tau = NdArray2::<f64>::zeros((2, 6));
        let emission = EmissionModel::binomial(c.view(), s.view(), -4.0, &tau);
        let dynamics = diag_dynamics(&[0.8, 0.8, 0.8], &[0.2, 0.2, 0.2]);
        let mut rng = substream_rng(11, 0, 0);
        let fwd =
            bootstrap_forward(&emission, &dynamics, &unit_init(3), 128, &mut rng, false).unwrap();
        for t in 0..6 {
            assert_abs_diff_eq!(logsumexp(&fwd.log_weights[t]), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn fixed_seed_reproduces_history() {
        let mut c = NdArray2::<u32>::zeros((1, 4));
        let mut s = NdArray2::<u32>::zeros((1, 4));
        for t in 0..4 {
            s[[0, t]] = 100;
            c[[0, t]] = 5;
        }
        let tau = NdArray2::<f64>::zeros((1, 4));
        let dynamics = diag_dynamics(&[0.9, 0.9], &[0.1, 0.1]);
        let run = || {
            let emission = EmissionModel::binomial(c.view(), s.view(), -3.0, &tau);
            let mut rng = substream_rng(5, 2, 0);
            bootstrap_forward(&emission, &dynamics, &unit_init(2), 32, &mut rng, false).unwrap()
        };
        let a = run();
        let b = run();
        for t in 0..4 {
            assert_eq!(a.states[t], b.states[t]);
            assert_eq!(a.log_weights[t], b.log_weights[t]);
        }
    }

    /// 1-D quadrature oracle for the T=1 posterior mean of the observed sum.
    fn quadrature_posterior_mean(c: u64, s: u64, nu: f64, prior_var: f64) -> f64 {
        let n_grid = 40_001;
        let half = 10.0 * prior_var.sqrt();
        let step = 2.0 * half / (n_grid - 1) as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for g in 0..n_grid {
            let u = -half + g as f64 * step;
            let log_prior = -0.5 * u * u / prior_var;
            let ll = crate::emission::binomial_loglik_logit(c, s, nu + u).unwrap();
            let w = (log_prior + ll).exp();
            num += u * w;
            den += w;
        }
        num / den
    }

    #[test]
    fn t1_weighted_mean_matches_quadrature() {
        let (c_obs, s_obs, nu) = (30u32, 100u32, -1.0);
        let mut c = NdArray2::<u32>::zeros((1, 1));
        let mut s = NdArray2::<u32>::zeros((1, 1));
        c[[0, 0]] = c_obs;
        s[[0, 0]] = s_obs;
        let tau = NdArray2::<f64>::zeros((1, 1));
        let emission = EmissionModel::binomial(c.view(), s.view(), nu, &tau);
        let dynamics = diag_dynamics(&[0.9, 0.9], &[0.1, 0.1]);
        // Component priors N(0, 0.5) make the observed sum exactly N(0, 1).
        let init = InitialBelief {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2) * 0.5,
        };
        let k = 100_000;
        let mut rng = substream_rng(17, 0, 0);
        let fwd = bootstrap_forward(&emission, &dynamics, &init, k, &mut rng, false).unwrap();

        let weights: Vec<f64> = fwd.log_weights[0].iter().map(|&w| w.exp()).collect();
        let sums: Vec<f64> =
            (0..k).map(|p| fwd.states[0][(0, p)] + fwd.states[0][(1, p)]).collect();
        let mean: f64 = weights.iter().zip(&sums).map(|(w, u)| w * u).sum();
        let se2: f64 = weights
            .iter()
            .zip(&sums)
            .map(|(w, u)| w * w * (u - mean) * (u - mean))
            .sum::<f64>();
        let se = se2.sqrt();
        let exact = quadrature_posterior_mean(c_obs as u64, s_obs as u64, nu, 1.0);
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "particle mean {mean} vs quadrature {exact}, se {se}"
        );
    }

    #[test]
    fn huge_gamma_backward_matches_forward_weights() {
        // K=4 hand-built fixture: with a nearly uninformative transition the
        // backward probabilities collapse to the forward weights.
        let d = 2;
        let k = 4;
        let mut states = DMatrix::zeros(d, k);
        for p in 0..k {
            states[(0, p)] = p as f64;
            states[(1, p)] = -(p as f64) * 0.5;
        }
        let lw: Vec<f64> = {
            let raw = [0.1f64, 0.4, 0.2, 0.3].map(|w| w.ln());
            let lse = logsumexp(&raw);
            raw.iter().map(|l| l - lse).collect()
        };
        let dynamics = diag_dynamics(&[0.9, 0.9], &[1e12, 1e12]);
        let kernel = TransitionKernel::new(&dynamics).unwrap();
        let next = DVector::from_vec(vec![0.7, 0.2]);
        let probs = backward_weights(&lw, &states, &next, &kernel).unwrap();
        let tv: f64 = probs
            .iter()
            .zip([0.1, 0.4, 0.2, 0.3])
            .map(|(p, w)| (p - w).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn t1_backward_reduces_to_forward_categorical() {
        let sites = NdArray2::from_shape_fn((1, 1), |_| TaylorSite { zeta: 0.0, m: 0.4, sigma2: 0.5 });
        let emission = EmissionModel::Gaussian { sites: &sites };
        let dynamics = diag_dynamics(&[0.9, 0.9], &[0.1, 0.1]);
        let mut rng = substream_rng(3, 0, 0);
        let fwd = bootstrap_forward(&emission, &dynamics, &unit_init(2), 500, &mut rng, false).unwrap();
        // Empirical distribution over selected indices should match the
        // forward weights.
        let mut counts = vec![0usize; 500];
        let n_draws = 40_000;
        for j in 0..n_draws {
            let mut rng_j = substream_rng(3, 0, 1 + j as u64);
            let draw = ffbs_backward(&fwd, &dynamics, &mut rng_j).unwrap();
            let col = draw.eta.column(0);
            let idx = (0..500)
                .find(|&p| (fwd.states[0][(0, p)] - col[0]).abs() < 1e-14)
                .unwrap();
            counts[idx] += 1;
        }
        let tv: f64 = (0..500)
            .map(|p| {
                let emp = counts[p] as f64 / n_draws as f64;
                (emp - fwd.log_weights[0][p].exp()).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn ffbs_matches_kalman_on_linear_gaussian_fixture() {
        // Gaussian sites let the Kalman smoother serve as the exact oracle.
        let (r_len, t_len) = (1usize, 6usize);
        let mut seed = 9u64;
        let sites = NdArray2::from_shape_fn((r_len, t_len), |_| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((seed >> 33) as f64) / (1u64 << 31) as f64 - 1.0;
            TaylorSite { zeta: 0.0, m: u, sigma2: 0.4 }
        });
        let dynamics = diag_dynamics(&[0.8, 0.7], &[0.15, 0.1]);
        let init = unit_init(2);
        let exact = kalman_smooth(&sites, &dynamics, &init).unwrap();

        let emission = EmissionModel::Gaussian { sites: &sites };
        let k = 4000;
        let n_draws = 300;
        let mut rng = substream_rng(21, 0, 0);
        let fwd = bootstrap_forward(&emission, &dynamics, &init, k, &mut rng, false).unwrap();
        let mut draws = Vec::with_capacity(n_draws);
        for j in 0..n_draws {
            let mut rng_j = substream_rng(21, 0, 1 + j as u64);
            draws.push(ffbs_backward(&fwd, &dynamics, &mut rng_j).unwrap());
        }
        for t in 0..t_len {
            for dim in 0..2 {
                let vals: Vec<f64> = draws.iter().map(|d| d.eta[(dim, t)]).collect();
                let mean = vals.iter().sum::<f64>() / n_draws as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_draws as f64;
                let se = (var / n_draws as f64).sqrt().max(1e-9);
                let diff = (mean - exact.means[(dim, t)]).abs();
                assert!(
                    diff < 4.0 * se,
                    "t={t} dim={dim}: sample mean {mean} vs exact {} (se {se})",
                    exact.means[(dim, t)]
                );
            }
        }
    }

    #[test]
    fn particle_order_exchange_preserves_expectations() {
        let weights = [0.1, 0.2, 0.3, 0.4];
        let values = [1.0, -2.0, 0.5, 3.0];
        let forward: f64 = weights.iter().zip(&values).map(|(w, v)| w * v).sum();
        let perm = [2usize, 0, 3, 1];
        let permuted: f64 = perm.iter().map(|&i| weights[i] * values[i]).sum();
        assert_abs_diff_eq!(forward, permuted, epsilon = 1e-12);
    }

    #[test]
    fn sample_trajectories_empty_and_deterministic() {
        use crate::emission::estimate_background;
        use crate::panel::RegionInfo;
        use ndarray::{Array2, Array3};

        let s = Array2::from_elem((2, 8), 400u32);
        let mut c = Array3::from_elem((2, 2, 8), 8u32);
        c[[0, 0, 3]] = 30;
        let panel = CountsPanel {
            c,
            s,
            vocab: vec!["w0".into(), "w1".into()],
            regions: vec![
                RegionInfo { region_id: 0, name: "a".into(), lat: 0.0, lon: 0.0 },
                RegionInfo { region_id: 1, name: "b".into(), lat: 1.0, lon: 1.0 },
            ],
            week_origin: chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
        };
        let background = estimate_background(&panel, 0.5);
        let dynamics = diag_dynamics(&[0.8, 0.8, 0.8], &[0.1, 0.1, 0.1]);

        let empty = sample_trajectories(
            &panel,
            &background,
            &dynamics,
            &SmcOptions { n_samples: 0, ..SmcOptions::default() },
        )
        .unwrap();
        assert!(empty.per_word.iter().all(|w| w.is_empty()));

        let opts = SmcOptions { n_particles: 50, n_samples: 5, seed: 77, ..SmcOptions::default() };
        let a = sample_trajectories(&panel, &background, &dynamics, &opts).unwrap();
        let b = sample_trajectories(&panel, &background, &dynamics, &opts).unwrap();
        assert!(a.failures.is_empty());
        for w in 0..2 {
            for j in 0..5 {
                assert_eq!(a.per_word[w][j].eta, b.per_word[w][j].eta);
            }
        }
    }

    #[test]
    fn trajectory_dump_roundtrip() {
        use crate::emission::estimate_background;
        use crate::panel::RegionInfo;
        use ndarray::{Array2, Array3};

        let s = Array2::from_elem((2, 5), 300u32);
        let c = Array3::from_elem((2, 2, 5), 6u32);
        let panel = CountsPanel {
            c,
            s,
            vocab: vec!["w0".into(), "w1".into()],
            regions: vec![
                RegionInfo { region_id: 0, name: "a".into(), lat: 0.0, lon: 0.0 },
                RegionInfo { region_id: 1, name: "b".into(), lat: 1.0, lon: 1.0 },
            ],
            week_origin: chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
        };
        let background = estimate_background(&panel, 0.5);
        let dynamics = diag_dynamics(&[0.7, 0.7, 0.7], &[0.1, 0.1, 0.1]);
        let opts = SmcOptions { n_particles: 30, n_samples: 3, seed: 41, ..SmcOptions::default() };
        let out = sample_trajectories(&panel, &background, &dynamics, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_trajectories(&out, dir.path()).unwrap();
        let back = load_trajectory(dir.path(), 1, 2).unwrap();
        assert_eq!(back.eta, out.per_word[1][2].eta);
    }

    #[test]
    fn null_word_trajectories_center_near_zero() {
        use crate::emission::estimate_background;
        use crate::panel::RegionInfo;
        use ndarray::{Array2, Array3};

        // Counts exactly at the background rate.
        let s = Array2::from_elem((1, 10), 2000u32);
        let c = Array3::from_elem((1, 1, 10), 20u32);
        let panel = CountsPanel {
            c,
            s,
            vocab: vec!["w0".into()],
            regions: vec![RegionInfo { region_id: 0, name: "a".into(), lat: 0.0, lon: 0.0 }],
            week_origin: chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
        };
        let background = estimate_background(&panel, 0.5);
        let dynamics = diag_dynamics(&[0.9, 0.9], &[0.05, 0.05]);
        let opts = SmcOptions { n_particles: 400, n_samples: 50, seed: 3, ..SmcOptions::default() };
        let out = sample_trajectories(&panel, &background, &dynamics, &opts).unwrap();
        let draws = &out.per_word[0];
        let mut all = Vec::new();
        for d in draws {
            for t in 0..10 {
                all.push(d.eta[(0, t)]);
            }
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64)
            .sqrt();
        assert!(mean.abs() < 3.0 * sd, "mean {mean}, sd {sd}");
    }
}
