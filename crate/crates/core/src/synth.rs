//! Generative simulator drawing panels from the exact model: latent VAR
//! trajectories, binomial counts, and scenario presets with known truth for
//! recovery scoring.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::analysis::RegionAttributes;
use crate::error::{Error, Result};
use crate::panel::{CountsPanel, RegionInfo};
use crate::rng::substream_rng;

pub const TRUTH_FORMAT_VERSION: &str = "truth/1";

/// RNG substream bands, separated from the inference substreams so reusing a
/// master seed across simulate and fit stages cannot couple the draws.
const SUB_LATENT: u64 = 1_000_000;
const SUB_COUNTS: u64 = 2_000_000;
const SUB_ATTRS: u64 = 3_000_000;
const SUB_STRUCTURE: u64 = 3_000_001;
const SUB_NU: u64 = 3_000_002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Null,
    PlantedEdges,
    Cascade,
    Gravity,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "null" => Ok(Preset::Null),
            "planted-edges" => Ok(Preset::PlantedEdges),
            "cascade" => Ok(Preset::Cascade),
            "gravity" => Ok(Preset::Gravity),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected null, planted-edges, cascade, gravity)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Preset::Null => "null",
            Preset::PlantedEdges => "planted-edges",
            Preset::Cascade => "cascade",
            Preset::Gravity => "gravity",
        };
        f.write_str(s)
    }
}

/// Tunable knobs for scenario construction.
#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    /// Regional autocorrelation on the diagonal of the true A.
    pub diag: f64,
    /// Process noise variance per state dimension.
    pub gamma: f64,
    /// Number of planted off-diagonal entries (planted-edges preset).
    pub n_planted: usize,
    /// Planted magnitude range.
    pub planted_range: (f64, f64),
    /// Chain weight for the cascade preset.
    pub cascade_weight: f64,
    /// Word base-rate range (uniform in log rate).
    pub rate_range: (f64, f64),
    /// Exposure per (region, week).
    pub k_auth: u32,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            diag: 0.5,
            gamma: 0.1,
            n_planted: 10,
            planted_range: (0.3, 0.6),
            cascade_weight: 0.4,
            rate_range: (0.002, 0.01),
            k_auth: 2000,
        }
    }
}

/// A planted directed edge: lagged sender activation drives the receiver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedEdge {
    pub sender: u32,
    pub receiver: u32,
    pub weight: f64,
}

/// A fully specified generative scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub preset: Preset,
    pub n_regions: usize,
    pub n_words: usize,
    pub n_weeks: usize,
    pub k_auth: u32,
    /// Optional exposure matrix overriding the constant k_auth.
    pub exposure: Option<Array2<u32>>,
    /// Regional transition matrix, R x R.
    pub a_true: DMatrix<f64>,
    pub global_autocorr: f64,
    /// Process noise variance per dimension, length R+1.
    pub gamma_true: DVector<f64>,
    pub nu_true: Vec<f64>,
    /// Regional-temporal offsets, R x T (zero by default).
    pub tau_true: Array2<f64>,
    pub seed: u64,
    pub planted: Vec<PlantedEdge>,
    pub regions: Vec<RegionInfo>,
    pub attrs: Vec<RegionAttributes>,
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn synth_attributes(r: usize, seed: u64) -> (Vec<RegionInfo>, Vec<RegionAttributes>) {
    let mut rng = substream_rng(seed, 0, SUB_ATTRS);
    let mut pops: Vec<f64> = (0..r)
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            (12.0 + 1.0 * z).exp()
        })
        .collect();
    // Region 0 is the most populous; the cascade preset chains down this
    // ordering.
    pops.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut regions = Vec::with_capacity(r);
    let mut attrs = Vec::with_capacity(r);
    for (i, &population) in pops.iter().enumerate() {
        let lat = 30.0 + rng.random::<f64>() * 17.0;
        let lon = -120.0 + rng.random::<f64>() * 45.0;
        // Race/ethnicity fractions from a normalized positive draw.
        let raw: Vec<f64> = (0..4).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        regions.push(RegionInfo {
            region_id: i as u32,
            name: format!("synth{i:03}"),
            lat,
            lon,
        });
        attrs.push(RegionAttributes {
            region_id: i as u32,
            population,
            lat,
            lon,
            pct_white: raw[0] / total,
            pct_afam: raw[1] / total,
            pct_hispanic: raw[2] / total,
            pct_urban: 0.3 + rng.random::<f64>() * 0.65,
            pct_renter: 0.2 + rng.random::<f64>() * 0.4,
            log_income: 10.8 + 0.3 * z,
        });
    }
    (regions, attrs)
}

/// Builds the preset scenario. Stationarity is guaranteed by construction:
/// diagonal presets keep |a| < 1, planted edges land in the strict lower
/// triangle (eigenvalues stay on the diagonal), the cascade is a chain, and
/// the gravity preset is rescaled to spectral radius 0.95.
pub fn make_scenario(
    preset: Preset,
    r: usize,
    v: usize,
    t: usize,
    seed: u64,
    opts: &ScenarioOptions,
) -> Result<Scenario> {
    if r < 1 || v < 1 || t < 2 {
        return Err(Error::config("scenario needs R >= 1, V >= 1, T >= 2"));
    }
    if !(opts.diag.abs() < 1.0) {
        return Err(Error::config("diagonal autocorrelation must satisfy |a| < 1"));
    }
    let (regions, attrs) = synth_attributes(r, seed);
    let mut a = DMatrix::from_diagonal(&DVector::from_element(r, opts.diag));
    let mut planted = Vec::new();
    let mut rng = substream_rng(seed, 0, SUB_STRUCTURE);

    match preset {
        Preset::Null => {}
        Preset::PlantedEdges => {
            let max_slots = r * (r - 1) / 2;
            if opts.n_planted > max_slots {
                return Err(Error::config(format!(
                    "cannot plant {} edges with R={r} (max {max_slots})",
                    opts.n_planted
                )));
            }
            let mut slots: Vec<(usize, usize)> = Vec::new();
            for m in 1..r {
                for n in 0..m {
                    slots.push((m, n));
                }
            }
            // Partial Fisher-Yates draw of n_planted distinct slots.
            for i in 0..opts.n_planted {
                let j = i + rng.random_range(0..slots.len() - i);
                slots.swap(i, j);
                let (m, n) = slots[i];
                let w = opts.planted_range.0
                    + rng.random::<f64>() * (opts.planted_range.1 - opts.planted_range.0);
                a[(m, n)] = w;
                planted.push(PlantedEdge { sender: n as u32, receiver: m as u32, weight: w });
            }
            planted.sort_by_key(|e| (e.sender, e.receiver));
        }
        Preset::Cascade => {
            // Chain down the population ordering (region 0 is largest).
            for k in 0..r - 1 {
                a[(k + 1, k)] = opts.cascade_weight;
                planted.push(PlantedEdge {
                    sender: k as u32,
                    receiver: (k + 1) as u32,
                    weight: opts.cascade_weight,
                });
            }
        }
        Preset::Gravity => {
            let mut w = DMatrix::zeros(r, r);
            for m in 0..r {
                for n in 0..r {
                    if m == n {
                        continue;
                    }
                    let d = crate::geo::haversine_km(
                        attrs[m].lat,
                        attrs[m].lon,
                        attrs[n].lat,
                        attrs[n].lon,
                    )
                    .max(50.0);
                    w[(m, n)] = attrs[m].population * attrs[n].population / (d * d);
                }
            }
            let max_w = w.iter().copied().fold(0.0, f64::max);
            if max_w > 0.0 {
                w /= max_w;
            }
            // Scale the off-diagonal mass to land exactly on radius 0.95.
            let target = 0.95;
            let (mut lo, mut hi) = (0.0, 1.0);
            while spectral_radius(&(&a + &w * hi)) < target {
                hi *= 2.0;
                if hi > 1e6 {
                    return Err(Error::numerical("gravity scaling failed to bracket"));
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if spectral_radius(&(&a + &w * mid)) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            a += &w * lo;
        }
    }

    let rho = spectral_radius(&a);
    if rho >= 1.0 {
        return Err(Error::numerical(format!("scenario transition unstable: spectral radius {rho}")));
    }

    let mut nu_rng = substream_rng(seed, 0, SUB_NU);
    let (lo, hi) = opts.rate_range;
    let nu_true: Vec<f64> = (0..v)
        .map(|_| {
            let rate = (lo.ln() + nu_rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
            crate::emission::logit(rate)
        })
        .collect();

    let global_autocorr = a.diagonal().sum() / r as f64;
    Ok(Scenario {
        preset,
        n_regions: r,
        n_words: v,
        n_weeks: t,
        k_auth: opts.k_auth,
        exposure: None,
        a_true: a,
        global_autocorr,
        gamma_true: DVector::from_element(r + 1, opts.gamma),
        nu_true,
        tau_true: Array2::zeros((r, t)),
        seed,
        planted,
        regions,
        attrs,
    })
}

fn sample_normal(rng: &mut rand_chacha::ChaCha8Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        sd * z
    } else {
        0.0
    }
}

/// Simulates the latent activations, V x (R+1) x T. Diagonal scenarios start
/// from the stationary state; coupled ones start at zero.
pub fn generate_latent(scenario: &Scenario) -> Result<Array3<f64>> {
    let (r, v, t) = (scenario.n_regions, scenario.n_words, scenario.n_weeks);
    let rho = spectral_radius(&scenario.a_true);
    if rho >= 1.0 {
        return Err(Error::numerical(format!("spectral radius {rho} >= 1")));
    }
    let d = r + 1;
    let diagonal_only = scenario
        .a_true
        .iter()
        .enumerate()
        .all(|(idx, &val)| idx / r == idx % r || val == 0.0);

    let mut eta = Array3::<f64>::zeros((v, d, t));
    for i in 0..v {
        let mut rng = substream_rng(scenario.seed, i as u64, SUB_LATENT);
        // Initial state.
        for dim in 0..d {
            let a_dim = if dim < r { scenario.a_true[(dim, dim)] } else { scenario.global_autocorr };
            let g = scenario.gamma_true[dim];
            if diagonal_only && a_dim.abs() < 1.0 {
                let stat_sd = (g / (1.0 - a_dim * a_dim)).sqrt();
                eta[[i, dim, 0]] = sample_normal(&mut rng, stat_sd);
            } else {
                eta[[i, dim, 0]] = 0.0;
            }
        }
        for week in 1..t {
            for m in 0..r {
                let mut drift = 0.0;
                for n in 0..r {
                    drift += scenario.a_true[(m, n)] * eta[[i, n, week - 1]];
                }
                eta[[i, m, week]] = drift + sample_normal(&mut rng, scenario.gamma_true[m].sqrt());
            }
            eta[[i, r, week]] = scenario.global_autocorr * eta[[i, r, week - 1]]
                + sample_normal(&mut rng, scenario.gamma_true[r].sqrt());
        }
    }
    Ok(eta)
}

/// Draws binomial counts from the latent activations.
pub fn generate_counts(eta: &Array3<f64>, scenario: &Scenario) -> Result<CountsPanel> {
    let (v, d, t) = (eta.shape()[0], eta.shape()[1], eta.shape()[2]);
    let r = d - 1;
    if v != scenario.n_words || r != scenario.n_regions || t != scenario.n_weeks {
        return Err(Error::config("latent tensor does not match scenario dimensions"));
    }
    let s = match &scenario.exposure {
        Some(m) => m.clone(),
        None => Array2::from_elem((r, t), scenario.k_auth),
    };
    let mut c = Array3::<u32>::zeros((v, r, t));
    for i in 0..v {
        let mut rng = substream_rng(scenario.seed, i as u64, SUB_COUNTS);
        for rr in 0..r {
            for tt in 0..t {
                let trials = s[[rr, tt]] as u64;
                if trials == 0 {
                    continue;
                }
                let theta = crate::emission::logistic(
                    scenario.nu_true[i]
                        + scenario.tau_true[[rr, tt]]
                        + eta[[i, r, tt]]
                        + eta[[i, rr, tt]],
                );
                let dist = Binomial::new(trials, theta)
                    .map_err(|e| Error::numerical(format!("binomial sampling: {e}")))?;
                c[[i, rr, tt]] = dist.sample(&mut rng) as u32;
            }
        }
    }
    let panel = CountsPanel {
        c,
        s,
        vocab: (0..v).map(|i| format!("word{i:04}")).collect(),
        regions: scenario.regions.clone(),
        week_origin: chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(),
    };
    panel.validate()?;
    Ok(panel)
}

/// Ground truth written next to simulated panels for scoring.
#[derive(Serialize, Deserialize)]
pub struct TruthFile {
    pub format_version: String,
    pub preset: Preset,
    pub seed: u64,
    pub n_regions: usize,
    pub n_words: usize,
    pub n_weeks: usize,
    pub k_auth: u32,
    pub a_true: Vec<Vec<f64>>,
    pub global_autocorr: f64,
    pub gamma: Vec<f64>,
    pub nu: Vec<f64>,
    pub tau: Vec<Vec<f64>>,
    pub planted_edges: Vec<PlantedEdge>,
}

impl TruthFile {
    pub fn from_scenario(sc: &Scenario) -> Self {
        TruthFile {
            format_version: TRUTH_FORMAT_VERSION.to_string(),
            preset: sc.preset,
            seed: sc.seed,
            n_regions: sc.n_regions,
            n_words: sc.n_words,
            n_weeks: sc.n_weeks,
            k_auth: sc.k_auth,
            a_true: (0..sc.n_regions)
                .map(|m| (0..sc.n_regions).map(|n| sc.a_true[(m, n)]).collect())
                .collect(),
            global_autocorr: sc.global_autocorr,
            gamma: sc.gamma_true.iter().copied().collect(),
            nu: sc.nu_true.clone(),
            tau: sc
                .tau_true
                .rows()
                .into_iter()
                .map(|row| row.iter().copied().collect())
                .collect(),
            planted_edges: sc.planted.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TruthFile> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn opts() -> ScenarioOptions {
        ScenarioOptions::default()
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!("wave".parse::<Preset>().is_err());
        assert_eq!("planted-edges".parse::<Preset>().unwrap(), Preset::PlantedEdges);
    }

    #[test]
    fn null_preset_is_diagonal() {
        let sc = make_scenario(Preset::Null, 5, 3, 10, 1, &opts()).unwrap();
        for m in 0..5 {
            for n in 0..5 {
                if m != n {
                    assert_eq!(sc.a_true[(m, n)], 0.0);
                }
            }
        }
        assert!(sc.planted.is_empty());
    }

    #[test]
    fn planted_preset_has_exact_count_and_stays_stationary() {
        let sc = make_scenario(
            Preset::PlantedEdges,
            10,
            3,
            10,
            7,
            &ScenarioOptions { n_planted: 10, ..opts() },
        )
        .unwrap();
        let off_diag_nonzero = (0..10)
            .flat_map(|m| (0..10).map(move |n| (m, n)))
            .filter(|&(m, n)| m != n && sc.a_true[(m, n)] != 0.0)
            .count();
        assert_eq!(off_diag_nonzero, 10);
        assert_eq!(sc.planted.len(), 10);
        for e in &sc.planted {
            assert!(e.weight >= 0.3 && e.weight <= 0.6);
            assert!(e.sender < e.receiver, "planted edges live in the lower triangle");
        }
        assert!(spectral_radius(&sc.a_true) < 1.0);
    }

    #[test]
    fn gravity_preset_radius_is_095() {
        let sc = make_scenario(Preset::Gravity, 8, 2, 10, 3, &opts()).unwrap();
        let rho = spectral_radius(&sc.a_true);
        assert!(rho <= 0.95 + 1e-9, "rho = {rho}");
        assert!(rho >= 0.95 - 1e-6, "rho = {rho}");
    }

    #[test]
    fn cascade_preset_chains_by_population() {
        let sc = make_scenario(Preset::Cascade, 6, 2, 10, 3, &opts()).unwrap();
        for k in 0..5 {
            assert_eq!(sc.a_true[(k + 1, k)], 0.4);
        }
        // Populations are rank-ordered by construction.
        for k in 0..5 {
            assert!(sc.attrs[k].population >= sc.attrs[k + 1].population);
        }
    }

    #[test]
    fn zero_gamma_zero_init_is_identically_zero() {
        let mut sc = make_scenario(Preset::PlantedEdges, 4, 2, 20, 9, &ScenarioOptions {
            n_planted: 2,
            ..opts()
        })
        .unwrap();
        sc.gamma_true = DVector::from_element(5, 0.0);
        let eta = generate_latent(&sc).unwrap();
        assert!(eta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ar1_sample_autocorrelation() {
        let sc = make_scenario(
            Preset::Null,
            1,
            1,
            2000,
            11,
            &ScenarioOptions { diag: 0.9, gamma: 0.1, ..opts() },
        )
        .unwrap();
        let eta = generate_latent(&sc).unwrap();
        let xs: Vec<f64> = (0..2000).map(|t| eta[[0, 0, t]]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        let lag1 = xs
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (xs.len() - 1) as f64;
        let rho = lag1 / var;
        assert!((rho - 0.9).abs() < 0.05, "sample autocorrelation {rho}");
    }

    #[test]
    fn stationary_variance_matches_theory() {
        let sc = make_scenario(
            Preset::Null,
            2,
            1,
            5000,
            13,
            &ScenarioOptions { diag: 0.5, gamma: 0.1, ..opts() },
        )
        .unwrap();
        let eta = generate_latent(&sc).unwrap();
        let expected = 0.1 / (1.0 - 0.25);
        for r in 0..2 {
            let xs: Vec<f64> = (0..5000).map(|t| eta[[0, r, t]]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "region {r}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn planted_edge_shows_lagged_cross_correlation() {
        let sc = make_scenario(
            Preset::PlantedEdges,
            4,
            1,
            4000,
            17,
            &ScenarioOptions { n_planted: 1, planted_range: (0.5, 0.5), ..opts() },
        )
        .unwrap();
        let edge = &sc.planted[0];
        let eta = generate_latent(&sc).unwrap();
        let (snd, rcv) = (edge.sender as usize, edge.receiver as usize);
        let n = 3999;
        let xs: Vec<f64> = (0..n).map(|t| eta[[0, snd, t]]).collect();
        let ys: Vec<f64> = (0..n).map(|t| eta[[0, rcv, t + 1]]).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 =
            xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        let sx = (xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n as f64).sqrt();
        let sy = (ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n as f64).sqrt();
        let corr = cov / (sx * sy);
        assert!(corr > 0.2, "lagged cross-correlation {corr}");
    }

    #[test]
    fn counts_pooled_rate_concentrates() {
        let mut sc = make_scenario(Preset::Null, 2, 1, 50, 23, &ScenarioOptions {
            k_auth: 10_000,
            ..opts()
        })
        .unwrap();
        sc.gamma_true = DVector::from_element(3, 0.0);
        sc.nu_true = vec![crate::emission::logit(0.2)];
        let eta = generate_latent(&sc).unwrap();
        let panel = generate_counts(&eta, &sc).unwrap();
        let total_c: f64 = panel.c.iter().map(|&x| x as f64).sum();
        let total_s: f64 = panel.s.iter().map(|&x| x as f64).sum();
        let rate = total_c / total_s;
        assert!((rate - 0.2).abs() < 0.01, "pooled rate {rate}");
    }

    #[test]
    fn zero_exposure_cell_has_zero_count() {
        let mut sc = make_scenario(Preset::Null, 2, 2, 5, 29, &opts()).unwrap();
        let mut exposure = Array2::from_elem((2, 5), 500u32);
        exposure[[1, 2]] = 0;
        sc.exposure = Some(exposure);
        let eta = generate_latent(&sc).unwrap();
        let panel = generate_counts(&eta, &sc).unwrap();
        for i in 0..2 {
            assert_eq!(panel.c[[i, 1, 2]], 0);
        }
        assert_eq!(panel.s[[1, 2]], 0);
    }

    #[test]
    fn same_seed_identical_panel() {
        let sc = make_scenario(Preset::PlantedEdges, 3, 4, 12, 31, &ScenarioOptions {
            n_planted: 2,
            ..opts()
        })
        .unwrap();
        let p1 = generate_counts(&generate_latent(&sc).unwrap(), &sc).unwrap();
        let p2 = generate_counts(&generate_latent(&sc).unwrap(), &sc).unwrap();
        assert_eq!(p1.c, p2.c);
        assert_eq!(p1.s, p2.s);
    }

    #[test]
    fn truth_roundtrip() {
        let sc = make_scenario(Preset::PlantedEdges, 3, 2, 6, 37, &ScenarioOptions {
            n_planted: 2,
            ..opts()
        })
        .unwrap();
        let truth = TruthFile::from_scenario(&sc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        truth.save(&path).unwrap();
        let back = TruthFile::load(&path).unwrap();
        assert_eq!(back.planted_edges.len(), 2);
        assert_abs_diff_eq!(back.a_true[1][0], sc.a_true[(1, 0)], epsilon = 1e-15);
        assert_eq!(back.preset, Preset::PlantedEdges);
    }
}
