//! Post-hoc analysis of the induced network: linked-versus-null pair
//! comparisons, multiple logistic regression with standard errors, ablation
//! accuracy, and the asymmetric sender/receiver analysis.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emission::logistic;
use crate::error::{Error, Result};
use crate::geo::haversine_km;
use crate::network::InfluenceEdge;

/// Two-tailed normal quantile for p < .01 confidence intervals.
const Z_995: f64 = 2.575_829_303_548_901;

/// Divergence guard: standardized-feature weights beyond this indicate
/// perfect separation.
const SEPARATION_BOUND: f64 = 30.0;

pub const SYMMETRIC_FEATURE_NAMES: [&str; 8] = [
    "product of populations",
    "distance",
    "abs. diff. % White",
    "abs. diff. % Af. Am.",
    "abs. diff. % Hispanic",
    "abs. diff. % urban",
    "abs. diff. % renters",
    "abs. diff. log income",
];

pub const ASYMMETRIC_FEATURE_NAMES: [&str; 7] = [
    "log population",
    "% White",
    "% Af. Am.",
    "% Hispanic",
    "% urban",
    "% renters",
    "log income",
];

/// Per-region demographic attributes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionAttributes {
    pub region_id: u32,
    pub population: f64,
    pub lat: f64,
    pub lon: f64,
    pub pct_white: f64,
    pub pct_afam: f64,
    pub pct_hispanic: f64,
    pub pct_urban: f64,
    pub pct_renter: f64,
    pub log_income: f64,
}

impl RegionAttributes {
    pub fn validate(&self) -> Result<()> {
        if !(self.population > 0.0) {
            return Err(Error::data(format!("region {}: population must be positive", self.region_id)));
        }
        for (name, v) in [
            ("pct_white", self.pct_white),
            ("pct_afam", self.pct_afam),
            ("pct_hispanic", self.pct_hispanic),
            ("pct_urban", self.pct_urban),
            ("pct_renter", self.pct_renter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!("region {}: {name}={v} outside [0,1]", self.region_id)));
            }
        }
        Ok(())
    }
}

pub fn read_attrs_csv(path: &Path) -> Result<Vec<RegionAttributes>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let attrs: RegionAttributes = row?;
        attrs.validate()?;
        out.push(attrs);
    }
    Ok(out)
}

pub fn write_attrs_csv(attrs: &[RegionAttributes], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "region_id,population,lat,lon,pct_white,pct_afam,pct_hispanic,pct_urban,pct_renter,log_income"
    )?;
    for a in attrs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            a.region_id,
            a.population,
            a.lat,
            a.lon,
            a.pct_white,
            a.pct_afam,
            a.pct_hispanic,
            a.pct_urban,
            a.pct_renter,
            a.log_income
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Attribute lookup that names the missing region in its error.
pub struct AttrTable<'a> {
    by_id: HashMap<u32, &'a RegionAttributes>,
}

impl<'a> AttrTable<'a> {
    pub fn new(attrs: &'a [RegionAttributes]) -> Self {
        AttrTable { by_id: attrs.iter().map(|a| (a.region_id, a)).collect() }
    }

    pub fn get(&self, region: u32) -> Result<&'a RegionAttributes> {
        self.by_id
            .get(&region)
            .copied()
            .ok_or_else(|| Error::data(format!("no attributes for region {region}")))
    }
}

/// Symmetric pair features: log population product, great-circle distance in
/// km, and absolute demographic differences. Order-invariant.
pub fn pair_features(a: &RegionAttributes, b: &RegionAttributes) -> Vec<f64> {
    vec![
        a.population.ln() + b.population.ln(),
        haversine_km(a.lat, a.lon, b.lat, b.lon),
        (a.pct_white - b.pct_white).abs(),
        (a.pct_afam - b.pct_afam).abs(),
        (a.pct_hispanic - b.pct_hispanic).abs(),
        (a.pct_urban - b.pct_urban).abs(),
        (a.pct_renter - b.pct_renter).abs(),
        (a.log_income - b.log_income).abs(),
    ]
}

/// Signed sender-minus-receiver features for the asymmetric task.
pub fn asymmetric_features(sender: &RegionAttributes, receiver: &RegionAttributes) -> Vec<f64> {
    vec![
        sender.population.ln() - receiver.population.ln(),
        sender.pct_white - receiver.pct_white,
        sender.pct_afam - receiver.pct_afam,
        sender.pct_hispanic - receiver.pct_hispanic,
        sender.pct_urban - receiver.pct_urban,
        sender.pct_renter - receiver.pct_renter,
        sender.log_income - receiver.log_income,
    ]
}

/// Draws null pairs from the empirical sender and receiver marginals of the
/// edge list, rejecting self pairs and already-linked ordered pairs.
pub fn sample_null_pairs(
    edges: &[InfluenceEdge],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(u32, u32)>> {
    if edges.is_empty() {
        return Err(Error::data("cannot sample null pairs from an empty edge list"));
    }
    let senders: Vec<u32> = edges.iter().map(|e| e.sender).collect();
    let receivers: Vec<u32> = edges.iter().map(|e| e.receiver).collect();
    let linked: BTreeSet<(u32, u32)> = edges.iter().map(|e| (e.sender, e.receiver)).collect();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while out.len() < n {
        attempts += 1;
        if attempts >= 1000 && (out.len() as f64) < 0.01 * attempts as f64 {
            return Err(Error::data(
                "null-pair rejection rate above 99%: network too dense or degenerate",
            ));
        }
        let s = senders[rng.random_range(0..senders.len())];
        let r = receivers[rng.random_range(0..receivers.len())];
        if s == r || linked.contains(&(s, r)) {
            continue;
        }
        out.push((s, r));
    }
    Ok(out)
}

/// A labeled pair observation with raw (unstandardized) features.
#[derive(Debug, Clone)]
pub struct PairObservation {
    pub sender: u32,
    pub receiver: u32,
    pub label: bool,
    pub features: Vec<f64>,
}

/// Per-column standardization parameters fit on a training split.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        let p = rows.first().map(|r| r.len()).unwrap_or(0);
        let n = rows.len().max(1) as f64;
        let mut means = vec![0.0; p];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                means[j] += v;
            }
        }
        for m in means.iter_mut() {
            *m /= n;
        }
        let mut sds = vec![0.0; p];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                sds[j] += (v - means[j]) * (v - means[j]);
            }
        }
        for s in sds.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0; // constant column: leave centered values at zero
            }
        }
        Standardizer { means, sds }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.means[j]) / self.sds[j])
            .collect()
    }
}

/// Logistic regression fit: intercept first, then one weight per feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFit {
    pub weights: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

fn bernoulli_loglik(x: &DMatrix<f64>, y: &[bool], w: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let eta = (x.row(i) * w)[(0, 0)];
        let p = logistic(eta).clamp(1e-12, 1.0 - 1e-12);
        total += if yi { p.ln() } else { (1.0 - p).ln() };
    }
    total
}

/// Damped Newton maximization of the Bernoulli log-likelihood with an
/// intercept. Standard errors come from the inverse observed information at
/// the optimum. Features should be standardized by the caller.
///
/// Constant feature columns carry no information: their weight stays 0 with
/// an infinite standard error. Genuinely collinear columns still surface as a
/// singular-information error.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[bool],
    max_iter: usize,
    tol: f64,
) -> Result<RegressionFit> {
    let n = features.len();
    if n != labels.len() || n == 0 {
        return Err(Error::config("features and labels must align and be nonempty"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos < 2 || n - n_pos < 2 {
        return Err(Error::data("need at least 2 observations per class"));
    }
    let p_full = features[0].len() + 1; // intercept first

    // Active columns: the intercept plus every feature that actually varies.
    let mut active = vec![0usize];
    for j in 0..features[0].len() {
        let first = features[0][j];
        if features.iter().any(|row| row[j] != first) {
            active.push(j + 1);
        }
    }
    let p = active.len();
    let mut x = DMatrix::zeros(n, p);
    for (i, row) in features.iter().enumerate() {
        for (k, &col) in active.iter().enumerate() {
            x[(i, k)] = if col == 0 { 1.0 } else { row[col - 1] };
        }
    }

    let mut w = DVector::zeros(p);
    let mut ll = bernoulli_loglik(&x, labels, &w);
    let mut converged = false;
    let mut n_iter = 0;
    let mut info = DMatrix::zeros(p, p);
    for iter in 1..=max_iter {
        n_iter = iter;
        let mut grad = DVector::zeros(p);
        info.fill(0.0);
        for i in 0..n {
            let eta = (x.row(i) * &w)[(0, 0)];
            let pr = logistic(eta);
            let resid = (labels[i] as i32 as f64) - pr;
            let wt = (pr * (1.0 - pr)).max(1e-12);
            for a in 0..p {
                grad[a] += resid * x[(i, a)];
                for b in 0..p {
                    info[(a, b)] += wt * x[(i, a)] * x[(i, b)];
                }
            }
        }
        if grad.norm() < tol {
            converged = true;
            break;
        }
        let chol = nalgebra::Cholesky::new(info.clone())
            .ok_or_else(|| Error::numerical("singular information matrix in logistic fit"))?;
        let step = chol.solve(&grad);
        // Halve the step until the likelihood improves.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &w + &step * scale;
            let cand_ll = bernoulli_loglik(&x, labels, &cand);
            if cand_ll >= ll - 1e-12 {
                w = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if w.amax() > SEPARATION_BOUND {
            // Weights diverging on standardized data: perfect separation.
            break;
        }
    }
    if w.amax() > SEPARATION_BOUND {
        converged = false;
    }

    // Recompute the information at the final weights for standard errors.
    info.fill(0.0);
    for i in 0..n {
        let eta = (x.row(i) * &w)[(0, 0)];
        let pr = logistic(eta);
        let wt = (pr * (1.0 - pr)).max(1e-12);
        for a in 0..p {
            for b in 0..p {
                info[(a, b)] += wt * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let cov = nalgebra::Cholesky::new(info)
        .ok_or_else(|| Error::numerical("singular information matrix at optimum"))?
        .inverse();

    // Scatter the active solution back over the full column set; inactive
    // (constant) features keep weight 0 with infinite standard error.
    let mut weights = vec![0.0; p_full];
    let mut std_errors = vec![f64::INFINITY; p_full];
    for (k, &col) in active.iter().enumerate() {
        weights[col] = w[k];
        std_errors[col] = cov[(k, k)].sqrt();
    }
    let t_values = weights
        .iter()
        .zip(&std_errors)
        .map(|(&wj, &se)| if se.is_finite() && se > 0.0 { wj / se } else { 0.0 })
        .collect();
    Ok(RegressionFit { weights, std_errors, t_values, converged, n_iter })
}

/// Feature masks for the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    All,
    NoPopulation,
    NoGeography,
    NoDemographics,
}

impl FeatureSet {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureSet::All => "all features",
            FeatureSet::NoPopulation => "-population",
            FeatureSet::NoGeography => "-geography",
            FeatureSet::NoDemographics => "-demographics",
        }
    }

    /// Column indices kept from the symmetric feature vector.
    pub fn columns(&self) -> Vec<usize> {
        match self {
            FeatureSet::All => (0..8).collect(),
            FeatureSet::NoPopulation => (1..8).collect(),
            FeatureSet::NoGeography => vec![0, 2, 3, 4, 5, 6, 7],
            FeatureSet::NoDemographics => vec![0, 1],
        }
    }
}

/// Stratified k-fold assignment: shuffles each class separately and deals
/// round-robin, so every fold carries both classes whenever each class has at
/// least `folds` members.
fn stratified_folds(labels: &[bool], folds: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < folds || neg.len() < folds {
        return Err(Error::data(format!(
            "need at least {folds} observations per class for {folds}-fold CV"
        )));
    }
    for list in [&mut pos, &mut neg] {
        for i in (1..list.len()).rev() {
            let j = rng.random_range(0..=i);
            list.swap(i, j);
        }
    }
    let mut assignment = vec![0usize; labels.len()];
    for (k, &i) in pos.iter().enumerate() {
        assignment[i] = k % folds;
    }
    for (k, &i) in neg.iter().enumerate() {
        assignment[i] = k % folds;
    }
    Ok(assignment)
}

/// Stratified k-fold cross-validated accuracy at the 0.5 cutoff, with
/// standardization fit on each training split only.
pub fn cv_accuracy(
    observations: &[PairObservation],
    folds: usize,
    columns: &[usize],
    seed: u64,
) -> Result<f64> {
    let labels: Vec<bool> = observations.iter().map(|o| o.label).collect();
    let mut rng = crate::rng::substream_rng(seed, 0, 4_000_000);
    let assignment = stratified_folds(&labels, folds, &mut rng)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for fold in 0..folds {
        let train_idx: Vec<usize> =
            (0..observations.len()).filter(|&i| assignment[i] != fold).collect();
        let test_idx: Vec<usize> =
            (0..observations.len()).filter(|&i| assignment[i] == fold).collect();
        let train_rows: Vec<Vec<f64>> = train_idx
            .iter()
            .map(|&i| columns.iter().map(|&j| observations[i].features[j]).collect())
            .collect();
        let std = Standardizer::fit(&train_rows);
        let train_std: Vec<Vec<f64>> = train_rows.iter().map(|r| std.apply(r)).collect();
        let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
        let fit = fit_logistic(&train_std, &train_labels, 100, 1e-8)?;
        for &i in &test_idx {
            let raw: Vec<f64> = columns.iter().map(|&j| observations[i].features[j]).collect();
            let row = std.apply(&raw);
            let mut eta = fit.weights[0];
            for (j, &v) in row.iter().enumerate() {
                eta += fit.weights[j + 1] * v;
            }
            let pred = logistic(eta) > 0.5;
            if pred == labels[i] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Report structures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2Row {
    pub feature: String,
    pub linked_mean: f64,
    pub linked_ci: f64,
    pub null_mean: f64,
    pub null_ci: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTable {
    pub rows: Vec<CoefRow>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature_set: String,
    pub accuracy: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table4Row {
    pub attribute: String,
    pub difference: f64,
    pub std_error: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymmetricSection {
    pub n_pairs: usize,
    pub table4: Vec<Table4Row>,
    pub table5: RegressionTable,
    pub cv_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub format_version: String,
    pub n_regions: usize,
    pub n_linked_pairs: usize,
    pub n_null_pairs: usize,
    pub table2: Vec<Table2Row>,
    pub table3a: RegressionTable,
    pub table3b: Vec<AblationRow>,
    /// Empty when the network is perfectly reciprocated.
    pub asymmetric: Option<AsymmetricSection>,
}

pub const ANALYSIS_FORMAT_VERSION: &str = "analysis/1";

/// Options for the analysis pipeline.
#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    /// Null pairs to sample; defaults to the linked-pair count.
    pub n_null: Option<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { n_null: None, folds: 5, seed: 0 }
    }
}

fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, Z_995 * (var / n).sqrt())
}

/// Linked-versus-null means with p < .01 two-tailed normal confidence
/// intervals over the distance and demographic-difference features.
pub fn symmetric_comparison(
    edges: &[InfluenceEdge],
    attrs: &AttrTable<'_>,
    null_pairs: &[(u32, u32)],
) -> Result<Vec<Table2Row>> {
    // Table rows skip the population product (feature 0).
    let mut rows = Vec::new();
    for (offset, name) in SYMMETRIC_FEATURE_NAMES.iter().enumerate().skip(1) {
        let linked: Vec<f64> = edges
            .iter()
            .map(|e| {
                Ok(pair_features(attrs.get(e.sender)?, attrs.get(e.receiver)?)[offset])
            })
            .collect::<Result<_>>()?;
        let null: Vec<f64> = null_pairs
            .iter()
            .map(|&(s, r)| Ok(pair_features(attrs.get(s)?, attrs.get(r)?)[offset]))
            .collect::<Result<_>>()?;
        let (lm, lci) = mean_and_ci(&linked);
        let (nm, nci) = mean_and_ci(&null);
        rows.push(Table2Row {
            feature: name.to_string(),
            linked_mean: lm,
            linked_ci: lci,
            null_mean: nm,
            null_ci: nci,
        });
    }
    Ok(rows)
}

fn regression_table(fit: &RegressionFit, names: &[&str]) -> RegressionTable {
    let mut rows = vec![CoefRow {
        name: "intercept".to_string(),
        estimate: fit.weights[0],
        std_error: fit.std_errors[0],
        t_value: fit.t_values[0],
    }];
    for (j, name) in names.iter().enumerate() {
        rows.push(CoefRow {
            name: name.to_string(),
            estimate: fit.weights[j + 1],
            std_error: fit.std_errors[j + 1],
            t_value: fit.t_values[j + 1],
        });
    }
    RegressionTable { rows, converged: fit.converged }
}

/// Pairs significant in exactly one direction, as (sender, receiver).
pub fn asymmetric_pairs(significant: &ndarray::Array2<bool>) -> Vec<(u32, u32)> {
    let r = significant.shape()[0];
    let mut out = Vec::new();
    for m in 0..r {
        for n in (m + 1)..r {
            let fwd = significant[[m, n]]; // edge n -> m
            let rev = significant[[n, m]]; // edge m -> n
            if fwd && !rev {
                out.push((n as u32, m as u32));
            } else if rev && !fwd {
                out.push((m as u32, n as u32));
            }
        }
    }
    out
}

/// Sender/receiver analysis over one-directional pairs: the attribute
/// difference table and a logistic regression identifying the sender.
pub fn asymmetric_analysis(
    significant: &ndarray::Array2<bool>,
    attrs: &AttrTable<'_>,
    folds: usize,
    seed: u64,
) -> Result<Option<AsymmetricSection>> {
    let pairs = asymmetric_pairs(significant);
    if pairs.is_empty() {
        return Ok(None);
    }
    let n = pairs.len();

    // Table 4: mean sender-minus-receiver differences.
    let mut table4 = Vec::new();
    for (j, name) in ASYMMETRIC_FEATURE_NAMES.iter().enumerate() {
        let diffs: Vec<f64> = pairs
            .iter()
            .map(|&(s, r)| Ok(asymmetric_features(attrs.get(s)?, attrs.get(r)?)[j]))
            .collect::<Result<_>>()?;
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let se = (var / n as f64).sqrt();
        table4.push(Table4Row {
            attribute: name.to_string(),
            difference: mean,
            std_error: se,
            z_score: if se > 0.0 { mean / se } else { f64::NAN },
        });
    }

    // Table 5: identify the sender within each pair. Each pair enters once
    // with a seeded random orientation so the classes stay balanced without
    // leaking mirrored rows across folds.
    let mut rng = crate::rng::substream_rng(seed, 0, 5_000_000);
    let mut observations = Vec::with_capacity(n);
    for &(s, r) in &pairs {
        let flip = rng.random::<f64>() < 0.5;
        let (first, second, label) = if flip { (r, s, false) } else { (s, r, true) };
        observations.push(PairObservation {
            sender: first,
            receiver: second,
            label,
            features: asymmetric_features(attrs.get(first)?, attrs.get(second)?),
        });
    }
    let rows: Vec<Vec<f64>> = observations.iter().map(|o| o.features.clone()).collect();
    let std = Standardizer::fit(&rows);
    let std_rows: Vec<Vec<f64>> = rows.iter().map(|r| std.apply(r)).collect();
    let labels: Vec<bool> = observations.iter().map(|o| o.label).collect();
    let fit = fit_logistic(&std_rows, &labels, 100, 1e-8)?;
    let table5 = regression_table(&fit, &ASYMMETRIC_FEATURE_NAMES);

    let accuracy = cv_accuracy(&observations, folds, &(0..7).collect::<Vec<_>>(), seed)?;
    Ok(Some(AsymmetricSection { n_pairs: n, table4, table5, cv_accuracy: accuracy }))
}

/// The full analysis: Table 2 comparison, Table 3a regression, Table 3b
/// ablations, and the asymmetric section when one-directional pairs exist.
pub fn run_analysis(
    edges: &[InfluenceEdge],
    significant: &ndarray::Array2<bool>,
    attrs: &[RegionAttributes],
    opts: &AnalysisOptions,
) -> Result<AnalysisReport> {
    if edges.is_empty() {
        return Err(Error::data("no significant edges: nothing to analyze"));
    }
    let table = AttrTable::new(attrs);
    // Surface missing attributes immediately, naming the regions.
    for e in edges {
        table.get(e.sender)?;
        table.get(e.receiver)?;
    }
    let n_null = opts.n_null.unwrap_or(edges.len());
    let mut rng = crate::rng::substream_rng(opts.seed, 0, 6_000_000);
    let null_pairs = sample_null_pairs(edges, n_null, &mut rng)?;

    let table2 = symmetric_comparison(edges, &table, &null_pairs)?;

    // Classification observations: linked positives, sampled negatives.
    let mut observations = Vec::with_capacity(edges.len() + null_pairs.len());
    for e in edges {
        observations.push(PairObservation {
            sender: e.sender,
            receiver: e.receiver,
            label: true,
            features: pair_features(table.get(e.sender)?, table.get(e.receiver)?),
        });
    }
    for &(s, r) in &null_pairs {
        observations.push(PairObservation {
            sender: s,
            receiver: r,
            label: false,
            features: pair_features(table.get(s)?, table.get(r)?),
        });
    }

    let rows: Vec<Vec<f64>> = observations.iter().map(|o| o.features.clone()).collect();
    let std = Standardizer::fit(&rows);
    let std_rows: Vec<Vec<f64>> = rows.iter().map(|r| std.apply(r)).collect();
    let labels: Vec<bool> = observations.iter().map(|o| o.label).collect();
    let fit = fit_logistic(&std_rows, &labels, 100, 1e-8)?;
    let table3a = regression_table(&fit, &SYMMETRIC_FEATURE_NAMES);

    let mut table3b = Vec::new();
    let mut all_accuracy = 0.0;
    for set in [
        FeatureSet::All,
        FeatureSet::NoPopulation,
        FeatureSet::NoGeography,
        FeatureSet::NoDemographics,
    ] {
        let acc = cv_accuracy(&observations, opts.folds, &set.columns(), opts.seed)?;
        if set == FeatureSet::All {
            all_accuracy = acc;
        }
        table3b.push(AblationRow {
            feature_set: set.name().to_string(),
            accuracy: 100.0 * acc,
            gap: 100.0 * (all_accuracy - acc),
        });
    }

    let asymmetric = asymmetric_analysis(significant, &table, opts.folds, opts.seed)?;

    Ok(AnalysisReport {
        format_version: ANALYSIS_FORMAT_VERSION.to_string(),
        n_regions: significant.shape()[0],
        n_linked_pairs: edges.len(),
        n_null_pairs: null_pairs.len(),
        table2,
        table3a,
        table3b,
        asymmetric,
    })
}

/// Renders the report as Markdown tables.
pub fn render_markdown(report: &AnalysisReport) -> String {
    let mut out = String::new();
    out.push_str("# Influence network analysis\n\n");
    out.push_str(&format!(
        "{} linked pairs, {} sampled null pairs over {} regions.\n\n",
        report.n_linked_pairs, report.n_null_pairs, report.n_regions
    ));

    out.push_str("## Linked vs. null pair differences (CIs at p < .01, two-tailed)\n\n");
    out.push_str("| feature | linked | null |\n|---|---|---|\n");
    for row in &report.table2 {
        out.push_str(&format!(
            "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
            row.feature, row.linked_mean, row.linked_ci, row.null_mean, row.null_ci
        ));
    }

    out.push_str("\n## Logistic regression: predicting linked pairs\n\n");
    out.push_str("| term | estimate | s.e. | t-value |\n|---|---|---|---|\n");
    for row in &report.table3a.rows {
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.2} |\n",
            row.name, row.estimate, row.std_error, row.t_value
        ));
    }

    out.push_str("\n## Link prediction accuracy with ablated feature sets\n\n");
    out.push_str("| feature set | accuracy | gap |\n|---|---|---|\n");
    for row in &report.table3b {
        out.push_str(&format!(
            "| {} | {:.1} | {:.1} |\n",
            row.feature_set, row.accuracy, row.gap
        ));
    }

    match &report.asymmetric {
        None => out.push_str("\n## Asymmetric analysis\n\nNo one-directional pairs.\n"),
        Some(sec) => {
            out.push_str(&format!(
                "\n## Sender-minus-receiver differences ({} one-directional pairs)\n\n",
                sec.n_pairs
            ));
            out.push_str("| attribute | difference | s.e. | z-score |\n|---|---|---|---|\n");
            for row in &sec.table4 {
                out.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.2} |\n",
                    row.attribute, row.difference, row.std_error, row.z_score
                ));
            }
            out.push_str("\n## Logistic regression: identifying the sender\n\n");
            out.push_str("| term | estimate | s.e. | t-value |\n|---|---|---|---|\n");
            for row in &sec.table5.rows {
                out.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.2} |\n",
                    row.name, row.estimate, row.std_error, row.t_value
                ));
            }
            out.push_str(&format!(
                "\n5-fold CV accuracy identifying the sender: {:.1}%\n",
                100.0 * sec.cv_accuracy
            ));
        }
    }
    out
}
