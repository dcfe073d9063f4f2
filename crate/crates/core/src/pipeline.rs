//! Pipeline driver: resolved run configuration, stage commands, and run
//! reports. Every command is deterministic given identical inputs and seed;
//! reports carry timings and are written separately from primary outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{read_attrs_csv, render_markdown, run_analysis, AnalysisOptions};
use crate::corpus::{build_counts_panel, read_jsonl, CorpusOptions, IngestReport};
use crate::emission::estimate_background;
use crate::error::{Error, Result};
use crate::kalman::{em_fit, Checkpoint, EmOptions};
use crate::network::{
    estimate_network, extract_edges, read_edges_csv, edges_from_rows, write_edges_csv,
    write_network_dot, write_network_json, NetworkOptions,
};
use crate::panel::{read_regions_csv, CountsPanel};
use crate::smc::{dump_trajectories, sample_trajectories, SmcOptions};
use crate::synth::{generate_counts, generate_latent, make_scenario, Preset, ScenarioOptions, TruthFile};

pub const REPORT_FORMAT_VERSION: &str = "report/1";

/// Resolved run configuration. Every field has a default; file values
/// override defaults and command-line flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    // Paths.
    pub input: Option<PathBuf>,
    pub centroids: Option<PathBuf>,
    pub panel_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub attrs: Option<PathBuf>,

    // Corpus rules.
    pub origin: Option<chrono::NaiveDate>,
    pub n_weeks: Option<usize>,
    pub top_n_words: usize,
    pub min_author_messages: usize,
    pub max_author_messages: usize,
    pub burst_threshold: u32,

    // Model hyperparameters.
    pub alpha: f64,
    pub init_state_var: f64,
    pub em_max_iter: usize,
    pub em_rel_tol: f64,
    pub full_gamma: bool,
    pub n_particles: usize,
    pub n_samples: usize,
    pub smc_batches: usize,
    pub resample: bool,
    pub fdr_q: f64,
    pub mu_min: Option<f64>,
    pub literal_wald: bool,
    pub perword_ols: bool,
    pub ridge_lambda: Option<f64>,
    pub dump_trajectories: bool,
    pub resume: bool,

    // Simulation scenario.
    pub preset: String,
    pub sim_regions: usize,
    pub sim_words: usize,
    pub sim_weeks: usize,
    pub sim_planted: usize,
    pub sim_diag: f64,
    pub sim_gamma: f64,
    pub sim_exposure: u32,
    pub sim_rate_lo: f64,
    pub sim_rate_hi: f64,

    // Analysis.
    pub n_null: Option<usize>,
    pub folds: usize,

    // Run control.
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            centroids: None,
            panel_dir: PathBuf::from("panel"),
            checkpoint: PathBuf::from("checkpoint.json"),
            out_dir: PathBuf::from("out"),
            attrs: None,
            origin: None,
            n_weeks: None,
            top_n_words: 10_000,
            min_author_messages: 10,
            max_author_messages: 1000,
            burst_threshold: 5,
            alpha: 0.5,
            init_state_var: 1.0,
            em_max_iter: 100,
            em_rel_tol: 1e-6,
            full_gamma: false,
            n_particles: 200,
            n_samples: 100,
            smc_batches: 10,
            resample: true,
            fdr_q: 0.01,
            mu_min: None,
            literal_wald: false,
            perword_ols: false,
            ridge_lambda: None,
            dump_trajectories: false,
            resume: false,
            preset: "planted-edges".to_string(),
            sim_regions: 10,
            sim_words: 50,
            sim_weeks: 200,
            sim_planted: 10,
            sim_diag: 0.5,
            sim_gamma: 0.1,
            sim_exposure: 2000,
            sim_rate_lo: 0.002,
            sim_rate_hi: 0.01,
            n_null: None,
            folds: 5,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    /// Applies a plain-text key=value config file ('#' starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Sets one configuration key from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "input" => self.input = Some(PathBuf::from(value)),
            "centroids" => self.centroids = Some(PathBuf::from(value)),
            "panel_dir" => self.panel_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "attrs" => self.attrs = Some(PathBuf::from(value)),
            "origin" => {
                self.origin = Some(
                    chrono::NaiveDate::parse_from_str(value, "%Y-%m-%d")
                        .map_err(|_| Error::config(format!("invalid date '{value}'")))?,
                )
            }
            "n_weeks" => self.n_weeks = Some(parse(key, value)?),
            "top_n_words" => self.top_n_words = parse(key, value)?,
            "min_author_messages" => self.min_author_messages = parse(key, value)?,
            "max_author_messages" => self.max_author_messages = parse(key, value)?,
            "burst_threshold" => self.burst_threshold = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "init_state_var" => self.init_state_var = parse(key, value)?,
            "em_max_iter" => self.em_max_iter = parse(key, value)?,
            "em_rel_tol" => self.em_rel_tol = parse(key, value)?,
            "full_gamma" => self.full_gamma = parse(key, value)?,
            "n_particles" => self.n_particles = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "smc_batches" => self.smc_batches = parse(key, value)?,
            "resample" => self.resample = parse(key, value)?,
            "fdr_q" => self.fdr_q = parse(key, value)?,
            "mu_min" => self.mu_min = Some(parse(key, value)?),
            "literal_wald" => self.literal_wald = parse(key, value)?,
            "perword_ols" => self.perword_ols = parse(key, value)?,
            "ridge_lambda" => self.ridge_lambda = Some(parse(key, value)?),
            "dump_trajectories" => self.dump_trajectories = parse(key, value)?,
            "resume" => self.resume = parse(key, value)?,
            "preset" => self.preset = value.to_string(),
            "sim_regions" => self.sim_regions = parse(key, value)?,
            "sim_words" => self.sim_words = parse(key, value)?,
            "sim_weeks" => self.sim_weeks = parse(key, value)?,
            "sim_planted" => self.sim_planted = parse(key, value)?,
            "sim_diag" => self.sim_diag = parse(key, value)?,
            "sim_gamma" => self.sim_gamma = parse(key, value)?,
            "sim_exposure" => self.sim_exposure = parse(key, value)?,
            "sim_rate_lo" => self.sim_rate_lo = parse(key, value)?,
            "sim_rate_hi" => self.sim_rate_hi = parse(key, value)?,
            "n_null" => self.n_null = Some(parse(key, value)?),
            "folds" => self.folds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    fn scenario_options(&self) -> ScenarioOptions {
        ScenarioOptions {
            diag: self.sim_diag,
            gamma: self.sim_gamma,
            n_planted: self.sim_planted,
            rate_range: (self.sim_rate_lo, self.sim_rate_hi),
            k_auth: self.sim_exposure,
            ..ScenarioOptions::default()
        }
    }

    fn em_options(&self) -> EmOptions {
        EmOptions {
            max_iter: self.em_max_iter,
            rel_tol: self.em_rel_tol,
            alpha: self.alpha,
            init_state_var: self.init_state_var,
            full_gamma: self.full_gamma,
            update_zeta: true,
        }
    }

    fn smc_options(&self) -> SmcOptions {
        SmcOptions {
            n_particles: self.n_particles,
            n_samples: self.n_samples,
            n_batches: self.smc_batches,
            seed: self.seed,
            resample: self.resample,
            alpha: self.alpha,
            init_state_var: self.init_state_var,
        }
    }

    fn network_options(&self) -> NetworkOptions {
        NetworkOptions {
            q: self.fdr_q,
            literal_wald: self.literal_wald,
            per_word: self.perword_ols,
            ridge_lambda: self.ridge_lambda,
        }
    }

    /// Reports for the fit stage land next to the checkpoint.
    fn fit_report_path(&self, name: &str) -> PathBuf {
        match self.checkpoint.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => {
                let _ = std::fs::create_dir_all(parent);
                parent.join(name)
            }
            _ => PathBuf::from(name),
        }
    }
}

/// Per-stage run report with timings, counters, and warnings.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub format_version: String,
    pub stage: String,
    pub timings_ms: BTreeMap<String, u128>,
    pub counters: BTreeMap<String, serde_json::Value>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

impl RunReport {
    fn new(stage: &str, config: &RunConfig) -> Self {
        RunReport {
            format_version: REPORT_FORMAT_VERSION.to_string(),
            stage: stage.to_string(),
            timings_ms: BTreeMap::new(),
            counters: BTreeMap::new(),
            warnings: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Runs a closure inside a dedicated rayon pool when a worker count is set;
/// results are identical either way by the determinism contract.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
        pool.install(f)
    }
}

/// Simulates a scenario panel with its ground truth and synthetic region
/// attributes.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = RunReport::new("simulate", cfg);
    let start = Instant::now();
    let preset: Preset = cfg.preset.parse()?;
    let scenario = make_scenario(
        preset,
        cfg.sim_regions,
        cfg.sim_words,
        cfg.sim_weeks,
        cfg.seed,
        &cfg.scenario_options(),
    )?;
    let eta = generate_latent(&scenario)?;
    let panel = generate_counts(&eta, &scenario)?;
    panel.save_dir(&cfg.panel_dir)?;
    TruthFile::from_scenario(&scenario).save(&cfg.panel_dir.join("truth.json"))?;
    crate::analysis::write_attrs_csv(&scenario.attrs, &cfg.panel_dir.join("attrs.csv"))?;
    report.timings_ms.insert("simulate".into(), start.elapsed().as_millis());
    report.counters.insert("n_words".into(), json!(panel.n_words()));
    report.counters.insert("n_regions".into(), json!(panel.n_regions()));
    report.counters.insert("n_weeks".into(), json!(panel.n_weeks()));
    report.counters.insert("planted_edges".into(), json!(scenario.planted.len()));
    report.save(&cfg.panel_dir.join("simulate_report.json"))?;
    Ok(report)
}

/// Ingests JSONL message records into a panel directory.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = RunReport::new("ingest", cfg);
    let start = Instant::now();
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::config("ingest requires input=<records.jsonl>"))?;
    let centroids_path = cfg
        .centroids
        .as_ref()
        .ok_or_else(|| Error::config("ingest requires centroids=<regions.csv>"))?;
    if !input.exists() {
        return Err(Error::config(format!("input {} does not exist", input.display())));
    }
    let centroids = read_regions_csv(centroids_path)?;
    let mut ingest = IngestReport::default();
    let records = read_jsonl(input, &mut ingest)?;
    let opts = CorpusOptions {
        min_author_messages: cfg.min_author_messages,
        max_author_messages: cfg.max_author_messages,
        top_n_words: cfg.top_n_words,
        burst_threshold: cfg.burst_threshold,
        origin: cfg.origin,
        n_weeks: cfg.n_weeks,
    };
    let panel = build_counts_panel(records, &centroids, &opts, &mut ingest)?;
    if panel.n_words() == 0 {
        report.warnings.push("empty corpus: panel has no vocabulary".to_string());
    }
    panel.save_dir(&cfg.panel_dir)?;
    report.timings_ms.insert("ingest".into(), start.elapsed().as_millis());
    report.counters.insert("ingest".into(), serde_json::to_value(&ingest)?);
    report.save(&cfg.panel_dir.join("ingest_report.json"))?;
    Ok(report)
}

/// Estimates the background and runs EM; writes the checkpoint.
pub fn cmd_fit(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = RunReport::new("fit", cfg);
    if cfg.resume && cfg.checkpoint.exists() {
        let ck = Checkpoint::load(&cfg.checkpoint)?;
        report.counters.insert("resumed".into(), json!(true));
        report.counters.insert("a_diag".into(), json!(ck.a_diag));
        return Ok(report);
    }
    let panel = CountsPanel::load_dir(&cfg.panel_dir)?;
    panel.validate()?;
    let t0 = Instant::now();
    let background = estimate_background(&panel, cfg.alpha);
    report.timings_ms.insert("background".into(), t0.elapsed().as_millis());

    let t1 = Instant::now();
    let fit = with_workers(cfg.workers, || em_fit(&panel, &background, None, &cfg.em_options()))?;
    report.timings_ms.insert("em".into(), t1.elapsed().as_millis());

    Checkpoint::from_fit(&fit.dynamics, &background, &fit.sites).save(&cfg.checkpoint)?;
    report.counters.insert("converged".into(), json!(fit.converged));
    report.counters.insert("iterations".into(), json!(fit.trace.len() - 1));
    report.counters.insert(
        "final_bound".into(),
        json!(fit.trace.last().map(|r| r.bound)),
    );
    report
        .counters
        .insert("em_trace".into(), serde_json::to_value(&fit.trace)?);
    report.counters.insert(
        "a_diag".into(),
        json!(fit.dynamics.a_diag.iter().copied().collect::<Vec<f64>>()),
    );
    report.save(&cfg.fit_report_path("fit_report.json"))?;
    Ok(report)
}

/// SMC sampling, network estimation, FDR selection, and the three exports.
pub fn cmd_network(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = RunReport::new("network", cfg);
    let panel = CountsPanel::load_dir(&cfg.panel_dir)?;
    panel.validate()?;
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let dynamics = ck.dynamics()?;
    let background = ck.background();
    if background.nu.len() != panel.n_words() {
        return Err(Error::data("checkpoint does not match panel vocabulary size"));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let t0 = Instant::now();
    let samples = with_workers(cfg.workers, || {
        sample_trajectories(&panel, &background, &dynamics, &cfg.smc_options())
    })?;
    report.timings_ms.insert("smc".into(), t0.elapsed().as_millis());
    report.counters.insert("failed_words".into(), json!(samples.failures));
    if cfg.dump_trajectories {
        dump_trajectories(&samples, &cfg.out_dir.join("trajectories"))?;
    }

    let t1 = Instant::now();
    let estimate = estimate_network(&samples.per_word, &cfg.network_options())?;
    report.timings_ms.insert("network".into(), t1.elapsed().as_millis());

    let edges = extract_edges(&estimate, cfg.mu_min);
    write_edges_csv(&estimate, &cfg.out_dir.join("edges.csv"))?;
    write_network_json(&estimate, cfg.literal_wald, &cfg.out_dir.join("network.json"))?;
    write_network_dot(&edges, &panel.regions, &cfg.out_dir.join("network.dot"))?;

    let n_significant = estimate.significant.iter().filter(|&&b| b).count();
    report.counters.insert("discoveries".into(), json!(n_significant));
    report.counters.insert("exported_edges".into(), json!(edges.len()));
    report.counters.insert(
        "threshold".into(),
        json!(estimate.threshold.is_finite().then_some(estimate.threshold)),
    );
    report
        .counters
        .insert("n_tests".into(), json!(panel.n_regions() * (panel.n_regions() - 1)));
    report.save(&cfg.out_dir.join("network_report.json"))?;
    Ok(report)
}

/// Homophily and asymmetry analysis from edges.csv and attrs.csv.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = RunReport::new("analyze", cfg);
    let edges_path = cfg.out_dir.join("edges.csv");
    if !edges_path.exists() {
        return Err(Error::config(format!("missing {}", edges_path.display())));
    }
    let attrs_path = cfg
        .attrs
        .clone()
        .unwrap_or_else(|| cfg.panel_dir.join("attrs.csv"));
    if !attrs_path.exists() {
        return Err(Error::config(format!("missing attributes file {}", attrs_path.display())));
    }
    let rows = read_edges_csv(&edges_path)?;
    let (significant, edges) = edges_from_rows(&rows)?;
    let attrs = read_attrs_csv(&attrs_path)?;

    let t0 = Instant::now();
    let analysis = run_analysis(
        &edges,
        &significant,
        &attrs,
        &AnalysisOptions { n_null: cfg.n_null, folds: cfg.folds, seed: cfg.seed },
    )?;
    report.timings_ms.insert("analysis".into(), t0.elapsed().as_millis());

    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("analysis_report.json"),
        serde_json::to_string_pretty(&analysis)?,
    )?;
    std::fs::write(cfg.out_dir.join("analysis_report.md"), render_markdown(&analysis))?;
    report.counters.insert("n_linked".into(), json!(analysis.n_linked_pairs));
    report.counters.insert(
        "n_asymmetric".into(),
        json!(analysis.asymmetric.as_ref().map(|a| a.n_pairs).unwrap_or(0)),
    );
    report.save(&cfg.out_dir.join("analyze_report.json"))?;
    Ok(report)
}

/// Runs simulate (or ingest when an input file is configured), fit, network,
/// and analyze in sequence.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    if cfg.input.is_some() {
        reports.push(cmd_ingest(cfg)?);
    } else {
        reports.push(cmd_simulate(cfg)?);
    }
    reports.push(cmd_fit(cfg)?);
    reports.push(cmd_network(cfg)?);
    let attrs_path = cfg
        .attrs
        .clone()
        .unwrap_or_else(|| cfg.panel_dir.join("attrs.csv"));
    if attrs_path.exists() {
        // A sparse or empty network legitimately cannot support the paired
        // analyses; that is a property of the data, not a pipeline failure.
        match cmd_analyze(cfg) {
            Ok(r) => reports.push(r),
            Err(Error::Data(msg)) => log::warn!("analysis skipped: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(reports)
}
