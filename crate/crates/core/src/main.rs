use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lexflow::pipeline::{
    cmd_analyze, cmd_fit, cmd_ingest, cmd_network, cmd_pipeline, cmd_simulate, RunConfig,
    RunReport,
};

#[derive(Parser)]
#[command(
    name = "lexflow",
    version,
    about = "Latent logistic-binomial VAR modeling of word-usage panels and influence-network induction"
)]
struct Cli {
    /// Plain-text key=value configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonOpts {
    /// Master seed for all stochastic stages.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = rayon default); output is worker-count invariant.
    #[arg(long)]
    workers: Option<usize>,
    /// Panel directory (output of ingest/simulate, input of fit/network).
    #[arg(long)]
    panel_dir: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for network and analysis products.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ModelOpts {
    /// Forward particles per word.
    #[arg(long)]
    particles: Option<usize>,
    /// FFBS draws per word.
    #[arg(long)]
    samples: Option<usize>,
    /// Independent forward-filter batches the draws are spread over.
    #[arg(long)]
    batches: Option<usize>,
    /// Maximum EM iterations.
    #[arg(long)]
    em_max_iter: Option<usize>,
    /// Relative bound change stopping EM.
    #[arg(long)]
    em_rel_tol: Option<f64>,
    /// FDR target q.
    #[arg(long)]
    q: Option<f64>,
    /// Minimum mu for exported edges.
    #[arg(long)]
    mu_min: Option<f64>,
    /// Disable ESS-triggered multinomial resampling in the forward filter
    /// (the paper-parity plain bootstrap; weights degenerate on long panels).
    #[arg(long)]
    no_resampling: bool,
    /// Estimate a full (pooled) process covariance instead of diagonal.
    #[arg(long)]
    full_gamma: bool,
    /// Use the literal mu/sigma^2 statistic instead of the Wald mu/sigma.
    #[arg(long)]
    literal_wald: bool,
    /// Fit one OLS per word per draw and average, instead of pooling.
    #[arg(long)]
    perword_ols: bool,
    /// Ridge penalty for the per-draw regressions.
    #[arg(long)]
    ridge_lambda: Option<f64>,
    /// Write the binary trajectory dump next to the network outputs.
    #[arg(long)]
    dump_trajectories: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Turn JSONL message records into a counts panel.
    Ingest {
        #[command(flatten)]
        common: CommonOpts,
        /// JSONL file of message records.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Region centroid CSV (region_id,name,lat,lon).
        #[arg(long)]
        centroids: Option<PathBuf>,
        /// Week origin date (YYYY-MM-DD); derived from the data when absent.
        #[arg(long)]
        origin: Option<String>,
        /// Vocabulary size before the burst filter.
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Simulate a scenario panel with known ground truth.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        /// Scenario preset: null, planted-edges, cascade, gravity.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        regions: Option<usize>,
        #[arg(long)]
        words: Option<usize>,
        #[arg(long)]
        weeks: Option<usize>,
        /// Planted off-diagonal entries (planted-edges preset).
        #[arg(long)]
        planted: Option<usize>,
        /// Exposure count per region-week.
        #[arg(long)]
        exposure: Option<u32>,
    },
    /// Estimate the background and run EM; write the checkpoint.
    Fit {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        model: ModelOpts,
        /// Reuse an existing checkpoint instead of refitting.
        #[arg(long)]
        resume: bool,
    },
    /// Sample trajectories, estimate the network, select edges under FDR.
    Network {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Run the homophily and asymmetry analyses from edges and attributes.
    Analyze {
        #[command(flatten)]
        common: CommonOpts,
        /// Region attributes CSV; defaults to <panel_dir>/attrs.csv.
        #[arg(long)]
        attrs: Option<PathBuf>,
        /// Null pairs to sample (default: one per linked pair).
        #[arg(long)]
        n_null: Option<usize>,
    },
    /// Run all stages: simulate (or ingest), fit, network, analyze.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        model: ModelOpts,
        /// JSONL input; when present the pipeline ingests instead of
        /// simulating.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        centroids: Option<PathBuf>,
        #[arg(long)]
        attrs: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn apply_common(cfg: &mut RunConfig, c: &CommonOpts) {
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.workers {
        cfg.workers = v;
    }
    if let Some(v) = &c.panel_dir {
        cfg.panel_dir = v.clone();
    }
    if let Some(v) = &c.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = &c.out_dir {
        cfg.out_dir = v.clone();
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelOpts) {
    if let Some(v) = m.particles {
        cfg.n_particles = v;
    }
    if let Some(v) = m.samples {
        cfg.n_samples = v;
    }
    if let Some(v) = m.batches {
        cfg.smc_batches = v;
    }
    if let Some(v) = m.em_max_iter {
        cfg.em_max_iter = v;
    }
    if let Some(v) = m.em_rel_tol {
        cfg.em_rel_tol = v;
    }
    if let Some(v) = m.q {
        cfg.fdr_q = v;
    }
    if let Some(v) = m.mu_min {
        cfg.mu_min = Some(v);
    }
    if let Some(v) = m.ridge_lambda {
        cfg.ridge_lambda = Some(v);
    }
    if m.no_resampling {
        cfg.resample = false;
    }
    if m.full_gamma {
        cfg.full_gamma = true;
    }
    if m.literal_wald {
        cfg.literal_wald = true;
    }
    if m.perword_ols {
        cfg.perword_ols = true;
    }
    if m.dump_trajectories {
        cfg.dump_trajectories = true;
    }
}

fn print_report(report: &RunReport) {
    match report.stage.as_str() {
        "ingest" => {
            if let Some(counters) = report.counters.get("ingest") {
                let kept = &counters["authors_kept"];
                let vocab = &counters["vocab_size"];
                println!("ingest: kept {kept} authors, vocabulary {vocab} words");
            }
        }
        "simulate" => println!(
            "simulate: panel {} words x {} regions x {} weeks ({} planted edges)",
            report.counters["n_words"],
            report.counters["n_regions"],
            report.counters["n_weeks"],
            report.counters["planted_edges"]
        ),
        "fit" => {
            if report.counters.get("resumed").is_some() {
                println!("fit: resumed from existing checkpoint");
            } else {
                println!(
                    "fit: converged={} after {} iterations, bound {}",
                    report.counters["converged"],
                    report.counters["iterations"],
                    report.counters["final_bound"]
                );
            }
        }
        "network" => println!(
            "network: {} significant of {} tested ordered pairs, z threshold {}",
            report.counters["discoveries"],
            report.counters["n_tests"],
            report.counters["threshold"]
        ),
        "analyze" => println!(
            "analyze: {} linked pairs, {} one-directional pairs",
            report.counters["n_linked"], report.counters["n_asymmetric"]
        ),
        _ => {}
    }
}

fn run() -> lexflow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }

    match &cli.command {
        Command::Ingest { common, input, centroids, origin, top_n } => {
            apply_common(&mut cfg, common);
            if let Some(v) = input {
                cfg.input = Some(v.clone());
            }
            if let Some(v) = centroids {
                cfg.centroids = Some(v.clone());
            }
            if let Some(v) = origin {
                cfg.set("origin", v)?;
            }
            if let Some(v) = top_n {
                cfg.top_n_words = *v;
            }
            print_report(&cmd_ingest(&cfg)?);
        }
        Command::Simulate { common, preset, regions, words, weeks, planted, exposure } => {
            apply_common(&mut cfg, common);
            if let Some(v) = preset {
                cfg.preset = v.clone();
            }
            if let Some(v) = regions {
                cfg.sim_regions = *v;
            }
            if let Some(v) = words {
                cfg.sim_words = *v;
            }
            if let Some(v) = weeks {
                cfg.sim_weeks = *v;
            }
            if let Some(v) = planted {
                cfg.sim_planted = *v;
            }
            if let Some(v) = exposure {
                cfg.sim_exposure = *v;
            }
            print_report(&cmd_simulate(&cfg)?);
        }
        Command::Fit { common, model, resume } => {
            apply_common(&mut cfg, common);
            apply_model(&mut cfg, model);
            if *resume {
                cfg.resume = true;
            }
            print_report(&cmd_fit(&cfg)?);
        }
        Command::Network { common, model } => {
            apply_common(&mut cfg, common);
            apply_model(&mut cfg, model);
            print_report(&cmd_network(&cfg)?);
        }
        Command::Analyze { common, attrs, n_null } => {
            apply_common(&mut cfg, common);
            if let Some(v) = attrs {
                cfg.attrs = Some(v.clone());
            }
            if let Some(v) = n_null {
                cfg.n_null = Some(*v);
            }
            print_report(&cmd_analyze(&cfg)?);
        }
        Command::Pipeline { common, model, input, centroids, attrs, preset } => {
            apply_common(&mut cfg, common);
            apply_model(&mut cfg, model);
            if let Some(v) = input {
                cfg.input = Some(v.clone());
            }
            if let Some(v) = centroids {
                cfg.centroids = Some(v.clone());
            }
            if let Some(v) = attrs {
                cfg.attrs = Some(v.clone());
            }
            if let Some(v) = preset {
                cfg.preset = v.clone();
            }
            for report in cmd_pipeline(&cfg)? {
                print_report(&report);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
