//! `prism`: run the benchmark harness from the command line.
//!
//! Settings are layered: built-in defaults, then the config file (or, with
//! `--resume`, the config saved in the output directory), then flags.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use prism_core::harness::{self, BackendKind, HarnessConfig, RunReport};
use prism_core::{AggregationMethod, StrategyName};

#[derive(Debug, Parser)]
#[command(name = "prism", version, about = "PRM-guided population refinement benchmark harness")]
struct Args {
    /// JSON config file. Relative paths inside it resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL dataset of problems.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Enhancement strategy.
    #[arg(long)]
    strategy: Option<StrategyName>,
    /// Aggregation method; repeat to evaluate several.
    #[arg(long = "aggregation")]
    aggregations: Vec<AggregationMethod>,
    #[arg(long)]
    seed: Option<u64>,
    /// `wire` for an OpenAI-compatible endpoint, `sim` for the scripted simulator.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Simulator world file (JSON).
    #[arg(long)]
    sim_world: Option<PathBuf>,
    /// Upper bound on concurrent backend calls.
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Number of problems to run after `--offset`.
    #[arg(long)]
    limit: Option<usize>,
    /// Problems to skip from the start of the dataset.
    #[arg(long)]
    offset: Option<usize>,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run in the output directory from its checkpoints.
    #[arg(long)]
    resume: bool,
    /// Disable per-iteration checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
    /// Read shared initial populations from this JSONL file.
    #[arg(long)]
    initial_population: Option<PathBuf>,
    /// Write the initial populations to `<out>/initial_population.jsonl`.
    #[arg(long)]
    export_initial_population: bool,
}

impl Args {
    fn base_config(&self) -> anyhow::Result<HarnessConfig> {
        if let Some(path) = &self.config {
            return HarnessConfig::from_file(path).with_context(|| format!("loading {}", path.display()));
        }
        if self.resume {
            let Some(out) = &self.out else {
                bail!("--resume needs --out or --config");
            };
            let saved = out.join("config.json");
            return HarnessConfig::from_file(&saved).with_context(|| format!("loading {}", saved.display()));
        }
        Ok(HarnessConfig::default())
    }

    fn apply(&self, config: &mut HarnessConfig) {
        if let Some(v) = &self.dataset {
            config.dataset = v.clone();
        }
        if let Some(v) = self.strategy {
            config.strategy.name = v;
        }
        if !self.aggregations.is_empty() {
            config.aggregations = self.aggregations.clone();
        }
        if let Some(v) = self.seed {
            config.run.seed = v;
        }
        if let Some(v) = self.backend {
            config.backend.kind = v;
        }
        if let Some(v) = &self.sim_world {
            config.backend.sim_world = Some(v.clone());
        }
        if let Some(v) = self.max_parallel {
            config.run.max_parallel = v;
        }
        if let Some(v) = self.limit {
            config.limit = Some(v);
        }
        if let Some(v) = self.offset {
            config.offset = v;
        }
        if let Some(v) = &self.out {
            config.out = v.clone();
        }
        if self.no_checkpoints {
            config.checkpoints = false;
        }
        if let Some(v) = &self.initial_population {
            config.initial_population = Some(v.clone());
        }
        if self.export_initial_population {
            config.export_initial_population = true;
        }
    }
}

fn print_summary(report: &RunReport, out: &std::path::Path) {
    let s = &report.summary;
    println!(
        "strategy {}: {} problems, {} completed, {} failed",
        report.strategy.name.as_str(),
        s.problems,
        s.completed,
        s.failed
    );
    for (method, acc) in &s.accuracy {
        match acc {
            Some(a) => println!("  {:<10} accuracy {:.2}% (SE {:.2}, n={})", method.name(), 100.0 * a.mean, 100.0 * a.se, a.n),
            None => println!("  {:<10} accuracy n/a", method.name()),
        }
    }
    let pop: Vec<String> = s.pop_acc.iter().map(|p| format!("{:.3}", p)).collect();
    println!("  PopAcc by depth [{}]", pop.join(", "));
    if let Some(nf) = &s.net_flip_per_problem {
        println!("  NetFlip {:.3} per problem (SE {:.3}), {} pooled", nf.mean, nf.se, s.net_flip_pooled);
    }
    if let Some(r) = s.resampling_rate {
        println!("  resampling rate {:.3}, mean ESS/N {:.3}", r, s.mean_ess_over_n.unwrap_or(f64::NAN));
    }
    println!("  tokens {} (${:.4})", s.total_tokens, s.cost);
    println!("  report: {}", out.join("report.json").display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(report) if report.summary.failed == 0 => ExitCode::SUCCESS,
        Ok(_) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: &Args) -> anyhow::Result<RunReport> {
    let mut config = args.base_config()?;
    args.apply(&mut config);
    if config.dataset.as_os_str().is_empty() {
        bail!("no dataset: pass --dataset or set it in --config");
    }
    let report = if args.resume { harness::resume_with(&config)? } else { harness::run(&config)? };
    print_summary(&report, &config.out);
    for p in report.problems.iter().filter(|p| p.error.is_some()) {
        eprintln!("{} failed: {}", p.problem_id, p.error.as_deref().unwrap_or(""));
    }
    Ok(report)
}
