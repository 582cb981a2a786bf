//! Run orchestration: dataset ingestion, per-problem execution with
//! checkpoints, resume, and report emission.
//!
//! A run writes into its output directory:
//!
//! ```text
//! config.json          the resolved configuration
//! checkpoints/...      one directory per problem
//! report.json          the run report
//! per_problem.csv
//! per_iteration.csv
//! ```
//!
//! The report is derived from checkpoint contents only, so an interrupted
//! run that is resumed produces the same report as an uninterrupted one.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{llm_aggregate, majority_vote, prm_score_vote, AggregateResult, AggregationMethod};
use crate::backends::{Backends, CallLog, CallPurpose, Caller};
use crate::domain::{load_dataset, Problem, Trace};
use crate::engine::{generate_population, score_unscored, Particle, Population};
use crate::error::{Error, Result};
use crate::template::PromptSet;
use checkpoint::{FinalCheckpoint, IterationCheckpoint, ProblemDir, Restored, CHECKPOINT_SCHEMA};
pub use config::{BackendConfig, BackendKind, HarnessConfig};
pub use report::{build_report, write_report, ProblemReport, ProblemStatus, RunReport, Summary};

/// One line of an initial-population file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPopulation {
    pub problem_id: String,
    pub traces: Vec<Trace>,
}

/// Runs every selected problem from scratch, discarding old checkpoints.
pub fn run(config: &HarnessConfig) -> Result<RunReport> {
    execute(config, false)
}

/// Continues the run stored in `out` from its checkpoints.
pub fn resume(out: &Path) -> Result<RunReport> {
    let path = out.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: HarnessConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    resume_with(&config)
}

/// Continues a run with an explicit configuration.
pub fn resume_with(config: &HarnessConfig) -> Result<RunReport> {
    if !config.checkpoints {
        return Err(Error::Config("resume needs checkpoints enabled".into()));
    }
    execute(config, true)
}

/// Problems selected by `offset` and `limit`.
pub fn select_problems(config: &HarnessConfig) -> Result<Vec<Problem>> {
    let problems = load_dataset(&config.dataset)?;
    let limit = config.limit.unwrap_or(usize::MAX);
    Ok(problems.into_iter().skip(config.offset).take(limit).collect())
}

pub fn read_initial_populations(path: &Path) -> Result<BTreeMap<String, Vec<Trace>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: InitialPopulation = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(entry.problem_id, entry.traces);
    }
    Ok(out)
}

struct Context<'a> {
    config: &'a HarnessConfig,
    backends: &'a Backends,
    prompts: &'a PromptSet,
    initial: &'a BTreeMap<String, Vec<Trace>>,
    resume: bool,
}

fn execute(config: &HarnessConfig, resume: bool) -> Result<RunReport> {
    config.validate()?;
    let problems = select_problems(config)?;
    let prompts = config.prompts()?;
    let backends = config.backend.build(&problems, config.run.seed)?;
    let initial = match &config.initial_population {
        Some(path) => read_initial_populations(path)?,
        None => BTreeMap::new(),
    };
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    checkpoint::write_atomic(&config.out.join("config.json"), config)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.max_parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Context {
        config,
        backends: &backends,
        prompts: &prompts,
        initial: &initial,
        resume,
    };
    let results: Vec<(ProblemReport, Option<Population>)> =
        pool.install(|| problems.par_iter().map(|p| run_problem(&ctx, p)).collect());

    if config.export_initial_population {
        let path = config.out.join("initial_population.jsonl");
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for (_, population) in &results {
            let Some(population) = population else { continue };
            let entry = InitialPopulation {
                problem_id: population.problem_id.clone(),
                traces: population.particles.iter().map(|p| p.trace.clone()).collect(),
            };
            writeln!(file, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))?;
        }
    }

    let report = build_report(results.into_iter().map(|(r, _)| r).collect(), config);
    write_report(&report, &config.out)?;
    Ok(report)
}

fn run_problem(ctx: &Context<'_>, problem: &Problem) -> (ProblemReport, Option<Population>) {
    let cfg = ctx.config;
    let dir = ProblemDir::new(&cfg.out, &problem.id);
    let mut state = Restored::default();
    if ctx.resume {
        match dir.restore(&problem.id, cfg.run.n, cfg.run.t) {
            Ok(restored) => state = restored,
            Err(e) => {
                log::warn!("{}: {e}; restarting from t=0", problem.id);
                if let Err(e) = dir.clear() {
                    log::warn!("{}: {e}", problem.id);
                }
            }
        }
    } else if cfg.checkpoints {
        if let Err(e) = dir.clear() {
            log::warn!("{}: {e}", problem.id);
        }
    }

    let outcome = catch_unwind(AssertUnwindSafe(|| advance(ctx, problem, &dir, &mut state)));
    let error = match outcome {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => Some(
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    if let Some(e) = &error {
        log::error!("{} failed: {e}", problem.id);
    } else {
        log::info!("{} done", problem.id);
    }
    let report = report::problem_report(problem, &state.iterations, state.final_state.as_ref(), error, cfg);
    let initial = state.iterations.into_iter().next().map(|cp| cp.population);
    (report, initial)
}

fn advance(ctx: &Context<'_>, problem: &Problem, dir: &ProblemDir, state: &mut Restored) -> Result<()> {
    let cfg = ctx.config;
    let log = CallLog::default();
    let caller = Caller {
        problem,
        backends: ctx.backends,
        prompts: ctx.prompts,
        config: &cfg.run,
        log: &log,
    };
    let save = |cp: &IterationCheckpoint| if cfg.checkpoints { dir.write_iteration(cp) } else { Ok(()) };

    if state.iterations.is_empty() {
        let population = match ctx.initial.get(&problem.id) {
            Some(traces) => imported_population(problem, traces, cfg.run.n)?,
            None => generate_population(&caller, cfg.run.n),
        };
        let cp = IterationCheckpoint {
            schema_version: CHECKPOINT_SCHEMA,
            problem_id: problem.id.clone(),
            iteration: 0,
            population,
            record: None,
            sources: Vec::new(),
            calls: log.take_sorted(),
        };
        save(&cp)?;
        state.iterations.push(cp);
    }

    loop {
        let last = state.iterations.last().expect("initial population present");
        if last.iteration >= cfg.run.t {
            break;
        }
        let step = cfg.strategy.step(last.population.clone(), &caller)?;
        let cp = IterationCheckpoint {
            schema_version: CHECKPOINT_SCHEMA,
            problem_id: problem.id.clone(),
            iteration: step.population.iteration,
            population: step.population,
            record: step.record,
            sources: step.sources,
            calls: log.take_sorted(),
        };
        save(&cp)?;
        state.iterations.push(cp);
    }

    if state.final_state.is_none() {
        let mut population = state.iterations.last().expect("present").population.clone();
        if cfg.aggregations.contains(&AggregationMethod::PrmScore) {
            score_unscored(&mut population, &caller, CallPurpose::ScoreFinal);
        }
        let aggregates: Vec<AggregateResult> = cfg
            .aggregations
            .iter()
            .map(|m| match m {
                AggregationMethod::Majority => majority_vote(&population),
                AggregationMethod::PrmScore => prm_score_vote(&population),
                AggregationMethod::Llm => llm_aggregate(&population, &caller),
            })
            .collect();
        let fin = FinalCheckpoint {
            schema_version: CHECKPOINT_SCHEMA,
            problem_id: problem.id.clone(),
            population,
            aggregates,
            calls: log.take_sorted(),
        };
        if cfg.checkpoints {
            dir.write_final(&fin)?;
        }
        state.final_state = Some(fin);
    }
    Ok(())
}

fn imported_population(problem: &Problem, traces: &[Trace], n: usize) -> Result<Population> {
    if traces.len() != n {
        return Err(Error::Config(format!(
            "initial population for {} has {} traces, expected {n}",
            problem.id,
            traces.len()
        )));
    }
    Ok(Population {
        problem_id: problem.id.clone(),
        iteration: 0,
        particles: traces.iter().cloned().map(Particle::unscored).collect(),
    })
}
