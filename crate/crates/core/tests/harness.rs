use std::path::Path;

use prism_core::aggregate::AggregationMethod;
use prism_core::backends::sim::ScriptedWorld;
use prism_core::backends::{CallPurpose, CallRecord};
use prism_core::baselines::{Strategy, StrategyName};
use prism_core::harness::checkpoint::{FinalCheckpoint, IterationCheckpoint};
use prism_core::harness::{self, HarnessConfig, ProblemStatus};
use prism_core::metrics::mean_se;

fn dataset(dir: &Path, problems: usize) -> std::path::PathBuf {
    let path = dir.join("data.jsonl");
    let lines: Vec<String> = (0..problems)
        .map(|i| format!(r#"{{"id": "q{i}", "statement": "Compute item {i}.", "gold_answer": "{}"}}"#, 10 + i))
        .collect();
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

fn config(dir: &Path, problems: usize, strategy: StrategyName) -> HarnessConfig {
    let mut c = HarnessConfig {
        dataset: dataset(dir, problems),
        strategy: Strategy::new(strategy),
        out: dir.join("out"),
        ..HarnessConfig::default()
    };
    c.run.max_parallel = 4;
    c
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn all_calls(out: &Path, problem: &str, t: usize) -> Vec<CallRecord> {
    let dir = out.join("checkpoints").join(problem);
    let mut calls = Vec::new();
    for k in 0..=t {
        let cp: IterationCheckpoint = read(&dir.join(format!("iter_{k:03}.json")));
        calls.extend(cp.calls);
    }
    let fin: FinalCheckpoint = read(&dir.join("final.json"));
    calls.extend(fin.calls);
    calls
}

#[test]
fn prism_call_budget_for_one_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 3, StrategyName::Prism);
    c.limit = Some(1);
    c.offset = 1;
    let report = harness::run(&c).unwrap();
    assert_eq!(report.problems.len(), 1);
    assert_eq!(report.problems[0].problem_id, "q1");

    let (n, t) = (c.run.n, c.run.t);
    let calls = all_calls(&c.out, "q1", t);
    let count = |p| calls.iter().filter(|c| c.meta.purpose == p).count();
    let arbitrations = report.problems[0].arbitrations;
    assert_eq!(count(CallPurpose::Generate), n);
    assert_eq!(count(CallPurpose::Score), t * n);
    assert_eq!(count(CallPurpose::LocalRefine) + count(CallPurpose::Explore), t * n);
    // The simulator always returns an answer, so no proposal is a no-op.
    assert_eq!(count(CallPurpose::ScoreProposal), t * n);
    assert_eq!(count(CallPurpose::Compare), arbitrations);
    assert_eq!(count(CallPurpose::ScoreFinal), 0);
    assert_eq!(calls.len(), n + t * 3 * n + arbitrations);

    let tokens: u64 = calls.iter().map(|c| c.usage.input_tokens + c.usage.output_tokens).sum();
    assert_eq!(report.summary.total_tokens, tokens as i64);
    let p = &report.problems[0];
    assert_eq!(p.pop_acc.len(), t + 1);
    assert_eq!(p.ess_over_n.len(), t);
    assert!(p.ess_over_n.iter().all(|e| *e > 0.0 && *e <= 1.0));
    let flips = p.i2c.iter().sum::<usize>() as i64 - p.c2i.iter().sum::<usize>() as i64;
    assert_eq!(p.net_flip, Some(flips));

    for f in ["report.json", "per_problem.csv", "per_iteration.csv", "config.json"] {
        assert!(c.out.join(f).is_file(), "{f}");
    }
    let rows = std::fs::read_to_string(c.out.join("per_iteration.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + t + 1);
}

#[test]
fn none_strategy_is_simple_voting() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 4, StrategyName::None);
    c.aggregations = vec![AggregationMethod::Majority];
    let report = harness::run(&c).unwrap();
    for p in &report.problems {
        assert!(p.pop_acc.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(p.net_flip, Some(0));
        let calls = all_calls(&c.out, &p.problem_id, c.run.t);
        assert!(calls.iter().all(|c| c.meta.purpose == CallPurpose::Generate));
        let first: IterationCheckpoint = read(&c.out.join("checkpoints").join(&p.problem_id).join("iter_000.json"));
        let fin: FinalCheckpoint = read(&c.out.join("checkpoints").join(&p.problem_id).join("final.json"));
        assert_eq!(first.population.particles, fin.population.particles);
    }
    assert!(report.summary.resampling_rate.is_none());
}

#[test]
fn prm_vote_scores_unscored_baseline_populations() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 2, StrategyName::MadConformist);
    c.aggregations = vec![AggregationMethod::PrmScore, AggregationMethod::Llm];
    let report = harness::run(&c).unwrap();
    let calls = all_calls(&c.out, "q0", c.run.t);
    assert_eq!(calls.iter().filter(|c| c.meta.purpose == CallPurpose::ScoreFinal).count(), c.run.n);
    assert_eq!(calls.iter().filter(|c| c.meta.purpose == CallPurpose::Aggregate).count(), 1);
    assert!(report.problems.iter().all(|p| p.answers.len() == 2));
}

#[test]
fn failures_are_isolated_per_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 3, StrategyName::Prism);
    // An initial population of the wrong width makes one problem fail.
    let bad = dir.path().join("init.jsonl");
    std::fs::write(&bad, r#"{"problem_id": "q1", "traces": []}"#).unwrap();
    c.initial_population = Some(bad);
    let report = harness::run(&c).unwrap();
    let status: Vec<_> = report.problems.iter().map(|p| p.status).collect();
    assert_eq!(status, [ProblemStatus::Ok, ProblemStatus::Failed, ProblemStatus::Ok]);
    assert!(report.problems[1].error.as_deref().unwrap().contains("expected 10"));
    assert_eq!((report.summary.completed, report.summary.failed), (2, 1));
}

#[test]
fn initial_populations_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = config(dir.path(), 3, StrategyName::None);
    a.export_initial_population = true;
    let ra = harness::run(&a).unwrap();
    let exported = a.out.join("initial_population.jsonl");
    assert_eq!(std::fs::read_to_string(&exported).unwrap().lines().count(), 3);

    let mut b = config(dir.path(), 3, StrategyName::Prism);
    b.out = dir.path().join("out-b");
    b.initial_population = Some(exported);
    b.run.seed = 99;
    let rb = harness::run(&b).unwrap();
    for (pa, pb) in ra.problems.iter().zip(&rb.problems) {
        assert_eq!(pa.pop_acc[0], pb.pop_acc[0]);
    }
    let calls = all_calls(&b.out, "q0", b.run.t);
    assert!(calls.iter().all(|c| c.meta.purpose != CallPurpose::Generate));
}

#[test]
fn resume_requires_checkpoints_and_reads_saved_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 2, StrategyName::Prism);
    c.checkpoints = false;
    assert!(harness::resume_with(&c).is_err());
    c.checkpoints = true;
    let first = harness::run(&c).unwrap();
    std::fs::remove_dir_all(c.out.join("checkpoints").join("q1")).unwrap();
    let resumed = harness::resume(&c.out).unwrap();
    assert_eq!(first, resumed);
}

#[test]
fn config_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1);
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{"dataset": "data.jsonl", "strategy": {"name": "mad_follower", "params": {"follower_fraction": 0.3}},
            "run": {"n": 4, "t": 2}, "backend": {"kind": "sim", "world": {"p_init_correct": 0.9}}}"#,
    )
    .unwrap();
    let c = HarnessConfig::from_file(&path).unwrap();
    c.validate().unwrap();
    assert_eq!(c.strategy.params.follower_fraction, 0.3);
    let mut bad = c.clone();
    bad.run.alpha = 1.5;
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.backend.world.as_mut().unwrap().p_fix = 2.0;
    assert!(bad.validate().is_err());
}

#[test]
fn unguided_rewriting_is_balanced_at_even_odds() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 200, StrategyName::CriticRefine);
    c.checkpoints = false;
    c.aggregations = vec![AggregationMethod::Majority];
    c.backend.world = Some(ScriptedWorld {
        p_init_correct: 0.5,
        p_fix: 0.3,
        p_break: 0.3,
        rho: 0.1,
        ..ScriptedWorld::default()
    });
    let report = harness::run(&c).unwrap();
    let flips: Vec<f64> = report.problems.iter().map(|p| p.net_flip.unwrap() as f64).collect();
    let (mean, se) = mean_se(&flips).unwrap();
    assert!(mean.abs() <= 3.0 * se, "mean NetFlip {mean} (SE {se})");
}
