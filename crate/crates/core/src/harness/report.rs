//! Run reports, rebuilt entirely from checkpoint data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{FinalCheckpoint, IterationCheckpoint};
use super::config::{BackendKind, HarnessConfig};
use crate::aggregate::AggregationMethod;
use crate::backends::{Role, TransportStatus};
use crate::baselines::Strategy;
use crate::domain::{Answer, Problem, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    correctness, cost_estimate, mean_se, pop_acc, transitions, AcceptanceDiagnostics, AcceptanceTally,
    DominanceStats, Pricing, TokenTotals,
};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemReport {
    pub problem_id: String,
    pub status: ProblemStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub gold: Option<Answer>,
    /// Final answer per aggregation method.
    pub answers: BTreeMap<AggregationMethod, Option<Answer>>,
    /// Whether each final answer matches gold; empty without gold.
    pub correct: BTreeMap<AggregationMethod, bool>,
    /// Fraction of correct particles at t = 0..T; empty without gold.
    pub pop_acc: Vec<f64>,
    /// Incorrect-to-correct transitions at t = 1..T.
    pub i2c: Vec<usize>,
    /// Correct-to-incorrect transitions at t = 1..T.
    pub c2i: Vec<usize>,
    pub net_flip: Option<i64>,
    /// ESS / N per iteration (PRISM only).
    pub ess_over_n: Vec<f64>,
    pub resampled: Vec<bool>,
    pub dominance: DominanceStats,
    pub acceptance: AcceptanceTally,
    pub arbitrations: usize,
    pub proposal_transport_failures: usize,
    pub failed_calls: usize,
    pub tokens: BTreeMap<Role, TokenTotals>,
    pub total_tokens: i64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    fn of(values: &[f64]) -> Option<Self> {
        mean_se(values).map(|(mean, se)| MeanSe {
            mean,
            se,
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problems: usize,
    pub completed: usize,
    pub failed: usize,
    /// Final-answer accuracy per method over completed problems with gold.
    pub accuracy: BTreeMap<AggregationMethod, Option<MeanSe>>,
    /// Mean PopAcc at t = 0..T.
    pub pop_acc: Vec<f64>,
    /// NetFlip summed over all problems.
    pub net_flip_pooled: i64,
    /// NetFlip averaged across problems.
    pub net_flip_per_problem: Option<MeanSe>,
    pub i2c: Vec<usize>,
    pub c2i: Vec<usize>,
    pub mean_ess_over_n: Option<f64>,
    /// Fraction of iterations that triggered resampling.
    pub resampling_rate: Option<f64>,
    /// Dominance over resampling events, from pre-cap offspring counts.
    pub resampling_events: usize,
    pub p_dominant_gt_03: Option<f64>,
    pub p_takeover: Option<f64>,
    pub acceptance: AcceptanceDiagnostics,
    pub tokens: BTreeMap<Role, TokenTotals>,
    pub total_tokens: i64,
    pub mean_tokens_per_problem: Option<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub aggregations: Vec<AggregationMethod>,
    pub run: RunConfig,
    pub backend: BackendKind,
    pub pricing: Pricing,
    pub problems: Vec<ProblemReport>,
    pub summary: Summary,
}

/// Builds one problem's report from its checkpoint chain. A missing final
/// checkpoint marks the problem failed with `error`.
pub fn problem_report(
    problem: &Problem,
    iterations: &[IterationCheckpoint],
    final_state: Option<&FinalCheckpoint>,
    error: Option<String>,
    config: &HarnessConfig,
) -> ProblemReport {
    let gold = problem.gold();
    let status = if final_state.is_some() && error.is_none() {
        ProblemStatus::Ok
    } else {
        ProblemStatus::Failed
    };

    let mut pop_accs = Vec::new();
    let (mut i2c, mut c2i) = (Vec::new(), Vec::new());
    if let Some(gold) = &gold {
        pop_accs = iterations.iter().map(|cp| pop_acc(&cp.population, gold)).collect();
        for pair in iterations.windows(2) {
            let prev = correctness(&pair[0].population, gold);
            let before: Vec<bool> = pair[1].sources.iter().map(|&s| prev[s]).collect();
            let after = correctness(&pair[1].population, gold);
            let (up, down) = transitions(&before, &after);
            i2c.push(up);
            c2i.push(down);
        }
    }
    let net_flip = gold.as_ref().map(|_| i2c.iter().sum::<usize>() as i64 - c2i.iter().sum::<usize>() as i64);

    let records: Vec<_> = iterations.iter().filter_map(|cp| cp.record.clone()).collect();
    let n = config.run.n as f64;
    let mut dominance = DominanceStats::default();
    for counts in records.iter().filter_map(|r| r.offspring_counts_pre_cap.as_ref()) {
        dominance.observe(counts, config.run.n);
    }
    let mut acceptance = AcceptanceTally::default();
    acceptance.observe(&records, config.run.t_smc, config.run.epsilon);

    let calls = iterations
        .iter()
        .flat_map(|cp| &cp.calls)
        .chain(final_state.iter().flat_map(|f| &f.calls));
    let mut tokens: BTreeMap<Role, TokenTotals> = BTreeMap::new();
    let mut failed_calls = 0;
    for call in calls {
        tokens.entry(call.role).or_default().add_call(call);
        failed_calls += usize::from(call.status != TransportStatus::Ok);
    }
    let mut all = TokenTotals::default();
    tokens.values().for_each(|t| all.merge(t));

    let mut answers = BTreeMap::new();
    let mut correct = BTreeMap::new();
    for agg in final_state.iter().flat_map(|f| &f.aggregates) {
        answers.insert(agg.method, agg.answer.clone());
        if let Some(gold) = &gold {
            correct.insert(agg.method, agg.answer.as_ref() == Some(gold));
        }
    }

    ProblemReport {
        problem_id: problem.id.clone(),
        status,
        error,
        gold,
        answers,
        correct,
        pop_acc: pop_accs,
        i2c,
        c2i,
        net_flip,
        ess_over_n: records.iter().map(|r| r.ess / n).collect(),
        resampled: records.iter().map(|r| r.resampled).collect(),
        dominance,
        acceptance,
        arbitrations: records.iter().map(|r| r.arbitration_events.len()).sum(),
        proposal_transport_failures: records.iter().map(|r| r.proposal_transport_failures).sum(),
        failed_calls,
        total_tokens: all.total(),
        cost: cost_estimate(&all, &config.pricing).unwrap_or(0.0),
        tokens,
    }
}

fn summarize(problems: &[ProblemReport], config: &HarnessConfig) -> Summary {
    let ok: Vec<&ProblemReport> = problems.iter().filter(|p| p.status == ProblemStatus::Ok).collect();

    let accuracy = config
        .aggregations
        .iter()
        .map(|m| {
            let hits: Vec<f64> = ok
                .iter()
                .filter_map(|p| p.correct.get(m))
                .map(|c| f64::from(u8::from(*c)))
                .collect();
            (*m, MeanSe::of(&hits))
        })
        .collect();

    let with_gold: Vec<&&ProblemReport> = ok.iter().filter(|p| p.gold.is_some()).collect();
    let depth = config.run.t + 1;
    let pop_acc = if with_gold.is_empty() {
        Vec::new()
    } else {
        (0..depth)
            .map(|t| with_gold.iter().map(|p| p.pop_acc[t]).sum::<f64>() / with_gold.len() as f64)
            .collect()
    };
    let flips: Vec<f64> = with_gold.iter().filter_map(|p| p.net_flip).map(|f| f as f64).collect();
    let step_sum = |f: fn(&ProblemReport) -> &Vec<usize>| -> Vec<usize> {
        (0..config.run.t)
            .map(|t| with_gold.iter().map(|p| f(p).get(t).copied().unwrap_or(0)).sum())
            .collect()
    };

    let ess: Vec<f64> = ok.iter().flat_map(|p| p.ess_over_n.iter().copied()).collect();
    let resampled: Vec<bool> = ok.iter().flat_map(|p| p.resampled.iter().copied()).collect();
    let mut dominance = DominanceStats::default();
    let mut acceptance = AcceptanceTally::default();
    for p in &ok {
        dominance.merge(&p.dominance);
        acceptance.merge(&p.acceptance);
    }

    let mut tokens: BTreeMap<Role, TokenTotals> = BTreeMap::new();
    for p in problems {
        for (role, t) in &p.tokens {
            tokens.entry(*role).or_default().merge(t);
        }
    }
    let mut all = TokenTotals::default();
    tokens.values().for_each(|t| all.merge(t));

    Summary {
        problems: problems.len(),
        completed: ok.len(),
        failed: problems.len() - ok.len(),
        accuracy,
        pop_acc,
        net_flip_pooled: flips.iter().sum::<f64>() as i64,
        net_flip_per_problem: MeanSe::of(&flips),
        i2c: step_sum(|p| &p.i2c),
        c2i: step_sum(|p| &p.c2i),
        mean_ess_over_n: (!ess.is_empty()).then(|| ess.iter().sum::<f64>() / ess.len() as f64),
        resampling_rate: (!resampled.is_empty())
            .then(|| resampled.iter().filter(|r| **r).count() as f64 / resampled.len() as f64),
        resampling_events: dominance.events,
        p_dominant_gt_03: dominance.p_gt_03(),
        p_takeover: dominance.p_eq_1(),
        acceptance: acceptance.diagnostics(),
        total_tokens: all.total(),
        mean_tokens_per_problem: (!problems.is_empty()).then(|| all.total() as f64 / problems.len() as f64),
        cost: cost_estimate(&all, &config.pricing).unwrap_or(0.0),
        tokens,
    }
}

pub fn build_report(problems: Vec<ProblemReport>, config: &HarnessConfig) -> RunReport {
    let summary = summarize(&problems, config);
    RunReport {
        schema_version: REPORT_SCHEMA,
        strategy: config.strategy.clone(),
        aggregations: config.aggregations.clone(),
        run: config.run.clone(),
        backend: config.backend.kind,
        pricing: config.pricing,
        problems,
        summary,
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `per_problem.csv` and `per_iteration.csv`.
pub fn write_report(report: &RunReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = serde_json::to_string_pretty(report)?;
    let path = out.join("report.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let mut w = csv::Writer::from_path(out.join("per_problem.csv"))?;
    let mut header: Vec<String> = ["schema_version", "problem_id", "status", "gold"].map(String::from).to_vec();
    for m in &report.aggregations {
        header.push(format!("answer_{}", m.name()));
        header.push(format!("correct_{}", m.name()));
    }
    header.extend(
        ["pop_acc_initial", "pop_acc_final", "net_flip", "total_tokens", "cost"].map(String::from),
    );
    w.write_record(&header)?;
    for p in &report.problems {
        let mut row = vec![
            REPORT_SCHEMA.to_string(),
            p.problem_id.clone(),
            format!("{:?}", p.status).to_lowercase(),
            opt(p.gold.as_ref()),
        ];
        for m in &report.aggregations {
            row.push(opt(p.answers.get(m).cloned().flatten()));
            row.push(opt(p.correct.get(m)));
        }
        row.push(opt(p.pop_acc.first()));
        row.push(opt(p.pop_acc.last()));
        row.push(opt(p.net_flip));
        row.push(p.total_tokens.to_string());
        row.push(p.cost.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&out.join("per_problem.csv"), e))?;

    let mut w = csv::Writer::from_path(out.join("per_iteration.csv"))?;
    w.write_record(["schema_version", "problem_id", "t", "pop_acc", "i2c", "c2i", "ess_over_n", "resampled"])?;
    for p in &report.problems {
        let depth = p.pop_acc.len().max(p.ess_over_n.len() + 1);
        for t in 0..depth {
            let step = t.checked_sub(1);
            w.write_record([
                REPORT_SCHEMA.to_string(),
                p.problem_id.clone(),
                t.to_string(),
                opt(p.pop_acc.get(t)),
                opt(step.and_then(|s| p.i2c.get(s))),
                opt(step.and_then(|s| p.c2i.get(s))),
                opt(step.and_then(|s| p.ess_over_n.get(s))),
                opt(step.and_then(|s| p.resampled.get(s))),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&out.join("per_iteration.csv"), e))?;
    Ok(())
}
