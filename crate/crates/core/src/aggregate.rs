//! Turning a final population into one answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{CallHints, CallPurpose, Caller};
use crate::domain::{extract_answer, Answer};
use crate::engine::Population;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Majority,
    PrmScore,
    Llm,
}

impl AggregationMethod {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMethod::Majority => "majority",
            AggregationMethod::PrmScore => "prm_score",
            AggregationMethod::Llm => "llm",
        }
    }
}

impl std::str::FromStr for AggregationMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "majority" => Ok(AggregationMethod::Majority),
            "prm_score" | "prm" => Ok(AggregationMethod::PrmScore),
            "llm" => Ok(AggregationMethod::Llm),
            other => Err(format!("unknown aggregation method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub answer: Option<Answer>,
    pub method: AggregationMethod,
    /// Count (majority, llm) or summed score (prm_score) per answer.
    pub support: BTreeMap<Answer, f64>,
    pub aggregator_tokens: u64,
    /// The model-based aggregator produced no answer and majority vote was
    /// used instead.
    #[serde(default)]
    pub fell_back: bool,
}

struct Tally {
    answer: Answer,
    count: usize,
    score: f64,
    first: usize,
}

fn tally(population: &Population) -> Vec<Tally> {
    let mut tallies: Vec<Tally> = Vec::new();
    for (i, p) in population.particles.iter().enumerate() {
        let Some(answer) = p.answer() else { continue };
        match tallies.iter_mut().find(|t| &t.answer == answer) {
            Some(t) => {
                t.count += 1;
                t.score += p.score;
            }
            None => tallies.push(Tally {
                answer: answer.clone(),
                count: 1,
                score: p.score,
                first: i,
            }),
        }
    }
    tallies
}

/// Most frequent answer; ties go to the larger summed score, then to the
/// answer seen first.
pub fn majority_vote(population: &Population) -> AggregateResult {
    let tallies = tally(population);
    let best = tallies.iter().max_by(|a, b| {
        a.count
            .cmp(&b.count)
            .then(a.score.total_cmp(&b.score))
            .then(b.first.cmp(&a.first))
    });
    AggregateResult {
        answer: best.map(|t| t.answer.clone()),
        method: AggregationMethod::Majority,
        support: tallies.iter().map(|t| (t.answer.clone(), t.count as f64)).collect(),
        aggregator_tokens: 0,
        fell_back: false,
    }
}

/// Answer with the largest summed score; ties go to the larger count, then
/// to the answer seen first.
pub fn prm_score_vote(population: &Population) -> AggregateResult {
    let tallies = tally(population);
    let best = tallies.iter().max_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.count.cmp(&b.count))
            .then(b.first.cmp(&a.first))
    });
    AggregateResult {
        answer: best.map(|t| t.answer.clone()),
        method: AggregationMethod::PrmScore,
        support: tallies.iter().map(|t| (t.answer.clone(), t.score)).collect(),
        aggregator_tokens: 0,
        fell_back: false,
    }
}

/// Asks the generator model to read all candidates and pick an answer. Falls
/// back to majority vote when the reply has no answer line or the call fails.
pub fn llm_aggregate(population: &Population, caller: &Caller<'_>) -> AggregateResult {
    if population.is_empty() {
        return AggregateResult {
            answer: None,
            method: AggregationMethod::Llm,
            support: BTreeMap::new(),
            aggregator_tokens: 0,
            fell_back: false,
        };
    }
    let candidates = population
        .particles
        .iter()
        .enumerate()
        .map(|(i, p)| format!("### Candidate {}\n{}", i + 1, p.trace.display_text()))
        .collect::<Vec<_>>()
        .join("\n\n");
    let hints = CallHints {
        other_answers: population.answers(),
        ..CallHints::default()
    };
    let reply = caller
        .prompts
        .aggregate
        .render(&[("problem", caller.problem.statement.as_str()), ("candidates", candidates.as_str())])
        .ok()
        .and_then(|prompt| {
            caller
                .call(CallPurpose::Aggregate, population.iteration, 0, prompt, hints)
                .ok()
        });
    let tokens = reply.as_ref().map(|r| r.usage.total()).unwrap_or(0);
    let picked = reply.as_ref().and_then(|r| extract_answer(&r.text));
    let fallback = majority_vote(population);
    match picked {
        Some(answer) => AggregateResult {
            answer: Some(answer),
            method: AggregationMethod::Llm,
            support: fallback.support,
            aggregator_tokens: tokens,
            fell_back: false,
        },
        None => AggregateResult {
            method: AggregationMethod::Llm,
            aggregator_tokens: tokens,
            fell_back: true,
            ..fallback
        },
    }
}
