//! Population-enhancement strategies.
//!
//! Every strategy maps a width-N population to a width-N population per
//! iteration. `Prism` delegates to [`crate::engine`]; the others are
//! behavioural reconstructions of common refinement schemes:
//!
//! * `critic_refine`: every candidate is critiqued and rewritten, and the
//!   rewrite always replaces it.
//! * `agentic_debate`: every candidate is revised after seeing the other
//!   candidates' answers.
//! * `mad_conformist`: candidates that disagree with the majority answer are
//!   revised toward it; the rest are kept verbatim.
//! * `mad_follower`: the lowest-scoring fraction is first replaced by copies
//!   of the majority solution, then the conformist step runs.
//! * `recursive_self_aggregation`: random groups are each synthesized into
//!   one solution and the syntheses are cloned back to full width.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::majority_vote;
use crate::backends::{CallHints, CallPurpose, Caller};
use crate::domain::{Answer, MoveKind, Provenance};
use crate::engine::{self, IterationRecord, Particle, Population};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::verify::stepwise_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    None,
    Prism,
    CriticRefine,
    AgenticDebate,
    MadConformist,
    MadFollower,
    RecursiveSelfAggregation,
}

impl StrategyName {
    pub const ALL: [StrategyName; 7] = [
        StrategyName::None,
        StrategyName::Prism,
        StrategyName::CriticRefine,
        StrategyName::AgenticDebate,
        StrategyName::MadConformist,
        StrategyName::MadFollower,
        StrategyName::RecursiveSelfAggregation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::None => "none",
            StrategyName::Prism => "prism",
            StrategyName::CriticRefine => "critic_refine",
            StrategyName::AgenticDebate => "agentic_debate",
            StrategyName::MadConformist => "mad_conformist",
            StrategyName::MadFollower => "mad_follower",
            StrategyName::RecursiveSelfAggregation => "recursive_self_aggregation",
        }
    }
}

impl std::str::FromStr for StrategyName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyParams {
    pub follower_fraction: f64,
    pub rsa_group_size: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            follower_fraction: 0.5,
            rsa_group_size: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub name: StrategyName,
    #[serde(default)]
    pub params: StrategyParams,
}

impl Strategy {
    pub fn new(name: StrategyName) -> Self {
        Self {
            name,
            params: StrategyParams::default(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let p = &self.params;
        if !(0.0..=1.0).contains(&p.follower_fraction) {
            return Err(Error::Config(format!(
                "follower_fraction must lie in [0, 1], got {}",
                p.follower_fraction
            )));
        }
        if self.name == StrategyName::RecursiveSelfAggregation && !(2..=n.max(2)).contains(&p.rsa_group_size) {
            return Err(Error::Config(format!(
                "rsa_group_size must lie in [2, {n}], got {}",
                p.rsa_group_size
            )));
        }
        if self.name == StrategyName::AgenticDebate && n < 2 {
            return Err(Error::Config("agentic_debate needs a population of at least 2".into()));
        }
        Ok(())
    }

    /// Whether the strategy maintains verifier scores on its particles.
    pub fn scores_particles(&self) -> bool {
        self.name == StrategyName::Prism
    }

    /// Advances the population by one iteration.
    pub fn step(&self, population: Population, caller: &Caller<'_>) -> Result<StepOutcome> {
        let n = population.len();
        let plain = |population: Population| StepOutcome {
            population,
            record: None,
            sources: (0..n).collect(),
        };
        Ok(match self.name {
            StrategyName::Prism => {
                let (population, record) = engine::run_iteration(population, caller)?;
                let sources = record.particles.iter().map(|p| p.source).collect();
                StepOutcome {
                    population,
                    record: Some(record),
                    sources,
                }
            }
            StrategyName::None => plain(enhance_none(population)),
            StrategyName::CriticRefine => plain(enhance_critic_refine(population, caller)),
            StrategyName::AgenticDebate => plain(enhance_debate(population, caller)),
            StrategyName::MadConformist => plain(enhance_mad_conformist(population, caller)),
            StrategyName::MadFollower => {
                let (population, sources) = follower_step(population, caller, self.params.follower_fraction);
                StepOutcome {
                    population,
                    record: None,
                    sources,
                }
            }
            StrategyName::RecursiveSelfAggregation => plain(enhance_rsa(population, caller, self.params.rsa_group_size)),
        })
    }
}

/// Result of one strategy iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub population: Population,
    /// Engine log, for PRISM only.
    pub record: Option<IterationRecord>,
    /// Slot each particle descends from when a strategy copies particles
    /// between slots (resampling, follower replacement); identity otherwise.
    pub sources: Vec<usize>,
}

pub fn enhance_none(mut population: Population) -> Population {
    population.iteration += 1;
    population
}

/// Normalizes a rewrite. Output without an answer, or a failed call, keeps
/// the original trace.
fn rewritten(reply: Option<String>, original: &Particle, parent: usize, iteration: usize) -> Particle {
    match reply.as_deref().map(stepwise_normalize) {
        Some(Ok(trace)) if trace.answer.is_some() => Particle::unscored(trace.with_provenance(Provenance {
            parent: Some(parent),
            iteration,
            move_kind: MoveKind::LocalRefine,
        })),
        _ => original.clone(),
    }
}

fn next(population: &Population, particles: Vec<Particle>) -> Population {
    Population {
        problem_id: population.problem_id.clone(),
        iteration: population.iteration + 1,
        particles,
    }
}

fn hints_for(p: &Particle) -> CallHints {
    CallHints {
        current_answer: p.trace.answer.clone(),
        n_steps: p.trace.steps.len(),
        ..CallHints::default()
    }
}

pub fn enhance_critic_refine(population: Population, caller: &Caller<'_>) -> Population {
    let t = population.iteration + 1;
    let problem = caller.problem.statement.as_str();
    let particles = population
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let trace = p.trace.display_text();
            let critique = caller
                .prompts
                .critique
                .render(&[("problem", problem), ("trace", trace.as_str())])
                .ok()
                .and_then(|prompt| caller.call(CallPurpose::Critique, t, i, prompt, hints_for(p)).ok());
            let Some(critique) = critique else {
                return p.clone();
            };
            let reply = caller
                .prompts
                .rewrite
                .render(&[
                    ("problem", problem),
                    ("trace", trace.as_str()),
                    ("critique", critique.text.as_str()),
                ])
                .ok()
                .and_then(|prompt| caller.call(CallPurpose::Rewrite, t, i, prompt, hints_for(p)).ok())
                .map(|r| r.text);
            rewritten(reply, p, i, t)
        })
        .collect();
    next(&population, particles)
}

pub fn enhance_debate(population: Population, caller: &Caller<'_>) -> Population {
    let t = population.iteration + 1;
    let answers = population.answers();
    let problem = caller.problem.statement.as_str();
    let particles = population
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let peers: Vec<Option<Answer>> = answers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, a)| a.clone())
                .collect();
            let listed = peers
                .iter()
                .map(|a| a.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "(none)".into()))
                .collect::<Vec<_>>()
                .join(", ");
            let trace = p.trace.display_text();
            let hints = CallHints {
                other_answers: peers,
                ..hints_for(p)
            };
            let reply = caller
                .prompts
                .debate
                .render(&[("problem", problem), ("trace", trace.as_str()), ("peer_answers", listed.as_str())])
                .ok()
                .and_then(|prompt| caller.call(CallPurpose::Debate, t, i, prompt, hints).ok())
                .map(|r| r.text);
            rewritten(reply, p, i, t)
        })
        .collect();
    next(&population, particles)
}

/// Rewrites every particle whose answer differs from `target`.
fn conform(population: &Population, caller: &Caller<'_>, target: &Answer) -> Vec<Particle> {
    let t = population.iteration + 1;
    let problem = caller.problem.statement.as_str();
    population
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.answer() == Some(target) {
                return p.clone();
            }
            let trace = p.trace.display_text();
            let hints = CallHints {
                target_answer: Some(target.clone()),
                ..hints_for(p)
            };
            let reply = caller
                .prompts
                .conform
                .render(&[
                    ("problem", problem),
                    ("trace", trace.as_str()),
                    ("majority_answer", target.as_str()),
                ])
                .ok()
                .and_then(|prompt| caller.call(CallPurpose::Conform, t, i, prompt, hints).ok())
                .map(|r| r.text);
            rewritten(reply, p, i, t)
        })
        .collect()
}

pub fn enhance_mad_conformist(population: Population, caller: &Caller<'_>) -> Population {
    let particles = match majority_vote(&population).answer {
        Some(target) => conform(&population, caller, &target),
        None => population.particles.clone(),
    };
    next(&population, particles)
}

/// Slots replaced by the follower step: the `⌊fraction·n⌋` lowest scores,
/// preferring slots that disagree with `target` among equal scores, then
/// lower indices.
pub fn follower_slots(population: &Population, target: &Answer, fraction: f64) -> Vec<usize> {
    let k = (fraction * population.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = &population.particles[a];
        let pb = &population.particles[b];
        pa.score
            .total_cmp(&pb.score)
            .then((pa.answer() == Some(target)).cmp(&(pb.answer() == Some(target))))
            .then(a.cmp(&b))
    });
    order.truncate(k.min(population.len()));
    order.sort_unstable();
    order
}

pub fn enhance_mad_follower(population: Population, caller: &Caller<'_>, fraction: f64) -> Population {
    follower_step(population, caller, fraction).0
}

fn follower_step(population: Population, caller: &Caller<'_>, fraction: f64) -> (Population, Vec<usize>) {
    let mut sources: Vec<usize> = (0..population.len()).collect();
    let Some(target) = majority_vote(&population).answer else {
        return (enhance_none(population), sources);
    };
    let t = population.iteration + 1;
    // The majority solution: best-scoring holder of the target, lowest index.
    let leader = population
        .particles
        .iter()
        .enumerate()
        .filter(|(_, p)| p.answer() == Some(&target))
        .max_by(|(i, a), (j, b)| a.score.total_cmp(&b.score).then(j.cmp(i)))
        .map(|(i, _)| i)
        .expect("majority answer has a holder");
    let mut replaced = population.clone();
    for slot in follower_slots(&population, &target, fraction) {
        if slot == leader {
            continue;
        }
        let mut copy = population.particles[leader].clone();
        copy.trace.provenance = Provenance {
            parent: Some(leader),
            iteration: t,
            move_kind: MoveKind::Clone,
        };
        replaced.particles[slot] = copy;
        sources[slot] = leader;
    }
    let particles = conform(&replaced, caller, &target);
    (next(&population, particles), sources)
}

/// Random partition of `0..n` into groups of `group_size` (the last may be
/// smaller).
pub fn rsa_groups(n: usize, group_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(group_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn enhance_rsa(population: Population, caller: &Caller<'_>, group_size: usize) -> Population {
    let t = population.iteration + 1;
    let n = population.len();
    if n == 0 {
        return enhance_none(population);
    }
    let mut rng = stream_rng(caller.config.seed, &caller.problem.id, t, 0, "rsa-groups");
    let groups = rsa_groups(n, group_size, &mut rng);
    let problem = caller.problem.statement.as_str();
    let aggregates: Vec<Particle> = groups
        .par_iter()
        .enumerate()
        .map(|(g, members)| {
            let candidates = members
                .iter()
                .enumerate()
                .map(|(k, &i)| format!("### Candidate {}\n{}", k + 1, population.particles[i].trace.display_text()))
                .collect::<Vec<_>>()
                .join("\n\n");
            let hints = CallHints {
                other_answers: members.iter().map(|&i| population.particles[i].trace.answer.clone()).collect(),
                ..CallHints::default()
            };
            let reply = caller
                .prompts
                .synthesize
                .render(&[("problem", problem), ("candidates", candidates.as_str())])
                .ok()
                .and_then(|prompt| caller.call(CallPurpose::Synthesize, t, g, prompt, hints).ok())
                .map(|r| r.text);
            let first = members[0];
            rewritten(reply, &population.particles[first], first, t)
        })
        .collect();
    let particles = (0..n).map(|slot| aggregates[slot % aggregates.len()].clone()).collect();
    next(&population, particles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backends, CallLog, ChatCall, ScriptedBackend};
    use crate::domain::{Problem, RunConfig};
    use std::sync::Arc;

    fn pop(answers: &[&str]) -> Population {
        Population {
            problem_id: "p".into(),
            iteration: 0,
            particles: answers
                .iter()
                .map(|a| Particle::unscored(stepwise_normalize(&format!("step\nFINAL ANSWER: {a}")).unwrap()))
                .collect(),
        }
    }

    fn run(
        population: Population,
        strategy: Strategy,
        reply: impl Fn(&ChatCall) -> std::result::Result<String, crate::backends::BackendError> + Send + Sync + 'static,
    ) -> (Population, usize) {
        let problem = Problem::new("p", "question");
        let backends = Backends::uniform(Arc::new(ScriptedBackend::new(reply)));
        let prompts = crate::template::PromptSet::default();
        let config = RunConfig::default();
        let log = CallLog::default();
        let caller = Caller {
            problem: &problem,
            backends: &backends,
            prompts: &prompts,
            config: &config,
            log: &log,
        };
        let out = strategy.step(population, &caller).unwrap();
        assert_eq!(out.sources.len(), out.population.len());
        (out.population, log.len())
    }

    fn answers(p: &Population) -> Vec<String> {
        p.answers().iter().map(|a| a.as_ref().map(|a| a.to_string()).unwrap_or_default()).collect()
    }

    #[test]
    fn none_is_identity() {
        let p = pop(&["1", "2"]);
        let (out, calls) = run(p.clone(), Strategy::new(StrategyName::None), |_| Ok(String::new()));
        assert_eq!(out.particles, p.particles);
        assert_eq!((out.iteration, calls), (1, 0));
    }

    #[test]
    fn critic_refine_replaces_unconditionally() {
        let (out, calls) = run(pop(&["1", "2", "3"]), Strategy::new(StrategyName::CriticRefine), |call| {
            Ok(match call.meta.purpose {
                CallPurpose::Critique => "step 1 is wrong".into(),
                _ => "<step>fixed</step>\nFINAL ANSWER: 42".into(),
            })
        });
        assert_eq!(answers(&out), ["42", "42", "42"]);
        assert_eq!(calls, 6);
    }

    #[test]
    fn critic_refine_noop_and_failure_keep_particles() {
        let p = pop(&["1", "2"]);
        let (out, _) = run(p.clone(), Strategy::new(StrategyName::CriticRefine), |_| Ok("no answer".into()));
        assert_eq!(out.particles, p.particles);
        let (out, _) = run(p.clone(), Strategy::new(StrategyName::CriticRefine), |_| {
            Err(crate::backends::BackendError::fatal("down"))
        });
        assert_eq!(out.particles, p.particles);
    }

    #[test]
    fn debate_sees_peer_answers() {
        let (out, calls) = run(pop(&["1", "2", "2"]), Strategy::new(StrategyName::AgenticDebate), |call| {
            assert_eq!(call.hints.other_answers.len(), 2);
            let peers: Vec<String> = call.hints.other_answers.iter().flatten().map(|a| a.to_string()).collect();
            let answer = if peers.iter().all(|a| a == "2") { "2" } else { "1" };
            Ok(format!("<step>x</step>\nFINAL ANSWER: {answer}"))
        });
        assert_eq!(calls, 3);
        assert_eq!(answers(&out), ["2", "1", "1"]);
    }

    #[test]
    fn conformist_rewrites_only_dissenters() {
        let (out, calls) = run(pop(&["3", "3", "3", "7", "7"]), Strategy::new(StrategyName::MadConformist), |call| {
            assert_eq!(call.hints.target_answer.as_ref().unwrap().as_str(), "3");
            assert!(call.meta.particle_index >= 3);
            Ok("<step>x</step>\nFINAL ANSWER: 3".into())
        });
        assert_eq!(calls, 2);
        assert_eq!(answers(&out), ["3"; 5]);

        let unanimous = pop(&["4", "4"]);
        let (out, calls) = run(unanimous.clone(), Strategy::new(StrategyName::MadConformist), |_| Ok(String::new()));
        assert_eq!((out.particles, calls), (unanimous.particles, 0));
    }

    #[test]
    fn conformist_tie_goes_to_score_then_index() {
        let mut p = pop(&["5", "9"]);
        p.particles[1].score = 0.7;
        let (_, _) = run(p, Strategy::new(StrategyName::MadConformist), |call| {
            assert_eq!(call.hints.target_answer.as_ref().unwrap().as_str(), "9");
            Ok("x".into())
        });
        let (_, _) = run(pop(&["5", "9"]), Strategy::new(StrategyName::MadConformist), |call| {
            assert_eq!(call.hints.target_answer.as_ref().unwrap().as_str(), "5");
            Ok("x".into())
        });
    }

    #[test]
    fn follower_replacement_counts() {
        let p = pop(&["1", "1", "1", "1", "2", "3", "4", "5", "6", "7"]);
        let target = Answer::new("1");
        assert_eq!(follower_slots(&p, &target, 0.5), [4, 5, 6, 7, 8]);
        assert!(follower_slots(&p, &target, 0.0).is_empty());
        assert_eq!(follower_slots(&p, &target, 1.0).len(), 10);

        // fraction 0.5 replaces the five dissenters, leaving nothing to conform.
        let strategy = Strategy {
            name: StrategyName::MadFollower,
            params: StrategyParams::default(),
        };
        let (out, calls) = run(p.clone(), strategy, |_| Ok("<step>x</step>\nFINAL ANSWER: 9".into()));
        assert_eq!(calls, 1);
        assert_eq!(answers(&out)[..9], ["1"; 9]);
        assert_eq!(answers(&out)[9], "9");

        // fraction 0 is the conformist step.
        let strategy = Strategy {
            name: StrategyName::MadFollower,
            params: StrategyParams { follower_fraction: 0.0, ..StrategyParams::default() },
        };
        let (_, calls) = run(p, strategy, |_| Ok("x".into()));
        assert_eq!(calls, 6);
    }

    #[test]
    fn rsa_refill() {
        let mut rng = stream_rng(1, "g", 0, 0, "x");
        let groups = rsa_groups(10, 2, &mut rng);
        assert_eq!(groups.len(), 5);
        assert!(groups.iter().all(|g| g.len() == 2));
        assert_eq!(rsa_groups(10, 3, &mut rng).len(), 4);

        let strategy = |g| Strategy {
            name: StrategyName::RecursiveSelfAggregation,
            params: StrategyParams { rsa_group_size: g, ..StrategyParams::default() },
        };
        let p = pop(&["1", "2", "3", "4", "5", "6", "7", "8", "9", "10"]);
        let (out, calls) = run(p.clone(), strategy(10), |_| Ok("<step>s</step>\nFINAL ANSWER: 77".into()));
        assert_eq!(calls, 1);
        assert_eq!(answers(&out), ["77"; 10]);

        let (out, calls) = run(p, strategy(2), |call| {
            Ok(format!("<step>s</step>\nFINAL ANSWER: {}", 100 + call.meta.particle_index))
        });
        assert_eq!(calls, 5);
        let a = answers(&out);
        for g in 0..5 {
            assert_eq!(a.iter().filter(|x| **x == (100 + g).to_string()).count(), 2);
        }
    }

    #[test]
    fn validation() {
        let mut s = Strategy::new(StrategyName::RecursiveSelfAggregation);
        s.params.rsa_group_size = 1;
        assert!(s.validate(10).is_err());
        s.params.rsa_group_size = 11;
        assert!(s.validate(10).is_err());
        s.params.rsa_group_size = 10;
        s.validate(10).unwrap();
        assert!(Strategy::new(StrategyName::AgenticDebate).validate(1).is_err());
        assert_eq!("mad_follower".parse::<StrategyName>().unwrap(), StrategyName::MadFollower);
    }
}
