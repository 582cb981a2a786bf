//! The refinement loop: score, arbitrate, reweight, resample with clone
//! capping when the effective sample size collapses, then rejuvenate every
//! particle with a proposal that is kept or discarded by the energy-based
//! acceptance rule.
//!
//! Phases are barriers. Work inside a phase runs in parallel on the current
//! rayon pool; results are collected in particle order and every random draw
//! comes from a stream keyed by `(seed, problem, iteration, particle)`, so a
//! run is reproducible regardless of scheduling.

pub mod accept;
pub mod arbitrate;
pub mod resample;
pub mod weights;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{CallHints, CallPurpose, Caller};
use crate::domain::{Answer, MoveKind, Provenance, Trace, Verdict};
use crate::error::Result;
use crate::rng::stream_rng;
use crate::verify::{self, build_verifier_input, clamp_score, parse_verifier_output, stepwise_normalize, Feedback};

pub use accept::{accept, acceptance_probability};
pub use arbitrate::{
    apply_verdict, arbitration_pair, group_leaders, parse_comparator_verdict, ArbitrationEvent, ComparatorVerdict,
};
pub use resample::{cap_copies, offspring_counts, systematic_resample, systematic_resample_with_offset};
pub use weights::{compute_ess, compute_weights};

/// A trace bound to its latest verifier feedback, score and weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub trace: Trace,
    /// Absent until the trace has been verified.
    pub feedback: Option<Feedback>,
    pub score: f64,
    pub weight: f64,
}

impl Particle {
    pub fn unscored(trace: Trace) -> Self {
        Self {
            trace,
            feedback: None,
            score: 0.0,
            weight: 0.0,
        }
    }

    pub fn answer(&self) -> Option<&Answer> {
        self.trace.answer.as_ref()
    }

    fn set_score(&mut self, feedback: Feedback, score: f64, epsilon: f64, t_smc: f64) {
        self.feedback = Some(feedback);
        self.score = score;
        self.weight = compute_weights(&[clamp_score(score, epsilon)], t_smc)[0];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub problem_id: String,
    /// Number of completed refinement iterations.
    pub iteration: usize,
    pub particles: Vec<Particle>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn answers(&self) -> Vec<Option<Answer>> {
        self.particles.iter().map(|p| p.trace.answer.clone()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.score).collect()
    }
}

/// Per-slot log of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleRecord {
    /// Score from this iteration's verifier pass, before arbitration.
    pub raw_score: f64,
    /// Score after arbitration.
    pub score: f64,
    pub weight: f64,
    pub verdict: Verdict,
    /// Index the slot's occupant was copied from during resampling (its own
    /// index when no resampling happened).
    pub source: usize,
    /// Incumbent score entering rejuvenation.
    pub s_old: f64,
    pub move_kind: MoveKind,
    /// Score of the proposal; absent for no-op proposals.
    pub s_new: Option<f64>,
    pub accepted: bool,
    pub downhill: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub particles: Vec<ParticleRecord>,
    pub ess: f64,
    pub resampled: bool,
    /// Offspring per source before clone capping, when resampling fired.
    pub offspring_counts_pre_cap: Option<Vec<usize>>,
    /// Offspring per source after clone capping, when resampling fired.
    pub offspring_counts: Option<Vec<usize>>,
    pub arbitration_events: Vec<ArbitrationEvent>,
    /// Proposals degraded to no-ops because the iterator call failed.
    pub proposal_transport_failures: usize,
}

/// Samples the initial population with `n` generator calls. A generation
/// that fails or normalizes to nothing becomes an answerless placeholder.
pub fn generate_population(caller: &Caller<'_>, n: usize) -> Population {
    let problem = caller.problem;
    let particles = (0..n)
        .into_par_iter()
        .map(|i| {
            let prompt = caller
                .prompts
                .generate
                .render(&[("problem", problem.statement.as_str())])
                .unwrap_or_else(|_| problem.statement.clone());
            let trace = caller
                .call(CallPurpose::Generate, 0, i, prompt, CallHints::default())
                .ok()
                .and_then(|reply| stepwise_normalize(&reply.text).ok())
                .unwrap_or_else(placeholder_trace);
            Particle::unscored(trace)
        })
        .collect();
    Population {
        problem_id: problem.id.clone(),
        iteration: 0,
        particles,
    }
}

fn placeholder_trace() -> Trace {
    Trace {
        steps: vec!["(generation failed)".to_string()],
        raw_text: verify::tag_steps(&["(generation failed)".to_string()]),
        answer: None,
        provenance: Provenance::init(),
    }
}

/// One verifier pass. Transport failures come back as failed feedback.
pub fn verify_trace(
    caller: &Caller<'_>,
    purpose: CallPurpose,
    iteration: usize,
    index: usize,
    trace: &Trace,
) -> (Feedback, f64) {
    let feedback = build_verifier_input(&caller.prompts.verify, caller.problem, trace)
        .ok()
        .and_then(|prompt| {
            let hints = CallHints {
                current_answer: trace.answer.clone(),
                n_steps: trace.steps.len(),
                ..CallHints::default()
            };
            caller.call(purpose, iteration, index, prompt, hints).ok()
        })
        .map(|reply| parse_verifier_output(&reply.text, trace.steps.len()))
        .unwrap_or_else(Feedback::failed);
    let score = verify::score(&feedback);
    (feedback, score)
}

/// Scores every particle that has no feedback yet.
pub fn score_unscored(population: &mut Population, caller: &Caller<'_>, purpose: CallPurpose) {
    let cfg = caller.config;
    let t = population.iteration;
    population.particles.par_iter_mut().enumerate().for_each(|(i, p)| {
        if p.feedback.is_none() {
            let (fb, s) = verify_trace(caller, purpose, t, i, &p.trace);
            p.set_score(fb, s, cfg.epsilon, cfg.t_smc);
        }
    });
}

/// A rejuvenation proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub trace: Trace,
    pub move_kind: MoveKind,
    pub transport_failed: bool,
}

/// Draws a local refinement with probability `1 - eta`, otherwise an
/// exploration. Output without an answer, or a failed call, yields a no-op.
pub fn propose(
    caller: &Caller<'_>,
    iteration: usize,
    index: usize,
    particle: &Particle,
    eta: f64,
    rng: &mut impl Rng,
) -> Proposal {
    let problem = caller.problem.statement.as_str();
    let explore = rng.gen::<f64>() < eta;
    let (purpose, kind, prompt) = if explore {
        let prompt = caller.prompts.explore.render(&[("problem", problem)]);
        (CallPurpose::Explore, MoveKind::Explore, prompt)
    } else {
        let review = particle
            .feedback
            .as_ref()
            .map(Feedback::render_review)
            .unwrap_or_else(|| Feedback::failed().render_review());
        let trace_text = particle.trace.display_text();
        let prompt = caller.prompts.refine.render(&[
            ("problem", problem),
            ("trace", trace_text.as_str()),
            ("feedback", review.as_str()),
        ]);
        (CallPurpose::LocalRefine, MoveKind::LocalRefine, prompt)
    };
    let no_op = |transport_failed| Proposal {
        trace: particle.trace.clone(),
        move_kind: MoveKind::NoOp,
        transport_failed,
    };
    let Ok(prompt) = prompt else {
        return no_op(false);
    };
    let hints = CallHints {
        current_answer: particle.trace.answer.clone(),
        n_steps: particle.trace.steps.len(),
        ..CallHints::default()
    };
    match caller.call(purpose, iteration, index, prompt, hints) {
        Err(err) => {
            log::warn!("proposal for {}#{index} failed: {err}", caller.problem.id);
            no_op(true)
        }
        Ok(reply) => match stepwise_normalize(&reply.text) {
            Ok(trace) if trace.answer.is_some() => Proposal {
                trace: trace.with_provenance(Provenance {
                    parent: Some(index),
                    iteration,
                    move_kind: kind,
                }),
                move_kind: kind,
                transport_failed: false,
            },
            _ => no_op(false),
        },
    }
}

/// Runs one refinement iteration on `population`.
pub fn run_iteration(population: Population, caller: &Caller<'_>) -> Result<(Population, IterationRecord)> {
    let cfg = caller.config;
    let pid = caller.problem.id.as_str();
    let t = population.iteration + 1;
    let n = population.len();
    let mut particles = population.particles;

    // Score.
    let scored: Vec<(Feedback, f64)> = particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| verify_trace(caller, CallPurpose::Score, t, i, &p.trace))
        .collect();
    let raw_scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let verdicts: Vec<Verdict> = scored.iter().map(|(fb, _)| fb.final_verdict).collect();
    for (p, (fb, s)) in particles.iter_mut().zip(scored) {
        p.feedback = Some(fb);
        p.score = s;
    }

    // Arbitrate.
    let answers: Vec<Option<Answer>> = particles.iter().map(|p| p.trace.answer.clone()).collect();
    let mut scores = raw_scores.clone();
    let mut arbitration_events = Vec::new();
    if let Some((a, b)) = arbitration_pair(&answers, &scores, cfg.theta_hi, cfg.delta_tie) {
        let event = compare(caller, t, &particles[a.index].trace, &particles[b.index].trace, a.answer, b.answer);
        apply_verdict(&answers, &mut scores, &event.answer_a, &event.answer_b, event.verdict, cfg.c);
        arbitration_events.push(event);
    }

    // Reweight.
    let clamped: Vec<f64> = scores.iter().map(|s| clamp_score(*s, cfg.epsilon)).collect();
    let weights = compute_weights(&clamped, cfg.t_smc);
    for ((p, s), w) in particles.iter_mut().zip(&scores).zip(&weights) {
        p.score = *s;
        p.weight = *w;
    }
    let ess = compute_ess(&weights)?;

    // Resample and cap.
    let mut sources: Vec<usize> = (0..n).collect();
    let mut pre_cap = None;
    let mut post_cap = None;
    let resampled = ess < cfg.alpha * n as f64;
    if resampled {
        let mut rng = stream_rng(cfg.seed, pid, t, 0, "resample");
        let ancestors = systematic_resample(&weights, &mut rng);
        pre_cap = Some(offspring_counts(&ancestors, n));
        let capped = cap_copies(&ancestors, &weights, cfg.clone_cap());
        post_cap = Some(offspring_counts(&capped, n));
        particles = capped
            .iter()
            .enumerate()
            .map(|(slot, &src)| {
                let mut p = particles[src].clone();
                if src != slot {
                    p.trace.provenance = Provenance {
                        parent: Some(src),
                        iteration: t,
                        move_kind: MoveKind::Clone,
                    };
                }
                p
            })
            .collect();
        sources = capped;
    }

    // Rejuvenate.
    let moves: Vec<(Proposal, Option<(Feedback, f64)>, bool)> = particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(cfg.seed, pid, t, i, "move");
            let proposal = propose(caller, t, i, p, cfg.eta, &mut rng);
            if proposal.move_kind == MoveKind::NoOp {
                return (proposal, None, false);
            }
            let (fb, s_new) = verify_trace(caller, CallPurpose::ScoreProposal, t, i, &proposal.trace);
            let ok = accept(
                clamp_score(p.score, cfg.epsilon),
                clamp_score(s_new, cfg.epsilon),
                cfg.t_smc,
                &mut rng,
            );
            (proposal, Some((fb, s_new)), ok)
        })
        .collect();

    let mut records = Vec::with_capacity(n);
    let mut proposal_transport_failures = 0;
    for (i, (proposal, scored, accepted)) in moves.into_iter().enumerate() {
        let s_old = particles[i].score;
        let s_new = scored.as_ref().map(|(_, s)| *s);
        let downhill = s_new.is_some_and(|s| clamp_score(s, cfg.epsilon) < clamp_score(s_old, cfg.epsilon));
        proposal_transport_failures += usize::from(proposal.transport_failed);
        records.push(ParticleRecord {
            raw_score: raw_scores[sources[i]],
            score: scores[sources[i]],
            weight: weights[sources[i]],
            verdict: verdicts[sources[i]],
            source: sources[i],
            s_old,
            move_kind: proposal.move_kind,
            s_new,
            accepted,
            downhill,
        });
        if accepted {
            let (fb, s) = scored.expect("accepted proposals are scored");
            let p = &mut particles[i];
            p.trace = proposal.trace;
            p.set_score(fb, s, cfg.epsilon, cfg.t_smc);
        }
    }

    let record = IterationRecord {
        iteration: t,
        particles: records,
        ess,
        resampled,
        offspring_counts_pre_cap: pre_cap,
        offspring_counts: post_cap,
        arbitration_events,
        proposal_transport_failures,
    };
    Ok((
        Population {
            problem_id: pid.to_string(),
            iteration: t,
            particles,
        },
        record,
    ))
}

fn compare(
    caller: &Caller<'_>,
    iteration: usize,
    trace_a: &Trace,
    trace_b: &Trace,
    answer_a: Answer,
    answer_b: Answer,
) -> ArbitrationEvent {
    let (text_a, text_b) = (trace_a.display_text(), trace_b.display_text());
    let prompt = caller.prompts.compare.render(&[
        ("problem", caller.problem.statement.as_str()),
        ("solution_a", text_a.as_str()),
        ("solution_b", text_b.as_str()),
    ]);
    let hints = CallHints {
        other_answers: vec![Some(answer_a.clone()), Some(answer_b.clone())],
        ..CallHints::default()
    };
    let reply = prompt
        .ok()
        .map(|prompt| caller.call(CallPurpose::Compare, iteration, 0, prompt, hints));
    let (verdict, transport_failed) = match reply {
        Some(Ok(reply)) => (parse_comparator_verdict(&reply.text), false),
        _ => (ComparatorVerdict::Neither, true),
    };
    ArbitrationEvent {
        answer_a,
        answer_b,
        verdict,
        transport_failed,
    }
}

/// Runs `caller.config.t` iterations, returning the final population and one
/// record per iteration.
pub fn refine(mut population: Population, caller: &Caller<'_>) -> Result<(Population, Vec<IterationRecord>)> {
    let mut records = Vec::with_capacity(caller.config.t);
    while population.iteration < caller.config.t {
        let (next, record) = run_iteration(population, caller)?;
        population = next;
        records.push(record);
    }
    Ok((population, records))
}
