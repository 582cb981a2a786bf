//! Deterministic model simulator.
//!
//! A [`ScriptedWorld`] fixes each problem's true answer and the
//! probabilities governing how generation, revision and verification behave.
//! Every reply is a pure function of the world and the call metadata, so
//! identical calls always produce identical replies.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, CallPurpose, ChatBackend, ChatCall, ChatReply, Usage};
use crate::domain::{Answer, Problem, StepLabel, ANSWER_MARKER};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, stream_seed};
use crate::verify::FINAL_CHECK_MARKER;

/// Synthetic output-token costs per call kind. Input tokens are estimated
/// from the prompt length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenCosts {
    pub solution: u64,
    pub verify_per_line: u64,
    pub critique: u64,
    pub compare: u64,
    pub aggregate: u64,
}

impl Default for TokenCosts {
    fn default() -> Self {
        Self {
            solution: 600,
            verify_per_line: 24,
            critique: 200,
            compare: 120,
            aggregate: 160,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptedWorld {
    /// Seed for all simulated randomness; the run seed is used when absent.
    pub seed: Option<u64>,
    /// True answer per problem id. Gold answers from the dataset fill gaps,
    /// and a hash-derived integer is used as a last resort.
    pub true_answers: BTreeMap<String, String>,
    /// Probability that a freshly generated trace is correct.
    pub p_init_correct: f64,
    /// Local refinement: probability that an incorrect trace becomes correct.
    pub p_fix: f64,
    /// Local refinement: probability that a correct trace becomes incorrect.
    pub p_break: f64,
    /// Probability that each step label is replaced by a different label.
    pub rho: f64,
    /// Probability that a final verdict (or comparator verdict) is replaced
    /// by a different one.
    pub verdict_noise: f64,
    /// Probability that a steered rewrite adopts the suggested answer.
    pub p_adopt: f64,
    /// Number of distinct wrong answers per problem.
    pub n_distractors: usize,
    /// Probability that a generator or iterator reply lacks an answer line.
    pub p_malformed: f64,
    /// Probability that a verifier reply violates the output schema.
    pub p_verifier_malformed: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub tokens: TokenCosts,
}

impl Default for ScriptedWorld {
    fn default() -> Self {
        Self {
            seed: None,
            true_answers: BTreeMap::new(),
            p_init_correct: 0.5,
            p_fix: 0.3,
            p_break: 0.1,
            rho: 0.1,
            verdict_noise: 0.0,
            p_adopt: 0.5,
            n_distractors: 3,
            p_malformed: 0.0,
            p_verifier_malformed: 0.0,
            min_steps: 3,
            max_steps: 5,
            tokens: TokenCosts::default(),
        }
    }
}

impl ScriptedWorld {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: Self = serde_json::from_str(&text)?;
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_init_correct", self.p_init_correct),
            ("p_fix", self.p_fix),
            ("p_break", self.p_break),
            ("rho", self.rho),
            ("verdict_noise", self.verdict_noise),
            ("p_adopt", self.p_adopt),
            ("p_malformed", self.p_malformed),
            ("p_verifier_malformed", self.p_verifier_malformed),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("world.{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_distractors == 0 {
            return Err(Error::Config("world.n_distractors must be at least 1".into()));
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return Err(Error::Config("world step range must satisfy 1 <= min_steps <= max_steps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterateMode {
    LocalRefine,
    Explore,
}

/// Correctness after one revision: local refinement fixes with `p_fix` and
/// breaks with `p_break`; exploration redraws with `p_init_correct`.
pub fn simulate_iterate(world: &ScriptedWorld, correct: bool, mode: IterateMode, rng: &mut impl Rng) -> bool {
    match mode {
        IterateMode::LocalRefine if correct => !rng.gen_bool(world.p_break),
        IterateMode::LocalRefine => rng.gen_bool(world.p_fix),
        IterateMode::Explore => rng.gen_bool(world.p_init_correct),
    }
}

pub struct Simulator {
    world: ScriptedWorld,
    seed: u64,
}

impl Simulator {
    pub fn new(world: ScriptedWorld, fallback_seed: u64) -> Self {
        let seed = world.seed.unwrap_or(fallback_seed);
        Self { world, seed }
    }

    /// Fills missing true answers from the problems' gold answers.
    pub fn with_problems(mut self, problems: &[Problem]) -> Self {
        for p in problems {
            if let Some(gold) = &p.gold_answer {
                self.world.true_answers.entry(p.id.clone()).or_insert_with(|| gold.clone());
            }
        }
        self
    }

    pub fn world(&self) -> &ScriptedWorld {
        &self.world
    }

    pub fn true_answer(&self, problem_id: &str) -> Answer {
        match self.world.true_answers.get(problem_id) {
            Some(a) => Answer::new(a),
            None => Answer::new(&(stream_seed(self.seed, problem_id, 0, 0, "truth") % 1000).to_string()),
        }
    }

    /// The `k`-th wrong answer of a problem.
    pub fn distractor(&self, problem_id: &str, k: usize) -> Answer {
        let truth = self.true_answer(problem_id);
        match truth.as_str().parse::<i64>() {
            Ok(n) => Answer::new(&(n + 7 * (k as i64 + 1)).to_string()),
            Err(_) => Answer::new(&format!("{} alt {}", truth, k + 1)),
        }
    }

    fn wrong_answer(&self, problem_id: &str, rng: &mut impl Rng) -> Answer {
        let k = rng.gen_range(0..self.world.n_distractors);
        self.distractor(problem_id, k)
    }

    fn solution_text(&self, call: &ChatCall, answer: &Answer, rng: &mut impl Rng) -> String {
        let n = rng.gen_range(self.world.min_steps..=self.world.max_steps);
        let mut text = String::new();
        for k in 1..=n {
            text.push_str(&format!(
                "<step>Derivation step {k} for problem {} ({:?}).</step>\n",
                call.meta.problem_id, call.meta.purpose
            ));
        }
        if !rng.gen_bool(self.world.p_malformed) {
            text.push_str(&format!("{ANSWER_MARKER} {answer}\n"));
        }
        text
    }

    /// Answer after a revision of a trace whose answer is `current`.
    fn revise(&self, problem_id: &str, current: Option<&Answer>, mode: IterateMode, rng: &mut impl Rng) -> Answer {
        let truth = self.true_answer(problem_id);
        let was_correct = current == Some(&truth);
        let now_correct = simulate_iterate(&self.world, was_correct, mode, rng);
        match (now_correct, current) {
            (true, _) => truth,
            // An unchanged wrong trace keeps its wrong answer under local edits.
            (false, Some(a)) if !was_correct && mode == IterateMode::LocalRefine => a.clone(),
            (false, _) => self.wrong_answer(problem_id, rng),
        }
    }

    fn steered(&self, call: &ChatCall, target: Option<Answer>, rng: &mut impl Rng) -> Answer {
        let adopt = rng.gen_bool(self.world.p_adopt);
        match target {
            Some(t) if adopt => t,
            _ => self.revise(&call.meta.problem_id, call.hints.current_answer.as_ref(), IterateMode::LocalRefine, rng),
        }
    }

    fn noisy_label(&self, label: StepLabel, rng: &mut impl Rng) -> StepLabel {
        if !rng.gen_bool(self.world.rho) {
            return label;
        }
        let others: Vec<StepLabel> = [StepLabel::Correct, StepLabel::Neutral, StepLabel::Incorrect]
            .into_iter()
            .filter(|l| *l != label)
            .collect();
        others[rng.gen_range(0..others.len())]
    }

    fn verify_text(&self, call: &ChatCall, rng: &mut impl Rng) -> String {
        let n = call.hints.n_steps.max(1);
        if rng.gen_bool(self.world.p_verifier_malformed) {
            return "I think the solution looks mostly fine overall.\n".to_string();
        }
        let correct = call.hints.current_answer.as_ref() == Some(&self.true_answer(&call.meta.problem_id));
        let base = if correct { StepLabel::Correct } else { StepLabel::Incorrect };
        let mut text = String::new();
        for k in 1..=n {
            let label = self.noisy_label(base, rng);
            text.push_str(&format!("Step {k}: checked {}\n", label.token()));
        }
        let verdict = self.noisy_verdict(base, rng);
        text.push_str(&format!("{FINAL_CHECK_MARKER}: {}\n", verdict.token()));
        text
    }

    fn noisy_verdict(&self, verdict: StepLabel, rng: &mut impl Rng) -> StepLabel {
        if !rng.gen_bool(self.world.verdict_noise) {
            return verdict;
        }
        let others: Vec<StepLabel> = [StepLabel::Correct, StepLabel::Neutral, StepLabel::Incorrect]
            .into_iter()
            .filter(|l| *l != verdict)
            .collect();
        others[rng.gen_range(0..others.len())]
    }

    fn compare_text(&self, call: &ChatCall, rng: &mut impl Rng) -> String {
        let truth = self.true_answer(&call.meta.problem_id);
        let is_true = |k: usize| call.hints.other_answers.get(k).and_then(|a| a.as_ref()) == Some(&truth);
        let options = ["A", "B", "NEITHER"];
        let mut pick = if is_true(0) {
            0
        } else if is_true(1) {
            1
        } else {
            2
        };
        if rng.gen_bool(self.world.verdict_noise) {
            pick = (pick + rng.gen_range(1..3)) % 3;
        }
        format!("After comparing both solutions: <verdict>{}</verdict>\n", options[pick])
    }
}

/// Most frequent answer, ties going to the earliest.
fn plurality(answers: &[Option<Answer>]) -> Option<Answer> {
    let mut counts: Vec<(Answer, usize)> = Vec::new();
    for a in answers.iter().flatten() {
        match counts.iter_mut().find(|(b, _)| b == a) {
            Some((_, c)) => *c += 1,
            None => counts.push((a.clone(), 1)),
        }
    }
    let best = counts.iter().map(|(_, c)| *c).max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(a, _)| a)
}

impl ChatBackend for Simulator {
    fn call(&self, call: &ChatCall) -> Result<ChatReply, BackendError> {
        let meta = &call.meta;
        let label = format!("sim-{:?}", meta.purpose);
        let mut rng = stream_rng(self.seed, &meta.problem_id, meta.iteration, meta.particle_index, &label);
        let costs = &self.world.tokens;
        let pid = meta.problem_id.as_str();
        let current = call.hints.current_answer.as_ref();
        let (text, output_tokens) = match meta.purpose {
            CallPurpose::Generate => {
                let answer = if rng.gen_bool(self.world.p_init_correct) {
                    self.true_answer(pid)
                } else {
                    self.wrong_answer(pid, &mut rng)
                };
                (self.solution_text(call, &answer, &mut rng), costs.solution)
            }
            CallPurpose::LocalRefine | CallPurpose::Rewrite => {
                let answer = self.revise(pid, current, IterateMode::LocalRefine, &mut rng);
                (self.solution_text(call, &answer, &mut rng), costs.solution)
            }
            CallPurpose::Explore => {
                let answer = self.revise(pid, current, IterateMode::Explore, &mut rng);
                (self.solution_text(call, &answer, &mut rng), costs.solution)
            }
            CallPurpose::Conform => {
                let answer = self.steered(call, call.hints.target_answer.clone(), &mut rng);
                (self.solution_text(call, &answer, &mut rng), costs.solution)
            }
            CallPurpose::Debate => {
                let answer = self.steered(call, plurality(&call.hints.other_answers), &mut rng);
                (self.solution_text(call, &answer, &mut rng), costs.solution)
            }
            CallPurpose::Synthesize => {
                let base = plurality(&call.hints.other_answers);
                let answer = self.revise(pid, base.as_ref(), IterateMode::LocalRefine, &mut rng);
                (self.solution_text(call, &answer, &mut rng), costs.solution)
            }
            CallPurpose::Critique => (
                "The second step asserts a result without justification; re-derive it.\n".to_string(),
                costs.critique,
            ),
            CallPurpose::Score | CallPurpose::ScoreProposal | CallPurpose::ScoreFinal => {
                let lines = call.hints.n_steps.max(1) as u64 + 1;
                (self.verify_text(call, &mut rng), costs.verify_per_line * lines)
            }
            CallPurpose::Compare => (self.compare_text(call, &mut rng), costs.compare),
            CallPurpose::Aggregate => {
                let text = match plurality(&call.hints.other_answers) {
                    Some(a) if !rng.gen_bool(self.world.p_malformed) => {
                        format!("Most candidates agree.\n{ANSWER_MARKER} {a}\n")
                    }
                    _ => "The candidates disagree and I cannot decide.\n".to_string(),
                };
                (text, costs.aggregate)
            }
        };
        let usage = Usage {
            input_tokens: (call.prompt.chars().count() as u64).div_ceil(4),
            output_tokens,
            estimated: false,
        };
        Ok(ChatReply {
            text,
            usage,
            latency_ms: 0,
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CallHints, CallMeta, Role};
    use crate::domain::{extract_answer, Decoding};
    use crate::verify::{parse_verifier_output, stepwise_normalize};
    use crate::domain::Verdict;

    fn call(purpose: CallPurpose, index: usize, hints: CallHints) -> ChatCall {
        ChatCall {
            role: purpose.role(),
            prompt: "prompt".into(),
            decoding: Decoding::STOCHASTIC,
            meta: CallMeta {
                problem_id: "p1".into(),
                iteration: 0,
                particle_index: index,
                purpose,
            },
            hints,
        }
    }

    fn world() -> ScriptedWorld {
        let mut w = ScriptedWorld::default();
        w.true_answers.insert("p1".into(), "42".into());
        w
    }

    #[test]
    fn certain_generator_is_correct() {
        let sim = Simulator::new(ScriptedWorld { p_init_correct: 1.0, ..world() }, 7);
        for i in 0..20 {
            let reply = sim.call(&call(CallPurpose::Generate, i, CallHints::default())).unwrap();
            let trace = stepwise_normalize(&reply.text).unwrap();
            assert_eq!(trace.answer, Some(Answer::new("42")));
        }
    }

    #[test]
    fn noiseless_verifier_on_correct_trace() {
        let sim = Simulator::new(ScriptedWorld { rho: 0.0, ..world() }, 7);
        let hints = CallHints {
            current_answer: Some(Answer::new("42")),
            n_steps: 4,
            ..CallHints::default()
        };
        let reply = sim.call(&call(CallPurpose::Score, 0, hints)).unwrap();
        let fb = parse_verifier_output(&reply.text, 4);
        assert_eq!(fb.step_labels, vec![StepLabel::Correct; 4]);
        assert_eq!(fb.final_verdict, Verdict::Correct);
        assert_eq!(call(CallPurpose::Score, 0, CallHints::default()).role, Role::Verifier);
    }

    #[test]
    fn replies_are_pure_functions_of_metadata() {
        let sim = Simulator::new(world(), 3);
        let c = call(CallPurpose::Generate, 5, CallHints::default());
        assert_eq!(sim.call(&c).unwrap(), sim.call(&c).unwrap());
    }

    #[test]
    fn iterate_boundaries() {
        let mut rng = stream_rng(0, "x", 0, 0, "t");
        let w = ScriptedWorld { p_fix: 1.0, p_break: 0.0, ..world() };
        assert!(simulate_iterate(&w, false, IterateMode::LocalRefine, &mut rng));
        assert!(simulate_iterate(&w, true, IterateMode::LocalRefine, &mut rng));
    }

    #[test]
    fn iterate_flip_rates_match() {
        let w = ScriptedWorld { p_fix: 0.3, p_break: 0.3, ..world() };
        let trials = 10_000;
        let mut rng = stream_rng(11, "flip", 0, 0, "t");
        let fixes = (0..trials)
            .filter(|_| simulate_iterate(&w, false, IterateMode::LocalRefine, &mut rng))
            .count();
        let breaks = (0..trials)
            .filter(|_| !simulate_iterate(&w, true, IterateMode::LocalRefine, &mut rng))
            .count();
        let se = (0.3f64 * 0.7 / trials as f64).sqrt();
        for rate in [fixes as f64 / trials as f64, breaks as f64 / trials as f64] {
            assert!((rate - 0.3).abs() <= 3.0 * se, "rate {rate}");
        }
    }

    #[test]
    fn comparator_prefers_true_answer() {
        let sim = Simulator::new(world(), 1);
        let hints = CallHints {
            other_answers: vec![Some(Answer::new("5")), Some(Answer::new("42"))],
            ..CallHints::default()
        };
        let reply = sim.call(&call(CallPurpose::Compare, 0, hints)).unwrap();
        assert!(reply.text.contains("<verdict>B</verdict>"));
    }

    #[test]
    fn aggregator_reports_plurality() {
        let sim = Simulator::new(world(), 1);
        let hints = CallHints {
            other_answers: vec![Some(Answer::new("5")), Some(Answer::new("9")), Some(Answer::new("9"))],
            ..CallHints::default()
        };
        let reply = sim.call(&call(CallPurpose::Aggregate, 0, hints)).unwrap();
        assert_eq!(extract_answer(&reply.text), Some(Answer::new("9")));
    }

    #[test]
    fn distractors_differ_from_truth() {
        let sim = Simulator::new(world(), 1);
        for k in 0..5 {
            assert_ne!(sim.distractor("p1", k), sim.true_answer("p1"));
        }
        assert_eq!(sim.distractor("p1", 0), Answer::new("49"));
    }

    #[test]
    fn world_validation() {
        assert!(ScriptedWorld { rho: 1.5, ..world() }.validate().is_err());
        assert!(ScriptedWorld { min_steps: 4, max_steps: 2, ..world() }.validate().is_err());
        world().validate().unwrap();
    }
}
