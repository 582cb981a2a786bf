//! Shared domain types: problems, traces, answers, enumerations and the
//! refinement hyperparameters.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker that introduces the final answer line of a trace.
pub const ANSWER_MARKER: &str = "FINAL ANSWER:";

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl Problem {
    pub fn new(id: impl Into<String>, statement: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            statement: statement.into(),
            gold_answer: None,
            domain_tag: None,
        }
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    /// The gold answer in canonical form.
    pub fn gold(&self) -> Option<Answer> {
        self.gold_answer.as_deref().map(Answer::new)
    }
}

/// Reads a JSON Lines dataset. Blank lines are skipped; ids must be unique and
/// statements non-empty.
pub fn load_dataset(path: &Path) -> Result<Vec<Problem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut problems = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if problem.statement.trim().is_empty() {
            return Err(Error::Dataset {
                line: lineno + 1,
                message: format!("problem {:?} has an empty statement", problem.id),
            });
        }
        if !seen.insert(problem.id.clone()) {
            return Err(Error::Dataset {
                line: lineno + 1,
                message: format!("duplicate problem id {:?}", problem.id),
            });
        }
        problems.push(problem);
    }
    Ok(problems)
}

/// A canonicalized final answer.
///
/// Canonical form: lowercased, surrounding whitespace trimmed, internal whitespace runs
/// collapsed to one space, and then exactly one of
/// * a lone letter (optionally followed by `.`, `)` or `:`) becomes that
///   letter in uppercase, for multiple-choice answers;
/// * a plain decimal number loses its `+` sign, leading zeros and trailing
///   fractional zeros (`-0` becomes `0`);
/// * anything else stays lowercased.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answer(String);

impl Answer {
    pub fn new(raw: &str) -> Self {
        Answer(normalize_answer(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn normalize_answer(raw: &str) -> String {
    let folded = raw.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Some(letter) = choice_letter(&collapsed) {
        return letter.to_ascii_uppercase().to_string();
    }
    canonical_decimal(&collapsed).unwrap_or(collapsed)
}

fn choice_letter(s: &str) -> Option<char> {
    let mut chars = s.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    match (chars.next(), chars.next()) {
        (None, _) => Some(first),
        (Some('.' | ')' | ':'), None) => Some(first),
        _ => None,
    }
}

fn canonical_decimal(s: &str) -> Option<String> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let int_part = int_part.trim_start_matches('0');
    let frac_part = frac_part.trim_end_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let mut out = String::new();
    if negative && !(int_part == "0" && frac_part.is_empty()) {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    Some(out)
}

/// Returns the normalized content of the last line that starts with
/// `FINAL ANSWER:` (case-insensitive, leading whitespace allowed).
/// An empty answer after the marker counts as no answer.
pub fn extract_answer(raw_text: &str) -> Option<Answer> {
    let marker_len = ANSWER_MARKER.len();
    raw_text
        .lines()
        .rev()
        .map(str::trim_start)
        .find(|line| {
            line.len() >= marker_len
                && line.is_char_boundary(marker_len)
                && line[..marker_len].eq_ignore_ascii_case(ANSWER_MARKER)
        })
        .map(|line| Answer::new(&line[marker_len..]))
        .filter(|a| !a.as_str().is_empty())
}

pub fn answers_equal(a: &Answer, b: &Answer) -> bool {
    a == b
}

/// How a trace came to occupy its slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Init,
    Clone,
    LocalRefine,
    Explore,
    NoOp,
}

/// Final verdict of a verifier pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Correct,
    Incorrect,
    Neutral,
    Missing,
    VerificationFailed,
}

impl Verdict {
    pub const ALL: [Verdict; 5] = [
        Verdict::Correct,
        Verdict::Incorrect,
        Verdict::Neutral,
        Verdict::Missing,
        Verdict::VerificationFailed,
    ];
}

/// Per-step verifier label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabel {
    Correct,
    Neutral,
    Incorrect,
}

impl StepLabel {
    pub fn token(self) -> &'static str {
        match self {
            StepLabel::Correct => "+1",
            StepLabel::Neutral => "0",
            StepLabel::Incorrect => "-1",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "+1" => Some(StepLabel::Correct),
            "0" => Some(StepLabel::Neutral),
            "-1" => Some(StepLabel::Incorrect),
            _ => None,
        }
    }
}

/// Where a trace came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Slot index in the previous iteration's population, `None` for
    /// freshly generated traces.
    pub parent: Option<usize>,
    pub iteration: usize,
    pub move_kind: MoveKind,
}

impl Provenance {
    pub fn init() -> Self {
        Self {
            parent: None,
            iteration: 0,
            move_kind: MoveKind::Init,
        }
    }
}

/// One candidate reasoning trajectory in stepwise form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<String>,
    /// The steps re-serialized as `<step i="k">…</step>` blocks.
    pub raw_text: String,
    pub answer: Option<Answer>,
    pub provenance: Provenance,
}

impl Trace {
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Tagged steps followed by the answer line, the form fed back to models.
    pub fn display_text(&self) -> String {
        match &self.answer {
            Some(a) => format!("{}\n{} {}", self.raw_text, ANSWER_MARKER, a),
            None => self.raw_text.clone(),
        }
    }
}

/// Sampling parameters for one model role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Decoding {
    pub const STOCHASTIC: Decoding = Decoding {
        temperature: 0.8,
        top_p: 0.9,
        max_tokens: None,
    };
    pub const GREEDY: Decoding = Decoding {
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: None,
    };
}

/// Decoding per role. Verifier and comparator calls are always issued greedily
/// regardless of what is configured here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleDecoding {
    pub generator: Decoding,
    pub iterator: Decoding,
    pub verifier: Decoding,
    pub comparator: Decoding,
}

impl Default for RoleDecoding {
    fn default() -> Self {
        Self {
            generator: Decoding::STOCHASTIC,
            iterator: Decoding::STOCHASTIC,
            verifier: Decoding::GREEDY,
            comparator: Decoding::GREEDY,
        }
    }
}

/// Refinement hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Population width.
    pub n: usize,
    /// Refinement depth.
    pub t: usize,
    /// Temperature of the score-to-weight map.
    pub t_smc: f64,
    /// Resampling fires when ESS < alpha * n.
    pub alpha: f64,
    /// Probability of an exploration proposal.
    pub eta: f64,
    /// Arbitration clamp.
    pub c: f64,
    /// Clone cap fraction.
    pub kappa: f64,
    /// Score floor applied before forming weights or ratios.
    pub epsilon: f64,
    /// A group-max score above this counts as near-perfect.
    pub theta_hi: f64,
    /// Top-two group-max gap below which answers are tied.
    pub delta_tie: f64,
    pub seed: u64,
    pub decoding: RoleDecoding,
    pub max_parallel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 10,
            t: 5,
            t_smc: 0.8,
            alpha: 0.5,
            eta: 0.1,
            c: 0.3,
            kappa: 0.3,
            epsilon: 1e-6,
            theta_hi: 0.95,
            delta_tie: 0.05,
            seed: 0,
            decoding: RoleDecoding::default(),
            max_parallel: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if !(self.t_smc > 0.0 && self.t_smc.is_finite()) {
            return fail(format!("t_smc must be > 0, got {}", self.t_smc));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return fail(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return fail(format!("c must lie in (0, 1), got {}", self.c));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return fail(format!("kappa must lie in (0, 1], got {}", self.kappa));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.theta_hi) || !(self.delta_tie >= 0.0) {
            return fail("theta_hi must lie in [0, 1] and delta_tie must be >= 0".into());
        }
        if self.max_parallel == 0 {
            return fail("max_parallel must be at least 1".into());
        }
        Ok(())
    }

    /// `⌈kappa · n⌉`, the most offspring a single source may keep.
    pub fn clone_cap(&self) -> usize {
        clone_cap(self.kappa, self.n)
    }
}

pub fn clone_cap(kappa: f64, n: usize) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let raw = kappa * n as f64;
    let nearest = raw.round();
    let cap = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (cap as usize).clamp(1, n.max(1))
}
