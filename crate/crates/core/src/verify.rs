//! The verifier role: stepwise normalization of traces, verifier prompt
//! assembly, strict parsing of verifier output, and the scalar score.
//!
//! Verifier output is line oriented. Every non-empty line before the last is
//! a step line whose trailing whitespace-separated token is one of `+1`, `0`,
//! `-1`; the text before the token is a free-form note. The last line is
//! `FINAL ANSWER CHECK: <token>`. Anything else fails the whole parse, except
//! that a complete set of step lines without the final line yields the
//! `MISSING` verdict.

use serde::{Deserialize, Serialize};

use crate::domain::{extract_answer, Problem, Provenance, StepLabel, Trace, Verdict, ANSWER_MARKER};
use crate::error::{Error, Result};
use crate::template::Template;

pub const FINAL_CHECK_MARKER: &str = "FINAL ANSWER CHECK";

/// Rendered in place of the proposed answer when a trace has none.
pub const NO_ANSWER: &str = "NONE";

/// Parsed verifier output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub step_labels: Vec<StepLabel>,
    pub final_verdict: Verdict,
    pub notes: Vec<String>,
}

impl Feedback {
    pub fn failed() -> Self {
        Self {
            step_labels: Vec::new(),
            final_verdict: Verdict::VerificationFailed,
            notes: Vec::new(),
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        self.step_labels.iter().fold((0, 0, 0), |(c, n, i), l| match l {
            StepLabel::Correct => (c + 1, n, i),
            StepLabel::Neutral => (c, n + 1, i),
            StepLabel::Incorrect => (c, n, i + 1),
        })
    }

    /// Serializes in the verifier output schema. `parse_verifier_output`
    /// inverts this for well-formed feedback.
    pub fn to_verifier_text(&self) -> String {
        let mut out = String::new();
        for (k, label) in self.step_labels.iter().enumerate() {
            let note = self.notes.get(k).map(String::as_str).unwrap_or("");
            if note.is_empty() {
                out.push_str(label.token());
            } else {
                out.push_str(note);
                out.push(' ');
                out.push_str(label.token());
            }
            out.push('\n');
        }
        let verdict_token = match self.final_verdict {
            Verdict::Correct => Some("+1"),
            Verdict::Incorrect => Some("-1"),
            Verdict::Neutral => Some("0"),
            Verdict::Missing | Verdict::VerificationFailed => None,
        };
        if let Some(token) = verdict_token {
            out.push_str(FINAL_CHECK_MARKER);
            out.push_str(": ");
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    /// Human-readable review handed to the iterator for local refinement.
    pub fn render_review(&self) -> String {
        if self.final_verdict == Verdict::VerificationFailed {
            return "The verifier could not assess this solution.".to_string();
        }
        let mut out = String::new();
        for (k, label) in self.step_labels.iter().enumerate() {
            let verdict = match label {
                StepLabel::Correct => "correct",
                StepLabel::Neutral => "unclear",
                StepLabel::Incorrect => "incorrect",
            };
            out.push_str(&format!("Step {}: {verdict}", k + 1));
            match self.notes.get(k).filter(|n| !n.is_empty()) {
                Some(note) => out.push_str(&format!(" ({note})\n")),
                None => out.push('\n'),
            }
        }
        let final_line = match self.final_verdict {
            Verdict::Correct => "final answer judged correct",
            Verdict::Incorrect => "final answer judged incorrect",
            Verdict::Neutral => "final answer could not be confirmed",
            _ => "final answer was not checked",
        };
        out.push_str(&format!("Overall: {final_line}"));
        out
    }
}

/// Step counts, ratio and score of one verifier pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub n_correct: usize,
    pub n_neutral: usize,
    pub n_incorrect: usize,
    pub step_ratio: f64,
    pub verdict: Verdict,
    pub score: f64,
}

impl ScoreBreakdown {
    pub fn of(feedback: &Feedback) -> Self {
        let (n_correct, n_neutral, n_incorrect) = feedback.counts();
        let step_ratio = if feedback.final_verdict == Verdict::VerificationFailed {
            0.0
        } else {
            step_ratio(feedback).unwrap_or(0.0)
        };
        Self {
            n_correct,
            n_neutral,
            n_incorrect,
            step_ratio,
            verdict: feedback.final_verdict,
            score: score(feedback),
        }
    }
}

/// Coerces raw model output into a stepwise trace.
///
/// Well-formed `<step>` blocks (attributes allowed, no nesting) become the
/// steps and any text outside them is dropped. Otherwise the text is split on
/// blank lines. Whole lines carrying the answer marker are removed from the
/// steps; the answer itself is extracted from the full input.
pub fn stepwise_normalize(raw_text: &str) -> Result<Trace> {
    let answer = extract_answer(raw_text);
    let segments = parse_step_blocks(raw_text).unwrap_or_else(|| split_blank_lines(raw_text));
    let steps: Vec<String> = segments
        .into_iter()
        .map(|s| strip_answer_lines(&s))
        .filter(|s| !s.is_empty())
        .collect();
    if steps.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(Trace {
        raw_text: tag_steps(&steps),
        steps,
        answer,
        provenance: Provenance::init(),
    })
}

/// `<step i="1">…</step>` blocks joined by newlines.
pub fn tag_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(k, s)| format!("<step i=\"{}\">{}</step>", k + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_answer_lines(segment: &str) -> String {
    segment
        .lines()
        .filter(|line| {
            let line = line.trim_start();
            !(line.len() >= ANSWER_MARKER.len()
                && line.is_char_boundary(ANSWER_MARKER.len())
                && line[..ANSWER_MARKER.len()].eq_ignore_ascii_case(ANSWER_MARKER))
        })
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn split_blank_lines(text: &str) -> Vec<String> {
    let mut segments = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                segments.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        segments.push(current.join("\n"));
    }
    segments
}

/// Finds the next `<step …>` opening tag at or after `from`, returning the
/// tag's start and the index just past its `>`.
fn find_open_tag(text: &str, from: usize) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut i = from;
    while i + 5 <= bytes.len() {
        if bytes[i] == b'<' && bytes[i + 1..i + 5].eq_ignore_ascii_case(b"step") {
            match bytes.get(i + 5) {
                Some(b'>') => return Some((i, i + 6)),
                Some(c) if c.is_ascii_whitespace() => {
                    let close = text[i + 5..].find('>')? + i + 5;
                    return Some((i, close + 1));
                }
                _ => {}
            }
        }
        i += 1;
    }
    None
}

fn find_close_tag(text: &str, from: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    (from..bytes.len().saturating_sub(6)).find(|&i| bytes[i..i + 7].eq_ignore_ascii_case(b"</step>"))
}

/// Parses well-formed step blocks. Returns `None` when there are no blocks or
/// the structure is nested or unbalanced.
fn parse_step_blocks(text: &str) -> Option<Vec<String>> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    loop {
        let next_open = find_open_tag(text, pos);
        let next_close = find_close_tag(text, pos);
        match (next_open, next_close) {
            (None, None) => break,
            // A close tag before any open tag is unbalanced.
            (None, Some(_)) => return None,
            (Some((start, _)), Some(close)) if close < start => return None,
            (Some(_), None) => return None,
            (Some((_, body_start)), Some(close)) => {
                if let Some((inner, _)) = find_open_tag(text, body_start) {
                    if inner < close {
                        return None;
                    }
                }
                blocks.push(text[body_start..close].trim().to_string());
                pos = close + 7;
            }
        }
    }
    if blocks.is_empty() {
        None
    } else {
        Some(blocks)
    }
}

/// Fills the verifier template with the problem, the tagged steps and the
/// proposed answer (`NONE` when the trace has no answer).
pub fn build_verifier_input(template: &Template, problem: &Problem, trace: &Trace) -> Result<String> {
    let answer = trace.answer.as_ref().map(|a| a.as_str()).unwrap_or(NO_ANSWER);
    template.render(&[
        ("problem", problem.statement.as_str()),
        ("tagged_steps", trace.raw_text.as_str()),
        ("final_answer", answer),
    ])
}

fn split_trailing_token(line: &str) -> (&str, &str) {
    let line = line.trim_end();
    match line.rfind(char::is_whitespace) {
        Some(idx) => (line[..idx].trim(), &line[idx..].trim_start()),
        None => ("", line),
    }
}

fn final_check_token(line: &str) -> Option<Option<&str>> {
    let marker = FINAL_CHECK_MARKER;
    if line.len() < marker.len()
        || !line.is_char_boundary(marker.len())
        || !line[..marker.len()].eq_ignore_ascii_case(marker)
    {
        return None;
    }
    let rest = line[marker.len()..].trim_start();
    let rest = rest.strip_prefix(':').unwrap_or(rest).trim();
    // The token must be the only thing after the marker.
    Some(if rest.split_whitespace().count() == 1 { Some(rest) } else { None })
}

/// Parses verifier output for a trace with `n_steps` steps. Never fails:
/// malformed output is reported as `VERIFICATION_FAILED`.
pub fn parse_verifier_output(text: &str, n_steps: usize) -> Feedback {
    if n_steps == 0 {
        return Feedback::failed();
    }
    let mut labels = Vec::with_capacity(n_steps);
    let mut notes = Vec::with_capacity(n_steps);
    let mut verdict = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if verdict.is_some() {
            // Nothing may follow the final check line.
            return Feedback::failed();
        }
        if let Some(token) = final_check_token(line) {
            if labels.len() != n_steps {
                return Feedback::failed();
            }
            verdict = match token.and_then(StepLabel::from_token) {
                Some(StepLabel::Correct) => Some(Verdict::Correct),
                Some(StepLabel::Incorrect) => Some(Verdict::Incorrect),
                Some(StepLabel::Neutral) => Some(Verdict::Neutral),
                None => return Feedback::failed(),
            };
            continue;
        }
        let (note, token) = split_trailing_token(line);
        match StepLabel::from_token(token) {
            Some(label) if labels.len() < n_steps => {
                labels.push(label);
                notes.push(note.to_string());
            }
            _ => return Feedback::failed(),
        }
    }
    if labels.len() != n_steps {
        return Feedback::failed();
    }
    Feedback {
        step_labels: labels,
        final_verdict: verdict.unwrap_or(Verdict::Missing),
        notes,
    }
}

/// `(n_correct + 0.5 n_neutral) / n_steps`.
pub fn step_ratio(feedback: &Feedback) -> Result<f64> {
    let (c, n, i) = feedback.counts();
    let total = c + n + i;
    if total == 0 {
        return Err(Error::DegenerateTrace);
    }
    Ok((c as f64 + 0.5 * n as f64) / total as f64)
}

/// Intercept and slope of the verdict-conditioned affine score map.
pub fn affine_params(verdict: Verdict) -> (f64, f64) {
    match verdict {
        Verdict::Incorrect => (0.0, 0.3),
        Verdict::Correct => (0.5, 0.5),
        Verdict::Neutral => (0.0, 0.6),
        Verdict::Missing => (0.0, 0.8),
        Verdict::VerificationFailed => (0.0, 0.0),
    }
}

pub fn score_from_ratio(verdict: Verdict, ratio: f64) -> f64 {
    let (a, b) = affine_params(verdict);
    (a + b * ratio.clamp(0.0, 1.0)).clamp(0.0, 1.0)
}

/// Scalar score in `[0, 1]`. Failed or label-less feedback scores 0.
pub fn score(feedback: &Feedback) -> f64 {
    if feedback.final_verdict == Verdict::VerificationFailed {
        return 0.0;
    }
    match step_ratio(feedback) {
        Ok(ratio) => score_from_ratio(feedback.final_verdict, ratio),
        Err(_) => 0.0,
    }
}

/// Floors a score at `epsilon` before it is used in a weight or ratio.
pub fn clamp_score(score: f64, epsilon: f64) -> f64 {
    score.max(epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Answer;
    use proptest::prelude::*;

    fn fb(labels: &[StepLabel], verdict: Verdict) -> Feedback {
        Feedback {
            step_labels: labels.to_vec(),
            final_verdict: verdict,
            notes: vec![String::new(); labels.len()],
        }
    }

    #[test]
    fn parses_tagged_steps() {
        let t = stepwise_normalize("<step>a</step><step>b</step>").unwrap();
        assert_eq!(t.steps, ["a", "b"]);
        assert_eq!(t.raw_text, "<step i=\"1\">a</step>\n<step i=\"2\">b</step>");
        let t = stepwise_normalize("<step i=\"1\">a</step>\n<STEP id=2 >b</step>").unwrap();
        assert_eq!(t.steps, ["a", "b"]);
    }

    #[test]
    fn splits_on_blank_lines() {
        let t = stepwise_normalize("line1\n\nline2\n\n\nline3").unwrap();
        assert_eq!(t.steps, ["line1", "line2", "line3"]);
        assert_eq!(t.answer, None);
    }

    #[test]
    fn trailing_prose_is_dropped() {
        let t = stepwise_normalize("<step>a</step> trailing prose").unwrap();
        assert_eq!(t.steps, ["a"]);
    }

    #[test]
    fn malformed_tags_fall_back_to_blank_lines() {
        let nested = "<step>a <step>b</step></step>\n\nnext";
        let t = stepwise_normalize(nested).unwrap();
        assert_eq!(t.steps, ["<step>a <step>b</step></step>", "next"]);
        let unclosed = "<step>a\n\nb";
        assert_eq!(stepwise_normalize(unclosed).unwrap().steps, ["<step>a", "b"]);
        let stray = "a</step>\n\nb";
        assert_eq!(stepwise_normalize(stray).unwrap().steps, ["a</step>", "b"]);
        // "<steps>" is not a step tag.
        assert_eq!(stepwise_normalize("<steps>x</steps>").unwrap().steps, ["<steps>x</steps>"]);
    }

    #[test]
    fn answer_lines_are_extracted_not_kept_as_steps() {
        let t = stepwise_normalize("<step>x = 2</step>\nFINAL ANSWER: 2").unwrap();
        assert_eq!(t.steps, ["x = 2"]);
        assert_eq!(t.answer, Some(Answer::new("2")));
        let t = stepwise_normalize("a\n\nb\nFINAL ANSWER: 3").unwrap();
        assert_eq!(t.steps, ["a", "b"]);
        assert_eq!(t.answer, Some(Answer::new("3")));
    }

    #[test]
    fn empty_generation_is_rejected() {
        assert!(matches!(stepwise_normalize("  \n\n "), Err(Error::EmptyTrace)));
        assert!(matches!(stepwise_normalize("FINAL ANSWER: 4"), Err(Error::EmptyTrace)));
        assert!(matches!(stepwise_normalize("<step> </step>"), Err(Error::EmptyTrace)));
    }

    #[test]
    fn verifier_input_contains_steps_and_answer() {
        let template = Template::new("{problem}\n{tagged_steps}\nAnswer: {final_answer}");
        let problem = Problem::new("p", "What is 2+3?");
        let trace = stepwise_normalize("<step>2+3</step><step>=5</step>\nFINAL ANSWER: 5").unwrap();
        let text = build_verifier_input(&template, &problem, &trace).unwrap();
        assert!(text.contains("<step i=\"1\">") && text.contains("<step i=\"2\">"));
        assert!(text.contains("Answer: 5"));

        let no_answer = stepwise_normalize("just thinking").unwrap();
        let text = build_verifier_input(&template, &problem, &no_answer).unwrap();
        assert!(text.contains("NONE"));

        let bad = Template::new("{problem} {unknown}");
        assert!(matches!(build_verifier_input(&bad, &problem, &trace), Err(Error::Template(_))));
    }

    #[test]
    fn parses_schema_conforming_output() {
        let out = "ok +1\nok +1\nslip -1\nFINAL ANSWER CHECK: -1";
        let f = parse_verifier_output(out, 3);
        use StepLabel::*;
        assert_eq!(f.step_labels, [Correct, Correct, Incorrect]);
        assert_eq!(f.final_verdict, Verdict::Incorrect);
        assert_eq!(f.notes, ["ok", "ok", "slip"]);
    }

    #[test]
    fn missing_final_line() {
        let f = parse_verifier_output("a +1\nb 0\nc +1\n", 3);
        assert_eq!(f.final_verdict, Verdict::Missing);
        assert_eq!(f.step_labels.len(), 3);
    }

    #[test]
    fn failure_taxonomy() {
        let failed = |text: &str, n| parse_verifier_output(text, n).final_verdict == Verdict::VerificationFailed;
        assert!(failed("a +2\nb +1\nFINAL ANSWER CHECK: +1", 2));
        assert!(failed("a +1\nFINAL ANSWER CHECK: +1", 2), "missing line");
        assert!(failed("a +1\nb +1\nc +1\nFINAL ANSWER CHECK: +1", 2), "extra line");
        assert!(failed("a +1\nb +1\nFINAL ANSWER CHECK: yes", 2), "bad final token");
        assert!(failed("a +1\nb +1\nFINAL ANSWER CHECK: +1\ntrailing", 2), "text after final");
        assert!(failed("FINAL ANSWER CHECK: +1\na +1\nb +1", 2), "final first");
        assert!(failed("Here is my review:\na +1\nb +1\nFINAL ANSWER CHECK: +1", 2));
        assert!(failed("", 1));
        assert!(failed("+1", 0));
        let f = parse_verifier_output("a +2\nb +1\nFINAL ANSWER CHECK: +1", 2);
        assert!(f.step_labels.is_empty());
        assert_eq!(score(&f), 0.0);
    }

    #[test]
    fn step_ratio_examples() {
        use StepLabel::*;
        let f = fb(&[Correct, Correct, Correct, Neutral], Verdict::Correct);
        assert_eq!(step_ratio(&f).unwrap(), 0.875);
        let f = fb(&[Incorrect; 4], Verdict::Incorrect);
        assert_eq!(step_ratio(&f).unwrap(), 0.0);
        let f = fb(&[Neutral; 2], Verdict::Neutral);
        assert_eq!(step_ratio(&f).unwrap(), 0.5);
        assert!(matches!(step_ratio(&fb(&[], Verdict::Correct)), Err(Error::DegenerateTrace)));
    }

    #[test]
    fn score_examples() {
        use StepLabel::*;
        assert_eq!(score(&fb(&[Correct; 3], Verdict::Correct)), 1.0);
        assert_eq!(score(&fb(&[Correct; 3], Verdict::Incorrect)), 0.3);
        assert_eq!(score(&Feedback::failed()), 0.0);
        assert_eq!(clamp_score(0.0, 1e-6), 1e-6);
    }

    fn label() -> impl Strategy<Value = StepLabel> {
        prop_oneof![Just(StepLabel::Correct), Just(StepLabel::Neutral), Just(StepLabel::Incorrect)]
    }

    fn verdict() -> impl Strategy<Value = Verdict> {
        prop::sample::select(Verdict::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn feedback_round_trips(
            labels in prop::collection::vec(label(), 1..8),
            v in prop::sample::select(vec![Verdict::Correct, Verdict::Incorrect, Verdict::Neutral, Verdict::Missing]),
            note_seed in prop::collection::vec("[a-z][a-z ,.]{0,12}[a-z]", 8),
        ) {
            let notes: Vec<String> = note_seed.into_iter().take(labels.len()).collect();
            let f = Feedback { step_labels: labels.clone(), final_verdict: v, notes };
            let parsed = parse_verifier_output(&f.to_verifier_text(), labels.len());
            prop_assert_eq!(parsed, f);
        }

        #[test]
        fn verdict_bounds_hold(labels in prop::collection::vec(label(), 1..12), v in verdict()) {
            let f = fb(&labels, v);
            let s = score(&f);
            let (lo, hi) = match v {
                Verdict::Correct => (0.5, 1.0),
                Verdict::Incorrect => (0.0, 0.3),
                Verdict::Neutral => (0.0, 0.6),
                Verdict::Missing => (0.0, 0.8),
                Verdict::VerificationFailed => (0.0, 0.0),
            };
            prop_assert!(s >= lo && s <= hi, "{:?} -> {}", v, s);
        }

        #[test]
        fn score_is_monotone_in_ratio(v in verdict(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(score_from_ratio(v, lo) <= score_from_ratio(v, hi));
        }

        #[test]
        fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..200), n in 0usize..6) {
            let text = String::from_utf8_lossy(&bytes);
            let f = parse_verifier_output(&text, n);
            if f.final_verdict == Verdict::VerificationFailed {
                prop_assert!(f.step_labels.is_empty());
            } else {
                prop_assert_eq!(f.step_labels.len(), n);
            }
        }

        #[test]
        fn normalizer_never_panics(text in "\\PC{0,80}") {
            if let Ok(t) = stepwise_normalize(&text) {
                prop_assert!(!t.steps.is_empty());
                prop_assert!(t.steps.iter().all(|s| !s.is_empty()));
            }
        }
    }
}
