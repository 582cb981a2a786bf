//! Conflict arbitration between high-scoring answer groups.

use serde::{Deserialize, Serialize};

use crate::domain::Answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ComparatorVerdict {
    A,
    B,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationEvent {
    pub answer_a: Answer,
    pub answer_b: Answer,
    pub verdict: ComparatorVerdict,
    /// The comparator call failed in transport; the verdict defaulted to
    /// `NEITHER`.
    #[serde(default)]
    pub transport_failed: bool,
}

/// Highest-scoring member of one answer group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLeader {
    pub answer: Answer,
    pub index: usize,
    pub score: f64,
}

/// Answer groups ordered by group-max score (descending), ties to the group
/// whose leader has the lower index. Particles without an answer are skipped.
pub fn group_leaders(answers: &[Option<Answer>], scores: &[f64]) -> Vec<GroupLeader> {
    let mut leaders: Vec<GroupLeader> = Vec::new();
    for (i, (answer, &score)) in answers.iter().zip(scores).enumerate() {
        let Some(answer) = answer else { continue };
        match leaders.iter_mut().find(|g| &g.answer == answer) {
            Some(g) if score > g.score => {
                g.score = score;
                g.index = i;
            }
            Some(_) => {}
            None => leaders.push(GroupLeader {
                answer: answer.clone(),
                index: i,
                score,
            }),
        }
    }
    leaders.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    leaders
}

/// The two group leaders to compare, if arbitration triggers: either at
/// least two groups exceed `theta_hi`, or the top two groups are within
/// `delta_tie` of each other.
pub fn arbitration_pair(
    answers: &[Option<Answer>],
    scores: &[f64],
    theta_hi: f64,
    delta_tie: f64,
) -> Option<(GroupLeader, GroupLeader)> {
    let leaders = group_leaders(answers, scores);
    if leaders.len() < 2 {
        return None;
    }
    let near_perfect = leaders.iter().filter(|g| g.score > theta_hi).count();
    let tied = leaders[0].score - leaders[1].score < delta_tie;
    if near_perfect >= 2 || tied {
        let mut it = leaders.into_iter();
        Some((it.next()?, it.next()?))
    } else {
        None
    }
}

/// Reads exactly one `<verdict>…</verdict>` tag. Anything else is `NEITHER`.
pub fn parse_comparator_verdict(text: &str) -> ComparatorVerdict {
    const OPEN: &str = "<verdict>";
    const CLOSE: &str = "</verdict>";
    let lower = text.to_ascii_lowercase();
    if lower.matches(OPEN).count() != 1 || lower.matches(CLOSE).count() != 1 {
        return ComparatorVerdict::Neither;
    }
    let start = lower.find(OPEN).expect("counted") + OPEN.len();
    let Some(len) = lower[start..].find(CLOSE) else {
        return ComparatorVerdict::Neither;
    };
    match text[start..start + len].trim() {
        "A" => ComparatorVerdict::A,
        "B" => ComparatorVerdict::B,
        _ => ComparatorVerdict::Neither,
    }
}

/// Clamps every member of the losing group(s) to `min(s, c)`.
pub fn apply_verdict(
    answers: &[Option<Answer>],
    scores: &mut [f64],
    answer_a: &Answer,
    answer_b: &Answer,
    verdict: ComparatorVerdict,
    c: f64,
) {
    let clamp_a = matches!(verdict, ComparatorVerdict::B | ComparatorVerdict::Neither);
    let clamp_b = matches!(verdict, ComparatorVerdict::A | ComparatorVerdict::Neither);
    for (answer, score) in answers.iter().zip(scores.iter_mut()) {
        let hit = match answer {
            Some(a) => (clamp_a && a == answer_a) || (clamp_b && a == answer_b),
            None => false,
        };
        if hit {
            *score = score.min(c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ans(xs: &[&str]) -> Vec<Option<Answer>> {
        xs.iter().map(|x| if x.is_empty() { None } else { Some(Answer::new(x)) }).collect()
    }

    #[test]
    fn near_perfect_conflict_triggers() {
        let answers = ans(&["7", "3", "3", "7"]);
        let scores = [0.98, 0.97, 0.5, 0.6];
        let (a, b) = arbitration_pair(&answers, &scores, 0.95, 0.05).unwrap();
        assert_eq!((a.answer.as_str(), a.index), ("7", 0));
        assert_eq!((b.answer.as_str(), b.index), ("3", 1));

        let mut s = scores;
        apply_verdict(&answers, &mut s, &a.answer, &b.answer, ComparatorVerdict::A, 0.3);
        assert_eq!(s, [0.98, 0.3, 0.3, 0.6]);
    }

    #[test]
    fn single_answer_never_triggers() {
        let answers = ans(&["7", "7", ""]);
        assert!(arbitration_pair(&answers, &[0.99, 0.98, 0.97], 0.95, 0.05).is_none());
    }

    #[test]
    fn near_tie_triggers_and_clear_winner_does_not() {
        let answers = ans(&["1", "2"]);
        assert!(arbitration_pair(&answers, &[0.62, 0.6], 0.95, 0.05).is_some());
        assert!(arbitration_pair(&answers, &[0.9, 0.6], 0.95, 0.05).is_none());
    }

    #[test]
    fn neither_clamps_both_groups() {
        let answers = ans(&["1", "2", "3"]);
        let mut s = [0.99, 0.98, 0.9];
        let (a, b) = (Answer::new("1"), Answer::new("2"));
        apply_verdict(&answers, &mut s, &a, &b, ComparatorVerdict::Neither, 0.3);
        assert_eq!(s, [0.3, 0.3, 0.9]);
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_comparator_verdict("so <verdict>A</verdict>"), ComparatorVerdict::A);
        assert_eq!(parse_comparator_verdict("<VERDICT> B </VERDICT>"), ComparatorVerdict::B);
        assert_eq!(parse_comparator_verdict("<verdict>NEITHER</verdict>"), ComparatorVerdict::Neither);
        assert_eq!(parse_comparator_verdict("<verdict>C</verdict>"), ComparatorVerdict::Neither);
        assert_eq!(parse_comparator_verdict("A"), ComparatorVerdict::Neither);
        assert_eq!(
            parse_comparator_verdict("<verdict>A</verdict><verdict>B</verdict>"),
            ComparatorVerdict::Neither
        );
        assert_eq!(parse_comparator_verdict("</verdict>A<verdict>"), ComparatorVerdict::Neither);
    }

    proptest! {
        #[test]
        fn clamping_never_raises(
            scores in prop::collection::vec(0.0f64..=1.0, 1..12),
            labels in prop::collection::vec(0u8..4, 12),
            v in prop_oneof![Just(ComparatorVerdict::A), Just(ComparatorVerdict::B), Just(ComparatorVerdict::Neither)],
            c in 0.01f64..0.99,
        ) {
            let answers: Vec<Option<Answer>> = labels.iter().take(scores.len())
                .map(|l| if *l == 3 { None } else { Some(Answer::new(&l.to_string())) }).collect();
            let mut after = scores.clone();
            apply_verdict(&answers, &mut after, &Answer::new("0"), &Answer::new("1"), v, c);
            for (b, a) in scores.iter().zip(&after) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn verdict_parser_is_total(text in "\\PC{0,60}") {
            let _ = parse_comparator_verdict(&text);
        }
    }
}
