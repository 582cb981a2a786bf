//! Population-level and compute-aware metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{CallRecord, Role};
use crate::domain::Answer;
use crate::engine::{acceptance_probability, IterationRecord, Population};
use crate::error::{Error, Result};
use crate::verify::clamp_score;

/// Fraction of particles whose answer equals `gold`. Particles without an
/// answer count as incorrect; an empty population scores 0.
pub fn pop_acc(population: &Population, gold: &Answer) -> f64 {
    if population.is_empty() {
        return 0.0;
    }
    let correct = correctness(population, gold).into_iter().filter(|c| *c).count();
    correct as f64 / population.len() as f64
}

pub fn correctness(population: &Population, gold: &Answer) -> Vec<bool> {
    population.particles.iter().map(|p| p.answer() == Some(gold)).collect()
}

/// Incorrect-to-correct and correct-to-incorrect counts between two aligned
/// correctness vectors.
pub fn transitions(before: &[bool], after: &[bool]) -> (usize, usize) {
    before.iter().zip(after).fold((0, 0), |(i2c, c2i), (&b, &a)| match (b, a) {
        (false, true) => (i2c + 1, c2i),
        (true, false) => (i2c, c2i + 1),
        _ => (i2c, c2i),
    })
}

/// Per-step `(I2C, C2I)` over slot histories. Every history must have the
/// same length.
pub fn flip_counts(histories: &[Vec<bool>]) -> Result<Vec<(usize, usize)>> {
    let Some(first) = histories.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some(bad) = histories.iter().find(|h| h.len() != len) {
        return Err(Error::MalformedHistory(len, bad.len()));
    }
    Ok((1..len)
        .map(|t| {
            let before: Vec<bool> = histories.iter().map(|h| h[t - 1]).collect();
            let after: Vec<bool> = histories.iter().map(|h| h[t]).collect();
            transitions(&before, &after)
        })
        .collect())
}

/// Incorrect-to-correct minus correct-to-incorrect transitions, summed over
/// steps and slots.
///
/// ```
/// use prism_core::metrics::net_flip;
/// assert_eq!(net_flip(&[vec![false, true], vec![true, true]]).unwrap(), 1);
/// assert_eq!(net_flip(&[vec![true, false], vec![false, true]]).unwrap(), 0);
/// ```
pub fn net_flip(histories: &[Vec<bool>]) -> Result<i64> {
    Ok(flip_counts(histories)?
        .into_iter()
        .map(|(i2c, c2i)| i2c as i64 - c2i as i64)
        .sum())
}

/// `(max/N > 0.3, max == N)` for one resampling event.
pub fn dominance_event(counts: &[usize], n: usize) -> (bool, bool) {
    let max = counts.iter().copied().max().unwrap_or(0);
    (n > 0 && max as f64 / n as f64 > 0.3, n > 0 && max == n)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DominanceStats {
    pub events: usize,
    pub gt_03: usize,
    pub eq_1: usize,
}

impl DominanceStats {
    pub fn observe(&mut self, counts: &[usize], n: usize) {
        let (gt, eq) = dominance_event(counts, n);
        self.events += 1;
        self.gt_03 += usize::from(gt);
        self.eq_1 += usize::from(eq);
    }

    pub fn merge(&mut self, other: &DominanceStats) {
        self.events += other.events;
        self.gt_03 += other.gt_03;
        self.eq_1 += other.eq_1;
    }

    /// Frequency of a single source exceeding 30% of the population.
    pub fn p_gt_03(&self) -> Option<f64> {
        ratio(self.gt_03, self.events)
    }

    /// Frequency of complete takeover.
    pub fn p_eq_1(&self) -> Option<f64> {
        ratio(self.eq_1, self.events)
    }
}

/// Dominance frequencies over all resampling events, from pre-cap offspring
/// counts.
pub fn dominance_stats(offspring_counts_pre_cap: &[Vec<usize>], n: usize) -> DominanceStats {
    let mut stats = DominanceStats::default();
    for counts in offspring_counts_pre_cap {
        stats.observe(counts, n);
    }
    stats
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Running sums over rejuvenation proposals. No-op proposals are not
/// counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceTally {
    pub proposals: usize,
    pub accepted: usize,
    pub downhill: usize,
    pub downhill_accepted: usize,
    pub sum_s_accepted: f64,
    pub sum_s_rejected: f64,
    /// Sum of the acceptance rule's probability over downhill proposals.
    pub sum_downhill_predicted: f64,
}

impl AcceptanceTally {
    pub fn observe(&mut self, records: &[IterationRecord], t_smc: f64, epsilon: f64) {
        for p in records.iter().flat_map(|r| &r.particles) {
            let Some(s_new) = p.s_new else { continue };
            self.proposals += 1;
            if p.accepted {
                self.accepted += 1;
                self.sum_s_accepted += s_new;
            } else {
                self.sum_s_rejected += s_new;
            }
            if p.downhill {
                self.downhill += 1;
                self.downhill_accepted += usize::from(p.accepted);
                self.sum_downhill_predicted +=
                    acceptance_probability(clamp_score(p.s_old, epsilon), clamp_score(s_new, epsilon), t_smc);
            }
        }
    }

    pub fn merge(&mut self, other: &AcceptanceTally) {
        self.proposals += other.proposals;
        self.accepted += other.accepted;
        self.downhill += other.downhill;
        self.downhill_accepted += other.downhill_accepted;
        self.sum_s_accepted += other.sum_s_accepted;
        self.sum_s_rejected += other.sum_s_rejected;
        self.sum_downhill_predicted += other.sum_downhill_predicted;
    }

    pub fn diagnostics(&self) -> AcceptanceDiagnostics {
        let rejected = self.proposals - self.accepted;
        AcceptanceDiagnostics {
            p_downhill_accept: ratio(self.downhill_accepted, self.downhill),
            predicted_downhill_accept: (self.downhill > 0).then(|| self.sum_downhill_predicted / self.downhill as f64),
            mean_s_accepted: (self.accepted > 0).then(|| self.sum_s_accepted / self.accepted as f64),
            mean_s_rejected: (rejected > 0).then(|| self.sum_s_rejected / rejected as f64),
            downhill_proposals: self.downhill,
            proposals: self.proposals,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceDiagnostics {
    /// `P(accept | s_new < s_old)`.
    pub p_downhill_accept: Option<f64>,
    /// Mean acceptance probability the rule assigns to the same downhill
    /// proposals.
    pub predicted_downhill_accept: Option<f64>,
    pub mean_s_accepted: Option<f64>,
    pub mean_s_rejected: Option<f64>,
    pub downhill_proposals: usize,
    pub proposals: usize,
}

/// Downhill acceptance rate and conditional proposal-score means. Empty
/// conditioning sets are `None`.
pub fn acceptance_diagnostics(records: &[IterationRecord], t_smc: f64, epsilon: f64) -> AcceptanceDiagnostics {
    let mut tally = AcceptanceTally::default();
    tally.observe(records, t_smc, epsilon);
    tally.diagnostics()
}

/// Token counts. `unsplit_tokens` holds usage known only as a total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub input_tokens: i64,
    pub output_tokens: i64,
    #[serde(default)]
    pub unsplit_tokens: i64,
    /// Calls whose usage was estimated from text length.
    #[serde(default)]
    pub estimated_calls: usize,
    #[serde(default)]
    pub calls: usize,
}

impl TokenTotals {
    pub fn total(&self) -> i64 {
        self.input_tokens + self.output_tokens + self.unsplit_tokens
    }

    pub fn add_call(&mut self, record: &CallRecord) {
        self.input_tokens += record.usage.input_tokens as i64;
        self.output_tokens += record.usage.output_tokens as i64;
        self.estimated_calls += usize::from(record.usage.estimated);
        self.calls += 1;
    }

    pub fn merge(&mut self, other: &TokenTotals) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.unsplit_tokens += other.unsplit_tokens;
        self.estimated_calls += other.estimated_calls;
        self.calls += other.calls;
    }
}

/// Token totals per role over a set of call records.
pub fn tokens_by_role<'a>(records: impl IntoIterator<Item = &'a CallRecord>) -> BTreeMap<Role, TokenTotals> {
    let mut out: BTreeMap<Role, TokenTotals> = BTreeMap::new();
    for r in records {
        out.entry(r.role).or_default().add_call(r);
    }
    out
}

/// Dollar prices per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pricing {
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
    /// Input share assumed for usage known only as a total.
    pub input_share: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Self {
            input_per_mtok: 0.05,
            output_per_mtok: 0.20,
            input_share: 0.6,
        }
    }
}

/// Estimated dollar cost.
///
/// ```
/// use prism_core::metrics::{cost_estimate, Pricing, TokenTotals};
/// let totals = TokenTotals { unsplit_tokens: 1_000_000, ..TokenTotals::default() };
/// assert!((cost_estimate(&totals, &Pricing::default()).unwrap() - 0.11).abs() < 1e-9);
/// ```
pub fn cost_estimate(totals: &TokenTotals, pricing: &Pricing) -> Result<f64> {
    for v in [totals.input_tokens, totals.output_tokens, totals.unsplit_tokens] {
        if v < 0 {
            return Err(Error::NegativeTokens(v));
        }
    }
    let per = 1e-6;
    let unsplit = totals.unsplit_tokens as f64;
    let input = totals.input_tokens as f64 + unsplit * pricing.input_share;
    let output = totals.output_tokens as f64 + unsplit * (1.0 - pricing.input_share);
    Ok(input * per * pricing.input_per_mtok + output * per * pricing.output_per_mtok)
}

/// Mean and standard error of the mean. `None` for an empty sample; the
/// error is 0 for a single value.
pub fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}
