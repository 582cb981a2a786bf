//! Systematic resampling and clone capping over ancestor indices.

use rand::Rng;

/// Systematic resampling with offset `u0 ∈ [0, 1/n)`: slot `k` takes the
/// first index whose cumulative normalized weight exceeds `u0 + k/n`.
/// Returns `n = weights.len()` ancestor indices in ascending order.
pub fn systematic_resample_with_offset(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut ancestors = Vec::with_capacity(n);
    if n == 0 || !(total > 0.0) {
        return (0..n).collect();
    }
    let step = 1.0 / n as f64;
    // The last positive-weight index absorbs rounding in the running sum so
    // trailing zero-weight sources are never selected.
    let last_positive = weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
    let mut j = 0;
    let mut cumulative = weights[0] / total;
    for k in 0..n {
        let threshold = u0 + k as f64 * step;
        while j < last_positive && threshold >= cumulative {
            j += 1;
            cumulative += weights[j] / total;
        }
        ancestors.push(j);
    }
    ancestors
}

pub fn systematic_resample(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len().max(1);
    let u0 = rng.gen::<f64>() / n as f64;
    systematic_resample_with_offset(weights, u0)
}

/// Number of offspring of each source index.
pub fn offspring_counts(ancestors: &[usize], n_sources: usize) -> Vec<usize> {
    let mut counts = vec![0; n_sources];
    for &a in ancestors {
        counts[a] += 1;
    }
    counts
}

/// Limits every source to `cap` offspring.
///
/// Slots holding a source's offspring beyond its first `cap` are reassigned,
/// in slot order, to the highest-weight source still under the cap (ties to
/// the lower index). When every source is at the cap, the slot keeps its
/// pre-resampling occupant, i.e. ancestor index = slot index.
pub fn cap_copies(ancestors: &[usize], weights: &[f64], cap: usize) -> Vec<usize> {
    let n_sources = weights.len();
    let mut counts = vec![0usize; n_sources];
    let mut out = Vec::with_capacity(ancestors.len());
    let mut excess = Vec::new();
    for (slot, &a) in ancestors.iter().enumerate() {
        if counts[a] < cap {
            counts[a] += 1;
            out.push(Some(a));
        } else {
            out.push(None);
            excess.push(slot);
        }
    }
    let mut order: Vec<usize> = (0..n_sources).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut cursor = 0;
    for slot in excess {
        while cursor < order.len() && counts[order[cursor]] >= cap {
            cursor += 1;
        }
        let chosen = match order.get(cursor) {
            Some(&src) => {
                counts[src] += 1;
                src
            }
            None => slot,
        };
        out[slot] = Some(chosen);
    }
    out.into_iter().map(|a| a.expect("every slot assigned")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    #[test]
    fn equal_weights_give_one_each() {
        for u0 in [0.0, 0.05, 0.0999] {
            let a = systematic_resample_with_offset(&[1.0; 10], u0);
            assert_eq!(offspring_counts(&a, 10), vec![1; 10]);
        }
    }

    #[test]
    fn point_mass_takes_every_slot() {
        let mut rng = stream_rng(0, "pm", 0, 0, "r");
        let a = systematic_resample(&[1.0, 0.0, 0.0, 0.0], &mut rng);
        assert_eq!(a, [0, 0, 0, 0]);
    }

    #[test]
    fn zero_weight_sources_are_never_drawn() {
        let a = systematic_resample_with_offset(&[0.0, 1.0, 0.0, 1.0], 0.249);
        assert!(a.iter().all(|&i| i == 1 || i == 3));
    }

    #[test]
    fn cap_on_takeover() {
        let weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let capped = cap_copies(&[0; 10], &weights, 3);
        assert_eq!(capped, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
        assert_eq!(*offspring_counts(&capped, 10).iter().max().unwrap(), 3);
    }

    #[test]
    fn cap_prefers_heavier_sources() {
        let weights = [0.9, 0.1, 0.5, 0.5];
        let capped = cap_copies(&[0, 0, 0, 0], &weights, 2);
        assert_eq!(capped, [0, 0, 2, 2]);
    }

    #[test]
    fn cap_is_noop_within_limit() {
        let ancestors = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3];
        let w = [0.3, 0.3, 0.3, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(cap_copies(&ancestors, &w, 3), ancestors);
        assert_eq!(cap_copies(&[0, 0, 0, 0], &[1.0, 0.0, 0.0, 0.0], 4), [0, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn resampling_preserves_width(w in prop::collection::vec(0.0f64..5.0, 1..30), u in 0.0f64..1.0) {
            prop_assume!(w.iter().any(|x| *x > 0.0));
            let n = w.len();
            let a = systematic_resample_with_offset(&w, u / n as f64);
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(a.iter().all(|&i| w[i] > 0.0));
        }

        #[test]
        fn offspring_within_floor_ceil(w in prop::collection::vec(0.01f64..5.0, 1..30), u in 0.0f64..1.0) {
            let n = w.len();
            let total: f64 = w.iter().sum();
            let counts = offspring_counts(&systematic_resample_with_offset(&w, u / n as f64), n);
            for (i, c) in counts.iter().enumerate() {
                let expected = n as f64 * w[i] / total;
                prop_assert!((*c as f64) >= expected.floor() - 1e-9 && (*c as f64) <= expected.ceil() + 1e-9);
            }
        }

        #[test]
        fn capped_counts_respect_cap(
            w in prop::collection::vec(0.0f64..5.0, 2..25),
            u in 0.0f64..1.0,
            kappa in 0.05f64..1.0,
        ) {
            prop_assume!(w.iter().any(|x| *x > 0.0));
            let n = w.len();
            let cap = crate::domain::clone_cap(kappa, n);
            let a = systematic_resample_with_offset(&w, u / n as f64);
            let capped = cap_copies(&a, &w, cap);
            prop_assert_eq!(capped.len(), n);
            // Every slot has a source, so n sources always suffice.
            prop_assert!(offspring_counts(&capped, n).iter().all(|&c| c <= cap));
        }
    }
}
