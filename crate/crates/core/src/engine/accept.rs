use rand::Rng;

/// `min(1, (s_new / s_old)^(1 / t_smc))`. Both scores must be floored at
/// epsilon.
pub fn acceptance_probability(s_old: f64, s_new: f64, t_smc: f64) -> f64 {
    (s_new / s_old).powf(1.0 / t_smc).min(1.0)
}

/// Energy-based acceptance test. Always consumes exactly one uniform draw.
pub fn accept(s_old: f64, s_new: f64, t_smc: f64, rng: &mut impl Rng) -> bool {
    let u: f64 = rng.gen();
    u < acceptance_probability(s_old, s_new, t_smc)
}
