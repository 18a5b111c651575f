//! Uniform categorical diffusion: transitions, marginals, posterior,
//! forward corruption, and the training/diagnostic losses.
//!
//! With a uniform transition Q_t = (1-β_t)·I + (β_t/C)·𝟙𝟙ᵀ, every quantity
//! needed here has a closed form in the cumulative keep probability ᾱ_t, so
//! no C×C matrix is ever materialized outside of test oracles.

use crate::rng::{derive, Rng};
use crate::schedule::NoiseSchedule;
use crate::soup::QuantizedTriangleSoup;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Probability vector over C categories.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DiffusionError> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(DiffusionError::BadArgument("negative or non-finite probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DiffusionError::BadArgument(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(CategoricalDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Inverse-CDF sample; deterministic given the generator state.
    pub fn sample(&self, rng: &mut Rng) -> u16 {
        let u = rng.next_f64();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u16;
            }
        }
        (self.probs.len() - 1) as u16
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> u16 {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u16
    }
}

/// One-step uniform transition, applied in closed form.
#[derive(Clone, Copy, Debug)]
pub struct TransitionSpec {
    pub beta: f64,
    pub categories: usize,
}

impl TransitionSpec {
    /// q(x_t = j | x_{t-1} = i).
    pub fn prob(&self, i: u16, j: u16) -> f64 {
        let stay = if i == j { 1.0 - self.beta } else { 0.0 };
        stay + self.beta / self.categories as f64
    }

    /// Full C×C matrix. Test oracles only; everything else stays closed-form.
    pub fn materialize(&self) -> Vec<Vec<f64>> {
        let c = self.categories;
        (0..c)
            .map(|i| (0..c).map(|j| self.prob(i as u16, j as u16)).collect())
            .collect()
    }
}

/// t-step marginal q(x_t | x_0): probability ᾱ_t on x_0 plus (1-ᾱ_t)/C
/// everywhere.
pub fn q_marginal(
    x0: u16,
    t: usize,
    schedule: &NoiseSchedule,
    categories: usize,
) -> Result<CategoricalDistribution, DiffusionError> {
    check_t(t, schedule)?;
    check_category(x0, categories)?;
    let ab = schedule.alpha_bar(t);
    Ok(marginal_with_keep(x0, ab, categories))
}

fn marginal_with_keep(x0: u16, keep: f64, categories: usize) -> CategoricalDistribution {
    let base = (1.0 - keep) / categories as f64;
    let mut probs = vec![base; categories];
    probs[x0 as usize] += keep;
    CategoricalDistribution { probs }
}

/// Corrupts every unmasked coordinate of a soup to timestep `t` by sampling
/// Eq. q(x_t|x_0): keep with probability ᾱ_t, otherwise resample uniformly.
///
/// Each coordinate owns an rng stream derived from `(seed, coordinate
/// index)`, so the result is independent of iteration order and thread
/// count. Masked faces pass through untouched.
pub fn sample_xt(
    soup: &QuantizedTriangleSoup,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<QuantizedTriangleSoup, DiffusionError> {
    check_t(t, schedule)?;
    let keep = schedule.alpha_bar(t);
    let c = soup.categories();
    let mut out = soup.clone();
    for f in 0..soup.capacity() {
        if !soup.mask()[f] {
            continue;
        }
        let mut face = soup.faces()[f];
        for v in 0..3 {
            for a in 0..3 {
                let coord_index = ((f * 3 + v) * 3 + a) as u64;
                let mut rng = Rng::new(derive(seed, coord_index));
                if rng.next_f64() >= keep {
                    face[v][a] = rng.next_below(c) as u16;
                }
            }
        }
        out.set_face(f, face);
    }
    Ok(out)
}

/// Posterior q(x_{t-1} | x_t, x_0) of Bayes' rule over one uniform step.
/// At t = 1 this is the point mass at x_0.
pub fn posterior(
    xt: u16,
    x0: u16,
    t: usize,
    schedule: &NoiseSchedule,
    categories: usize,
) -> Result<CategoricalDistribution, DiffusionError> {
    check_t(t, schedule)?;
    check_category(xt, categories)?;
    check_category(x0, categories)?;
    if t == 1 {
        let mut probs = vec![0.0; categories];
        probs[x0 as usize] = 1.0;
        return Ok(CategoricalDistribution { probs });
    }
    let step_keep = 1.0 - schedule.beta(t);
    let prev_keep = schedule.alpha_bar(t - 1);
    Ok(posterior_closed_form(xt, x0, step_keep, prev_keep, categories))
}

/// Generalized posterior q(x_s | x_t, x_0) for s < t, used when the sampler
/// subsamples timesteps: the s→t block of steps acts as one uniform
/// transition with keep probability ᾱ_t/ᾱ_s.
pub fn posterior_between(
    xt: u16,
    x0: u16,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
    categories: usize,
) -> Result<CategoricalDistribution, DiffusionError> {
    check_t(t, schedule)?;
    if s >= t {
        return Err(DiffusionError::BadArgument(format!("need s < t, got s={s}, t={t}")));
    }
    check_category(xt, categories)?;
    check_category(x0, categories)?;
    if s == 0 {
        let mut probs = vec![0.0; categories];
        probs[x0 as usize] = 1.0;
        return Ok(CategoricalDistribution { probs });
    }
    let step_keep = schedule.alpha_bar(t) / schedule.alpha_bar(s);
    let prev_keep = schedule.alpha_bar(s);
    Ok(posterior_closed_form(xt, x0, step_keep, prev_keep, categories))
}

/// probs ∝ (x_t Q_stepᵀ) ⊙ (x_0 Q̄_prev): entry i is
/// (step_keep·[i=x_t] + (1-step_keep)/C) · (prev_keep·[i=x_0] + (1-prev_keep)/C).
fn posterior_closed_form(
    xt: u16,
    x0: u16,
    step_keep: f64,
    prev_keep: f64,
    categories: usize,
) -> CategoricalDistribution {
    let c = categories as f64;
    let step_base = (1.0 - step_keep) / c;
    let prev_base = (1.0 - prev_keep) / c;
    let mut probs = Vec::with_capacity(categories);
    let mut sum = 0.0;
    for i in 0..categories {
        let from_xt = step_base + if i == xt as usize { step_keep } else { 0.0 };
        let from_x0 = prev_base + if i == x0 as usize { prev_keep } else { 0.0 };
        let w = from_xt * from_x0;
        probs.push(w);
        sum += w;
    }
    debug_assert!(sum > 0.0);
    for p in &mut probs {
        *p /= sum;
    }
    CategoricalDistribution { probs }
}

/// Reverse step assembled from a clean-sample prediction:
/// p(x_{t-1}|x_t) = Σ_{x̂0} q(x_{t-1}|x_t, x̂0) · softmax(logits)[x̂0].
///
/// Expanding the posterior lets the x̂0 sum collapse to O(C):
/// with u_k = softmax_k / Z_k (Z_k the Bayes normalizer for x̂0 = k) the
/// mixture is (step_keep·[i=x_t] + (1-step_keep)/C) ·
/// (prev_keep·u_i + (1-prev_keep)/C·Σu).
pub fn reverse_step_distribution(
    xt: u16,
    x0_logits: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<CategoricalDistribution, DiffusionError> {
    check_t(t, schedule)?;
    reverse_step_between(xt, x0_logits, t, t - 1, schedule)
}

/// Subsampled-step variant: target timestep `s` < `t` (s = 0 yields the
/// model's x̂0 distribution itself).
pub fn reverse_step_between(
    xt: u16,
    x0_logits: &[f64],
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<CategoricalDistribution, DiffusionError> {
    check_t(t, schedule)?;
    if s >= t {
        return Err(DiffusionError::BadArgument(format!("need s < t, got s={s}, t={t}")));
    }
    let categories = x0_logits.len();
    check_category(xt, categories)?;
    if x0_logits.iter().any(|x| !x.is_finite()) {
        return Err(DiffusionError::BadArgument("non-finite logit".into()));
    }
    let weights = softmax(x0_logits);
    if s == 0 {
        return Ok(CategoricalDistribution { probs: weights });
    }

    let c = categories as f64;
    let step_keep = schedule.alpha_bar(t) / schedule.alpha_bar(s);
    let prev_keep = schedule.alpha_bar(s);
    let step_base = (1.0 - step_keep) / c;
    let prev_base = (1.0 - prev_keep) / c;
    let total_base = (1.0 - schedule.alpha_bar(t)) / c;

    // u_k = w_k / Z_k where Z_k = q(x_t | x̂0 = k).
    let mut u = vec![0.0; categories];
    let mut u_sum = 0.0;
    for k in 0..categories {
        let z = total_base + if k == xt as usize { schedule.alpha_bar(t) } else { 0.0 };
        u[k] = weights[k] / z;
        u_sum += u[k];
    }

    let mut probs = Vec::with_capacity(categories);
    let mut sum = 0.0;
    for i in 0..categories {
        let from_xt = step_base + if i == xt as usize { step_keep } else { 0.0 };
        let mix = prev_keep * u[i] + prev_base * u_sum;
        let p = from_xt * mix;
        probs.push(p);
        sum += p;
    }
    if !(sum > 0.0) {
        return Err(DiffusionError::Internal("zero normalizer in reverse step".into()));
    }
    for p in &mut probs {
        *p /= sum;
    }
    Ok(CategoricalDistribution { probs })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// Cross-entropy of per-coordinate category logits against a target soup.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    /// Sum over unmasked coordinates, in nats.
    pub total: f64,
    /// Mean per unmasked coordinate.
    pub per_coordinate: f64,
    /// Number of unmasked coordinates.
    pub coordinates: usize,
}

/// Sums -log softmax(logits)[target] over the unmasked faces, vertices, and
/// coordinates. Logits shape: capacity × 3 × 3 × C. Masked faces contribute
/// exactly zero.
pub fn cross_entropy_loss(
    logits: &Tensor,
    target: &QuantizedTriangleSoup,
) -> Result<CrossEntropy, DiffusionError> {
    let c = target.categories();
    let expected = [target.capacity(), 3, 3, c];
    if logits.dims() != expected {
        return Err(DiffusionError::BadArgument(format!(
            "logits shape {:?} does not match soup ({:?})",
            logits.dims(),
            expected
        )));
    }
    let data = logits.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..target.capacity() {
        if !target.mask()[f] {
            continue;
        }
        for v in 0..3 {
            for a in 0..3 {
                let base = ((f * 3 + v) * 3 + a) * c;
                let row = &data[base..base + c];
                let target_cat = target.faces()[f][v][a] as usize;
                total += nll_from_logits(row, target_cat);
                count += 1;
            }
        }
    }
    Ok(CrossEntropy {
        total,
        per_coordinate: if count > 0 { total / count as f64 } else { 0.0 },
        coordinates: count,
    })
}

/// -log softmax(row)[target] computed via log-sum-exp.
fn nll_from_logits(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    lse - row[target]
}

/// Monte-Carlo estimate of the variational bound, in nats, summed over
/// unmasked coordinates: KL(q(x_T|x_0) ‖ uniform) + Σ_{t≥2} KL(q(x_{t-1}|x_t,x_0)
/// ‖ p(x_{t-1}|x_t)) - log p(x_0|x_1), with one x_t sample per timestep.
///
/// `forward` maps a noised soup and a timestep to per-coordinate logits of
/// shape capacity × 3 × 3 × C.
pub fn variational_bound<F>(
    forward: F,
    soup: &QuantizedTriangleSoup,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64, DiffusionError>
where
    F: Fn(&QuantizedTriangleSoup, usize) -> Result<Tensor, DiffusionError>,
{
    let c = soup.categories();
    let t_max = schedule.timesteps();
    let mut bound = 0.0;

    // Prior term, exact.
    let ab_t = schedule.alpha_bar(t_max);
    let uniform = 1.0 / c as f64;
    let prior_kl_per_coord = {
        // KL between the marginal at T and the uniform distribution. The
        // marginal has one heavy entry and C-1 equal light entries.
        let heavy = ab_t + (1.0 - ab_t) * uniform;
        let light = (1.0 - ab_t) * uniform;
        let mut kl = heavy * (heavy / uniform).ln();
        if light > 0.0 {
            kl += (c - 1) as f64 * light * (light / uniform).ln();
        }
        kl
    };
    bound += prior_kl_per_coord * soup.coordinate_count() as f64;

    // Denoising terms, one Monte-Carlo corruption per timestep.
    for t in 2..=t_max {
        let xt = sample_xt(soup, t, schedule, derive(seed, t as u64))?;
        let logits = forward(&xt, t)?;
        expect_logit_shape(&logits, soup)?;
        let data = logits.data();
        for f in 0..soup.capacity() {
            if !soup.mask()[f] {
                continue;
            }
            for v in 0..3 {
                for a in 0..3 {
                    let base = ((f * 3 + v) * 3 + a) * c;
                    let row = &data[base..base + c];
                    let xt_cat = xt.faces()[f][v][a];
                    let x0_cat = soup.faces()[f][v][a];
                    let q = posterior(xt_cat, x0_cat, t, schedule, c)?;
                    let p = reverse_step_distribution(xt_cat, row, t, schedule)?;
                    bound += kl_divergence(q.probs(), p.probs());
                }
            }
        }
    }

    // Reconstruction term from one corruption at t = 1.
    let x1 = sample_xt(soup, 1, schedule, derive(seed, 1))?;
    let logits = forward(&x1, 1)?;
    expect_logit_shape(&logits, soup)?;
    let data = logits.data();
    for f in 0..soup.capacity() {
        if !soup.mask()[f] {
            continue;
        }
        for v in 0..3 {
            for a in 0..3 {
                let base = ((f * 3 + v) * 3 + a) * c;
                let row = &data[base..base + c];
                let x0_cat = soup.faces()[f][v][a] as usize;
                bound += nll_from_logits(row, x0_cat);
            }
        }
    }

    Ok(bound)
}

fn expect_logit_shape(logits: &Tensor, soup: &QuantizedTriangleSoup) -> Result<(), DiffusionError> {
    let expected = [soup.capacity(), 3, 3, soup.categories()];
    if logits.dims() != expected {
        return Err(DiffusionError::BadArgument(format!(
            "model logits shape {:?}, expected {:?}",
            logits.dims(),
            expected
        )));
    }
    Ok(())
}

/// Σ p ln(p/q) with the 0·ln(0) = 0 convention.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi / qi).ln();
        }
    }
    kl
}

fn check_t(t: usize, schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
    if t == 0 || t > schedule.timesteps() {
        return Err(DiffusionError::BadArgument(format!(
            "timestep {t} outside [1, {}]",
            schedule.timesteps()
        )));
    }
    Ok(())
}

fn check_category(x: u16, categories: usize) -> Result<(), DiffusionError> {
    if (x as usize) >= categories {
        return Err(DiffusionError::BadArgument(format!(
            "category {x} out of range (C = {categories})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_schedule;
    use crate::soup::QuantizedTriangleSoup;

    /// Row-vector × matrix product oracle: Q̄_t accumulated by explicit
    /// multiplication of materialized one-step matrices.
    fn materialized_marginal(x0: u16, t: usize, schedule: &NoiseSchedule, c: usize) -> Vec<f64> {
        let mut row = vec![0.0; c];
        row[x0 as usize] = 1.0;
        for step in 1..=t {
            let q = TransitionSpec {
                beta: schedule.beta(step),
                categories: c,
            }
            .materialize();
            let mut next = vec![0.0; c];
            for (i, &ri) in row.iter().enumerate() {
                if ri == 0.0 {
                    continue;
                }
                for j in 0..c {
                    next[j] += ri * q[i][j];
                }
            }
            row = next;
        }
        row
    }

    /// Brute-force Bayes oracle over all values of x_{t-1}.
    fn bayes_posterior(xt: u16, x0: u16, t: usize, schedule: &NoiseSchedule, c: usize) -> Vec<f64> {
        let q_t = TransitionSpec {
            beta: schedule.beta(t),
            categories: c,
        }
        .materialize();
        let prev = materialized_marginal(x0, t - 1, schedule, c);
        let mut weights: Vec<f64> = (0..c).map(|i| q_t[i][xt as usize] * prev[i]).collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        weights
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let spec = TransitionSpec { beta: 0.3, categories: 7 };
        for row in spec.materialize() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn marginal_limits() {
        let sched = cosine_schedule(10, 0.008, 0.999).unwrap();
        let c = 4;
        // Early: close to one-hot; late: close to uniform.
        let early = q_marginal(2, 1, &sched, c).unwrap();
        assert!(early.probs()[2] > 0.9);
        let late = q_marginal(2, 10, &sched, c).unwrap();
        for &p in late.probs() {
            assert!((p - 0.25).abs() < 0.05);
        }
    }

    #[test]
    fn marginal_example_c4() {
        // C=4, keep probability 0.5, x0=2 -> (0.125, 0.125, 0.625, 0.125).
        let dist = marginal_with_keep(2, 0.5, 4);
        let expected = [0.125, 0.125, 0.625, 0.125];
        for (p, e) in dist.probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn marginal_matches_matrix_product_oracle() {
        for c in [2usize, 3, 8, 16] {
            let sched = cosine_schedule(50, 0.008, 0.999).unwrap();
            for t in 1..=50 {
                for x0 in 0..c as u16 {
                    let fast = q_marginal(x0, t, &sched, c).unwrap();
                    let slow = materialized_marginal(x0, t, &sched, c);
                    for (a, b) in fast.probs().iter().zip(&slow) {
                        assert!((a - b).abs() < 1e-10, "C={c} t={t} x0={x0}");
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_matches_bayes_enumeration() {
        let sched = cosine_schedule(40, 0.008, 0.999).unwrap();
        for c in [2usize, 4, 8] {
            for t in [2usize, 7, 23, 40] {
                for xt in 0..c as u16 {
                    for x0 in 0..c as u16 {
                        let fast = posterior(xt, x0, t, &sched, c).unwrap();
                        let slow = bayes_posterior(xt, x0, t, &sched, c);
                        for (a, b) in fast.probs().iter().zip(&slow) {
                            assert!((a - b).abs() < 1e-12, "C={c} t={t} xt={xt} x0={x0}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_at_t1_is_point_mass() {
        let sched = cosine_schedule(10, 0.008, 0.999).unwrap();
        let dist = posterior(3, 1, 1, &sched, 4).unwrap();
        assert_eq!(dist.probs(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_between_reduces_to_adjacent() {
        let sched = cosine_schedule(30, 0.008, 0.999).unwrap();
        for t in 2..=30 {
            let a = posterior(1, 3, t, &sched, 6).unwrap();
            let b = posterior_between(1, 3, t, t - 1, &sched, 6).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reverse_step_with_peaked_logits_equals_posterior() {
        let sched = cosine_schedule(20, 0.008, 0.999).unwrap();
        let c = 6;
        let x0 = 4u16;
        let xt = 1u16;
        let t = 9;
        let mut logits = vec![-100.0; c];
        logits[x0 as usize] = 100.0;
        let mixed = reverse_step_distribution(xt, &logits, t, &sched).unwrap();
        let exact = posterior(xt, x0, t, &sched, c).unwrap();
        for (a, b) in mixed.probs().iter().zip(exact.probs()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_step_matches_enumeration_oracle() {
        let sched = cosine_schedule(25, 0.008, 0.999).unwrap();
        let c = 4;
        let t = 11;
        let xt = 2u16;
        for logits in [vec![0.0; 4], vec![0.3, -1.2, 2.0, 0.7]] {
            let fast = reverse_step_distribution(xt, &logits, t, &sched).unwrap();
            // Brute-force: weight posteriors by softmax(logits).
            let w = softmax(&logits);
            let mut slow = vec![0.0; c];
            for x0 in 0..c as u16 {
                let post = posterior(xt, x0, t, &sched, c).unwrap();
                for i in 0..c {
                    slow[i] += w[x0 as usize] * post.probs()[i];
                }
            }
            let sum: f64 = slow.iter().sum();
            for s in &mut slow {
                *s /= sum;
            }
            for (a, b) in fast.probs().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reverse_step_sums_to_one_for_random_logits() {
        let sched = cosine_schedule(15, 0.008, 0.999).unwrap();
        let mut rng = crate::rng::Rng::new(77);
        for _ in 0..200 {
            let c = 2 + rng.next_below(30);
            let logits: Vec<f64> = (0..c).map(|_| rng.next_range(-8.0, 8.0)).collect();
            let t = 2 + rng.next_below(14);
            let xt = rng.next_below(c) as u16;
            let dist = reverse_step_distribution(xt, &logits, t, &sched).unwrap();
            let sum: f64 = dist.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_step_rejects_non_finite_logits() {
        let sched = cosine_schedule(10, 0.008, 0.999).unwrap();
        let logits = vec![0.0, f64::NAN, 1.0];
        assert!(reverse_step_distribution(0, &logits, 5, &sched).is_err());
    }

    fn toy_soup(faces: Vec<crate::soup::QuantFace>, bits: u8, capacity: usize) -> QuantizedTriangleSoup {
        QuantizedTriangleSoup::new(faces, bits, 0, capacity).unwrap()
    }

    #[test]
    fn sample_xt_is_deterministic_and_order_free() {
        let sched = cosine_schedule(50, 0.008, 0.999).unwrap();
        let soup = toy_soup(
            vec![[[1, 2, 3], [4, 5, 6], [7, 8, 9]], [[2, 2, 2], [3, 3, 3], [4, 4, 4]]],
            4,
            4,
        );
        let a = sample_xt(&soup, 25, &sched, 99).unwrap();
        let b = sample_xt(&soup, 25, &sched, 99).unwrap();
        assert_eq!(a, b);
        // Masked slots untouched.
        assert_eq!(a.faces()[2], [[0; 3]; 3]);
        assert_eq!(a.faces()[3], [[0; 3]; 3]);
    }

    #[test]
    fn sample_xt_keep_fraction_matches_alpha_bar() {
        // Find a t whose keep probability is mid-range, then check the
        // empirical keep fraction over many coordinates.
        let sched = cosine_schedule(100, 0.008, 0.999).unwrap();
        let t = (1..=100)
            .min_by(|&a, &b| {
                (sched.alpha_bar(a) - 0.7)
                    .abs()
                    .partial_cmp(&(sched.alpha_bar(b) - 0.7).abs())
                    .unwrap()
            })
            .unwrap();
        let keep = sched.alpha_bar(t);
        let c = 256usize;

        let n_faces = 2000usize; // 18k coordinates per soup
        let face: crate::soup::QuantFace = [[17, 33, 200], [5, 120, 9], [250, 64, 77]];
        let soup = QuantizedTriangleSoup::new(vec![face; n_faces], 8, 0, n_faces).unwrap();

        let mut same = 0usize;
        let mut total = 0usize;
        for trial in 0..56 {
            let noised = sample_xt(&soup, t, &sched, 1000 + trial).unwrap();
            for f in 0..n_faces {
                for v in 0..3 {
                    for a in 0..3 {
                        total += 1;
                        if noised.faces()[f][v][a] == soup.faces()[f][v][a] {
                            same += 1;
                        }
                    }
                }
            }
        }
        assert!(total > 1_000_000);
        let p = keep + (1.0 - keep) / c as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        let observed = same as f64 / total as f64;
        assert!(
            (observed - p).abs() < 3.0 * sigma,
            "observed {observed}, expected {p} ± {sigma}"
        );
    }

    #[test]
    fn sample_xt_at_terminal_time_is_nearly_uniform() {
        let sched = cosine_schedule(1000, 0.008, 0.999).unwrap();
        let c = 16usize;
        let n_faces = 1200usize;
        let face: crate::soup::QuantFace = [[3, 3, 3], [7, 7, 7], [11, 11, 11]];
        let soup = QuantizedTriangleSoup::new(vec![face; n_faces], 4, 0, n_faces).unwrap();
        let mut counts = vec![0usize; c];
        let mut total = 0usize;
        for trial in 0..100 {
            let noised = sample_xt(&soup, 1000, &sched, 400 + trial).unwrap();
            for f in 0..n_faces {
                for v in 0..3 {
                    for a in 0..3 {
                        counts[noised.faces()[f][v][a] as usize] += 1;
                        total += 1;
                    }
                }
            }
        }
        assert!(total >= 1_000_000);
        let expected = total as f64 / c as f64;
        let sigma = (total as f64 * (1.0 / c as f64) * (1.0 - 1.0 / c as f64)).sqrt();
        for (cat, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - expected).abs() < 3.0 * sigma + expected * 2e-3,
                "category {cat}: {n} vs {expected}"
            );
        }
    }

    #[test]
    fn chapman_kolmogorov_chi_squared() {
        // Sample x_t ~ marginal, x_{t-1} ~ posterior, then one forward step;
        // the result must be distributed like the x_t marginal again.
        let sched = cosine_schedule(30, 0.008, 0.999).unwrap();
        let c = 4usize;
        let t = 17;
        let x0 = 2u16;
        let trials = 100_000;
        let mut rng = Rng::new(2718);
        let marginal = q_marginal(x0, t, &sched, c).unwrap();
        let step = TransitionSpec {
            beta: sched.beta(t),
            categories: c,
        };
        let mut counts = vec![0usize; c];
        for _ in 0..trials {
            let xt = marginal.sample(&mut rng);
            let xprev = posterior(xt, x0, t, &sched, c).unwrap().sample(&mut rng);
            // One forward step from x_{t-1}.
            let next = if rng.next_f64() < 1.0 - step.beta {
                xprev
            } else {
                rng.next_below(c) as u16
            };
            counts[next as usize] += 1;
        }
        let mut chi2 = 0.0;
        for i in 0..c {
            let expected = marginal.probs()[i] * trials as f64;
            let diff = counts[i] as f64 - expected;
            chi2 += diff * diff / expected;
        }
        // 99.9th percentile of chi-squared with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn cross_entropy_uniform_prediction_is_log_c() {
        let face: crate::soup::QuantFace = [[0, 1, 2], [3, 4, 5], [6, 7, 8]];
        let soup = QuantizedTriangleSoup::new(vec![face], 8, 0, 2).unwrap();
        let logits = Tensor::zeros(&[2, 3, 3, 256]);
        let ce = cross_entropy_loss(&logits, &soup).unwrap();
        assert_eq!(ce.coordinates, 9);
        assert!((ce.per_coordinate - 256.0_f64.ln()).abs() < 1e-12);
        assert!((256.0_f64.ln() - 5.545).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_masking_is_linear() {
        let face: crate::soup::QuantFace = [[0, 1, 2], [3, 4, 5], [6, 7, 8]];
        let two = QuantizedTriangleSoup::new(vec![face, face], 4, 0, 2).unwrap();
        let one = QuantizedTriangleSoup::new(vec![face], 4, 0, 2).unwrap();
        let mut rng = Rng::new(5);
        let mut logits = Tensor::zeros(&[2, 3, 3, 16]);
        for x in logits.data_mut() {
            *x = rng.next_range(-2.0, 2.0);
        }
        // Identical logits in both face slots.
        let half: Vec<f64> = logits.data()[..9 * 16].to_vec();
        logits.data_mut()[9 * 16..].copy_from_slice(&half);
        let ce2 = cross_entropy_loss(&logits, &two).unwrap();
        let ce1 = cross_entropy_loss(&logits, &one).unwrap();
        assert!((ce2.total - 2.0 * ce1.total).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_peaked_logits_vanish() {
        let face: crate::soup::QuantFace = [[1, 2, 3], [4, 5, 6], [7, 8, 9]];
        let soup = QuantizedTriangleSoup::new(vec![face], 4, 0, 1).unwrap();
        let mut logits = Tensor::filled(&[1, 3, 3, 16], -50.0);
        for v in 0..3 {
            for a in 0..3 {
                let target = soup.faces()[0][v][a] as usize;
                let base = (v * 3 + a) * 16;
                logits.data_mut()[base + target] = 50.0;
            }
        }
        let ce = cross_entropy_loss(&logits, &soup).unwrap();
        assert!(ce.total < 1e-9);
    }

    #[test]
    fn variational_bound_prior_term_is_small_and_bound_nonnegative() {
        let sched = cosine_schedule(1000, 0.008, 0.999).unwrap();
        let c = 16usize;
        // TV between q(x_T|x_0) and uniform is alpha_bar_T (1 - 1/C).
        let tv = sched.alpha_bar(1000) * (1.0 - 1.0 / c as f64);
        assert!(tv < 1e-3);

        let face: crate::soup::QuantFace = [[1, 2, 3], [4, 5, 6], [7, 8, 9]];
        let soup = QuantizedTriangleSoup::new(vec![face], 4, 0, 1).unwrap();
        let small = cosine_schedule(8, 0.008, 0.999).unwrap();
        // A "model" that always predicts uniformly.
        let bound = variational_bound(
            |s, _t| Ok(Tensor::zeros(&[s.capacity(), 3, 3, 16])),
            &soup,
            &small,
            9,
        )
        .unwrap();
        assert!(bound >= 0.0);

        // Prior KL per coordinate at the full schedule is tiny.
        let ab = sched.alpha_bar(1000);
        let uniform = 1.0 / c as f64;
        let heavy = ab + (1.0 - ab) * uniform;
        let light = (1.0 - ab) * uniform;
        let kl = heavy * (heavy / uniform).ln() + (c - 1) as f64 * light * (light / uniform).ln();
        assert!(kl < 1e-4);
    }

    #[test]
    fn variational_bound_is_zero_for_the_exact_posterior_model() {
        // If the model's logits are a delta on the true x0, the denoising
        // KLs vanish and the reconstruction term goes to zero.
        let sched = cosine_schedule(6, 0.008, 0.999).unwrap();
        let face: crate::soup::QuantFace = [[1, 2, 3], [0, 1, 2], [3, 0, 1]];
        let soup = QuantizedTriangleSoup::new(vec![face], 2, 0, 1).unwrap();
        let truth = soup.clone();
        let bound = variational_bound(
            |s, _t| {
                let c = s.categories();
                let mut logits = Tensor::filled(&[s.capacity(), 3, 3, c], -300.0);
                for f in 0..s.capacity() {
                    for v in 0..3 {
                        for a in 0..3 {
                            let target = truth.faces()[f][v][a] as usize;
                            logits.data_mut()[((f * 3 + v) * 3 + a) * c + target] = 300.0;
                        }
                    }
                }
                Ok(logits)
            },
            &soup,
            &sched,
            4,
        )
        .unwrap();
        // Only the prior KL remains, which is small but nonzero for T = 6.
        let prior_only = {
            let c = 4.0;
            let ab = sched.alpha_bar(6);
            let uniform = 1.0 / c;
            let heavy = ab + (1.0 - ab) * uniform;
            let light = (1.0 - ab) * uniform;
            (heavy * (heavy / uniform).ln() + 3.0 * light * (light / uniform).ln()) * 9.0
        };
        assert!((bound - prior_only).abs() < 1e-6, "bound {bound} vs prior {prior_only}");
    }
}
