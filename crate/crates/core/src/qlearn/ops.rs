use alloc::vec::Vec;

use super::hyper::Hyperparams;
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::argmax;
use crate::rng::SeededRng;

/// ε-greedy: uniform with probability `epsilon`, else greedy (lowest index on ties).
///
/// Always consumes one uniform draw, plus one more when exploring.
pub fn select_action(q: &[f64], epsilon: f64, rng: &mut SeededRng) -> usize {
    if rng.uniform() < epsilon {
        rng.below(q.len())
    } else {
        argmax(q)
    }
}

/// Additive mixing `Q_tot = Σ_i Q_i`.
pub fn mix(chosen_qs: &[f64]) -> f64 {
    chosen_qs.iter().sum()
}

/// `y = r` if `done`, else `r + γ · max_next`.
pub fn td_target(r: f64, done: bool, max_next: f64, gamma: f64) -> f64 {
    if done {
        r
    } else {
        r + gamma * max_next
    }
}

/// Two-valued TD weight: 1 for underestimated joint values, `alpha` otherwise.
pub fn weighting(q_tot: f64, q_tot_target: f64, alpha: f64) -> f64 {
    if q_tot < q_tot_target {
        1.0
    } else {
        alpha
    }
}

/// Next penalty factor: the batch mean of the weights, clamped to `(0, 1]`.
///
/// Equal weights are summed as `count · value` groups, largest value first, so
/// a batch with `k` ones and `B − k` copies of `α` gives exactly
/// `(k + (B − k)·α) / B`.
pub fn update_alpha(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(arg_err("update_alpha needs a non-empty batch"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(arg_err("update_alpha: non-finite weight"));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        total += (j - i) as f64 * v;
        i = j;
    }
    let mean = total / weights.len() as f64;
    Ok(mean.clamp(f64::MIN_POSITIVE, 1.0))
}

/// `A_f = Q(u_f) − Σ_a π_f(a)·Q(a)` from the critic's row over the elected agent's actions.
///
/// Evaluated as `Σ_a π_f(a)·(Q(u_f) − Q(a))`, which vanishes exactly for a
/// constant critic.
pub fn advantage_from_q(critic_q: &[f64], taken: usize, pi_f: &[f64]) -> Result<f64> {
    if critic_q.len() != pi_f.len() || taken >= critic_q.len() {
        return Err(dim_err("counterfactual_advantage", &[critic_q.len()], &[pi_f.len(), taken]));
    }
    let taken_q = critic_q[taken];
    Ok(critic_q.iter().zip(pi_f).map(|(q, p)| p * (taken_q - q)).sum())
}

/// Linear ε schedule from `eps_start` to `eps_end` over `eps_anneal_steps`, then flat.
pub fn epsilon_at(env_step: u64, hp: &Hyperparams) -> f64 {
    let frac = env_step.min(hp.eps_anneal_steps) as f64 / hp.eps_anneal_steps as f64;
    hp.eps_start - (hp.eps_start - hp.eps_end) * frac
}

/// Row-wise maxima.
pub(crate) fn row_max(values: &[f64], cols: usize) -> Vec<f64> {
    values
        .chunks(cols)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}
