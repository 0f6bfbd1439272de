//! Gumbel-Softmax relaxation of categorical sampling.
//!
//! `soft_i = softmax_i(β · (g_i + log π_i))` with `g_i ~ Gumbel(0, 1)` and
//! `π = softmax(logits)`. The hard sample is the one-hot argmax of `soft`; in a
//! graph it is wired through [`Graph::straight_through`], so the forward pass
//! sees the one-hot vector while gradients flow through the soft relaxation.

use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::{argmax, Tensor};
use crate::error::{arg_err, dim_err, Result};
use crate::rng::SeededRng;

pub fn sample_gumbel(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gumbel()).collect();
    Tensor::new(shape, data).expect("shape")
}

/// One-hot of the row-wise argmax (lowest index on ties).
pub fn one_hot_argmax(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = Tensor::zeros(t.shape());
    for r in 0..t.rows() {
        let j = argmax(t.row(r));
        out.data_mut()[r * c + j] = 1.0;
    }
    out
}

/// Soft relaxation on the graph for fixed noise.
pub fn gumbel_soft(g: &mut Graph, logits: Var, noise: &Tensor, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(arg_err("inverse temperature must be positive"));
    }
    if noise.shape() != g.value(logits).shape() {
        return Err(dim_err("gumbel_soft", g.value(logits).shape(), noise.shape()));
    }
    let log_pi = g.log_softmax(logits)?;
    let nv = g.input(noise.clone())?;
    let perturbed = g.add(log_pi, nv)?;
    let scaled = g.scale(perturbed, beta)?;
    g.softmax(scaled)
}

/// `(soft, hard)` for given noise; rows are independent categorical draws.
pub fn gumbel_softmax_with_noise(logits: &Tensor, noise: &Tensor, beta: f64) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let l = g.input(logits.clone())?;
    let soft = gumbel_soft(&mut g, l, noise, beta)?;
    let soft = g.value(soft).clone();
    let hard = one_hot_argmax(&soft);
    Ok((soft, hard))
}

/// Draws fresh Gumbel noise and returns `(soft, hard)`.
pub fn gumbel_softmax(logits: &Tensor, beta: f64, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
    if !(beta > 0.0) {
        return Err(arg_err("inverse temperature must be positive"));
    }
    if logits.is_empty() {
        return Err(arg_err("gumbel_softmax of an empty vector"));
    }
    let noise = sample_gumbel(logits.shape(), rng);
    gumbel_softmax_with_noise(logits, &noise, beta)
}

/// Index of the `1` in each row of a one-hot matrix.
pub fn hot_indices(hard: &Tensor) -> Vec<usize> {
    (0..hard.rows()).map(|r| argmax(hard.row(r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_category_is_always_selected() {
        let mut rng = SeededRng::new(5, 0);
        for _ in 0..20 {
            let (soft, hard) = gumbel_softmax(&Tensor::vector(vec![-3.0]), 1.0, &mut rng).unwrap();
            assert_eq!(soft.data(), &[1.0]);
            assert_eq!(hard.data(), &[1.0]);
        }
    }

    #[test]
    fn non_positive_beta_is_rejected() {
        let mut rng = SeededRng::new(5, 0);
        assert!(gumbel_softmax(&Tensor::vector(vec![0.0, 1.0]), 0.0, &mut rng).is_err());
        assert!(gumbel_softmax(&Tensor::vector(vec![0.0, 1.0]), -1.0, &mut rng).is_err());
    }

    #[test]
    fn sharp_beta_hard_frequency_is_the_categorical_probability() {
        // The hard sample is argmax(g + log π) for every β > 0, so sharpening
        // only affects `soft`; index 0 is drawn with probability e^5 / (e^5 + 2).
        let mut rng = SeededRng::new(8, 0);
        let logits = Tensor::vector(vec![5.0, 0.0, 0.0]);
        let mut hits = 0;
        let mut soft_mass = 0.0;
        for _ in 0..10_000 {
            let (soft, hard) = gumbel_softmax(&logits, 50.0, &mut rng).unwrap();
            hits += (hard.data()[0] == 1.0) as usize;
            soft_mass += soft.data()[0];
        }
        let p0 = 5f64.exp() / (5f64.exp() + 2.0);
        assert!((hits as f64 / 1e4 - p0).abs() < 0.005, "{hits}");
        // At β = 50 the relaxation is nearly one-hot.
        assert!((soft_mass - hits as f64).abs() / 1e4 < 0.005);
    }

    #[test]
    fn logit_shift_leaves_soft_unchanged() {
        let noise = Tensor::vector(vec![0.3, -1.2, 0.8]);
        let (a, ha) = gumbel_softmax_with_noise(&Tensor::vector(vec![0.5, 1.0, -2.0]), &noise, 1.0).unwrap();
        let (b, hb) = gumbel_softmax_with_noise(&Tensor::vector(vec![10.5, 11.0, 8.0]), &noise, 1.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert_eq!(ha, hb);
    }
}
