use crate::error::{arg_err, Result};

/// Learner hyperparameters with the standard defaults.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hyperparams {
    pub gamma: f64,
    pub lr: f64,
    pub rms_decay: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    /// Episodes per mini-batch; also the warm-up threshold.
    pub batch_episodes: usize,
    /// Optimizer steps between target-network syncs.
    pub target_period: u64,
    pub hold_k: usize,
    /// Weight of the counterfactual regularizer.
    pub lambda_cf: f64,
    /// Initial penalty factor of the weighted TD operator.
    pub alpha0: f64,
    pub hidden: usize,
    pub heads: usize,
    pub key_dim: usize,
    /// Gumbel-Softmax inverse temperature.
    pub beta: f64,
    pub buffer_capacity: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 5e-4,
            rms_decay: 0.99,
            eps_start: 0.2,
            eps_end: 0.05,
            eps_anneal_steps: 50_000,
            batch_episodes: 30,
            target_period: 200,
            hold_k: 5,
            lambda_cf: 0.1,
            alpha0: 0.5,
            hidden: 64,
            heads: 4,
            key_dim: 16,
            beta: 1.0,
            buffer_capacity: 2000,
        }
    }
}

impl Hyperparams {
    /// Checks ranges; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, rule: &str| {
            if ok {
                Ok(())
            } else {
                Err(arg_err(alloc::format!("{field}: must be {rule}")))
            }
        };
        check(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "in (0, 1]")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "positive")?;
        check(self.rms_decay >= 0.0 && self.rms_decay < 1.0, "rms_decay", "in [0, 1)")?;
        check((0.0..=1.0).contains(&self.eps_start), "eps_start", "in [0, 1]")?;
        check((0.0..=1.0).contains(&self.eps_end), "eps_end", "in [0, 1]")?;
        check(self.eps_end <= self.eps_start, "eps_end", "at most eps_start")?;
        check(self.eps_anneal_steps > 0, "eps_anneal_steps", "positive")?;
        check(self.batch_episodes > 0, "batch_episodes", "positive")?;
        check(self.target_period > 0, "target_period", "positive")?;
        check(self.hold_k > 0, "hold_k", "positive")?;
        check(self.lambda_cf >= 0.0 && self.lambda_cf.is_finite(), "lambda_cf", "non-negative")?;
        check(self.alpha0 > 0.0 && self.alpha0 <= 1.0, "alpha0", "in (0, 1]")?;
        check(self.hidden > 0, "hidden", "positive")?;
        check(self.heads > 0 && self.hidden % self.heads == 0, "heads", "a divisor of hidden")?;
        check(self.key_dim > 0, "key_dim", "positive")?;
        check(self.beta > 0.0 && self.beta.is_finite(), "beta", "positive")?;
        check(self.buffer_capacity >= self.batch_episodes, "buffer_capacity", "at least batch_episodes")?;
        Ok(())
    }
}
