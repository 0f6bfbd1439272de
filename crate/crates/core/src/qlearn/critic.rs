use alloc::vec::Vec;

use super::ops::advantage_from_q;
use crate::efa::one_hot;
use crate::error::{dim_err, Result};
use crate::numerics::{Graph, Linear, Module, Parameter, Tensor, Var};
use crate::rng::SeededRng;

/// Centralized critic `Q_ω(s, u)` over the elected agent's actions.
///
/// Input is the concatenation of every agent's observation, one-hot actions of
/// the non-elected agents (in agent order) and the one-hot elected index.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CentralCritic {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

pub fn critic_input_dim(n_agents: usize, obs_dim: usize, n_actions: usize) -> usize {
    n_agents * obs_dim + (n_agents - 1) * n_actions + n_agents
}

/// Critic input row from the concatenated observations (`state`).
pub fn critic_input(state: &[f64], joint_action: &[usize], elected: usize, n_actions: usize) -> Result<Vec<f64>> {
    let n = joint_action.len();
    if elected >= n || joint_action.iter().any(|&a| a >= n_actions) {
        return Err(dim_err("critic_input", &[n, n_actions], &[elected]));
    }
    let mut x = state.to_vec();
    for (i, &a) in joint_action.iter().enumerate() {
        if i != elected {
            x.extend(one_hot(Some(a), n_actions));
        }
    }
    x.extend(one_hot(Some(elected), n));
    Ok(x)
}

impl CentralCritic {
    pub fn new(in_dim: usize, hidden: usize, n_actions: usize, rng: &mut SeededRng) -> Self {
        Self {
            l1: Linear::new(in_dim, hidden, rng),
            l2: Linear::new(hidden, hidden, rng),
            l3: Linear::new(hidden, n_actions, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.n_in()
    }

    pub fn n_actions(&self) -> usize {
        self.l3.n_out()
    }

    /// `x: [R, in_dim]` → `[R, |A|]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let p = Linear::PARAMS;
        let h = self.l1.forward(g, &vars[..p], x)?;
        let h = g.relu(h)?;
        let h = self.l2.forward(g, &vars[p..2 * p], h)?;
        let h = g.relu(h)?;
        self.l3.forward(g, &vars[2 * p..], h)
    }

    pub fn q_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(self)?;
        let xv = g.input(x.clone())?;
        let q = self.forward(&mut g, &vars, xv)?;
        Ok(g.value(q).clone())
    }

    /// Counterfactual advantage of the elected agent's taken action under `pi_f`.
    pub fn counterfactual_advantage(
        &self,
        state: &[f64],
        joint_action: &[usize],
        elected: usize,
        pi_f: &[f64],
    ) -> Result<f64> {
        let x = critic_input(state, joint_action, elected, self.n_actions())?;
        if x.len() != self.in_dim() {
            return Err(dim_err("counterfactual_advantage", &[self.in_dim()], &[x.len()]));
        }
        let q = self.q_values(&Tensor::matrix(1, x.len(), x)?)?;
        advantage_from_q(q.data(), joint_action[elected], pi_f)
    }
}

impl Module for CentralCritic {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.l1.parameters();
        p.extend(self.l2.parameters());
        p.extend(self.l3.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.l1.parameters_mut();
        p.extend(self.l2.parameters_mut());
        p.extend(self.l3.parameters_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn input_layout() {
        let x = critic_input(&[0.5, 0.25], &[1, 2], 1, 3).unwrap();
        assert_eq!(x, vec![0.5, 0.25, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.len(), critic_input_dim(2, 1, 3));
    }

    #[test]
    fn constant_critic_has_zero_advantage() {
        let mut rng = SeededRng::new(1, 1);
        let mut c = CentralCritic::new(critic_input_dim(2, 2, 3), 4, 3, &mut rng);
        for p in c.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        c.l3.parameters_mut()[1].value.data_mut().iter_mut().for_each(|v| *v = 1.7);
        let a = c.counterfactual_advantage(&[0.1, 0.2, 0.3, 0.4], &[0, 2], 0, &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(a, 0.0);
    }
}
