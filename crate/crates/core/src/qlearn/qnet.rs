use alloc::vec::Vec;

use crate::error::Result;
use crate::numerics::{Graph, Gru, Linear, Module, Parameter, Tensor, Var};
use crate::rng::SeededRng;

/// Recurrent per-agent utility network: FC → ReLU → GRU → FC.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AgentQNet {
    pub fc_in: Linear,
    pub gru: Gru,
    pub fc_out: Linear,
}

impl AgentQNet {
    pub fn new(obs_dim: usize, hidden: usize, n_actions: usize, rng: &mut SeededRng) -> Self {
        Self {
            fc_in: Linear::new(obs_dim, hidden, rng),
            gru: Gru::new(hidden, hidden, rng),
            fc_out: Linear::new(hidden, n_actions, rng),
        }
    }

    pub fn zeros(obs_dim: usize, hidden: usize, n_actions: usize) -> Self {
        Self {
            fc_in: Linear::zeros(obs_dim, hidden),
            gru: Gru::zeros(hidden, hidden),
            fc_out: Linear::zeros(hidden, n_actions),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gru.d_h()
    }

    pub fn n_actions(&self) -> usize {
        self.fc_out.n_out()
    }

    pub fn obs_dim(&self) -> usize {
        self.fc_in.n_in()
    }

    pub fn initial_hidden(&self, rows: usize) -> Tensor {
        Tensor::zeros(&[rows, self.hidden()])
    }

    /// `x: [B, obs_dim]`, `h: [B, hidden]` → `(q: [B, |A|], h')`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, h: Var) -> Result<(Var, Var)> {
        let a = Linear::PARAMS;
        let b = a + Gru::PARAMS;
        let e = self.fc_in.forward(g, &vars[..a], x)?;
        let e = g.relu(e)?;
        let h = self.gru.step(g, &vars[a..b], e, h)?;
        let q = self.fc_out.forward(g, &vars[b..], h)?;
        Ok((q, h))
    }

    /// Q-values for a single observation; advances `hidden` (`[1, hidden]`).
    pub fn q_values(&self, obs: &[f64], hidden: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(self)?;
        let x = g.input(Tensor::matrix(1, obs.len(), obs.to_vec())?)?;
        let h = g.input(hidden.clone())?;
        let (q, h) = self.forward(&mut g, &vars, x, h)?;
        Ok((g.value(q).data().to_vec(), g.value(h).clone()))
    }
}

impl Module for AgentQNet {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.fc_in.parameters();
        p.extend(self.gru.parameters());
        p.extend(self.fc_out.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.fc_in.parameters_mut();
        p.extend(self.gru.parameters_mut());
        p.extend(self.fc_out.parameters_mut());
        p
    }
}
