//! First-mover election.
//!
//! Each agent's observation and previous action are encoded by a shared
//! FC → ReLU → GRU encoder, mixed across the fully connected agent graph by
//! multi-head attention, and scored by a shared single-layer weight generator.
//! A Gumbel-Softmax draw over the scores elects one agent, which is then held
//! for `K` steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{
    gumbel_soft, one_hot_argmax, sample_gumbel, softmax, Graph, Gru, Linear, Module, MultiHeadAggregator,
    Parameter, Tensor, Var,
};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EfaConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub beta: f64,
    pub hold_k: usize,
}

impl EfaConfig {
    pub fn new(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            n_actions,
            hidden: 64,
            heads: 4,
            key_dim: 16,
            beta: 1.0,
            hold_k: 5,
        }
    }
}

/// Encoder, aggregator and weight-generator parameters, shared by all agents.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EfaParams {
    pub encoder_fc: Linear,
    pub encoder_gru: Gru,
    pub aggregator: MultiHeadAggregator,
    pub generator: Linear,
}

impl EfaParams {
    pub fn new(cfg: &EfaConfig, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            encoder_fc: Linear::new(cfg.obs_dim + cfg.n_actions, d, rng),
            encoder_gru: Gru::new(d, d, rng),
            aggregator: MultiHeadAggregator::new(d, cfg.heads, cfg.key_dim, rng)?,
            generator: Linear::new(d, 1, rng),
        })
    }

    /// All-zero parameters (useful for closed-form checks).
    pub fn zeros(cfg: &EfaConfig) -> Result<Self> {
        let mut p = Self::new(cfg, &mut SeededRng::new(0, 0))?;
        for q in p.parameters_mut() {
            q.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    fn split<'a>(&self, vars: &'a [Var]) -> (&'a [Var], &'a [Var], &'a [Var], &'a [Var]) {
        let a = Linear::PARAMS;
        let b = a + Gru::PARAMS;
        let c = b + self.aggregator.parameters().len();
        (&vars[..a], &vars[a..b], &vars[b..c], &vars[c..])
    }

    /// One encoder step: `x: [R, obs_dim + n_actions]`, `h: [R, hidden]`.
    pub fn encode_graph(&self, g: &mut Graph, vars: &[Var], x: Var, h: Var) -> Result<Var> {
        let (fc, gru, _, _) = self.split(vars);
        let e = self.encoder_fc.forward(g, fc, x)?;
        let e = g.relu(e)?;
        self.encoder_gru.step(g, gru, e, h)
    }

    /// `h: [B·n, hidden]` → aggregated features of the same shape.
    pub fn aggregate_graph(&self, g: &mut Graph, vars: &[Var], h: Var, n_agents: usize) -> Result<Var> {
        let (_, _, agg, _) = self.split(vars);
        self.aggregator.forward(g, agg, h, n_agents)
    }

    /// Aggregated features `[B·n, hidden]` → election logits `[B, n]`.
    pub fn logits_graph(&self, g: &mut Graph, vars: &[Var], m: Var, n_agents: usize) -> Result<Var> {
        let (_, _, _, gen) = self.split(vars);
        let rows = g.value(m).rows();
        let l = self.generator.forward(g, gen, m)?;
        g.reshape(l, &[rows / n_agents, n_agents])
    }
}

impl Module for EfaParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.encoder_fc.parameters();
        p.extend(self.encoder_gru.parameters());
        p.extend(self.aggregator.parameters());
        p.extend(self.generator.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder_fc.parameters_mut();
        p.extend(self.encoder_gru.parameters_mut());
        p.extend(self.aggregator.parameters_mut());
        p.extend(self.generator.parameters_mut());
        p
    }
}

/// Per-agent GRU hidden state of the message encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub hidden: Tensor,
}

impl EncoderState {
    pub fn zeros(n_agents: usize, hidden: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[n_agents, hidden]),
        }
    }
}

/// Outcome of an election, held for `K` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectionWeights {
    /// One-hot over agents.
    pub hard: Vec<f64>,
    /// Gumbel-Softmax relaxation; sums to one.
    pub soft: Vec<f64>,
    pub elected: usize,
    /// Steps since the election that produced these weights.
    pub age: usize,
    /// Raw generator scores.
    pub logits: Vec<f64>,
    /// Gumbel noise used for the draw, kept so replay can rebuild `soft`.
    pub noise: Vec<f64>,
}

impl ElectionWeights {
    /// A constant election of `agent` (no learning signal).
    pub fn fixed(n_agents: usize, agent: usize) -> Self {
        let mut hard = vec![0.0; n_agents];
        hard[agent] = 1.0;
        Self {
            soft: hard.clone(),
            hard,
            elected: agent,
            age: 0,
            logits: vec![0.0; n_agents],
            noise: vec![0.0; n_agents],
        }
    }
}

/// One-hot of `action` over `n_actions`, or zeros for "no previous action".
pub fn one_hot(action: Option<usize>, n_actions: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_actions];
    if let Some(a) = action {
        v[a] = 1.0;
    }
    v
}

/// The election network plus its configuration.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Efa {
    pub cfg: EfaConfig,
    pub params: EfaParams,
}

impl Efa {
    pub fn new(cfg: EfaConfig, rng: &mut SeededRng) -> Result<Self> {
        let params = EfaParams::new(&cfg, rng)?;
        Ok(Self { cfg, params })
    }

    pub fn initial_state(&self, n_agents: usize) -> EncoderState {
        EncoderState::zeros(n_agents, self.cfg.hidden)
    }

    /// Encoder input rows `concat(o_i, onehot(u_{t-1}^i))`.
    pub fn encoder_input(&self, obs: &[Vec<f64>], last_actions: &[Option<usize>]) -> Result<Tensor> {
        if obs.len() != last_actions.len() {
            return Err(dim_err("encode", &[obs.len()], &[last_actions.len()]));
        }
        let rows: Vec<Vec<f64>> = obs
            .iter()
            .zip(last_actions)
            .map(|(o, a)| {
                let mut r = o.clone();
                r.extend(one_hot(*a, self.cfg.n_actions));
                r
            })
            .collect();
        let t = Tensor::from_rows(&rows)?;
        if t.cols() != self.cfg.obs_dim + self.cfg.n_actions {
            return Err(dim_err("encode", t.shape(), &[self.cfg.obs_dim + self.cfg.n_actions]));
        }
        Ok(t)
    }

    /// Message encoder: returns `H: [n, hidden]` and the advanced state.
    pub fn encode(
        &self,
        obs: &[Vec<f64>],
        last_actions: &[Option<usize>],
        state: &EncoderState,
    ) -> Result<(Tensor, EncoderState)> {
        let x = self.encoder_input(obs, last_actions)?;
        if state.hidden.rows() != obs.len() {
            return Err(dim_err("encode state", state.hidden.shape(), &[obs.len()]));
        }
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params)?;
        let xv = g.input(x)?;
        let hv = g.input(state.hidden.clone())?;
        let h = self.params.encode_graph(&mut g, &vars, xv, hv)?;
        let h = g.value(h).clone();
        Ok((h.clone(), EncoderState { hidden: h }))
    }

    /// Message aggregator over the fully connected graph of the `n` rows of `h`.
    pub fn aggregate(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params)?;
        let hv = g.input(h.clone())?;
        let m = self.params.aggregate_graph(&mut g, &vars, hv, h.rows())?;
        Ok(g.value(m).clone())
    }

    /// Weight generator: scores each row of `m` and draws an election.
    pub fn generate(&self, m: &Tensor, beta: f64, rng: &mut SeededRng) -> Result<ElectionWeights> {
        if !(beta > 0.0) {
            return Err(arg_err("inverse temperature must be positive"));
        }
        let n = m.rows();
        let noise = sample_gumbel(&[1, n], rng);
        self.generate_with_noise(m, beta, noise)
    }

    pub fn generate_with_noise(&self, m: &Tensor, beta: f64, noise: Tensor) -> Result<ElectionWeights> {
        let n = m.rows();
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params)?;
        let mv = g.input(m.clone())?;
        let logits = self.params.logits_graph(&mut g, &vars, mv, n)?;
        let soft = gumbel_soft(&mut g, logits, &noise, beta)?;
        let soft = g.value(soft).clone();
        let hard = one_hot_argmax(&soft);
        let elected = crate::numerics::argmax(hard.data());
        Ok(ElectionWeights {
            hard: hard.into_data(),
            soft: soft.into_data(),
            elected,
            age: 0,
            logits: g.value(logits).data().to_vec(),
            noise: noise.into_data(),
        })
    }

    /// Election probabilities `softmax(logits)` for the current messages (no noise).
    pub fn election_probabilities(&self, m: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params)?;
        let mv = g.input(m.clone())?;
        let logits = self.params.logits_graph(&mut g, &vars, mv, m.rows())?;
        Ok(softmax(g.value(logits))?.into_data())
    }

    /// Election with a `K`-step hold. The encoder state advances every step;
    /// aggregation and the Gumbel draw run only when `t % K == 0` or there is
    /// no previous election.
    pub fn elect(
        &self,
        obs: &[Vec<f64>],
        last_actions: &[Option<usize>],
        t: usize,
        prev: Option<&ElectionWeights>,
        state: &mut EncoderState,
        rng: &mut SeededRng,
    ) -> Result<ElectionWeights> {
        let (h, next) = self.encode(obs, last_actions, state)?;
        *state = next;
        match prev {
            Some(p) if t % self.cfg.hold_k != 0 => {
                let mut w = p.clone();
                w.age += 1;
                Ok(w)
            }
            _ => {
                let m = self.aggregate(&h)?;
                self.generate(&m, self.cfg.beta, rng)
            }
        }
    }
}

/// `W · o`: the observation of the elected agent.
pub fn first_move_observation(obs: &[Vec<f64>], w: &ElectionWeights) -> Result<Vec<f64>> {
    if obs.len() != w.hard.len() || obs.is_empty() {
        return Err(dim_err("first_move_observation", &[obs.len()], &[w.hard.len()]));
    }
    let mut out = vec![0.0; obs[0].len()];
    for (o, &wi) in obs.iter().zip(&w.hard) {
        if o.len() != out.len() {
            return Err(dim_err("first_move_observation", &[out.len()], &[o.len()]));
        }
        for (y, x) in out.iter_mut().zip(o) {
            *y += wi * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EfaConfig {
        EfaConfig {
            obs_dim: 3,
            n_actions: 5,
            hidden: 8,
            heads: 2,
            key_dim: 3,
            beta: 1.0,
            hold_k: 5,
        }
    }

    fn obs(n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).collect()
    }

    #[test]
    fn zero_parameters_halve_previous_hidden() {
        let cfg = small_cfg();
        let efa = Efa {
            params: EfaParams::zeros(&cfg).unwrap(),
            cfg,
        };
        let mut rng = SeededRng::new(1, 0);
        let hidden = Tensor::from_rows(&[vec![2.0; 8], vec![-4.0; 8]]).unwrap();
        let (h, _) = efa
            .encode(&obs(2, &mut rng), &[Some(1), None], &EncoderState { hidden })
            .unwrap();
        assert_eq!(h.row(0), &[1.0; 8]);
        assert_eq!(h.row(1), &[-2.0; 8]);
    }

    #[test]
    fn identical_agents_encode_identically() {
        let mut rng = SeededRng::new(2, 0);
        let efa = Efa::new(small_cfg(), &mut rng).unwrap();
        let o = obs(1, &mut rng).remove(0);
        let (h, _) = efa
            .encode(&[o.clone(), o.clone(), o], &[Some(2); 3], &efa.initial_state(3))
            .unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(h.row(1), h.row(2));
    }

    #[test]
    fn single_agent_is_always_elected() {
        let mut rng = SeededRng::new(3, 0);
        let efa = Efa::new(small_cfg(), &mut rng).unwrap();
        let mut state = efa.initial_state(1);
        let w = efa.elect(&obs(1, &mut rng), &[None], 0, None, &mut state, &mut rng).unwrap();
        assert_eq!((w.elected, w.hard.as_slice()), (0, &[1.0][..]));
    }

    #[test]
    fn single_agent_bypass_is_relu() {
        let mut rng = SeededRng::new(3, 0);
        let efa = Efa::new(small_cfg(), &mut rng).unwrap();
        let h = Tensor::from_rows(&[vec![1.0, -1.0, 0.5, -0.5, 2.0, -2.0, 0.0, 3.0]]).unwrap();
        let m = efa.aggregate(&h).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.5, 0.0, 2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn hold_keeps_previous_winner_and_ages_it() {
        let mut rng = SeededRng::new(4, 0);
        let efa = Efa::new(small_cfg(), &mut rng).unwrap();
        let mut state = efa.initial_state(3);
        let mut prev = ElectionWeights::fixed(3, 2);
        prev.age = 2;
        let w = efa
            .elect(&obs(3, &mut rng), &[None; 3], 3, Some(&prev), &mut state, &mut rng)
            .unwrap();
        assert_eq!((w.elected, w.age), (2, 3));
        assert_ne!(state.hidden, Tensor::zeros(&[3, 8]), "encoder advances on hold steps");
    }

    #[test]
    fn first_move_observation_selects_the_hot_row() {
        let o = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let w = ElectionWeights::fixed(3, 1);
        assert_eq!(first_move_observation(&o, &w).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn generate_logit_shift_invariance() {
        let mut rng = SeededRng::new(5, 0);
        let mut efa = Efa::new(small_cfg(), &mut rng).unwrap();
        let m = Tensor::from_rows(&[vec![0.1; 8], vec![0.7; 8], vec![-0.3; 8]]).unwrap();
        let noise = Tensor::matrix(1, 3, vec![0.2, -0.4, 1.1]).unwrap();
        let a = efa.generate_with_noise(&m, 1.0, noise.clone()).unwrap();
        efa.params.generator.bias.value.data_mut()[0] += 7.5;
        let b = efa.generate_with_noise(&m, 1.0, noise).unwrap();
        assert_eq!(a.elected, b.elected);
        for (x, y) in a.soft.iter().zip(&b.soft) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
