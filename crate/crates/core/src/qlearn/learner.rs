use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::critic::{critic_input, critic_input_dim, CentralCritic};
use super::hyper::Hyperparams;
use super::ops::{advantage_from_q, mix, row_max, select_action, td_target, update_alpha, weighting};
use super::qnet::AgentQNet;
use super::replay::Episode;
use crate::efa::{Efa, EfaConfig, EfaParams, ElectionWeights, EncoderState};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{argmax, gumbel_soft, rmsprop_step, softmax, Graph, Module, Parameter, Tensor, Var};
use crate::rng::SeededRng;

/// Training arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Variant {
    /// Weighted TD, dynamic α, counterfactual regularizer, learned election.
    EfaDqn,
    /// α ≡ 1 and no regularizer; election still learned.
    EfaNaive,
    /// Plain VDN with agent 0 as the fixed formal first-mover.
    Vdn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::EfaDqn, Variant::EfaNaive, Variant::Vdn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EfaDqn => "efa-dqn",
            Variant::EfaNaive => "efa-naive",
            Variant::Vdn => "vdn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| arg_err(alloc::format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LearnerConfig {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub variant: Variant,
    pub hp: Hyperparams,
    /// Replaces elections with a constant choice of this agent.
    pub fixed_election: Option<usize>,
    /// Keeps the regularizer gradient out of the election network.
    pub stop_grad_election: bool,
}

impl LearnerConfig {
    pub fn new(n_agents: usize, obs_dim: usize, n_actions: usize, variant: Variant, hp: Hyperparams) -> Self {
        Self {
            n_agents,
            obs_dim,
            n_actions,
            variant,
            hp,
            fixed_election: None,
            stop_grad_election: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.n_agents == 0 || self.obs_dim == 0 || self.n_actions == 0 {
            return Err(arg_err("agents, observation width and actions must be positive"));
        }
        if self.fixed_election.is_some_and(|f| f >= self.n_agents) {
            return Err(arg_err("fixed_election: agent index out of range"));
        }
        if self.election().is_none() && self.n_agents < 2 {
            return Err(arg_err("n_agents: a learned election needs at least two agents"));
        }
        Ok(())
    }

    /// The constant elected agent, if elections are disabled.
    pub fn election(&self) -> Option<usize> {
        match self.variant {
            Variant::Vdn => Some(self.fixed_election.unwrap_or(0)),
            _ => self.fixed_election,
        }
    }

    pub fn lambda_cf(&self) -> f64 {
        match self.variant {
            Variant::EfaDqn => self.hp.lambda_cf,
            _ => 0.0,
        }
    }

    pub fn initial_alpha(&self) -> f64 {
        match self.variant {
            Variant::EfaDqn => self.hp.alpha0,
            _ => 1.0,
        }
    }

    pub fn dynamic_alpha(&self) -> bool {
        self.variant == Variant::EfaDqn
    }

    pub fn uses_critic(&self) -> bool {
        self.variant == Variant::EfaDqn
    }

    pub fn efa_config(&self) -> EfaConfig {
        EfaConfig {
            obs_dim: self.obs_dim,
            n_actions: self.n_actions,
            hidden: self.hp.hidden,
            heads: self.hp.heads,
            key_dim: self.hp.key_dim,
            beta: self.hp.beta,
            hold_k: self.hp.hold_k,
        }
    }
}

/// Seeds for parameter initialisation, one stream per network family.
pub struct InitRngs<'a> {
    pub qnets: &'a mut SeededRng,
    pub efa: &'a mut SeededRng,
    pub critic: &'a mut SeededRng,
}

/// Parameters updated by the main loss: per-agent Q-networks, then the election network.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Nets {
    pub qnets: Vec<AgentQNet>,
    pub efa: Option<Efa>,
}

impl Nets {
    fn qnet_vars<'a>(&self, vars: &'a [Var], i: usize) -> &'a [Var] {
        let p = self.qnets[0].parameters().len();
        &vars[i * p..(i + 1) * p]
    }

    fn efa_vars<'a>(&self, vars: &'a [Var]) -> &'a [Var] {
        let p = self.qnets[0].parameters().len();
        &vars[self.qnets.len() * p..]
    }
}

impl Module for Nets {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = self.qnets.iter().flat_map(|q| q.parameters()).collect();
        if let Some(e) = &self.efa {
            p.extend(e.params.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> = self.qnets.iter_mut().flat_map(|q| q.parameters_mut()).collect();
        if let Some(e) = &mut self.efa {
            p.extend(e.params.parameters_mut());
        }
        p
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    pub optimizer_steps: u64,
    pub target_syncs: u64,
}

/// Constant inputs of one update, built from a batch of episodes with the
/// target networks and the critic.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// `[t][i]`: `[B, obs_dim]`.
    pub obs: Vec<Vec<Tensor>>,
    /// `[t][i][b]`.
    pub actions: Vec<Vec<Vec<usize>>>,
    /// `[t]`: `[B, 1]` TD targets.
    pub y: Vec<Tensor>,
    /// `[t][b]`: `Q̂_tot` at the taken joint action.
    pub qtot_target: Vec<Vec<f64>>,
    /// `[t][b]`.
    pub elected: Vec<Vec<usize>>,
    /// `[t]`: `[B, n]` recorded one-hot elections and their Gumbel noise.
    pub hard: Vec<Tensor>,
    pub noise: Vec<Tensor>,
    pub election_step: Vec<bool>,
    /// `[t]`: `[B·n, obs_dim + |A|]` encoder inputs; empty unless the election is replayed.
    pub enc_inputs: Vec<Tensor>,
    /// `[t]`: `[B, |A|]` online-critic values; empty unless the regularizer is active.
    pub critic_q: Vec<Tensor>,
}

/// Quantities held constant under differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    /// `[t][b]` TD weights.
    pub weights: Vec<Vec<f64>>,
    /// `[t][i][b]` greedy actions of the online Q-networks.
    pub greedy: Vec<Vec<Vec<usize>>>,
    /// `[t][b]` counterfactual advantages (empty without the regularizer).
    pub advantage: Vec<Vec<f64>>,
}

pub struct LossParts {
    pub total: Var,
    pub td: Var,
    pub cf: Option<Var>,
    pub detached: Detached,
}

/// Knobs of the weighted loss.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub alpha: f64,
    pub lambda_cf: f64,
    pub beta: f64,
    /// Rebuild the election on the graph from stored noise.
    pub replay_election: bool,
    /// Feed the soft election forward instead of the straight-through one-hot.
    /// The regularizer is linear in the election weights, so both give the
    /// same election-network gradient; only the relaxed loss is smooth enough
    /// for finite differences.
    pub relaxed_election: bool,
}

/// Online Q-values over the batch: `[t][i]` vars of shape `[B, |A|]`.
fn online_q(nets: &Nets, g: &mut Graph, vars: &[Var], batch: &Batch) -> Result<Vec<Vec<Var>>> {
    let mut out = vec![Vec::with_capacity(batch.n_agents); batch.steps];
    for (i, net) in nets.qnets.iter().enumerate() {
        let v = nets.qnet_vars(vars, i);
        let mut h = g.input(net.initial_hidden(batch.size))?;
        for t in 0..batch.steps {
            let x = g.input(batch.obs[t][i].clone())?;
            let (q, h2) = net.forward(g, v, x, h)?;
            out[t].push(q);
            h = h2;
        }
    }
    Ok(out)
}

/// `Σ_i Q_i(o_i, u_i)` as a `[B, 1]` var.
fn chosen_total(g: &mut Graph, qs: &[Var], actions: &[Vec<usize>]) -> Result<Var> {
    let mut total = g.gather(qs[0], &actions[0])?;
    for (q, a) in qs.iter().zip(actions).skip(1) {
        let c = g.gather(*q, a)?;
        total = g.add(total, c)?;
    }
    Ok(total)
}

fn column(values: &[f64]) -> Result<Tensor> {
    Tensor::matrix(values.len(), 1, values.to_vec())
}

/// Plain VDN loss `Σ (y − Q_tot)²`.
pub fn vdn_loss(nets: &Nets, g: &mut Graph, vars: &[Var], batch: &Batch) -> Result<Var> {
    let q = online_q(nets, g, vars, batch)?;
    let mut total: Option<Var> = None;
    for t in 0..batch.steps {
        let qtot = chosen_total(g, &q[t], &batch.actions[t])?;
        let y = g.input(batch.y[t].clone())?;
        let d = g.sub(y, qtot)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    total.ok_or_else(|| arg_err("empty batch"))
}

/// Weighted TD loss plus the counterfactual regularizer.
///
/// `L = Σ w·(y − Q_tot)² + λ·Σ A_f · log π_f(greedy_f)`, where `π_f` is the
/// softmax of the elected agent's Q-values and the election enters through
/// [`Graph::weighted_select`]. Pass `detached` to pin the piecewise-constant
/// quantities (weights, greedy actions, advantages); otherwise they are read
/// off this forward pass.
pub fn batch_loss(
    nets: &Nets,
    g: &mut Graph,
    vars: &[Var],
    batch: &Batch,
    s: &LossSettings,
    detached: Option<&Detached>,
) -> Result<LossParts> {
    let (bsz, n) = (batch.size, batch.n_agents);
    let q = online_q(nets, g, vars, batch)?;
    let with_cf = s.lambda_cf != 0.0;
    if with_cf && batch.critic_q.len() != batch.steps {
        return Err(arg_err("regularizer needs critic values in the batch"));
    }

    let mut qtots = Vec::with_capacity(batch.steps);
    for t in 0..batch.steps {
        qtots.push(chosen_total(g, &q[t], &batch.actions[t])?);
    }

    let det = match detached {
        Some(d) => d.clone(),
        None => {
            let mut weights = Vec::with_capacity(batch.steps);
            let mut greedy = Vec::with_capacity(batch.steps);
            let mut advantage = Vec::new();
            for t in 0..batch.steps {
                let qt = g.value(qtots[t]).data();
                weights.push(
                    (0..bsz)
                        .map(|b| weighting(qt[b], batch.qtot_target[t][b], s.alpha))
                        .collect::<Vec<_>>(),
                );
                let gr: Vec<Vec<usize>> = q[t]
                    .iter()
                    .map(|&v| {
                        let val = g.value(v);
                        (0..bsz).map(|b| argmax(val.row(b))).collect()
                    })
                    .collect();
                greedy.push(gr);
                if with_cf {
                    let mut row = Vec::with_capacity(bsz);
                    for b in 0..bsz {
                        let f = batch.elected[t][b];
                        let pi = softmax(&Tensor::vector(g.value(q[t][f]).row(b).to_vec()))?;
                        let taken = batch.actions[t][f][b];
                        row.push(advantage_from_q(batch.critic_q[t].row(b), taken, pi.data())?);
                    }
                    advantage.push(row);
                }
            }
            Detached {
                weights,
                greedy,
                advantage,
            }
        }
    };

    let mut td: Option<Var> = None;
    for t in 0..batch.steps {
        let y = g.input(batch.y[t].clone())?;
        let d = g.sub(y, qtots[t])?;
        let sq = g.square(d)?;
        let w = g.input(column(&det.weights[t])?)?;
        let wsq = g.mul(w, sq)?;
        let s = g.sum(wsq)?;
        td = Some(match td {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let td = td.ok_or_else(|| arg_err("empty batch"))?;
    if !with_cf {
        return Ok(LossParts {
            total: td,
            td,
            cf: None,
            detached: det,
        });
    }

    let elections = if s.replay_election {
        let efa = nets
            .efa
            .as_ref()
            .map(|e| &e.params)
            .ok_or_else(|| arg_err("election replay needs an election network"))?;
        Some(replay_elections(efa, nets.efa_vars(vars), g, batch, s.beta, s.relaxed_election)?)
    } else {
        None
    };

    let mut cf: Option<Var> = None;
    for t in 0..batch.steps {
        let mut picks = Vec::with_capacity(n);
        for i in 0..n {
            let lp = g.log_softmax(q[t][i])?;
            picks.push(g.gather(lp, &det.greedy[t][i])?);
        }
        let w = match &elections {
            Some(e) => e[t],
            None => g.input(batch.hard[t].clone())?,
        };
        let log_pi = g.weighted_select(w, &picks)?;
        let a = g.input(column(&det.advantage[t])?)?;
        let term = g.mul(a, log_pi)?;
        let s = g.sum(term)?;
        cf = Some(match cf {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let cf = cf.ok_or_else(|| arg_err("empty batch"))?;
    let scaled = g.scale(cf, s.lambda_cf)?;
    let total = g.add(td, scaled)?;
    Ok(LossParts {
        total,
        td,
        cf: Some(cf),
        detached: det,
    })
}

/// Straight-through election weights `[B, n]` per step, rebuilt from the stored
/// Gumbel noise and recorded one-hot vectors. Hold steps reuse the var of the
/// election that produced them.
fn replay_elections(
    efa: &EfaParams,
    vars: &[Var],
    g: &mut Graph,
    batch: &Batch,
    beta: f64,
    relaxed: bool,
) -> Result<Vec<Var>> {
    let n = batch.n_agents;
    if batch.enc_inputs.len() != batch.steps {
        return Err(arg_err("election replay needs encoder inputs in the batch"));
    }
    if !batch.election_step.first().copied().unwrap_or(false) {
        return Err(arg_err("the first step of an episode must be an election step"));
    }
    let last = batch.election_step.iter().rposition(|&e| e).unwrap_or(0);
    let mut h = g.input(Tensor::zeros(&[batch.size * n, efa.encoder_gru.d_h()]))?;
    let mut out: Vec<Var> = Vec::with_capacity(batch.steps);
    for t in 0..batch.steps {
        if t <= last {
            let x = g.input(batch.enc_inputs[t].clone())?;
            h = efa.encode_graph(g, vars, x, h)?;
        }
        if batch.election_step[t] {
            let m = efa.aggregate_graph(g, vars, h, n)?;
            let logits = efa.logits_graph(g, vars, m, n)?;
            let soft = gumbel_soft(g, logits, &batch.noise[t], beta)?;
            out.push(if relaxed {
                soft
            } else {
                g.straight_through(soft, batch.hard[t].clone())?
            });
        } else {
            let prev = out[t - 1];
            out.push(prev);
        }
    }
    Ok(out)
}

/// Per-update statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStats {
    pub loss: f64,
    pub td_loss: f64,
    pub cf_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    /// α used for this update's weights.
    pub alpha: f64,
    pub synced: bool,
}

/// Per-episode acting state: recurrent hiddens, encoder state and the held election.
#[derive(Clone, Debug)]
pub struct ActState {
    pub q_hidden: Vec<Tensor>,
    pub encoder: Option<EncoderState>,
    pub election: Option<ElectionWeights>,
    pub last_actions: Vec<Option<usize>>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub actions: Vec<usize>,
    pub election: ElectionWeights,
    pub election_step: bool,
    pub q_values: Vec<Vec<f64>>,
}

/// Full learner state for one team.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Learner {
    pub cfg: LearnerConfig,
    pub nets: Nets,
    pub target_qnets: Vec<AgentQNet>,
    pub critic: Option<CentralCritic>,
    pub target_critic: Option<CentralCritic>,
    pub alpha: f64,
    pub counters: Counters,
}

impl Learner {
    pub fn new(cfg: LearnerConfig, rngs: InitRngs<'_>) -> Result<Self> {
        cfg.validate()?;
        let hp = &cfg.hp;
        let qnets: Vec<AgentQNet> = (0..cfg.n_agents)
            .map(|_| AgentQNet::new(cfg.obs_dim, hp.hidden, cfg.n_actions, rngs.qnets))
            .collect();
        let efa = match cfg.election() {
            Some(_) => None,
            None => Some(Efa::new(cfg.efa_config(), rngs.efa)?),
        };
        let critic = cfg.uses_critic().then(|| {
            CentralCritic::new(
                critic_input_dim(cfg.n_agents, cfg.obs_dim, cfg.n_actions),
                hp.hidden,
                cfg.n_actions,
                rngs.critic,
            )
        });
        Ok(Self {
            alpha: cfg.initial_alpha(),
            target_qnets: qnets.clone(),
            target_critic: critic.clone(),
            critic,
            nets: Nets { qnets, efa },
            cfg,
            counters: Counters::default(),
        })
    }

    fn replays_election(&self) -> bool {
        self.nets.efa.is_some() && self.cfg.lambda_cf() != 0.0 && !self.cfg.stop_grad_election
    }

    pub fn begin_episode(&self) -> ActState {
        let n = self.cfg.n_agents;
        ActState {
            q_hidden: self.nets.qnets.iter().map(|q| q.initial_hidden(1)).collect(),
            encoder: self.nets.efa.as_ref().map(|_| EncoderState::zeros(n, self.cfg.hp.hidden)),
            election: None,
            last_actions: vec![None; n],
            t: 0,
        }
    }

    /// One acting step: election, then ε-greedy actions for the first-mover
    /// followed by the other agents in index order.
    pub fn act(
        &self,
        state: &mut ActState,
        obs: &[Vec<f64>],
        epsilon: f64,
        election_rng: &mut SeededRng,
        explore_rng: &mut SeededRng,
    ) -> Result<Decision> {
        let n = self.cfg.n_agents;
        if obs.len() != n {
            return Err(dim_err("act", &[n], &[obs.len()]));
        }
        let election_step = state.election.is_none() || state.t % self.cfg.hp.hold_k == 0;
        let election = match (self.cfg.election(), &self.nets.efa) {
            (Some(f), _) => {
                let mut w = ElectionWeights::fixed(n, f);
                w.age = state.t % self.cfg.hp.hold_k;
                w
            }
            (None, Some(efa)) => {
                let enc = state.encoder.as_mut().ok_or_else(|| arg_err("missing encoder state"))?;
                efa.elect(obs, &state.last_actions, state.t, state.election.as_ref(), enc, election_rng)?
            }
            (None, None) => return Err(arg_err("learned election without an election network")),
        };
        let mut q_values = Vec::with_capacity(n);
        for (i, net) in self.nets.qnets.iter().enumerate() {
            let (q, h) = net.q_values(&obs[i], &state.q_hidden[i])?;
            state.q_hidden[i] = h;
            q_values.push(q);
        }
        let mut actions = vec![0; n];
        let f = election.elected;
        actions[f] = select_action(&q_values[f], epsilon, explore_rng);
        for i in (0..n).filter(|&i| i != f) {
            actions[i] = select_action(&q_values[i], epsilon, explore_rng);
        }
        state.last_actions = actions.iter().map(|&a| Some(a)).collect();
        state.election = Some(election.clone());
        state.t += 1;
        Ok(Decision {
            actions,
            election,
            election_step,
            q_values,
        })
    }

    /// The election network with its configuration, if elections are learned.
    pub fn efa_network(&self) -> Option<&Efa> {
        self.nets.efa.as_ref()
    }

    /// Builds the constant part of an update from complete episodes of equal length.
    pub fn prepare(&self, episodes: &[&Episode]) -> Result<Batch> {
        let (n, na) = (self.cfg.n_agents, self.cfg.n_actions);
        let bsz = episodes.len();
        let steps = episodes.first().map_or(0, |e| e.len());
        if bsz == 0 || steps == 0 {
            return Err(arg_err("empty batch"));
        }
        for e in episodes {
            if e.len() != steps || !e.is_complete() {
                return Err(arg_err("batch episodes must be complete and of equal length"));
            }
            let tr = &e.transitions[0];
            if tr.obs.len() != n || tr.actions.len() != n || tr.election.len() != n {
                return Err(dim_err("prepare", &[n], &[tr.obs.len(), tr.actions.len(), tr.election.len()]));
            }
        }
        let stack = |f: &dyn Fn(&Episode) -> &[f64]| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = episodes.iter().map(|e| f(e).to_vec()).collect();
            Tensor::from_rows(&rows)
        };

        let mut obs = Vec::with_capacity(steps + 1);
        let mut actions = Vec::with_capacity(steps);
        let mut elected = Vec::with_capacity(steps);
        let mut hard = Vec::with_capacity(steps);
        let mut noise = Vec::with_capacity(steps);
        let mut election_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut per_agent = Vec::with_capacity(n);
            for i in 0..n {
                per_agent.push(stack(&|e| &e.transitions[t].obs[i])?);
            }
            obs.push(per_agent);
            actions.push(
                (0..n)
                    .map(|i| episodes.iter().map(|e| e.transitions[t].actions[i]).collect())
                    .collect::<Vec<Vec<usize>>>(),
            );
            elected.push(episodes.iter().map(|e| e.transitions[t].elected).collect::<Vec<_>>());
            hard.push(stack(&|e| &e.transitions[t].election)?);
            noise.push(stack(&|e| &e.transitions[t].election_noise)?);
            let es = episodes[0].transitions[t].election_step;
            if episodes.iter().any(|e| e.transitions[t].election_step != es) {
                return Err(arg_err("election steps differ across the batch"));
            }
            election_step.push(es);
        }
        let mut final_obs = Vec::with_capacity(n);
        for i in 0..n {
            final_obs.push(stack(&|e| &e.transitions[steps - 1].next_obs[i])?);
        }
        obs.push(final_obs);

        // Target Q-values over t = 0..=T.
        let mut qhat: Vec<Vec<Tensor>> = vec![Vec::with_capacity(n); steps + 1];
        for (i, net) in self.target_qnets.iter().enumerate() {
            let mut g = Graph::new();
            let vars = g.bind_frozen(net)?;
            let mut h = g.input(net.initial_hidden(bsz))?;
            for (t, o) in obs.iter().enumerate() {
                let x = g.input(o[i].clone())?;
                let (q, h2) = net.forward(&mut g, &vars, x, h)?;
                qhat[t].push(g.value(q).clone());
                h = h2;
            }
        }
        let gamma = self.cfg.hp.gamma;
        let mut y = Vec::with_capacity(steps);
        let mut qtot_target = Vec::with_capacity(steps);
        for t in 0..steps {
            let maxes: Vec<Vec<f64>> = qhat[t + 1].iter().map(|q| row_max(q.data(), na)).collect();
            let mut yt = Vec::with_capacity(bsz);
            let mut qt = Vec::with_capacity(bsz);
            for (b, e) in episodes.iter().enumerate() {
                let tr = &e.transitions[t];
                let max_next = mix(&maxes.iter().map(|m| m[b]).collect::<Vec<_>>());
                yt.push(td_target(tr.reward, tr.done, max_next, gamma));
                let chosen: Vec<f64> = (0..n).map(|i| qhat[t][i].at(b, tr.actions[i])).collect();
                qt.push(mix(&chosen));
            }
            y.push(column(&yt)?);
            qtot_target.push(qt);
        }
        obs.truncate(steps);

        let mut enc_inputs = Vec::new();
        if self.replays_election() {
            for t in 0..steps {
                let mut rows = Vec::with_capacity(bsz * n);
                for e in episodes {
                    for i in 0..n {
                        let mut r = e.transitions[t].obs[i].clone();
                        let last = (t > 0).then(|| e.transitions[t - 1].actions[i]);
                        r.extend(crate::efa::one_hot(last, na));
                        rows.push(r);
                    }
                }
                enc_inputs.push(Tensor::from_rows(&rows)?);
            }
        }

        let mut critic_q = Vec::new();
        if let (Some(c), true) = (&self.critic, self.cfg.lambda_cf() != 0.0) {
            let x = critic_inputs(episodes, na)?;
            let all = c.q_values(&x)?;
            for t in 0..steps {
                critic_q.push(Tensor::matrix(bsz, na, all.data()[t * bsz * na..(t + 1) * bsz * na].to_vec())?);
            }
        }

        Ok(Batch {
            size: bsz,
            steps,
            n_agents: n,
            n_actions: na,
            obs,
            actions,
            y,
            qtot_target,
            elected,
            hard,
            noise,
            election_step,
            enc_inputs,
            critic_q,
        })
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            alpha: self.alpha,
            lambda_cf: self.cfg.lambda_cf(),
            beta: self.cfg.hp.beta,
            replay_election: self.replays_election(),
            relaxed_election: false,
        }
    }

    /// One optimizer step on a batch of episodes, followed by the α update,
    /// the critic update and (when due) the target sync.
    pub fn train(&mut self, episodes: &[&Episode]) -> Result<TrainStats> {
        let batch = self.prepare(episodes)?;
        let settings = self.loss_settings();
        let mut g = Graph::new();
        let vars = g.bind(&self.nets)?;
        let (loss, td, cf, weights) = if self.cfg.variant == Variant::Vdn {
            let l = vdn_loss(&self.nets, &mut g, &vars, &batch)?;
            (l, l, None, None)
        } else {
            let p = batch_loss(&self.nets, &mut g, &vars, &batch, &settings, None)?;
            (p.total, p.td, p.cf, Some(p.detached.weights))
        };
        let stats_loss = g.value(loss).item()?;
        let td_loss = g.value(td).item()?;
        let cf_loss = cf.map(|c| g.value(c).item()).transpose()?;
        g.backward(loss)?;
        g.accumulate(&mut self.nets, &vars);
        drop(g);
        rmsprop_step(&mut self.nets, self.cfg.hp.lr, self.cfg.hp.rms_decay);

        if self.cfg.dynamic_alpha() {
            if let Some(w) = weights {
                let flat: Vec<f64> = w.into_iter().flatten().collect();
                self.alpha = update_alpha(&flat)?;
            }
        }
        let critic_loss = if self.critic.is_some() {
            Some(self.critic_update(episodes)?)
        } else {
            None
        };
        self.counters.optimizer_steps += 1;
        let synced = self.sync_targets();
        Ok(TrainStats {
            loss: stats_loss,
            td_loss,
            cf_loss,
            critic_loss,
            alpha: settings.alpha,
            synced,
        })
    }

    /// Regression targets `r + γ·Q̂_ω(s', u')[a'_f]` for every `(t, b)`, `t`-major.
    pub fn critic_targets(&self, episodes: &[&Episode]) -> Result<Vec<f64>> {
        let target = self.target_critic.as_ref().ok_or_else(|| arg_err("this learner has no critic"))?;
        let bsz = episodes.len();
        let steps = episodes.first().map_or(0, |e| e.len());
        let next = target.q_values(&critic_inputs(episodes, self.cfg.n_actions)?)?;
        let mut targets = Vec::with_capacity(steps * bsz);
        for t in 0..steps {
            for (b, e) in episodes.iter().enumerate() {
                let tr = &e.transitions[t];
                let last = tr.done || t + 1 == steps;
                let boot = if last {
                    0.0
                } else {
                    let nt = &episodes[b].transitions[t + 1];
                    next.at((t + 1) * bsz + b, nt.actions[nt.elected])
                };
                targets.push(td_target(tr.reward, last, boot, self.cfg.hp.gamma));
            }
        }
        Ok(targets)
    }

    /// Mean squared critic error on a batch, before any update.
    pub fn critic_loss(&self, episodes: &[&Episode]) -> Result<f64> {
        let critic = self.critic.as_ref().ok_or_else(|| arg_err("this learner has no critic"))?;
        let targets = self.critic_targets(episodes)?;
        let q = critic.q_values(&critic_inputs(episodes, self.cfg.n_actions)?)?;
        let taken = taken_by_first_mover(episodes);
        let se: f64 = targets
            .iter()
            .zip(&taken)
            .enumerate()
            .map(|(r, (y, &a))| (y - q.at(r, a)) * (y - q.at(r, a)))
            .sum();
        Ok(se / targets.len() as f64)
    }

    /// One RMSProp step of 1-step TD regression for the critic; returns the
    /// mean squared error before the step.
    pub fn critic_update(&mut self, episodes: &[&Episode]) -> Result<f64> {
        let targets = self.critic_targets(episodes)?;
        let taken = taken_by_first_mover(episodes);
        let x = critic_inputs(episodes, self.cfg.n_actions)?;
        let (lr, decay) = (self.cfg.hp.lr, self.cfg.hp.rms_decay);
        let critic = self.critic.as_mut().ok_or_else(|| arg_err("this learner has no critic"))?;
        let mut g = Graph::new();
        let vars = g.bind(&*critic)?;
        let xv = g.input(x)?;
        let q = critic.forward(&mut g, &vars, xv)?;
        let picked = g.gather(q, &taken)?;
        let tv = g.input(column(&targets)?)?;
        let d = g.sub(tv, picked)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        let loss = g.scale(s, 1.0 / targets.len() as f64)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        g.accumulate(critic, &vars);
        rmsprop_step(critic, lr, decay);
        Ok(value)
    }

    /// Online Q-values `[t][i]` (`[B, |A|]`) replayed from episode start.
    pub fn replay_q_values(&self, batch: &Batch) -> Result<Vec<Vec<Tensor>>> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.nets)?;
        let q = online_q(&self.nets, &mut g, &vars, batch)?;
        Ok(q.iter().map(|row| row.iter().map(|v| g.value(*v).clone()).collect()).collect())
    }

    /// Copies online parameters into the targets when the optimizer step count
    /// is a multiple of the target period.
    pub fn sync_targets(&mut self) -> bool {
        if self.counters.optimizer_steps % self.cfg.hp.target_period != 0 {
            return false;
        }
        for (t, o) in self.target_qnets.iter_mut().zip(&self.nets.qnets) {
            t.copy_values_from(o);
        }
        if let (Some(t), Some(o)) = (self.target_critic.as_mut(), self.critic.as_ref()) {
            t.copy_values_from(o);
        }
        self.counters.target_syncs += 1;
        true
    }
}

fn taken_by_first_mover(episodes: &[&Episode]) -> Vec<usize> {
    let steps = episodes.first().map_or(0, |e| e.len());
    let mut out = Vec::with_capacity(steps * episodes.len());
    for t in 0..steps {
        for e in episodes {
            let tr = &e.transitions[t];
            out.push(tr.actions[tr.elected]);
        }
    }
    out
}

/// Critic input rows for every `(t, b)`, `t`-major: `[T·B, in_dim]`.
fn critic_inputs(episodes: &[&Episode], n_actions: usize) -> Result<Tensor> {
    let steps = episodes.first().map_or(0, |e| e.len());
    let mut rows = Vec::with_capacity(steps * episodes.len());
    for t in 0..steps {
        for e in episodes {
            let tr = &e.transitions[t];
            let state: Vec<f64> = tr.obs.iter().flatten().copied().collect();
            rows.push(critic_input(&state, &tr.actions, tr.elected, n_actions)?);
        }
    }
    Tensor::from_rows(&rows)
}

impl fmt::Display for Counters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episodes={} env_steps={} optimizer_steps={} target_syncs={}",
            self.episodes, self.env_steps, self.optimizer_steps, self.target_syncs
        )
    }
}
