//! The episode loop: elect, act, step the world, store, learn.
//!
//! A [`Session`] owns the environment, the team learner (and in Physical
//! Deception a separately trained adversary), the replay buffers and every
//! random stream of one run.

use alloc::vec;
use alloc::vec::Vec;

use crate::envs::{DiscreteAction, ParticleEnv, Scenario, Vec2, WorldConfig, WorldState};
use crate::error::{arg_err, Result};
use crate::qlearn::{
    epsilon_at, ActState, Episode, Hyperparams, InitRngs, Learner, LearnerConfig, ReplayBuffer, TrainStats,
    Transition, Variant,
};
use crate::rng::{stream, SeededRng};

/// Run-level switches beyond the hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionOptions {
    pub fixed_election: Option<usize>,
    pub stop_grad_election: bool,
    /// When false, episodes are collected but no update ever runs.
    pub learn: bool,
    /// Constant exploration rate in place of the annealed schedule.
    pub epsilon_override: Option<f64>,
    /// Keep a per-step log of every episode.
    pub record_trajectory: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            fixed_election: None,
            stop_grad_election: false,
            learn: true,
            epsilon_override: None,
            record_trajectory: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SessionRngs {
    pub env: SeededRng,
    pub election: SeededRng,
    pub exploration: SeededRng,
    pub replay: SeededRng,
    pub adv_exploration: SeededRng,
    pub adv_replay: SeededRng,
}

impl SessionRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            env: SeededRng::new(seed, stream::ENV),
            election: SeededRng::new(seed, stream::ELECTION),
            exploration: SeededRng::new(seed, stream::EXPLORATION),
            replay: SeededRng::new(seed, stream::REPLAY),
            adv_exploration: SeededRng::new(seed, stream::ADV_EXPLORATION),
            adv_replay: SeededRng::new(seed, stream::ADV_REPLAY),
        }
    }
}

/// One environment step of the trajectory log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub t: usize,
    pub agent_pos: Vec<Vec2>,
    pub landmark_pos: Vec<Vec2>,
    pub actions: Vec<usize>,
    pub elected: usize,
    pub election_step: bool,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeReport {
    /// Zero-based episode index.
    pub episode: u64,
    pub reward: f64,
    pub adversary_reward: Option<f64>,
    /// Exploration rate at the first step of the episode.
    pub epsilon: f64,
    /// Elected index at every step.
    pub elected: Vec<usize>,
    /// Steps at which a fresh election ran.
    pub election_steps: Vec<usize>,
    pub train: Option<TrainStats>,
    pub adversary_train: Option<TrainStats>,
    pub trajectory: Vec<StepLog>,
}

impl EpisodeReport {
    /// How often each agent was elected during the episode.
    pub fn elected_counts(&self, n_agents: usize) -> Vec<u64> {
        let mut c = vec![0; n_agents];
        for &e in &self.elected {
            c[e] += 1;
        }
        c
    }
}

/// Learners and their initial-parameter streams for a run.
pub fn build_learners(
    env: &ParticleEnv,
    variant: Variant,
    hp: &Hyperparams,
    opts: &SessionOptions,
    seed: u64,
) -> Result<(Learner, Option<Learner>)> {
    let n_actions = DiscreteAction::COUNT;
    let mut cfg = LearnerConfig::new(env.n_agents(), env.obs_dim(), n_actions, variant, hp.clone());
    cfg.fixed_election = opts.fixed_election;
    cfg.stop_grad_election = opts.stop_grad_election;
    let team = Learner::new(
        cfg,
        InitRngs {
            qnets: &mut SeededRng::new(seed, stream::INIT_QNET),
            efa: &mut SeededRng::new(seed, stream::INIT_EFA),
            critic: &mut SeededRng::new(seed, stream::INIT_CRITIC),
        },
    )?;
    let adversary = match env.adversary_obs_dim() {
        Some(d) => {
            let mut adv_rng = SeededRng::new(seed, stream::ADV_INIT);
            let cfg = LearnerConfig::new(1, d, n_actions, Variant::Vdn, hp.clone());
            Some(Learner::new(
                cfg,
                InitRngs {
                    qnets: &mut adv_rng.clone(),
                    efa: &mut adv_rng.clone(),
                    critic: &mut adv_rng,
                },
            )?)
        }
        None => None,
    };
    Ok((team, adversary))
}

pub struct Session {
    pub env: ParticleEnv,
    pub team: Learner,
    pub adversary: Option<Learner>,
    pub team_replay: ReplayBuffer,
    pub adversary_replay: Option<ReplayBuffer>,
    pub rngs: SessionRngs,
    pub opts: SessionOptions,
}

fn features(env: &ParticleEnv) -> Vec<Vec<f64>> {
    env.observations().iter().map(|o| o.features()).collect()
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: Scenario,
        n_agents: usize,
        world: WorldConfig,
        variant: Variant,
        hp: Hyperparams,
        opts: SessionOptions,
        seed: u64,
    ) -> Result<Self> {
        if let Some(e) = opts.epsilon_override {
            if !(0.0..=1.0).contains(&e) {
                return Err(arg_err("epsilon override must lie in [0, 1]"));
            }
        }
        let env = ParticleEnv::new(scenario, n_agents, world)?;
        let (team, adversary) = build_learners(&env, variant, &hp, &opts, seed)?;
        Ok(Self {
            team_replay: ReplayBuffer::new(hp.buffer_capacity)?,
            adversary_replay: adversary.as_ref().map(|_| ReplayBuffer::new(hp.buffer_capacity)).transpose()?,
            env,
            team,
            adversary,
            rngs: SessionRngs::new(seed),
            opts,
        })
    }

    fn epsilon(&self, learner: &Learner) -> f64 {
        self.opts
            .epsilon_override
            .unwrap_or_else(|| epsilon_at(learner.counters.env_steps, &learner.cfg.hp))
    }

    /// Plays one episode, stores it, and runs one update once past warm-up.
    pub fn run_episode(&mut self) -> Result<EpisodeReport> {
        let n = self.env.n_agents();
        self.env.reset(&mut self.rngs.env);
        let mut obs = features(&self.env);
        let mut team_state = self.team.begin_episode();
        let mut adv_state: Option<ActState> = self.adversary.as_ref().map(|a| a.begin_episode());
        let mut team_ep = Episode::default();
        let mut adv_ep = Episode::default();
        let epsilon = self.epsilon(&self.team);
        let mut report = EpisodeReport {
            episode: self.team.counters.episodes,
            reward: 0.0,
            adversary_reward: self.adversary.as_ref().map(|_| 0.0),
            epsilon,
            elected: Vec::new(),
            election_steps: Vec::new(),
            train: None,
            adversary_train: None,
            trajectory: Vec::new(),
        };
        loop {
            let t = self.env.state().t;
            let eps = self.epsilon(&self.team);
            let d = self.team.act(
                &mut team_state,
                &obs[..n],
                eps,
                &mut self.rngs.election,
                &mut self.rngs.exploration,
            )?;
            let mut joint = d.actions.clone();
            if let (Some(adv), Some(st)) = (&self.adversary, adv_state.as_mut()) {
                let eps = self.epsilon(adv);
                let a = adv.act(st, &obs[n..], eps, &mut self.rngs.election, &mut self.rngs.adv_exploration)?;
                joint.push(a.actions[0]);
            }
            let actions: Vec<DiscreteAction> =
                joint.iter().map(|&a| DiscreteAction::from_index(a)).collect::<Result<_>>()?;
            let step = self.env.step(&actions)?;
            let next: Vec<Vec<f64>> = step.observations.iter().map(|o| o.features()).collect();
            report.reward += step.reward.team;
            report.elected.push(d.election.elected);
            if d.election_step {
                report.election_steps.push(t);
            }
            if self.opts.record_trajectory {
                let s: &WorldState = self.env.state();
                report.trajectory.push(StepLog {
                    t,
                    agent_pos: s.agent_pos.clone(),
                    landmark_pos: s.landmark_pos.clone(),
                    actions: joint.clone(),
                    elected: d.election.elected,
                    election_step: d.election_step,
                    reward: step.reward.team,
                });
            }
            team_ep.transitions.push(Transition {
                obs: obs[..n].to_vec(),
                actions: d.actions.clone(),
                reward: step.reward.team,
                next_obs: next[..n].to_vec(),
                done: step.done,
                election: d.election.hard.clone(),
                elected: d.election.elected,
                election_noise: d.election.noise.clone(),
                election_step: d.election_step,
            });
            self.team.counters.env_steps += 1;
            if let (Some(adv), Some(r)) = (self.adversary.as_mut(), step.reward.adversary) {
                *report.adversary_reward.as_mut().expect("adversary reward") += r;
                adv_ep.transitions.push(Transition {
                    obs: obs[n..].to_vec(),
                    actions: vec![joint[n]],
                    reward: r,
                    next_obs: next[n..].to_vec(),
                    done: step.done,
                    election: vec![1.0],
                    elected: 0,
                    election_noise: vec![0.0],
                    election_step: d.election_step,
                });
                adv.counters.env_steps += 1;
            }
            obs = next;
            if step.done {
                break;
            }
        }

        self.team_replay.push(team_ep)?;
        self.team.counters.episodes += 1;
        let learn = self.opts.learn;
        if learn && self.team.counters.episodes > self.team.cfg.hp.batch_episodes as u64 {
            let batch = self
                .team_replay
                .sample(self.team.cfg.hp.batch_episodes, &mut self.rngs.replay)?;
            report.train = Some(self.team.train(&batch)?);
        }
        if let (Some(adv), Some(buf)) = (self.adversary.as_mut(), self.adversary_replay.as_mut()) {
            buf.push(adv_ep)?;
            adv.counters.episodes += 1;
            if learn && adv.counters.episodes > adv.cfg.hp.batch_episodes as u64 {
                let batch = buf.sample(adv.cfg.hp.batch_episodes, &mut self.rngs.adv_replay)?;
                report.adversary_train = Some(adv.train(&batch)?);
            }
        }
        Ok(report)
    }
}

/// Anything that picks a joint action (adversary last) for the current world.
pub trait Policy {
    fn begin_episode(&mut self);
    fn act(&mut self, state: &WorldState, obs: &[Vec<f64>]) -> Result<Vec<usize>>;
}

/// Greedy (ε = 0) play of trained learners with live elections.
pub struct GreedyPolicy<'a> {
    team: &'a Learner,
    adversary: Option<&'a Learner>,
    states: (Option<ActState>, Option<ActState>),
    election_rng: SeededRng,
    explore_rng: SeededRng,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(team: &'a Learner, adversary: Option<&'a Learner>, seed: u64) -> Self {
        Self {
            team,
            adversary,
            states: (None, None),
            election_rng: SeededRng::new(seed, stream::ELECTION),
            explore_rng: SeededRng::new(seed, stream::EXPLORATION),
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn begin_episode(&mut self) {
        self.states = (
            Some(self.team.begin_episode()),
            self.adversary.map(|a| a.begin_episode()),
        );
    }

    fn act(&mut self, _state: &WorldState, obs: &[Vec<f64>]) -> Result<Vec<usize>> {
        let n = self.team.cfg.n_agents;
        let st = self.states.0.as_mut().ok_or_else(|| arg_err("begin_episode was not called"))?;
        let mut a = self
            .team
            .act(st, &obs[..n], 0.0, &mut self.election_rng, &mut self.explore_rng)?
            .actions;
        if let (Some(adv), Some(st)) = (self.adversary, self.states.1.as_mut()) {
            a.extend(adv.act(st, &obs[n..], 0.0, &mut self.election_rng, &mut self.explore_rng)?.actions);
        }
        Ok(a)
    }
}

/// Per-episode team rewards of `policy` over `episodes` fresh worlds drawn from `seed`.
pub fn evaluate_policy(env: &mut ParticleEnv, policy: &mut dyn Policy, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = SeededRng::new(seed, stream::ENV);
    let mut rewards = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(&mut rng);
        policy.begin_episode();
        let mut total = 0.0;
        loop {
            let obs = features(env);
            let a = policy.act(env.state(), &obs)?;
            let actions: Vec<DiscreteAction> =
                a.iter().map(|&i| DiscreteAction::from_index(i)).collect::<Result<_>>()?;
            let step = env.step(&actions)?;
            total += step.reward.team;
            if step.done {
                break;
            }
        }
        rewards.push(total);
    }
    Ok(rewards)
}
