//! Continuous 2D particle worlds: Cooperative Navigation and Physical Deception.
//!
//! Agents are point masses driven by one of five discrete force directions.
//! Landmarks are static. Both scenarios terminate after a fixed number of steps.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{arg_err, Error, Result};
use crate::rng::SeededRng;

pub type Vec2 = [f64; 2];

fn dist(a: Vec2, b: Vec2) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scenario {
    CoopNav,
    Deception,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::CoopNav => "coop_nav",
            Scenario::Deception => "deception",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coop_nav" => Ok(Scenario::CoopNav),
            "deception" => Ok(Scenario::Deception),
            other => Err(Error::Argument(alloc::format!("unsupported scenario `{other}`"))),
        }
    }
}

/// `[up, down, left, right, stop]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DiscreteAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stop = 4,
}

impl DiscreteAction {
    pub const COUNT: usize = 5;
    pub const ALL: [DiscreteAction; 5] = [Self::Up, Self::Down, Self::Left, Self::Right, Self::Stop];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| arg_err(alloc::format!("action index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn direction(self) -> Vec2 {
        match self {
            Self::Up => [0.0, 1.0],
            Self::Down => [0.0, -1.0],
            Self::Left => [-1.0, 0.0],
            Self::Right => [1.0, 0.0],
            Self::Stop => [0.0, 0.0],
        }
    }
}

/// Physical constants of the particle world.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldConfig {
    pub dt: f64,
    pub damping: f64,
    pub force: f64,
    pub agent_radius: f64,
    pub landmark_radius: f64,
    pub episode_length: usize,
    /// Positions are clamped to `[-arena, arena]²`.
    pub arena: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.25,
            force: 5.0,
            agent_radius: 0.15,
            landmark_radius: 0.05,
            episode_length: 25,
            arena: 1.5,
        }
    }
}

/// Snapshot of the world. In Physical Deception the adversary is the last agent.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldState {
    pub agent_pos: Vec<Vec2>,
    pub agent_vel: Vec<Vec2>,
    pub landmark_pos: Vec<Vec2>,
    pub target_index: Option<usize>,
    pub t: usize,
}

impl WorldState {
    pub fn n_total(&self) -> usize {
        self.agent_pos.len()
    }
}

/// Local view of one agent, in world-relative coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentObservation {
    pub own_vel: Vec2,
    pub own_pos: Vec2,
    pub landmark_displacements: Vec<Vec2>,
    pub other_agent_displacements: Vec<Vec2>,
    /// Displacement to the target landmark; present only for good agents in
    /// Physical Deception.
    pub target_displacement: Option<Vec2>,
}

impl AgentObservation {
    /// Flattened feature vector: velocity, position, landmarks, other agents, target.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.len());
        f.extend_from_slice(&self.own_vel);
        f.extend_from_slice(&self.own_pos);
        for d in self.landmark_displacements.iter().chain(&self.other_agent_displacements) {
            f.extend_from_slice(d);
        }
        if let Some(t) = self.target_displacement {
            f.extend_from_slice(&t);
        }
        f
    }

    pub fn len(&self) -> usize {
        4 + 2 * (self.landmark_displacements.len() + self.other_agent_displacements.len())
            + if self.target_displacement.is_some() { 2 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Team reward plus, in Physical Deception, the adversary's reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reward {
    pub team: f64,
    pub adversary: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<AgentObservation>,
    pub reward: Reward,
    pub done: bool,
}

/// `−Σ_landmarks min_agents dist − (#agent pairs closer than 2·radius)`.
pub fn reward_coop_nav(state: &WorldState, cfg: &WorldConfig) -> f64 {
    let mut r = 0.0;
    for l in &state.landmark_pos {
        let nearest = state
            .agent_pos
            .iter()
            .map(|a| dist(*a, *l))
            .fold(f64::INFINITY, f64::min);
        r -= nearest;
    }
    r - collisions(state, cfg) as f64
}

/// Number of colliding agent pairs.
pub fn collisions(state: &WorldState, cfg: &WorldConfig) -> usize {
    let n = state.agent_pos.len();
    let mut c = 0;
    for i in 0..n {
        for j in i + 1..n {
            if dist(state.agent_pos[i], state.agent_pos[j]) < 2.0 * cfg.agent_radius {
                c += 1;
            }
        }
    }
    c
}

/// `(good, adversary)`; the adversary is the last agent.
pub fn reward_deception(state: &WorldState) -> Result<(f64, f64)> {
    let target = state
        .target_index
        .map(|i| state.landmark_pos[i])
        .ok_or_else(|| arg_err("state has no target landmark"))?;
    let n = state.agent_pos.len();
    if n < 2 {
        return Err(arg_err("deception needs a good agent and an adversary"));
    }
    let adv = dist(state.agent_pos[n - 1], target);
    let nearest_good = state.agent_pos[..n - 1]
        .iter()
        .map(|a| dist(*a, target))
        .fold(f64::INFINITY, f64::min);
    Ok((-nearest_good + adv, -adv))
}

/// A running particle world.
#[derive(Clone, Debug)]
pub struct ParticleEnv {
    scenario: Scenario,
    n_agents: usize,
    cfg: WorldConfig,
    state: WorldState,
}

impl ParticleEnv {
    /// `n_agents` counts the cooperating agents; Physical Deception adds one adversary.
    pub fn new(scenario: Scenario, n_agents: usize, cfg: WorldConfig) -> Result<Self> {
        if n_agents == 0 {
            return Err(arg_err("at least one agent is required"));
        }
        let n_total = n_agents + matches!(scenario, Scenario::Deception) as usize;
        Ok(Self {
            scenario,
            n_agents,
            cfg,
            state: WorldState {
                agent_pos: vec![[0.0; 2]; n_total],
                agent_vel: vec![[0.0; 2]; n_total],
                landmark_pos: vec![[0.0; 2]; n_agents],
                target_index: None,
                t: 0,
            },
        })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_total(&self) -> usize {
        self.state.agent_pos.len()
    }

    pub fn has_adversary(&self) -> bool {
        matches!(self.scenario, Scenario::Deception)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Replaces the state wholesale (tests, scripted scenarios).
    pub fn set_state(&mut self, state: WorldState) -> Result<()> {
        if state.agent_pos.len() != self.n_total() || state.landmark_pos.len() != self.n_agents {
            return Err(arg_err("state does not match the scenario layout"));
        }
        self.state = state;
        Ok(())
    }

    /// Feature length of a cooperating agent's observation.
    pub fn obs_dim(&self) -> usize {
        let base = 4 + 2 * self.n_agents + 2 * (self.n_total() - 1);
        base + if self.has_adversary() { 2 } else { 0 }
    }

    /// Feature length of the adversary's observation.
    pub fn adversary_obs_dim(&self) -> Option<usize> {
        self.has_adversary()
            .then(|| 4 + 2 * self.n_agents + 2 * (self.n_total() - 1))
    }

    /// Uniform positions on `[-1, 1]²`, zero velocities, uniform target.
    pub fn reset(&mut self, rng: &mut SeededRng) -> Vec<AgentObservation> {
        let n_total = self.n_total();
        let mut draw = || [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
        let agent_pos: Vec<Vec2> = (0..n_total).map(|_| draw()).collect();
        let landmark_pos: Vec<Vec2> = (0..self.n_agents).map(|_| draw()).collect();
        let target_index = self.has_adversary().then(|| rng.below(self.n_agents));
        self.state = WorldState {
            agent_pos,
            agent_vel: vec![[0.0; 2]; n_total],
            landmark_pos,
            target_index,
            t: 0,
        };
        self.observations()
    }

    pub fn observations(&self) -> Vec<AgentObservation> {
        (0..self.n_total())
            .map(|i| self.observation_of(i).expect("index in range"))
            .collect()
    }

    pub fn observation_of(&self, agent: usize) -> Result<AgentObservation> {
        let s = &self.state;
        if agent >= s.agent_pos.len() {
            return Err(arg_err(alloc::format!(
                "agent index {agent} out of range for {} agents",
                s.agent_pos.len()
            )));
        }
        let me = s.agent_pos[agent];
        let is_adversary = self.has_adversary() && agent == s.agent_pos.len() - 1;
        Ok(AgentObservation {
            own_vel: s.agent_vel[agent],
            own_pos: me,
            landmark_displacements: s.landmark_pos.iter().map(|l| sub(*l, me)).collect(),
            other_agent_displacements: s
                .agent_pos
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != agent)
                .map(|(_, p)| sub(*p, me))
                .collect(),
            target_displacement: match (self.has_adversary(), is_adversary) {
                (true, false) => s.target_index.map(|i| sub(s.landmark_pos[i], me)),
                _ => None,
            },
        })
    }

    pub fn reward(&self) -> Reward {
        match self.scenario {
            Scenario::CoopNav => Reward {
                team: reward_coop_nav(&self.state, &self.cfg),
                adversary: None,
            },
            Scenario::Deception => {
                let (good, adv) = reward_deception(&self.state).expect("deception state has a target");
                Reward {
                    team: good,
                    adversary: Some(adv),
                }
            }
        }
    }

    /// Advances one step. `actions` holds one entry per agent, adversary last.
    pub fn step(&mut self, actions: &[DiscreteAction]) -> Result<StepResult> {
        if actions.len() != self.n_total() {
            return Err(arg_err(alloc::format!(
                "expected {} actions, got {}",
                self.n_total(),
                actions.len()
            )));
        }
        if self.state.t >= self.cfg.episode_length {
            return Err(arg_err("episode already finished".to_string()));
        }
        let c = &self.cfg;
        for (i, a) in actions.iter().enumerate() {
            let dir = a.direction();
            let (v, p) = (&mut self.state.agent_vel[i], &mut self.state.agent_pos[i]);
            for k in 0..2 {
                v[k] = (1.0 - c.damping) * v[k] + c.force * dir[k] * c.dt;
                p[k] = (p[k] + v[k] * c.dt).clamp(-c.arena, c.arena);
            }
        }
        self.state.t += 1;
        Ok(StepResult {
            observations: self.observations(),
            reward: self.reward(),
            done: self.state.t == self.cfg.episode_length,
        })
    }
}
