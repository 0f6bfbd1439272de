//! Run configuration in a flat `key = value` text format.
//!
//! One setting per line; blank lines and `#` comments are skipped. Every key
//! is optional and unknown keys are rejected. Values layer as
//! defaults < file < overrides. [`RunConfig::snapshot`] renders the effective
//! configuration in the same format, so a snapshot can be fed back as
//! `--config` to repeat a run.
//!
//! | key | default |
//! |-----|---------|
//! | `scenario` | `coop_nav` (`coop_nav`, `deception`) |
//! | `n_agents` | 2 |
//! | `variant` | `efa-dqn` (`efa-dqn`, `efa-naive`, `vdn`) |
//! | `episodes` | 3000 for `coop_nav`, 2000 for `deception` |
//! | `seed` | 0 |
//! | `out` | `$EFA_MARL_OUT`, else `runs` |
//! | `fixed_election` | `none`, or an agent index |
//! | `stop_grad_election` | `false` |
//! | `learn` | `true` |
//! | `epsilon` | `none` (annealed schedule), or a constant rate |
//! | `checkpoint_every` | 500 (0 writes only the final checkpoint) |
//! | `eval_every` | 500 (0 disables greedy evaluation) |
//! | `eval_episodes` | 20 |
//! | `trajectory` | `false` |
//! | `ablation_seeds` | 5 |
//! | `ablation_variants` | `efa-dqn,efa-naive,vdn` |
//!
//! Every [`Hyperparams`] field (`gamma`, `lr`, `rms_decay`, `eps_start`,
//! `eps_end`, `eps_anneal_steps`, `batch_episodes`, `target_period`, `hold_k`,
//! `lambda_cf`, `alpha0`, `hidden`, `heads`, `key_dim`, `beta`,
//! `buffer_capacity`) and every [`WorldConfig`] field (`dt`, `damping`,
//! `force`, `agent_radius`, `landmark_radius`, `episode_length`, `arena`) is a
//! key of the same name.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use efa_marl_core::envs::{DiscreteAction, ParticleEnv, Scenario, WorldConfig};
use efa_marl_core::qlearn::{Hyperparams, LearnerConfig, Variant};
use efa_marl_core::session::SessionOptions;

use crate::error::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "EFA_MARL_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub n_agents: usize,
    pub variant: Variant,
    pub episodes: u64,
    pub seed: u64,
    pub hp: Hyperparams,
    pub world: WorldConfig,
    pub out: PathBuf,
    pub fixed_election: Option<usize>,
    pub stop_grad_election: bool,
    pub learn: bool,
    pub epsilon: Option<f64>,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub trajectory: bool,
    pub ablation_seeds: u64,
    pub ablation_variants: Vec<Variant>,
}

pub fn default_episodes(scenario: Scenario) -> u64 {
    match scenario {
        Scenario::CoopNav => 3000,
        Scenario::Deception => 2000,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::CoopNav,
            n_agents: 2,
            variant: Variant::EfaDqn,
            episodes: default_episodes(Scenario::CoopNav),
            seed: 0,
            hp: Hyperparams::default(),
            world: WorldConfig::default(),
            out: PathBuf::from("runs"),
            fixed_election: None,
            stop_grad_election: false,
            learn: true,
            epsilon: None,
            checkpoint_every: 500,
            eval_every: 500,
            eval_episodes: 20,
            trajectory: false,
            ablation_seeds: 5,
            ablation_variants: Variant::ALL.to_vec(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a valid number"))
}

fn real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not `true` or `false`")),
    }
}

fn optional<T>(
    v: &str,
    f: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

enum SetError {
    UnknownKey,
    Value(String),
}

impl RunConfig {
    /// Defaults with the output directory taken from [`OUT_ENV`] when set.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|d| !d.is_empty()) {
            c.out = PathBuf::from(dir);
        }
        c
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), SetError> {
        let hp = &mut self.hp;
        let w = &mut self.world;
        let r = match key {
            "scenario" => v
                .parse()
                .map(|s| self.scenario = s)
                .map_err(|e: efa_marl_core::Error| e.to_string()),
            "n_agents" => num(v).map(|x| self.n_agents = x),
            "variant" => v
                .parse()
                .map(|x| self.variant = x)
                .map_err(|e: efa_marl_core::Error| e.to_string()),
            "episodes" => num(v).map(|x| self.episodes = x),
            "seed" => num(v).map(|x| self.seed = x),
            "out" if v.is_empty() => Err("empty path".to_string()),
            "out" => {
                self.out = PathBuf::from(v);
                Ok(())
            }
            "fixed_election" => optional(v, num).map(|x| self.fixed_election = x),
            "stop_grad_election" => flag(v).map(|x| self.stop_grad_election = x),
            "learn" => flag(v).map(|x| self.learn = x),
            "epsilon" => optional(v, real).map(|x| self.epsilon = x),
            "checkpoint_every" => num(v).map(|x| self.checkpoint_every = x),
            "eval_every" => num(v).map(|x| self.eval_every = x),
            "eval_episodes" => num(v).map(|x| self.eval_episodes = x),
            "trajectory" => flag(v).map(|x| self.trajectory = x),
            "ablation_seeds" => num(v).map(|x| self.ablation_seeds = x),
            "ablation_variants" => v
                .split(',')
                .map(|s| s.trim().parse::<Variant>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(|x| self.ablation_variants = x)
                .map_err(|e| e.to_string()),
            "gamma" => real(v).map(|x| hp.gamma = x),
            "lr" => real(v).map(|x| hp.lr = x),
            "rms_decay" => real(v).map(|x| hp.rms_decay = x),
            "eps_start" => real(v).map(|x| hp.eps_start = x),
            "eps_end" => real(v).map(|x| hp.eps_end = x),
            "eps_anneal_steps" => num(v).map(|x| hp.eps_anneal_steps = x),
            "batch_episodes" => num(v).map(|x| hp.batch_episodes = x),
            "target_period" => num(v).map(|x| hp.target_period = x),
            "hold_k" => num(v).map(|x| hp.hold_k = x),
            "lambda_cf" => real(v).map(|x| hp.lambda_cf = x),
            "alpha0" => real(v).map(|x| hp.alpha0 = x),
            "hidden" => num(v).map(|x| hp.hidden = x),
            "heads" => num(v).map(|x| hp.heads = x),
            "key_dim" => num(v).map(|x| hp.key_dim = x),
            "beta" => real(v).map(|x| hp.beta = x),
            "buffer_capacity" => num(v).map(|x| hp.buffer_capacity = x),
            "dt" => real(v).map(|x| w.dt = x),
            "damping" => real(v).map(|x| w.damping = x),
            "force" => real(v).map(|x| w.force = x),
            "agent_radius" => real(v).map(|x| w.agent_radius = x),
            "landmark_radius" => real(v).map(|x| w.landmark_radius = x),
            "episode_length" => num(v).map(|x| w.episode_length = x),
            "arena" => real(v).map(|x| w.arena = x),
            _ => return Err(SetError::UnknownKey),
        };
        r.map_err(SetError::Value)
    }

    /// The effective configuration as `(key, value)` pairs in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hp = &self.hp;
        let w = &self.world;
        let variants: Vec<&str> = self.ablation_variants.iter().map(|v| v.name()).collect();
        vec![
            ("scenario", self.scenario.to_string()),
            ("n_agents", self.n_agents.to_string()),
            ("variant", self.variant.to_string()),
            ("episodes", self.episodes.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("fixed_election", show_opt(&self.fixed_election)),
            ("stop_grad_election", self.stop_grad_election.to_string()),
            ("learn", self.learn.to_string()),
            ("epsilon", show_opt(&self.epsilon)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("trajectory", self.trajectory.to_string()),
            ("ablation_seeds", self.ablation_seeds.to_string()),
            ("ablation_variants", variants.join(",")),
            ("gamma", hp.gamma.to_string()),
            ("lr", hp.lr.to_string()),
            ("rms_decay", hp.rms_decay.to_string()),
            ("eps_start", hp.eps_start.to_string()),
            ("eps_end", hp.eps_end.to_string()),
            ("eps_anneal_steps", hp.eps_anneal_steps.to_string()),
            ("batch_episodes", hp.batch_episodes.to_string()),
            ("target_period", hp.target_period.to_string()),
            ("hold_k", hp.hold_k.to_string()),
            ("lambda_cf", hp.lambda_cf.to_string()),
            ("alpha0", hp.alpha0.to_string()),
            ("hidden", hp.hidden.to_string()),
            ("heads", hp.heads.to_string()),
            ("key_dim", hp.key_dim.to_string()),
            ("beta", hp.beta.to_string()),
            ("buffer_capacity", hp.buffer_capacity.to_string()),
            ("dt", w.dt.to_string()),
            ("damping", w.damping.to_string()),
            ("force", w.force.to_string()),
            ("agent_radius", w.agent_radius.to_string()),
            ("landmark_radius", w.landmark_radius.to_string()),
            ("episode_length", w.episode_length.to_string()),
            ("arena", w.arena.to_string()),
        ]
    }

    /// The effective configuration in the file format.
    pub fn snapshot(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn session_options(&self) -> SessionOptions {
        SessionOptions {
            fixed_election: self.fixed_election,
            stop_grad_election: self.stop_grad_election,
            learn: self.learn,
            epsilon_override: self.epsilon,
            record_trajectory: self.trajectory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::invalid("episodes", "must be at least 1"));
        }
        if let Some(e) = self.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid("epsilon", "must lie in [0, 1]"));
            }
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::invalid(
                "eval_episodes",
                "must be at least 1 when evaluation is enabled",
            ));
        }
        if self.ablation_seeds == 0 {
            return Err(Error::invalid("ablation_seeds", "must be at least 1"));
        }
        if self.ablation_variants.is_empty() {
            return Err(Error::invalid(
                "ablation_variants",
                "must name at least one variant",
            ));
        }
        if let Some(f) = self.fixed_election {
            if f >= self.n_agents {
                return Err(Error::invalid(
                    "fixed_election",
                    format!("agent {f} does not exist"),
                ));
            }
        }
        self.hp.validate().map_err(field_error)?;
        let env = ParticleEnv::new(self.scenario, self.n_agents, self.world.clone())
            .map_err(|e| Error::invalid("n_agents", strip_prefix(&e)))?;
        let mut lc = LearnerConfig::new(
            env.n_agents(),
            env.obs_dim(),
            DiscreteAction::COUNT,
            self.variant,
            self.hp.clone(),
        );
        lc.fixed_election = self.fixed_election;
        lc.stop_grad_election = self.stop_grad_election;
        lc.validate().map_err(field_error)?;
        Ok(())
    }
}

fn strip_prefix(e: &efa_marl_core::Error) -> String {
    match e {
        efa_marl_core::Error::Argument(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Hyperparameter checks report `field: reason`.
fn field_error(e: efa_marl_core::Error) -> Error {
    let msg = strip_prefix(&e);
    match msg.split_once(": ") {
        Some((field, why)) => Error::invalid(field, why),
        None => Error::Core(e),
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::invalid(s, "overrides take the form key=value")),
    }
}

/// Layers `text` (read from `path`) and then `overrides` over `base`, and validates the result.
pub fn parse_config_str(
    base: RunConfig,
    path: &Path,
    text: &str,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut cfg = base;
    let mut seen: HashSet<String> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find(" #").or_else(|| raw.find("\t#")) {
            Some(p) => &raw[..p],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `key = value`, found `{content}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(parse_err(format!("`{k}` is set twice")));
        }
        match cfg.set(k, v) {
            Ok(()) => {}
            Err(SetError::UnknownKey) => return Err(parse_err(format!("unknown key `{k}`"))),
            Err(SetError::Value(m)) => return Err(Error::invalid(k, format!("{m} (line {line})"))),
        }
    }
    for (k, v) in overrides {
        match cfg.set(k, v) {
            Ok(()) => {}
            Err(SetError::UnknownKey) => return Err(Error::invalid(k.as_str(), "unknown key")),
            Err(SetError::Value(m)) => return Err(Error::invalid(k.as_str(), m)),
        }
        seen.insert(k.clone());
    }
    if !seen.contains("episodes") {
        cfg.episodes = default_episodes(cfg.scenario);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads an optional config file and applies `overrides` on top of [`RunConfig::from_env`].
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = RunConfig::from_env();
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config_str(base, p, &text, overrides)
        }
        None => parse_config_str(base, Path::new("<none>"), "", overrides),
    }
}
