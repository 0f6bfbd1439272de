//! Training runs, greedy evaluation and multi-seed ablations.
//!
//! A training run writes into its output directory:
//!
//! - `config.txt`: the effective configuration
//! - `metrics.jsonl`: one [`MetricsRecord`] per episode
//! - `timing.csv`: wall-clock milliseconds per episode
//! - `checkpoint.json`: rewritten every `checkpoint_every` episodes and at the end
//! - `summary.csv`: `variant,seed,final100_mean,best_eval`
//! - `trajectory.jsonl`: per-step positions, actions and elections (when enabled)

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use efa_marl_core::envs::{ParticleEnv, Vec2};
use efa_marl_core::qlearn::Variant;
use efa_marl_core::session::{evaluate_policy, EpisodeReport, GreedyPolicy, Session};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{final_mean, mean, median, JsonLines, MetricsRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub episodes: u64,
    /// Mean reward of the last 100 training episodes.
    pub final100_mean: f64,
    /// Best mean greedy-evaluation reward seen during the run.
    pub best_eval: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    /// The session after the last episode.
    pub session: Session,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub episodes: usize,
    pub seed: u64,
    pub mean: f64,
    pub rewards: Vec<f64>,
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    episode: u64,
    t: usize,
    agent_pos: &'a [Vec2],
    landmark_pos: &'a [Vec2],
    actions: &'a [usize],
    elected: usize,
    election_step: bool,
    reward: f64,
}

fn record(report: &EpisodeReport, session: &Session) -> MetricsRecord {
    let team = &session.team;
    MetricsRecord {
        episode: report.episode,
        reward: report.reward,
        adversary_reward: report.adversary_reward,
        loss: report.train.as_ref().map(|t| t.loss),
        td_loss: report.train.as_ref().map(|t| t.td_loss),
        critic_loss: report.train.as_ref().and_then(|t| t.critic_loss),
        adversary_loss: report.adversary_train.as_ref().map(|t| t.loss),
        alpha: team.alpha,
        epsilon: report.epsilon,
        elected_counts: report.elected_counts(team.cfg.n_agents),
        optimizer_steps: team.counters.optimizer_steps,
    }
}

fn checkpoint_of(cfg: &RunConfig, session: &Session) -> Checkpoint {
    Checkpoint::new(
        cfg.scenario,
        cfg.n_agents,
        cfg.world.clone(),
        session.team.clone(),
        session.adversary.clone(),
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Greedy rollouts of a checkpoint's learners with live elections and no learning.
pub fn evaluate(ck: &Checkpoint, episodes: usize, seed: u64) -> Result<Evaluation> {
    let mut env = ParticleEnv::new(ck.scenario, ck.n_agents, ck.world.clone())?;
    let mut policy = GreedyPolicy::new(&ck.team, ck.adversary.as_ref(), seed);
    let rewards = evaluate_policy(&mut env, &mut policy, episodes, seed)?;
    Ok(Evaluation {
        episodes,
        seed,
        mean: mean(&rewards),
        rewards,
    })
}

fn greedy_eval(cfg: &RunConfig, session: &Session) -> Result<f64> {
    let mut env = ParticleEnv::new(cfg.scenario, cfg.n_agents, cfg.world.clone())?;
    let mut policy = GreedyPolicy::new(&session.team, session.adversary.as_ref(), cfg.seed);
    Ok(mean(&evaluate_policy(
        &mut env,
        &mut policy,
        cfg.eval_episodes,
        cfg.seed,
    )?))
}

pub fn summary_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from("variant,seed,final100_mean,best_eval\n");
    for r in runs {
        let best = r.best_eval.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.seed, r.final100_mean, best);
    }
    s
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    run_training_with(cfg, &mut |_| {})
}

/// Trains for `cfg.episodes` episodes, calling `on_record` after each one.
pub fn run_training_with(
    cfg: &RunConfig,
    on_record: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.txt"), &cfg.snapshot())?;
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"))?;
    let timing_path = out.join("timing.csv");
    let mut timing =
        BufWriter::new(fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?);
    writeln!(timing, "episode,wall_ms").map_err(|e| Error::io(&timing_path, e))?;
    let mut trajectory = match cfg.trajectory {
        true => Some(JsonLines::create(&out.join("trajectory.jsonl"))?),
        false => None,
    };

    let mut session = Session::new(
        cfg.scenario,
        cfg.n_agents,
        cfg.world.clone(),
        cfg.variant,
        cfg.hp.clone(),
        cfg.session_options(),
        cfg.seed,
    )?;
    let mut records = Vec::with_capacity(cfg.episodes as usize);
    let mut best_eval: Option<f64> = None;
    for done in 1..=cfg.episodes {
        let start = Instant::now();
        let report = session.run_episode()?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let rec = record(&report, &session);
        metrics.write(&rec)?;
        writeln!(timing, "{},{ms:.3}", rec.episode).map_err(|e| Error::io(&timing_path, e))?;
        if let Some(t) = trajectory.as_mut() {
            for s in &report.trajectory {
                t.write(&TrajectoryLine {
                    episode: report.episode,
                    t: s.t,
                    agent_pos: &s.agent_pos,
                    landmark_pos: &s.landmark_pos,
                    actions: &s.actions,
                    elected: s.elected,
                    election_step: s.election_step,
                    reward: s.reward,
                })?;
            }
        }
        on_record(&rec);
        records.push(rec);
        let last = done == cfg.episodes;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || last) {
            let e = greedy_eval(cfg, &session)?;
            best_eval = Some(best_eval.map_or(e, |b| b.max(e)));
        }
        if last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            checkpoint_of(cfg, &session).save(&out.join("checkpoint.json"))?;
        }
    }
    metrics.finish()?;
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    if let Some(t) = trajectory {
        t.finish()?;
    }

    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    let summary = RunSummary {
        variant: cfg.variant,
        seed: cfg.seed,
        episodes: cfg.episodes,
        final100_mean: final_mean(&rewards),
        best_eval,
    };
    write_file(
        &out.join("summary.csv"),
        &summary_csv(std::slice::from_ref(&summary)),
    )?;
    Ok(TrainOutcome {
        records,
        summary,
        session,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub median: f64,
    pub mean: f64,
    pub seeds: Vec<u64>,
    pub finals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// Per-run summaries, variant-major in configuration order.
    pub runs: Vec<RunSummary>,
    /// Variants from best to worst median (ties by mean).
    pub table: Vec<AblationRow>,
}

/// The run configurations of an ablation: each variant over seeds
/// `seed, seed + 1, …`, each writing to `out/<variant>-seed<k>`.
pub fn ablation_runs(base: &RunConfig) -> Vec<RunConfig> {
    let mut runs = Vec::new();
    for &v in &base.ablation_variants {
        for k in 0..base.ablation_seeds {
            let seed = base.seed + k;
            let mut c = base.clone();
            c.variant = v;
            c.seed = seed;
            c.out = base.out.join(format!("{v}-seed{seed}"));
            runs.push(c);
        }
    }
    runs
}

pub fn ablation_table(variants: &[Variant], runs: &[RunSummary]) -> Vec<AblationRow> {
    let mut rows: Vec<(usize, AblationRow)> = variants
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == v).collect();
            let finals: Vec<f64> = mine.iter().map(|r| r.final100_mean).collect();
            let row = AblationRow {
                variant: v,
                median: median(&finals),
                mean: mean(&finals),
                seeds: mine.iter().map(|r| r.seed).collect(),
                finals,
            };
            (i, row)
        })
        .collect();
    rows.sort_by(|(i, a), (j, b)| {
        b.median
            .total_cmp(&a.median)
            .then(b.mean.total_cmp(&a.mean))
            .then(i.cmp(j))
    });
    rows.into_iter().map(|(_, r)| r).collect()
}

pub fn ablation_csv(table: &[AblationRow]) -> String {
    let mut s = String::from("rank,variant,median_final100,mean_final100,seeds\n");
    for (i, r) in table.iter().enumerate() {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            r.variant,
            r.median,
            r.mean,
            seeds.join(" ")
        );
    }
    s
}

/// Trains every (variant, seed) pair on up to `workers` threads and writes
/// `summary.csv` and `ablation.csv` into `base.out`. Runs share nothing, and
/// results are merged in configuration order whatever the thread count.
pub fn run_ablation(base: &RunConfig, workers: usize) -> Result<AblationReport> {
    base.validate()?;
    fs::create_dir_all(&base.out).map_err(|e| Error::io(&base.out, e))?;
    write_file(&base.out.join("config.txt"), &base.snapshot())?;
    let jobs = ablation_runs(base);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let threads = workers.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_training(job).map(|o| o.summary);
                results
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let table = ablation_table(&base.ablation_variants, &runs);
    write_file(&base.out.join("summary.csv"), &summary_csv(&runs))?;
    write_file(&base.out.join("ablation.csv"), &ablation_csv(&table))?;
    Ok(AblationReport { runs, table })
}
