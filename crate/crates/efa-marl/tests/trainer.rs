use std::fs;
use std::path::Path;

use efa_marl::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use efa_marl::config::RunConfig;
use efa_marl::core::envs::{DiscreteAction, ParticleEnv, Scenario, Vec2, WorldConfig, WorldState};
use efa_marl::core::numerics::Module;
use efa_marl::core::qlearn::{Hyperparams, Learner, Variant};
use efa_marl::core::rng::{stream, SeededRng};
use efa_marl::core::session::{build_learners, evaluate_policy, Policy, SessionOptions};
use efa_marl::metrics::read_metrics;
use efa_marl::plot::export_plot_data;
use efa_marl::trainer::{evaluate, run_ablation, run_training};
use efa_marl::Error;

fn small(out: &Path, episodes: u64) -> RunConfig {
    RunConfig {
        episodes,
        out: out.to_path_buf(),
        hp: Hyperparams {
            hidden: 8,
            heads: 2,
            key_dim: 4,
            batch_episodes: 3,
            buffer_capacity: 20,
            target_period: 4,
            ..Hyperparams::default()
        },
        world: WorldConfig {
            episode_length: 8,
            ..WorldConfig::default()
        },
        checkpoint_every: 5,
        eval_every: 5,
        eval_episodes: 2,
        ..RunConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn one_episode_stays_in_warm_up() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_training(&small(dir.path(), 1)).unwrap();
    assert_eq!(o.records.len(), 1);
    assert_eq!(o.records[0].optimizer_steps, 0);
    assert_eq!(o.records[0].loss, None);
    assert_eq!(o.session.team_replay.len(), 1);
    assert_eq!(o.session.team.counters.optimizer_steps, 0);
}

#[test]
fn metrics_stream_has_one_record_per_episode_and_learns_after_warm_up() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 9);
    let o = run_training(&cfg).unwrap();
    let recs = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(recs, o.records);
    assert_eq!(recs.len(), 9);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.episode, i as u64);
        assert_eq!(r.elected_counts.iter().sum::<u64>(), 8);
        // Updates start once more than `batch_episodes` episodes are stored.
        assert_eq!(r.loss.is_some(), i >= 3, "episode {i}");
        assert_eq!(r.optimizer_steps, i.saturating_sub(2) as u64);
    }
    assert!(o.summary.best_eval.is_some());
    for f in ["config.txt", "timing.csv", "checkpoint.json", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let timing = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 10);
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(a.path(), 7);
    ca.trajectory = true;
    let mut cb = ca.clone();
    cb.out = b.path().to_path_buf();
    run_training(&ca).unwrap();
    run_training(&cb).unwrap();
    for f in [
        "metrics.jsonl",
        "summary.csv",
        "checkpoint.json",
        "trajectory.jsonl",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let mut cc = ca.clone();
    cc.seed = 1;
    cc.out = a.path().join("other");
    run_training(&cc).unwrap();
    assert_ne!(
        read(&a.path().join("metrics.jsonl")),
        read(&cc.out.join("metrics.jsonl"))
    );
}

#[test]
fn trajectory_records_every_step_and_holds_elections() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 3);
    cfg.trajectory = true;
    run_training(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3 * 8);
    let k = cfg.hp.hold_k as u64;
    for w in lines.windows(2) {
        let t = w[1]["t"].as_u64().unwrap();
        if w[0]["episode"] == w[1]["episode"] && t % k != 0 {
            assert_eq!(w[0]["elected"], w[1]["elected"]);
        }
        assert_eq!(w[1]["election_step"].as_bool().unwrap(), t % k == 0);
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_training(&small(dir.path(), 6)).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ck.version, CHECKPOINT_VERSION);
    assert_eq!(ck.team, o.session.team);
    assert!(ck.team.counters.optimizer_steps > 0);
    let bits = |l: &Learner| -> Vec<u64> {
        l.nets
            .parameters()
            .iter()
            .flat_map(|p| {
                p.value
                    .data()
                    .iter()
                    .chain(p.step_state.data())
                    .map(|v| v.to_bits())
            })
            .collect()
    };
    assert_eq!(bits(&ck.team), bits(&o.session.team));
    assert_eq!(ck.team.alpha.to_bits(), o.session.team.alpha.to_bits());
    let again = Checkpoint::from_json(&ck.to_json(), Path::new("mem")).unwrap();
    assert_eq!(again.to_json(), ck.to_json());
}

#[test]
fn other_checkpoint_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    run_training(&small(dir.path(), 1)).unwrap();
    let p = dir.path().join("checkpoint.json");
    let text = fs::read_to_string(&p).unwrap();
    let bumped = text.replacen(
        &format!("\"version\":{CHECKPOINT_VERSION}"),
        &format!("\"version\":{}", CHECKPOINT_VERSION + 1),
        1,
    );
    assert_ne!(bumped, text);
    fs::write(&p, bumped).unwrap();
    match Checkpoint::load(&p) {
        Err(Error::Version { found, expected }) => assert_eq!((found, expected), (2, 1)),
        other => panic!(
            "expected a version error, got {:?}",
            other.map(|c| c.version)
        ),
    }
}

fn zeroed(mut l: Learner) -> Learner {
    for p in l.nets.parameters_mut() {
        p.value.data_mut().fill(0.0);
    }
    l
}

/// Unclamped height after `k` steps of "up" from rest:
/// velocity `v_k = 2(1 − 0.75^k)`, so `y_k = y0 + 0.2k − 0.6(1 − 0.75^k)`.
fn height_after_up(y0: f64, k: i32) -> f64 {
    (y0 + 0.2 * f64::from(k) - 0.6 * (1.0 - 0.75f64.powi(k))).min(1.5)
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[test]
fn zero_networks_follow_the_closed_form_up_trajectory() {
    // All Q-values tie at zero; greedy play takes the lowest index, "up".
    let world = WorldConfig::default();
    let env = ParticleEnv::new(Scenario::CoopNav, 2, world.clone()).unwrap();
    let (team, _) = build_learners(
        &env,
        Variant::EfaDqn,
        &Hyperparams::default(),
        &SessionOptions::default(),
        3,
    )
    .unwrap();
    let ck = Checkpoint::new(Scenario::CoopNav, 2, world.clone(), zeroed(team), None);
    let ev = evaluate(&ck, 4, 17).unwrap();

    let mut rng = SeededRng::new(17, stream::ENV);
    let mut probe = ParticleEnv::new(Scenario::CoopNav, 2, world.clone()).unwrap();
    for &got in &ev.rewards {
        probe.reset(&mut rng);
        let s0 = probe.state().clone();
        let mut total = 0.0;
        for k in 1..=world.episode_length as i32 {
            let agents: Vec<Vec2> = s0
                .agent_pos
                .iter()
                .map(|p| [p[0], height_after_up(p[1], k)])
                .collect();
            let cover: f64 = s0
                .landmark_pos
                .iter()
                .map(|l| {
                    agents
                        .iter()
                        .map(|a| dist(*a, *l))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            let collide = (dist(agents[0], agents[1]) < 2.0 * world.agent_radius) as i32;
            total += -cover - f64::from(collide);
        }
        assert!((got - total).abs() < 1e-9, "{got} vs {total}");
    }
    assert_eq!(ev.mean, ev.rewards.iter().sum::<f64>() / 4.0);
    assert_eq!(evaluate(&ck, 4, 17).unwrap(), ev);
}

/// Steers agent `i` to landmark `i`, choosing the action whose next position lands closest.
struct Cover {
    world: WorldConfig,
    last_cover: Vec<f64>,
}

impl Policy for Cover {
    fn begin_episode(&mut self) {
        self.last_cover.clear();
    }

    fn act(&mut self, s: &WorldState, _obs: &[Vec<f64>]) -> efa_marl::core::Result<Vec<usize>> {
        let c = &self.world;
        let cover: f64 = s
            .agent_pos
            .iter()
            .zip(&s.landmark_pos)
            .map(|(a, l)| dist(*a, *l))
            .sum();
        self.last_cover.push(cover);
        Ok(s.agent_pos
            .iter()
            .zip(&s.agent_vel)
            .zip(&s.landmark_pos)
            .map(|((p, v), l)| {
                let next = |a: DiscreteAction| {
                    let d = a.direction();
                    let q = [0, 1]
                        .map(|k| p[k] + ((1.0 - c.damping) * v[k] + c.force * d[k] * c.dt) * c.dt);
                    dist(q, *l)
                };
                DiscreteAction::ALL
                    .iter()
                    .min_by(|a, b| next(**a).total_cmp(&next(**b)))
                    .expect("five actions")
                    .index()
            })
            .collect())
    }
}

#[test]
fn scripted_coverage_approaches_zero_from_below() {
    let world = WorldConfig {
        episode_length: 60,
        ..WorldConfig::default()
    };
    let mut env = ParticleEnv::new(Scenario::CoopNav, 2, world.clone()).unwrap();
    let mut policy = Cover {
        world,
        last_cover: Vec::new(),
    };
    for seed in 0..5 {
        let r = evaluate_policy(&mut env, &mut policy, 1, seed).unwrap();
        assert!(r[0] < 0.0);
        let c = &policy.last_cover;
        assert!(
            c[c.len() - 1] < 0.1 * c[0].max(0.5),
            "seed {seed}: {:?}",
            &c[c.len() - 5..]
        );
        let tail = -(env.reward().team);
        assert!(
            tail >= 0.0 && tail < 0.15,
            "seed {seed}: final reward {}",
            -tail
        );
    }
}

#[test]
fn naive_arm_equals_full_arm_without_weighting_or_regularizer() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(a.path(), 8);
    ca.hp.alpha0 = 1.0;
    ca.hp.lambda_cf = 0.0;
    let mut cb = ca.clone();
    cb.variant = Variant::EfaNaive;
    cb.out = b.path().to_path_buf();
    let ra = run_training(&ca).unwrap();
    let rb = run_training(&cb).unwrap();
    let bits =
        |r: &efa_marl::metrics::MetricsRecord| (r.reward.to_bits(), r.loss.map(f64::to_bits));
    assert_eq!(
        ra.records.iter().map(bits).collect::<Vec<_>>(),
        rb.records.iter().map(bits).collect::<Vec<_>>()
    );
    assert_eq!(ra.session.team.nets, rb.session.team.nets);
}

#[test]
fn deception_trains_the_adversary_alongside() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 5);
    cfg.scenario = Scenario::Deception;
    let o = run_training(&cfg).unwrap();
    assert!(o.records.iter().all(|r| r.adversary_reward.is_some()));
    assert!(o.records[4].adversary_loss.is_some());
    let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert!(ck.adversary.is_some());
    assert_eq!(evaluate(&ck, 2, 0).unwrap().rewards.len(), 2);
}

#[test]
fn ablation_output_is_independent_of_worker_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(a.path(), 5);
    ca.ablation_seeds = 2;
    let mut cb = ca.clone();
    cb.out = b.path().to_path_buf();
    let ra = run_ablation(&ca, 1).unwrap();
    let rb = run_ablation(&cb, 3).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.runs.len(), 6);
    assert_eq!(ra.table.len(), 3);
    for f in ["summary.csv", "ablation.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    assert!(a.path().join("vdn-seed1").join("metrics.jsonl").exists());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = small(&blocker.join("run"), 1);
    assert!(matches!(run_training(&cfg), Err(Error::Io { .. })));
}

#[test]
fn plot_export_smooths_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    run_training(&small(dir.path(), 4)).unwrap();
    let m = dir.path().join("metrics.jsonl");
    let recs = read_metrics(&m).unwrap();
    let raw = export_plot_data(&m, 1).unwrap();
    assert_eq!(
        raw.iter().map(|r| r.1).collect::<Vec<_>>(),
        recs.iter().map(|r| r.reward).collect::<Vec<_>>()
    );
    let two = export_plot_data(&m, 2).unwrap();
    assert_eq!(two[3].1, (recs[2].reward + recs[3].reward) / 2.0);

    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str("{\"episode\": oops}\n");
    fs::write(&m, text).unwrap();
    match export_plot_data(&m, 1) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
    assert!(export_plot_data(&m, 0).is_err());
}
