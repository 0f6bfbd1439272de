//! Hermetic invariant suite behind the `selftest` subcommand.
//!
//! Every check is seeded, needs no files and reports a deterministic detail
//! string.

use efa_marl_core::efa::{EfaConfig, EfaParams};
use efa_marl_core::envs::{Scenario, WorldConfig};
use efa_marl_core::game::{stackelberg_enumerate, Matrix};
use efa_marl_core::numerics::{
    attention_coefficients, grad_check, gumbel_softmax, hot_indices, softmax, Graph, Gru, Linear,
    MultiHeadAggregator, Tensor, Var,
};
use efa_marl_core::qlearn::{
    advantage_from_q, batch_loss, mix, update_alpha, weighting, AgentQNet, CentralCritic, Episode,
    Hyperparams, InitRngs, Learner, LearnerConfig, LossSettings, Variant,
};
use efa_marl_core::rng::SeededRng;
use efa_marl_core::session::{Session, SessionOptions};

pub const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: efa_marl_core::Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-1.0, 1.0))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// `Σ c ⊙ y`: a scalar that depends on every output coordinate.
fn probe(g: &mut Graph, y: Var, c: &Tensor) -> efa_marl_core::Result<Var> {
    let cv = g.input(c.clone())?;
    let p = g.mul(y, cv)?;
    g.sum(p)
}

fn grad_report(errors: &[(&str, f64)]) -> (bool, String) {
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let parts: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    (worst <= GRAD_TOLERANCE, parts.join(", "))
}

/// Finite-difference checks of every network building block.
pub fn check_layer_gradients() -> efa_marl_core::Result<(bool, String)> {
    let mut rng = SeededRng::new(11, 0);
    let mut errors = Vec::new();

    let x = random(3, 5, &mut rng);
    let c = random(3, 4, &mut rng);
    let mut lin = Linear::new(5, 4, &mut rng);
    errors.push((
        "linear",
        grad_check(&mut lin, GRAD_EPS, |m, g, v| {
            let xv = g.input(x.clone())?;
            let y = m.forward(g, v, xv)?;
            probe(g, y, &c)
        })?,
    ));

    let (x, h, c) = (
        random(3, 4, &mut rng),
        random(3, 6, &mut rng),
        random(3, 6, &mut rng),
    );
    let mut gru = Gru::new(4, 6, &mut rng);
    errors.push((
        "gru",
        grad_check(&mut gru, GRAD_EPS, |m, g, v| {
            let xv = g.input(x.clone())?;
            let hv = g.input(h.clone())?;
            let h1 = m.step(g, v, xv, hv)?;
            let h2 = m.step(g, v, xv, h1)?;
            probe(g, h2, &c)
        })?,
    ));

    let mut agg = MultiHeadAggregator::new(6, 2, 3, &mut rng)?;
    let h = random(6, 6, &mut rng);
    let c = random(6, agg.width(), &mut rng);
    errors.push((
        "aggregator",
        grad_check(&mut agg, GRAD_EPS, |m, g, v| {
            let hv = g.input(h.clone())?;
            let y = m.forward(g, v, hv, 3)?;
            probe(g, y, &c)
        })?,
    ));

    let mut qnet = AgentQNet::new(5, 6, 5, &mut rng);
    let (x0, x1) = (random(2, 5, &mut rng), random(2, 5, &mut rng));
    let c = random(2, 5, &mut rng);
    errors.push((
        "q-network",
        grad_check(&mut qnet, GRAD_EPS, |m, g, v| {
            let h = g.input(m.initial_hidden(2))?;
            let a = g.input(x0.clone())?;
            let (_, h) = m.forward(g, v, a, h)?;
            let b = g.input(x1.clone())?;
            let (q, _) = m.forward(g, v, b, h)?;
            probe(g, q, &c)
        })?,
    ));

    let mut critic = CentralCritic::new(7, 6, 5, &mut rng);
    let (x, c) = (random(3, 7, &mut rng), random(3, 5, &mut rng));
    errors.push((
        "critic",
        grad_check(&mut critic, GRAD_EPS, |m, g, v| {
            let xv = g.input(x.clone())?;
            let y = m.forward(g, v, xv)?;
            probe(g, y, &c)
        })?,
    ));

    let ecfg = EfaConfig {
        hidden: 6,
        heads: 2,
        key_dim: 3,
        ..EfaConfig::new(4, 5)
    };
    let mut efa = EfaParams::new(&ecfg, &mut rng)?;
    let (x, h, c) = (
        random(6, 9, &mut rng),
        random(6, 6, &mut rng),
        random(2, 3, &mut rng),
    );
    errors.push((
        "election",
        grad_check(&mut efa, GRAD_EPS, |m, g, v| {
            let xv = g.input(x.clone())?;
            let hv = g.input(h.clone())?;
            let h1 = m.encode_graph(g, v, xv, hv)?;
            let agg = m.aggregate_graph(g, v, h1, 3)?;
            let logits = m.logits_graph(g, v, agg, 3)?;
            let p = g.softmax(logits)?;
            probe(g, p, &c)
        })?,
    ));
    Ok(grad_report(&errors))
}

fn toy_hp() -> Hyperparams {
    Hyperparams {
        hidden: 8,
        heads: 2,
        key_dim: 4,
        batch_episodes: 2,
        buffer_capacity: 10,
        hold_k: 3,
        lambda_cf: 0.5,
        ..Hyperparams::default()
    }
}

/// Full weighted, regularized loss on a 2-agent toy batch, one check per seed.
pub fn check_loss_gradients(seeds: u64) -> efa_marl_core::Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let world = WorldConfig {
            episode_length: 6,
            ..WorldConfig::default()
        };
        let opts = SessionOptions {
            learn: false,
            ..SessionOptions::default()
        };
        let mut s = Session::new(
            Scenario::CoopNav,
            2,
            world,
            Variant::EfaDqn,
            toy_hp(),
            opts,
            seed,
        )?;
        s.run_episode()?;
        s.run_episode()?;
        let eps: Vec<Episode> = (0..2)
            .map(|i| s.team_replay.get(i).cloned())
            .collect::<Option<_>>()
            .expect("two episodes");
        let refs: Vec<&Episode> = eps.iter().collect();
        let mut learner = s.team.clone();
        let batch = learner.prepare(&refs)?;
        let settings = LossSettings {
            relaxed_election: true,
            ..learner.loss_settings()
        };
        let detached = {
            let mut g = Graph::new();
            let vars = g.bind_frozen(&learner.nets)?;
            batch_loss(&learner.nets, &mut g, &vars, &batch, &settings, None)?.detached
        };
        let err = grad_check(&mut learner.nets, GRAD_EPS, |nets, g, vars| {
            Ok(batch_loss(nets, g, vars, &batch, &settings, Some(&detached))?.total)
        })?;
        worst = worst.max(err);
    }
    Ok((
        worst <= GRAD_TOLERANCE,
        format!("{seeds} seeds, worst {worst:.1e}"),
    ))
}

/// Largest total-variation distance between hard Gumbel-Softmax frequencies
/// and `softmax(logits)` at β = 1.
pub fn check_gumbel(vectors: usize, samples: usize) -> efa_marl_core::Result<(bool, String)> {
    let mut rng = SeededRng::new(23, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..vectors {
        let logits = Tensor::matrix(1, 4, (0..4).map(|_| rng.uniform_range(-2.0, 2.0)).collect())?;
        let p = softmax(&logits)?;
        let mut counts = [0usize; 4];
        for _ in 0..samples {
            let (_, hard) = gumbel_softmax(&logits, 1.0, &mut rng)?;
            counts[hot_indices(&hard)[0]] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(p.data())
            .map(|(&c, &q)| (c as f64 / samples as f64 - q).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    Ok((
        worst < 0.01,
        format!("{vectors} vectors x {samples} samples, worst TV {worst:.4}"),
    ))
}

/// Attention rows sum to one and skip the diagonal.
pub fn check_attention(trials: usize) -> efa_marl_core::Result<(bool, String)> {
    let mut rng = SeededRng::new(31, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 2 + rng.below(7);
        let d = 1 + rng.below(8);
        let dk = 1 + rng.below(6);
        let h = random(n, d, &mut rng);
        let w = Tensor::matrix(
            d,
            dk,
            (0..d * dk).map(|_| rng.uniform_range(-3.0, 3.0)).collect(),
        )?;
        let a = attention_coefficients(&h, &w)?;
        for i in 0..n {
            let row = a.row(i);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            if row[i] != 0.0 {
                return Ok((
                    false,
                    format!("self-attention weight {} in row {i}", row[i]),
                ));
            }
        }
    }
    Ok((
        worst <= 1e-6,
        format!("{trials} inputs, worst |row sum - 1| {worst:.1e}"),
    ))
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive joint argmax of the additive mixture against per-agent argmaxes.
pub fn check_argmax(tables: usize) -> efa_marl_core::Result<(bool, String)> {
    const ACTIONS: usize = 5;
    let mut rng = SeededRng::new(41, 0);
    let mut violations = 0;
    let mut total = 0;
    for n in 2..=5usize {
        for _ in 0..tables {
            let q: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..ACTIONS).map(|_| rng.uniform_range(-5.0, 5.0)).collect())
                .collect();
            let mut best = (f64::NEG_INFINITY, vec![0; n]);
            let mut joint = vec![0usize; n];
            for code in 0..ACTIONS.pow(n as u32) {
                let mut c = code;
                for u in joint.iter_mut() {
                    *u = c % ACTIONS;
                    c /= ACTIONS;
                }
                let chosen: Vec<f64> = joint.iter().enumerate().map(|(i, &u)| q[i][u]).collect();
                let v = mix(&chosen);
                if v > best.0 {
                    best = (v, joint.clone());
                }
            }
            let greedy: Vec<usize> = q.iter().map(|row| first_argmax(row)).collect();
            total += 1;
            if best.1 != greedy {
                violations += 1;
            }
        }
    }
    Ok((
        violations == 0,
        format!("{total} tables, {violations} violations"),
    ))
}

/// Next α equals `(k + (B − k)·α_prev) / B` for `k` underestimated entries.
pub fn check_alpha(cases: usize) -> efa_marl_core::Result<(bool, String)> {
    let mut rng = SeededRng::new(53, 0);
    let mut mismatches = 0;
    for _ in 0..cases {
        let b = 1 + rng.below(64);
        let k = rng.below(b + 1);
        let alpha = rng.uniform_range(0.01, 1.0);
        let weights: Vec<f64> = (0..b)
            .map(|j| {
                let target = rng.uniform_range(-1.0, 1.0);
                let gap = rng.uniform_range(0.1, 1.0);
                let q = if j < k { target - gap } else { target + gap };
                weighting(q, target, alpha)
            })
            .collect();
        let expected = (k as f64 + (b - k) as f64 * alpha) / b as f64;
        if update_alpha(&weights)? != expected.min(1.0) {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{cases} batches, {mismatches} mismatches"),
    ))
}

/// Elections change only at multiples of the hold length, with `⌈T/K⌉` draws per episode.
pub fn check_election_hold(episodes: usize) -> efa_marl_core::Result<(bool, String)> {
    const STEPS: usize = 25;
    let hp = Hyperparams {
        hidden: 8,
        heads: 2,
        key_dim: 4,
        ..Hyperparams::default()
    };
    let k = hp.hold_k;
    let (n, obs_dim) = (3, 6);
    let cfg = LearnerConfig::new(n, obs_dim, 5, Variant::EfaDqn, hp);
    let mut rng = SeededRng::new(61, 0);
    let learner = Learner::new(
        cfg,
        InitRngs {
            qnets: &mut rng.clone(),
            efa: &mut rng.clone(),
            critic: &mut rng.clone(),
        },
    )?;
    let (mut elect_rng, mut explore_rng) = (SeededRng::new(61, 2), SeededRng::new(61, 3));
    let mut bad = 0;
    let mut changes = 0;
    for _ in 0..episodes {
        let mut st = learner.begin_episode();
        let mut prev = None;
        let mut draws = 0;
        for t in 0..STEPS {
            let obs: Vec<Vec<f64>> = (0..n)
                .map(|_| random(1, obs_dim, &mut rng).into_data())
                .collect();
            let d = learner.act(&mut st, &obs, 0.1, &mut elect_rng, &mut explore_rng)?;
            if d.election_step {
                draws += 1;
            }
            if d.election_step != (t % k == 0) {
                bad += 1;
            }
            if let Some(p) = prev {
                if p != d.election.elected {
                    changes += 1;
                    if t % k != 0 {
                        bad += 1;
                    }
                }
            }
            prev = Some(d.election.elected);
        }
        if draws != STEPS.div_ceil(k) {
            bad += 1;
        }
    }
    Ok((
        bad == 0 && changes > 0,
        format!("{episodes} episodes, {changes} re-elections, {bad} violations"),
    ))
}

/// Analytic advantage cases and the worked three-action example.
pub fn check_advantage() -> efa_marl_core::Result<(bool, String)> {
    let mut rng = SeededRng::new(71, 0);
    let mut ok = true;
    for _ in 0..100 {
        let c = rng.uniform_range(-3.0, 3.0);
        let pi = softmax(&random(1, 5, &mut rng))?.into_data();
        let taken = rng.below(5);
        ok &= advantage_from_q(&[c; 5], taken, &pi)? == 0.0;
        let q: Vec<f64> = (0..5).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let mut det = vec![0.0; 5];
        det[taken] = 1.0;
        ok &= advantage_from_q(&q, taken, &det)? == 0.0;
    }
    let third = 1.0 / 3.0;
    let worked = advantage_from_q(&[1.0, 2.0, 3.0], 2, &[third; 3])?;
    ok &= worked == 1.0;
    Ok((
        ok,
        format!("constant and deterministic cases exact, worked example {worked}"),
    ))
}

/// Reference enumeration over every (leader, follower) pair.
pub fn brute_force_stackelberg(leader: &Matrix, follower: &Matrix) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for (a, row) in follower.iter().enumerate() {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let guaranteed = (0..row.len())
            .filter(|&b| row[b] == top)
            .map(|b| leader[a][b])
            .fold(f64::INFINITY, f64::min);
        best = best.max(guaranteed);
    }
    best
}

/// Enumeration oracle against brute force on random integer games, plus the worked examples.
pub fn check_stackelberg(trials: usize) -> efa_marl_core::Result<(bool, String)> {
    let mut rng = SeededRng::new(83, 0);
    let mut bad = 0;
    for _ in 0..trials {
        let mut draw = || -> Matrix {
            (0..4)
                .map(|_| (0..4).map(|_| rng.below(5) as f64).collect())
                .collect()
        };
        let (l, f) = (draw(), draw());
        let s = stackelberg_enumerate(&l, &f)?;
        let fr = &f[s.leader_action];
        let is_br = fr[s.follower_action] == fr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if s.value != brute_force_stackelberg(&l, &f)
            || !is_br
            || l[s.leader_action][s.follower_action] != s.value
        {
            bad += 1;
        }
    }
    let coord = vec![vec![2.0, 0.0], vec![0.0, 1.0]];
    let a = stackelberg_enumerate(&coord, &coord)?;
    let b = stackelberg_enumerate(
        &vec![vec![3.0, 0.0], vec![2.0, 2.0]],
        &vec![vec![0.0, 1.0], vec![1.0, 0.0]],
    )?;
    let worked = (a.leader_action, a.follower_action, a.value) == (0, 0, 2.0)
        && (b.leader_action, b.follower_action, b.value) == (1, 0, 2.0);
    Ok((
        bad == 0 && worked,
        format!(
            "{trials} games, {bad} disagreements, worked examples {}",
            if worked { "ok" } else { "wrong" }
        ),
    ))
}

/// The full suite, in a fixed order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("layer gradients", check_layer_gradients()),
        outcome("loss gradients", check_loss_gradients(10)),
        outcome("gumbel-softmax frequencies", check_gumbel(5, 100_000)),
        outcome("attention normalization", check_attention(1000)),
        outcome("additive argmax", check_argmax(100)),
        outcome("dynamic alpha", check_alpha(50)),
        outcome("election hold", check_election_hold(1000)),
        outcome("counterfactual advantage", check_advantage()),
        outcome("stackelberg oracle", check_stackelberg(1000)),
    ]
}
