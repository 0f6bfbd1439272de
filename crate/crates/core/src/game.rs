//! Pure-strategy Stackelberg equilibria of two-player matrix games.

use alloc::vec::Vec;

use crate::error::{arg_err, Result};

/// Equilibrium found by [`stackelberg_enumerate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stackelberg {
    pub leader_action: usize,
    pub follower_action: usize,
    /// The leader's guaranteed payoff.
    pub value: f64,
}

/// Payoff matrix stored as rows (leader actions) of columns (follower actions).
pub type Matrix = Vec<Vec<f64>>;

fn check(m: &Matrix, p: usize, q: usize, name: &str) -> Result<()> {
    if m.len() != p || m.iter().any(|r| r.len() != q) {
        return Err(arg_err(alloc::format!("{name} payoff must be {p}×{q}")));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(arg_err(alloc::format!("{name} payoff has non-finite entries")));
    }
    Ok(())
}

/// Enumerates leader actions; for each, the follower best-responds and breaks
/// ties against the leader. The leader takes the best guaranteed value, lowest
/// index on ties.
pub fn stackelberg_enumerate(leader: &Matrix, follower: &Matrix) -> Result<Stackelberg> {
    let p = leader.len();
    let q = leader.first().map_or(0, Vec::len);
    if p == 0 || q == 0 {
        return Err(arg_err("games need at least one action per player"));
    }
    check(leader, p, q, "leader")?;
    check(follower, p, q, "follower")?;
    let mut best: Option<Stackelberg> = None;
    for (i, (lrow, frow)) in leader.iter().zip(follower).enumerate() {
        let top = frow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut response = None;
        for j in (0..q).filter(|&j| frow[j] == top) {
            if response.map_or(true, |r: usize| lrow[j] < lrow[r]) {
                response = Some(j);
            }
        }
        let j = response.expect("non-empty row");
        if best.map_or(true, |b| lrow[j] > b.value) {
            best = Some(Stackelberg {
                leader_action: i,
                follower_action: j,
                value: lrow[j],
            });
        }
    }
    Ok(best.expect("non-empty game"))
}
