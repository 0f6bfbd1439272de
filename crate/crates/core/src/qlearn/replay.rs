use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::rng::SeededRng;

/// One environment step as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_obs: Vec<Vec<f64>>,
    pub done: bool,
    /// One-hot election vector in force at this step.
    pub election: Vec<f64>,
    pub elected: usize,
    /// Gumbel noise of the election that produced `election`.
    pub election_noise: Vec<f64>,
    /// True when a fresh election ran at this step.
    pub election_step: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Episode {
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.done)
    }
}

/// Ring buffer of complete episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(arg_err("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Stores a finished episode, evicting the oldest when full.
    pub fn push(&mut self, episode: Episode) -> Result<()> {
        if !episode.is_complete() {
            return Err(arg_err("only complete episodes can be stored"));
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    /// `count` distinct episodes, uniformly without replacement.
    pub fn sample(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<&Episode>> {
        if count > self.episodes.len() {
            return Err(arg_err(alloc::format!(
                "cannot sample {count} episodes from {}",
                self.episodes.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.episodes.len()).collect();
        for i in 0..count {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        Ok(idx[..count].iter().map(|&i| &self.episodes[i]).collect())
    }
}
