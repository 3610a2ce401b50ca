//! Episode replay buffer.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::envs::EpisodeBatch;
use crate::error::{Error, Result};

/// FIFO store of complete episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeBatch>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1024)),
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
    pub fn push(&mut self, episode: EpisodeBatch) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Indices of `batch` distinct episodes, uniformly at random.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<usize>> {
        if batch > self.episodes.len() {
            return Err(Error::contract(
                "replay_sample",
                format!("batch {batch} from {} episodes", self.episodes.len()),
            ));
        }
        Ok(index::sample(rng, self.episodes.len(), batch).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<&EpisodeBatch>> {
        Ok(self
            .sample_indices(rng, batch)?
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }

    pub fn get(&self, i: usize) -> Option<&EpisodeBatch> {
        self.episodes.get(i)
    }
}
