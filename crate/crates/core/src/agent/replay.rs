use rand::Rng;
use std::collections::VecDeque;

use super::{AgentAction, Transition};
use crate::error::{QteError, Result};

/// Bounded FIFO of transitions. When full, the oldest non-demo transition is
/// evicted first; demos go only once nothing else is left.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(QteError::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn demo_count(&self) -> usize {
        self.items.iter().filter(|t| t.is_demo).count()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            match self.items.iter().position(|x| !x.is_demo) {
                Some(p) => {
                    self.items.remove(p);
                }
                None => {
                    self.items.pop_front();
                }
            }
        }
        self.items.push_back(t);
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(QteError::Precondition("sampling from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.items.len())).collect())
    }
}

impl AgentAction {
    /// Rotation and gripper bins in head order.
    pub fn bins(&self) -> [usize; 4] {
        [self.rotation[0], self.rotation[1], self.rotation[2], self.gripper]
    }
}
