//! Fixed-capacity experience replay with uniform sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::networks::concat_cols;

/// One environment step. `reward` is stored post reward-scaling; `terminal`
/// marks true environment termination (time-limit truncations are stored
/// with `terminal == false` so they still bootstrap).
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Array,
    pub action: Array,
    pub reward: f64,
    pub next_state: Array,
    pub terminal: bool,
}

/// Ring buffer over transitions; once full, inserts evict the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::non_finite("transition reward"));
        }
        if t.state.shape() != t.next_state.shape() {
            return Err(Error::ShapeMismatch {
                op: "replay_push",
                lhs: t.state.shape().to_vec(),
                rhs: t.next_state.shape().to_vec(),
            });
        }
        if let Some(first) = self.storage.first() {
            if first.state.shape() != t.state.shape() || first.action.shape() != t.action.shape() {
                return Err(Error::ShapeMismatch {
                    op: "replay_push",
                    lhs: first.state.shape().to_vec(),
                    rhs: t.state.shape().to_vec(),
                });
            }
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.storage[idx]
    }

    /// Uniform sample of `n` stored indices, with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.storage.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.storage.len())).collect())
    }

    /// Uniform batch of `n` transitions, with replacement; deterministic
    /// for a given generator state.
    pub fn sample_uniform(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let indices = self.sample_indices(n, rng)?;
        self.batch_from_indices(&indices)
    }

    pub fn batch_from_indices(&self, indices: &[usize]) -> Result<Batch> {
        let first = &self.storage[indices[0]];
        let ds = first.state.numel();
        let da = first.action.numel();
        let n = indices.len();
        let mut states = Vec::with_capacity(n * ds);
        let mut actions = Vec::with_capacity(n * da);
        let mut next_states = Vec::with_capacity(n * ds);
        let mut rewards = Vec::with_capacity(n);
        let mut terminals = Vec::with_capacity(n);
        for &i in indices {
            let t = &self.storage[i];
            states.extend_from_slice(t.state.values());
            actions.extend_from_slice(t.action.values());
            next_states.extend_from_slice(t.next_state.values());
            rewards.push(t.reward);
            terminals.push(t.terminal);
        }
        Ok(Batch {
            states: Array::new(vec![n, ds], states)?,
            actions: Array::new(vec![n, da], actions)?,
            next_states: Array::new(vec![n, ds], next_states)?,
            rewards,
            terminals,
        })
    }
}

/// Column-stacked minibatch view of sampled transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array,
    pub actions: Array,
    pub next_states: Array,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `[state, action]` rows for the critic input, state first.
    pub fn state_action(&self) -> Result<Array> {
        concat_cols(&self.states, &self.actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tagged(i: f64) -> Transition {
        Transition {
            state: Array::vector(vec![i]),
            action: Array::vector(vec![0.0]),
            reward: i,
            next_state: Array::vector(vec![i + 1.0]),
            terminal: i as usize % 2 == 0,
        }
    }

    #[test]
    fn ring_semantics_evict_oldest() {
        let mut buf = ReplayBuffer::new(2);
        for i in 0..3 {
            buf.push(tagged(i as f64)).unwrap();
        }
        assert_eq!(buf.len(), 2);
        let held: Vec<f64> = (0..2).map(|i| buf.get(i).reward).collect();
        assert!(held.contains(&1.0) && held.contains(&2.0), "held {held:?}");
    }

    #[test]
    fn size_grows_until_capacity() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..7 {
            buf.push(tagged(i as f64)).unwrap();
            assert_eq!(buf.len(), i + 1);
        }
    }

    #[test]
    fn terminal_flag_roundtrips() {
        let mut buf = ReplayBuffer::new(4);
        buf.push(tagged(2.0)).unwrap();
        buf.push(tagged(3.0)).unwrap();
        assert!(buf.get(0).terminal);
        assert!(!buf.get(1).terminal);
    }

    #[test]
    fn dimension_mismatch_with_first_stored_is_error() {
        let mut buf = ReplayBuffer::new(4);
        buf.push(tagged(1.0)).unwrap();
        let bad = Transition {
            state: Array::vector(vec![1.0, 2.0]),
            action: Array::vector(vec![0.0]),
            reward: 0.0,
            next_state: Array::vector(vec![1.0, 2.0]),
            terminal: false,
        };
        assert!(buf.push(bad).is_err());
    }

    #[test]
    fn empty_buffer_sampling_is_error() {
        let buf = ReplayBuffer::new(4);
        let mut rng = substream(1, "replay");
        assert!(matches!(
            buf.sample_uniform(3, &mut rng),
            Err(Error::EmptyBuffer)
        ));
    }

    #[test]
    fn single_item_buffer_returns_copies() {
        let mut buf = ReplayBuffer::new(4);
        buf.push(tagged(5.0)).unwrap();
        let mut rng = substream(2, "replay");
        let batch = buf.sample_uniform(6, &mut rng).unwrap();
        assert_eq!(batch.len(), 6);
        assert!(batch.rewards.iter().all(|&r| r == 5.0));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..50 {
            buf.push(tagged(i as f64)).unwrap();
        }
        let a = buf
            .sample_indices(20, &mut substream(3, "replay"))
            .unwrap();
        let b = buf
            .sample_indices(20, &mut substream(3, "replay"))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_never_returns_evicted_entries() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..20 {
            buf.push(tagged(i as f64)).unwrap();
        }
        let mut rng = substream(4, "replay");
        let batch = buf.sample_uniform(200, &mut rng).unwrap();
        // entries 0..11 were evicted
        assert!(batch.rewards.iter().all(|&r| r >= 12.0));
    }

    #[test]
    fn fifo_eviction_order_by_insertion_tags() {
        let cap = 5;
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..13usize {
            buf.push(tagged(i as f64)).unwrap();
            let oldest_live = (i + 1).saturating_sub(cap);
            let live: Vec<usize> = (0..buf.len()).map(|j| buf.get(j).reward as usize).collect();
            for tag in &live {
                assert!(*tag >= oldest_live, "tag {tag} evicted-set bound {oldest_live}");
            }
            assert_eq!(live.len(), (i + 1).min(cap));
        }
    }

    #[test]
    fn uniformity_chi_square() {
        // 1e5 draws over 100 slots; chi-square with 99 dof, p > 0.01
        // corresponds to a statistic below ~134.6.
        let slots = 100;
        let draws = 100_000;
        let mut buf = ReplayBuffer::new(slots);
        for i in 0..slots {
            buf.push(tagged(i as f64)).unwrap();
        }
        let mut rng = substream(5, "replay-chi");
        let mut counts = vec![0usize; slots];
        for idx in buf.sample_indices(draws, &mut rng).unwrap() {
            counts[idx] += 1;
        }
        let expected = draws as f64 / slots as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 134.642, "chi2={chi2}");
    }
}
