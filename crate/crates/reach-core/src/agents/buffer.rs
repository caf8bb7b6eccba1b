//! Fixed-capacity experience replay: a ring buffer with uniform,
//! with-replacement sampling.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::Transition;
use crate::error::{ReachError, Result};

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    /// Next slot to overwrite once full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(ReachError::InvalidConfig("replay capacity must be ≥ 1".into()));
        }
        Ok(Self { data: Vec::new(), capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores a transition, evicting the oldest when full.
    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `n` independent uniform draws (with replacement). Errors when fewer
    /// than `n` transitions are stored.
    pub fn sample(&self, n: usize, rng: &mut ChaCha20Rng) -> Result<Vec<&Transition>> {
        if self.data.len() < n {
            return Err(ReachError::BufferUnderfull { len: self.data.len(), requested: n });
        }
        Ok((0..n)
            .map(|_| &self.data[rng.random_range(0..self.data.len())])
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Observation;
    use crate::kinematics::JointVector;
    use crate::rng::SeedSplitter;

    pub(crate) fn marked_transition(mark: f64) -> Transition {
        let obs = Observation {
            ee_position: [mark, 0.0, 0.0],
            target_position: [0.0, mark, 0.0],
            joint_angles: [0.0; 6],
        };
        Transition {
            obs,
            action: JointVector([mark; 6]),
            reward: mark,
            next_obs: obs,
            done: true,
            desired_goal: obs.target_position,
            achieved_goal: obs.ee_position,
        }
    }

    #[test]
    fn ring_semantics_evict_oldest() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for i in 1..=3 {
            buf.push(marked_transition(i as f64));
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(buf.len(), 2);
        assert!(rewards.contains(&2.0) && rewards.contains(&3.0));
        // Keep pushing: 4 evicts 2, 5 evicts 3.
        buf.push(marked_transition(4.0));
        buf.push(marked_transition(5.0));
        let mut rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![4.0, 5.0]);
    }

    #[test]
    fn size_grows_then_saturates() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        for i in 0..25 {
            buf.push(marked_transition(i as f64));
            assert_eq!(buf.len(), (i + 1).min(10));
        }
        assert_eq!(buf.capacity(), 10);
    }

    #[test]
    fn stored_transitions_round_trip() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        let t = marked_transition(0.25);
        buf.push(t.clone());
        let got = buf.iter().next().unwrap();
        assert_eq!(*got, t);
    }

    #[test]
    fn sampling_needs_enough_data() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push(marked_transition(1.0));
        let mut rng = SeedSplitter::new(1).stream("buffer-test");
        assert!(matches!(
            buf.sample(2, &mut rng),
            Err(ReachError::BufferUnderfull { len: 1, requested: 2 })
        ));
        // n == size works and returns the only item.
        let batch = buf.sample(1, &mut rng).unwrap();
        assert_eq!(batch[0].reward, 1.0);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            buf.push(marked_transition(i as f64));
        }
        let a: Vec<f64> = buf
            .sample(32, &mut SeedSplitter::new(3).stream("s"))
            .unwrap()
            .iter()
            .map(|t| t.reward)
            .collect();
        let b: Vec<f64> = buf
            .sample(32, &mut SeedSplitter::new(3).stream("s"))
            .unwrap()
            .iter()
            .map(|t| t.reward)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform_within_binomial_bounds() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            buf.push(marked_transition(i as f64));
        }
        let mut rng = SeedSplitter::new(4).stream("buffer-uniformity");
        let draws = 1_000_000;
        let mut counts = [0u32; 100];
        for _ in 0..draws {
            let t = buf.sample(1, &mut rng).unwrap();
            counts[t[0].reward as usize] += 1;
        }
        // Binomial(n=1e6, p=0.01): σ = sqrt(n·p·(1−p)) ≈ 99.5.
        let expected = draws as f64 / 100.0;
        let sigma = (draws as f64 * 0.01 * 0.99).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expected).abs();
            assert!(dev <= 3.0 * sigma, "index {i} drawn {c} times (> 3σ from {expected})");
        }
    }
}
