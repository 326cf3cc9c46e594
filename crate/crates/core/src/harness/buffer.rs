use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<T> {
    pub episode: u64,
    pub obs: Vec<T>,
    pub action: Vec<T>,
    pub next_obs: Vec<T>,
    pub reward: T,
}

/// `L`-transition windows: `obs[0..=L]`, `actions[0..L]`, `rewards[0..L]`,
/// each entry one `batch`-row matrix.
#[derive(Clone, Debug)]
pub struct WindowBatch<T> {
    pub obs: Vec<Matrix<T>>,
    pub actions: Vec<Matrix<T>>,
    pub rewards: Vec<Matrix<T>>,
}

/// FIFO ring of transitions tagged with their episode.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<Transition<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::new(),
        }
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

    pub fn get(&self, i: usize) -> Option<&Transition<T>> {
        self.items.get(i)
    }

    /// Appends a transition, evicting the oldest at capacity.
    pub fn push(&mut self, t: Transition<T>) -> Result<()> {
        if let Some(last) = self.items.back() {
            if t.episode < last.episode {
                return Err(Error::Input(format!(
                    "episode ids must not decrease ({} after {})",
                    t.episode, last.episode
                )));
            }
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Episodes occupy contiguous runs, so a window is valid iff its first
    /// and last transitions share an episode.
    pub fn window_valid(&self, start: usize, len: usize) -> bool {
        len > 0 && start + len <= self.items.len() && self.items[start].episode == self.items[start + len - 1].episode
    }

    pub fn has_window(&self, len: usize) -> bool {
        let mut run = 0;
        let mut prev = None;
        for t in &self.items {
            run = if prev == Some(t.episode) { run + 1 } else { 1 };
            prev = Some(t.episode);
            if run >= len {
                return true;
            }
        }
        false
    }

    /// Start indices of `count` windows of `len` transitions drawn uniformly
    /// among valid starts by rejection.
    pub fn sample_starts<R: Rng + ?Sized>(&self, count: usize, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        if !self.has_window(len) {
            return Err(Error::NoWindow { len });
        }
        let hi = self.items.len() + 1 - len;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let s = rng.random_range(0..hi);
            if self.window_valid(s, len) {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, len: usize, rng: &mut R) -> Result<WindowBatch<T>> {
        let starts = self.sample_starts(count, len, rng)?;
        let first = &self.items[starts[0]];
        let (o, a) = (first.obs.len(), first.action.len());
        let mut obs: Vec<Matrix<T>> = (0..=len).map(|_| Matrix::zeros(count, o)).collect();
        let mut actions: Vec<Matrix<T>> = (0..len).map(|_| Matrix::zeros(count, a)).collect();
        let mut rewards: Vec<Matrix<T>> = (0..len).map(|_| Matrix::zeros(count, 1)).collect();
        for (i, &s) in starts.iter().enumerate() {
            for k in 0..len {
                let t = &self.items[s + k];
                obs[k].row_mut(i).copy_from_slice(&t.obs);
                actions[k].row_mut(i).copy_from_slice(&t.action);
                rewards[k].row_mut(i)[0] = t.reward;
                if k + 1 == len {
                    obs[len].row_mut(i).copy_from_slice(&t.next_obs);
                }
            }
        }
        Ok(WindowBatch { obs, actions, rewards })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(episode: u64, step: usize) -> Transition<f64> {
        Transition {
            episode,
            obs: vec![episode as f64, step as f64],
            action: vec![step as f64],
            next_obs: vec![episode as f64, step as f64 + 1.0],
            reward: step as f64,
        }
    }

    fn fill(lengths: &[usize], capacity: usize) -> ReplayBuffer<f64> {
        let mut b = ReplayBuffer::new(capacity);
        for (e, &n) in lengths.iter().enumerate() {
            for s in 0..n {
                b.push(tr(e as u64, s)).unwrap();
            }
        }
        b
    }

    #[test]
    fn evicts_oldest_first_at_capacity() {
        let b = fill(&[5, 5], 7);
        assert_eq!(b.len(), 7);
        assert_eq!(b.get(0).unwrap(), &tr(0, 3));
        assert_eq!(b.get(6).unwrap(), &tr(1, 4));
    }

    #[test]
    fn windows_are_contiguous_within_an_episode() {
        let b = fill(&[6, 3, 8], 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = b.sample(200, 4, &mut rng).unwrap();
        for i in 0..200 {
            let ep = w.obs[0][(i, 0)];
            let s0 = w.obs[0][(i, 1)];
            for k in 0..=4 {
                assert_eq!(w.obs[k][(i, 0)], ep);
                assert_eq!(w.obs[k][(i, 1)], s0 + k as f64);
            }
            for k in 0..4 {
                assert_eq!(w.actions[k][(i, 0)], s0 + k as f64);
                assert_eq!(w.rewards[k][(i, 0)], s0 + k as f64);
            }
            assert_ne!(ep, 1.0);
        }
    }

    #[test]
    fn missing_windows_are_reported() {
        let b = fill(&[2, 3, 2], 100);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(b.sample(1, 3, &mut rng).is_ok());
        assert!(matches!(b.sample(1, 4, &mut rng), Err(Error::NoWindow { len: 4 })));
        assert!(matches!(ReplayBuffer::<f64>::new(10).sample(1, 1, &mut rng), Err(Error::NoWindow { .. })));
    }

    #[test]
    fn decreasing_episode_ids_are_rejected() {
        let mut b = fill(&[2, 2], 100);
        assert!(matches!(b.push(tr(0, 9)), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn sampled_windows_never_cross_episodes(
            lengths in proptest::collection::vec(1usize..12, 1..10),
            capacity in 5usize..60,
            len in 1usize..6,
            seed in 0u64..1000,
        ) {
            let b = fill(&lengths, capacity);
            prop_assert!(b.len() <= capacity);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match b.sample_starts(20, len, &mut rng) {
                Ok(starts) => {
                    for s in starts {
                        let ep = b.get(s).unwrap().episode;
                        for k in 0..len {
                            let t = b.get(s + k).unwrap();
                            prop_assert_eq!(t.episode, ep);
                            prop_assert_eq!(t.obs[1], b.get(s).unwrap().obs[1] + k as f64);
                        }
                    }
                }
                Err(Error::NoWindow { .. }) => {
                    let mut runs = std::collections::HashMap::new();
                    for i in 0..b.len() {
                        *runs.entry(b.get(i).unwrap().episode).or_insert(0usize) += 1;
                    }
                    prop_assert!(runs.values().all(|&n| n < len));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
