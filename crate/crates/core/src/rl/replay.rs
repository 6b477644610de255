//! Proportional prioritized replay over a ring buffer.

use rand::Rng;

use super::Transition;

/// Floor applied to every priority so no transition starves.
pub const MIN_PRIORITY: f64 = 1e-6;

/// Binary sum tree over a fixed number of leaves.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`.
    fn find(&self, mut mass: f64, live: usize) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        (n - self.leaves).min(live - 1)
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    items: Vec<Transition>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, priority_exponent: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            alpha: priority_exponent,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Inserts with the current maximum priority, evicting the oldest entry
    /// when full.
    pub fn push(&mut self, t: Transition) {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.tree.set(slot, self.max_priority.powf(self.alpha));
        self.next = (slot + 1) % self.capacity;
    }

    /// Priority of entry `i` (before the exponent).
    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i).powf(1.0 / self.alpha)
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    pub fn set_priority(&mut self, i: usize, priority: f64) {
        let p = priority.max(MIN_PRIORITY);
        self.max_priority = self.max_priority.max(p);
        self.tree.set(i, p.powf(self.alpha));
    }

    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        for (&i, &td) in indices.iter().zip(td_errors) {
            self.set_priority(i, td.abs());
        }
    }
}

/// Draws `batch_size` indices (with replacement) proportionally to
/// `priority^alpha`, and importance weights `(N P(i))^-beta` normalized by
/// the batch maximum.
pub fn priority_sample<R: Rng + ?Sized>(replay: &ReplayBuffer, batch_size: usize, beta: f64, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    assert!(!replay.is_empty(), "cannot sample an empty replay buffer");
    let n = replay.len();
    let total = replay.tree.total();
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| replay.tree.find(rng.random::<f64>() * total, n))
        .collect();
    let raw: Vec<f64> = indices
        .iter()
        .map(|&i| (n as f64 * replay.probability(i)).powf(-beta))
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let weights = raw.into_iter().map(|w| w / max).collect();
    (indices, weights)
}
