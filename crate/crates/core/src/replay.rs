//! Experience replay: a uniform ring buffer and a proportional prioritized
//! buffer backed by a [`SumTree`].

use std::cell::Cell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const DEFAULT_BUFFER_SIZE: usize = 2000;

/// Complete binary tree over a power-of-two number of leaves; every internal
/// node holds the sum of its two children.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
    cursor: usize,
    visits: Cell<u64>,
}

impl SumTree {
    /// A tree with at least `min_leaves` leaves, all zero.
    pub fn new(min_leaves: usize) -> Self {
        let leaves = min_leaves.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves - 1],
            cursor: 0,
            visits: Cell::new(0),
        }
    }

    pub fn from_leaves(values: &[f64]) -> Self {
        let mut tree = SumTree::new(values.len());
        for (i, &v) in values.iter().enumerate() {
            tree.set(i, v).expect("index within capacity");
        }
        tree
    }

    pub fn capacity(&self) -> usize {
        self.leaves
    }

    pub fn total(&self) -> f64 {
        self.nodes[0]
    }

    fn node_of(&self, leaf: usize) -> usize {
        leaf + self.leaves - 1
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.node_of(leaf)]
    }

    pub fn leaf_values(&self) -> &[f64] {
        &self.nodes[self.leaves - 1..]
    }

    /// Sets a leaf and recomputes every ancestor from its children.
    pub fn set(&mut self, leaf: usize, value: f64) -> Result<()> {
        ensure!(
            leaf < self.leaves,
            Contract,
            "leaf {leaf} out of range for {} leaves",
            self.leaves
        );
        ensure!(
            value >= 0.0 && value.is_finite(),
            Contract,
            "leaf mass must be finite and non-negative, got {value}"
        );
        let mut node = self.node_of(leaf);
        self.nodes[node] = value;
        self.touch();
        while node > 0 {
            node = (node - 1) / 2;
            self.nodes[node] = self.nodes[2 * node + 1] + self.nodes[2 * node + 2];
            self.touch();
        }
        Ok(())
    }

    /// Writes at the ring cursor and returns the leaf used.
    pub fn push(&mut self, value: f64) -> Result<usize> {
        let leaf = self.cursor;
        self.set(leaf, value)?;
        self.cursor = (self.cursor + 1) % self.leaves;
        Ok(leaf)
    }

    /// The leaf whose cumulative interval `[lo, hi)` contains `mass`; a mass on
    /// an interval boundary belongs to the right-hand leaf.
    pub fn find(&self, mass: f64) -> Result<usize> {
        let total = self.total();
        ensure!(
            mass >= 0.0 && mass <= total && total > 0.0,
            Contract,
            "prefix mass {mass} outside [0, {total}]"
        );
        let mut node = 0;
        let mut rest = mass;
        self.touch();
        while node < self.leaves - 1 {
            let left = 2 * node + 1;
            if rest < self.nodes[left] {
                node = left;
            } else {
                rest -= self.nodes[left];
                node = left + 1;
            }
            self.touch();
        }
        let mut leaf = node + 1 - self.leaves;
        // Mass equal to the total (or float drift) can land on an empty tail leaf.
        while self.get(leaf) <= 0.0 && leaf > 0 {
            leaf -= 1;
        }
        Ok(leaf)
    }

    /// Number of tree nodes visited by `set`/`find` so far.
    pub fn node_visits(&self) -> u64 {
        self.visits.get()
    }

    fn touch(&self) {
        self.visits.set(self.visits.get() + 1);
    }
}

/// One draw from a replay buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled<'a, T> {
    pub index: usize,
    pub item: &'a T,
    /// Probability of selecting this entry on a single proportional draw.
    pub prob: f64,
}

/// Fixed-size ring with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct UniformBuffer<T> {
    store: Vec<T>,
    limit: usize,
    next: usize,
}

impl<T> UniformBuffer<T> {
    pub fn new(limit: usize) -> Self {
        UniformBuffer {
            store: Vec::with_capacity(limit),
            limit: limit.max(1),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.store.len() < self.limit {
            self.store.push(item);
        } else {
            self.store[self.next] = item;
        }
        self.next = (self.next + 1) % self.limit;
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Sampled<'_, T>>> {
        if self.store.len() < batch || batch == 0 {
            return Err(Error::NotReady(format!(
                "buffer holds {} transitions, batch needs {batch}",
                self.store.len()
            )));
        }
        let prob = 1.0 / self.store.len() as f64;
        Ok((0..batch)
            .map(|_| {
                let index = rng.random_range(0..self.store.len());
                Sampled {
                    index,
                    item: &self.store[index],
                    prob,
                }
            })
            .collect())
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.store.get(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorityParams {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for PriorityParams {
    fn default() -> Self {
        PriorityParams {
            alpha: 0.6,
            epsilon: 1e-5,
        }
    }
}

/// Proportional prioritized replay: entry `i` is drawn with probability
/// `p_i^alpha / sum_j p_j^alpha`.
#[derive(Debug, Clone)]
pub struct PrioritizedBuffer<T> {
    tree: SumTree,
    store: Vec<T>,
    priorities: Vec<f64>,
    limit: usize,
    next: usize,
    params: PriorityParams,
    max_priority: f64,
}

impl<T> PrioritizedBuffer<T> {
    pub fn new(limit: usize, params: PriorityParams) -> Self {
        let limit = limit.max(1);
        PrioritizedBuffer {
            tree: SumTree::new(limit),
            store: Vec::with_capacity(limit),
            priorities: Vec::with_capacity(limit),
            limit,
            next: 0,
            params,
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn priority(&self, index: usize) -> Option<f64> {
        self.priorities.get(index).copied()
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.store.get(index)
    }

    fn mass(&self, priority: f64) -> f64 {
        priority.powf(self.params.alpha)
    }

    /// Stores `item` at the highest priority seen so far, evicting the oldest
    /// entry once full.
    pub fn push(&mut self, item: T) {
        let p = self.max_priority;
        let slot = self.next;
        if slot == self.store.len() {
            self.store.push(item);
            self.priorities.push(p);
        } else {
            self.store[slot] = item;
            self.priorities[slot] = p;
        }
        self.tree
            .set(slot, self.mass(p))
            .expect("finite positive priority");
        self.next = (slot + 1) % self.limit;
    }

    /// Stratified proportional sampling: the total mass is cut into `batch`
    /// equal segments with one uniform draw in each.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Sampled<'_, T>>> {
        if self.store.len() < batch || batch == 0 {
            return Err(Error::NotReady(format!(
                "buffer holds {} transitions, batch needs {batch}",
                self.store.len()
            )));
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let mut out = Vec::with_capacity(batch);
        for k in 0..batch {
            let lo = segment * k as f64;
            let mass = (lo + rng.random::<f64>() * segment).min(total);
            let index = self.tree.find(mass)?.min(self.store.len() - 1);
            out.push(Sampled {
                index,
                item: &self.store[index],
                prob: self.tree.get(index) / total,
            });
        }
        Ok(out)
    }

    /// Sets `p_i = |td_i| + epsilon` for each sampled index.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        ensure!(
            indices.len() == td_errors.len(),
            Contract,
            "{} indices but {} TD errors",
            indices.len(),
            td_errors.len()
        );
        for (&i, &td) in indices.iter().zip(td_errors) {
            ensure!(
                i < self.store.len(),
                Contract,
                "index {i} out of range for {} stored transitions",
                self.store.len()
            );
            ensure!(td.is_finite(), Numeric, "non-finite TD error {td}");
            let p = td.abs() + self.params.epsilon;
            self.priorities[i] = p;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, self.mass(p))?;
        }
        Ok(())
    }
}

impl<T: Serialize> PrioritizedBuffer<T> {
    /// One `{"priority": p, "transition": ...}` object per line, in slot order.
    pub fn dump_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a, T> {
            priority: f64,
            transition: &'a T,
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (item, &priority) in self.store.iter().zip(&self.priorities) {
            serde_json::to_writer(&mut w, &Line {
                priority,
                transition: item,
            })
            .map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Importance-sampling corrections `(N * prob)^-beta`, normalized by the batch max.
pub fn importance_weights(probs: &[f64], len: usize, beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = probs
        .iter()
        .map(|&p| (len as f64 * p).powf(-beta))
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.into_iter().map(|w| w / max).collect()
    } else {
        vec![1.0; probs.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn find_examples() {
        let tree = SumTree::from_leaves(&[1.0, 2.0, 3.0]);
        assert_eq!(tree.total(), 6.0);
        assert_eq!(tree.find(0.5).unwrap(), 0);
        assert_eq!(tree.find(2.9).unwrap(), 1);
        assert_eq!(tree.find(3.0).unwrap(), 2);
        assert_eq!(tree.find(6.0).unwrap(), 2);
        assert!(tree.find(6.5).is_err());
        assert!(tree.find(-0.1).is_err());
    }

    #[test]
    fn first_push_gets_unit_priority() {
        let mut buf = PrioritizedBuffer::new(4, PriorityParams::default());
        buf.push("a");
        assert_eq!(buf.priority(0), Some(1.0));
    }

    #[test]
    fn push_after_raised_priority_uses_max() {
        let mut buf = PrioritizedBuffer::new(8, PriorityParams::default());
        buf.push(0);
        buf.update_priorities(&[0], &[5.0 - 1e-5]).unwrap();
        buf.push(1);
        assert!((buf.priority(1).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut buf = PrioritizedBuffer::new(DEFAULT_BUFFER_SIZE, PriorityParams::default());
        for i in 0..=DEFAULT_BUFFER_SIZE {
            buf.push(i);
        }
        assert_eq!(buf.len(), DEFAULT_BUFFER_SIZE);
        assert_eq!(buf.get(0), Some(&DEFAULT_BUFFER_SIZE));
        assert!((0..buf.len()).all(|i| *buf.get(i).unwrap() != 0));
        // Tree leaves beyond the limit never receive mass.
        let leaves = buf.tree().leaf_values();
        assert!(leaves[DEFAULT_BUFFER_SIZE..].iter().all(|&v| v == 0.0));

        let mut uni = UniformBuffer::new(3);
        for i in 0..4 {
            uni.push(i);
        }
        assert_eq!(uni.len(), 3);
        assert_eq!(uni.get(0), Some(&3));
    }

    fn probs_for(priorities: &[f64], alpha: f64) -> Vec<f64> {
        let mut buf = PrioritizedBuffer::new(
            priorities.len(),
            PriorityParams {
                alpha,
                epsilon: 0.0,
            },
        );
        for i in 0..priorities.len() {
            buf.push(i);
        }
        let idx: Vec<usize> = (0..priorities.len()).collect();
        buf.update_priorities(&idx, priorities).unwrap();
        let total = buf.tree().total();
        idx.iter().map(|&i| buf.tree().get(i) / total).collect()
    }

    #[test]
    fn sampling_probabilities() {
        for p in probs_for(&[1.0; 4], 0.6) {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let p = probs_for(&[4.0, 1.0], 1.0);
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        let p = probs_for(&[4.0, 1.0], 0.5);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sample_reports_probabilities() {
        let mut buf = PrioritizedBuffer::new(2, PriorityParams { alpha: 1.0, epsilon: 0.0 });
        buf.push('x');
        buf.push('y');
        buf.update_priorities(&[0, 1], &[4.0, -1.0]).unwrap();
        let mut rng = seeded(0);
        for s in buf.sample(2, &mut rng).unwrap() {
            let expect = if s.index == 0 { 0.8 } else { 0.2 };
            assert!((s.prob - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn priority_floor_and_abs() {
        let params = PriorityParams::default();
        let mut buf = PrioritizedBuffer::new(4, params);
        buf.push(());
        buf.push(());
        buf.update_priorities(&[0, 1], &[0.0, -3.0]).unwrap();
        assert_eq!(buf.priority(0), Some(params.epsilon));
        assert_eq!(buf.priority(1), Some(3.0 + params.epsilon));
        let leaf_sum: f64 = buf.tree().leaf_values().iter().sum();
        assert!((buf.tree().total() - leaf_sum).abs() < 1e-9);
        assert!(buf.update_priorities(&[2], &[1.0]).is_err());
    }

    #[test]
    fn not_ready_when_small() {
        let mut buf = PrioritizedBuffer::new(4, PriorityParams::default());
        buf.push(1);
        let mut rng = seeded(0);
        assert!(matches!(buf.sample(2, &mut rng), Err(Error::NotReady(_))));
        let uni: UniformBuffer<u8> = UniformBuffer::new(4);
        assert!(matches!(uni.sample(1, &mut rng), Err(Error::NotReady(_))));
    }

    #[test]
    fn operations_are_logarithmic() {
        let mut tree = SumTree::new(1024);
        let depth = 10;
        for i in 0..1024 {
            let before = tree.node_visits();
            tree.set(i, 1.0).unwrap();
            assert_eq!(tree.node_visits() - before, depth + 1);
        }
        let before = tree.node_visits();
        tree.find(517.3).unwrap();
        assert_eq!(tree.node_visits() - before, depth + 1);
    }

    #[test]
    fn importance_weights_normalized() {
        let w = importance_weights(&[0.5, 0.25, 0.25], 3, 1.0);
        assert!((w.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dump_writes_one_line_per_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.jsonl");
        let mut buf = PrioritizedBuffer::new(4, PriorityParams::default());
        buf.push(vec![1, 2]);
        buf.push(vec![3]);
        buf.dump_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"priority":1.0,"transition":[1,2]}"#));
    }
}
