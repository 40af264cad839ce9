//! Prioritized experience replay with bucket-based and loss-based priorities.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Uniform,
    Bucket,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    pub capacity: usize,
    pub mode: ReplayMode,
    /// Priority exponent `ς`; zero gives uniform sampling.
    pub priority_exponent: f64,
    /// Maximum priority `x*` of the logistic mapping in loss mode.
    pub max_priority: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig { capacity: 1_000_000, mode: ReplayMode::Bucket, priority_exponent: 1.0 / 3.0, max_priority: 1.0 }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&self.priority_exponent) {
            return Err(Error::invalid(format!("priority exponent {} outside [0, 1]", self.priority_exponent)));
        }
        if !(self.max_priority > 0.0 && self.max_priority.is_finite()) {
            return Err(Error::invalid(format!("maximum priority {} must be positive", self.max_priority)));
        }
        Ok(())
    }
}

/// Binary tree of partial sums over a fixed number of leaves.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        SumTree { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    /// Sets leaf `i`; ancestors are recomputed from their children so no
    /// rounding error accumulates across updates.
    pub fn set(&mut self, i: usize, v: f64) {
        let mut k = self.leaves + i;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u`, for `0 <= u < total`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if u < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        k - self.leaves
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry<T> {
    pub item: T,
    pub priority: f64,
    pub insert_index: u64,
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Buffer slots, usable with [`ReplayBuffer::update_priority_loss`].
    pub slots: Vec<usize>,
    pub items: Vec<T>,
    /// Importance weights `(|D| P)^(-ω)` divided by their batch maximum.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    config: BufferConfig,
    entries: Vec<ReplayEntry<T>>,
    tree: SumTree,
    next_slot: usize,
    inserted: u64,
    buckets: BTreeMap<LatentState, u64>,
    /// Running `(Lmin, Lmax)` of the observed losses.
    loss_range: Option<(f64, f64)>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate()?;
        Ok(ReplayBuffer {
            tree: SumTree::new(config.capacity),
            entries: Vec::new(),
            next_slot: 0,
            inserted: 0,
            buckets: BTreeMap::new(),
            loss_range: None,
            config,
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of insertions over the buffer lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn bucket_count(&self, s: LatentState) -> u64 {
        self.buckets.get(&s).copied().unwrap_or(0)
    }

    pub fn entry(&self, slot: usize) -> &ReplayEntry<T> {
        &self.entries[slot]
    }

    fn weight_of(&self, p: f64) -> f64 {
        match self.config.mode {
            ReplayMode::Uniform => 1.0,
            _ => p.powf(self.config.priority_exponent),
        }
    }

    /// Inserts `item`, evicting the oldest entry when full. `latent` is the
    /// latent state of the transition and selects the bucket in bucket mode.
    pub fn insert(&mut self, item: T, latent: LatentState) -> usize {
        let priority = match self.config.mode {
            ReplayMode::Uniform => 1.0,
            ReplayMode::Loss => self.config.max_priority,
            ReplayMode::Bucket => {
                let b = self.buckets.entry(latent).or_insert(0);
                let p = self.inserted.max(1) as f64 / (*b).max(1) as f64;
                *b += 1;
                p
            }
        };
        let slot = self.next_slot;
        let entry = ReplayEntry { item, priority, insert_index: self.inserted };
        if slot < self.entries.len() {
            self.entries[slot] = entry;
        } else {
            self.entries.push(entry);
        }
        self.tree.set(slot, self.weight_of(priority));
        self.inserted += 1;
        self.next_slot = (slot + 1) % self.config.capacity;
        slot
    }

    /// Probability of sampling `slot` under the current priorities.
    pub fn probability(&self, slot: usize) -> f64 {
        self.tree.get(slot) / self.tree.total()
    }

    /// Draws `batch_size` slots i.i.d. proportionally to `p^ς`.
    pub fn sample(&self, batch_size: usize, omega: f64, rng: &mut dyn RngCore) -> Result<Batch<T>> {
        if batch_size == 0 || self.len() < batch_size {
            return Err(Error::invalid(format!(
                "cannot sample {batch_size} transitions from a buffer holding {}",
                self.len()
            )));
        }
        let total = self.tree.total();
        let n = self.len() as f64;
        let mut slots = Vec::with_capacity(batch_size);
        let mut weights = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = rng.random::<f64>() * total;
            let slot = self.tree.find(u).min(self.len() - 1);
            let prob = self.tree.get(slot) / total;
            slots.push(slot);
            weights.push((n * prob).powf(-omega));
        }
        let wmax = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= wmax;
        }
        let items = slots.iter().map(|&s| self.entries[s].item.clone()).collect();
        Ok(Batch { slots, items, weights })
    }

    /// Maps a per-transition loss to `x* sigmoid(k (L - x0))` with
    /// `x0 = (Lmax - Lmin) / 2` and `k = x* / (Lmax - Lmin)` over the running
    /// loss range. A degenerate range gives `x* / 2`.
    pub fn loss_priority(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "replay loss".into() });
        }
        let (lo, hi) = self.loss_range.map_or((loss, loss), |(lo, hi)| (lo.min(loss), hi.max(loss)));
        self.loss_range = Some((lo, hi));
        Ok(logistic_priority(loss, lo, hi, self.config.max_priority))
    }

    pub fn update_priority_loss(&mut self, slot: usize, loss: f64) -> Result<()> {
        if self.config.mode != ReplayMode::Loss {
            return Err(Error::invalid("loss priorities require a loss-mode buffer"));
        }
        if slot >= self.len() {
            return Err(Error::invalid(format!("slot {slot} outside buffer of {}", self.len())));
        }
        let p = self.loss_priority(loss)?;
        self.entries[slot].priority = p;
        self.tree.set(slot, self.weight_of(p));
        Ok(())
    }
}

pub fn logistic_priority(loss: f64, lmin: f64, lmax: f64, x_star: f64) -> f64 {
    let range = lmax - lmin;
    if !(range > 0.0) {
        return x_star / 2.0;
    }
    let x0 = range / 2.0;
    let k = x_star / range;
    let p = x_star / (1.0 + (-k * (loss - x0)).exp());
    p.max(f64::MIN_POSITIVE)
}
