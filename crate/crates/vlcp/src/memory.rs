//! Fixed-capacity replay buffer with per-task share balancing and three
//! sample-selection strategies: reservoir (ER), k-means cluster centers,
//! and mean-of-feature.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::util;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("requested {k} selections from {n} samples")]
    NotEnoughSamples { k: usize, n: usize },
    #[error("feature matrix has {rows} rows but task has {items} items")]
    FeatureCountMismatch { rows: usize, items: usize },
    #[error("no task is active; call begin_task first")]
    NoActiveTask,
}

/// Replay store with a hard capacity. Entries carry the id of the task they
/// were drawn from; after every rebalance the per-task shares differ by at
/// most one (subject to task availability).
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: Vec<(T, usize)>,
    seen: BTreeMap<usize, u64>,
    current_task: Option<usize>,
    current_budget: usize,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            seen: BTreeMap::new(),
            current_task: None,
            current_budget: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(T, usize)] {
        &self.entries
    }

    pub fn seen_count(&self, task: usize) -> u64 {
        self.seen.get(&task).copied().unwrap_or(0)
    }

    /// Number of stored entries per task id.
    pub fn task_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for (_, t) in &self.entries {
            *m.entry(*t).or_insert(0usize) += 1;
        }
        m
    }

    /// Rebuild from a checkpointed entry list.
    pub fn from_entries(capacity: usize, entries: Vec<(T, usize)>) -> Self {
        assert!(entries.len() <= capacity, "entries exceed capacity");
        Self {
            capacity,
            entries,
            seen: BTreeMap::new(),
            current_task: None,
            current_budget: 0,
        }
    }

    /// Open a new task: shrink old tasks to their prospective fair shares
    /// (freeing room for the incoming task, whose stream holds `task_size`
    /// candidates) and return the slot budget reserved for it. Evictions
    /// within each old task's share are uniform at random.
    pub fn begin_task(&mut self, task_id: usize, task_size: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut avail: Vec<(usize, usize)> = self
            .task_counts()
            .iter()
            .filter(|(t, _)| **t != task_id)
            .map(|(t, c)| (*t, *c))
            .collect();
        avail.push((task_id, task_size));
        let shares = waterfill(self.capacity, &avail);
        for (t, have) in self.task_counts() {
            if t == task_id {
                continue;
            }
            let target = shares.get(&t).copied().unwrap_or(0);
            if have > target {
                self.evict_within_task(t, have - target, rng);
            }
        }
        self.current_task = Some(task_id);
        self.current_budget = shares.get(&task_id).copied().unwrap_or(0);
        self.seen.insert(task_id, 0);
        self.current_budget
    }

    fn evict_within_task(&mut self, task: usize, drop: usize, rng: &mut ChaCha8Rng) {
        let idx: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, (_, t))| *t == task)
            .map(|(i, _)| i)
            .collect();
        let mut doomed = util::sample_without_replacement(idx.len(), drop, rng)
            .into_iter()
            .map(|i| idx[i])
            .collect::<Vec<_>>();
        doomed.sort_unstable_by(|a, b| b.cmp(a));
        for i in doomed {
            self.entries.swap_remove(i);
        }
    }

    /// Positions (in insertion order) of the active task's stored entries.
    fn current_slots(&self) -> Vec<usize> {
        let task = self.current_task.expect("no active task");
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (_, t))| *t == task)
            .map(|(i, _)| i)
            .collect()
    }

    /// Uniform sample of up to `batch_size` entries without replacement.
    /// Returns the whole buffer (in storage order) when it is smaller.
    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(T, usize)> {
        if batch_size >= self.entries.len() {
            return self.entries.clone();
        }
        util::sample_without_replacement(self.entries.len(), batch_size, rng)
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect()
    }
}

/// Classic reservoir update over the active task's slot budget: the first
/// `budget` items fill the slots; item `n > budget` replaces a uniformly
/// random slot with probability `budget / n`.
pub fn reservoir_update<T: Clone>(
    buffer: &mut ReplayBuffer<T>,
    incoming: T,
    rng: &mut ChaCha8Rng,
) -> Result<(), MemoryError> {
    let task = buffer.current_task.ok_or(MemoryError::NoActiveTask)?;
    let seen = buffer.seen.entry(task).or_insert(0);
    *seen += 1;
    let n = *seen;
    let budget = buffer.current_budget;
    if budget == 0 {
        return Ok(());
    }
    let slots = buffer.current_slots();
    if slots.len() < budget {
        buffer.entries.push((incoming, task));
        debug_assert!(buffer.entries.len() <= buffer.capacity);
        return Ok(());
    }
    let j = rng.gen_range(0..n);
    if (j as usize) < budget {
        let victim = slots[j as usize];
        buffer.entries[victim] = (incoming, task);
    }
    Ok(())
}

/// How the new task's share is filled at a task boundary.
pub enum SelectionStrategy<'a> {
    /// Keep what per-step reservoir updates already stored.
    Reservoir,
    /// Uniform random selection from the task's items.
    Random,
    /// Items nearest the k-means cluster centers of the given features.
    Kmeans { features: &'a Array2<f64> },
    /// Items nearest the mean of the given features.
    MeanOfFeature { features: &'a Array2<f64> },
}

/// Close out a task: fill (or keep) the new task's share as dictated by the
/// strategy and re-check that per-task shares are balanced. Shares follow a
/// constrained fair split: every task gets ⌊capacity / tasks_seen⌋ (±1) slots
/// unless it owns fewer items, in which case its surplus is spread over the
/// remaining tasks.
pub fn rebalance_buffer<T: Clone>(
    buffer: &mut ReplayBuffer<T>,
    task_id: usize,
    task_items: &[T],
    strategy: &SelectionStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<(), MemoryError> {
    if buffer.current_task != Some(task_id) {
        // tolerate a direct rebalance without per-step updates
        buffer.begin_task(task_id, task_items.len(), rng);
    }
    let budget = buffer.current_budget.min(task_items.len());
    match strategy {
        SelectionStrategy::Reservoir => {
            // populated incrementally by reservoir_update
        }
        SelectionStrategy::Random => {
            clear_task(buffer, task_id);
            for i in util::sample_without_replacement(task_items.len(), budget, rng) {
                buffer.entries.push((task_items[i].clone(), task_id));
            }
        }
        SelectionStrategy::Kmeans { features } => {
            check_features(features, task_items.len())?;
            clear_task(buffer, task_id);
            for i in kmeans_select(features, budget, rng)? {
                buffer.entries.push((task_items[i].clone(), task_id));
            }
        }
        SelectionStrategy::MeanOfFeature { features } => {
            check_features(features, task_items.len())?;
            clear_task(buffer, task_id);
            for i in mof_select(features, budget)? {
                buffer.entries.push((task_items[i].clone(), task_id));
            }
        }
    }
    debug_assert!(buffer.entries.len() <= buffer.capacity);
    buffer.current_task = None;
    buffer.current_budget = 0;
    Ok(())
}

fn clear_task<T>(buffer: &mut ReplayBuffer<T>, task: usize) {
    buffer.entries.retain(|(_, t)| *t != task);
}

fn check_features(features: &Array2<f64>, items: usize) -> Result<(), MemoryError> {
    if features.nrows() != items {
        return Err(MemoryError::FeatureCountMismatch {
            rows: features.nrows(),
            items,
        });
    }
    Ok(())
}

/// Fair allocation of `capacity` slots over tasks capped by availability.
fn waterfill(capacity: usize, avail: &[(usize, usize)]) -> BTreeMap<usize, usize> {
    let mut shares: BTreeMap<usize, usize> = avail.iter().map(|(t, _)| (*t, 0)).collect();
    let avail: BTreeMap<usize, usize> = avail.iter().copied().collect();
    let mut remaining = capacity;
    let mut open: Vec<usize> = shares.keys().copied().collect();
    while remaining > 0 && !open.is_empty() {
        let base = remaining / open.len();
        let extra = remaining % open.len();
        let mut next_open = Vec::new();
        let mut used = 0;
        for (i, t) in open.iter().enumerate() {
            let want = base + usize::from(i < extra);
            let cap = avail[t] - shares[t];
            let take = want.min(cap);
            *shares.get_mut(t).unwrap() += take;
            used += take;
            if shares[t] < avail[t] {
                next_open.push(*t);
            }
        }
        if used == 0 {
            break;
        }
        remaining -= used;
        open = next_open;
    }
    shares
}

/// Lloyd's algorithm with k-means++ seeding (at most 100 iterations,
/// centroid-movement tolerance 1e-6). Returns, per cluster, the index of the
/// nearest still-unused sample, so exactly `k` distinct indices come back.
pub fn kmeans_select(
    features: &Array2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, MemoryError> {
    let n = features.nrows();
    if k > n {
        return Err(MemoryError::NotEnoughSamples { k, n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let d = features.ncols();
    let dist2 = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| dist2(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &dd) in min_d2.iter().enumerate() {
                acc += dd;
                if target < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&features.row(pick));
        for i in 0..n {
            let dd = dist2(features.row(i), centroids.row(c));
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
    }

    // Lloyd iterations
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let dd = dist2(features.row(i), centroids.row(c));
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            let mut row = sums.row_mut(c);
            row += &features.row(i);
            counts[c] += 1;
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let new = sums.row(c).mapv(|x| x / counts[c] as f64);
            movement = movement.max(dist2(new.view(), centroids.row(c)));
            centroids.row_mut(c).assign(&new);
        }
        if movement < 1e-6 {
            break;
        }
    }

    // nearest distinct sample per centroid
    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..n {
            if used[i] {
                continue;
            }
            let dd = dist2(features.row(i), centroids.row(c));
            if dd < best.0 {
                best = (dd, i);
            }
        }
        used[best.1] = true;
        out.push(best.1);
    }
    Ok(out)
}

/// The `k` samples closest (Euclidean) to the feature mean, ties broken by
/// the lower index.
pub fn mof_select(features: &Array2<f64>, k: usize) -> Result<Vec<usize>, MemoryError> {
    let n = features.nrows();
    if k > n {
        return Err(MemoryError::NotEnoughSamples { k, n });
    }
    let mean = features.mean_axis(ndarray::Axis(0)).unwrap();
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d: f64 = features
                .row(i)
                .iter()
                .zip(mean.iter())
                .map(|(x, m)| (x - m) * (x - m))
                .sum();
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}
