use std::collections::BTreeMap;

use rand::Rng;

use super::{DatasetError, Label, Result, Source, Trajectory};
use crate::env::{ActionChunk, Family, Observation, TaskSpec};

/// Append-only trajectory list indexed by `(source, family, label)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryStore {
    items: Vec<Trajectory>,
    index: BTreeMap<(Source, Family, Label), Vec<usize>>,
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trajectories(trajs: impl IntoIterator<Item = Trajectory>) -> Result<Self> {
        let mut s = Self::new();
        for t in trajs {
            s.append(t)?;
        }
        Ok(s)
    }

    pub fn append(&mut self, traj: Trajectory) -> Result<()> {
        traj.validate()?;
        let key = (traj.source, traj.task.family, traj.label);
        self.index.entry(key).or_default().push(self.items.len());
        self.items.push(traj);
        Ok(())
    }

    pub fn extend(&mut self, trajs: impl IntoIterator<Item = Trajectory>) -> Result<()> {
        for t in trajs {
            self.append(t)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.items
    }

    pub fn count(&self, source: Source, family: Family, label: Label) -> usize {
        self.index.get(&(source, family, label)).map_or(0, |v| v.len())
    }

    pub fn count_where(&self, f: impl Fn(Source, Family, Label) -> bool) -> usize {
        self.index.iter().filter(|((s, fam, l), _)| f(*s, *fam, *l)).map(|(_, v)| v.len()).sum()
    }

    pub fn index_counts(&self) -> impl Iterator<Item = (&(Source, Family, Label), usize)> {
        self.index.iter().map(|(k, v)| (k, v.len()))
    }
}

/// Exactly the successful trajectories of `source` (all sources if `None`),
/// in store order.
pub fn filter_success(store: &TrajectoryStore, source: Option<Source>) -> Result<Vec<&Trajectory>> {
    let mut out = Vec::new();
    for (i, t) in store.iter().enumerate() {
        if source.is_some_and(|s| s != t.source) {
            continue;
        }
        match t.label {
            Label::Unlabeled => return Err(DatasetError::Unlabeled { index: i }),
            Label::Success => out.push(t),
            Label::Failure => {}
        }
    }
    Ok(out)
}

/// Which trajectories a batch may draw from. Empty `sources` / `None`
/// families mean "any".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selector {
    pub sources: Vec<Source>,
    pub families: Option<Vec<Family>>,
    pub success_only: bool,
}

impl Selector {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn source(source: Source) -> Self {
        Self {
            sources: vec![source],
            ..Self::default()
        }
    }

    pub fn successes(mut self) -> Self {
        self.success_only = true;
        self
    }

    pub fn families(mut self, families: &[Family]) -> Self {
        self.families = Some(families.to_vec());
        self
    }

    pub fn matches(&self, t: &Trajectory) -> bool {
        (self.sources.is_empty() || self.sources.contains(&t.source))
            && self.families.as_ref().map_or(true, |f| f.contains(&t.task.family))
            && (!self.success_only || t.label == Label::Success)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub task: TaskSpec,
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub future: Vec<Observation>,
    pub label: Label,
    pub source: Source,
    pub weight: f64,
    pub traj_index: usize,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionBatch {
    pub rows: Vec<TransitionRow>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(store: &TrajectoryStore, traj_index: usize, chunk_index: usize) -> TransitionRow {
        let t = &store.trajectories()[traj_index];
        TransitionRow {
            task: t.task,
            obs: *t.obs_at_chunk(chunk_index),
            chunk: t.chunks()[chunk_index],
            future: t.future_of_chunk(chunk_index).to_vec(),
            label: t.label,
            source: t.source,
            weight: 1.0,
            traj_index,
            chunk_index,
        }
    }

    /// Every transition of the selected trajectories, in store order.
    pub fn all(store: &TrajectoryStore, selector: &Selector) -> Self {
        let rows = store
            .iter()
            .enumerate()
            .filter(|(_, t)| selector.matches(t))
            .flat_map(|(i, t)| (0..t.num_chunks()).map(move |k| (i, k)))
            .map(|(i, k)| Self::row(store, i, k))
            .collect();
        Self { rows }
    }
}

/// Precomputed index over eligible `(trajectory, chunk)` pairs.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    store: &'a TrajectoryStore,
    eligible: Vec<usize>,
    cumulative: Vec<usize>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(store: &'a TrajectoryStore, selector: &Selector) -> Result<Self> {
        let mut eligible = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0usize;
        for (i, t) in store.iter().enumerate() {
            if selector.matches(t) && t.num_chunks() > 0 {
                total += t.num_chunks();
                eligible.push(i);
                cumulative.push(total);
            }
        }
        if total == 0 {
            return Err(DatasetError::EmptySelection);
        }
        Ok(Self {
            store,
            eligible,
            cumulative,
        })
    }

    /// Number of eligible transitions.
    pub fn total(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> TransitionBatch {
        let total = self.total();
        let rows = (0..batch_size)
            .map(|_| {
                let pick = rng.gen_range(0..total);
                let slot = self.cumulative.partition_point(|&c| c <= pick);
                let before = if slot == 0 { 0 } else { self.cumulative[slot - 1] };
                TransitionBatch::row(self.store, self.eligible[slot], pick - before)
            })
            .collect();
        TransitionBatch { rows }
    }
}

/// Uniform draw (with replacement) over eligible `(trajectory, chunk)` pairs.
pub fn sample_batch<R: Rng + ?Sized>(
    store: &TrajectoryStore,
    selector: &Selector,
    batch_size: usize,
    rng: &mut R,
) -> Result<TransitionBatch> {
    Ok(BatchSampler::new(store, selector)?.sample(batch_size, rng))
}
