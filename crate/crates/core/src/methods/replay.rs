use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MultimodalSample;
use crate::error::{Error, Result};

/// Task-partitioned memory of past training examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub sample_probability: f64,
    pub partitions: BTreeMap<usize, Vec<MultimodalSample>>,
}

/// On-disk description of a buffer: sample ids grouped by task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySidecar {
    pub capacity: usize,
    pub sample_probability: f64,
    pub partitions: BTreeMap<usize, Vec<String>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sample_probability: f64) -> Self {
        Self { capacity, sample_probability, partitions: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-task share of the capacity: an even split over the first `N−1` tasks.
    pub fn share(&self, num_tasks: usize) -> usize {
        if num_tasks < 2 {
            0
        } else {
            self.capacity / (num_tasks - 1)
        }
    }

    /// Stores a seeded uniform subset of `samples` for `task_index`. The
    /// final task stores nothing.
    pub fn store<R: Rng + ?Sized>(
        &mut self,
        task_index: usize,
        samples: &[MultimodalSample],
        num_tasks: usize,
        rng: &mut R,
    ) {
        if task_index + 1 >= num_tasks {
            return;
        }
        let take = self.share(num_tasks).min(samples.len());
        let mut picked = index::sample(rng, samples.len(), take).into_vec();
        picked.sort_unstable();
        self.partitions.insert(task_index, picked.into_iter().map(|i| samples[i].clone()).collect());
    }

    /// Appends, for each example, one uniformly drawn stored sample with
    /// probability `sample_probability`. Partitions of `current_task` are never drawn.
    pub fn mix<R: Rng + ?Sized>(
        &self,
        mut batch: Vec<MultimodalSample>,
        current_task: usize,
        rng: &mut R,
    ) -> Vec<MultimodalSample> {
        let pool: Vec<&MultimodalSample> = self
            .partitions
            .iter()
            .filter(|(&t, _)| t != current_task)
            .flat_map(|(_, v)| v.iter())
            .collect();
        if pool.is_empty() || self.sample_probability <= 0.0 {
            return batch;
        }
        let n = batch.len();
        for _ in 0..n {
            if rng.random::<f64>() < self.sample_probability {
                let pick = pool[rng.random_range(0..pool.len())];
                batch.push(pick.clone());
            }
        }
        batch
    }

    pub fn sidecar(&self) -> ReplaySidecar {
        ReplaySidecar {
            capacity: self.capacity,
            sample_probability: self.sample_probability,
            partitions: self
                .partitions
                .iter()
                .map(|(&t, v)| (t, v.iter().map(|s| s.sample_id.clone()).collect()))
                .collect(),
        }
    }

    /// Rebuilds a buffer from its sidecar, looking samples up by id.
    pub fn from_sidecar(
        sidecar: &ReplaySidecar,
        resolve: &dyn Fn(&str) -> Option<MultimodalSample>,
    ) -> Result<Self> {
        let mut partitions = BTreeMap::new();
        for (&task, ids) in &sidecar.partitions {
            let samples = ids
                .iter()
                .map(|id| resolve(id).ok_or_else(|| Error::data(Some(id), "replay sample not found in task data")))
                .collect::<Result<Vec<_>>>()?;
            partitions.insert(task, samples);
        }
        Ok(Self { capacity: sidecar.capacity, sample_probability: sidecar.sample_probability, partitions })
    }
}
