//! Label-skew partitioning. Client `n` owns the window of
//! `labels_per_client` consecutive labels starting at `n mod num_classes`
//! (wrapping).
//!
//! * `S1` splits every label's samples equally (sizes differ by at most one)
//!   among the clients whose window claims it; shards are disjoint.
//! * `S2` gives each client exactly `per_client_volume` samples drawn without
//!   replacement from its window pool. Clients prefer samples nobody has
//!   taken yet; when the pool is oversubscribed and overlap is allowed, the
//!   remainder comes from samples already held by earlier clients.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scenario: Scenario,
    pub num_participants: usize,
    pub labels_per_client: usize,
    /// Required for `S2`, absent for `S1`.
    pub per_client_volume: Option<usize>,
    pub allow_overlap: bool,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn s1(num_participants: usize, seed: u64) -> Self {
        Self {
            scenario: Scenario::S1,
            num_participants,
            labels_per_client: 4,
            per_client_volume: None,
            allow_overlap: true,
            seed,
        }
    }

    pub fn s2(num_participants: usize, volume: usize, seed: u64) -> Self {
        Self {
            scenario: Scenario::S2,
            per_client_volume: Some(volume),
            ..Self::s1(num_participants, seed)
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_participants == 0 {
            return Err(Error::Partition("num_participants must be positive".into()));
        }
        if self.labels_per_client == 0 || self.labels_per_client > num_classes {
            return Err(Error::Partition(format!(
                "labels_per_client {} must lie in 1..={num_classes}",
                self.labels_per_client
            )));
        }
        match (self.scenario, self.per_client_volume) {
            (Scenario::S1, Some(_)) => Err(Error::Partition("S1 takes no per_client_volume".into())),
            (Scenario::S2, None) => Err(Error::Partition("S2 requires per_client_volume".into())),
            (Scenario::S2, Some(0)) => Err(Error::Partition("per_client_volume must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn window(&self, client: usize, num_classes: usize) -> Vec<usize> {
        (0..self.labels_per_client)
            .map(|j| (client + j) % num_classes)
            .collect()
    }
}

/// One participant's local dataset, as indices into the parent dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub label_window: Vec<usize>,
    /// Samples also held by an earlier client (S2 oversubscription).
    pub overlapping: usize,
}

impl ClientShard {
    /// `Dₙ`.
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

pub fn partition(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    partition_labels(dataset.labels(), dataset.num_classes(), spec)
}

/// Partitions by labels alone; a pure function of its inputs.
pub fn partition_labels(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate(num_classes)?;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        by_label[l].push(i);
    }
    let shards = match spec.scenario {
        Scenario::S1 => split_s1(&by_label, num_classes, spec)?,
        Scenario::S2 => split_s2(&by_label, num_classes, spec)?,
    };
    Ok(shards)
}

fn split_s1(by_label: &[Vec<usize>], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let n = spec.num_participants;
    let windows: Vec<Vec<usize>> = (0..n).map(|c| spec.window(c, num_classes)).collect();
    let mut indices: Vec<Vec<usize>> = vec![Vec::new(); n];
    // Remainders rotate across claimants so no client collects all of them.
    let mut rotate = 0usize;
    for (label, pool) in by_label.iter().enumerate() {
        let claimants: Vec<usize> = (0..n).filter(|&c| windows[c].contains(&label)).collect();
        if claimants.is_empty() {
            continue;
        }
        let mut pool = pool.clone();
        pool.shuffle(&mut rng::stream(spec.seed, &[rng::tag::PARTITION, label as u64]));
        let base = pool.len() / claimants.len();
        let extra = pool.len() % claimants.len();
        let mut start = 0;
        for (k, &c) in claimants.iter().enumerate() {
            let len = base + usize::from((k + claimants.len() - rotate % claimants.len()) % claimants.len() < extra);
            indices[c].extend_from_slice(&pool[start..start + len]);
            start += len;
        }
        rotate += extra;
    }
    indices
        .into_iter()
        .zip(windows)
        .enumerate()
        .map(|(client_id, (mut idx, label_window))| {
            if idx.is_empty() {
                return Err(Error::Partition(format!(
                    "client {client_id} received no samples; dataset too small for {n} participants"
                )));
            }
            idx.sort_unstable();
            Ok(ClientShard {
                client_id,
                indices: idx,
                label_window,
                overlapping: 0,
            })
        })
        .collect()
}

fn split_s2(by_label: &[Vec<usize>], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let volume = spec.per_client_volume.expect("validated");
    let total: usize = by_label.iter().map(Vec::len).sum();
    let mut taken = vec![false; total];
    let mut shards = Vec::with_capacity(spec.num_participants);
    for client_id in 0..spec.num_participants {
        let label_window = spec.window(client_id, num_classes);
        let pool: Vec<usize> = label_window.iter().flat_map(|&l| by_label[l].iter().copied()).collect();
        if pool.len() < volume {
            return Err(Error::Partition(format!(
                "client {client_id}: window pool of {} samples is smaller than volume {volume}",
                pool.len()
            )));
        }
        let mut rng = rng::stream(spec.seed, &[rng::tag::PARTITION, client_id as u64]);
        let (mut fresh, mut used): (Vec<usize>, Vec<usize>) = pool.into_iter().partition(|&i| !taken[i]);
        fresh.shuffle(&mut rng);
        let mut idx: Vec<usize> = fresh.into_iter().take(volume).collect();
        let short = volume - idx.len();
        if short > 0 {
            if !spec.allow_overlap {
                return Err(Error::Partition(format!(
                    "client {client_id}: only {} unused samples for volume {volume} and overlap is disabled",
                    idx.len()
                )));
            }
            used.shuffle(&mut rng);
            idx.extend(used.into_iter().take(short));
            log::info!("client {client_id}: {short} samples shared with earlier clients");
        }
        for &i in &idx {
            taken[i] = true;
        }
        idx.sort_unstable();
        shards.push(ClientShard {
            client_id,
            indices: idx,
            label_window,
            overlapping: short,
        });
    }
    Ok(shards)
}
