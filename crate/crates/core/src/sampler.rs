//! Epoch scheduling under the constraint that every player appears at most
//! once per batch, so each batch row has exactly one positive column.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairInstance;
use crate::error::{ReidError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            seed: 0,
            drop_last: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(ReidError::Config(
                "batch_size must be at least 2 so every positive has a negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub instances: Vec<PairInstance>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchViolation {
    pub duplicated_players: Vec<String>,
}

impl std::fmt::Display for BatchViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "players repeated within batch: {}", self.duplicated_players.join(", "))
    }
}

pub fn validate_batch(batch: &Batch) -> std::result::Result<(), BatchViolation> {
    let mut seen = HashSet::new();
    let mut dups: Vec<String> = Vec::new();
    for inst in &batch.instances {
        if !seen.insert(inst.player_id.as_str()) && !dups.contains(&inst.player_id) {
            dups.push(inst.player_id.clone());
        }
    }
    if dups.is_empty() {
        Ok(())
    } else {
        Err(BatchViolation {
            duplicated_players: dups,
        })
    }
}

/// Shuffles the instances and fills batches greedily, skipping instances
/// whose player is already in the batch under construction. Skipped instances
/// stay queued for later batches. When the queue runs out of distinct players,
/// the tail is retried once: leftover instances of over-represented players are
/// swapped into earlier batches in exchange for instances of players the tail
/// lacks, and the tail is greedily filled again. Whatever is still left is
/// dropped when `drop_last` is set, or emitted as partial batches otherwise.
pub fn sample_epoch(instances: &[PairInstance], cfg: &SamplerConfig) -> Result<Vec<Batch>> {
    cfg.validate()?;
    let n = cfg.batch_size;
    let players: HashSet<&str> = instances.iter().map(|i| i.player_id.as_str()).collect();
    if players.len() < n {
        return Err(ReidError::Config(format!(
            "need ≥ {n} distinct players for batch size {n}, found {}",
            players.len()
        )));
    }

    let pid = |i: usize| instances[i].player_id.as_str();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let (mut full, tail) = greedy_fill(order, n, &pid);
    let mut tail = tail;
    if !tail.is_empty() {
        repair_tail(&mut full, &mut tail, &pid);
        let (more, rest) = greedy_fill(tail, n, &pid);
        full.extend(more);
        tail = rest;
    }

    let mut batches: Vec<Batch> = full
        .into_iter()
        .map(|b| Batch {
            instances: b.iter().map(|&i| instances[i].clone()).collect(),
        })
        .collect();
    if !cfg.drop_last {
        while !tail.is_empty() {
            let mut seen = HashSet::new();
            let (take, keep): (Vec<usize>, Vec<usize>) = tail.iter().partition(|&&i| seen.insert(pid(i)));
            batches.push(Batch {
                instances: take.iter().map(|&i| instances[i].clone()).collect(),
            });
            tail = keep;
        }
    } else if !tail.is_empty() {
        log::debug!("dropping {} instances that do not fill a batch", tail.len());
    }
    Ok(batches)
}

/// Repeated full scans, each taking the first `n` instances of distinct
/// players. Stops at the first scan that cannot fill a batch and returns the
/// full batches plus every unplaced instance in queue order.
fn greedy_fill<'a>(mut pending: Vec<usize>, n: usize, pid: &impl Fn(usize) -> &'a str) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut batches = Vec::new();
    while pending.len() >= n {
        let mut in_batch: HashSet<&str> = HashSet::with_capacity(n);
        let mut taken = Vec::with_capacity(n);
        let mut rest = Vec::with_capacity(pending.len());
        for &idx in &pending {
            if taken.len() < n && in_batch.insert(pid(idx)) {
                taken.push(idx);
            } else {
                rest.push(idx);
            }
        }
        if taken.len() < n {
            break;
        }
        batches.push(taken);
        pending = rest;
    }
    (batches, pending)
}

/// One pass of swaps that raises the number of distinct players in `tail`.
fn repair_tail<'a>(batches: &mut [Vec<usize>], tail: &mut [usize], pid: &impl Fn(usize) -> &'a str) {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &i in tail.iter() {
        *counts.entry(pid(i)).or_default() += 1;
    }
    for slot in tail.iter_mut() {
        let p = pid(*slot);
        if counts[p] < 2 {
            continue;
        }
        let found = batches.iter().enumerate().find_map(|(b, batch)| {
            if batch.iter().any(|&j| pid(j) == p) {
                return None;
            }
            batch.iter().position(|&j| !counts.contains_key(pid(j))).map(|k| (b, k))
        });
        if let Some((b, k)) = found {
            let out = batches[b][k];
            batches[b][k] = *slot;
            *counts.get_mut(p).expect("counted") -= 1;
            counts.insert(pid(out), 1);
            *slot = out;
        }
    }
}
