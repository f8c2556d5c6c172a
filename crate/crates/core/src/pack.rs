//! Turns variable-size clusters into fixed-size training batches.
//!
//! Large clusters are shuffled and cut into `batch_size` chunks. The
//! remainders are merged greedily with the remainder whose source centroid is
//! nearest, within the same domain unless cross-domain merging is allowed.
//! A tail that cannot be filled is kept as a short batch when it holds at
//! least half a batch and dropped (and reported) otherwise.

use crate::cluster::ClusterAssignment;
use crate::data::PairDataset;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackStrategy {
    Random,
    Tsp,
}

impl std::str::FromStr for PackStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "tsp" => Ok(Self::Tsp),
            _ => Err(Error::Config(format!("unknown packing strategy {s:?} (random|tsp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub batch_size: usize,
    pub strategy: PackStrategy,
    pub seed: u64,
    pub allow_cross_domain: bool,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            strategy: PackStrategy::Tsp,
            seed: 0,
            allow_cross_domain: false,
        }
    }
}

impl PackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("pack.batch_size must be >= 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub pair_indices: Vec<usize>,
    pub source_clusters: BTreeSet<usize>,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Batch>,
    pub dropped: Vec<usize>,
}

impl BatchPlan {
    pub fn covered(&self) -> usize {
        self.batches.iter().map(|b| b.pair_indices.len()).sum()
    }

    /// Checks that batches are disjoint and, together with the drops, cover
    /// exactly `0..n_pairs`.
    pub fn check_partition(&self, n_pairs: usize) -> Result<()> {
        let mut seen = vec![false; n_pairs];
        let all = self.batches.iter().flat_map(|b| b.pair_indices.iter()).chain(&self.dropped);
        for &i in all {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Consistency(format!("pair {i} appears twice in the plan"))),
                None => return Err(Error::Consistency(format!("pair {i} is out of range"))),
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::Consistency(format!("pair {i} is missing from the plan"))),
            None => Ok(()),
        }
    }
}

/// A piece of one or more clusters; `anchor` is the cluster whose centroid
/// stands in for the fragment when measuring distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub pairs: Vec<usize>,
    pub clusters: BTreeSet<usize>,
    pub anchor: usize,
    pub domain: String,
}

/// Random permutation cut into `batch_size` chunks; only the last may be short.
pub fn split_oversized(pairs: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut p = pairs.to_vec();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeOutcome {
    pub batches: Vec<Batch>,
    pub dropped: Vec<usize>,
}

/// Full fragments pass through; short ones are merged with their
/// nearest-centroid partner until full, overflow returning to the pool.
pub fn merge_undersized(fragments: Vec<Fragment>, centroids: &[Vec<f64>], cfg: &PackingConfig) -> MergeOutcome {
    let b = cfg.batch_size;
    let mut out = MergeOutcome::default();
    let mut pool: Vec<Fragment> = Vec::new();
    for f in fragments {
        if f.pairs.len() >= b {
            out.batches.push(Batch {
                pair_indices: f.pairs,
                source_clusters: f.clusters,
                domain: f.domain,
            });
        } else if !f.pairs.is_empty() {
            pool.push(f);
        }
    }

    let mut tails = Vec::new();
    while !pool.is_empty() {
        let mut cur = pool.remove(0);
        while cur.pairs.len() < b {
            let here = &centroids[cur.anchor];
            let partner = pool
                .iter()
                .enumerate()
                .filter(|(_, f)| cfg.allow_cross_domain || f.domain == cur.domain)
                .map(|(i, f)| (i, euclid(here, &centroids[f.anchor])))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            let Some((i, _)) = partner else { break };
            let mut other = pool.remove(i);
            let need = b - cur.pairs.len();
            if other.pairs.len() > need {
                let rest = other.pairs.split_off(need);
                pool.insert(
                    i,
                    Fragment {
                        pairs: rest,
                        ..other.clone()
                    },
                );
            }
            cur.pairs.extend(other.pairs);
            cur.clusters.extend(other.clusters);
        }
        if cur.pairs.len() == b {
            out.batches.push(Batch {
                pair_indices: cur.pairs,
                source_clusters: cur.clusters,
                domain: cur.domain,
            });
        } else if 2 * cur.pairs.len() >= b {
            tails.push(cur);
        } else {
            out.dropped.extend(cur.pairs);
        }
    }
    // Short batches go last so every batch before them has the full size.
    out.batches.extend(tails.into_iter().map(|f| Batch {
        pair_indices: f.pairs,
        source_clusters: f.clusters,
        domain: f.domain,
    }));
    out.dropped.sort_unstable();
    out
}

/// Nearest-neighbour walk over centroids from a seed-chosen start; ties go to
/// the lower cluster id.
pub fn order_clusters_greedy_tsp(centroids: &[Vec<f64>], seed: u64) -> Vec<usize> {
    if centroids.is_empty() {
        return Vec::new();
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..centroids.len());
    walk_from(centroids, start)
}

pub fn walk_from(centroids: &[Vec<f64>], start: usize) -> Vec<usize> {
    let mut visited = vec![false; centroids.len()];
    let mut order = vec![start];
    visited[start] = true;
    let mut cur = start;
    for _ in 1..centroids.len() {
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, c) in centroids.iter().enumerate() {
            if !visited[j] {
                let d = euclid(&centroids[cur], c);
                if d < best.1 {
                    best = (j, d);
                }
            }
        }
        visited[best.0] = true;
        order.push(best.0);
        cur = best.0;
    }
    order
}

/// Total Euclidean length of visiting `order` in sequence.
pub fn walk_length(centroids: &[Vec<f64>], order: &[usize]) -> f64 {
    order.windows(2).map(|w| euclid(&centroids[w[0]], &centroids[w[1]])).sum()
}

fn mix(seed: u64, x: u64) -> u64 {
    seed ^ x.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Packs clusters into a batch plan. `domains` holds one label per pair.
pub fn pack_batches(assignment: &ClusterAssignment, domains: &[String], cfg: &PackingConfig) -> Result<BatchPlan> {
    cfg.validate()?;
    if domains.len() != assignment.assignment.len() {
        return Err(Error::InvalidInput(format!(
            "pack_batches: {} domain labels for {} pairs",
            domains.len(),
            assignment.assignment.len()
        )));
    }
    let mut population: BTreeMap<&str, usize> = BTreeMap::new();
    for d in domains {
        *population.entry(d).or_default() += 1;
    }
    let (largest, &max_pop) = population
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .ok_or_else(|| Error::InvalidInput("pack_batches: empty assignment".into()))?;
    if cfg.batch_size > max_pop {
        return Err(Error::InvalidInput(format!(
            "batch_size {} exceeds the population of the largest domain {largest:?} ({max_pop} pairs)",
            cfg.batch_size
        )));
    }

    let members = assignment.members();
    let centroids: Vec<Vec<f64>> = assignment.centroids.iter().map(|c| c.c.clone()).collect();
    let order: Vec<usize> = match cfg.strategy {
        PackStrategy::Tsp => order_clusters_greedy_tsp(&centroids, cfg.seed),
        PackStrategy::Random => {
            let mut o: Vec<usize> = (0..members.len()).collect();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            o
        }
    };

    let mut fragments = Vec::new();
    for &c in &order {
        if members[c].is_empty() {
            continue;
        }
        let domain = domains[members[c][0]].clone();
        for pairs in split_oversized(&members[c], cfg.batch_size, mix(cfg.seed, c as u64)) {
            fragments.push(Fragment {
                pairs,
                clusters: BTreeSet::from([c]),
                anchor: c,
                domain: domain.clone(),
            });
        }
    }
    let merged = merge_undersized(fragments, &centroids, cfg);
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        batches: merged.batches,
        dropped: merged.dropped,
    };
    plan.check_partition(domains.len())?;
    Ok(plan)
}

/// Baseline plan of uniformly random batches, drawn inside each domain when
/// `domain_pure`.
pub fn random_batch_plan(dataset: &PairDataset, batch_size: usize, seed: u64, domain_pure: bool) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let groups: Vec<(String, Vec<usize>)> = if domain_pure {
        dataset.indices_by_domain()
    } else {
        vec![("*".into(), (0..dataset.len()).collect())]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    let mut dropped = Vec::new();
    for (domain, mut idx) in groups {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            if chunk.len() == batch_size {
                batches.push(Batch {
                    pair_indices: chunk.to_vec(),
                    source_clusters: BTreeSet::new(),
                    domain: domain.clone(),
                });
            } else {
                dropped.extend_from_slice(chunk);
            }
        }
    }
    batches.shuffle(&mut rng);
    dropped.sort_unstable();
    Ok(BatchPlan {
        batch_size,
        batches,
        dropped,
    })
}

#[derive(Serialize, Deserialize)]
struct PlanLine {
    batch_id: usize,
    pair_indices: Vec<usize>,
    domain: String,
    #[serde(default)]
    source_clusters: BTreeSet<usize>,
}

/// Writes the plan JSONL and, next to it, the drop report JSON.
pub fn write_plan(plan: &BatchPlan, plan_path: &Path, drops_path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(plan_path).map_err(|e| Error::io(plan_path, e))?);
    for (n, b) in plan.batches.iter().enumerate() {
        let line = PlanLine {
            batch_id: n,
            pair_indices: b.pair_indices.clone(),
            domain: b.domain.clone(),
            source_clusters: b.source_clusters.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(plan_path, e))?;
    }
    out.flush().map_err(|e| Error::io(plan_path, e))?;
    let report = serde_json::json!({ "dropped": plan.dropped.len(), "indices": plan.dropped });
    std::fs::write(drops_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(drops_path, e))
}

pub fn read_plan(plan_path: &Path, drops_path: Option<&Path>) -> Result<BatchPlan> {
    let file = std::fs::File::open(plan_path).map_err(|e| Error::io(plan_path, e))?;
    let mut batches = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(plan_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PlanLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: n + 1,
            message: e.to_string(),
        })?;
        batches.push(Batch {
            pair_indices: p.pair_indices,
            source_clusters: p.source_clusters,
            domain: p.domain,
        });
    }
    let dropped = match drops_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            serde_json::from_value(v["indices"].clone())?
        }
        None => Vec::new(),
    };
    let batch_size = batches.iter().map(|b| b.pair_indices.len()).max().unwrap_or(0);
    Ok(BatchPlan {
        batch_size,
        batches,
        dropped,
    })
}
