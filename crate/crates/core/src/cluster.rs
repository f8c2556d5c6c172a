//! Paired K-Means over query/document pairs.
//!
//! Each pair becomes two concatenated points, `u = φ(d) ⊕ ψ(q)` and
//! `v = ψ(q) ⊕ φ(d)`. Both are assigned jointly to the centroid minimising
//! `‖u − c‖² + ‖v − c‖²`, so every pair lands in exactly one cluster, and the
//! centroid update is the mean of all member `u` and `v` vectors.

use crate::data::EmbeddingMatrix;
use crate::{par, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PairPoint {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pair_index: usize,
}

impl PairPoint {
    pub fn new(phi_d: &[f32], psi_q: &[f32], pair_index: usize) -> Result<Self> {
        check_dims("PairPoint", phi_d.len(), psi_q.len())?;
        let mut u = Vec::with_capacity(2 * phi_d.len());
        u.extend(phi_d.iter().map(|&x| x as f64));
        u.extend(psi_q.iter().map(|&x| x as f64));
        let mut v = Vec::with_capacity(u.len());
        v.extend(psi_q.iter().map(|&x| x as f64));
        v.extend(phi_d.iter().map(|&x| x as f64));
        Ok(Self { u, v, pair_index })
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }
}

/// One point per row of the aligned `(φ, ψ)` matrices.
pub fn pair_points(phi: &EmbeddingMatrix, psi: &EmbeddingMatrix) -> Result<Vec<PairPoint>> {
    if phi.rows() != psi.rows() {
        return Err(Error::InvalidInput(format!(
            "φ has {} rows but ψ has {}",
            phi.rows(),
            psi.rows()
        )));
    }
    check_dims("pair_points", phi.dim(), psi.dim())?;
    (0..phi.rows()).map(|i| PairPoint::new(phi.row(i), psi.row(i), i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub c: Vec<f64>,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Clusters per domain when `per_domain`, otherwise in total.
    pub k: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub per_domain: bool,
    /// Stop once the relative objective improvement falls below this.
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 100,
            restarts: 3,
            seed: 0,
            per_domain: true,
            tol: 1e-4,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("cluster.k, cluster.max_iters and cluster.restarts must be >= 1".into()));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("cluster.tol must be finite and >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// One Lloyd run: which domain, which restart, and its objective per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub domain: Option<String>,
    pub restart: usize,
    pub objectives: Vec<f64>,
    pub duplicate_seeding: bool,
}

impl RunTrace {
    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per pair index.
    pub assignment: Vec<usize>,
    pub k: usize,
    pub objective: f64,
    pub centroids: Vec<Centroid>,
    /// Domain label per cluster (`None` when clustering ignored domains).
    pub cluster_domains: Vec<Option<String>>,
    /// Every run, including the ones that lost to a better restart.
    pub runs: Vec<RunTrace>,
}

impl ClusterAssignment {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn check_dims(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("{op}: dimension mismatch {a} vs {b}")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖φ(d_a) − ψ(q_b)‖ + ‖φ(d_b) − ψ(q_a)‖`, each argument being `(φ(d), ψ(q))`.
pub fn pair_metric(a: (&[f32], &[f32]), b: (&[f32], &[f32])) -> Result<f64> {
    let d = a.0.len();
    for (n, len) in [a.1.len(), b.0.len(), b.1.len()].into_iter().enumerate() {
        if len != d {
            return Err(Error::InvalidInput(format!(
                "pair_metric: vector {} has dim {len}, expected {d}",
                n + 1
            )));
        }
    }
    Ok(dist_f32(a.0, b.1) + dist_f32(b.0, a.1))
}

/// `‖u − c‖² + ‖v − c‖²`.
pub fn point_to_centroid_cost(p: &PairPoint, c: &[f64]) -> Result<f64> {
    check_dims("point_to_centroid_cost", p.dim(), c.len())?;
    Ok(sq_dist(&p.u, c) + sq_dist(&p.v, c))
}

/// Seeding result; `duplicates` is set when fewer than `k` distinct vectors
/// existed and some seeds had to repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub centroids: Vec<Centroid>,
    pub duplicates: bool,
}

/// k-means++ over the pair midpoints `(u_i + v_i) / 2`.
///
/// Centroids are means of whole pairs, so they live in the span of the
/// midpoints, and `‖u − c‖² + ‖v − c‖² = 2‖m − c‖² + ‖u − v‖² / 2`: the
/// paired objective is plain K-Means on the midpoints plus a constant.
/// Seeding on raw `u`/`v` vectors would add a per-seed offset to the first
/// assignment.
pub fn kmeans_init(points: &[PairPoint], k: usize, seed: u64) -> Result<InitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeans_init_with(points, k, &mut rng)
}

fn midpoint(p: &PairPoint) -> Vec<f64> {
    p.u.iter().zip(&p.v).map(|(a, b)| (a + b) / 2.0).collect()
}

fn kmeans_init_with(points: &[PairPoint], k: usize, rng: &mut ChaCha8Rng) -> Result<InitResult> {
    if points.is_empty() {
        return Err(Error::InvalidInput("kmeans_init: no points".into()));
    }
    if k == 0 {
        return Err(Error::Config("kmeans_init: k must be >= 1".into()));
    }
    let mids: Vec<Vec<f64>> = points.iter().map(midpoint).collect();
    let mut chosen: Vec<Vec<f64>> = vec![mids[rng.random_range(0..mids.len())].clone()];
    let mut d2: Vec<f64> = mids.iter().map(|x| sq_dist(x, &chosen[0])).collect();
    let mut duplicates = false;
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&x| x > 0.0).unwrap();
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            duplicates = true;
            rng.random_range(0..mids.len())
        };
        let c = mids[pick].clone();
        for (d, x) in d2.iter_mut().zip(&mids) {
            *d = d.min(sq_dist(x, &c));
        }
        chosen.push(c);
    }
    Ok(InitResult {
        centroids: chosen
            .into_iter()
            .map(|c| Centroid { c, member_count: 0 })
            .collect(),
        duplicates,
    })
}

/// Sum of point-to-centroid costs, recomputed from scratch.
pub fn clustering_objective(points: &[PairPoint], assignment: &[usize], centroids: &[Centroid]) -> Result<f64> {
    if assignment.len() != points.len() {
        return Err(Error::InvalidInput(format!(
            "clustering_objective: {} assignments for {} points",
            assignment.len(),
            points.len()
        )));
    }
    let mut total = 0.0;
    for (p, &a) in points.iter().zip(assignment) {
        let c = centroids.get(a).ok_or_else(|| {
            Error::InvalidInput(format!("pair {} is assigned to missing cluster {a}", p.pair_index))
        })?;
        total += point_to_centroid_cost(p, &c.c)?;
    }
    Ok(total)
}

/// Nearest centroid per point (ties to the lower id) and its cost.
fn assign(points: &[PairPoint], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    par::map(points, |p| {
        let mut best = (0, f64::INFINITY);
        for (b, c) in centroids.iter().enumerate() {
            let cost = sq_dist(&p.u, c) + sq_dist(&p.v, c);
            if cost < best.1 {
                best = (b, cost);
            }
        }
        best
    })
}

fn means(points: &[PairPoint], assignment: &[usize], k: usize) -> Vec<(Vec<f64>, usize)> {
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        members[a].push(i);
    }
    let dim = points[0].dim();
    par::map(&members, |idx| {
        let mut acc = vec![0.0f64; dim];
        for &i in idx {
            for ((s, &a), &b) in acc.iter_mut().zip(&points[i].u).zip(&points[i].v) {
                *s += a + b;
            }
        }
        if !idx.is_empty() {
            let n = 2.0 * idx.len() as f64;
            acc.iter_mut().for_each(|s| *s /= n);
        }
        (acc, idx.len())
    })
}

/// Mean update with empty-cluster repair: an empty cluster takes over the
/// costliest pair from a cluster that can spare one, centred on that pair.
fn update(points: &[PairPoint], assignment: &mut [usize], costs: &mut [f64], k: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(b.cmp(&a)));
        if let Some(i) = donor {
            counts[assignment[i]] -= 1;
            counts[empty] += 1;
            assignment[i] = empty;
            costs[i] = sq_dist(&points[i].u, &points[i].v) / 2.0;
        }
    }
    means(points, assignment, k).into_iter().map(|(c, _)| c).collect()
}

struct Run {
    assignment: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    objective: f64,
    trace: RunTrace,
}

fn lloyd(points: &[PairPoint], k: usize, cfg: &ClusterConfig, rng: &mut ChaCha8Rng) -> Result<Run> {
    let init = kmeans_init_with(points, k, rng)?;
    let mut centroids: Vec<Vec<f64>> = init.centroids.into_iter().map(|c| c.c).collect();
    let (mut assignment, mut costs): (Vec<usize>, Vec<f64>) = assign(points, &centroids).into_iter().unzip();
    let mut objective: f64 = costs.iter().sum();
    let mut objectives = vec![objective];

    for _ in 0..cfg.max_iters {
        centroids = update(points, &mut assignment, &mut costs, k);
        let (next, next_costs): (Vec<usize>, Vec<f64>) = assign(points, &centroids).into_iter().unzip();
        let next_obj: f64 = next_costs.iter().sum();
        objectives.push(next_obj);
        let improvement = objective - next_obj;
        let stable = next == assignment;
        assignment = next;
        costs = next_costs;
        objective = next_obj;
        if stable || improvement <= cfg.tol * objective.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    // Final mean update so the returned centroids are the cluster means.
    centroids = update(points, &mut assignment, &mut costs, k);
    let cents: Vec<Centroid> = centroids.iter().map(|c| Centroid { c: c.clone(), member_count: 0 }).collect();
    objective = clustering_objective(points, &assignment, &cents)?;
    objectives.push(objective);

    Ok(Run {
        assignment,
        centroids,
        objective,
        trace: RunTrace {
            domain: None,
            restart: 0,
            objectives,
            duplicate_seeding: init.duplicates,
        },
    })
}

fn run_seed(seed: u64, group: usize, restart: usize) -> u64 {
    seed ^ (group as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (restart as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Best-of-`restarts` Lloyd clustering of the pairs, independently per domain
/// when `cfg.per_domain`. `domains` holds one label per pair.
pub fn cluster_pairs(
    phi: &EmbeddingMatrix,
    psi: &EmbeddingMatrix,
    domains: &[String],
    cfg: &ClusterConfig,
) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let points = pair_points(phi, psi)?;
    if points.is_empty() {
        return Err(Error::InvalidInput("cluster_pairs: empty dataset".into()));
    }
    if cfg.per_domain && domains.len() != points.len() {
        return Err(Error::InvalidInput(format!(
            "cluster_pairs: {} domain labels for {} pairs",
            domains.len(),
            points.len()
        )));
    }

    let groups: Vec<(Option<String>, Vec<usize>)> = if cfg.per_domain {
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, d) in domains.iter().enumerate() {
            by.entry(d).or_default().push(i);
        }
        by.into_iter().map(|(d, idx)| (Some(d.to_string()), idx)).collect()
    } else {
        vec![(None, (0..points.len()).collect())]
    };

    let mut assignment = vec![usize::MAX; points.len()];
    let mut centroids = Vec::new();
    let mut cluster_domains = Vec::new();
    let mut runs = Vec::new();

    for (g, (domain, idx)) in groups.iter().enumerate() {
        if cfg.k > idx.len() {
            return Err(Error::InvalidInput(format!(
                "cluster_pairs: k={} exceeds the {} pairs{}",
                cfg.k,
                idx.len(),
                domain.as_ref().map(|d| format!(" of domain {d:?}")).unwrap_or_default()
            )));
        }
        let sub: Vec<PairPoint> = idx.iter().map(|&i| points[i].clone()).collect();
        let mut best: Option<Run> = None;
        for r in 0..cfg.restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed(cfg.seed, g, r));
            let mut run = lloyd(&sub, cfg.k, cfg, &mut rng)?;
            run.trace.domain = domain.clone();
            run.trace.restart = r;
            runs.push(run.trace.clone());
            if best.as_ref().is_none_or(|b| run.objective < b.objective) {
                best = Some(run);
            }
        }
        let best = best.expect("restarts >= 1");
        let offset = centroids.len();
        for (local, &i) in idx.iter().enumerate() {
            assignment[i] = offset + best.assignment[local];
        }
        for (b, c) in best.centroids.into_iter().enumerate() {
            let member_count = best.assignment.iter().filter(|&&a| a == b).count();
            centroids.push(Centroid { c, member_count });
            cluster_domains.push(domain.clone());
        }
    }

    let objective = clustering_objective(&points, &assignment, &centroids)?;
    Ok(ClusterAssignment {
        k: centroids.len(),
        assignment,
        objective,
        centroids,
        cluster_domains,
        runs,
    })
}

/// Eq.-2-style difficulty of a batch: `Σ_{i≠j} φ(d_i)·ψ(q_j) + φ(d_j)·ψ(q_i)`
/// over ordered pairs `(i, j)`, so each unordered pair contributes twice.
pub fn batch_adversarial_score(batch: &[usize], phi: &EmbeddingMatrix, psi: &EmbeddingMatrix) -> f64 {
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    let mut total = 0.0;
    for (a, &i) in batch.iter().enumerate() {
        for (b, &j) in batch.iter().enumerate() {
            if a != b {
                total += dot(phi.row(i), psi.row(j)) + dot(phi.row(j), psi.row(i));
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster: usize,
    pub pairs: Vec<usize>,
    pub objective_share: f64,
    pub domain: Option<String>,
    pub centroid: Vec<f64>,
}

/// One JSONL line per cluster: id, member pairs and share of the objective.
pub fn write_cluster_file(path: &Path, ca: &ClusterAssignment, points: &[PairPoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (b, pairs) in ca.members().into_iter().enumerate() {
        let mut cost = 0.0;
        for &i in &pairs {
            cost += point_to_centroid_cost(&points[i], &ca.centroids[b].c)?;
        }
        let rec = ClusterRecord {
            cluster: b,
            pairs,
            objective_share: if ca.objective > 0.0 { cost / ca.objective } else { 0.0 },
            domain: ca.cluster_domains[b].clone(),
            centroid: ca.centroids[b].c.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Rebuilds an assignment from a cluster file (per-run traces are not stored).
pub fn read_cluster_file(path: &Path, n_pairs: usize) -> Result<ClusterAssignment> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut recs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClusterRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: n + 1,
            message: e.to_string(),
        })?;
        recs.push(rec);
    }
    recs.sort_by_key(|r| r.cluster);
    let mut assignment = vec![usize::MAX; n_pairs];
    for (b, r) in recs.iter().enumerate() {
        if r.cluster != b {
            return Err(Error::Format(format!("cluster ids are not dense: expected {b}, found {}", r.cluster)));
        }
        for &i in &r.pairs {
            let slot = assignment
                .get_mut(i)
                .ok_or_else(|| Error::InvalidInput(format!("cluster {b}: pair index {i} out of range")))?;
            if *slot != usize::MAX {
                return Err(Error::InvalidInput(format!("pair {i} appears in two clusters")));
            }
            *slot = b;
        }
    }
    if let Some(i) = assignment.iter().position(|&a| a == usize::MAX) {
        return Err(Error::InvalidInput(format!("pair {i} is not assigned to any cluster")));
    }
    Ok(ClusterAssignment {
        k: recs.len(),
        assignment,
        objective: f64::NAN,
        centroids: recs
            .iter()
            .map(|r| Centroid {
                c: r.centroid.clone(),
                member_count: r.pairs.len(),
            })
            .collect(),
        cluster_domains: recs.iter().map(|r| r.domain.clone()).collect(),
        runs: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            rows[0].len(),
            rows.iter().map(|r| r.to_vec()).collect(),
            (0..rows.len()).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn metric_examples() {
        let (e1, e2): (&[f32], &[f32]) = (&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(pair_metric((e1, e2), (e2, e1)).unwrap(), 0.0);
        let m = pair_metric((e1, e1), (e2, e2)).unwrap();
        assert!((m - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(pair_metric((e1, e1), (e1, e1)).unwrap(), 0.0);
        assert_eq!(pair_metric((e1, e2), (e2, e1)).unwrap(), pair_metric((e2, e1), (e1, e2)).unwrap());
        assert!(pair_metric((e1, &[1.0]), (e1, e1)).is_err());
    }

    #[test]
    fn centroid_cost_examples() {
        let p = PairPoint {
            u: vec![1.0, 0.0, 0.0, 0.0],
            v: vec![0.0, 0.0, 1.0, 0.0],
            pair_index: 0,
        };
        assert!((point_to_centroid_cost(&p, &[0.5, 0.0, 0.5, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(point_to_centroid_cost(&p, &[0.0; 3]).is_err());
        // At the mean the cost is ‖u − v‖² / 2.
        assert_eq!(point_to_centroid_cost(&p, &[0.5, 0.0, 0.5, 0.0]).unwrap(), sq_dist(&p.u, &p.v) / 2.0);
    }

    #[test]
    fn u_and_v_swap_halves() {
        let p = PairPoint::new(&[1.0, 2.0], &[3.0, 4.0], 0).unwrap();
        assert_eq!(p.u, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.v, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn init_is_seeded() {
        let phi = matrix(&[&[0.0, 1.0], &[1.0, 0.0], &[5.0, 5.0]]);
        let pts = pair_points(&phi, &phi).unwrap();
        let a = kmeans_init(&pts, 2, 4).unwrap();
        assert_eq!(a, kmeans_init(&pts, 2, 4).unwrap());
        let one = kmeans_init(&pts, 1, 9).unwrap();
        assert!(pts.iter().any(|p| midpoint(p) == one.centroids[0].c));
    }

    #[test]
    fn init_separates_far_blobs() {
        let mut rows: Vec<Vec<f32>> = (0..10).map(|i| vec![0.01 * i as f32, 0.0]).collect();
        rows.extend((0..10).map(|i| vec![50.0, 0.01 * i as f32]));
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = matrix(&refs);
        let pts = pair_points(&m, &m).unwrap();
        let split = (0..100)
            .filter(|&s| {
                let c = kmeans_init(&pts, 2, s).unwrap().centroids;
                (c[0].c[0] < 25.0) != (c[1].c[0] < 25.0)
            })
            .count();
        assert!(split >= 99, "{split}");
    }

    #[test]
    fn init_flags_duplicates() {
        let phi = matrix(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let pts = pair_points(&phi, &phi).unwrap();
        let r = kmeans_init(&pts, 3, 0).unwrap();
        assert_eq!(r.centroids.len(), 3);
        assert!(r.duplicates);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let phi = matrix(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]);
        let psi = matrix(&[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 0.0]]);
        let cfg = ClusterConfig {
            k: 1,
            per_domain: false,
            ..Default::default()
        };
        let ca = cluster_pairs(&phi, &psi, &[], &cfg).unwrap();
        let pts = pair_points(&phi, &psi).unwrap();
        let mut mean = vec![0.0; 4];
        for p in &pts {
            for j in 0..4 {
                mean[j] += (p.u[j] + p.v[j]) / 6.0;
            }
        }
        for (a, b) in ca.centroids[0].c.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        let total: f64 = pts.iter().map(|p| sq_dist(&p.u, &mean) + sq_dist(&p.v, &mean)).sum();
        assert!((ca.objective - total).abs() < 1e-12 * total);
    }

    #[test]
    fn best_restart_is_returned() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![(i as f32 * 0.37).sin(), (i as f32 * 1.3).cos()]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let phi = matrix(&refs);
        let psi = matrix(&refs[..].iter().rev().copied().collect::<Vec<_>>());
        let cfg = ClusterConfig {
            k: 3,
            per_domain: false,
            restarts: 3,
            seed: 11,
            ..Default::default()
        };
        let ca = cluster_pairs(&phi, &psi, &[], &cfg).unwrap();
        assert_eq!(ca.runs.len(), 3);
        for r in &ca.runs {
            assert!(ca.objective <= r.final_objective() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn errors_on_empty_and_oversized_k() {
        let empty = EmbeddingMatrix::empty(2).unwrap();
        let cfg = ClusterConfig {
            per_domain: false,
            k: 1,
            ..Default::default()
        };
        assert!(cluster_pairs(&empty, &empty, &[], &cfg).is_err());
        let phi = matrix(&[&[1.0, 0.0]]);
        let cfg = ClusterConfig { k: 2, ..cfg };
        assert!(cluster_pairs(&phi, &phi, &[], &cfg).is_err());
    }

    #[test]
    fn adversarial_score_examples() {
        let e1 = matrix(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(batch_adversarial_score(&[0], &e1, &e1), 0.0);
        assert_eq!(batch_adversarial_score(&[0, 1], &e1, &e1), 4.0);
        let phi = matrix(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let psi = matrix(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(batch_adversarial_score(&[0, 1], &phi, &psi), 0.0);
    }

    #[test]
    fn objective_rejects_unassigned() {
        let phi = matrix(&[&[1.0, 0.0]]);
        let pts = pair_points(&phi, &phi).unwrap();
        let c = vec![Centroid {
            c: vec![0.0; 4],
            member_count: 1,
        }];
        assert!(clustering_objective(&pts, &[1], &c).is_err());
        assert!(clustering_objective(&pts, &[], &c).is_err());
        assert_eq!(clustering_objective(&pts, &[0], &c).unwrap(), 4.0);
    }

    #[test]
    fn cluster_file_round_trip() {
        let phi = matrix(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0], &[0.1, 0.9]]);
        let labels = vec!["a".to_string(); 4];
        let cfg = ClusterConfig {
            k: 2,
            ..Default::default()
        };
        let ca = cluster_pairs(&phi, &phi, &labels, &cfg).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_cluster_file(f.path(), &ca, &pair_points(&phi, &phi).unwrap()).unwrap();
        let back = read_cluster_file(f.path(), 4).unwrap();
        assert_eq!(back.assignment, ca.assignment);
        assert_eq!(back.centroids, ca.centroids);
        assert_eq!(back.cluster_domains, ca.cluster_domains);
    }
}
