//! Retrieval evaluation and the analyses built on it: NDCG@10 under
//! test-time context strategies, batch hardness, IDF divergence, context-size
//! sweeps and cross-domain context matrices.

use crate::data::{EmbeddingMatrix, PairDataset, TextRecord, Vocab, TEXT_SEPARATOR};
use crate::encoders::{Biencoder, CdeModel, ContextSet, Model};
use crate::surrogate::{fnv1a64, idf, Surrogate};
use crate::{par, Error, Result};
use cde_autograd::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

/// Documents for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
    /// Graded relevance by document id; absent ids are grade 0.
    pub relevance: BTreeMap<String, u32>,
}

impl RankedList {
    /// Sorts by descending score; equal scores go to the lower document id.
    pub fn new(query_id: impl Into<String>, mut scored: Vec<(String, f64)>, relevance: BTreeMap<String, u32>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self {
            query_id: query_id.into(),
            ranking: scored,
            relevance,
        }
    }

    pub fn grade(&self, doc: &str) -> u32 {
        self.relevance.get(doc).copied().unwrap_or(0)
    }

    pub fn has_relevant(&self) -> bool {
        self.relevance.values().any(|&g| g > 0)
    }
}

/// `Σ_{r=1..k} gain_r / log2(r + 1)`.
pub fn dcg_at_k(gains: &[f64], k: usize) -> f64 {
    gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum()
}

/// `None` when the query has no relevant document.
pub fn ndcg_at_k(ranked: &RankedList, k: usize) -> Option<f64> {
    if !ranked.has_relevant() {
        return None;
    }
    let gains: Vec<f64> = ranked.ranking.iter().take(k).map(|(d, _)| ranked.grade(d) as f64).collect();
    let mut ideal: Vec<f64> = ranked.relevance.values().map(|&g| g as f64).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    Some(dcg_at_k(&gains, k) / dcg_at_k(&ideal, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub record: TextRecord,
    pub relevance: BTreeMap<String, u32>,
}

/// One corpus with its queries; ranking is within the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDomain {
    pub name: String,
    pub docs: Vec<TextRecord>,
    pub queries: Vec<EvalQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTask {
    pub domains: Vec<EvalDomain>,
}

impl RetrievalTask {
    /// Each domain's documents form its corpus; a query's only relevant
    /// document is its own pair's.
    pub fn from_pairs(ds: &PairDataset) -> Self {
        let domains = ds
            .indices_by_domain()
            .into_iter()
            .map(|(name, idx)| EvalDomain {
                name,
                docs: idx.iter().map(|&i| ds.pairs[i].document.clone()).collect(),
                queries: idx
                    .iter()
                    .map(|&i| EvalQuery {
                        record: ds.pairs[i].query.clone(),
                        relevance: BTreeMap::from([(ds.pairs[i].document.id.clone(), 1)]),
                    })
                    .collect(),
            })
            .collect();
        Self { domains }
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }
}

/// Per-domain random split of pair indices into `(train, test)`; each side
/// keeps dataset order.
pub fn split_pairs(ds: &PairDataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (name, mut idx) in ds.indices_by_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()));
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocContext {
    Null,
    RandomInDomain,
    TopK,
    /// As many random corpus documents as the model has slots.
    FullSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryContext {
    Null,
    RandomInDomain,
    TopK,
}

/// Corpus that context documents are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPool {
    InDomain,
    Domain(String),
    /// Domain `i` draws from domain `i + 1` (wrapping), so no domain sees its own documents.
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceStrategy {
    pub doc_context: DocContext,
    pub query_context: QueryContext,
    pub k: usize,
    pub seed: u64,
    pub pool: ContextPool,
}

impl InferenceStrategy {
    pub fn null_null() -> Self {
        Self {
            doc_context: DocContext::Null,
            query_context: QueryContext::Null,
            k: 0,
            seed: 0,
            pool: ContextPool::InDomain,
        }
    }

    /// Documents and queries share one random in-domain sample of `k` documents.
    pub fn random_in_domain(k: usize, seed: u64) -> Self {
        Self {
            doc_context: DocContext::RandomInDomain,
            query_context: QueryContext::RandomInDomain,
            k,
            seed,
            pool: ContextPool::InDomain,
        }
    }

    pub fn with_pool(self, pool: ContextPool) -> Self {
        Self { pool, ..self }
    }

    pub fn name(&self) -> String {
        let doc = match self.doc_context {
            DocContext::Null => "null",
            DocContext::RandomInDomain => "random_in_domain",
            DocContext::TopK => "topk",
            DocContext::FullSample => "full_sample",
        };
        let query = match self.query_context {
            QueryContext::Null => "null",
            QueryContext::RandomInDomain => "random_in_domain",
            QueryContext::TopK => "topk",
        };
        let pool = match &self.pool {
            ContextPool::InDomain => String::new(),
            ContextPool::Domain(d) => format!("@{d}"),
            ContextPool::Rotated => "@rotated".into(),
        };
        format!("{doc}-{query}{pool}")
    }

    fn needs_retriever(&self) -> bool {
        self.doc_context == DocContext::TopK || self.query_context == QueryContext::TopK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub domain: String,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub mean_ndcg10: f64,
    pub per_query: Vec<QueryResult>,
    pub skipped: usize,
}

impl EvalReport {
    fn assemble(strategy: String, results: Vec<Option<QueryResult>>) -> Self {
        let skipped = results.iter().filter(|r| r.is_none()).count();
        let per_query: Vec<QueryResult> = results.into_iter().flatten().collect();
        let mean_ndcg10 = mean(per_query.iter().map(|r| r.ndcg10));
        Self {
            strategy,
            mean_ndcg10,
            per_query,
            skipped,
        }
    }

    pub fn domain_mean(&self, domain: &str) -> f64 {
        mean(self.per_query.iter().filter(|r| r.domain == domain).map(|r| r.ndcg10))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn rank_domain<T: Real>(domain: &EvalDomain, queries: &Tensor<T>, docs: &Tensor<T>) -> Vec<Option<QueryResult>> {
    par::map_range(domain.queries.len(), |qi| {
        let q = &domain.queries[qi];
        let scored = domain
            .docs
            .iter()
            .enumerate()
            .map(|(j, d)| (d.id.clone(), dot(queries.row(qi), docs.row(j))))
            .collect();
        let ranked = RankedList::new(q.record.id.clone(), scored, q.relevance.clone());
        ndcg_at_k(&ranked, 10).map(|ndcg10| QueryResult {
            query_id: q.record.id.clone(),
            domain: domain.name.clone(),
            ndcg10,
        })
    })
}

fn texts(records: impl Iterator<Item = impl std::ops::Deref<Target = TextRecord>>) -> Vec<String> {
    records.map(|r| r.prefixed(TEXT_SEPARATOR)).collect()
}

pub fn evaluate_biencoder<T: Real>(model: &Biencoder<T>, task: &RetrievalTask) -> Result<EvalReport> {
    let mut results = Vec::new();
    for domain in &task.domains {
        let q = model.embed_all(&texts(domain.queries.iter().map(|q| &q.record)))?;
        let d = model.embed_all(&texts(domain.docs.iter()))?;
        results.extend(rank_domain(domain, &q, &d));
    }
    Ok(EvalReport::assemble(InferenceStrategy::null_null().name(), results))
}

/// Lexical reference: the surrogate's hashed TF-IDF vectors as the encoder.
pub fn evaluate_lexical(surrogate: &Surrogate, task: &RetrievalTask) -> Result<EvalReport> {
    let embed = |texts: Vec<String>| -> Result<Tensor<f64>> {
        let rows: Vec<Vec<f64>> = texts.iter().map(|t| surrogate.embed(t)).collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let mut results = Vec::new();
    for domain in &task.domains {
        let q = embed(texts(domain.queries.iter().map(|q| &q.record)))?;
        let d = embed(texts(domain.docs.iter()))?;
        results.extend(rank_domain(domain, &q, &d));
    }
    Ok(EvalReport::assemble("lexical".into(), results))
}

fn pool_index(task: &RetrievalTask, eval_domain: usize, pool: &ContextPool) -> Result<usize> {
    match pool {
        ContextPool::InDomain => Ok(eval_domain),
        ContextPool::Rotated => Ok((eval_domain + 1) % task.domains.len()),
        ContextPool::Domain(name) => task
            .domain_index(name)
            .ok_or_else(|| Error::InvalidInput(format!("context domain {name:?} is not in the evaluation set"))),
    }
}

/// `n` distinct positions of `0..len`, seeded by the pool's name so every
/// evaluation domain sees the same sample from a given pool.
fn random_sample(len: usize, n: usize, seed: u64, pool_name: &str) -> Vec<usize> {
    let n = n.min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(pool_name.as_bytes()).rotate_left(17));
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// `k` pool positions nearest to `query` under the retriever, best first,
/// ties to the lower position.
fn top_k(query: &[f64], pool: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .map(|(j, d)| (j, query.iter().zip(d).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(j, _)| j).collect()
}

struct PoolCache<T> {
    name: String,
    m1: Tensor<T>,
    ids: Vec<String>,
    lexical: Vec<Vec<f64>>,
}

impl<T: Real> PoolCache<T> {
    fn context(&self, model: &CdeModel<T>, picks: &[usize]) -> Result<ContextSet<T>> {
        let mut rows = Tensor::zeros(picks.len(), self.m1.cols());
        for (r, &p) in picks.iter().enumerate() {
            rows.row_mut(r).copy_from_slice(self.m1.row(p));
        }
        model.context_from_rows(&rows, picks.iter().map(|&p| Some(self.ids[p].clone())).collect())
    }
}

/// Contextual evaluation. A context shared by a whole side is built once; a
/// top-k context is built per text.
pub fn evaluate_cde<T: Real>(
    model: &CdeModel<T>,
    task: &RetrievalTask,
    strategy: &InferenceStrategy,
    retriever: Option<&Surrogate>,
) -> Result<EvalReport> {
    if strategy.needs_retriever() && retriever.is_none() {
        return Err(Error::Config("top-k context selection needs a retriever".into()));
    }
    let cap = model.cfg.context_size;
    let k = strategy.k.min(cap);
    let mut pools: BTreeMap<usize, PoolCache<T>> = BTreeMap::new();
    let mut results = Vec::new();
    for (di, domain) in task.domains.iter().enumerate() {
        let pi = pool_index(task, di, &strategy.pool)?;
        if !pools.contains_key(&pi) {
            let src = &task.domains[pi];
            let ids: Vec<Vec<usize>> = src.docs.iter().map(|d| model.context_doc_ids(&d.prefixed(TEXT_SEPARATOR))).collect();
            let lexical = match retriever {
                Some(r) if strategy.needs_retriever() => src.docs.iter().map(|d| r.embed(&d.prefixed(TEXT_SEPARATOR))).collect(),
                _ => Vec::new(),
            };
            pools.insert(
                pi,
                PoolCache {
                    name: src.name.clone(),
                    m1: model.m1_embed_docs(&ids)?,
                    ids: src.docs.iter().map(|d| d.id.clone()).collect(),
                    lexical,
                },
            );
        }
        let pool = &pools[&pi];
        let shared = random_sample(pool.ids.len(), k, strategy.seed, &pool.name);
        let full = random_sample(pool.ids.len(), cap, strategy.seed, &pool.name);

        let embed_side = |records: Vec<&TextRecord>, picks: Option<&[usize]>| -> Result<Tensor<T>> {
            let texts = texts(records.into_iter());
            match picks {
                Some(p) => model.embed_all(&texts, &pool.context(model, p)?),
                None => {
                    let r = retriever.expect("checked above");
                    let rows = par::map(&texts, |t| {
                        let picks = top_k(&r.embed(t), &pool.lexical, k);
                        model.embed(t, &pool.context(model, &picks)?)
                    });
                    let mut out = Tensor::zeros(texts.len(), model.cfg.dim);
                    for (i, row) in rows.into_iter().enumerate() {
                        out.row_mut(i).copy_from_slice(&row?);
                    }
                    Ok(out)
                }
            }
        };
        let doc_picks: Option<&[usize]> = match strategy.doc_context {
            DocContext::Null => Some(&[]),
            DocContext::RandomInDomain => Some(&shared),
            DocContext::FullSample => Some(&full),
            DocContext::TopK => None,
        };
        let query_picks: Option<&[usize]> = match strategy.query_context {
            QueryContext::Null => Some(&[]),
            QueryContext::RandomInDomain => Some(&shared),
            QueryContext::TopK => None,
        };
        let d = embed_side(domain.docs.iter().collect(), doc_picks)?;
        let q = embed_side(domain.queries.iter().map(|q| &q.record).collect(), query_picks)?;
        results.extend(rank_domain(domain, &q, &d));
    }
    Ok(EvalReport::assemble(strategy.name(), results))
}

/// A biencoder ignores the strategy and reports as `null-null`.
pub fn evaluate_retrieval(
    model: &Model,
    task: &RetrievalTask,
    strategy: &InferenceStrategy,
    retriever: Option<&Surrogate>,
) -> Result<EvalReport> {
    match model {
        Model::Biencoder(m) => evaluate_biencoder(m, task),
        Model::Cde(m) => evaluate_cde(m, task, strategy, retriever),
    }
}

/// Mean over rows `i` of the mean surrogate score `ψ(q_i)·φ(d_j)`, `j ≠ i`.
/// Zero for batches of fewer than two pairs.
pub fn batch_hardness(batch: &[usize], phi: &EmbeddingMatrix, psi: &EmbeddingMatrix) -> f64 {
    let b = batch.len();
    if b < 2 {
        return 0.0;
    }
    let row_means = batch.iter().enumerate().map(|(a, &i)| {
        let q = psi.row(i);
        let s: f64 = batch
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != a)
            .map(|(_, &j)| q.iter().zip(phi.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>())
            .sum();
        s / (b - 1) as f64
    });
    row_means.sum::<f64>() / b as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[default]
    Cosine,
    /// `Σ|a − b| / Σ(a + b)`.
    L1,
}

/// Distance between the IDF vectors of two corpora over their union
/// vocabulary; a term unseen in one corpus takes that corpus's unseen IDF.
pub fn idf_divergence(a: &Vocab, b: &Vocab, kind: DivergenceKind) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("IDF divergence of an empty vocabulary".into()));
    }
    let terms: BTreeSet<&str> = a.terms().iter().chain(b.terms()).map(String::as_str).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = terms.iter().map(|t| (idf(a, t), idf(b, t))).unzip();
    Ok(match kind {
        DivergenceKind::Cosine => {
            let xy: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 - xy / (nx * ny)).max(0.0)
        }
        DivergenceKind::L1 => {
            let num: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum();
            let den: f64 = x.iter().zip(&y).map(|(p, q)| p.abs() + q.abs()).sum();
            num / den
        }
    })
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n as f64, ys.iter().sum::<f64>() / n as f64);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfPoint {
    pub domain: String,
    pub divergence: f64,
    /// Model NDCG@10 minus the lexical reference on this domain.
    pub delta_ndcg10: f64,
}

pub fn write_idf_csv(points: &[IdfPoint], path: &Path) -> Result<()> {
    write_csv(
        path,
        "domain,divergence,delta_ndcg10",
        points.iter().map(|p| format!("{},{},{}", p.domain, p.divergence, p.delta_ndcg10)),
    )
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(out, "{r}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub context_size: usize,
    pub mean_ndcg10: f64,
}

/// One random in-domain evaluation per size; unused slots stay null, so size
/// 0 is the null-null evaluation.
pub fn context_size_sweep<T: Real>(model: &CdeModel<T>, task: &RetrievalTask, sizes: &[usize], seed: u64) -> Result<Vec<SweepPoint>> {
    sizes
        .iter()
        .map(|&size| {
            if size > model.cfg.context_size {
                return Err(Error::InvalidInput(format!(
                    "context size {size} exceeds the model's {} slots",
                    model.cfg.context_size
                )));
            }
            let r = evaluate_cde(model, task, &InferenceStrategy::random_in_domain(size, seed), None)?;
            Ok(SweepPoint {
                context_size: size,
                mean_ndcg10: r.mean_ndcg10,
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    write_csv(
        path,
        "context_size,mean_ndcg10",
        points.iter().map(|p| format!("{},{}", p.context_size, p.mean_ndcg10)),
    )
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let bad = || Error::Format(format!("bad sweep row {l:?}"));
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok(SweepPoint {
                context_size: a.parse().map_err(|_| bad())?,
                mean_ndcg10: b.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Rows are context domains, columns evaluation domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMatrix {
    pub domains: Vec<String>,
    pub ndcg10: Vec<Vec<f64>>,
    /// Cells within `HIGHLIGHT_MARGIN` of their column's best value.
    pub highlight: Vec<Vec<bool>>,
}

pub const HIGHLIGHT_MARGIN: f64 = 0.01;

impl DomainMatrix {
    pub fn from_values(domains: Vec<String>, ndcg10: Vec<Vec<f64>>) -> Self {
        let n = domains.len();
        let col_max: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| ndcg10[i][j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let highlight = (0..n)
            .map(|i| (0..n).map(|j| ndcg10[i][j] >= col_max[j] - HIGHLIGHT_MARGIN).collect())
            .collect();
        Self {
            domains,
            ndcg10,
            highlight,
        }
    }

    pub fn diagonal_highlighted(&self) -> bool {
        (0..self.domains.len()).all(|j| self.highlight[j][j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.domains.len();
        let rows = (0..n).flat_map(|i| {
            (0..n).map(move |j| {
                format!(
                    "{},{},{},{}",
                    self.domains[i], self.domains[j], self.ndcg10[i][j], self.highlight[i][j] as u8
                )
            })
        });
        write_csv(path, "context_domain,eval_domain,mean_ndcg10,highlight", rows)
    }
}

/// Cell `(i, j)`: evaluation on domain `j` with `k` random documents of
/// domain `i` as context on both sides.
pub fn cross_domain_context_matrix<T: Real>(model: &CdeModel<T>, task: &RetrievalTask, k: usize, seed: u64) -> Result<DomainMatrix> {
    let names: Vec<String> = task.domains.iter().map(|d| d.name.clone()).collect();
    let values = names
        .iter()
        .map(|ctx| {
            let s = InferenceStrategy::random_in_domain(k, seed).with_pool(ContextPool::Domain(ctx.clone()));
            let r = evaluate_cde(model, task, &s, None)?;
            Ok(names.iter().map(|d| r.domain_mean(d)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(DomainMatrix::from_values(names, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;

    fn ranked(rel_positions: &[usize], n: usize) -> RankedList {
        let scored = (0..n).map(|i| (format!("d{i:02}"), (n - i) as f64)).collect();
        let relevance = rel_positions.iter().map(|&p| (format!("d{p:02}"), 1)).collect();
        RankedList::new("q", scored, relevance)
    }

    #[test]
    fn ndcg_hand_cases() {
        assert_eq!(ndcg_at_k(&ranked(&[0], 20), 10), Some(1.0));
        assert!((ndcg_at_k(&ranked(&[1], 20), 10).unwrap() - 0.6309).abs() < 1e-4);
        let two = ndcg_at_k(&ranked(&[0, 2], 20), 10).unwrap();
        assert!((two - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((two - 0.9197).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&ranked(&[], 20), 10), None);
        assert_eq!(ndcg_at_k(&ranked(&[15], 20), 10), Some(0.0));
    }

    #[test]
    fn ties_break_to_lower_id() {
        let r = RankedList::new(
            "q",
            vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)],
            BTreeMap::new(),
        );
        let order: Vec<&str> = r.ranking.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    #[test]
    fn hardness_extremes() {
        let ids = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        let eye = EmbeddingMatrix::from_rows(3, vec![vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]], ids(3)).unwrap();
        assert_eq!(batch_hardness(&[0, 1, 2], &eye, &eye), 0.0);
        let same = EmbeddingMatrix::from_rows(2, vec![vec![0.6, 0.8]; 3], ids(3)).unwrap();
        assert!((batch_hardness(&[0, 1, 2], &same, &same) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn idf_divergence_orders_overlap() {
        let a = build_vocab(&["x y z", "x y", "w z"]);
        let disjoint = build_vocab(&["p q r", "p q", "s r"]);
        let half = build_vocab(&["x y r", "x q", "w s"]);
        for kind in [DivergenceKind::Cosine, DivergenceKind::L1] {
            let same = idf_divergence(&a, &a, kind).unwrap();
            let far = idf_divergence(&a, &disjoint, kind).unwrap();
            let mid = idf_divergence(&a, &half, kind).unwrap();
            assert!(same.abs() < 1e-12);
            assert!(far > 0.0 && far <= 1.0);
            assert!(same < mid && mid < far, "{kind:?}: {same} {mid} {far}");
            assert_eq!(mid, idf_divergence(&half, &a, kind).unwrap());
        }
        assert!(idf_divergence(&a, &build_vocab::<&str>(&[]), DivergenceKind::Cosine).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1., 1.], &[0., 1.]), None);
    }

    #[test]
    fn highlight_rule() {
        let m = DomainMatrix::from_values(vec!["a".into(), "b".into()], vec![vec![0.5, 0.3], vec![0.495, 0.4]]);
        assert_eq!(m.highlight, vec![vec![true, false], vec![true, true]]);
        assert!(m.diagonal_highlighted());
    }

    #[test]
    fn split_is_per_domain_and_disjoint() {
        let ds = crate::data::generate_synthetic_corpus(&crate::data::SyntheticConfig::small(1));
        let (train, test) = split_pairs(&ds, 0.25, 9).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 8);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!((train.clone(), test.clone()), split_pairs(&ds, 0.25, 9).unwrap());
    }
}
