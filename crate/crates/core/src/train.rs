//! Contrastive training: masked InfoNCE, Adam with linear warmup and decay,
//! context subsampling, sequence dropout and two-stage gradient caching.

use crate::cluster::ClusterAssignment;
use crate::data::{EmbeddingMatrix, PairDataset, TEXT_SEPARATOR};
use crate::encoders::{dropout_mask, save_checkpoint, Biencoder, CdeModel, Model};
use crate::eval::batch_hardness;
use crate::filter::{build_loss_mask, FilterConfig, LossMask};
use crate::pack::{pack_batches, random_batch_plan, BatchPlan, PackingConfig};
use crate::{Error, Result};
use cde_autograd::{GradStore, MemoryMeter, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub seq_dropout_p: f64,
    pub context_k: usize,
    pub gradcache: bool,
    pub seed: u64,
    /// Adds the document-to-query direction to the loss.
    pub symmetric_loss: bool,
    /// Fixed run length; epochs repeat (re-packed) until it is reached.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            lr_peak: 2e-5,
            warmup_steps: 1000,
            epochs: 1,
            seq_dropout_p: 0.2,
            context_k: 256,
            gradcache: false,
            seed: 0,
            symmetric_loss: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Settings for minutes-long runs on the synthetic corpus: the default
    /// learning rate targets multi-day runs and barely moves a toy model.
    pub fn desk() -> Self {
        Self {
            lr_peak: 1e-3,
            epochs: 8,
            context_k: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("train.temperature must be > 0, got {}", self.temperature)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("train.warmup_steps must be >= 1".into()));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!("train.lr_peak must be >= 0, got {}", self.lr_peak)));
        }
        if !(0.0..=1.0).contains(&self.seq_dropout_p) {
            return Err(Error::Config(format!("train.seq_dropout_p must be in [0, 1], got {}", self.seq_dropout_p)));
        }
        if self.context_k == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Config("train.context_k, train.epochs and train.max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean over rows of `logsumexp(S[i, kept] / τ) − S[i, i] / τ` where a
/// masked cell is left out of the normalizer; the diagonal is always kept.
pub fn info_nce_loss(scores: &Tensor<f64>, mask: &LossMask, tau: f64) -> Result<f64> {
    let b = scores.rows();
    if b == 0 || scores.cols() != b || mask.size != b {
        return Err(Error::InvalidInput(format!(
            "info_nce_loss: scores {} with mask of size {}",
            scores.shape(),
            mask.size
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if !scores.is_finite() {
        return Err(Error::Numerical("non-finite score in InfoNCE".into()));
    }
    let mut total = 0.0;
    for i in 0..b {
        let kept: Vec<f64> = (0..b)
            .filter(|&j| j == i || !mask.get(i, j))
            .map(|j| scores.get(i, j) / tau)
            .collect();
        let max = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + kept.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - scores.get(i, i) / tau;
    }
    Ok(total / b as f64)
}

/// Linear warmup to `peak`, then linear decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if warmup == 0 || total <= warmup {
            return Err(Error::Config(format!(
                "schedule needs total steps ({total}) > warmup steps ({warmup}) >= 1"
            )));
        }
        Ok(Self { peak, warmup, total })
    }

    /// Warmup shrinks to 10% of the run when the run is shorter than twice
    /// the configured warmup.
    pub fn for_run(cfg: &TrainConfig, total: usize) -> Result<Self> {
        let warmup = if total < 2 * cfg.warmup_steps {
            (total / 10).max(1)
        } else {
            cfg.warmup_steps
        };
        Self::new(cfg.lr_peak, warmup, total.max(warmup + 1))
    }

    pub fn lr(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidInput(format!("step {step} is past the end of a {total_steps}-step run")));
    }
    Ok(Schedule::new(cfg.lr_peak, cfg.warmup_steps, total_steps)?.lr(step))
}

/// Adam moments in `f64`, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.shape().len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Consistency(format!(
                "{} gradient buffers for {} moment buffers",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (n, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[n], &mut self.v[n]);
            if g.shape().len() != m.len() {
                return Err(Error::Consistency(format!("gradient shape mismatch for {}", params.name(id))));
            }
            let p = params.get_mut(id);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if lr != 0.0 {
                    let step = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                    *x = T::from_f64(x.as_f64() - step);
                }
            }
        }
        Ok(())
    }
}

/// Token ids and loss mask for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub queries: Vec<Vec<usize>>,
    pub docs: Vec<Vec<usize>>,
    /// First-stage token ids of every document in the batch.
    pub ctx_docs: Vec<Vec<usize>>,
    pub mask: LossMask,
}

fn loss_on_tape<T: Real>(tape: &mut Tape<T>, q: Var, d: Var, mask: &LossMask, cfg: &TrainConfig) -> Result<Var> {
    let s = tape.matmul_t(q, d)?;
    let forward = tape.info_nce(s, &mask.mask, cfg.temperature)?;
    if !cfg.symmetric_loss {
        return Ok(forward);
    }
    let b = mask.size;
    let transposed: Vec<bool> = (0..b * b).map(|n| mask.get(n % b, n / b)).collect();
    let st = tape.matmul_t(d, q)?;
    let backward = tape.info_nce(st, &transposed, cfg.temperature)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}

fn finite_loss<T: Real>(tape: &Tape<T>, loss: Var) -> Result<f64> {
    let l = tape.value(loss).item()?.as_f64();
    if !l.is_finite() {
        return Err(Error::Numerical(format!("loss became {l}")));
    }
    Ok(l)
}

/// Loss and parameter gradients of one biencoder batch.
pub fn biencoder_grads<T: Real>(model: &Biencoder<T>, batch: &TrainBatch, cfg: &TrainConfig) -> Result<(f64, GradStore<T>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let q = model.forward_batch(&mut tape, &vars, &batch.queries)?;
    let d = model.forward_batch(&mut tape, &vars, &batch.docs)?;
    let loss = loss_on_tape(&mut tape, q, d, &batch.mask, cfg)?;
    let l = finite_loss(&tape, loss)?;
    let grads = tape.backward(loss)?.to_store(&model.params)?;
    Ok((l, grads))
}

pub fn train_step_biencoder<T: Real>(
    model: &mut Biencoder<T>,
    opt: &mut AdamState,
    batch: &TrainBatch,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = biencoder_grads(model, batch, cfg)?;
    opt.update(&mut model.params, &grads, lr)?;
    Ok(loss)
}

fn mix(seed: u64, step: u64, salt: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Positions of the batch documents used as context: all of them when they
/// fit in `k`, otherwise a uniform sample without replacement seeded by
/// `(seed, step)`, in increasing order.
pub fn subsample_context(batch_docs: usize, k: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch_docs <= k {
        return (0..batch_docs).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, 1));
    let mut idx = rand::seq::index::sample(&mut rng, batch_docs, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Context documents and their dropout mask for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    pub docs: Vec<Vec<usize>>,
    pub dropped: Vec<bool>,
}

impl StepContext {
    pub fn sample<T: Real>(model: &CdeModel<T>, batch: &TrainBatch, cfg: &TrainConfig, step: u64) -> Self {
        let k = cfg.context_k.min(model.cfg.context_size);
        let idx = subsample_context(batch.ctx_docs.len(), k, cfg.seed, step);
        let docs: Vec<Vec<usize>> = idx.iter().map(|&i| batch.ctx_docs[i].clone()).collect();
        let dropped = dropout_mask(docs.len(), cfg.seq_dropout_p, mix(cfg.seed, step, 2));
        Self { docs, dropped }
    }
}

/// Direct end-to-end backprop on a single tape.
pub fn cde_grads_direct<T: Real>(
    model: &CdeModel<T>,
    batch: &TrainBatch,
    ctx: &StepContext,
    cfg: &TrainConfig,
    meter: Option<&MemoryMeter>,
) -> Result<(f64, GradStore<T>)> {
    let mut tape = meter.map_or_else(Tape::new, |m| Tape::with_meter(m.clone()));
    let vars = model.bind(&mut tape, true);
    let m1 = if ctx.docs.is_empty() {
        None
    } else {
        let rows = ctx
            .docs
            .iter()
            .map(|ids| model.m1_forward(&mut tape, &vars, ids))
            .collect::<Result<Vec<_>>>()?;
        Some(tape.concat_rows(&rows)?)
    };
    let rows = model.context_rows(&mut tape, &vars, m1, &ctx.dropped)?;
    let prepared = model.prepare_context(&mut tape, &vars, rows)?;
    let embed = |tape: &mut Tape<T>, texts: &[Vec<usize>]| -> Result<Var> {
        let outs = texts
            .iter()
            .map(|ids| model.m2_forward(tape, &vars, &prepared, ids))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&outs)?)
    };
    let q = embed(&mut tape, &batch.queries)?;
    let d = embed(&mut tape, &batch.docs)?;
    let loss = loss_on_tape(&mut tape, q, d, &batch.mask, cfg)?;
    let l = finite_loss(&tape, loss)?;
    let grads = tape.backward(loss)?.to_store(&model.params)?;
    Ok((l, grads))
}

/// Two-stage gradient caching.
///
/// A: first-stage embeddings without gradients. B: second-stage embeddings
/// without gradients, then the loss and its gradient with respect to every
/// embedding. C: each text re-encoded on its own tape with the context rows as
/// leaves, seeded with its cached embedding gradient; this yields second-stage
/// parameter gradients and context-row gradients. D: each context document
/// re-encoded by the first stage, seeded with its row gradient.
pub fn gradcache_backward<T: Real>(
    model: &CdeModel<T>,
    batch: &TrainBatch,
    ctx: &StepContext,
    cfg: &TrainConfig,
    meter: Option<&MemoryMeter>,
) -> Result<(f64, GradStore<T>)> {
    let new_tape = || meter.map_or_else(Tape::new, |m| Tape::with_meter(m.clone()));
    let e = model.cfg.dim;
    let n_ctx = ctx.docs.len();

    // Stage A.
    let mut m1_rows = Tensor::zeros(n_ctx, e);
    for (j, ids) in ctx.docs.iter().enumerate() {
        let mut tape = new_tape();
        let vars = model.bind(&mut tape, false);
        let r = model.m1_forward(&mut tape, &vars, ids)?;
        m1_rows.row_mut(j).copy_from_slice(tape.value(r).data());
    }

    // Stage B.
    let encode_frozen = |ids: &[usize]| -> Result<Vec<T>> {
        let mut tape = new_tape();
        let vars = model.bind(&mut tape, false);
        let leaf = (n_ctx > 0).then(|| tape.constant(m1_rows.clone()));
        let rows = model.context_rows(&mut tape, &vars, leaf, &ctx.dropped)?;
        let prepared = model.prepare_context(&mut tape, &vars, rows)?;
        let out = model.m2_forward(&mut tape, &vars, &prepared, ids)?;
        Ok(tape.value(out).data().to_vec())
    };
    let stack = |texts: &[Vec<usize>]| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(texts.len() * e);
        for ids in texts {
            data.extend(encode_frozen(ids)?);
        }
        Ok(Tensor::from_vec(texts.len(), e, data)?)
    };
    let (qv, dv) = (stack(&batch.queries)?, stack(&batch.docs)?);
    let (loss, dq, dd) = {
        let mut tape = new_tape();
        let q = tape.leaf(qv);
        let d = tape.leaf(dv);
        let loss = loss_on_tape(&mut tape, q, d, &batch.mask, cfg)?;
        let l = finite_loss(&tape, loss)?;
        let g = tape.backward(loss)?;
        (l, tape.grad_of(&g, q), tape.grad_of(&g, d))
    };

    // Stage C.
    let mut grads = GradStore::zeros_like(&model.params);
    let mut d_rows = Tensor::<T>::zeros(n_ctx, e);
    let items = batch.queries.iter().zip(0..).map(|(ids, i)| (ids, dq.row(i)));
    let items = items.chain(batch.docs.iter().zip(0..).map(|(ids, i)| (ids, dd.row(i))));
    for (ids, g_out) in items {
        let mut tape = new_tape();
        let vars = model.bind(&mut tape, true);
        let leaf = (n_ctx > 0).then(|| tape.leaf(m1_rows.clone()));
        let rows = model.context_rows(&mut tape, &vars, leaf, &ctx.dropped)?;
        let prepared = model.prepare_context(&mut tape, &vars, rows)?;
        let out = model.m2_forward(&mut tape, &vars, &prepared, ids)?;
        let seed = Tensor::row_vector(g_out.to_vec());
        let g = tape.backward_from(&[(out, seed)])?;
        g.accumulate_into(&mut grads)?;
        if let Some(leaf) = leaf {
            d_rows.add_assign(&tape.grad_of(&g, leaf))?;
        }
    }

    // Stage D.
    for (j, ids) in ctx.docs.iter().enumerate() {
        let mut tape = new_tape();
        let vars = model.bind(&mut tape, true);
        let r = model.m1_forward(&mut tape, &vars, ids)?;
        if tape.value(r).data() != m1_rows.row(j) {
            return Err(Error::Consistency(format!(
                "context document {j} re-encoded differently between stages"
            )));
        }
        let g = tape.backward_from(&[(r, Tensor::row_vector(d_rows.row(j).to_vec()))])?;
        g.accumulate_into(&mut grads)?;
    }
    Ok((loss, grads))
}

pub fn cde_grads<T: Real>(model: &CdeModel<T>, batch: &TrainBatch, ctx: &StepContext, cfg: &TrainConfig) -> Result<(f64, GradStore<T>)> {
    if cfg.gradcache {
        gradcache_backward(model, batch, ctx, cfg, None)
    } else {
        cde_grads_direct(model, batch, ctx, cfg, None)
    }
}

pub fn train_step_cde<T: Real>(
    model: &mut CdeModel<T>,
    opt: &mut AdamState,
    batch: &TrainBatch,
    lr: f64,
    step: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ctx = StepContext::sample(model, batch, cfg, step);
    let (loss, grads) = cde_grads(model, batch, &ctx, cfg)?;
    opt.update(&mut model.params, &grads, lr)?;
    Ok(loss)
}

/// How each epoch's batches are formed.
#[derive(Debug, Clone)]
pub enum BatchSource {
    /// Re-pack the same clusters with a fresh seed every epoch.
    Clustered { assignment: ClusterAssignment, packing: PackingConfig },
    Random { batch_size: usize, domain_pure: bool },
}

impl BatchSource {
    pub fn plan(&self, dataset: &PairDataset, epoch: usize, seed: u64) -> Result<BatchPlan> {
        let seed = mix(seed, epoch as u64, 3);
        let domains: Vec<String> = dataset.pairs.iter().map(|p| p.domain().to_string()).collect();
        match self {
            BatchSource::Clustered { assignment, packing } => pack_batches(
                assignment,
                &domains,
                &PackingConfig {
                    seed,
                    ..packing.clone()
                },
            ),
            BatchSource::Random { batch_size, domain_pure } => random_batch_plan(dataset, *batch_size, seed, *domain_pure),
        }
    }
}

/// Training set plus the frozen surrogate embeddings used for masks and the
/// hardness column of the log.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub dataset: &'a PairDataset,
    pub phi: &'a EmbeddingMatrix,
    pub psi: &'a EmbeddingMatrix,
    pub filter: FilterConfig,
    pub source: BatchSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub masked_cells: usize,
    pub batch_hardness: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut put = |s: String| writeln!(out, "{s}").map_err(|e| Error::io(path, e));
    put("step,lr,loss,masked_cells,batch_hardness".into())?;
    for r in log {
        put(format!("{},{},{},{},{}", r.step, r.lr, r.loss, r.masked_cells, r.batch_hardness))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Batches for every epoch, built up front so the schedule knows the run length.
fn prepare_epochs(
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    ids: impl Fn(&str) -> Vec<usize>,
    ctx_ids: impl Fn(&str) -> Vec<usize>,
) -> Result<Vec<Vec<(TrainBatch, f64)>>> {
    let pairs = &data.dataset.pairs;
    let q: Vec<Vec<usize>> = pairs.iter().map(|p| ids(&p.query.prefixed(TEXT_SEPARATOR))).collect();
    let d: Vec<Vec<usize>> = pairs.iter().map(|p| ids(&p.document.prefixed(TEXT_SEPARATOR))).collect();
    let c: Vec<Vec<usize>> = pairs.iter().map(|p| ctx_ids(&p.document.prefixed(TEXT_SEPARATOR))).collect();
    let mut epochs = Vec::new();
    let mut steps = 0;
    for epoch in 0.. {
        let done = match cfg.max_steps {
            Some(n) => steps >= n,
            None => epoch >= cfg.epochs,
        };
        if done {
            break;
        }
        let plan = data.source.plan(data.dataset, epoch, cfg.seed)?;
        let mut batches = plan
            .batches
            .iter()
            .filter(|b| b.pair_indices.len() >= 2)
            .map(|b| {
                let idx = &b.pair_indices;
                let mask = build_loss_mask(idx, data.dataset, data.phi, data.psi, &data.filter)?;
                let hardness = batch_hardness(idx, data.phi, data.psi);
                let batch = TrainBatch {
                    queries: idx.iter().map(|&i| q[i].clone()).collect(),
                    docs: idx.iter().map(|&i| d[i].clone()).collect(),
                    ctx_docs: idx.iter().map(|&i| c[i].clone()).collect(),
                    mask,
                };
                Ok((batch, hardness))
            })
            .collect::<Result<Vec<_>>>()?;
        if batches.is_empty() {
            return Err(Error::InvalidInput("batch plan has no usable batches".into()));
        }
        if let Some(n) = cfg.max_steps {
            batches.truncate(n - steps);
        }
        steps += batches.len();
        epochs.push(batches);
    }
    Ok(epochs)
}

fn run_loop<M>(
    model: &mut M,
    epochs: Vec<Vec<(TrainBatch, f64)>>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut step_fn: impl FnMut(&mut M, &TrainBatch, f64, u64) -> Result<f64>,
    save: impl Fn(&M, &Path) -> Result<()>,
) -> Result<TrainReport> {
    let total: usize = epochs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidInput("no training batches".into()));
    }
    let sched = Schedule::for_run(cfg, total)?;
    let mut report = TrainReport::default();
    let mut step = 0usize;
    for (epoch, batches) in epochs.into_iter().enumerate() {
        for (batch, hardness) in &batches {
            let lr = sched.lr(step);
            let loss = step_fn(model, batch, lr, step as u64)?;
            report.log.push(LogRow {
                step,
                lr,
                loss,
                masked_cells: batch.mask.masked_count,
                batch_hardness: *hardness,
            });
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch{}.bin", epoch + 1));
            save(model, &path)?;
            report.checkpoints.push(path);
        }
    }
    Ok(report)
}

pub fn train_biencoder(
    model: &mut Biencoder<f32>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let epochs = prepare_epochs(data, cfg, |t| model.ids(t), |t| model.ids(t))?;
    let mut opt = AdamState::new(&model.params);
    run_loop(
        model,
        epochs,
        cfg,
        checkpoint_dir,
        |m, b, lr, _| train_step_biencoder(m, &mut opt, b, lr, cfg),
        |m, p| save_checkpoint(&Model::Biencoder(m.clone()), p),
    )
}

pub fn train_cde(
    model: &mut CdeModel<f32>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let epochs = prepare_epochs(data, cfg, |t| model.text_ids(t), |t| model.context_doc_ids(t))?;
    let mut opt = AdamState::new(&model.params);
    run_loop(
        model,
        epochs,
        cfg,
        checkpoint_dir,
        |m, b, lr, step| train_step_cde(m, &mut opt, b, lr, step, cfg),
        |m, p| save_checkpoint(&Model::Cde(m.clone()), p),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn info_nce_examples() {
        let s = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = info_nce_loss(&s, &LossMask::none(2), 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let eq = Tensor::filled(4, 4, 0.3);
        assert!((info_nce_loss(&eq, &LossMask::none(4), 0.05).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_costs_nothing() {
        let s = t(&[&[0.1, 0.9], &[0.2, 0.3]]);
        let mut m = LossMask::none(2);
        m.mask[1] = true;
        m.mask[2] = true;
        m.masked_count = 2;
        assert_eq!(info_nce_loss(&s, &m, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let s = t(&[&[f64::NAN, 0.0], &[0.0, 1.0]]);
        assert!(matches!(info_nce_loss(&s, &LossMask::none(2), 1.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 5000, &cfg).unwrap(), 0.0);
        assert!((lr_at(500, 5000, &cfg).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(1000, 5000, &cfg).unwrap(), 2e-5);
        assert_eq!(lr_at(5000, 5000, &cfg).unwrap(), 0.0);
        assert!(lr_at(0, 1000, &cfg).is_err());
    }

    #[test]
    fn short_runs_scale_warmup() {
        let s = Schedule::for_run(&TrainConfig::default(), 300).unwrap();
        assert_eq!(s.warmup, 30);
        let s = Schedule::for_run(&TrainConfig::default(), 5000).unwrap();
        assert_eq!(s.warmup, 1000);
    }

    #[test]
    fn subsample_examples() {
        let s = subsample_context(512, 256, 3, 7);
        assert_eq!(s.len(), 256);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_context(100, 256, 3, 7), (0..100).collect::<Vec<_>>());
        assert_eq!(s, subsample_context(512, 256, 3, 7));
        assert_ne!(s, subsample_context(512, 256, 3, 8));
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut params = ParamStore::<f32>::new();
        let id = params.add("w", Tensor::from_f64(1, 2, &[0.5, -1.0]).unwrap());
        let before = params.clone();
        let mut grads = GradStore::zeros_like(&params);
        grads.get_mut(id).data_mut().copy_from_slice(&[0.3, -0.2]);
        let mut opt = AdamState::new(&params);
        opt.update(&mut params, &grads, 0.0).unwrap();
        assert!(params.bit_equal(&before));
        opt.update(&mut params, &grads, 0.1).unwrap();
        assert!(!params.bit_equal(&before));
    }
}
