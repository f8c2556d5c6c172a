//! Toy biencoder and the two-stage contextual document encoder.
//!
//! The biencoder mean-pools token embeddings, projects and L2-normalises.
//!
//! The contextual encoder has a first stage `M1` (its own token table and
//! projection, one vector per context document) and a second stage `M2`. `M2`
//! sees the context vectors followed by the text tokens, where only text
//! positions get a positional encoding, runs attention blocks with residual
//! connections, pools over text positions only, projects and normalises.
//! Context rows are put into a canonical order before attention, so the output
//! does not depend on the order in which context documents were supplied.
//! Missing or dropped context slots hold the learnable null vector; an all-null
//! context is the model's biencoder mode.

use crate::data::{read_sections, tokenize, write_sections, EmbeddingMatrix, PairDataset};
use crate::surrogate::fnv1a64;
use crate::{par, Error, Result};
use cde_autograd::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Shape of either encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hashed token-table rows; id 0 is reserved for out-of-vocabulary terms.
    pub vocab_size: usize,
    pub dim: usize,
    /// Text tokens kept per input; also the positional table length.
    pub max_len: usize,
    /// Context capacity `J_max`.
    pub context_size: usize,
    /// Tokens kept per context document.
    pub context_doc_tokens: usize,
    pub blocks: usize,
    pub init_std: f64,
    #[serde(default)]
    pub matrix_init: MatrixInit,
}

/// How square weight matrices start out. Lookup tables always use `init_std`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixInit {
    /// Projections and attention queries/keys start at the identity, attention
    /// values at zero, so every block begins as an exact identity map.
    #[default]
    Identity,
    /// Seeded normal entries with std `1/sqrt(dim)`.
    Gaussian,
}

impl MatrixInit {
    fn square<T: Real>(self, dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            MatrixInit::Identity => {
                let mut t = Tensor::zeros(dim, dim);
                for i in 0..dim {
                    t.set(i, i, T::from_f64(gain));
                }
                t
            }
            MatrixInit::Gaussian => normal_tensor(dim, dim, 1.0 / (dim as f64).sqrt(), rng),
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            dim: 64,
            max_len: 64,
            context_size: 64,
            context_doc_tokens: 32,
            blocks: 1,
            init_std: 0.02,
            matrix_init: MatrixInit::Identity,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.dim < 2 || self.max_len == 0 || self.context_doc_tokens == 0 || self.blocks == 0 {
            return Err(Error::Config(
                "model: vocab_size >= 2, dim >= 2, max_len, context_doc_tokens and blocks >= 1 required".into(),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("model.init_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Maps terms to token-table rows: known terms hash into `1..vocab_size`,
/// everything else is id 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenIndexer {
    pub vocab_size: usize,
    pub known: BTreeSet<String>,
}

impl TokenIndexer {
    pub fn new(vocab_size: usize, terms: impl IntoIterator<Item = String>) -> Self {
        Self {
            vocab_size,
            known: terms.into_iter().collect(),
        }
    }

    /// Indexer over every query and document term of a training set.
    pub fn from_dataset(vocab_size: usize, ds: &PairDataset) -> Self {
        let terms = ds
            .pairs
            .iter()
            .flat_map(|p| tokenize(&p.query.text).into_iter().chain(tokenize(&p.document.text)));
        Self::new(vocab_size, terms)
    }

    pub fn id(&self, term: &str) -> usize {
        if self.known.contains(term) {
            1 + (fnv1a64(term.as_bytes()) % (self.vocab_size as u64 - 1)) as usize
        } else {
            0
        }
    }

    /// Token ids of `text`, truncated to `max_len`.
    pub fn ids(&self, text: &str, max_len: usize) -> Vec<usize> {
        tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect()
    }
}

fn normal_tensor<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::from_f64(dist.sample(rng))).collect()).expect("sized")
}

/// Mean pool → projection → L2 normalise, for one text. Ids are pooled in
/// sorted order so token order cannot change the result, not even by rounding.
fn pooled_projection<T: Real>(tape: &mut Tape<T>, table: Var, proj: Var, ids: &[usize]) -> Result<Var> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    let tok = tape.embedding_lookup(table, &ids)?;
    let pooled = tape.mean_pool(tok, 0, ids.len())?;
    let out = tape.matmul(pooled, proj)?;
    Ok(tape.l2_normalize_rows(out))
}

#[derive(Debug, Clone)]
pub struct Biencoder<T> {
    pub cfg: EncoderConfig,
    pub indexer: TokenIndexer,
    pub params: ParamStore<T>,
    table: ParamId,
    proj: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiencoderVars {
    pub table: Var,
    pub proj: Var,
}

impl<T: Real> Biencoder<T> {
    pub fn new(cfg: EncoderConfig, indexer: TokenIndexer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let table = params.add("table", normal_tensor(cfg.vocab_size, cfg.dim, cfg.init_std, &mut rng));
        let proj = params.add("proj", cfg.matrix_init.square(cfg.dim, 1.0, &mut rng));
        Ok(Self {
            cfg,
            indexer,
            params,
            table,
            proj,
        })
    }

    fn from_params(cfg: EncoderConfig, indexer: TokenIndexer, params: ParamStore<T>) -> Result<Self> {
        let find = |n: &str| params.find(n).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {n:?}")));
        let (table, proj) = (find("table")?, find("proj")?);
        Ok(Self {
            cfg,
            indexer,
            params,
            table,
            proj,
        })
    }

    pub fn cast<U: Real>(&self) -> Biencoder<U> {
        Biencoder {
            cfg: self.cfg.clone(),
            indexer: self.indexer.clone(),
            params: self.params.cast(),
            table: self.table,
            proj: self.proj,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BiencoderVars {
        let p = |tape: &mut Tape<T>, id| {
            if trainable {
                tape.param(&self.params, id)
            } else {
                tape.frozen_param(&self.params, id)
            }
        };
        BiencoderVars {
            table: p(tape, self.table),
            proj: p(tape, self.proj),
        }
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        self.indexer.ids(text, self.cfg.max_len)
    }

    /// One `1×e` unit row on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &BiencoderVars, ids: &[usize]) -> Result<Var> {
        pooled_projection(tape, vars.table, vars.proj, ids)
    }

    /// `B×e` unit rows, one per token list.
    pub fn forward_batch(&self, tape: &mut Tape<T>, vars: &BiencoderVars, texts: &[Vec<usize>]) -> Result<Var> {
        let rows = texts
            .iter()
            .map(|ids| self.forward(tape, vars, ids))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows)?)
    }

    /// Embedding of already-indexed tokens.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, ids)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn embed(&self, text: &str) -> Result<Vec<T>> {
        self.embed_ids(&self.ids(text))
    }

    pub fn embed_all(&self, texts: &[String]) -> Result<Tensor<T>> {
        let rows = par::map(texts, |t| self.embed(t));
        stack(rows, self.cfg.dim)
    }
}

/// Convenience wrapper matching the single-text embedding contract.
pub fn biencoder_embed<T: Real>(ids: &[usize], model: &Biencoder<T>) -> Result<Vec<T>> {
    model.embed_ids(ids)
}

fn stack<T: Real>(rows: Vec<Result<Vec<T>>>, dim: usize) -> Result<Tensor<T>> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * dim);
    for r in rows {
        data.extend(r?);
    }
    Ok(Tensor::from_vec(n, dim, data)?)
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct CdeModel<T> {
    pub cfg: EncoderConfig,
    pub indexer: TokenIndexer,
    pub params: ParamStore<T>,
    m1_table: ParamId,
    m1_proj: ParamId,
    table: ParamId,
    pos: ParamId,
    null: ParamId,
    out: ParamId,
    blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Parameters of a [`CdeModel`] placed on one tape.
#[derive(Debug, Clone)]
pub struct CdeVars {
    pub m1_table: Var,
    pub m1_proj: Var,
    pub table: Var,
    pub pos: Var,
    pub null: Var,
    pub out: Var,
    pub blocks: Vec<BlockVars>,
}

/// Context rows in canonical order, plus their keys and values when the
/// model has a single block and they can be shared across texts.
#[derive(Debug, Clone, Copy)]
pub struct PreparedContext {
    pub rows: Var,
    kv: Option<(Var, Var)>,
}

/// First-stage outputs padded to capacity; null slots hold `v_null`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet<T> {
    pub embeddings: Tensor<T>,
    pub source_ids: Vec<Option<String>>,
    pub null_mask: Vec<bool>,
}

impl<T: Real> ContextSet<T> {
    pub fn len(&self) -> usize {
        self.null_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.null_mask.is_empty()
    }

    pub fn nulls(&self) -> usize {
        self.null_mask.iter().filter(|&&m| m).count()
    }

    /// The same slots in another order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut e = Tensor::zeros(order.len(), self.embeddings.cols());
        for (dst, &src) in order.iter().enumerate() {
            e.row_mut(dst).copy_from_slice(self.embeddings.row(src));
        }
        Self {
            embeddings: e,
            source_ids: order.iter().map(|&i| self.source_ids[i].clone()).collect(),
            null_mask: order.iter().map(|&i| self.null_mask[i]).collect(),
        }
    }
}

/// Row order that sorts rows lexicographically by value.
pub fn canonical_row_order<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t.rows()).collect();
    idx.sort_by(|&a, &b| {
        t.row(a)
            .iter()
            .zip(t.row(b))
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Mean over the text positions `range` of sequence outputs.
pub fn pool_text_tokens<T: Real>(tape: &mut Tape<T>, seq: Var, range: std::ops::Range<usize>) -> Result<Var> {
    if range.is_empty() {
        return Err(Error::InvalidInput("pool_text_tokens: empty text range".into()));
    }
    Ok(tape.mean_pool(seq, range.start, range.end)?)
}

impl<T: Real> CdeModel<T> {
    pub fn new(cfg: EncoderConfig, indexer: TokenIndexer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.context_size == 0 {
            return Err(Error::Config("model.context_size must be >= 1 for the contextual encoder".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, s, init) = (cfg.vocab_size, cfg.dim, cfg.init_std, cfg.matrix_init);
        let mut params = ParamStore::new();
        let m1_table = params.add("m1.table", normal_tensor(v, e, s, &mut rng));
        let m1_proj = params.add("m1.proj", init.square(e, 1.0, &mut rng));
        let table = params.add("m2.table", normal_tensor(v, e, s, &mut rng));
        let pos = params.add("m2.pos", normal_tensor(cfg.max_len, e, s, &mut rng));
        let null = params.add("m2.null", Tensor::zeros(1, e));
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            blocks.push(BlockIds {
                wq: params.add(format!("m2.block{b}.wq"), init.square(e, 1.0, &mut rng)),
                wk: params.add(format!("m2.block{b}.wk"), init.square(e, 1.0, &mut rng)),
                wv: params.add(format!("m2.block{b}.wv"), init.square(e, 0.0, &mut rng)),
            });
        }
        let out = params.add("m2.out", init.square(e, 1.0, &mut rng));
        Ok(Self {
            cfg,
            indexer,
            params,
            m1_table,
            m1_proj,
            table,
            pos,
            null,
            out,
            blocks,
        })
    }

    fn from_params(cfg: EncoderConfig, indexer: TokenIndexer, params: ParamStore<T>) -> Result<Self> {
        let find = |n: &str| params.find(n).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {n:?}")));
        let blocks = (0..cfg.blocks)
            .map(|b| {
                Ok(BlockIds {
                    wq: find(&format!("m2.block{b}.wq"))?,
                    wk: find(&format!("m2.block{b}.wk"))?,
                    wv: find(&format!("m2.block{b}.wv"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m1_table: find("m1.table")?,
            m1_proj: find("m1.proj")?,
            table: find("m2.table")?,
            pos: find("m2.pos")?,
            null: find("m2.null")?,
            out: find("m2.out")?,
            blocks,
            cfg,
            indexer,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> CdeModel<U> {
        CdeModel {
            cfg: self.cfg.clone(),
            indexer: self.indexer.clone(),
            params: self.params.cast(),
            m1_table: self.m1_table,
            m1_proj: self.m1_proj,
            table: self.table,
            pos: self.pos,
            null: self.null,
            out: self.out,
            blocks: self.blocks.clone(),
        }
    }

    /// Parameter ids that belong to the first stage.
    pub fn m1_param_ids(&self) -> [ParamId; 2] {
        [self.m1_table, self.m1_proj]
    }

    pub fn null_id(&self) -> ParamId {
        self.null
    }

    pub fn null_vector(&self) -> &[T] {
        self.params.get(self.null).data()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> CdeVars {
        let mut p = |id| {
            if trainable {
                tape.param(&self.params, id)
            } else {
                tape.frozen_param(&self.params, id)
            }
        };
        CdeVars {
            m1_table: p(self.m1_table),
            m1_proj: p(self.m1_proj),
            table: p(self.table),
            pos: p(self.pos),
            null: p(self.null),
            out: p(self.out),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    wq: p(b.wq),
                    wk: p(b.wk),
                    wv: p(b.wv),
                })
                .collect(),
        }
    }

    pub fn text_ids(&self, text: &str) -> Vec<usize> {
        self.indexer.ids(text, self.cfg.max_len)
    }

    pub fn context_doc_ids(&self, text: &str) -> Vec<usize> {
        self.indexer.ids(text, self.cfg.context_doc_tokens)
    }

    /// First-stage embedding of one context document, `1×e`.
    pub fn m1_forward(&self, tape: &mut Tape<T>, vars: &CdeVars, ids: &[usize]) -> Result<Var> {
        pooled_projection(tape, vars.m1_table, vars.m1_proj, ids)
    }

    /// `J_max×e` context from the `n×e` first-stage rows `m1` (`None` for no
    /// documents): pads with null slots and replaces the slots flagged in
    /// `dropped` with the null vector.
    pub fn context_rows(&self, tape: &mut Tape<T>, vars: &CdeVars, m1: Option<Var>, dropped: &[bool]) -> Result<Var> {
        let cap = self.cfg.context_size;
        let n = m1.map_or(0, |v| tape.shape(v).rows);
        if n > cap {
            return Err(Error::InvalidInput(format!("{n} context documents exceed capacity {cap}")));
        }
        let mut parts: Vec<Var> = m1.into_iter().collect();
        if n < cap {
            parts.push(tape.gather_rows(vars.null, &vec![0; cap - n])?);
        }
        let base = tape.concat_rows(&parts)?;
        let mask: Vec<bool> = (0..cap)
            .map(|j| j >= n || dropped.get(j).copied().unwrap_or(false))
            .collect();
        Ok(tape.dropout_rows(base, vars.null, &mask)?)
    }

    /// Sorts context rows canonically and, for one-block models, computes
    /// their keys and values once.
    pub fn prepare_context(&self, tape: &mut Tape<T>, vars: &CdeVars, rows: Var) -> Result<PreparedContext> {
        let order = canonical_row_order(tape.value(rows));
        let rows = tape.gather_rows(rows, &order)?;
        let kv = if vars.blocks.len() == 1 {
            let b = vars.blocks[0];
            Some((tape.matmul(rows, b.wk)?, tape.matmul(rows, b.wv)?))
        } else {
            None
        };
        Ok(PreparedContext { rows, kv })
    }

    /// Second stage for one text: `1×e` unit row.
    pub fn m2_forward(&self, tape: &mut Tape<T>, vars: &CdeVars, ctx: &PreparedContext, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("contextual embedding of an empty token list".into()));
        }
        let t = ids.len();
        let j = tape.shape(ctx.rows).rows;
        let tok = tape.embedding_lookup(vars.table, ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(vars.pos, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut c = ctx.rows;
        let last = vars.blocks.len() - 1;
        for (n, b) in vars.blocks.iter().enumerate() {
            if n < last {
                let seq = tape.concat_rows(&[c, x])?;
                let q = tape.matmul(seq, b.wq)?;
                let k = tape.matmul(seq, b.wk)?;
                let v = tape.matmul(seq, b.wv)?;
                let a = tape.scaled_dot_attention(q, k, v)?;
                let h = tape.add(seq, a)?;
                c = tape.gather_rows(h, &(0..j).collect::<Vec<_>>())?;
                x = tape.gather_rows(h, &(j..j + t).collect::<Vec<_>>())?;
                continue;
            }
            // Last block: only text positions need outputs.
            let (kc, vc) = match (n, ctx.kv) {
                (0, Some(kv)) => kv,
                _ => (tape.matmul(c, b.wk)?, tape.matmul(c, b.wv)?),
            };
            let kx = tape.matmul(x, b.wk)?;
            let vx = tape.matmul(x, b.wv)?;
            let k = tape.concat_rows(&[kc, kx])?;
            let v = tape.concat_rows(&[vc, vx])?;
            let q = tape.matmul(x, b.wq)?;
            let a = tape.scaled_dot_attention(q, k, v)?;
            x = tape.add(x, a)?;
        }
        let pooled = pool_text_tokens(tape, x, 0..t)?;
        let out = tape.matmul(pooled, vars.out)?;
        Ok(tape.l2_normalize_rows(out))
    }

    /// First-stage embeddings of many documents (no tape kept), `n×e`.
    pub fn m1_embed_docs(&self, docs: &[Vec<usize>]) -> Result<Tensor<T>> {
        let rows = par::map(docs, |ids| {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let r = self.m1_forward(&mut tape, &vars, ids)?;
            Ok(tape.value(r).data().to_vec())
        });
        stack(rows, self.cfg.dim)
    }

    /// Context set from precomputed first-stage rows (e.g. read from a cache).
    pub fn context_from_rows(&self, rows: &Tensor<T>, ids: Vec<Option<String>>) -> Result<ContextSet<T>> {
        let cap = self.cfg.context_size;
        if rows.rows() > cap {
            return Err(Error::InvalidInput(format!("{} context rows exceed capacity {cap}", rows.rows())));
        }
        if rows.cols() != self.cfg.dim {
            return Err(Error::InvalidInput(format!(
                "context rows have dim {}, model has {}",
                rows.cols(),
                self.cfg.dim
            )));
        }
        let mut e = Tensor::zeros(cap, self.cfg.dim);
        let null = self.null_vector();
        for j in 0..cap {
            e.row_mut(j).copy_from_slice(if j < rows.rows() { rows.row(j) } else { null });
        }
        let mut source_ids = ids;
        source_ids.resize(cap, None);
        Ok(ContextSet {
            embeddings: e,
            source_ids,
            null_mask: (0..cap).map(|j| j >= rows.rows()).collect(),
        })
    }

    pub fn null_context(&self) -> ContextSet<T> {
        self.context_from_rows(&Tensor::zeros(0, self.cfg.dim), Vec::new())
            .expect("empty context fits")
    }

    /// Second-stage embedding of one text under a given context.
    pub fn embed_ids(&self, ids: &[usize], ctx: &ContextSet<T>) -> Result<Vec<T>> {
        if ctx.len() != self.cfg.context_size {
            return Err(Error::InvalidInput(format!(
                "context has {} slots, model expects {}",
                ctx.len(),
                self.cfg.context_size
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let rows = tape.constant(ctx.embeddings.clone());
        let prepared = self.prepare_context(&mut tape, &vars, rows)?;
        let out = self.m2_forward(&mut tape, &vars, &prepared, ids)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Biencoder mode: every slot holds the null vector, so the output is a
    /// function of the text alone. Builds the padding on the tape rather than
    /// from a [`ContextSet`].
    pub fn embed_ids_without_context(&self, ids: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let rows = self.context_rows(&mut tape, &vars, None, &[])?;
        let prepared = self.prepare_context(&mut tape, &vars, rows)?;
        let out = self.m2_forward(&mut tape, &vars, &prepared, ids)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn embed(&self, text: &str, ctx: &ContextSet<T>) -> Result<Vec<T>> {
        self.embed_ids(&self.text_ids(text), ctx)
    }

    pub fn embed_all(&self, texts: &[String], ctx: &ContextSet<T>) -> Result<Tensor<T>> {
        let rows = par::map(texts, |t| self.embed(t, ctx));
        stack(rows, self.cfg.dim)
    }
}

/// First-stage context for `docs` (`(id, text)`), padded with null slots.
pub fn m1_embed_context<T: Real>(model: &CdeModel<T>, docs: &[(String, String)]) -> Result<ContextSet<T>> {
    let ids: Vec<Vec<usize>> = docs.iter().map(|(_, t)| model.context_doc_ids(t)).collect();
    let rows = model.m1_embed_docs(&ids)?;
    model.context_from_rows(&rows, docs.iter().map(|(id, _)| Some(id.clone())).collect())
}

/// Replaces each non-null slot by the null vector with probability `p` when
/// training; identity otherwise.
pub fn apply_sequence_dropout<T: Real>(
    ctx: &ContextSet<T>,
    null: &[T],
    p: f64,
    seed: u64,
    training: bool,
) -> Result<ContextSet<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} is outside [0, 1]")));
    }
    let mut out = ctx.clone();
    if !training || p == 0.0 {
        return Ok(out);
    }
    let mask = dropout_mask(ctx.len(), p, seed);
    for (j, &drop) in mask.iter().enumerate() {
        if drop && !out.null_mask[j] {
            out.null_mask[j] = true;
            out.source_ids[j] = None;
            out.embeddings.row_mut(j).copy_from_slice(null);
        }
    }
    Ok(out)
}

/// Independent Bernoulli(`p`) draws, one per slot.
pub fn dropout_mask(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// Contextual embedding of one token list.
pub fn cde_embed<T: Real>(ids: &[usize], ctx: &ContextSet<T>, model: &CdeModel<T>) -> Result<Vec<T>> {
    model.embed_ids(ids, ctx)
}

/// Either kind of trained encoder.
#[derive(Debug, Clone)]
pub enum Model {
    Biencoder(Biencoder<f32>),
    Cde(CdeModel<f32>),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Biencoder(_) => "biencoder",
            Model::Cde(_) => "cde",
        }
    }

    pub fn cfg(&self) -> &EncoderConfig {
        match self {
            Model::Biencoder(m) => &m.cfg,
            Model::Cde(m) => &m.cfg,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    config: EncoderConfig,
    terms: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes every parameter as a named section of the binary container, plus a
/// JSON sidecar (`<path>.json`) with the model kind, shape and known terms.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let (params, indexer) = match model {
        Model::Biencoder(m) => (&m.params, &m.indexer),
        Model::Cde(m) => (&m.params, &m.indexer),
    };
    let sections = params
        .iter()
        .map(|(_, name, t)| {
            let ids = (0..t.rows()).map(|r| format!("{name}[{r}]")).collect();
            Ok((name.to_string(), EmbeddingMatrix::new(t.cols(), t.data().to_vec(), ids)?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_sections(path, &sections)?;
    let side = Sidecar {
        kind: model.kind().into(),
        config: model.cfg().clone(),
        terms: indexer.known.iter().cloned().collect(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&sp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    side.config.validate()?;
    let indexer = TokenIndexer::new(side.config.vocab_size, side.terms);
    let mut params = ParamStore::new();
    for (name, m) in read_sections(path)? {
        params.add(name, Tensor::from_vec(m.rows(), m.dim(), m.data().to_vec())?);
    }
    match side.kind.as_str() {
        "biencoder" => Ok(Model::Biencoder(Biencoder::from_params(side.config, indexer, params)?)),
        "cde" => Ok(Model::Cde(CdeModel::from_params(side.config, indexer, params)?)),
        k => Err(Error::Format(format!("unknown model kind {k:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 64,
            dim: 8,
            max_len: 8,
            context_size: 4,
            context_doc_tokens: 6,
            blocks: 1,
            init_std: 0.3,
            matrix_init: MatrixInit::Gaussian,
        }
    }

    fn indexer() -> TokenIndexer {
        TokenIndexer::new(64, ["a", "b", "c", "d", "e"].map(String::from))
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn oov_maps_to_zero_and_known_terms_do_not() {
        let ix = indexer();
        assert_eq!(ix.id("zzz"), 0);
        assert!(ix.id("a") >= 1 && ix.id("a") < 64);
        assert_eq!(ix.ids("a b zzz c", 2).len(), 2);
    }

    #[test]
    fn biencoder_single_token_and_order() {
        let m = Biencoder::<f64>::new(small_cfg(), indexer(), 1).unwrap();
        let id = m.indexer.id("a");
        let e = m.params.get(m.table).row(id).to_vec();
        let w = m.params.get(m.proj);
        let x = Tensor::row_vector(e).matmul(w).unwrap();
        let n = norm(x.data());
        let got = m.embed("a").unwrap();
        for (g, want) in got.iter().zip(x.data()) {
            assert!((g - want / n).abs() < 1e-12);
        }
        assert_eq!(m.embed("a b c").unwrap(), m.embed("c a b").unwrap());
        assert!((norm(&m.embed("b d e").unwrap()) - 1.0).abs() < 1e-12);
        assert!(m.embed("").is_err());
    }

    #[test]
    fn null_padding_and_duplicates() {
        let m = CdeModel::<f64>::new(small_cfg(), indexer(), 2).unwrap();
        let empty = m.null_context();
        assert_eq!(empty.nulls(), 4);
        assert!((0..4).all(|j| empty.embeddings.row(j) == m.null_vector()));
        let docs = vec![("x".to_string(), "a b".to_string()), ("y".to_string(), "a b".to_string())];
        let ctx = m1_embed_context(&m, &docs).unwrap();
        assert_eq!(ctx.embeddings.row(0), ctx.embeddings.row(1));
        assert_eq!(ctx.null_mask, vec![false, false, true, true]);
    }

    #[test]
    fn dropout_extremes() {
        let m = CdeModel::<f64>::new(small_cfg(), indexer(), 3).unwrap();
        let docs: Vec<(String, String)> = ["a", "b c", "d", "e a"].iter().map(|t| (t.to_string(), t.to_string())).collect();
        let ctx = m1_embed_context(&m, &docs).unwrap();
        let null = m.null_vector().to_vec();
        assert_eq!(apply_sequence_dropout(&ctx, &null, 0.0, 1, true).unwrap(), ctx);
        assert_eq!(apply_sequence_dropout(&ctx, &null, 0.7, 1, false).unwrap(), ctx);
        let all = apply_sequence_dropout(&ctx, &null, 1.0, 1, true).unwrap();
        assert_eq!(all.nulls(), 4);
        assert_eq!(all.embeddings, m.null_context().embeddings);
        assert!(apply_sequence_dropout(&ctx, &null, 1.5, 1, true).is_err());
    }

    #[test]
    fn attention_free_model_ignores_context() {
        let mut m = CdeModel::<f64>::new(small_cfg(), indexer(), 4).unwrap();
        let wv = m.blocks[0].wv;
        *m.params.get_mut(wv) = Tensor::zeros(8, 8);
        let docs: Vec<(String, String)> = ["a b", "c"].iter().map(|t| (t.to_string(), t.to_string())).collect();
        let ctx = m1_embed_context(&m, &docs).unwrap();
        let ids = m.text_ids("d e a");
        assert_eq!(cde_embed(&ids, &ctx, &m).unwrap(), cde_embed(&ids, &m.null_context(), &m).unwrap());
    }

    #[test]
    fn context_changes_output_and_is_order_free() {
        let m = CdeModel::<f64>::new(small_cfg(), indexer(), 5).unwrap();
        let docs: Vec<(String, String)> = ["a b", "c", "d e", "b"].iter().map(|t| (t.to_string(), t.to_string())).collect();
        let ctx = m1_embed_context(&m, &docs).unwrap();
        let ids = m.text_ids("a c e");
        let base = cde_embed(&ids, &ctx, &m).unwrap();
        assert_ne!(base, cde_embed(&ids, &m.null_context(), &m).unwrap());
        assert_eq!(base, cde_embed(&ids, &ctx.permuted(&[2, 0, 3, 1]), &m).unwrap());
        assert!((norm(&base) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_block_forward_is_unit_norm() {
        let cfg = EncoderConfig {
            blocks: 2,
            ..small_cfg()
        };
        let m = CdeModel::<f64>::new(cfg, indexer(), 6).unwrap();
        let docs = vec![("x".to_string(), "a b".to_string())];
        let ctx = m1_embed_context(&m, &docs).unwrap();
        let v = m.embed("c d", &ctx).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        assert_eq!(v, m.embed("c d", &ctx.permuted(&[3, 1, 0, 2])).unwrap());
    }

    #[test]
    fn pooling_range_must_be_non_empty() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::identity(3));
        assert!(pool_text_tokens(&mut tape, x, 1..1).is_err());
        let p = pool_text_tokens(&mut tape, x, 2..3).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cde = CdeModel::<f32>::new(small_cfg(), indexer(), 7).unwrap();
        let path = dir.path().join("cde.bin");
        save_checkpoint(&Model::Cde(cde.clone()), &path).unwrap();
        let Model::Cde(back) = load_checkpoint(&path).unwrap() else {
            panic!("wrong kind")
        };
        assert!(back.params.bit_equal(&cde.params));
        assert_eq!(back.indexer, cde.indexer);
        let bi = Biencoder::<f32>::new(small_cfg(), indexer(), 8).unwrap();
        let path = dir.path().join("bi.bin");
        save_checkpoint(&Model::Biencoder(bi.clone()), &path).unwrap();
        let Model::Biencoder(back) = load_checkpoint(&path).unwrap() else {
            panic!("wrong kind")
        };
        assert!(back.params.bit_equal(&bi.params));
    }
}
