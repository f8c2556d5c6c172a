//! Corpus ingestion, vocabulary statistics, synthetic corpora and the binary
//! embedding cache.

mod cache;
mod synth;
mod tokenize;
mod vocab;

pub use cache::{read_embedding_cache, read_sections, write_embedding_cache, write_sections, EmbeddingMatrix};
pub use synth::{generate_synthetic_corpus, SyntheticConfig};
pub use tokenize::tokenize;
pub use vocab::{build_vocab, Vocab};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Separator between a task prefix and the text when records are encoded.
pub const TEXT_SEPARATOR: &str = ": ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    /// Body text without any task prefix.
    pub text: String,
    pub domain: String,
    pub prefix: Option<String>,
}

impl TextRecord {
    /// Text as seen by encoders: `"<prefix><sep><text>"` when a prefix is set.
    pub fn prefixed(&self, separator: &str) -> String {
        match &self.prefix {
            Some(p) => format!("{p}{separator}{}", self.text),
            None => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub query: TextRecord,
    pub document: TextRecord,
}

impl Pair {
    pub fn domain(&self) -> &str {
        &self.document.domain
    }
}

/// Aligned query/document pairs; index `i` addresses the same pair for the
/// lifetime of the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
    pub domains: BTreeSet<String>,
}

impl PairDataset {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        let mut ids = HashSet::new();
        for (i, p) in pairs.iter().enumerate() {
            if p.query.domain != p.document.domain {
                return Err(Error::InvalidInput(format!(
                    "pair {i}: query domain {:?} differs from document domain {:?}",
                    p.query.domain, p.document.domain
                )));
            }
            for r in [&p.query, &p.document] {
                if !ids.insert(r.id.as_str()) {
                    return Err(Error::InvalidInput(format!("duplicate record id {:?}", r.id)));
                }
            }
        }
        let domains = pairs.iter().map(|p| p.domain().to_string()).collect();
        Ok(Self { pairs, domains })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair indices grouped by domain, in dataset order.
    pub fn indices_by_domain(&self) -> Vec<(String, Vec<usize>)> {
        let mut by: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, p) in self.pairs.iter().enumerate() {
            by.entry(p.domain()).or_default().push(i);
        }
        self.domains
            .iter()
            .map(|d| (d.clone(), by.remove(d.as_str()).unwrap_or_default()))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<PairDataset> {
        PairDataset::new(indices.iter().map(|&i| self.pairs[i].clone()).collect())
    }

    pub fn query_texts(&self, separator: &str) -> Vec<String> {
        self.pairs.iter().map(|p| p.query.prefixed(separator)).collect()
    }

    pub fn document_texts(&self, separator: &str) -> Vec<String> {
        self.pairs.iter().map(|p| p.document.prefixed(separator)).collect()
    }

    /// Writes the dataset as pairs JSONL (the same layout [`load_pairs_jsonl`] reads).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for (i, p) in self.pairs.iter().enumerate() {
            let line = serde_json::json!({
                "id": pair_id(&p.query.id).unwrap_or_else(|| i.to_string()),
                "query": p.query.text,
                "document": p.document.text,
                "domain": p.domain(),
            });
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn pair_id(query_id: &str) -> Option<String> {
    query_id.strip_suffix(":q").map(str::to_string)
}

/// Task prefixes per domain, e.g. `search_query` / `search_document`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub by_domain: HashMap<String, (String, String)>,
    /// Applied to domains without an explicit entry.
    pub fallback: Option<(String, String)>,
    pub separator: String,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            by_domain: HashMap::new(),
            fallback: None,
            separator: TEXT_SEPARATOR.into(),
        }
    }
}

impl PrefixConfig {
    /// Same query/document prefix for every domain.
    pub fn uniform(query: &str, document: &str) -> Self {
        Self {
            fallback: Some((query.into(), document.into())),
            ..Self::default()
        }
    }

    pub fn for_domain(&self, domain: &str) -> Option<&(String, String)> {
        self.by_domain.get(domain).or(self.fallback.as_ref())
    }
}

#[derive(Deserialize)]
struct RawPair {
    query: Option<String>,
    document: Option<String>,
    domain: Option<String>,
    id: Option<serde_json::Value>,
}

/// Reads pairs JSONL: one object per line with `"query"`, `"document"`,
/// `"domain"` and optional `"id"`. File order is preserved and duplicate
/// lines are kept.
pub fn load_pairs_jsonl(path: &Path, prefixes: &PrefixConfig) -> Result<PairDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPair = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let query = raw.query.ok_or(Error::MissingField { line: line_no, field: "query" })?;
        let document = raw.document.ok_or(Error::MissingField { line: line_no, field: "document" })?;
        let domain = raw.domain.ok_or(Error::MissingField { line: line_no, field: "domain" })?;
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
            None => format!("L{line_no}"),
        };
        let (qp, dp) = match prefixes.for_domain(&domain) {
            Some((q, d)) => (Some(q.clone()), Some(d.clone())),
            None => (None, None),
        };
        let make = |suffix: &str, text: String, prefix: Option<String>| -> Result<TextRecord> {
            if text.is_empty() && prefix.as_deref().is_none_or(str::is_empty) {
                return Err(Error::InvalidInput(format!("line {line_no}: empty {suffix} text")));
            }
            Ok(TextRecord {
                id: format!("{id}:{suffix}"),
                text,
                domain: domain.clone(),
                prefix,
            })
        };
        pairs.push(Pair {
            query: make("q", query, qp)?,
            document: make("d", document, dp)?,
        });
    }
    PairDataset::new(pairs)
}
