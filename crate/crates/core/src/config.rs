//! Flat `key=value` run configuration covering every module.
//!
//! Keys are dotted paths into [`RunConfig`] (`cluster.k`, `train.temperature`,
//! ...). A key is valid only if the default configuration has it, and values
//! are parsed against the type of the default. Module seeds are not separate
//! keys: they all follow the top-level `seed`.

use crate::cluster::ClusterConfig;
use crate::data::{PrefixConfig, SyntheticConfig, TEXT_SEPARATOR};
use crate::encoders::EncoderConfig;
use crate::eval::{ContextPool, DivergenceKind, DocContext, InferenceStrategy, QueryContext};
use crate::filter::FilterConfig;
use crate::pack::PackingConfig;
use crate::surrogate::SurrogateConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSettings {
    /// Empty means no prefix.
    pub query: String,
    pub document: String,
}

impl PrefixSettings {
    pub fn to_prefix_config(&self) -> PrefixConfig {
        let mut p = PrefixConfig::default();
        if !self.query.is_empty() || !self.document.is_empty() {
            p = PrefixConfig::uniform(&self.query, &self.document);
        }
        p.separator = TEXT_SEPARATOR.to_string();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub doc_context: DocContext,
    pub query_context: QueryContext,
    /// Context documents per side; 0 means the model's capacity.
    pub k: usize,
    pub sweep_sizes: Vec<usize>,
    pub divergence: DivergenceKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            doc_context: DocContext::RandomInDomain,
            query_context: QueryContext::RandomInDomain,
            k: 0,
            sweep_sizes: vec![0, 1, 2, 4, 8, 16],
            divergence: DivergenceKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SyntheticConfig,
    pub prefix: PrefixSettings,
    pub surrogate: SurrogateConfig,
    pub cluster: ClusterConfig,
    pub pack: PackingConfig,
    pub filter: FilterConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SyntheticConfig::new(0, 4, 256, 64, 0.5),
            prefix: PrefixSettings {
                query: String::new(),
                document: String::new(),
            },
            surrogate: SurrogateConfig::default(),
            cluster: ClusterConfig::default(),
            pack: PackingConfig::default(),
            filter: FilterConfig::default(),
            model: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut kv = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply(kv)
    }

    /// Sets one key; the value is parsed as the type the key already holds.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply([(key, value)])
    }

    /// Sets several keys and validates once, so intermediate combinations
    /// need not be valid. On error `self` is unchanged.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, kv: impl IntoIterator<Item = (K, V)>) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, value) in kv {
            let (key, value) = (key.as_ref(), value.as_ref());
            let slot = lookup(&mut tree, key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            *slot = parse_as(slot, key, value)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    fn sync_seeds(&mut self) {
        let s = self.seed;
        self.synth.seed = s;
        self.cluster.seed = s;
        self.pack.seed = s;
        self.train.seed = s;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seeds();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.surrogate.validate()?;
        self.cluster.validate()?;
        self.pack.validate()?;
        self.filter.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.test_fraction > 0.0 && self.eval.test_fraction < 1.0) {
            return Err(Error::Config("eval.test_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Every effective value as sorted `key -> value` text.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Inference strategy for evaluation; `eval.k = 0` means full capacity.
    pub fn strategy(&self) -> InferenceStrategy {
        let k = if self.eval.k == 0 { self.model.context_size } else { self.eval.k };
        InferenceStrategy {
            doc_context: self.eval.doc_context,
            query_context: self.eval.query_context,
            k,
            seed: self.seed,
            pool: ContextPool::InDomain,
        }
    }
}

fn is_hidden(key: &str) -> bool {
    key.contains('.') && key.ends_with(".seed")
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    if is_hidden(key) {
        return None;
    }
    let mut cur = tree;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    if cur.is_object() {
        return None;
    }
    Some(cur)
}

fn parse_as(current: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u64>().map(Value::from).map_err(|_| bad("comma-separated integers")))
                .collect::<Result<_>>()?,
        ),
        // Optional values: "none" clears, anything else must be an integer.
        Value::Null => match raw {
            "none" | "" => Value::Null,
            s => Value::from(s.parse::<u64>().map_err(|_| bad("an integer or none"))?),
        },
        Value::Object(_) => return Err(bad("a leaf value")),
    })
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => flatten_map(prefix, m, out),
        _ if is_hidden(prefix) => {}
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Null => {
            out.insert(prefix.to_string(), "none".into());
        }
        Value::Array(a) => {
            let s: Vec<String> = a.iter().map(Value::to_string).collect();
            out.insert(prefix.to_string(), s.join(","));
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn flatten_map(prefix: &str, m: &Map<String, Value>, out: &mut BTreeMap<String, String>) {
    for (k, v) in m {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        flatten(&key, v, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("cluster.k", "5").unwrap();
        cfg.set("train.temperature", "0.05").unwrap();
        cfg.set("filter.collision_mode", "exact_id").unwrap();
        cfg.set("eval.sweep_sizes", "0,4,8").unwrap();
        cfg.set("train.max_steps", "12").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.eval.sweep_sizes, [0, 4, 8]);
        assert_eq!(back.train.max_steps, Some(12));
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("cluster.kk", "3"), ("cluster", "3"), ("cluster.seed", "3"), ("cluster.k", "x"), ("train.temperature", "-1")] {
            assert!(matches!(cfg.set(k, v), Err(Error::Config(_))), "{k}={v}");
        }
        assert!(RunConfig::parse("cluster.k 3").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn seed_reaches_every_module() {
        let cfg = RunConfig::parse("# comment\n\nseed = 9\n").unwrap();
        assert_eq!((cfg.synth.seed, cfg.cluster.seed, cfg.pack.seed, cfg.train.seed), (9, 9, 9, 9));
        assert!(!cfg.entries().contains_key("cluster.seed"));
        assert_eq!(cfg.entries()["seed"], "9");
    }

    #[test]
    fn documented_defaults() {
        let e = RunConfig::default().entries();
        for (k, v) in [
            ("train.temperature", "0.02"),
            ("train.lr_peak", "2e-5"),
            ("train.warmup_steps", "1000"),
            ("train.seq_dropout_p", "0.2"),
            ("train.context_k", "256"),
            ("cluster.max_iters", "100"),
            ("cluster.restarts", "3"),
        ] {
            assert_eq!(e[k].parse::<f64>().unwrap(), v.parse::<f64>().unwrap(), "{k}");
        }
    }
}
