use super::{Pair, PairDataset, TextRecord};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Knobs for the synthetic multi-domain corpus.
///
/// Every domain owns a disjoint core vocabulary split into topics, and all
/// domains draw from one shared vocabulary. Each domain additionally marks a
/// few shared terms as boilerplate: frequent everywhere inside that domain and
/// therefore useless for telling its documents apart, while the same terms
/// may be rare and discriminative in another domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub pairs_per_domain: usize,
    /// Core terms per domain; the shared vocabulary has the same size.
    pub vocab_per_domain: usize,
    /// Probability that a kept query token is replaced by a boilerplate term.
    pub noise: f64,
    /// Probability of keeping each document token in the query.
    pub subsample: f64,
    pub doc_len: usize,
    pub topics_per_domain: usize,
    pub boilerplate_size: usize,
    /// Fraction of document tokens drawn from the domain boilerplate.
    pub boilerplate_rate: f64,
    /// Fraction of document tokens drawn uniformly from the shared vocabulary.
    pub shared_rate: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_domains: usize, pairs_per_domain: usize, vocab_per_domain: usize, noise: f64) -> Self {
        Self {
            seed,
            n_domains,
            pairs_per_domain,
            vocab_per_domain,
            noise,
            subsample: 0.5,
            doc_len: 16,
            topics_per_domain: 8,
            boilerplate_size: 8,
            boilerplate_rate: 0.5,
            shared_rate: 0.3,
        }
    }

    /// Two small domains for unit tests.
    pub fn small(seed: u64) -> Self {
        Self::new(seed, 2, 16, 32, 0.1)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(format!("synthetic corpus: {m}")));
        if self.n_domains == 0 || self.pairs_per_domain == 0 || self.vocab_per_domain == 0 || self.doc_len == 0 {
            return bad("all counts must be >= 1");
        }
        if self.topics_per_domain == 0 || self.topics_per_domain > self.vocab_per_domain {
            return bad("topics_per_domain must be in 1..=vocab_per_domain");
        }
        if self.boilerplate_size == 0 || self.boilerplate_size >= self.vocab_per_domain {
            return bad("boilerplate_size must be in 1..vocab_per_domain");
        }
        for (name, p) in [
            ("noise", self.noise),
            ("subsample", self.subsample),
            ("boilerplate_rate", self.boilerplate_rate),
            ("shared_rate", self.shared_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.boilerplate_rate + self.shared_rate > 1.0 {
            return bad("boilerplate_rate + shared_rate must be <= 1");
        }
        Ok(())
    }
}

pub fn domain_label(k: usize) -> String {
    format!("domain-{k}")
}

/// Deterministic multi-domain corpus where every query is a subsampled, noisy
/// view of its document. Panics if `cfg` fails [`SyntheticConfig::validate`].
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> PairDataset {
    cfg.validate().expect("invalid synthetic corpus config");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared: Vec<String> = (0..cfg.vocab_per_domain).map(|i| format!("s{i}")).collect();
    let mut pairs = Vec::with_capacity(cfg.n_domains * cfg.pairs_per_domain);

    for k in 0..cfg.n_domains {
        let domain = domain_label(k);
        let core: Vec<String> = (0..cfg.vocab_per_domain).map(|i| format!("d{k}w{i}")).collect();
        let topics: Vec<Vec<&String>> = (0..cfg.topics_per_domain)
            .map(|t| core.iter().skip(t).step_by(cfg.topics_per_domain).collect())
            .collect();
        let boilerplate: Vec<&String> = shared.choose_multiple(&mut rng, cfg.boilerplate_size).collect();
        let content: Vec<&String> = shared.iter().filter(|t| !boilerplate.contains(t)).collect();

        for i in 0..cfg.pairs_per_domain {
            let topic = &topics[rng.random_range(0..topics.len())];
            let doc: Vec<&String> = (0..cfg.doc_len)
                .map(|_| {
                    let r: f64 = rng.random();
                    if r < cfg.boilerplate_rate {
                        *boilerplate.choose(&mut rng).unwrap()
                    } else if r < cfg.boilerplate_rate + cfg.shared_rate {
                        *content.choose(&mut rng).unwrap()
                    } else {
                        *topic.choose(&mut rng).unwrap()
                    }
                })
                .collect();

            let mut query: Vec<&String> = doc.iter().copied().filter(|_| rng.random_bool(cfg.subsample)).collect();
            if query.is_empty() {
                query.push(doc[0]);
            }
            for tok in query.iter_mut() {
                if rng.random_bool(cfg.noise) {
                    *tok = boilerplate.choose(&mut rng).unwrap();
                }
            }
            query.shuffle(&mut rng);

            let join = |toks: &[&String]| toks.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            let id = format!("{domain}-{i}");
            pairs.push(Pair {
                query: TextRecord {
                    id: format!("{id}:q"),
                    text: join(&query),
                    domain: domain.clone(),
                    prefix: None,
                },
                document: TextRecord {
                    id: format!("{id}:d"),
                    text: join(&doc),
                    domain: domain.clone(),
                    prefix: None,
                },
            });
        }
    }
    PairDataset::new(pairs).expect("synthetic ids are unique")
}
