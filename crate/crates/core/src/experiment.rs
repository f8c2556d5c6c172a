//! Desk-scale experiment presets: the synthetic corpus, a held-out split, the
//! surrogate view of the training pairs and helpers that train either encoder
//! under a given batch source.

use crate::cluster::{cluster_pairs, ClusterAssignment, ClusterConfig};
use crate::data::{generate_synthetic_corpus, EmbeddingMatrix, PairDataset, SyntheticConfig};
use crate::encoders::{Biencoder, CdeModel, EncoderConfig, TokenIndexer};
use crate::eval::{split_pairs, RetrievalTask};
use crate::filter::FilterConfig;
use crate::pack::{PackStrategy, PackingConfig};
use crate::surrogate::{Surrogate, SurrogateConfig};
use crate::train::{train_biencoder, train_cde, BatchSource, TrainConfig, TrainData, TrainReport};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub corpus: SyntheticConfig,
    pub test_fraction: f64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub batch_size: usize,
    pub surrogate: SurrogateConfig,
    pub cluster: ClusterConfig,
}

impl DeskConfig {
    /// Four domains of 800 pairs, 640 of them for training: twenty full
    /// batches of 32 per domain.
    pub fn new(seed: u64) -> Self {
        let corpus = SyntheticConfig::new(seed, 4, 800, 64, 0.5);
        Self {
            corpus,
            test_fraction: 0.2,
            encoder: EncoderConfig {
                vocab_size: 1024,
                dim: 32,
                max_len: 32,
                context_size: 16,
                context_doc_tokens: 16,
                ..EncoderConfig::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::desk()
            },
            batch_size: 32,
            surrogate: SurrogateConfig::default(),
            cluster: ClusterConfig {
                k: 4,
                seed,
                ..ClusterConfig::default()
            },
        }
    }
}

/// Everything derived from the corpus before any encoder is trained.
#[derive(Debug, Clone)]
pub struct DeskRun {
    pub cfg: DeskConfig,
    pub train: PairDataset,
    pub test: RetrievalTask,
    pub surrogate: Surrogate,
    pub phi: EmbeddingMatrix,
    pub psi: EmbeddingMatrix,
    pub clusters: ClusterAssignment,
}

impl DeskRun {
    pub fn prepare(cfg: DeskConfig) -> Result<Self> {
        let all = generate_synthetic_corpus(&cfg.corpus);
        let (train_idx, test_idx) = split_pairs(&all, cfg.test_fraction, cfg.corpus.seed)?;
        let train = all.subset(&train_idx)?;
        let test = RetrievalTask::from_pairs(&all.subset(&test_idx)?);
        let surrogate = Surrogate::fit(&train, cfg.surrogate.clone())?;
        let (phi, psi) = surrogate.embed_pairs(&train)?;
        let domains: Vec<String> = train.pairs.iter().map(|p| p.domain().to_string()).collect();
        let clusters = cluster_pairs(&phi, &psi, &domains, &cfg.cluster)?;
        Ok(Self {
            cfg,
            train,
            test,
            surrogate,
            phi,
            psi,
            clusters,
        })
    }

    pub fn clustered(&self) -> BatchSource {
        BatchSource::Clustered {
            assignment: self.clusters.clone(),
            packing: PackingConfig {
                batch_size: self.cfg.batch_size,
                strategy: PackStrategy::Tsp,
                ..PackingConfig::default()
            },
        }
    }

    /// Uniformly random batches of the same size, mixing domains.
    pub fn random(&self) -> BatchSource {
        BatchSource::Random {
            batch_size: self.cfg.batch_size,
            domain_pure: false,
        }
    }

    pub fn data(&self, source: BatchSource, filter: FilterConfig) -> TrainData<'_> {
        TrainData {
            dataset: &self.train,
            phi: &self.phi,
            psi: &self.psi,
            filter,
            source,
        }
    }

    pub fn indexer(&self) -> TokenIndexer {
        TokenIndexer::from_dataset(self.cfg.encoder.vocab_size, &self.train)
    }

    pub fn train_biencoder(&self, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<(Biencoder<f32>, TrainReport)> {
        let mut model = Biencoder::new(self.cfg.encoder.clone(), self.indexer(), cfg.seed)?;
        let report = train_biencoder(&mut model, data, cfg, None)?;
        Ok((model, report))
    }

    pub fn train_cde(&self, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<(CdeModel<f32>, TrainReport)> {
        let mut model = CdeModel::new(self.cfg.encoder.clone(), self.indexer(), cfg.seed)?;
        let report = train_cde(&mut model, data, cfg, None)?;
        Ok((model, report))
    }
}
