//! `cde`: command-line front end for the batch construction, training and
//! evaluation pipeline.

mod commands;
mod manifest;

use cde_core::config::RunConfig;
use cde_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "cde", version, about = "Contrastive batch construction and contextual document embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one config key (repeatable); applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for every module; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Biencoder,
    Cde,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic corpus and a per-domain train/test split.
    SynthData,
    /// Fit the lexical surrogate and write document and query embeddings.
    Embed {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// K-Means over concatenated (document, query) surrogate vectors.
    Cluster {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        psi: PathBuf,
    },
    /// Pack clusters (or random draws) into fixed-size batches.
    Pack {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, required_unless_present = "random")]
        clusters: Option<PathBuf>,
        /// Uniformly random batches instead of clusters.
        #[arg(long)]
        random: bool,
        /// With --random: draw each batch from a single domain.
        #[arg(long, requires = "random")]
        domain_pure: bool,
    },
    /// False-negative mask statistics for a batch plan.
    FilterStats {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        psi: PathBuf,
    },
    /// Train an encoder; clustered batches when --clusters is given, random otherwise.
    Train {
        #[arg(value_enum)]
        kind: ModelKind,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// NDCG@10 of a checkpoint (or of the lexical surrogate) on held-out pairs.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, required_unless_present = "lexical")]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "model")]
        lexical: bool,
    },
    /// NDCG@10 against the number of random in-domain context documents.
    SweepContext {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Evaluate every domain with context drawn from every domain.
    DomainMatrix {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// IDF divergence between training and test domains against the model's
    /// NDCG@10 gap to a lexical baseline.
    AnalyzeIdf {
        #[arg(long)]
        train_pairs: PathBuf,
        #[arg(long)]
        test_pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Check that a batch plan partitions the dataset.
    InspectPlan {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        drops: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest with its recorded config.
    Replay {
        manifest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Embed { .. } => "embed",
            Command::Cluster { .. } => "cluster",
            Command::Pack { .. } => "pack",
            Command::FilterStats { .. } => "filter-stats",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::SweepContext { .. } => "sweep-context",
            Command::DomainMatrix { .. } => "domain-matrix",
            Command::AnalyzeIdf { .. } => "analyze-idf",
            Command::InspectPlan { .. } => "inspect-plan",
            Command::Replay { .. } => "replay",
        }
    }

    /// Files the command reads.
    pub fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Command::SynthData => {}
            Command::Embed { pairs } => v.push(pairs),
            Command::Cluster { pairs, phi, psi } => v.extend([pairs, phi, psi].map(PathBuf::as_path)),
            Command::Pack { pairs, clusters, .. } => {
                v.push(pairs);
                v.extend(clusters.as_deref());
            }
            Command::FilterStats { pairs, plan, phi, psi } => v.extend([pairs, plan, phi, psi].map(PathBuf::as_path)),
            Command::Train { pairs, clusters, .. } => {
                v.push(pairs);
                v.extend(clusters.as_deref());
            }
            Command::Eval { pairs, model, .. } => {
                v.push(pairs);
                v.extend(model.as_deref());
            }
            Command::SweepContext { pairs, model } | Command::DomainMatrix { pairs, model } => {
                v.extend([pairs, model].map(PathBuf::as_path))
            }
            Command::AnalyzeIdf {
                train_pairs,
                test_pairs,
                model,
            } => v.extend([train_pairs, test_pairs, model].map(PathBuf::as_path)),
            Command::InspectPlan { pairs, plan, drops } => {
                v.extend([pairs, plan].map(PathBuf::as_path));
                v.extend(drops.as_deref());
            }
            Command::Replay { manifest } => v.push(manifest),
        }
        v
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn missing(path: &Path) -> Self {
        Self {
            code: 2,
            kind: "missing_input",
            message: format!("input not found: {}", path.display()),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "config",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => (2, "missing_input"),
            Error::Config(_) => (3, "config"),
            Error::Numerical(_) => (4, "numerical"),
            Error::Io { .. } => (1, "io"),
            _ => (1, "error"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

/// Config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => return Err(Failure::missing(p)),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut kv = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        kv.push(("seed".into(), seed.to_string()));
    }
    cfg.apply(kv)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(Failure::config("--threads must be >= 1"));
        }
        cde_core::par::set_threads(t);
    }
    if let Command::Replay { manifest } = &cli.command {
        return manifest::replay(manifest, &cli.common.out_dir);
    }
    let cfg = resolve_config(&cli.common)?;
    commands::execute(&cli.command, &cfg, &cli.common.out_dir)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(Failure::config(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind, "code": f.code, "message": f.message });
    eprintln!("{line}");
    ExitCode::from(f.code)
}
