use crate::{manifest, Command, Failure, ModelKind};
use cde_core::cluster::{cluster_pairs, pair_points, read_cluster_file, write_cluster_file};
use cde_core::config::RunConfig;
use cde_core::data::{
    build_vocab, generate_synthetic_corpus, load_pairs_jsonl, read_embedding_cache, write_embedding_cache, PairDataset,
    TEXT_SEPARATOR,
};
use cde_core::encoders::{load_checkpoint, save_checkpoint, Biencoder, CdeModel, Model, TokenIndexer};
use cde_core::eval::{
    context_size_sweep, cross_domain_context_matrix, evaluate_lexical, evaluate_retrieval, idf_divergence, pearson,
    split_pairs, write_idf_csv, write_sweep_csv, IdfPoint, RetrievalTask,
};
use cde_core::filter::{build_plan_masks, mask_stats};
use cde_core::pack::{pack_batches, random_batch_plan, read_plan, write_plan};
use cde_core::surrogate::Surrogate;
use cde_core::train::{train_biencoder, train_cde, write_log_csv, BatchSource, TrainData};
use cde_core::{Error, Result};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

/// Runs one command, writes its manifest and prints a one-line JSON summary.
pub fn execute(cmd: &Command, cfg: &RunConfig, out_dir: &Path) -> std::result::Result<(), Failure> {
    for p in cmd.inputs() {
        if !p.exists() {
            return Err(Failure::missing(p));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (outputs, summary) = dispatch(cmd, cfg, out_dir)?;
    let path = manifest::write(cmd, cfg, out_dir, &outputs)?;
    let mut line = json!({ "command": cmd.name(), "manifest": path });
    if let (Value::Object(l), Value::Object(s)) = (&mut line, summary) {
        l.extend(s);
    }
    println!("{line}");
    Ok(())
}

fn load(cfg: &RunConfig, path: &Path) -> Result<PairDataset> {
    load_pairs_jsonl(path, &cfg.prefix.to_prefix_config())
}

fn contextual(model: Model, what: &str) -> std::result::Result<CdeModel<f32>, Failure> {
    match model {
        Model::Cde(m) => Ok(m),
        Model::Biencoder(_) => Err(Failure::config(format!("{what} needs a contextual (cde) checkpoint"))),
    }
}

type Outcome = (Vec<PathBuf>, Value);

fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> std::result::Result<Outcome, Failure> {
    Ok(match cmd {
        Command::SynthData => {
            let ds = generate_synthetic_corpus(&cfg.synth);
            let (train, test) = split_pairs(&ds, cfg.eval.test_fraction, cfg.seed)?;
            let files = [out.join("pairs.jsonl"), out.join("train.jsonl"), out.join("test.jsonl")];
            ds.write_jsonl(&files[0])?;
            ds.subset(&train)?.write_jsonl(&files[1])?;
            ds.subset(&test)?.write_jsonl(&files[2])?;
            let summary = json!({ "pairs": ds.len(), "train": train.len(), "test": test.len(), "domains": ds.domains.len() });
            (files.to_vec(), summary)
        }
        Command::Embed { pairs } => {
            let ds = load(cfg, pairs)?;
            let s = Surrogate::fit(&ds, cfg.surrogate.clone())?;
            let (phi, psi) = s.embed_pairs(&ds)?;
            let files = [out.join("phi.cde"), out.join("psi.cde")];
            write_embedding_cache(&phi, &files[0])?;
            write_embedding_cache(&psi, &files[1])?;
            (files.to_vec(), json!({ "rows": phi.rows(), "dim": phi.dim(), "vocab": s.vocab.len() }))
        }
        Command::Cluster { pairs, phi, psi } => {
            let ds = load(cfg, pairs)?;
            let (phi, psi) = (read_embedding_cache(phi)?, read_embedding_cache(psi)?);
            if phi.rows() != ds.len() || psi.rows() != ds.len() {
                return Err(Error::Size(format!("{} pairs but {} / {} embedding rows", ds.len(), phi.rows(), psi.rows())).into());
            }
            let domains: Vec<String> = ds.pairs.iter().map(|p| p.domain().to_string()).collect();
            let ca = cluster_pairs(&phi, &psi, &domains, &cfg.cluster)?;
            let file = out.join("clusters.jsonl");
            write_cluster_file(&file, &ca, &pair_points(&phi, &psi)?)?;
            (vec![file], json!({ "clusters": ca.centroids.len(), "objective": ca.objective }))
        }
        Command::Pack {
            pairs,
            clusters,
            random,
            domain_pure,
        } => {
            let ds = load(cfg, pairs)?;
            let plan = match clusters {
                Some(c) if !random => {
                    let ca = read_cluster_file(c, ds.len())?;
                    let domains: Vec<String> = ds.pairs.iter().map(|p| p.domain().to_string()).collect();
                    pack_batches(&ca, &domains, &cfg.pack)?
                }
                _ => random_batch_plan(&ds, cfg.pack.batch_size, cfg.seed, *domain_pure)?,
            };
            let files = [out.join("plan.jsonl"), out.join("drops.json")];
            write_plan(&plan, &files[0], &files[1])?;
            (files.to_vec(), json!({ "batches": plan.batches.len(), "covered": plan.covered(), "dropped": plan.dropped.len() }))
        }
        Command::FilterStats { pairs, plan, phi, psi } => {
            let ds = load(cfg, pairs)?;
            let plan = read_plan(plan, None)?;
            let (phi, psi) = (read_embedding_cache(phi)?, read_embedding_cache(psi)?);
            let masks = build_plan_masks(&plan, &ds, &phi, &psi, &cfg.filter)?;
            let stats = mask_stats(&plan, &masks, &ds, cfg.filter.collision_mode);
            let file = out.join("mask_stats.json");
            write_json(&file, &serde_json::to_value(&stats).map_err(Error::from)?)?;
            (vec![file], serde_json::to_value(&stats).map_err(Error::from)?)
        }
        Command::Train { kind, pairs, clusters } => train(cfg, out, *kind, pairs, clusters.as_deref())?,
        Command::Eval { pairs, model, .. } => {
            let ds = load(cfg, pairs)?;
            let task = RetrievalTask::from_pairs(&ds);
            let lexical = Surrogate::fit(&ds, cfg.surrogate.clone())?;
            let report = match model {
                Some(m) => evaluate_retrieval(&load_checkpoint(m)?, &task, &cfg.strategy(), Some(&lexical))?,
                None => evaluate_lexical(&lexical, &task)?,
            };
            let file = out.join("eval_report.json");
            report.write_json(&file)?;
            let summary = json!({ "strategy": report.strategy, "mean_ndcg10": report.mean_ndcg10, "skipped": report.skipped });
            (vec![file], summary)
        }
        Command::SweepContext { pairs, model } => {
            let ds = load(cfg, pairs)?;
            let m = contextual(load_checkpoint(model)?, "sweep-context")?;
            let points = context_size_sweep(&m, &RetrievalTask::from_pairs(&ds), &cfg.eval.sweep_sizes, cfg.seed)?;
            let file = out.join("sweep.csv");
            write_sweep_csv(&points, &file)?;
            (vec![file], json!({ "points": points.len() }))
        }
        Command::DomainMatrix { pairs, model } => {
            let ds = load(cfg, pairs)?;
            let m = contextual(load_checkpoint(model)?, "domain-matrix")?;
            let k = cfg.strategy().k;
            let matrix = cross_domain_context_matrix(&m, &RetrievalTask::from_pairs(&ds), k, cfg.seed)?;
            let file = out.join("domain_matrix.csv");
            matrix.write_csv(&file)?;
            (vec![file], json!({ "domains": matrix.domains.len(), "diagonal_highlighted": matrix.diagonal_highlighted() }))
        }
        Command::AnalyzeIdf {
            train_pairs,
            test_pairs,
            model,
        } => analyze_idf(cfg, out, train_pairs, test_pairs, model)?,
        Command::InspectPlan { pairs, plan, drops } => {
            let ds = load(cfg, pairs)?;
            let plan = read_plan(plan, drops.as_deref())?;
            let check = plan.check_partition(ds.len());
            let sizes: Vec<usize> = plan.batches.iter().map(|b| b.pair_indices.len()).collect();
            let pure = plan
                .batches
                .iter()
                .filter(|b| b.pair_indices.iter().all(|&i| ds.pairs.get(i).is_some_and(|p| p.domain() == b.domain)))
                .count();
            let report = json!({
                "pairs": ds.len(),
                "batches": plan.batches.len(),
                "batch_size": plan.batch_size,
                "covered": plan.covered(),
                "dropped": plan.dropped.len(),
                "min_batch": sizes.iter().min(),
                "max_batch": sizes.iter().max(),
                "domain_pure_batches": pure,
                "partition_ok": check.is_ok(),
            });
            let file = out.join("plan_report.json");
            write_json(&file, &report)?;
            check?;
            (vec![file], report)
        }
        Command::Replay { .. } => unreachable!("replay is handled before dispatch"),
    })
}

fn train(
    cfg: &RunConfig,
    out: &Path,
    kind: ModelKind,
    pairs: &Path,
    clusters: Option<&Path>,
) -> std::result::Result<Outcome, Failure> {
    let ds = load(cfg, pairs)?;
    let (phi, psi) = Surrogate::fit(&ds, cfg.surrogate.clone())?.embed_pairs(&ds)?;
    let source = match clusters {
        Some(c) => BatchSource::Clustered {
            assignment: read_cluster_file(c, ds.len())?,
            packing: cfg.pack.clone(),
        },
        None => BatchSource::Random {
            batch_size: cfg.pack.batch_size,
            domain_pure: false,
        },
    };
    let data = TrainData {
        dataset: &ds,
        phi: &phi,
        psi: &psi,
        filter: cfg.filter.clone(),
        source,
    };
    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let indexer = TokenIndexer::from_dataset(cfg.model.vocab_size, &ds);
    let (model, report) = match kind {
        ModelKind::Biencoder => {
            let mut m = Biencoder::new(cfg.model.clone(), indexer, cfg.seed)?;
            let r = train_biencoder(&mut m, &data, &cfg.train, Some(&ckpt))?;
            (Model::Biencoder(m), r)
        }
        ModelKind::Cde => {
            let mut m = CdeModel::new(cfg.model.clone(), indexer, cfg.seed)?;
            let r = train_cde(&mut m, &data, &cfg.train, Some(&ckpt))?;
            (Model::Cde(m), r)
        }
    };
    let log = out.join("train_log.csv");
    write_log_csv(&report.log, &log)?;
    let model_path = out.join("model.bin");
    save_checkpoint(&model, &model_path)?;
    let mut files = vec![log, model_path.clone(), cde_core::encoders::sidecar_path(&model_path)];
    for c in &report.checkpoints {
        files.push(c.clone());
        files.push(cde_core::encoders::sidecar_path(c));
    }
    let losses = report.losses();
    let summary = json!({
        "model": model.kind(),
        "steps": losses.len(),
        "first_loss": losses.first(),
        "last_loss": losses.last(),
    });
    Ok((files, summary))
}

fn analyze_idf(
    cfg: &RunConfig,
    out: &Path,
    train_pairs: &Path,
    test_pairs: &Path,
    model: &Path,
) -> std::result::Result<Outcome, Failure> {
    let train = load(cfg, train_pairs)?;
    let test = load(cfg, test_pairs)?;
    let model = load_checkpoint(model)?;
    let task = RetrievalTask::from_pairs(&test);
    let retriever = Surrogate::fit(&test, cfg.surrogate.clone())?;
    let report = evaluate_retrieval(&model, &task, &cfg.strategy(), Some(&retriever))?;
    let train_vocab = build_vocab(&train.document_texts(TEXT_SEPARATOR));
    let mut points = Vec::new();
    for (name, idx) in test.indices_by_domain() {
        let sub = test.subset(&idx)?;
        let test_vocab = build_vocab(&sub.document_texts(TEXT_SEPARATOR));
        // The lexical baseline sees the test domain's own statistics.
        let lexical = Surrogate::fit(&sub, cfg.surrogate.clone())?;
        let lex = evaluate_lexical(&lexical, &RetrievalTask::from_pairs(&sub))?;
        points.push(IdfPoint {
            divergence: idf_divergence(&train_vocab, &test_vocab, cfg.eval.divergence)?,
            delta_ndcg10: report.domain_mean(&name) - lex.mean_ndcg10,
            domain: name,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.divergence).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.delta_ndcg10).collect();
    let summary = json!({ "domains": points.len(), "pearson": pearson(&xs, &ys) });
    let files = [out.join("idf.csv"), out.join("idf_summary.json")];
    write_idf_csv(&points, &files[0])?;
    write_json(&files[1], &summary)?;
    Ok((files.to_vec(), summary))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
