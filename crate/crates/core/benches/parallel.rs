//! Data-parallel hot paths on the default synthetic corpus, run once inside a
//! single-thread pool and once on the global pool.
//!
//! Building with `--no-default-features` swaps the rayon paths for plain
//! iterators; compare the two builds with criterion baselines:
//!
//! ```text
//! cargo bench -p cde-core --bench parallel -- --save-baseline par
//! cargo bench -p cde-core --bench parallel --no-default-features -- --baseline par
//! ```

use cde_core::cluster::cluster_pairs;
use cde_core::config::RunConfig;
use cde_core::data::generate_synthetic_corpus;
use cde_core::encoders::{m1_embed_context, CdeModel, TokenIndexer};
use cde_core::filter::build_plan_masks;
use cde_core::pack::pack_batches;
use cde_core::par;
use cde_core::surrogate::Surrogate;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn single_thread() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
}

fn modes(c: &mut Criterion, name: &str, mut f: impl FnMut() + Send) {
    let pool = single_thread();
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter("one_thread"), |b| b.iter(|| pool.install(&mut f)));
    let label = if par::is_parallel() { "rayon" } else { "sequential_build" };
    group.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(&mut f));
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let ds = generate_synthetic_corpus(&cfg.synth);
    let surrogate = Surrogate::fit(&ds, cfg.surrogate.clone()).unwrap();
    let (phi, psi) = surrogate.embed_pairs(&ds).unwrap();
    let domains: Vec<String> = ds.pairs.iter().map(|p| p.domain().to_string()).collect();
    let ca = cluster_pairs(&phi, &psi, &domains, &cfg.cluster).unwrap();
    let plan = pack_batches(&ca, &domains, &cfg.pack).unwrap();

    modes(c, "surrogate_embed", || {
        black_box(surrogate.embed_pairs(&ds).unwrap());
    });
    modes(c, "cluster_pairs", || {
        black_box(cluster_pairs(&phi, &psi, &domains, &cfg.cluster).unwrap());
    });
    modes(c, "plan_masks", || {
        black_box(build_plan_masks(&plan, &ds, &phi, &psi, &cfg.filter).unwrap());
    });

    let model = CdeModel::<f32>::new(cfg.model.clone(), TokenIndexer::from_dataset(cfg.model.vocab_size, &ds), 0).unwrap();
    let docs: Vec<(String, String)> = ds.pairs[..cfg.model.context_size]
        .iter()
        .map(|p| (p.document.id.clone(), p.document.text.clone()))
        .collect();
    let ctx = m1_embed_context(&model, &docs).unwrap();
    let texts: Vec<String> = ds.pairs[..256].iter().map(|p| p.document.text.clone()).collect();
    modes(c, "cde_embed_all", || {
        black_box(model.embed_all(&texts, &ctx).unwrap());
    });
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
