use cde_core::cluster::{cluster_pairs, read_cluster_file, write_cluster_file, pair_points, ClusterConfig};
use cde_core::config::RunConfig;
use cde_core::data::{
    generate_synthetic_corpus, load_pairs_jsonl, read_embedding_cache, write_embedding_cache, PrefixConfig,
    SyntheticConfig,
};
use cde_core::encoders::{Biencoder, CdeModel, EncoderConfig, TokenIndexer};
use cde_core::eval::{
    context_size_sweep, evaluate_biencoder, evaluate_cde, evaluate_lexical, split_pairs, InferenceStrategy,
    RetrievalTask,
};
use cde_core::filter::{build_plan_masks, mask_stats, CollisionMode, FilterConfig};
use cde_core::pack::{pack_batches, random_batch_plan, read_plan, write_plan};
use cde_core::surrogate::Surrogate;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(3);
    cfg.synth = SyntheticConfig::new(3, 3, 96, 32, 0.3);
    cfg.cluster.k = 3;
    cfg
}

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let ds = generate_synthetic_corpus(&cfg.synth);
    let pairs = dir.path().join("pairs.jsonl");
    ds.write_jsonl(&pairs).unwrap();
    let back = load_pairs_jsonl(&pairs, &PrefixConfig::default()).unwrap();
    assert_eq!(back.len(), ds.len());
    assert!(back.pairs.iter().zip(&ds.pairs).all(|(a, b)| a.query.text == b.query.text && a.domain() == b.domain()));

    let surrogate = Surrogate::fit(&ds, cfg.surrogate.clone()).unwrap();
    let (phi, psi) = surrogate.embed_pairs(&ds).unwrap();
    let phi_path = dir.path().join("phi.cde");
    write_embedding_cache(&phi, &phi_path).unwrap();
    assert_eq!(read_embedding_cache(&phi_path).unwrap(), phi);

    let domains: Vec<String> = ds.pairs.iter().map(|p| p.domain().to_string()).collect();
    let ca = cluster_pairs(&phi, &psi, &domains, &cfg.cluster).unwrap();
    let clusters = dir.path().join("clusters.jsonl");
    write_cluster_file(&clusters, &ca, &pair_points(&phi, &psi).unwrap()).unwrap();
    assert_eq!(read_cluster_file(&clusters, ds.len()).unwrap().assignment, ca.assignment);

    let plan = pack_batches(&ca, &domains, &cfg.pack).unwrap();
    plan.check_partition(ds.len()).unwrap();
    let (plan_path, drops) = (dir.path().join("plan.jsonl"), dir.path().join("drops.json"));
    write_plan(&plan, &plan_path, &drops).unwrap();
    let again = read_plan(&plan_path, Some(&drops)).unwrap();
    assert_eq!(again.batches, plan.batches);
    assert_eq!(again.dropped, plan.dropped);
}

#[test]
fn clustered_batches_are_domain_pure_and_full() {
    let cfg = small();
    let ds = generate_synthetic_corpus(&cfg.synth);
    let surrogate = Surrogate::fit(&ds, cfg.surrogate.clone()).unwrap();
    let (phi, psi) = surrogate.embed_pairs(&ds).unwrap();
    let domains: Vec<String> = ds.pairs.iter().map(|p| p.domain().to_string()).collect();
    let ca = cluster_pairs(&phi, &psi, &domains, &cfg.cluster).unwrap();
    assert_eq!(ca.k, 9);
    assert!(ca.cluster_domains.iter().all(Option::is_some));
    let plan = pack_batches(&ca, &domains, &cfg.pack).unwrap();
    assert_eq!(plan.covered() + plan.dropped.len(), ds.len());
    for b in &plan.batches {
        assert_eq!(b.pair_indices.len(), cfg.pack.batch_size);
        assert!(b.pair_indices.iter().all(|&i| domains[i] == b.domain));
    }
    let random = random_batch_plan(&ds, cfg.pack.batch_size, 1, true).unwrap();
    assert!(random.batches.iter().all(|b| b.pair_indices.iter().all(|&i| domains[i] == b.domain)));
}

#[test]
fn filtering_masks_more_as_epsilon_falls() {
    let cfg = small();
    let ds = generate_synthetic_corpus(&cfg.synth);
    let surrogate = Surrogate::fit(&ds, cfg.surrogate.clone()).unwrap();
    let (phi, psi) = surrogate.embed_pairs(&ds).unwrap();
    let plan = random_batch_plan(&ds, 16, 2, false).unwrap();
    let stats = |epsilon: f64| {
        let f = FilterConfig {
            epsilon,
            enabled: true,
            collision_mode: CollisionMode::Off,
        };
        let masks = build_plan_masks(&plan, &ds, &phi, &psi, &f).unwrap();
        mask_stats(&plan, &masks, &ds, CollisionMode::Off).mean_masked_per_row
    };
    let (loose, strict) = (stats(-0.5), stats(0.0));
    assert!(loose >= strict);
    assert!(loose > 0.0);
    let off = build_plan_masks(&plan, &ds, &phi, &psi, &FilterConfig::disabled()).unwrap();
    assert!(off.iter().all(|m| m.masked_count == 0));
}

#[test]
fn untrained_models_evaluate_on_held_out_pairs() {
    let cfg = small();
    let ds = generate_synthetic_corpus(&cfg.synth);
    let (train_idx, test_idx) = split_pairs(&ds, 0.25, 3).unwrap();
    let train = ds.subset(&train_idx).unwrap();
    let task = RetrievalTask::from_pairs(&ds.subset(&test_idx).unwrap());
    assert_eq!(task.domains.len(), 3);

    let lexical = evaluate_lexical(&Surrogate::fit(&train, cfg.surrogate.clone()).unwrap(), &task).unwrap();
    assert!(lexical.mean_ndcg10 > 0.5, "{}", lexical.mean_ndcg10);

    let enc = EncoderConfig {
        vocab_size: 512,
        dim: 16,
        context_size: 8,
        ..EncoderConfig::default()
    };
    let ix = TokenIndexer::from_dataset(enc.vocab_size, &train);
    let bi = Biencoder::<f32>::new(enc.clone(), ix.clone(), 0).unwrap();
    let r = evaluate_biencoder(&bi, &task).unwrap();
    assert!((0.0..=1.0).contains(&r.mean_ndcg10));
    assert_eq!(r.strategy, InferenceStrategy::null_null().name());

    let cde = CdeModel::<f32>::new(enc, ix, 0).unwrap();
    let null = evaluate_cde(&cde, &task, &InferenceStrategy::null_null(), None).unwrap();
    let sweep = context_size_sweep(&cde, &task, &[0, 4, 8], 1).unwrap();
    assert_eq!(sweep[0].mean_ndcg10, null.mean_ndcg10);
    assert!(context_size_sweep(&cde, &task, &[9], 1).is_err());
}

#[test]
fn corpus_is_a_function_of_its_seed() {
    let a = generate_synthetic_corpus(&SyntheticConfig::small(5));
    let b = generate_synthetic_corpus(&SyntheticConfig::small(5));
    let c = generate_synthetic_corpus(&SyntheticConfig::small(6));
    assert_eq!(a.pairs, b.pairs);
    assert_ne!(a.pairs, c.pairs);
    let cfg = ClusterConfig {
        k: 2,
        ..ClusterConfig::default()
    };
    let s = Surrogate::fit(&a, Default::default()).unwrap();
    let (phi, psi) = s.embed_pairs(&a).unwrap();
    let labels: Vec<String> = a.pairs.iter().map(|p| p.domain().to_string()).collect();
    assert_eq!(
        cluster_pairs(&phi, &psi, &labels, &cfg).unwrap(),
        cluster_pairs(&phi, &psi, &labels, &cfg).unwrap()
    );
}
