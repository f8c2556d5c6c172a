use cde_autograd::{finite_diff_check, MemoryMeter, ParamId, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random weighting so
/// every output element influences the loss differently.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(&mut rng, shape.rows, shape.cols));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Var + 'a;

fn check(params: &ParamStore<f64>, ids: &[ParamId], seed: u64, build: &Build<'_>) -> f64 {
    let loss_of = |p: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let out = build(&mut tape, p, ids);
        let loss = weighted_sum(&mut tape, out, seed);
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, params, ids);
    let loss = weighted_sum(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap().to_store(params).unwrap();
    finite_diff_check(loss_of, params, &grads, 1e-5)
}

fn store(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut p = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| p.add(format!("p{i}"), random(rng, r, c)))
        .collect();
    (p, ids)
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(m, k), (k, n)]);
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let a = t.param(p, ids[0]);
            let b = t.param(p, ids[1]);
            t.matmul(a, b).unwrap()
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn matmul_t_gradients(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(m, k), (n, k)]);
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let a = t.param(p, ids[0]);
            let b = t.param(p, ids[1]);
            t.matmul_t(a, b).unwrap()
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn add_scale_and_row_broadcast(m in 1usize..8, n in 1usize..8, c in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(m, n), (m, n), (1, n)]);
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let a = t.param(p, ids[0]);
            let b = t.param(p, ids[1]);
            let r = t.param(p, ids[2]);
            let s = t.add(a, b).unwrap();
            let s = t.scale(s, c);
            t.add_row(s, r).unwrap()
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn softmax_and_log_gradients(m in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(m, n)]);
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let a = t.param(p, ids[0]);
            let s = t.rowwise_softmax(a).unwrap();
            t.log(s)
        });
        prop_assert!(err < TOL, "{}", err);
        let err = check(&p, &ids, seed.wrapping_add(1), &|t, p, ids| {
            let a = t.param(p, ids[0]);
            t.rowwise_softmax(a).unwrap()
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn mean_pool_and_normalize(m in 1usize..8, n in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(m, n)]);
        let start = (seed as usize) % m;
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let a = t.param(p, ids[0]);
            let pooled = t.mean_pool(a, start, m).unwrap();
            t.l2_normalize_rows(pooled)
        });
        prop_assert!(err < TOL, "{}", err);
        let err = check(&p, &ids, seed ^ 3, &|t, p, ids| {
            let a = t.param(p, ids[0]);
            t.l2_normalize_rows(a)
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn attention_gradients(m in 1usize..6, n in 1usize..8, d in 1usize..6, dv in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(m, d), (n, d), (n, dv)]);
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let q = t.param(p, ids[0]);
            let k = t.param(p, ids[1]);
            let v = t.param(p, ids[2]);
            t.scaled_dot_attention(q, k, v).unwrap()
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn gather_concat_dropout(n in 2usize..8, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, ids) = store(&mut rng, &[(n, cols), (3, cols), (1, cols)]);
        let index: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
        let mask: Vec<bool> = (0..n + 5).map(|_| rng.random_bool(0.4)).collect();
        let err = check(&p, &ids, seed, &|t, p, ids| {
            let table = t.param(p, ids[0]);
            let extra = t.param(p, ids[1]);
            let null = t.param(p, ids[2]);
            let rows = t.embedding_lookup(table, &index).unwrap();
            let cat = t.concat_rows(&[rows, extra]).unwrap();
            t.dropout_rows(cat, null, &mask).unwrap()
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn info_nce_gradients(b in 1usize..7, extra in 0usize..3, tau in 0.1f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = b + extra;
        let (p, ids) = store(&mut rng, &[(b, c)]);
        let mask: Vec<bool> = (0..b * c).map(|_| rng.random_bool(0.3)).collect();
        let loss_of = |p: &ParamStore<f64>| {
            let mut t = Tape::new();
            let s = t.param(p, ids[0]);
            let l = t.info_nce(s, &mask, tau).unwrap();
            t.value(l).item().unwrap()
        };
        let mut t = Tape::new();
        let s = t.param(&p, ids[0]);
        let l = t.info_nce(s, &mask, tau).unwrap();
        let grads = t.backward(l).unwrap().to_store(&p).unwrap();
        let err = finite_diff_check(loss_of, &p, &grads, 1e-5);
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn info_nce_equals_softmax_log_composition(b in 1usize..7, tau in 0.1f64..2.0, seed in any::<u64>()) {
        // Unmasked loss via the fused op vs. rowwise_softmax -> log -> pick diagonal.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = random(&mut rng, b, b);
        let mut t = Tape::new();
        let s = t.constant(scores.clone());
        let fused = t.info_nce(s, &vec![false; b * b], tau).unwrap();
        let scaled = t.scale(s, 1.0 / tau);
        let sm = t.rowwise_softmax(scaled).unwrap();
        let lg = t.log(sm);
        let eye = t.constant(Tensor::identity(b));
        let diag = t.mul(lg, eye).unwrap();
        let total = t.sum(diag);
        let composed = -t.value(total).item().unwrap() / b as f64;
        prop_assert!((t.value(fused).item().unwrap() - composed).abs() < 1e-12);
    }
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::filled(1, 4, 0.7));
    let y = t.rowwise_softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.25; 4]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::<f32>::new();
    let x = t.constant(random(&mut rng, 5, 7).cast());
    let y = t.rowwise_softmax(x).unwrap();
    for i in 0..5 {
        let s: f32 = t.value(y).row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_with_identical_keys_averages_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::<f64>::new();
    let q = t.constant(random(&mut rng, 2, 3));
    let k = t.constant(Tensor::from_f64(3, 3, &[0.5, 0.1, -0.2, 0.5, 0.1, -0.2, 0.5, 0.1, -0.2]).unwrap());
    let values = random(&mut rng, 3, 2);
    let v = t.constant(values.clone());
    let out = t.scaled_dot_attention(q, k, v).unwrap();
    for c in 0..2 {
        let mean = (values.get(0, c) + values.get(1, c) + values.get(2, c)) / 3.0;
        for r in 0..2 {
            assert!((t.value(out).get(r, c) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn matmul_with_identity_on_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 4, 3);
    let mut t = Tape::<f64>::new();
    let i = t.constant(Tensor::identity(4));
    let xv = t.constant(x.clone());
    let y = t.matmul(i, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(2, 2, &[1.0, -2.0, 3.0, 0.5]).unwrap());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(t.grad_of(&g, x).data(), &[1.0; 4]);
}

#[test]
fn dot_gradient_is_the_other_operand() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(1, 3, &[1.0, 2.0, 3.0]).unwrap());
    let y = t.leaf(Tensor::from_f64(1, 3, &[-1.0, 0.5, 4.0]).unwrap());
    let d = t.matmul_t(x, y).unwrap();
    let g = t.backward(d).unwrap();
    assert_eq!(t.grad_of(&g, x).data(), t.value(y).data());
    assert_eq!(t.grad_of(&g, y).data(), t.value(x).data());
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap());
    let unused = t.leaf(Tensor::from_f64(1, 2, &[3.0, 4.0]).unwrap());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(t.grad_of(&g, unused).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(2, 2));
    assert!(t.backward(x).is_err());
}

#[test]
fn shape_errors_name_the_operation() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::zeros(2, 3));
    let b = t.leaf(Tensor::zeros(2, 3));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    assert!(err.contains("[2x3]"), "{err}");
}

#[test]
fn info_nce_rejects_non_finite_scores() {
    let mut t = Tape::<f64>::new();
    let s = t.leaf(Tensor::from_f64(2, 2, &[1.0, f64::NAN, 0.0, 1.0]).unwrap());
    assert!(t.info_nce(s, &[false; 4], 1.0).is_err());
}

#[test]
fn meter_tracks_live_and_peak_nodes() {
    let meter = MemoryMeter::new();
    {
        let mut t = Tape::<f64>::with_meter(meter.clone());
        let x = t.leaf(Tensor::zeros(1, 2));
        let _ = t.sum(x);
        assert_eq!(meter.live(), 2);
    }
    assert_eq!(meter.live(), 0);
    assert_eq!(meter.peak(), 2);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::<f32>::new();
        let q = t.leaf(random(&mut rng, 3, 4).cast());
        let k = t.leaf(random(&mut rng, 5, 4).cast());
        let v = t.leaf(random(&mut rng, 5, 4).cast());
        let a = t.scaled_dot_attention(q, k, v).unwrap();
        let n = t.l2_normalize_rows(a);
        let s = t.sum(n);
        let g = t.backward(s).unwrap();
        (t.value(n).clone(), t.grad_of(&g, q), t.grad_of(&g, k))
    };
    assert_eq!(run(), run());
}
