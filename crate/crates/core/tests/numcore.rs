use hypertab::numcore::layers::{init_attention, multi_head_attention};
use hypertab::numcore::{
    grad_check, AdamW, AdamWConfig, GradCheckConfig, LrSchedule, NumError, ParamGrads, ParamStore, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_of(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

/// Reduce `out` against a fixed random weighting so that ops with a constant
/// plain sum (softmax rows) still have informative gradients.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, NumError> {
    let shape = tape.value(out).shape().to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn fd() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-5,
        floor: 1e-8,
        max_entries_per_param: None,
        five_point: false,
    }
}

fn check_op(
    store: &ParamStore,
    op: impl Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>,
    tol: f64,
) -> f64 {
    let report = grad_check(
        store,
        |tape, s| {
            let out = op(tape, s)?;
            weighted_sum(tape, out, 99)
        },
        &fd(),
    )
    .unwrap();
    let worst = report.max_rel_error();
    assert!(worst < tol, "max rel error {worst:e}: {:?}", report.params);
    assert!(report.dead_params().is_empty());
    worst
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = store_of(&[("theta", random(&mut rng, &[2, 3]))]);
    let report = grad_check(
        &store,
        |tape, s| {
            let t = tape.param(s, "theta")?;
            let sq = tape.mul(t, t)?;
            tape.sum(sq)
        },
        &fd(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
}

#[test]
fn matmul_backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = store_of(&[("a", random(&mut rng, &[3, 4])), ("b", random(&mut rng, &[4, 2]))]);
    check_op(
        &store,
        |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            t.matmul(a, b)
        },
        1e-6,
    );
}

#[test]
fn every_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = store_of(&[
        ("x", random(&mut rng, &[4, 6])),
        ("y", random(&mut rng, &[4, 6])),
        ("r", random(&mut rng, &[1, 6])),
        ("m", random(&mut rng, &[6, 3])),
        ("g", random(&mut rng, &[1, 6])),
    ]);
    type OpFn = fn(&mut Tape, &ParamStore) -> Result<Var, NumError>;
    let ops: Vec<(&str, OpFn)> = vec![
        ("add", |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            t.add(x, y)
        }),
        ("add_row", |t, s| {
            let (x, r) = (t.param(s, "x")?, t.param(s, "r")?);
            t.add_row(x, r)
        }),
        ("mul", |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            t.mul(x, y)
        }),
        ("scale", |t, s| {
            let x = t.param(s, "x")?;
            t.scale(x, -1.7)
        }),
        ("gelu", |t, s| {
            let x = t.param(s, "x")?;
            t.gelu(x)
        }),
        ("tanh", |t, s| {
            let x = t.param(s, "x")?;
            t.tanh(x)
        }),
        ("softmax", |t, s| {
            let x = t.param(s, "x")?;
            t.softmax(x)
        }),
        ("softmax_causal", |t, s| {
            let x = t.param(s, "x")?;
            t.softmax_masked(x, Some(1))
        }),
        ("layer_norm", |t, s| {
            let (x, g, r) = (t.param(s, "x")?, t.param(s, "g")?, t.param(s, "r")?);
            t.layer_norm(x, g, r, 1e-5)
        }),
        ("mean_groups", |t, s| {
            let x = t.param(s, "x")?;
            t.mean_groups(x, &[vec![0, 2], vec![1, 1, 3], vec![3]])
        }),
        ("gather", |t, s| {
            let x = t.param(s, "x")?;
            t.gather(x, &[3, 0, 3, 1])
        }),
        ("concat_rows", |t, s| {
            let (x, r) = (t.param(s, "x")?, t.param(s, "r")?);
            t.concat_rows(&[x, r])
        }),
        ("concat_cols", |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            t.concat_cols(&[x, y])
        }),
        ("slice_cols", |t, s| {
            let x = t.param(s, "x")?;
            t.slice_cols(x, 2, 3)
        }),
        ("transpose", |t, s| {
            let x = t.param(s, "x")?;
            t.transpose(x)
        }),
        ("matmul_nt", |t, s| {
            let (x, y) = (t.param(s, "x")?, t.param(s, "y")?);
            t.matmul_nt(x, y)
        }),
        ("matmul_tanh", |t, s| {
            let (x, m) = (t.param(s, "x")?, t.param(s, "m")?);
            let p = t.matmul(x, m)?;
            t.tanh(p)
        }),
    ];
    for (name, op) in ops {
        // Ops that ignore some store entries are checked on their own subset.
        let mut tape = Tape::new();
        op(&mut tape, &store).unwrap();
        let used: Vec<String> = tape.param_vars().keys().cloned().collect();
        let sub = store_of(
            &used
                .iter()
                .map(|n| (n.as_str(), store.get(n).unwrap().clone()))
                .collect::<Vec<_>>(),
        );
        let worst = std::panic::catch_unwind(|| check_op(&sub, op, 1e-5));
        assert!(worst.is_ok(), "op {name} failed the finite-difference check");
    }
}

#[test]
fn cross_entropy_gradient_and_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = store_of(&[("z", random(&mut rng, &[3, 5]))]);
    let targets = [Some(2), None, Some(4)];
    let report = grad_check(
        &store,
        |t, s| {
            let z = t.param(s, "z")?;
            t.cross_entropy(z, &targets)
        },
        &fd(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6);
    // The masked row contributes no gradient.
    let mut tape = Tape::new();
    let z = tape.param(&store, "z").unwrap();
    let l = tape.cross_entropy(z, &targets).unwrap();
    let g = tape.backward(l).unwrap().wrt(z);
    assert!(g.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[1, 3]));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_shift() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(&[1, 4], 2.5));
    let g = tape.input(Tensor::new(vec![1, 4], vec![3.0, -1.0, 2.0, 0.5]).unwrap());
    let b = tape.input(Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(&[3, 4]));
    let b = tape.input(Tensor::zeros(&[3, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul"), "{err}");
    let err = tape.add(a, b).unwrap_err();
    assert!(err.to_string().starts_with("add"), "{err}");
    let empty = tape.input(Tensor::new(vec![2, 0], vec![]).unwrap());
    assert_eq!(tape.softmax(empty).unwrap_err(), NumError::EmptyAxis("softmax"));
    let g = tape.input(Tensor::zeros(&[1, 0]));
    assert_eq!(tape.layer_norm(empty, g, g, 1e-5).unwrap_err(), NumError::EmptyAxis("layer_norm"));
}

fn attention_store(d: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_attention(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), "att", d).unwrap();
    s
}

fn attend(store: &ParamStore, q: &Tensor, k: &Tensor, heads: usize) -> Tensor {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.input(q.clone()), tape.input(k.clone()));
    let out = multi_head_attention(&mut tape, store, "att", qv, kv, kv, heads, false).unwrap();
    tape.value(out).clone()
}

#[test]
fn single_key_ignores_the_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = attention_store(8, 6);
    let k = random(&mut rng, &[1, 8]);
    let out = attend(&store, &random(&mut rng, &[3, 8]), &k, 2);
    for i in 1..3 {
        for (a, b) in out.row(0).iter().zip(out.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_width() {
    let store = attention_store(6, 0);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[2, 6]));
    assert!(multi_head_attention(&mut tape, &store, "att", x, x, x, 4, false).is_err());
}

#[test]
fn attention_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = attention_store(8, 8);
    store.insert("q", random(&mut rng, &[2, 8])).unwrap();
    store.insert("kv", random(&mut rng, &[3, 8])).unwrap();
    check_op(
        &store,
        |t, s| {
            let (q, kv) = (t.param(s, "q")?, t.param(s, "kv")?);
            multi_head_attention(t, s, "att", q, kv, kv, 2, false)
        },
        1e-6,
    );
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = attention_store(8, 10);
    store.insert("q", random(&mut rng, &[4, 8])).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let q = tape.param(&store, "q").unwrap();
        let o = multi_head_attention(&mut tape, &store, "att", q, q, q, 2, true).unwrap();
        let l = weighted_sum(&mut tape, o, 1).unwrap();
        (tape.value(l).data()[0], tape.backward(l).unwrap().params())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    for (k, t) in &ga {
        assert!(t.data().iter().zip(gb[k].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn adamw_closed_forms() {
    let one = |lr, wd, g: f64| {
        let mut store = store_of(&[("theta", Tensor::scalar(1.0))]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr,
                weight_decay: wd,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            LrSchedule::Constant,
        );
        let grads: ParamGrads = [("theta".to_string(), Tensor::scalar(g))].into_iter().collect();
        opt.step(&mut store, &grads).unwrap();
        (store.get("theta").unwrap().data()[0], store.step())
    };
    let (theta, step) = one(0.1, 0.0, 1.0);
    assert!((theta - 0.9).abs() < 1e-6, "{theta}");
    assert_eq!(step, 1);
    let (theta, _) = one(0.1, 0.05, 0.0);
    assert!((theta - 0.995).abs() < 1e-12, "{theta}");
    let (theta, step) = one(0.1, 0.0, 0.0);
    assert_eq!((theta, step), (1.0, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.input(random(&mut rng, &[rows, cols]));
        let x = tape.scale(x, scale).unwrap();
        let y = tape.softmax(x).unwrap();
        for i in 0..rows {
            let s: f64 = tape.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..17, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.input(random(&mut rng, &[rows, cols]));
        let g = tape.input(Tensor::full(&[1, cols], 1.0));
        let b = tape.input(Tensor::zeros(&[1, cols]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for i in 0..rows {
            let r = tape.value(y).row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_is_invariant_to_joint_key_value_permutation(seed in any::<u64>(), k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = attention_store(8, seed ^ 1);
        let q = random(&mut rng, &[2, 8]);
        let kv = random(&mut rng, &[k, 8]);
        let mut order: Vec<usize> = (0..k).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| kv.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let a = attend(&store, &q, &kv, 2);
        let b = attend(&store, &q, &permuted, 2);
        prop_assert!(a.max_rel_diff(&b, 1e-12) < 1e-9);
    }
}
