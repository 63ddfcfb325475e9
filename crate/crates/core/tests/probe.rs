use hypertab::corpus::{generate_corpus, CorpusConfig};
use hypertab::encoder::{init_encoder_params, EncoderConfig};
use hypertab::hypergraph::build_hypergraph;
use hypertab::probe::{
    build_probe_dataset, eval_f1, f1_score, median_f1, predict_probe, run_regimes, sample_pairs, split_instances,
    standardize, train_probe, ProbeConfig, ProbeInstance, ProbeResult, Regime,
};
use hypertab::table::Table;
use hypertab::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_g: 16,
        layers: 1,
        heads: 2,
        fusion_hidden: 16,
        hash_buckets: 64,
        seed_count: 1,
    }
}

fn quick() -> ProbeConfig {
    ProbeConfig {
        epochs: 50,
        ..ProbeConfig::default()
    }
}

fn synthetic(n: usize, d: usize, seed: u64, labels: impl Fn(&[f64]) -> bool) -> Vec<ProbeInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let features: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ProbeInstance {
                table: i,
                member: labels(&features),
                features,
            }
        })
        .collect()
}

#[test]
fn f1_closed_forms() {
    let actual = [true, false, true, false];
    assert_eq!(f1_score(&actual, &actual), 1.0);
    assert!((f1_score(&[true; 4], &actual) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(f1_score(&[false; 4], &actual), 0.0);
}

#[test]
fn two_by_two_pairs_are_balanced() {
    let t = Table::flat(&["name", "country"], &[vec!["Bob", "Canada"], vec!["Ann", "US"]], None).unwrap();
    let pairs = sample_pairs(&build_hypergraph(&t), &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(pairs.iter().filter(|p| p.2).count(), 8);
    assert_eq!(pairs.iter().filter(|p| !p.2).count(), 8);
}

#[test]
fn balanced_instances_per_table_and_seeded() {
    let tables: Vec<Table> = generate_corpus(&CorpusConfig { tables: 6, ..CorpusConfig::default() }, 1)
        .unwrap()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let cfg = small_encoder();
    let enc = init_encoder_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let a = build_probe_dataset(&tables, Regime::RandomEncoder, &cfg, &enc, 3).unwrap();
    assert_eq!(a, build_probe_dataset(&tables, Regime::RandomEncoder, &cfg, &enc, 3).unwrap());
    for t in 0..tables.len() {
        let pos = a.iter().filter(|i| i.table == t && i.member).count();
        let neg = a.iter().filter(|i| i.table == t && !i.member).count();
        assert_eq!(pos, neg);
        assert!(pos > 0);
    }
    assert!(a.iter().all(|i| i.features.len() == 2 * cfg.d_g));
}

#[test]
fn mlp_only_cannot_separate_identical_texts() {
    let t = Table::flat(&["a", "b"], &[vec!["same", "x"], vec!["same", "y"]], None).unwrap();
    let cfg = small_encoder();
    let enc = init_encoder_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let inst = build_probe_dataset(&[t], Regime::MlpOnly, &cfg, &enc, 5).unwrap();
    // Cell 0 and cell 2 share text; with no message passing their halves of
    // the features coincide.
    let d = cfg.d_g;
    let cells: Vec<&[f64]> = inst.iter().map(|i| &i.features[..d]).collect();
    assert!(cells.iter().any(|a| cells.iter().filter(|b| *b == a).count() >= 4));
}

#[test]
fn separable_data_is_learned() {
    let mut inst = synthetic(600, 6, 6, |x| x[0] + 0.5 * x[1] > 0.0);
    // Keep a margin around the separating plane.
    inst.retain(|i| (i.features[0] + 0.5 * i.features[1]).abs() > 0.1);
    let idx: Vec<usize> = (0..inst.len()).collect();
    standardize(&mut inst, &idx);
    let clf = train_probe(&inst, &idx, &quick(), 7).unwrap();
    let pred = predict_probe(&clf, &inst, &idx).unwrap();
    let acc = pred.iter().zip(&inst).filter(|(p, i)| **p == i.member).count() as f64 / inst.len() as f64;
    assert_eq!(acc, 1.0);
}

#[test]
fn shuffled_labels_give_chance_f1() {
    let mut inst = synthetic(1000, 6, 8, |x| x[0] > 0.0);
    let mut labels: Vec<bool> = (0..inst.len()).map(|i| i % 2 == 0).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    for (i, l) in inst.iter_mut().zip(labels) {
        i.member = l;
    }
    let (train, held) = split_instances(inst.len(), 0.8, 10);
    standardize(&mut inst, &train);
    let clf = train_probe(&inst, &train, &quick(), 11).unwrap();
    let f1 = eval_f1(&clf, &inst, &held).unwrap();
    assert!((f1 - 0.5).abs() <= 0.1, "F1 {f1}");
}

#[test]
fn training_is_deterministic() {
    let inst = synthetic(100, 4, 12, |x| x[2] > 0.1);
    let idx: Vec<usize> = (0..80).collect();
    let a = train_probe(&inst, &idx, &ProbeConfig { epochs: 3, ..quick() }, 13).unwrap();
    let b = train_probe(&inst, &idx, &ProbeConfig { epochs: 3, ..quick() }, 13).unwrap();
    assert_eq!(a, b);
    let (t1, h1) = split_instances(100, 0.8, 1);
    assert_eq!((t1.len(), h1.len()), (80, 20));
    assert_eq!(split_instances(100, 0.8, 1), (t1, h1));
}

#[test]
fn pretrained_regime_needs_weights() {
    let t = Table::flat(&["x"], &[vec!["1"], vec!["2"]], None).unwrap();
    let err = run_regimes(&[t], &[Regime::PretrainedEncoder], &small_encoder(), None, &quick(), &[0]).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));
}

#[test]
fn median_over_seeds() {
    let r = |seed, f1| ProbeResult {
        regime: Regime::MlpOnly,
        seed,
        instances: 1,
        train_accuracy: 1.0,
        f1,
    };
    assert_eq!(median_f1(&[r(0, 0.2), r(1, 0.9), r(2, 0.5)], Regime::MlpOnly), Some(0.5));
    assert!((median_f1(&[r(0, 0.2), r(1, 0.4)], Regime::MlpOnly).unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(median_f1(&[r(0, 0.2)], Regime::RandomEncoder), None);
}
