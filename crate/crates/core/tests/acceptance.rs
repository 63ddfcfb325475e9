//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 6-8 share the trained mini models.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hypertab::corpus::{generate_corpus, CorpusConfig};
use hypertab::encoder::encode_table;
use hypertab::hypergraph::{build_hypergraph, canonical_form};
use hypertab::model::{self, Mode};
use hypertab::numcore::ParamStore;
use hypertab::pipeline::{self, audit_check_config, audit_gradients, build_vocab, prepare, RunConfig};
use hypertab::probe::{median_f1, run_regimes, ProbeConfig, Regime};
use hypertab::run::{saliency_record, TrainHistory, TrainedModel};
use hypertab::structqa::{
    generate_dataset, permute_test_set, score, write_jsonl, PermutationRecord, PermutedPredictions, Sample, ScoreReport,
    SlotMode, Split, Task,
};
use hypertab::table::{permute_table, random_permutation, Permutation, Table};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:.1?}, limit {limit:?}"));
    }
    Ok(())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn hypergraph_isomorphism() -> Outcome {
    let start = Instant::now();
    let t = common::flat(&mut ChaCha8Rng::seed_from_u64(0), 3, 3, true);
    let reference = canonical_form(&build_hypergraph(&t));
    let mut exhaustive = 0;
    for rp in permutations(3) {
        for cp in permutations(3) {
            let s = permute_table(&t, &Permutation::new(rp.clone(), cp).unwrap()).unwrap();
            exhaustive += usize::from(canonical_form(&build_hypergraph(&s)) == reference);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = 0;
    for _ in 0..200 {
        let t = common::any_table(&mut rng, 6);
        let s = permute_table(&t, &random_permutation(&t, &mut rng)).unwrap();
        random += usize::from(canonical_form(&build_hypergraph(&t)) == canonical_form(&build_hypergraph(&s)));
    }
    within(Duration::from_secs(30), start)?;
    check(
        exhaustive == 36 && random == 200,
        format!("{exhaustive}/36 exhaustive, {random}/200 random"),
    )
}

fn encoder_invariance() -> Outcome {
    let start = Instant::now();
    let config = RunConfig::desk().model;
    let store = model::init_model(&config, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let t = common::any_table(&mut rng, 6);
        let s = permute_table(&t, &random_permutation(&t, &mut rng)).unwrap();
        let (gt, gs) = (build_hypergraph(&t), build_hypergraph(&s));
        let ids = |g: &hypertab::hypergraph::Hypergraph| g.nodes.iter().map(|n| n.cell_id).collect::<Vec<_>>();
        if ids(&gt) != ids(&gs) {
            return Err("node order is not keyed by cell id".into());
        }
        let a = encode_table(&gt, &config.encoder, &store).unwrap();
        let b = encode_table(&gs, &config.encoder, &store).unwrap();
        worst = worst.max(a.x_v.max_rel_diff(&b.x_v, 1e-9));
        let xa = model::structure_tokens(&store, &config, &gt).unwrap();
        let xb = model::structure_tokens(&store, &config, &gs).unwrap();
        worst = worst.max(xa.max_rel_diff(&xb, 1e-9));
    }
    within(Duration::from_secs(120), start)?;
    check(worst < 1e-5, format!("max relative difference {worst:.2e} over 50 tables"))
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let audit = audit_gradients(&RunConfig::tiny(), &audit_check_config()).map_err(|e| e.to_string())?;
    within(Duration::from_secs(300), start)?;
    let detail = format!(
        "{} parameters, max relative error {:.2e}, unused {}, dead {}",
        audit.param_count,
        audit.report.max_rel_error(),
        audit.unused.len(),
        audit.report.dead_params().len()
    );
    check(audit.param_count <= 5000 && audit.passes(1e-5), detail)
}

fn dataset_bytes(tables: &[(String, Table)], seed: u64) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.jsonl");
    write_jsonl(&path, &generate_dataset(tables, &Task::ALL, seed).unwrap()).unwrap();
    std::fs::read(path).unwrap()
}

fn generation_fidelity() -> Outcome {
    let start = Instant::now();
    let desk = RunConfig::desk();
    let tables = generate_corpus(desk.data.corpus.as_ref().unwrap(), desk.seed).unwrap();
    let ds = generate_dataset(&tables, &Task::ALL, desk.seed).unwrap();
    let split = |s| ds.iter().filter(|x| x.split == s).count();
    let per_task: Vec<usize> = Task::ALL.iter().map(|t| ds.iter().filter(|s| s.task == *t).count()).collect();
    let by_id: HashMap<&str, &Table> = tables.iter().map(|(i, t)| (i.as_str(), t)).collect();
    let oracle_ok = ds
        .iter()
        .filter(|s| common::oracle::oracle(by_id[s.table_id.as_str()], s) == s.answer)
        .count();
    let identical = dataset_bytes(&tables, desk.seed) == dataset_bytes(&tables, desk.seed)
        && generate_corpus(desk.data.corpus.as_ref().unwrap(), desk.seed).unwrap() == tables;
    within(Duration::from_secs(60), start)?;
    let counts = (ds.len(), split(Split::Train), split(Split::Valid), split(Split::Test));
    check(
        counts == (7500, 4500, 1500, 1500) && per_task.iter().all(|&n| n == 1500) && oracle_ok == ds.len() && identical,
        format!(
            "{} samples, splits {}/{}/{}, per task {per_task:?}, oracle {oracle_ok}/{}, reproducible {identical}",
            counts.0, counts.1, counts.2, counts.3, ds.len()
        ),
    )
}

fn test_predictions(samples: &[Sample], f: impl Fn(&Sample) -> String) -> HashMap<String, String> {
    samples.iter().filter(|s| s.split == Split::Test).map(|s| (s.sample_id.clone(), f(s))).collect()
}

fn metric_sanity() -> Outcome {
    let desk = RunConfig::desk();
    let tables = generate_corpus(desk.data.corpus.as_ref().unwrap(), desk.seed).unwrap();
    let ds = generate_dataset(&tables, &Task::ALL, desk.seed).unwrap();
    let perm = permute_test_set(&tables, &ds, desk.seed, SlotMode::Remap).unwrap();
    let gold = test_predictions(&ds, |s| s.answer.to_text());
    let pgold = test_predictions(&perm.samples, |s| s.answer.to_text());
    let on = |predictions| PermutedPredictions {
        predictions,
        samples: &perm.samples,
        records: &perm.records,
    };
    let oracle = score(&gold, &ds, Some(on(&pgold)));
    let constant = test_predictions(&ds, |_| "x".into());
    let c = score(&constant, &ds, Some(on(&constant)));
    // Correct on the originals, repeats the pre-permutation answers.
    let echo = score(&gold, &ds, Some(on(&gold)));
    let ok = oracle.direct_accuracy == 1.0
        && oracle.permutation_accuracy == Some(1.0)
        && oracle.robustness == Some(1.0)
        && c.robustness == Some(1.0)
        && c.direct_accuracy < 0.01
        && echo.permutation_accuracy.unwrap() < echo.direct_accuracy;
    check(
        ok,
        format!(
            "oracle {:.3}/{:.3}/{:.3}; constant robustness {:.3} direct {:.3}; echo direct {:.3} permuted {:.3}",
            oracle.direct_accuracy,
            oracle.permutation_accuracy.unwrap(),
            oracle.robustness.unwrap(),
            c.robustness.unwrap(),
            c.direct_accuracy,
            echo.direct_accuracy,
            echo.permutation_accuracy.unwrap()
        ),
    )
}

/// One trained mini model with its held-out scores.
struct MiniRun {
    model: TrainedModel,
    report: ScoreReport,
    elapsed: Duration,
}

struct Mini {
    tables: Vec<(String, Table)>,
    samples: Vec<Sample>,
    permuted_tables: Vec<(String, Table)>,
    permuted_samples: Vec<Sample>,
    records: Vec<PermutationRecord>,
}

impl Mini {
    fn new() -> Self {
        let c = RunConfig::mini();
        let tables = generate_corpus(c.data.corpus.as_ref().unwrap(), c.seed).unwrap();
        let samples = generate_dataset(&tables, &c.data.tasks, c.seed).unwrap();
        let set = permute_test_set(&tables, &samples, c.seed, SlotMode::Remap).unwrap();
        Self {
            tables,
            samples,
            permuted_tables: set.tables.into_iter().collect(),
            permuted_samples: set.samples,
            records: set.records,
        }
    }

    fn train(&self, mode: Mode, seed: u64) -> MiniRun {
        let start = Instant::now();
        let mut config = RunConfig::mini();
        config.mode = mode;
        config.seed = seed;
        let vocab = build_vocab(&self.tables, &self.samples);
        let data = prepare(&self.tables, &self.samples, &config.data.tasks, &vocab).unwrap();
        let init = model::init_model(&config.model, vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let outcome = pipeline::train(&config, &data, init, |_| {}).unwrap();
        let predict = |tables: &[(String, Table)], samples: &[Sample]| -> HashMap<String, String> {
            let d = prepare(tables, samples, &config.data.tasks, &vocab).unwrap();
            pipeline::predict(&outcome.store, &config, &vocab, &d, &d.split(Split::Test), 1)
                .unwrap()
                .into_iter()
                .collect()
        };
        let direct = predict(&self.tables, &self.samples);
        let permuted = predict(&self.permuted_tables, &self.permuted_samples);
        let report = score(
            &direct,
            &self.samples,
            Some(PermutedPredictions {
                predictions: &permuted,
                samples: &self.permuted_samples,
                records: &self.records,
            }),
        );
        MiniRun {
            model: TrainedModel {
                config,
                vocab,
                store: outcome.store,
                history: TrainHistory {
                    best_epoch: outcome.best_epoch,
                    epochs: outcome.history,
                },
            },
            report,
            elapsed: start.elapsed(),
        }
    }
}

fn describe(r: &MiniRun) -> String {
    format!(
        "{} seed {}: direct {:.3} permuted {:.3} robustness {:.3} (best epoch {}, {:.0?})",
        r.model.config.mode.as_str(),
        r.model.config.seed,
        r.report.direct_accuracy,
        r.report.permutation_accuracy.unwrap_or(0.0),
        r.report.robustness.unwrap_or(0.0),
        r.model.history.best_epoch,
        r.elapsed
    )
}

fn probe_ordering(pretrained: &ParamStore) -> Outcome {
    let start = Instant::now();
    let desk = RunConfig::desk();
    let corpus = CorpusConfig {
        tables: 100,
        ..desk.data.corpus.clone().unwrap()
    };
    let tables: Vec<Table> = generate_corpus(&corpus, desk.seed).unwrap().into_iter().map(|(_, t)| t).collect();
    let results = run_regimes(
        &tables,
        &Regime::ALL,
        &RunConfig::mini().model.encoder,
        Some(pretrained),
        &ProbeConfig::default(),
        &[0, 1, 2],
    )
    .map_err(|e| e.to_string())?;
    let m = |r| median_f1(&results, r).unwrap();
    let (mlp, random, pre) = (m(Regime::MlpOnly), m(Regime::RandomEncoder), m(Regime::PretrainedEncoder));
    within(Duration::from_secs(600), start)?;
    check(
        pre - random >= 0.05 && random - mlp >= 0.05,
        format!("median F1 pretrained {pre:.4} random {random:.4} mlp_only {mlp:.4}"),
    )
}

fn saliency_contract(run: &MiniRun, mini: &Mini) -> Outcome {
    let m = &run.model;
    let data = prepare(&mini.tables, &mini.samples, &m.config.data.tasks, &m.vocab).unwrap();
    let mut checked = 0;
    let mut masses = Vec::new();
    for item in data.split(Split::Test).into_iter().take(20) {
        for target in [0, item.episode.answer.len()] {
            let r = saliency_record(m, &data.graphs[item.graph], item, target).map_err(|e| e.to_string())?;
            let prefix = r.tokens.iter().filter(|t| *t == "<struct>").count();
            let last = prefix + item.episode.prompt_ids().len() - 1 + target;
            if r.scores[last + 1..].iter().any(|&s| s != 0.0) || r.scores.iter().any(|&s| s < 0.0) {
                return Err(format!("{}: nonzero importance after target {target}", r.sample_id));
            }
            masses.push(r.structure_mass());
        }
        checked += 1;
    }
    let min = masses.iter().cloned().fold(f64::INFINITY, f64::min);
    check(
        checked == 20 && min > 0.0,
        format!("{checked} episodes, smallest structure-prefix mass {min:.3e}"),
    )
}

fn end_to_end(mini: &Mini, first: (&MiniRun, &MiniRun)) -> Outcome {
    let start = Instant::now();
    let (ws, to) = first;
    let mut lines = vec![describe(ws), describe(to)];
    let rob = |r: &MiniRun| r.report.robustness.unwrap_or(0.0);
    let mut direction = rob(ws) >= rob(to);
    if !direction {
        let mut diffs = vec![rob(ws) - rob(to)];
        for seed in [ws.model.config.seed + 1, ws.model.config.seed + 2] {
            let (a, b) = (mini.train(Mode::WithStructure, seed), mini.train(Mode::TextOnly, seed));
            lines.push(describe(&a));
            lines.push(describe(&b));
            diffs.push(rob(&a) - rob(&b));
        }
        diffs.sort_by(f64::total_cmp);
        direction = diffs[1] >= 0.0;
        lines.push(format!("median robustness gap over 3 seeds {:.3}", diffs[1]));
    }
    let accuracy = ws.report.direct_accuracy >= 0.8;
    let elapsed = ws.elapsed + to.elapsed + start.elapsed();
    lines.push(format!(
        "accuracy target {} robustness direction {} total {elapsed:.0?}",
        if accuracy { "met" } else { "missed" },
        if direction { "holds" } else { "fails" }
    ));
    let detail = lines.join("\n    ");
    if elapsed > Duration::from_secs(1800) {
        return Err(detail + "\n    over the 30 min budget");
    }
    check(accuracy && direction, detail)
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {name}: {tag} [{:.1?}]\n    {detail}", start.elapsed());
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "hypergraph permutation isomorphism", hypergraph_isomorphism);
    ok &= report(2, "encoder/projector invariance", encoder_invariance);
    ok &= report(3, "gradient audit", gradient_audit);
    ok &= report(4, "StructQA generation fidelity", generation_fidelity);
    ok &= report(5, "metric sanity", metric_sanity);

    let mini = Mini::new();
    let seed = RunConfig::mini().seed;
    let ws = catch_unwind(AssertUnwindSafe(|| mini.train(Mode::WithStructure, seed)));
    let to = catch_unwind(AssertUnwindSafe(|| mini.train(Mode::TextOnly, seed)));
    match (&ws, &to) {
        (Ok(ws), Ok(to)) => {
            ok &= report(6, "probe ordering", || probe_ordering(&ws.model.store));
            ok &= report(7, "end-to-end desk training", || end_to_end(&mini, (ws, to)));
            ok &= report(8, "saliency contract", || saliency_contract(ws, &mini));
        }
        _ => {
            for (n, name) in [(6, "probe ordering"), (7, "end-to-end desk training"), (8, "saliency contract")] {
                println!("criterion {n} {name}: FAIL\n    mini training panicked");
            }
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
