use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hypertab::corpus::{generate_corpus, load_corpus, write_corpus};
use hypertab::model::{self, Mode};
use hypertab::numcore::ParamStore;
use hypertab::pipeline::{self, build_vocab, prepare, RunConfig};
use hypertab::probe::{run_regimes, ProbeConfig, Regime};
use hypertab::run::{
    self, EvalReport, Prediction, ProbeReport, RunDir, TrainHistory, TrainedModel, PERMUTATIONS_FILE, REPORT_FILE,
    SAMPLES_FILE, TABLES_DIR,
};
use hypertab::structqa::{
    generate_dataset, is_correct, permute_test_set, read_jsonl, score, write_jsonl, PermutationRecord, PermutedPredictions,
    Sample, SlotMode, Split, Task,
};
use hypertab::table::Table;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "hypertab", version, about = "Hypergraph table encoder and StructQA tooling")]
struct Cli {
    /// Root for output directories when --out is not given.
    #[arg(long, env = "HYPERTAB_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic table corpus.
    Corpus(CorpusArgs),
    /// Generate StructQA samples from a table corpus.
    Gen(GenArgs),
    /// Build the permuted test set.
    Permute(PermuteArgs),
    /// Train encoder, projector and decoder jointly.
    Train(TrainArgs),
    /// Dump per-table structure tokens.
    Encode(EncodeArgs),
    /// Score predictions, or run a trained model on the test split.
    Eval(EvalArgs),
    /// Cell-membership probe over the three encoder regimes.
    Probe(ProbeArgs),
    /// Dump token-importance scores for test episodes.
    Saliency(SaliencyArgs),
    /// Finite-difference audit of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: tiny, mini, desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, default_preset: &str) -> Result<RunConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::preset(default_preset)?,
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Override the number of tables.
    #[arg(long)]
    tables: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory of table files.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Comma-separated task names (default: the config's tasks).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<Task>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PermuteArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Output directory of `gen`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Keep the original row index in row slots instead of following the row.
    #[arg(long)]
    keep_indices: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Train only the encoder and projector.
    #[arg(long)]
    freeze_decoder: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Output directory of `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained run to evaluate.
    #[arg(long, conflicts_with = "predictions")]
    run: Option<PathBuf>,
    /// JSONL of {"sample_id", "prediction"} to score instead of a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Predictions for the permuted split, used with --predictions.
    #[arg(long, requires = "predictions")]
    permuted_predictions: Option<PathBuf>,
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory of `permute`.
    #[arg(long)]
    permuted: Option<PathBuf>,
    /// Also run the three-regime probe with the run's encoder.
    #[arg(long, requires = "run")]
    probe: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    probe_seeds: Vec<u64>,
    /// Prediction threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    tables: PathBuf,
    /// Trained run supplying the pretrained encoder.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Regimes to run (default: all three, or the two untrained ones without --run).
    #[arg(long, value_delimiter = ',')]
    regimes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Number of test episodes.
    #[arg(long, default_value_t = 20)]
    limit: usize,
    /// Answer position to explain; past the end means the end-of-answer token.
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    floor: Option<f64>,
    /// Pass threshold on the worst relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, command: &str, config: &RunConfig) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| root.join(format!("{command}-{}-s{}", &config.hash()[..12], config.seed)))
}

fn input_dir(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .with_context(|| format!("--{what} is required (or set data.{what} in the config)"))
}

fn tables_at(dir: &Path) -> Result<Vec<(String, Table)>> {
    let t = load_corpus(dir).with_context(|| format!("loading tables from {}", dir.display()))?;
    if t.is_empty() {
        bail!("no table files in {}", dir.display());
    }
    Ok(t)
}

fn corpus(a: CorpusArgs, root: &Path) -> Result<()> {
    let config = a.cfg.resolve("desk")?;
    let mut cc = config.data.corpus.clone().context("config has no [data.corpus] section")?;
    if let Some(n) = a.tables {
        cc.tables = n;
    }
    let dir = out_dir(&a.out, root, "corpus", &config);
    let run = RunDir::create(&dir, "corpus", config.seed, &config.hash(), false)?;
    let tables = generate_corpus(&cc, config.seed)?;
    write_corpus(&dir, &tables)?;
    let files = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != run::MANIFEST_FILE)
        .collect();
    run.finish(files)?;
    println!("{} tables -> {}", tables.len(), dir.display());
    Ok(())
}

fn gen(a: GenArgs, root: &Path) -> Result<()> {
    let mut config = a.cfg.resolve("desk")?;
    if !a.tasks.is_empty() {
        config.data.tasks = a.tasks.clone();
    }
    let tables = tables_at(&input_dir(&a.tables, &config.data.tables, "tables")?)?;
    let dir = out_dir(&a.out, root, "gen", &config);
    let run = RunDir::create(&dir, "gen", config.seed, &config.hash(), false)?;
    let samples = generate_dataset(&tables, &config.data.tasks, config.seed)?;
    write_jsonl(&run.path(SAMPLES_FILE), &samples)?;
    run.finish(vec![SAMPLES_FILE.into()])?;
    println!("{} samples from {} tables -> {}", samples.len(), tables.len(), dir.display());
    Ok(())
}

fn permute(a: PermuteArgs, root: &Path) -> Result<()> {
    let config = a.cfg.resolve("desk")?;
    let tables = tables_at(&input_dir(&a.tables, &config.data.tables, "tables")?)?;
    let samples = run::load_samples(&input_dir(&a.dataset, &config.data.dataset, "dataset")?)?;
    let mode = if a.keep_indices { SlotMode::KeepIndices } else { SlotMode::Remap };
    let dir = out_dir(&a.out, root, "permute", &config);
    let run = RunDir::create(&dir, "permute", config.seed, &config.hash(), false)?;
    let set = permute_test_set(&tables, &samples, config.seed, mode)?;
    let permuted: Vec<(String, Table)> = set.tables.into_iter().collect();
    write_corpus(&run.path(TABLES_DIR), &permuted)?;
    write_jsonl(&run.path(SAMPLES_FILE), &set.samples)?;
    write_jsonl(&run.path(PERMUTATIONS_FILE), &set.records)?;
    run.finish(vec![TABLES_DIR.into(), SAMPLES_FILE.into(), PERMUTATIONS_FILE.into()])?;
    println!("{} permuted samples over {} tables -> {}", set.samples.len(), permuted.len(), dir.display());
    Ok(())
}

fn train(a: TrainArgs, root: &Path) -> Result<()> {
    let mut config = a.cfg.resolve("desk")?;
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if a.freeze_decoder {
        config.freeze_decoder = true;
    }
    if let Some(e) = a.epochs {
        config.optim.epochs = e;
    }
    let tables_dir = input_dir(&a.tables, &config.data.tables, "tables")?;
    let dataset_dir = input_dir(&a.dataset, &config.data.dataset, "dataset")?;
    let tables = tables_at(&tables_dir)?;
    let samples = run::load_samples(&dataset_dir)?;
    let vocab = build_vocab(&tables, &samples);
    let data = prepare(&tables, &samples, &config.data.tasks, &vocab)?;
    let dir = out_dir(&a.out, root, "train", &config);
    let rundir = RunDir::create(&dir, "train", config.seed, &config.hash(), true)?;
    let init = model::init_model(&config.model, vocab.len(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    eprintln!(
        "training {} ({} params, {} train samples, mode {})",
        dir.display(),
        init.num_scalars(),
        data.split(Split::Train).len(),
        config.mode.as_str()
    );
    let outcome = pipeline::train(&config, &data, init, |log| {
        eprintln!(
            "epoch {:>3}  train {:.4}  valid {:.4}  lr {:.2e}",
            log.epoch, log.train_loss, log.valid_loss, log.lr
        );
    })?;
    let trained = TrainedModel {
        config,
        vocab,
        store: outcome.store,
        history: TrainHistory {
            best_epoch: outcome.best_epoch,
            epochs: outcome.history,
        },
    };
    let files = run::save_trained(&dir, &trained)?;
    rundir.finish(files)?;
    println!("best epoch {} -> {}", trained.history.best_epoch, dir.display());
    Ok(())
}

fn encode(a: EncodeArgs, root: &Path) -> Result<()> {
    let m = run::load_trained(&a.run)?;
    let tables = tables_at(&a.tables)?;
    let dir = out_dir(&a.out, root, "encode", &m.config);
    let rundir = RunDir::create(&dir, "encode", m.config.seed, &m.config.hash(), false)?;
    let mut tokens = Vec::with_capacity(tables.len());
    for (id, t) in &tables {
        let g = hypertab::hypergraph::build_hypergraph(t);
        tokens.push((id.clone(), model::structure_tokens(&m.store, &m.config.model, &g)?));
    }
    run::write_embeddings(&rundir.path("embeddings.bin"), &tokens, &m.config.hash())?;
    rundir.finish(vec!["embeddings.bin".into(), "embeddings.bin.json".into()])?;
    println!("{} structure tokens -> {}", tokens.len(), dir.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    sample_id: String,
    prediction: String,
}

fn read_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let lines: Vec<PredictionLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.sample_id, l.prediction)).collect())
}

fn transcript(variant: &str, samples: &[Sample], preds: &HashMap<String, String>) -> Vec<Prediction> {
    samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| {
            let p = preds.get(&s.sample_id).cloned().unwrap_or_default();
            Prediction {
                sample_id: s.sample_id.clone(),
                variant: variant.to_string(),
                question: s.question.clone(),
                gold: s.answer.to_text(),
                correct: preds.contains_key(&s.sample_id) && is_correct(&p, &s.answer, s.task),
                prediction: p,
            }
        })
        .collect()
}

fn model_predictions(
    m: &TrainedModel,
    tables: &[(String, Table)],
    samples: &[Sample],
    workers: usize,
) -> Result<HashMap<String, String>> {
    let data = prepare(tables, samples, &m.config.data.tasks, &m.vocab)?;
    let test = data.split(Split::Test);
    Ok(pipeline::predict(&m.store, &m.config, &m.vocab, &data, &test, workers)?
        .into_iter()
        .collect())
}

fn eval(a: EvalArgs, root: &Path) -> Result<()> {
    let trained = a.run.as_deref().map(run::load_trained).transpose()?;
    let config = match &trained {
        Some(m) => m.config.clone(),
        None => a.cfg.resolve("desk")?,
    };
    let dataset_dir = input_dir(&a.dataset, &config.data.dataset, "dataset")?;
    let tasks = &config.data.tasks;
    let samples: Vec<Sample> = run::load_samples(&dataset_dir)?
        .into_iter()
        .filter(|s| tasks.contains(&s.task))
        .collect();
    let permuted: Option<(Vec<(String, Table)>, Vec<Sample>, Vec<PermutationRecord>)> = match &a.permuted {
        Some(p) => Some((
            tables_at(&p.join(TABLES_DIR))?,
            run::load_samples(p)?.into_iter().filter(|s| tasks.contains(&s.task)).collect(),
            read_jsonl(&p.join(PERMUTATIONS_FILE))?,
        )),
        None => None,
    };
    let (direct, perm) = match (&trained, &a.predictions) {
        (Some(m), _) => {
            let tables = tables_at(&input_dir(&a.tables, &config.data.tables, "tables")?)?;
            let direct = model_predictions(m, &tables, &samples, a.workers)?;
            let perm = match &permuted {
                Some((pt, ps, _)) => Some(model_predictions(m, pt, ps, a.workers)?),
                None => None,
            };
            (direct, perm)
        }
        (None, Some(p)) => (
            read_predictions(p)?,
            a.permuted_predictions.as_deref().map(read_predictions).transpose()?,
        ),
        (None, None) => bail!("eval needs --run or --predictions"),
    };
    if perm.is_some() != permuted.is_some() {
        bail!("permuted predictions and --permuted must be given together");
    }
    let dir = out_dir(&a.out, root, "eval", &config);
    let rundir = RunDir::create(&dir, "eval", config.seed, &config.hash(), true)?;
    let perm_pair = perm.as_ref().zip(permuted.as_ref()).map(|(p, (_, s, r))| PermutedPredictions {
        predictions: p,
        samples: s,
        records: r,
    });
    let mut report = EvalReport::new(&config, score(&direct, &samples, perm_pair));
    if let Some(m) = &trained {
        report.loss_curve = Some(m.history.clone());
        if a.probe {
            let tables = tables_at(&input_dir(&a.tables, &config.data.tables, "tables")?)?;
            let plain: Vec<Table> = tables.into_iter().map(|(_, t)| t).collect();
            report.set_probe(run_regimes(
                &plain,
                &Regime::ALL,
                &config.model.encoder,
                Some(&m.store),
                &ProbeConfig::default(),
                &a.probe_seeds,
            )?);
        }
    }
    let mut lines = transcript("direct", &samples, &direct);
    if let (Some(p), Some((_, ps, _))) = (&perm, &permuted) {
        lines.extend(transcript("permuted", ps, p));
    }
    write_jsonl(&rundir.path("predictions.jsonl"), &lines)?;
    report.save(&rundir.path(REPORT_FILE))?;
    rundir.finish(vec!["predictions.jsonl".into(), REPORT_FILE.into()])?;
    let s = &report.score;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "direct {:.4}  permutation {}  robustness {}  -> {}",
        s.direct_accuracy,
        fmt(s.permutation_accuracy),
        fmt(s.robustness),
        dir.display()
    );
    Ok(())
}

fn parse_regime(s: &str) -> Result<Regime> {
    Regime::ALL
        .into_iter()
        .find(|r| r.as_str() == s)
        .with_context(|| format!("unknown regime {s:?}"))
}

fn probe(a: ProbeArgs, root: &Path) -> Result<()> {
    let trained = a.run.as_deref().map(run::load_trained).transpose()?;
    let config = match &trained {
        Some(m) => m.config.clone(),
        None => a.cfg.resolve("desk")?,
    };
    let regimes: Vec<Regime> = if a.regimes.is_empty() {
        Regime::ALL
            .into_iter()
            .filter(|r| trained.is_some() || *r != Regime::PretrainedEncoder)
            .collect()
    } else {
        a.regimes.iter().map(|s| parse_regime(s)).collect::<Result<_>>()?
    };
    let tables: Vec<Table> = tables_at(&a.tables)?.into_iter().map(|(_, t)| t).collect();
    let dir = out_dir(&a.out, root, "probe", &config);
    let rundir = RunDir::create(&dir, "probe", config.seed, &config.hash(), true)?;
    let pretrained: Option<&ParamStore> = trained.as_ref().map(|m| &m.store);
    let results = run_regimes(
        &tables,
        &regimes,
        &config.model.encoder,
        pretrained,
        &ProbeConfig::default(),
        &a.seeds,
    )?;
    let report = ProbeReport::new(&config.hash(), &a.seeds, results);
    report.save(&rundir.path("probe.json"))?;
    rundir.finish(vec!["probe.json".into()])?;
    for (regime, f1) in &report.median_f1 {
        println!("{regime:<20} median F1 {f1:.4}");
    }
    Ok(())
}

fn saliency(a: SaliencyArgs, root: &Path) -> Result<()> {
    let m = run::load_trained(&a.run)?;
    let tables = tables_at(&a.tables)?;
    let samples = run::load_samples(&a.dataset)?;
    let data = prepare(&tables, &samples, &m.config.data.tasks, &m.vocab)?;
    let dir = out_dir(&a.out, root, "saliency", &m.config);
    let rundir = RunDir::create(&dir, "saliency", m.config.seed, &m.config.hash(), false)?;
    let mut records = Vec::new();
    for item in data.split(Split::Test).into_iter().take(a.limit) {
        let target = a.target.min(item.episode.answer.len());
        records.push(run::saliency_record(&m, &data.graphs[item.graph], item, target)?);
    }
    write_jsonl(&rundir.path("saliency.jsonl"), &records)?;
    rundir.finish(vec!["saliency.jsonl".into()])?;
    println!("{} episodes -> {}", records.len(), dir.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs, root: &Path) -> Result<bool> {
    let config = a.cfg.resolve("tiny")?;
    let mut check = pipeline::audit_check_config();
    if let Some(e) = a.eps {
        check.eps = e;
    }
    if let Some(f) = a.floor {
        check.floor = f;
    }
    let dir = out_dir(&a.out, root, "gradcheck", &config);
    let rundir = RunDir::create(&dir, "gradcheck", config.seed, &config.hash(), false)?;
    let audit = pipeline::audit_gradients(&config, &check)?;
    std::fs::write(rundir.path("gradcheck.json"), serde_json::to_string_pretty(&audit)? + "\n")?;
    rundir.finish(vec!["gradcheck.json".into()])?;
    let ok = audit.passes(a.tol);
    println!(
        "{} parameters in {} tensors, max relative error {:.3e}, unused {}, dead {}: {}",
        audit.param_count,
        audit.report.params.len(),
        audit.report.max_rel_error(),
        audit.unused.len(),
        audit.report.dead_params().len(),
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.as_path();
    let result = match cli.command {
        Command::Corpus(a) => corpus(a, root).map(|_| true),
        Command::Gen(a) => gen(a, root).map(|_| true),
        Command::Permute(a) => permute(a, root).map(|_| true),
        Command::Train(a) => train(a, root).map(|_| true),
        Command::Encode(a) => encode(a, root).map(|_| true),
        Command::Eval(a) => eval(a, root).map(|_| true),
        Command::Probe(a) => probe(a, root).map(|_| true),
        Command::Saliency(a) => saliency(a, root).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a, root),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
