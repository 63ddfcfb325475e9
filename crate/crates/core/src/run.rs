//! Output directory layout shared by the command-line tools.
//!
//! Every command writes into one directory with a `manifest.json` naming the
//! command, seed, config hash and files written. The manifest is written with
//! status `incomplete` first and rewritten as `complete` at the end, so an
//! interrupted run is recognisable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Vocab, EOS, RESERVED, STRUCT, UNK};
use crate::hypergraph::Hypergraph;
use crate::model::{self, Mode};
use crate::numcore::{load_checkpoint, save_checkpoint, validate_against, ParamStore, Tensor};
use crate::pipeline::{EpochLog, PreparedItem, RunConfig};
use crate::probe::{median_f1, ProbeResult, Regime};
use crate::structqa::{read_jsonl, ScoreReport, Sample};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const PERMUTATIONS_FILE: &str = "permutations.jsonl";
pub const TABLES_DIR: &str = "tables";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: RunStatus,
    pub seed: u64,
    pub config_hash: String,
    pub files: Vec<String>,
    /// Wall-clock times, only for commands whose output is not expected to be
    /// byte-reproducible across invocations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// An output directory being written.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create(dir: &Path, command: &str, seed: u64, config_hash: &str, timestamped: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let manifest = RunManifest {
            command: command.to_string(),
            status: RunStatus::Incomplete,
            seed,
            config_hash: config_hash.to_string(),
            files: Vec::new(),
            started_unix: timestamped.then(now_unix),
            finished_unix: None,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn finish(mut self, mut files: Vec<String>) -> Result<RunManifest> {
        files.sort();
        files.dedup();
        self.manifest.files = files;
        self.manifest.status = RunStatus::Complete;
        if self.manifest.started_unix.is_some() {
            self.manifest.finished_unix = Some(now_unix());
        }
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

/// The manifest of `dir`, refusing directories whose run did not finish.
pub fn require_complete(dir: &Path) -> Result<RunManifest> {
    let m = read_manifest(dir)?;
    if m.status != RunStatus::Complete {
        return Err(Error::Invalid(format!("{} holds an incomplete {} run", dir.display(), m.command)));
    }
    Ok(m)
}

/// Samples written by `gen` (or `permute`) into `dir`.
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    require_complete(dir)?;
    read_jsonl(&dir.join(SAMPLES_FILE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
}

/// Everything `train` leaves behind.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub history: TrainHistory,
}

/// Write config, vocabulary, checkpoint and history into `dir`; returns the
/// file names written.
pub fn save_trained(dir: &Path, m: &TrainedModel) -> Result<Vec<String>> {
    let hash = m.config.hash();
    fs::write(dir.join(CONFIG_FILE), m.config.to_toml()?).map_err(Error::io(dir.join(CONFIG_FILE)))?;
    m.vocab.save(&dir.join(VOCAB_FILE))?;
    save_checkpoint(&m.store, &dir.join(CHECKPOINT_FILE), &hash)?;
    write_json(&dir.join(HISTORY_FILE), &m.history)?;
    Ok(vec![
        CONFIG_FILE.into(),
        VOCAB_FILE.into(),
        CHECKPOINT_FILE.into(),
        format!("{CHECKPOINT_FILE}.json"),
        HISTORY_FILE.into(),
    ])
}

/// Load a finished training run, checking the checkpoint against the
/// config hash and the shapes the config implies.
pub fn load_trained(dir: &Path) -> Result<TrainedModel> {
    let manifest = require_complete(dir)?;
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let hash = config.hash();
    if manifest.config_hash != hash {
        return Err(Error::Invalid(format!(
            "{}: manifest config hash {} does not match {CONFIG_FILE} ({hash})",
            dir.display(),
            manifest.config_hash
        )));
    }
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let (store, _) = load_checkpoint(&dir.join(CHECKPOINT_FILE), Some(&hash))?;
    let expected = model::init_model(&config.model, vocab.len(), &mut ChaCha8Rng::seed_from_u64(0))?;
    validate_against(&expected, &store)?;
    let history = read_json(&dir.join(HISTORY_FILE))?;
    Ok(TrainedModel {
        config,
        vocab,
        store,
        history,
    })
}

/// Metrics for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    #[serde(flatten)]
    pub score: ScoreReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe: Vec<ProbeResult>,
    /// Median F1 over seeds, keyed by regime.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub probe_f1: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<TrainHistory>,
}

impl EvalReport {
    pub fn new(config: &RunConfig, score: ScoreReport) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.seed,
            mode: config.mode,
            score,
            probe: Vec::new(),
            probe_f1: BTreeMap::new(),
            loss_curve: None,
        }
    }

    pub fn set_probe(&mut self, results: Vec<ProbeResult>) {
        self.probe_f1 = medians(&results);
        self.probe = results;
    }

    /// All reported metrics lie in [0, 1].
    pub fn metrics_in_range(&self) -> bool {
        let s = &self.score;
        let mut all = vec![s.direct_accuracy];
        all.extend(s.permutation_accuracy);
        all.extend(s.robustness);
        all.extend(s.per_task.values());
        all.extend(self.probe_f1.values());
        all.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Standalone output of the probe command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub results: Vec<ProbeResult>,
    pub median_f1: BTreeMap<String, f64>,
}

impl ProbeReport {
    pub fn new(config_hash: &str, seeds: &[u64], results: Vec<ProbeResult>) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            median_f1: medians(&results),
            results,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn medians(results: &[ProbeResult]) -> BTreeMap<String, f64> {
    Regime::ALL
        .iter()
        .filter_map(|&r| median_f1(results, r).map(|f| (r.as_str().to_string(), f)))
        .collect()
}

/// One line of an evaluation transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub variant: String,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
}

/// Per-table structure tokens, stored in the checkpoint format with one
/// tensor per table id.
pub fn write_embeddings(path: &Path, tokens: &[(String, Tensor)], config_hash: &str) -> Result<()> {
    let mut store = ParamStore::new();
    for (id, t) in tokens {
        store.insert(id.clone(), t.clone())?;
    }
    save_checkpoint(&store, path, config_hash)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let (store, _) = load_checkpoint(path, None)?;
    Ok(store.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
}

/// Token-level importance for one answer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub sample_id: String,
    pub mode: Mode,
    /// Index into the answer tokens; `answer.len()` is the end-of-answer token.
    pub target: usize,
    pub target_token: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

impl SaliencyRecord {
    /// Summed importance of the structure-token rows.
    pub fn structure_mass(&self) -> f64 {
        let label = RESERVED[STRUCT];
        self.tokens.iter().zip(&self.scores).filter(|(t, _)| *t == label).map(|(_, s)| s).sum()
    }
}

pub fn saliency_record(m: &TrainedModel, g: &Hypergraph, item: &PreparedItem, target: usize) -> Result<SaliencyRecord> {
    let c = &m.config;
    let ep = &item.episode;
    if target > ep.answer.len() {
        return Err(Error::Invalid(format!(
            "target {target} out of range for a {}-token answer",
            ep.answer.len()
        )));
    }
    let scores = model::saliency(&m.store, &c.model, g, ep, c.mode, target)?;
    let prefix = scores.len() - ep.input_ids().len();
    let mut tokens = vec![RESERVED[STRUCT].to_string(); prefix];
    tokens.extend(ep.input_ids().iter().map(|&i| m.vocab.token(i).unwrap_or(RESERVED[UNK]).to_string()));
    let target_token = match ep.answer.get(target) {
        Some(&i) => m.vocab.token(i).unwrap_or(RESERVED[UNK]),
        None => RESERVED[EOS],
    };
    Ok(SaliencyRecord {
        sample_id: item.sample.sample_id.clone(),
        mode: c.mode,
        target,
        target_token: target_token.to_string(),
        tokens,
        scores,
    })
}
