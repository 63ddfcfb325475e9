//! Run configuration, data preparation, training and prediction.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::decoder::{DecoderConfig, Episode, Vocab};
use crate::encoder::EncoderConfig;
use crate::hypergraph::{build_hypergraph, Hypergraph};
use crate::model::{self, BatchItem, Mode, ModelConfig, StepOptions};
use crate::numcore::{grad_check, AdamW, AdamWConfig, GradCheckConfig, GradCheckReport, LrSchedule, ParamStore, Tape};
use crate::structqa::{answer_for, instantiate, sample_id, Sample, Slots, Split, Task};
use crate::table::{serialize_table, Table};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent in linear warm-up before cosine decay.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.05,
            epochs: 20,
            batch_size: 8,
            patience: 3,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of table files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<PathBuf>,
    /// Directory written by `gen`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Tasks used for training and evaluation.
    pub tasks: Vec<Task>,
    /// Synthetic corpus settings used by the `corpus` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub freeze_decoder: bool,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

pub const PRESETS: [&str; 4] = ["tiny", "mini", "desk", "paper"];

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 7,
            mode: Mode::WithStructure,
            freeze_decoder: false,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig {
                tasks: Task::ALL.to_vec(),
                corpus: Some(CorpusConfig::default()),
                ..DataConfig::default()
            },
        }
    }

    /// Desk model and optimizer on the two-task 50-table corpus.
    pub fn mini() -> Self {
        let mut c = Self::desk();
        c.data.tasks = vec![Task::CellLocation, Task::RowLookup];
        c.data.corpus = Some(CorpusConfig {
            tables: 50,
            min_rows: 3,
            max_rows: 3,
            min_cols: 3,
            max_cols: 3,
            values_per_column: 8,
            hierarchical_fraction: 0.0,
            fixed_columns: None,
        });
        c
    }

    /// Widths small enough for an exhaustive finite-difference audit.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig {
            encoder: EncoderConfig {
                d_g: 8,
                layers: 1,
                heads: 2,
                fusion_hidden: 8,
                hash_buckets: 16,
                seed_count: 1,
            },
            decoder: DecoderConfig {
                d_l: 8,
                layers: 1,
                heads: 2,
                ff_hidden: 16,
                max_seq_len: 64,
                max_new_tokens: 8,
            },
            k_tokens: 1,
        };
        c.optim.epochs = 2;
        c.data.corpus = Some(CorpusConfig {
            tables: 10,
            min_rows: 2,
            max_rows: 2,
            min_cols: 2,
            max_cols: 2,
            values_per_column: 4,
            hierarchical_fraction: 0.0,
            fixed_columns: None,
        });
        c
    }

    /// Published widths and optimizer settings.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model.encoder.d_g = 768;
        c.model.encoder.layers = 3;
        c.model.encoder.heads = 12;
        c.model.encoder.fusion_hidden = 768;
        c.optim.lr = 1e-5;
        c.optim.weight_decay = 0.05;
        c.optim.epochs = 10;
        c.optim.batch_size = 8;
        c.optim.patience = 3;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "mini" => Ok(Self::mini()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (known: {})", PRESETS.join(", ")))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("optim: lr > 0, batch_size >= 1 and epochs >= 1 required".into()));
        }
        if !(0.0..1.0).contains(&o.warmup_fraction) {
            return Err(Error::Config("optim: warmup_fraction must lie in [0, 1)".into()));
        }
        if self.data.tasks.is_empty() {
            return Err(Error::Config("data: at least one task required".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let canonical = self.to_toml().expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Every token the decoder may need: table text, all templates, the
/// questions and answers, and small integers.
pub fn build_vocab(tables: &[(String, Table)], samples: &[Sample]) -> Vocab {
    let mut texts: Vec<String> = tables.iter().map(|(_, t)| serialize_table(t)).collect();
    texts.extend(Task::ALL.iter().flat_map(|t| t.templates().iter().map(|s| s.to_string())));
    texts.extend((0..100).map(|i| i.to_string()));
    for s in samples {
        texts.push(s.question.clone());
        texts.push(s.answer.to_text());
    }
    Vocab::build(texts)
}

#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub sample: Sample,
    pub graph: usize,
    pub episode: Episode,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub graphs: Vec<Hypergraph>,
    pub table_ids: Vec<String>,
    pub items: Vec<PreparedItem>,
}

impl Prepared {
    pub fn split(&self, split: Split) -> Vec<&PreparedItem> {
        self.items.iter().filter(|i| i.sample.split == split).collect()
    }
}

/// Hypergraphs and token ids for the samples whose task is in `tasks`.
pub fn prepare(tables: &[(String, Table)], samples: &[Sample], tasks: &[Task], vocab: &Vocab) -> Result<Prepared> {
    let index: HashMap<&str, usize> = tables.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
    let texts: Vec<Vec<usize>> = tables.iter().map(|(_, t)| vocab.encode(&serialize_table(t))).collect();
    let mut items = Vec::new();
    for s in samples.iter().filter(|s| tasks.contains(&s.task)) {
        let &g = index
            .get(s.table_id.as_str())
            .ok_or_else(|| Error::Dataset(format!("sample {} refers to unknown table {}", s.sample_id, s.table_id)))?;
        items.push(PreparedItem {
            sample: s.clone(),
            graph: g,
            episode: Episode {
                table: texts[g].clone(),
                question: vocab.encode(&s.question),
                answer: vocab.encode(&s.answer.to_text()),
            },
        });
    }
    Ok(Prepared {
        graphs: tables.iter().map(|(_, t)| build_hypergraph(t)).collect(),
        table_ids: tables.iter().map(|(id, _)| id.clone()).collect(),
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub store: ParamStore,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Mean loss over `items`, evaluated in chunks.
pub fn mean_loss(store: &ParamStore, config: &RunConfig, data: &Prepared, items: &[&PreparedItem]) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in items.chunks(config.optim.batch_size.max(1)) {
        let batch: Vec<BatchItem<'_>> = chunk
            .iter()
            .map(|i| BatchItem {
                graph: i.graph,
                episode: &i.episode,
            })
            .collect();
        let mut tape = Tape::new();
        let loss = model::batch_loss(&mut tape, store, &config.model, &data.graphs, &batch, config.mode)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Mini-batch AdamW over the train split with early stopping on the
/// validation loss. `on_epoch` sees each epoch's log as it completes.
pub fn train(
    config: &RunConfig,
    data: &Prepared,
    init: ParamStore,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_items = data.split(Split::Train);
    if train_items.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let valid_items = data.split(Split::Valid);
    let o = &config.optim;
    let steps_per_epoch = train_items.len().div_ceil(o.batch_size) as u64;
    let total = steps_per_epoch * o.epochs as u64;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        },
        LrSchedule::WarmupCosine {
            warmup_steps: (total as f64 * o.warmup_fraction).round() as u64,
            total_steps: total,
        },
    );
    let opts = StepOptions {
        mode: config.mode,
        freeze_decoder: config.freeze_decoder,
        max_grad_norm: o.max_grad_norm,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut store = init;
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut history = Vec::new();
    let (mut best, mut best_epoch, mut best_store) = (f64::INFINITY, 0, store.clone());
    for epoch in 1..=o.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(o.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    graph: train_items[i].graph,
                    episode: &train_items[i].episode,
                })
                .collect();
            sum += model::train_step(&mut store, &mut opt, &config.model, &data.graphs, &batch, &opts)? * chunk.len() as f64;
        }
        let train_loss = sum / train_items.len() as f64;
        let valid_loss = if valid_items.is_empty() {
            train_loss
        } else {
            mean_loss(&store, config, data, &valid_items)?
        };
        let log = EpochLog {
            epoch,
            train_loss,
            valid_loss,
            lr: opt.current_lr(store.step()),
        };
        on_epoch(&log);
        history.push(log);
        if valid_loss < best {
            (best, best_epoch, best_store) = (valid_loss, epoch, store.clone());
        } else if epoch - best_epoch >= o.patience.max(1) {
            break;
        }
    }
    Ok(TrainOutcome {
        store: best_store,
        history,
        best_epoch,
    })
}

/// Greedy predictions keyed by sample id, spread over up to `workers` threads.
pub fn predict(
    store: &ParamStore,
    config: &RunConfig,
    vocab: &Vocab,
    data: &Prepared,
    items: &[&PreparedItem],
    workers: usize,
) -> Result<BTreeMap<String, String>> {
    let one = |it: &PreparedItem| -> Result<(String, String)> {
        let ids = model::generate_answer(store, &config.model, &data.graphs[it.graph], &it.episode, config.mode)?;
        Ok((it.sample.sample_id.clone(), vocab.decode(&ids)))
    };
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(|it| one(it)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|it| one(it)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = BTreeMap::new();
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Result of a full-model finite-difference audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientAudit {
    pub report: GradCheckReport,
    pub param_count: usize,
    /// Parameters in the store that the loss never touched.
    pub unused: Vec<String>,
}

impl GradientAudit {
    /// Every parameter reached, no identically-zero gradient, and the worst
    /// relative error under `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.unused.is_empty() && self.report.dead_params().is_empty() && self.report.max_rel_error() < tol
    }
}

/// Stencil settings for the full-model audit: the five-point rule with a
/// step large enough that round-off stays below the truncation error.
pub fn audit_check_config() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-3,
        floor: 1e-6,
        max_entries_per_param: None,
        five_point: true,
    }
}

/// Finite-difference audit of the encoder→projector→decoder loss on a fixed
/// 2×2 table (one empty cell) with two questions.
pub fn audit_gradients(config: &RunConfig, check: &GradCheckConfig) -> Result<GradientAudit> {
    let table = Table::flat(&["name", "country"], &[vec!["Bob", "Canada"], vec!["Ann", ""]], None)?;
    let tables = vec![("audit".to_string(), table)];
    let mk = |task: Task, slots: Slots| -> Result<Sample> {
        let t = &tables[0].1;
        Ok(Sample {
            sample_id: sample_id("audit", task, 0),
            table_id: "audit".into(),
            task,
            template_id: 0,
            question: instantiate(t, task, 0, &slots)?,
            answer: answer_for(t, task, &slots)?,
            split: Split::Train,
            slots,
        })
    };
    let samples = vec![
        mk(
            Task::CellLocation,
            Slots {
                row: Some(0),
                column: Some(1),
                value: None,
            },
        )?,
        mk(
            Task::RowLookup,
            Slots {
                row: None,
                column: Some(0),
                value: Some("Ann".into()),
            },
        )?,
    ];
    let vocab = build_vocab(&tables, &samples);
    let data = prepare(&tables, &samples, &[Task::CellLocation, Task::RowLookup], &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let store = model::init_model(&config.model, vocab.len(), &mut rng)?;
    let batch: Vec<BatchItem<'_>> = data
        .items
        .iter()
        .map(|i| BatchItem {
            graph: i.graph,
            episode: &i.episode,
        })
        .collect();
    let report = grad_check(
        &store,
        |tape, s| model::batch_loss(tape, s, &config.model, &data.graphs, &batch, Mode::WithStructure),
        check,
    )?;
    let unused = store
        .names()
        .filter(|n| !report.params.contains_key(*n))
        .cloned()
        .collect();
    Ok(GradientAudit {
        report,
        param_count: store.num_scalars(),
        unused,
    })
}
