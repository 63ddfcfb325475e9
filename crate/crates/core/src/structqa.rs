//! Structure-probing question generation, permuted test sets and scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::table::{permute_table, random_permutation, Permutation, Table};
use crate::text::split_tokens;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CellLocation,
    ColumnLookup,
    RowLookup,
    ColumnComprehension,
    RowComprehension,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::CellLocation,
        Task::ColumnLookup,
        Task::RowLookup,
        Task::ColumnComprehension,
        Task::RowComprehension,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::CellLocation => "cell_location",
            Task::ColumnLookup => "column_lookup",
            Task::RowLookup => "row_lookup",
            Task::ColumnComprehension => "column_comprehension",
            Task::RowComprehension => "row_comprehension",
        }
    }

    pub fn templates(self) -> &'static [&'static str; 3] {
        match self {
            Task::CellLocation => &[
                "What is the value in the column {column name} of sample row {row number}?",
                "Can you tell me the value of the column {column name} in sample row {row number}?",
                "In sample row {row number}, what is the value for the column {column name}?",
            ],
            Task::ColumnLookup => &[
                "In sample row {row number}, which columns contain the value {cell value}?",
                "Can you identify the columns in sample row {row number} that have the value {cell value}?",
                "Which columns in sample row {row number} are associated with the value {cell value}?",
            ],
            Task::RowLookup => &[
                "Which rows in the column {column name} have a value of {cell value}?",
                "Can you identify the sample rows where the column {column name} equals {cell value}?",
                "In the column {column name}, which rows contain the value {cell value}?",
            ],
            Task::ColumnComprehension => &[
                "What are the distinct values in the column {column name}?",
                "Could you list the unique values present in the column {column name}?",
                "In the column {column name}, what various values can be found?",
            ],
            Task::RowComprehension => &[
                "What are the values of each cell in row {row number} of the sample?",
                "Could you provide the cell values for each column in sample row {row number}?",
                "In sample row {row number}, what are the respective cell values?",
            ],
        }
    }

    /// Single-valued answers compare as one string.
    pub fn is_scalar(self) -> bool {
        self == Task::CellLocation
    }

    /// Multi-valued answers compare as sets except for row comprehension.
    pub fn is_ordered(self) -> bool {
        self == Task::RowComprehension
    }

    fn uses_row(self) -> bool {
        matches!(self, Task::CellLocation | Task::ColumnLookup | Task::RowComprehension)
    }

    fn uses_column(self) -> bool {
        matches!(self, Task::CellLocation | Task::RowLookup | Task::ColumnComprehension)
    }

    fn uses_value(self) -> bool {
        matches!(self, Task::ColumnLookup | Task::RowLookup)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Gold answer: one string, or items in table order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Scalar(String),
    Items(Vec<String>),
}

pub const ITEM_SEP: &str = ", ";

impl Answer {
    /// Text form used as a decoding target.
    pub fn to_text(&self) -> String {
        match self {
            Answer::Scalar(s) => s.clone(),
            Answer::Items(v) => v.join(ITEM_SEP),
        }
    }
}

/// Template slot values; the column is a body column index of the table the
/// question was instantiated against.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Slots {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub column: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub table_id: String,
    pub task: Task,
    pub template_id: usize,
    pub question: String,
    pub answer: Answer,
    pub split: Split,
    pub slots: Slots,
}

/// Task oracle: the gold answer for `slots` on `t`.
pub fn answer_for(t: &Table, task: Task, slots: &Slots) -> Result<Answer> {
    let need = |o: Option<usize>, what: &str| o.ok_or_else(|| Error::Dataset(format!("{task}: missing {what} slot")));
    let check = |i: usize, n: usize, what: &str| {
        if i < n {
            Ok(i)
        } else {
            Err(Error::Dataset(format!("{task}: {what} {i} out of range ({n})")))
        }
    };
    Ok(match task {
        Task::CellLocation => {
            let r = check(need(slots.row, "row")?, t.n_rows(), "row")?;
            let c = check(need(slots.column, "column")?, t.n_cols(), "column")?;
            Answer::Scalar(t.text(r, c).to_string())
        }
        Task::ColumnLookup => {
            let r = check(need(slots.row, "row")?, t.n_rows(), "row")?;
            let v = slots.value.as_deref().unwrap_or_default();
            let names = t.column_paths();
            Answer::Items((0..t.n_cols()).filter(|&c| t.text(r, c) == v).map(|c| names[c].clone()).collect())
        }
        Task::RowLookup => {
            let c = check(need(slots.column, "column")?, t.n_cols(), "column")?;
            let v = slots.value.as_deref().unwrap_or_default();
            Answer::Items((0..t.n_rows()).filter(|&r| t.text(r, c) == v).map(|r| r.to_string()).collect())
        }
        Task::ColumnComprehension => {
            let c = check(need(slots.column, "column")?, t.n_cols(), "column")?;
            let mut seen = BTreeSet::new();
            Answer::Items(
                t.column_texts(c)
                    .into_iter()
                    .filter(|v| seen.insert(*v))
                    .map(str::to_string)
                    .collect(),
            )
        }
        Task::RowComprehension => {
            let r = check(need(slots.row, "row")?, t.n_rows(), "row")?;
            Answer::Items(t.row_texts(r).into_iter().map(str::to_string).collect())
        }
    })
}

pub fn instantiate(t: &Table, task: Task, template_id: usize, slots: &Slots) -> Result<String> {
    let template = task
        .templates()
        .get(template_id)
        .ok_or_else(|| Error::Dataset(format!("{task}: no template {template_id}")))?;
    let mut q = template.to_string();
    if let Some(r) = slots.row {
        q = q.replace("{row number}", &r.to_string());
    }
    if let Some(c) = slots.column {
        let names = t.column_paths();
        let name = names
            .get(c)
            .ok_or_else(|| Error::Dataset(format!("{task}: column {c} out of range")))?;
        q = q.replace("{column name}", name);
    }
    if let Some(v) = &slots.value {
        q = q.replace("{cell value}", v);
    }
    if ["{row number}", "{column name}", "{cell value}"].iter().any(|slot| q.contains(slot)) {
        return Err(Error::Dataset(format!("{task}: unfilled slot in {q:?}")));
    }
    Ok(q)
}

/// Uniform row/column; the value is drawn from the relevant row or column,
/// preferring non-empty cells.
fn draw_slots<R: Rng>(t: &Table, task: Task, rng: &mut R) -> Slots {
    let mut s = Slots::default();
    if task.uses_row() {
        s.row = Some(rng.gen_range(0..t.n_rows()));
    }
    if task.uses_column() {
        s.column = Some(rng.gen_range(0..t.n_cols()));
    }
    if task.uses_value() {
        let pool: Vec<&str> = match (s.row, s.column) {
            (Some(r), _) => t.row_texts(r),
            (_, Some(c)) => t.column_texts(c),
            _ => unreachable!("value tasks fix a row or a column"),
        };
        let non_empty: Vec<&str> = pool.iter().copied().filter(|v| !v.trim().is_empty()).collect();
        let from = if non_empty.is_empty() { &pool } else { &non_empty };
        s.value = Some(from[rng.gen_range(0..from.len())].to_string());
    }
    s
}

/// Table indices per split: `floor(0.6 N)` / `floor(0.2 N)` / remainder.
pub fn split_tables<R: Rng>(n: usize, rng: &mut R) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = n * 6 / 10;
    let n_valid = n * 2 / 10;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

pub fn sample_id(table_id: &str, task: Task, template_id: usize) -> String {
    format!("{table_id}/{task}/{template_id}")
}

/// Three questions per task per table, tables split 60/20/20.
pub fn generate_dataset(tables: &[(String, Table)], tasks: &[Task], seed: u64) -> Result<Vec<Sample>> {
    if tables.is_empty() {
        return Err(Error::Dataset("empty table corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = split_tables(tables.len(), &mut rng);
    let mut out = Vec::with_capacity(tables.len() * tasks.len() * 3);
    for ((id, t), split) in tables.iter().zip(splits) {
        if t.n_rows() == 0 || t.n_cols() == 0 {
            return Err(Error::Dataset(format!("table {id} has no body cells")));
        }
        for &task in tasks {
            for template_id in 0..3 {
                let slots = draw_slots(t, task, &mut rng);
                out.push(Sample {
                    sample_id: sample_id(id, task, template_id),
                    table_id: id.clone(),
                    task,
                    template_id,
                    question: instantiate(t, task, template_id, &slots)?,
                    answer: answer_for(t, task, &slots)?,
                    split,
                    slots,
                });
            }
        }
    }
    Ok(out)
}

/// How positional slots are treated when questions are re-instantiated
/// against a permuted table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotMode {
    /// `{row number}` follows the row to its new position.
    #[default]
    Remap,
    /// `{row number}` keeps its original value.
    KeepIndices,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub table_id: String,
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutedTestSet {
    pub records: Vec<PermutationRecord>,
    pub tables: BTreeMap<String, Table>,
    pub samples: Vec<Sample>,
}

fn derived_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Re-instantiate one sample against a permuted table.
pub fn remap_sample(s: &Sample, permuted: &Table, p: &Permutation, mode: SlotMode) -> Result<Sample> {
    let slots = Slots {
        row: s.slots.row.map(|r| match mode {
            SlotMode::Remap => p.new_row_of(r),
            SlotMode::KeepIndices => r,
        }),
        column: s.slots.column.map(|c| p.new_col_of(c)),
        value: s.slots.value.clone(),
    };
    Ok(Sample {
        question: instantiate(permuted, s.task, s.template_id, &slots)?,
        answer: answer_for(permuted, s.task, &slots)?,
        slots,
        ..s.clone()
    })
}

/// One seeded random permutation per test table, with its samples regenerated.
pub fn permute_test_set(
    tables: &[(String, Table)],
    samples: &[Sample],
    seed: u64,
    mode: SlotMode,
) -> Result<PermutedTestSet> {
    let by_id: HashMap<&str, &Table> = tables.iter().map(|(i, t)| (i.as_str(), t)).collect();
    let test_ids: BTreeSet<&str> = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| s.table_id.as_str())
        .collect();
    if test_ids.is_empty() {
        return Err(Error::Dataset("dataset has no test split".into()));
    }
    let mut records = Vec::new();
    let mut perms = HashMap::new();
    let mut out_tables = BTreeMap::new();
    for (i, id) in test_ids.iter().enumerate() {
        let t = by_id
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("test table {id} missing from corpus")))?;
        let table_seed = derived_seed(seed, i as u64);
        let p = random_permutation(t, &mut ChaCha8Rng::seed_from_u64(table_seed));
        out_tables.insert(id.to_string(), permute_table(t, &p)?);
        records.push(PermutationRecord {
            table_id: id.to_string(),
            row_perm: p.row_perm.clone(),
            col_perm: p.col_perm.clone(),
            seed: table_seed,
        });
        perms.insert(*id, p);
    }
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| s.split == Split::Test) {
        let id = s.table_id.as_str();
        out.push(remap_sample(s, &out_tables[id], &perms[id], mode)?);
    }
    Ok(PermutedTestSet {
        records,
        tables: out_tables,
        samples: out,
    })
}

/// Canonical comparison form of an answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Normalized {
    Scalar(String),
    Set(BTreeSet<String>),
    List(Vec<String>),
}

/// Lowercase and re-join tokens with single spaces, which trims, collapses
/// whitespace and fixes spacing around punctuation.
pub fn normalize_text(s: &str) -> String {
    split_tokens(&s.to_lowercase()).join(" ")
}

/// Multi-valued answers split on `,` and `|`.
pub fn normalize_answer(raw: &str, task: Task) -> Normalized {
    if task.is_scalar() {
        return Normalized::Scalar(normalize_text(raw));
    }
    let items: Vec<String> = if raw.trim().is_empty() {
        Vec::new()
    } else {
        raw.split([',', '|']).map(normalize_text).collect()
    };
    if task.is_ordered() {
        Normalized::List(items)
    } else {
        Normalized::Set(items.into_iter().collect())
    }
}

pub fn is_correct(prediction: &str, gold: &Answer, task: Task) -> bool {
    normalize_answer(prediction, task) == normalize_answer(&gold.to_text(), task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub direct_accuracy: f64,
    pub permutation_accuracy: Option<f64>,
    pub robustness: Option<f64>,
    pub n_direct: usize,
    pub n_permuted: usize,
    pub n_pairs: usize,
    /// Sample ids with no prediction (counted wrong).
    pub missing: Vec<String>,
    pub per_task: BTreeMap<String, f64>,
}

fn accuracy(preds: &HashMap<String, String>, samples: &[&Sample], missing: &mut Vec<String>) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| match preds.get(&s.sample_id) {
            Some(p) => is_correct(p, &s.answer, s.task),
            None => {
                missing.push(s.sample_id.clone());
                false
            }
        })
        .count();
    correct as f64 / samples.len() as f64
}

/// A normalized answer about the original table, restated in the frame of
/// the permuted table: row indices follow their rows and row-ordered cell
/// lists follow the columns. Anything else reads the same in both frames.
pub fn into_permuted_frame(answer: Normalized, task: Task, record: &PermutationRecord) -> Normalized {
    let new_row_of = |r: usize| record.row_perm.iter().position(|&x| x == r);
    match (task, answer) {
        (Task::RowLookup, Normalized::Set(items)) => Normalized::Set(
            items
                .into_iter()
                .map(|i| match i.parse::<usize>().ok().and_then(new_row_of) {
                    Some(r) => r.to_string(),
                    None => i,
                })
                .collect(),
        ),
        (Task::RowComprehension, Normalized::List(items)) if items.len() == record.col_perm.len() => {
            Normalized::List(record.col_perm.iter().map(|&old| items[old].clone()).collect())
        }
        (_, other) => other,
    }
}

/// Predictions on a permuted test set with the permutations that built it.
#[derive(Debug, Clone, Copy)]
pub struct PermutedPredictions<'a> {
    pub predictions: &'a HashMap<String, String>,
    pub samples: &'a [Sample],
    pub records: &'a [PermutationRecord],
}

/// Direct accuracy on the test split and, given predictions on the permuted
/// test set (keyed by the same sample ids), permutation accuracy and
/// robustness. A pair is consistent when the original prediction, carried
/// into the permuted frame, matches the permuted prediction.
pub fn score(predictions: &HashMap<String, String>, dataset: &[Sample], permuted: Option<PermutedPredictions<'_>>) -> ScoreReport {
    let test: Vec<&Sample> = dataset.iter().filter(|s| s.split == Split::Test).collect();
    let mut missing = Vec::new();
    let direct = accuracy(predictions, &test, &mut missing);
    let mut per_task = BTreeMap::new();
    for task in Task::ALL {
        let sub: Vec<&Sample> = test.iter().copied().filter(|s| s.task == task).collect();
        if !sub.is_empty() {
            per_task.insert(task.as_str().to_string(), accuracy(predictions, &sub, &mut Vec::new()));
        }
    }
    let (mut perm_acc, mut robust, mut n_perm, mut n_pairs) = (None, None, 0, 0);
    if let Some(pp) = permuted {
        let prefs: Vec<&Sample> = pp.samples.iter().collect();
        n_perm = prefs.len();
        perm_acc = Some(accuracy(pp.predictions, &prefs, &mut missing));
        let by_id: HashMap<&str, &Sample> = test.iter().map(|s| (s.sample_id.as_str(), *s)).collect();
        let records: HashMap<&str, &PermutationRecord> =
            pp.records.iter().map(|r| (r.table_id.as_str(), r)).collect();
        let mut same = 0;
        for p in pp.samples {
            let (Some(orig), Some(rec)) = (by_id.get(p.sample_id.as_str()), records.get(p.table_id.as_str())) else {
                continue;
            };
            n_pairs += 1;
            if let (Some(a), Some(b)) = (predictions.get(&orig.sample_id), pp.predictions.get(&p.sample_id)) {
                if into_permuted_frame(normalize_answer(a, orig.task), orig.task, rec) == normalize_answer(b, p.task) {
                    same += 1;
                }
            }
        }
        robust = Some(if n_pairs == 0 { 0.0 } else { same as f64 / n_pairs as f64 });
    }
    missing.sort();
    missing.dedup();
    ScoreReport {
        direct_accuracy: direct,
        permutation_accuracy: perm_acc,
        robustness: robust,
        n_direct: test.len(),
        n_permuted: n_perm,
        n_pairs,
        missing,
        per_task,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = std::io::BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
