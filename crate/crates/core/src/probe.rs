//! Cell-membership probe: can a small classifier tell, from frozen
//! embeddings, whether a cell belongs to a given row or column?

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_table, init_encoder_params, initial_state, EncoderConfig, EncoderState};
use crate::hypergraph::{build_hypergraph, EdgeKind, Hypergraph};
use crate::numcore::layers::{feed_forward, init_feed_forward};
use crate::numcore::{AdamW, AdamWConfig, LrSchedule, ParamStore, Tape, Tensor};
use crate::table::Table;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Initial text embeddings, no message passing.
    MlpOnly,
    RandomEncoder,
    PretrainedEncoder,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::MlpOnly, Regime::RandomEncoder, Regime::PretrainedEncoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::MlpOnly => "mlp_only",
            Regime::RandomEncoder => "random_encoder",
            Regime::PretrainedEncoder => "pretrained_encoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub table: usize,
    /// `concat(cell embedding, edge embedding)`.
    pub features: Vec<f64>,
    pub member: bool,
}

/// For every cell and each of its row and column edges: the true edge and one
/// random edge of the same kind that does not contain the cell.
pub fn sample_pairs<R: Rng>(g: &Hypergraph, rng: &mut R) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    for kind in [EdgeKind::Row, EdgeKind::Column] {
        let edges: Vec<usize> = g.edges.iter().filter(|e| e.kind == kind).map(|e| e.edge_id).collect();
        for v in 0..g.nodes.len() {
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                edges.iter().partition(|&&e| g.edges[e].members.binary_search(&v).is_ok());
            if let (Some(&p), Some(&n)) = (pos.first(), neg.choose(rng)) {
                out.push((v, p, true));
                out.push((v, n, false));
            }
        }
    }
    out
}

fn features_of(state: &EncoderState, pairs: &[(usize, usize, bool)], table: usize) -> Vec<ProbeInstance> {
    pairs
        .iter()
        .map(|&(v, e, member)| ProbeInstance {
            table,
            features: state.x_v.row(v).iter().chain(state.x_e.row(e)).copied().collect(),
            member,
        })
        .collect()
}

/// Probe instances over `tables` with the given encoder weights. For
/// `MlpOnly` only the initial embeddings are used.
pub fn build_probe_dataset(
    tables: &[Table],
    regime: Regime,
    config: &EncoderConfig,
    encoder: &ParamStore,
    seed: u64,
) -> Result<Vec<ProbeInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let g = build_hypergraph(t);
        let state = match regime {
            Regime::MlpOnly => initial_state(&g, config, encoder)?,
            Regime::RandomEncoder | Regime::PretrainedEncoder => encode_table(&g, config, encoder)?,
        };
        out.extend(features_of(&state, &sample_pairs(&g, &mut rng), i));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub batch_size: usize,
    /// Fraction of instances used for training.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 3e-4,
            hidden: 64,
            batch_size: 32,
            train_fraction: 0.8,
        }
    }
}

/// Z-score every feature using statistics of the `fit` instances.
pub fn standardize(instances: &mut [ProbeInstance], fit: &[usize]) {
    let Some(&first) = fit.first() else { return };
    let d = instances[first].features.len();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in fit {
        for (m, v) in mean.iter_mut().zip(&instances[i].features) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in fit {
        for ((s, v), m) in var.iter_mut().zip(&instances[i].features).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for inst in instances.iter_mut() {
        for ((v, m), s) in inst.features.iter_mut().zip(&mean).zip(&var) {
            *v = (*v - m) / (s.sqrt() + 1e-8);
        }
    }
}

/// Seeded train/held-out partition of instance indices.
pub fn split_instances(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let held = idx.split_off(cut.min(n));
    (idx, held)
}

const PROBE: &str = "probe/mlp";

fn batch_tensor(instances: &[ProbeInstance], idx: &[usize]) -> Result<Tensor> {
    let d = instances[idx[0]].features.len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&instances[i].features);
    }
    Ok(Tensor::new(vec![idx.len(), d], data)?)
}

/// Two-layer feedforward classifier (member / non-member logits).
pub fn train_probe(instances: &[ProbeInstance], train_idx: &[usize], config: &ProbeConfig, seed: u64) -> Result<ParamStore> {
    if train_idx.is_empty() {
        return Err(Error::Invalid("probe: empty training split".into()));
    }
    let d = instances[train_idx[0]].features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_feed_forward(&mut store, &mut rng, PROBE, d, config.hidden, 2)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            ..AdamWConfig::default()
        },
        LrSchedule::Constant,
    );
    let mut order = train_idx.to_vec();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(instances, chunk)?);
            let logits = feed_forward(&mut tape, &store, PROBE, x)?;
            let y: Vec<Option<usize>> = chunk.iter().map(|&i| Some(usize::from(instances[i].member))).collect();
            let loss = tape.cross_entropy(logits, &y)?;
            let grads = tape.backward(loss)?.params();
            opt.step(&mut store, &grads)?;
        }
    }
    Ok(store)
}

pub fn predict_probe(classifier: &ParamStore, instances: &[ProbeInstance], idx: &[usize]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(instances, chunk)?);
        let logits = feed_forward(&mut tape, classifier, PROBE, x)?;
        let l = tape.value(logits);
        out.extend((0..chunk.len()).map(|r| l.row(r)[1] > l.row(r)[0]));
    }
    Ok(out)
}

/// F1 of the member class.
pub fn f1_score(predicted: &[bool], actual: &[bool]) -> f64 {
    let tp = predicted.iter().zip(actual).filter(|(p, a)| **p && **a).count() as f64;
    let fp = predicted.iter().zip(actual).filter(|(p, a)| **p && !**a).count() as f64;
    let fn_ = predicted.iter().zip(actual).filter(|(p, a)| !**p && **a).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

pub fn eval_f1(classifier: &ParamStore, instances: &[ProbeInstance], idx: &[usize]) -> Result<f64> {
    let pred = predict_probe(classifier, instances, idx)?;
    let actual: Vec<bool> = idx.iter().map(|&i| instances[i].member).collect();
    Ok(f1_score(&pred, &actual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub regime: Regime,
    pub seed: u64,
    pub instances: usize,
    pub train_accuracy: f64,
    pub f1: f64,
}

/// Build, split, train and score one regime.
pub fn run_probe(
    tables: &[Table],
    regime: Regime,
    encoder_config: &EncoderConfig,
    encoder: &ParamStore,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let mut inst = build_probe_dataset(tables, regime, encoder_config, encoder, seed)?;
    let (train_idx, held) = split_instances(inst.len(), config.train_fraction, seed);
    standardize(&mut inst, &train_idx);
    let clf = train_probe(&inst, &train_idx, config, seed)?;
    let train_pred = predict_probe(&clf, &inst, &train_idx)?;
    let train_acc = train_pred
        .iter()
        .zip(&train_idx)
        .filter(|(p, &i)| **p == inst[i].member)
        .count() as f64
        / train_idx.len() as f64;
    Ok(ProbeResult {
        regime,
        seed,
        instances: inst.len(),
        train_accuracy: train_acc,
        f1: eval_f1(&clf, &inst, &held)?,
    })
}

/// Run each regime for each seed. Non-pretrained regimes get a fresh
/// encoder initialised from the seed; the pretrained regime needs `pretrained`.
pub fn run_regimes(
    tables: &[Table],
    regimes: &[Regime],
    encoder_config: &EncoderConfig,
    pretrained: Option<&ParamStore>,
    config: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let fresh = init_encoder_params(encoder_config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for &regime in regimes {
            let store = match regime {
                Regime::PretrainedEncoder => pretrained
                    .ok_or_else(|| Error::Invalid("pretrained_encoder regime needs a trained checkpoint".into()))?,
                _ => &fresh,
            };
            out.push(run_probe(tables, regime, encoder_config, store, config, seed)?);
        }
    }
    Ok(out)
}

/// Median F1 of `regime` over the results given (mean of the middle two for
/// an even count).
pub fn median_f1(results: &[ProbeResult], regime: Regime) -> Option<f64> {
    let mut f: Vec<f64> = results.iter().filter(|r| r.regime == regime).map(|r| r.f1).collect();
    if f.is_empty() {
        return None;
    }
    f.sort_by(f64::total_cmp);
    let n = f.len();
    Some(if n % 2 == 1 { f[n / 2] } else { (f[n / 2 - 1] + f[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_closed_forms() {
        let actual = [true, false, true, false];
        assert_eq!(f1_score(&actual, &actual), 1.0);
        assert!((f1_score(&[true; 4], &actual) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_score(&[false; 4], &actual), 0.0);
    }

    #[test]
    fn two_by_two_pairs() {
        let t = Table::flat(&["a", "b"], &[vec!["1", "2"], vec!["3", "4"]], None).unwrap();
        let g = build_hypergraph(&t);
        let pairs = sample_pairs(&g, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(pairs.iter().filter(|p| p.2).count(), 8);
        assert_eq!(pairs.iter().filter(|p| !p.2).count(), 8);
        for &(v, e, m) in &pairs {
            assert_eq!(g.edges[e].members.contains(&v), m);
        }
    }
}
