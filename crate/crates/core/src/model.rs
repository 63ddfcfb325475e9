//! Encoder, projector and decoder wired into one trainable question-answering
//! model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, Episode};
use crate::encoder::{self, EncoderConfig};
use crate::hypergraph::Hypergraph;
use crate::numcore::{clip_grad_norm, AdamW, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::projector::{self, ProjectorConfig};
use crate::{Error, Result};

/// Whether the decoder sees the structure prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WithStructure,
    TextOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::WithStructure => "with_structure",
            Mode::TextOnly => "text_only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_structure" => Ok(Mode::WithStructure),
            "text_only" => Ok(Mode::TextOnly),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub k_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            k_tokens: 1,
        }
    }
}

impl ModelConfig {
    pub fn projector(&self) -> ProjectorConfig {
        ProjectorConfig {
            d_g: self.encoder.d_g,
            d_l: self.decoder.d_l,
            k_tokens: self.k_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.projector().validate()
    }
}

pub fn init_model<R: Rng>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    store.absorb_prefix(&encoder::init_encoder_params(&config.encoder, rng)?, "");
    store.absorb_prefix(&projector::init_projector_params(&config.projector(), rng)?, "");
    store.absorb_prefix(&decoder::init_decoder_params(&config.decoder, vocab_size, rng)?, "");
    Ok(store)
}

/// `X_st` for one table, recorded on the tape.
pub fn structure_tokens_on_tape(tape: &mut Tape, store: &ParamStore, config: &ModelConfig, g: &Hypergraph) -> Result<Var> {
    let (x_v, x_e) = encoder::encode_on_tape(tape, store, &config.encoder, g)?;
    projector::pool_and_project_on_tape(tape, store, &config.projector(), x_v, x_e)
}

pub fn structure_tokens(store: &ParamStore, config: &ModelConfig, g: &Hypergraph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = structure_tokens_on_tape(&mut tape, store, config, g)?;
    Ok(tape.value(v).clone())
}

/// One training example: an episode and the index of its table's hypergraph.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub graph: usize,
    pub episode: &'a Episode,
}

/// Mean per-episode loss; each distinct table is encoded once.
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    graphs: &[Hypergraph],
    batch: &[BatchItem<'_>],
    mode: Mode,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut prefixes: BTreeMap<usize, Var> = BTreeMap::new();
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let prefix = match mode {
            Mode::TextOnly => None,
            Mode::WithStructure => {
                let g = graphs
                    .get(item.graph)
                    .ok_or_else(|| Error::Invalid(format!("graph index {} out of range", item.graph)))?;
                Some(match prefixes.get(&item.graph) {
                    Some(v) => *v,
                    None => {
                        let v = structure_tokens_on_tape(tape, store, config, g)?;
                        prefixes.insert(item.graph, v);
                        v
                    }
                })
            }
        };
        losses.push(decoder::episode_loss(tape, store, &config.decoder, prefix, item.episode)?);
    }
    let total = if losses.len() == 1 { losses[0] } else { tape.concat_rows(&losses)? };
    let total = tape.sum(total)?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub mode: Mode,
    pub freeze_decoder: bool,
    pub max_grad_norm: Option<f64>,
}

/// Loss and gradients of one batch; frozen decoder parameters are removed
/// from the gradient map.
pub fn batch_gradients(
    store: &ParamStore,
    config: &ModelConfig,
    graphs: &[Hypergraph],
    batch: &[BatchItem<'_>],
    opts: &StepOptions,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let loss = batch_loss(&mut tape, store, config, graphs, batch, opts.mode)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(store.step()));
    }
    let mut grads = tape.backward(loss)?.params();
    if opts.freeze_decoder {
        let frozen = format!("{}/", decoder::PREFIX);
        grads.retain(|name, _| !name.starts_with(&frozen));
    }
    Ok((value, grads))
}

/// One optimizer step; returns the pre-step batch loss.
pub fn train_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    config: &ModelConfig,
    graphs: &[Hypergraph],
    batch: &[BatchItem<'_>],
    opts: &StepOptions,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(store, config, graphs, batch, opts)?;
    if let Some(max) = opts.max_grad_norm {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(store, &grads)?;
    Ok(loss)
}

fn prefix_for(store: &ParamStore, config: &ModelConfig, g: &Hypergraph, mode: Mode) -> Result<Option<Tensor>> {
    match mode {
        Mode::WithStructure => Ok(Some(structure_tokens(store, config, g)?)),
        Mode::TextOnly => Ok(None),
    }
}

/// Greedy answer ids for the episode's prompt (its answer field is ignored).
pub fn generate_answer(store: &ParamStore, config: &ModelConfig, g: &Hypergraph, ep: &Episode, mode: Mode) -> Result<Vec<usize>> {
    let prefix = prefix_for(store, config, g, mode)?;
    decoder::generate(store, &config.decoder, prefix.as_ref(), &ep.prompt_ids())
}

pub fn saliency(
    store: &ParamStore,
    config: &ModelConfig,
    g: &Hypergraph,
    ep: &Episode,
    mode: Mode,
    target: usize,
) -> Result<Vec<f64>> {
    let prefix = prefix_for(store, config, g, mode)?;
    decoder::token_saliency(store, &config.decoder, prefix.as_ref(), ep, target)
}
