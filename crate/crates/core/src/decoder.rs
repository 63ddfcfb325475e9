//! Small causal transformer that reads `[X_st; table tokens; question tokens]`
//! and emits answer tokens.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::layers::{
    feed_forward, init_attention, init_feed_forward, init_layer_norm, layer_norm, multi_head_attention,
};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::text::split_tokens;
use crate::{Error, Result};

pub const PREFIX: &str = "decoder";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const STRUCT: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<struct>"];

/// Dense token ids; the first five are the reserved markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids followed by every distinct token of `texts`, sorted.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        for t in texts {
            for tok in split_tokens(t.as_ref()) {
                if !RESERVED.contains(&tok) {
                    seen.insert(tok.to_string());
                }
            }
        }
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(seen).collect();
        Self::from_tokens(tokens).expect("built vocab is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Invalid("vocab must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Unknown tokens map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_tokens(text).into_iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Space-joined tokens; reserved ids other than `UNK` are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i == UNK || i >= RESERVED.len())
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, body).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_tokens(serde_json::from_str(&body)?)
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    vocab.encode(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_l: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_seq_len: usize,
    pub max_new_tokens: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_l: 128,
            layers: 2,
            heads: 4,
            ff_hidden: 512,
            max_seq_len: 512,
            max_new_tokens: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_l == 0 || self.heads == 0 || self.d_l % self.heads != 0 {
            return Err(Error::Config("decoder: d_l must be a positive multiple of heads".into()));
        }
        if self.layers == 0 || self.ff_hidden == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("decoder: layers, ff_hidden and max_seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token ids of one question; the structure prefix is supplied separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub table: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Episode {
    /// `<bos>`, table, question.
    pub fn prompt_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(1 + self.table.len() + self.question.len());
        ids.push(BOS);
        ids.extend(&self.table);
        ids.extend(&self.question);
        ids
    }

    /// Prompt followed by the answer (without the final `<eos>`).
    pub fn input_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt_ids();
        ids.extend(&self.answer);
        ids
    }

    /// `(position, target)` pairs: each answer token and the closing `<eos>`,
    /// predicted from the position before it. Positions count the prefix rows.
    pub fn answer_targets(&self, prefix_rows: usize) -> Vec<(usize, usize)> {
        let first = prefix_rows + self.prompt_ids().len() - 1;
        self.answer
            .iter()
            .copied()
            .chain(std::iter::once(EOS))
            .enumerate()
            .map(|(j, y)| (first + j, y))
            .collect()
    }
}

/// Embedding tables are drawn from `±EMBED_INIT_SCALE/sqrt(d_l)`, small
/// enough that tied output logits start close to uniform.
pub const EMBED_INIT_SCALE: f64 = 0.5;

pub fn init_decoder_params<R: Rng>(config: &DecoderConfig, vocab_size: usize, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let d = config.d_l;
    let mut store = ParamStore::new();
    let bound = EMBED_INIT_SCALE / (d as f64).sqrt();
    store.init_uniform_bound(rng, format!("{PREFIX}/tok_emb"), &[vocab_size, d], bound)?;
    store.init_uniform_bound(rng, format!("{PREFIX}/pos_emb"), &[config.max_seq_len, d], bound)?;
    for l in 0..config.layers {
        let p = format!("{PREFIX}/l{l}");
        init_layer_norm(&mut store, &format!("{p}/ln1"), d)?;
        init_attention(&mut store, rng, &format!("{p}/attn"), d)?;
        init_layer_norm(&mut store, &format!("{p}/ln2"), d)?;
        init_feed_forward(&mut store, rng, &format!("{p}/ff"), d, config.ff_hidden, d)?;
    }
    init_layer_norm(&mut store, &format!("{PREFIX}/ln_f"), d)?;
    Ok(store)
}

/// Token embeddings of `ids`, preceded by the prefix rows if any.
pub fn embed_inputs(tape: &mut Tape, store: &ParamStore, prefix: Option<Var>, ids: &[usize]) -> Result<Var> {
    let tok = tape.param(store, &format!("{PREFIX}/tok_emb"))?;
    let mut parts = Vec::with_capacity(2);
    if let Some(p) = prefix {
        parts.push(p);
    }
    if !ids.is_empty() {
        parts.push(tape.gather(tok, ids)?);
    }
    match parts.len() {
        0 => Err(Error::Invalid("decoder input is empty".into())),
        1 => Ok(parts[0]),
        _ => Ok(tape.concat_rows(&parts)?),
    }
}

/// Final hidden states for an embedded sequence.
pub fn hidden_states(tape: &mut Tape, store: &ParamStore, config: &DecoderConfig, x: Var) -> Result<Var> {
    let len = tape.value(x).rows();
    if len > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: config.max_seq_len,
        });
    }
    let pos = tape.param(store, &format!("{PREFIX}/pos_emb"))?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather(pos, &positions)?;
    let mut h = tape.add(x, pos)?;
    for l in 0..config.layers {
        let p = format!("{PREFIX}/l{l}");
        let a = layer_norm(tape, store, &format!("{p}/ln1"), h)?;
        let a = multi_head_attention(tape, store, &format!("{p}/attn"), a, a, a, config.heads, true)?;
        h = tape.add(h, a)?;
        let f = layer_norm(tape, store, &format!("{p}/ln2"), h)?;
        let f = feed_forward(tape, store, &format!("{p}/ff"), f)?;
        h = tape.add(h, f)?;
    }
    Ok(layer_norm(tape, store, &format!("{PREFIX}/ln_f"), h)?)
}

/// Vocabulary logits (tied to the token embeddings) for the selected rows.
pub fn logits_at(tape: &mut Tape, store: &ParamStore, h: Var, rows: &[usize]) -> Result<Var> {
    let tok = tape.param(store, &format!("{PREFIX}/tok_emb"))?;
    let sel = tape.gather(h, rows)?;
    Ok(tape.matmul_nt(sel, tok)?)
}

/// Logits at every position of `prefix ++ ids`.
pub fn forward_logits(
    tape: &mut Tape,
    store: &ParamStore,
    config: &DecoderConfig,
    prefix: Option<Var>,
    ids: &[usize],
) -> Result<Var> {
    let x = embed_inputs(tape, store, prefix, ids)?;
    let h = hidden_states(tape, store, config, x)?;
    let rows: Vec<usize> = (0..tape.value(h).rows()).collect();
    logits_at(tape, store, h, &rows)
}

/// Mean cross-entropy over the answer positions of one episode.
pub fn episode_loss(
    tape: &mut Tape,
    store: &ParamStore,
    config: &DecoderConfig,
    prefix: Option<Var>,
    ep: &Episode,
) -> Result<Var> {
    let k = prefix.map_or(0, |p| tape.value(p).rows());
    let x = embed_inputs(tape, store, prefix, &ep.input_ids())?;
    let h = hidden_states(tape, store, config, x)?;
    let targets = ep.answer_targets(k);
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let logits = logits_at(tape, store, h, &rows)?;
    let ys: Vec<Option<usize>> = targets.iter().map(|t| Some(t.1)).collect();
    Ok(tape.cross_entropy(logits, &ys)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `prefix ++ prompt` until `<eos>`, `max_new_tokens`,
/// or the context limit.
pub fn generate(store: &ParamStore, config: &DecoderConfig, prefix: Option<&Tensor>, prompt: &[usize]) -> Result<Vec<usize>> {
    let k = prefix.map_or(0, Tensor::rows);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < config.max_new_tokens && k + ids.len() <= config.max_seq_len {
        let mut tape = Tape::new();
        let p = prefix.map(|t| tape.constant(t.clone()));
        let x = embed_inputs(&mut tape, store, p, &ids)?;
        let h = hidden_states(&mut tape, store, config, x)?;
        let last = tape.value(h).rows() - 1;
        let logits = logits_at(&mut tape, store, h, &[last])?;
        let next = argmax(tape.value(logits).row(0));
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// L2 norm of the gradient of `log p(target)` with respect to every input
/// embedding row (prefix rows first, then `<bos>`, table, question, answer).
///
/// `target` indexes the answer tokens; `ep.answer.len()` selects the closing
/// `<eos>`.
pub fn token_saliency(
    store: &ParamStore,
    config: &DecoderConfig,
    prefix: Option<&Tensor>,
    ep: &Episode,
    target: usize,
) -> Result<Vec<f64>> {
    let k = prefix.map_or(0, Tensor::rows);
    let targets = ep.answer_targets(k);
    let &(pos, y) = targets
        .get(target)
        .ok_or_else(|| Error::Invalid(format!("target {target} out of range for {} answer tokens", ep.answer.len())))?;
    let mut tape = Tape::new();
    let embedded = {
        let p = prefix.map(|t| tape.constant(t.clone()));
        let x = embed_inputs(&mut tape, store, p, &ep.input_ids())?;
        tape.value(x).clone()
    };
    let x = tape.input(embedded);
    let h = hidden_states(&mut tape, store, config, x)?;
    let logits = logits_at(&mut tape, store, h, &[pos])?;
    let nll = tape.cross_entropy(logits, &[Some(y)])?;
    let g = tape.backward(nll)?.wrt(x);
    Ok((0..g.rows()).map(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}
