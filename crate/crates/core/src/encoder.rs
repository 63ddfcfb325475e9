//! Hypergraph table encoder: hashed-token cell initialisation followed by
//! alternating node→edge and edge→node set-attention layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hypergraph::{incidence, EdgeKind, Hypergraph};
use crate::numcore::layers::{feed_forward, init_attention, init_feed_forward, init_layer_norm, layer_norm};
use crate::numcore::{NumError, ParamStore, Tape, Tensor, Var};
use crate::text::{fnv1a, split_tokens};
use crate::{Error, Result};

pub const PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_g: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the fusion MLP and of each block's row-wise feedforward.
    pub fusion_hidden: usize,
    /// Rows of the hashed token-embedding table.
    pub hash_buckets: usize,
    pub seed_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_g: 64,
            layers: 2,
            heads: 4,
            fusion_hidden: 128,
            hash_buckets: 2048,
            seed_count: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.d_g == 0 || self.heads == 0 || self.d_g % self.heads != 0 {
            return bad("d_g must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.fusion_hidden == 0 || self.hash_buckets == 0 || self.seed_count == 0 {
            return bad("fusion_hidden, hash_buckets and seed_count must be >= 1");
        }
        Ok(())
    }
}

/// Final (or intermediate) node and hyperedge embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub x_v: Tensor,
    pub x_e: Tensor,
    pub layer: usize,
}

pub fn token_bucket(token: &str, buckets: usize) -> usize {
    (fnv1a(token.as_bytes()) % buckets as u64) as usize
}

fn block_prefix(layer: usize, block: &str) -> String {
    format!("{PREFIX}/l{layer}/{block}")
}

pub fn init_multiset_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
    seeds: usize,
) -> Result<()> {
    store.init_uniform(rng, format!("{prefix}/seed"), &[seeds, d], d)?;
    init_attention(store, rng, &format!("{prefix}/attn"), d)?;
    init_layer_norm(store, &format!("{prefix}/ln1"), d)?;
    init_feed_forward(store, rng, &format!("{prefix}/ff"), d, hidden, d)?;
    init_layer_norm(store, &format!("{prefix}/ln2"), d)?;
    Ok(())
}

pub fn init_encoder_params<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let d = config.d_g;
    let mut store = ParamStore::new();
    store.init_uniform(rng, format!("{PREFIX}/tok_emb"), &[config.hash_buckets, d], d)?;
    store.init_uniform(rng, format!("{PREFIX}/empty_cell"), &[1, d], d)?;
    store.init_uniform(rng, format!("{PREFIX}/row_edge"), &[1, d], d)?;
    for t in 0..config.layers {
        for block in ["ms1", "ms2"] {
            init_multiset_params(&mut store, rng, &block_prefix(t, block), d, config.fusion_hidden, config.seed_count)?;
        }
        init_feed_forward(&mut store, rng, &block_prefix(t, "fusion"), 2 * d, config.fusion_hidden, d)?;
    }
    Ok(store)
}

/// Set attention from the block's seeds over each listed subset of rows of `x`.
///
/// Returns `sets.len() * s` rows: the `s` seed outputs of set 0, then set 1, ...
fn multiset_rows(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    sets: &[Vec<usize>],
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(NumError::InvalidArgument(format!("width {d} not divisible by {heads} heads")).into());
    }
    if let Some(i) = sets.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!("multiset block {prefix}: set {i} is empty")));
    }
    let seed = tape.param(store, &format!("{prefix}/seed"))?;
    let s = tape.value(seed).rows();
    let wq = tape.param(store, &format!("{prefix}/attn/wq"))?;
    let wk = tape.param(store, &format!("{prefix}/attn/wk"))?;
    let wv = tape.param(store, &format!("{prefix}/attn/wv"))?;
    let wo = tape.param(store, &format!("{prefix}/attn/wo"))?;
    let dh = d / heads;
    let q = tape.matmul(seed, wq)?;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let mut per_set = Vec::with_capacity(sets.len());
        for members in sets {
            let kg = tape.gather(kh, members)?;
            let vg = tape.gather(vh, members)?;
            let scores = tape.matmul_nt(qh, kg)?;
            let attn = tape.softmax(scores)?;
            per_set.push(tape.matmul(attn, vg)?);
        }
        head_outs.push(if per_set.len() == 1 { per_set[0] } else { tape.concat_rows(&per_set)? });
    }
    let cat = if heads == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
    let attended = tape.matmul(cat, wo)?;
    let tiled: Vec<usize> = (0..sets.len()).flat_map(|_| 0..s).collect();
    let seeds = tape.gather(seed, &tiled)?;
    let h = tape.add(seeds, attended)?;
    let h = layer_norm(tape, store, &format!("{prefix}/ln1"), h)?;
    let f = feed_forward(tape, store, &format!("{prefix}/ff"), h)?;
    let out = tape.add(h, f)?;
    Ok(layer_norm(tape, store, &format!("{prefix}/ln2"), out)?)
}

/// `Multiset(X) = LayerNorm(H + rFF(H))`, `H = LayerNorm(S + MultiHead(S, X, X))`.
///
/// Returns one row per seed.
pub fn multiset_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let k = tape.value(x).rows();
    if k == 0 {
        return Err(Error::Invalid(format!("multiset block {prefix}: empty input")));
    }
    multiset_rows(tape, store, prefix, x, &[(0..k).collect()], heads)
}

/// One row per set; with several seeds their outputs are averaged.
pub fn multiset_pool(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    sets: &[Vec<usize>],
    heads: usize,
) -> Result<Var> {
    let rows = multiset_rows(tape, store, prefix, x, sets, heads)?;
    let s = tape.value(rows).rows() / sets.len();
    if s == 1 {
        return Ok(rows);
    }
    let groups: Vec<Vec<usize>> = (0..sets.len()).map(|i| (i * s..(i + 1) * s).collect()).collect();
    Ok(tape.mean_groups(rows, &groups)?)
}

/// Hash-bucket ids per node and per edge.
///
/// Buckets `>= hash_buckets` address the two special vectors: `hash_buckets`
/// is the empty-text vector and `hash_buckets + 1` the shared row-edge vector.
pub fn init_token_groups(g: &Hypergraph, buckets: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let text_ids = |text: &str| -> Vec<usize> {
        let ids: Vec<usize> = split_tokens(text).iter().map(|t| token_bucket(t, buckets)).collect();
        if ids.is_empty() {
            vec![buckets]
        } else {
            ids
        }
    };
    let nodes = g.nodes.iter().map(|n| text_ids(&n.text)).collect();
    let edges = g
        .edges
        .iter()
        .map(|e| {
            if e.kind == EdgeKind::Row && e.cell_id.is_none() {
                vec![buckets + 1]
            } else {
                text_ids(&e.label_text)
            }
        })
        .collect();
    (nodes, edges)
}

/// Initial `(X_V, X_E)` on the tape.
pub fn init_cell_embeddings(tape: &mut Tape, store: &ParamStore, config: &EncoderConfig, g: &Hypergraph) -> Result<(Var, Var)> {
    if g.nodes.is_empty() || g.edges.is_empty() {
        return Err(Error::Invalid("hypergraph has no nodes or no edges".into()));
    }
    let tok = tape.param(store, &format!("{PREFIX}/tok_emb"))?;
    let empty = tape.param(store, &format!("{PREFIX}/empty_cell"))?;
    let row = tape.param(store, &format!("{PREFIX}/row_edge"))?;
    let table = tape.concat_rows(&[tok, empty, row])?;
    let (nodes, edges) = init_token_groups(g, config.hash_buckets);
    let x_v = tape.mean_groups(table, &nodes)?;
    let x_e = tape.mean_groups(table, &edges)?;
    Ok((x_v, x_e))
}

/// One node→edge→node pass with the layer-`t` parameters.
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    config: &EncoderConfig,
    g: &Hypergraph,
    t: usize,
    x_v: Var,
    x_e: Var,
) -> Result<(Var, Var)> {
    let inc = incidence(g);
    let agg = multiset_pool(tape, store, &block_prefix(t, "ms1"), x_v, &inc.edge_nodes, config.heads)?;
    let fused_in = tape.concat_cols(&[x_e, agg])?;
    let x_e_next = feed_forward(tape, store, &block_prefix(t, "fusion"), fused_in)?;
    let x_v_next = multiset_pool(tape, store, &block_prefix(t, "ms2"), x_e_next, &inc.node_edges, config.heads)?;
    Ok((x_v_next, x_e_next))
}

/// Full encoder on the tape; returns final `(X_V, X_E)`.
pub fn encode_on_tape(tape: &mut Tape, store: &ParamStore, config: &EncoderConfig, g: &Hypergraph) -> Result<(Var, Var)> {
    config.validate()?;
    let (mut x_v, mut x_e) = init_cell_embeddings(tape, store, config, g)?;
    for t in 0..config.layers {
        (x_v, x_e) = encoder_layer(tape, store, config, g, t, x_v, x_e)?;
    }
    Ok((x_v, x_e))
}

pub fn encode_table(g: &Hypergraph, config: &EncoderConfig, store: &ParamStore) -> Result<EncoderState> {
    let mut tape = Tape::new();
    let (x_v, x_e) = encode_on_tape(&mut tape, store, config, g)?;
    let state = EncoderState {
        x_v: tape.value(x_v).clone(),
        x_e: tape.value(x_e).clone(),
        layer: config.layers,
    };
    if !state.x_v.is_finite() || !state.x_e.is_finite() {
        return Err(NumError::NonFinite("encoder output".into()).into());
    }
    Ok(state)
}

/// Initial embeddings without any encoder layer.
pub fn initial_state(g: &Hypergraph, config: &EncoderConfig, store: &ParamStore) -> Result<EncoderState> {
    let mut tape = Tape::new();
    let (x_v, x_e) = init_cell_embeddings(&mut tape, store, config, g)?;
    Ok(EncoderState {
        x_v: tape.value(x_v).clone(),
        x_e: tape.value(x_e).clone(),
        layer: 0,
    })
}
