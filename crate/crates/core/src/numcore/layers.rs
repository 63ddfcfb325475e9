//! Small parameterised building blocks shared by the encoder, projector,
//! decoder and probe.

use rand::Rng;

use super::{NumError, ParamStore, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), NumError> {
    store.init_uniform(rng, format!("{prefix}/w"), &[fan_in, fan_out], fan_in)?;
    store.init_uniform(rng, format!("{prefix}/b"), &[1, fan_out], fan_in)
}

/// `x · W + b`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, NumError> {
    let w = tape.param(store, &format!("{prefix}/w"))?;
    let b = tape.param(store, &format!("{prefix}/b"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<(), NumError> {
    store.init_const(format!("{prefix}/gamma"), &[1, width], 1.0)?;
    store.init_const(format!("{prefix}/beta"), &[1, width], 0.0)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, NumError> {
    let g = tape.param(store, &format!("{prefix}/gamma"))?;
    let b = tape.param(store, &format!("{prefix}/beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Row-wise two-layer feedforward with GELU.
pub fn init_feed_forward<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
) -> Result<(), NumError> {
    init_linear(store, rng, &format!("{prefix}/fc1"), d_in, hidden)?;
    init_linear(store, rng, &format!("{prefix}/fc2"), hidden, d_out)
}

pub fn feed_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, NumError> {
    let h = linear(tape, store, &format!("{prefix}/fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, store, &format!("{prefix}/fc2"), h)
}

pub fn init_attention<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize) -> Result<(), NumError> {
    for m in ["wq", "wk", "wv", "wo"] {
        store.init_uniform(rng, format!("{prefix}/{m}"), &[d, d], d)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention with input and output projections.
///
/// `query` is `q x d`, `key` and `value` are `k x d`. With `causal`, query row
/// `i` attends to key rows `j <= i + (k - q)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    causal: bool,
) -> Result<Var, NumError> {
    let d = tape.value(query).cols();
    let (q_rows, k_rows) = (tape.value(query).rows(), tape.value(key).rows());
    if heads == 0 || d % heads != 0 {
        return Err(NumError::InvalidArgument(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    if k_rows == 0 {
        return Err(NumError::EmptyAxis("attention keys"));
    }
    if tape.value(key).cols() != d || tape.value(value).cols() != d || tape.value(value).rows() != k_rows {
        return Err(NumError::Shape {
            op: "multi_head_attention",
            lhs: tape.value(key).shape().to_vec(),
            rhs: tape.value(value).shape().to_vec(),
        });
    }
    let offset = if causal {
        if k_rows < q_rows {
            return Err(NumError::InvalidArgument("causal attention needs k >= q".into()));
        }
        Some(k_rows - q_rows)
    } else {
        None
    };
    let wq = tape.param(store, &format!("{prefix}/wq"))?;
    let wk = tape.param(store, &format!("{prefix}/wk"))?;
    let wv = tape.param(store, &format!("{prefix}/wv"))?;
    let wo = tape.param(store, &format!("{prefix}/wo"))?;
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(key, wk)?;
    let v = tape.matmul(value, wv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
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
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_masked(scores, offset)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, wo)
}
