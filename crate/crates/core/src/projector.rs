//! Pooling of encoder outputs into structure tokens in the decoder's
//! embedding space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_multiset_params, multiset_block};
use crate::numcore::layers::{init_linear, linear};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "projector";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub d_g: usize,
    pub d_l: usize,
    pub k_tokens: usize,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_g == 0 || self.d_l == 0 || self.k_tokens == 0 {
            return Err(Error::Config("projector: d_g, d_l and k_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Affine layer, plus a single-head seeded pooling block when `k_tokens > 1`.
pub fn init_projector_params<R: Rng>(config: &ProjectorConfig, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    init_linear(&mut store, rng, &format!("{PREFIX}/affine"), config.d_g, config.d_l)?;
    if config.k_tokens > 1 {
        init_multiset_params(&mut store, rng, &format!("{PREFIX}/pool"), config.d_g, 2 * config.d_g, config.k_tokens)?;
    }
    Ok(store)
}

/// `X_st`, shape `k_tokens x d_l`.
pub fn pool_and_project_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ProjectorConfig,
    x_v: Var,
    x_e: Var,
) -> Result<Var> {
    for (name, v) in [("X_V", x_v), ("X_E", x_e)] {
        let t = tape.value(v);
        if t.rows() == 0 {
            return Err(Error::Invalid(format!("projector: {name} is empty")));
        }
        if t.cols() != config.d_g {
            return Err(Error::Invalid(format!("projector: {name} width {} != d_g {}", t.cols(), config.d_g)));
        }
    }
    let all = tape.concat_rows(&[x_v, x_e])?;
    let pooled = if config.k_tokens == 1 {
        tape.mean_all_rows(all)?
    } else {
        multiset_block(tape, store, &format!("{PREFIX}/pool"), all, 1)?
    };
    linear(tape, store, &format!("{PREFIX}/affine"), pooled)
        .map_err(Into::into)
}

pub fn pool_and_project(x_v: &Tensor, x_e: &Tensor, config: &ProjectorConfig, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x_v.clone());
    let e = tape.constant(x_e.clone());
    let out = pool_and_project_on_tape(&mut tape, store, config, v, e)?;
    Ok(tape.value(out).clone())
}
