use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumError, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step, must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries_per_param: Option<usize>,
    /// Use the fourth-order five-point central stencil instead of the
    /// two-point one.
    #[serde(default)]
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
            five_point: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCheck {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: BTreeMap<String, ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.values().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Parameters whose analytic gradient is identically zero.
    pub fn dead_params(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| p.analytic_norm == 0.0)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Compare tape gradients of a scalar loss against central differences.
///
/// `f` must build the same deterministic computation every time it is called.
pub fn grad_check<F, E>(store: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumError>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(NumError::InvalidArgument(format!("grad_check eps {} outside [1e-7, 1e-3]", cfg.eps)).into());
    }
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(NumError::NonFinite("grad_check objective".into()).into());
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(NumError::NonFinite("grad_check objective".into()).into());
    }
    let analytic = tape.backward(loss)?.params();

    let mut work = store.clone();
    let mut report = BTreeMap::new();
    for (name, grad) in &analytic {
        let n = grad.len();
        let indices: Vec<usize> = match cfg.max_entries_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &indices {
            let orig = work.get(name).expect("registered param").data()[i];
            let mut at = |delta: f64| -> Result<f64, E> {
                work.get_mut(name).expect("registered param").data_mut()[i] = orig + delta;
                let v = eval(&work);
                work.get_mut(name).expect("registered param").data_mut()[i] = orig;
                v
            };
            let h = cfg.eps;
            let numeric = if cfg.five_point {
                (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(cfg.floor));
        }
        let norm = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        report.insert(
            name.clone(),
            ParamCheck {
                entries_checked: indices.len(),
                max_rel_error: max_rel,
                max_abs_error: max_abs,
                analytic_norm: norm,
            },
        );
    }
    Ok(GradCheckReport {
        loss: loss_value,
        params: report,
    })
}
