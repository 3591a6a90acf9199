//! Minimal f64 tensor machinery: NCHW kernels, a reverse-mode tape,
//! parameter storage and optimizers.

pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;

use std::collections::BTreeMap;

pub use kernels::{Pad2d, Tensor};
pub use optim::{Adam, AdamConfig, NesterovSgd};
pub use params::ParamStore;
pub use tape::{Grads, NormMode, Tape, Var};

/// Whether normalization layers use batch statistics or stored ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Collect gradients of the named parameters bound on `tape`.
pub fn param_grads(tape: &Tape, grads: &Grads) -> BTreeMap<String, Tensor> {
    tape.params()
        .iter()
        .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v, tape.value(*v))))
        .collect()
}

/// Running-statistics updates recorded during a training-mode forward pass.
#[derive(Debug, Default)]
pub struct NormUpdates(pub Vec<(String, Vec<f64>, Vec<f64>)>);

impl NormUpdates {
    pub fn apply(self, store: &mut ParamStore, momentum: f64) {
        for (prefix, mean, var) in self.0 {
            store.update_running(&prefix, &mean, &var, momentum);
        }
    }
}

/// Conv (optional bias) followed by optional batch-norm, bound from `store`.
/// `trainable` controls whether the parameters become differentiable leaves.
#[allow(clippy::too_many_arguments)]
pub fn conv_norm(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: Pad2d,
    norm: bool,
    mode: Mode,
    trainable: bool,
    updates: &mut NormUpdates,
) -> crate::Result<Var> {
    let bind = |tape: &mut Tape, name: String| -> crate::Result<Var> {
        let t = store.param(&name)?.clone();
        Ok(if trainable { tape.param(&name, t) } else { tape.constant(t) })
    };
    let w = bind(tape, format!("{prefix}.weight"))?;
    let b = if store.params.contains_key(&format!("{prefix}.bias")) {
        Some(bind(tape, format!("{prefix}.bias"))?)
    } else {
        None
    };
    let y = tape.conv2d(x, w, b, stride, pad);
    if !norm {
        return Ok(y);
    }
    let bn = format!("{prefix}.bn");
    let gamma = bind(tape, format!("{bn}.gamma"))?;
    let beta = bind(tape, format!("{bn}.beta"))?;
    let (y, stats) = match mode {
        Mode::Train => tape.batch_norm(y, gamma, beta, NormMode::Batch),
        Mode::Eval => {
            let mean = store.buffer(&format!("{bn}.running_mean"))?;
            let var = store.buffer(&format!("{bn}.running_var"))?;
            tape.batch_norm(y, gamma, beta, NormMode::Stored { mean, var })
        }
    };
    if let Some((m, v)) = stats {
        updates.0.push((bn, m, v));
    }
    Ok(y)
}
