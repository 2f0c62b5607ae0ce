//! SGD with momentum and Adam.

use std::collections::BTreeMap;

use super::array::Tensor;
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hyper {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Hyper {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Hyper::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Hyper::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Hyper::Sgd { lr, .. } | Hyper::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter buffers.
///
/// SGD keeps one velocity buffer per parameter; Adam keeps first and second
/// moments and a shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: Hyper,
    pub step: u64,
    pub buffers: BTreeMap<String, Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new(hyper: Hyper) -> Self {
        Self {
            hyper,
            step: 0,
            buffers: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.hyper {
            Hyper::Sgd { lr, .. } | Hyper::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// Updates every trainable parameter in `paths` and clears its gradient.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamSet,
        paths: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        match self.hyper {
            Hyper::Sgd { .. } => sgd_step(params, self, paths),
            Hyper::Adam { .. } => adam_step(params, self, paths),
        }
    }
}

fn take_grad(params: &mut ParamSet, path: &str) -> Result<Option<(Tensor, Tensor)>> {
    let p = params
        .get_mut(path)
        .ok_or_else(|| Error::Config(format!("optimizer given unknown parameter {path}")))?;
    if !p.trainable {
        return Ok(None);
    }
    let g = p
        .grad
        .take()
        .ok_or_else(|| Error::Precondition(format!("no gradient for {path}")))?;
    Ok(Some((p.value.clone(), g)))
}

/// `v ← μv + (g + λp)`, `p ← p − ηv`.
pub fn sgd_step<'a>(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    paths: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let Hyper::Sgd {
        lr,
        momentum,
        weight_decay,
    } = state.hyper
    else {
        return Err(Error::Config("sgd_step on an Adam state".into()));
    };
    let paths: Vec<&str> = paths.into_iter().collect();
    // Validate first so a missing gradient leaves everything untouched.
    for &path in &paths {
        let p = params
            .get(path)
            .ok_or_else(|| Error::Config(format!("optimizer given unknown parameter {path}")))?;
        if p.trainable && p.grad.is_none() {
            return Err(Error::Precondition(format!("no gradient for {path}")));
        }
    }
    for path in paths {
        let Some((value, grad)) = take_grad(params, path)? else {
            continue;
        };
        let buf = state
            .buffers
            .entry(path.to_owned())
            .or_insert_with(|| vec![Tensor::zeros(value.shape())]);
        let vel = buf[0].data_mut();
        let mut next = value;
        for ((p, g), v) in next.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
            let d = g + weight_decay * *p;
            *v = momentum * *v + d;
            *p -= lr * *v;
        }
        params.get_mut(path).unwrap().value = next;
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step<'a>(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    paths: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let Hyper::Adam {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper
    else {
        return Err(Error::Config("adam_step on an SGD state".into()));
    };
    let paths: Vec<&str> = paths.into_iter().collect();
    for &path in &paths {
        let p = params
            .get(path)
            .ok_or_else(|| Error::Config(format!("optimizer given unknown parameter {path}")))?;
        if p.trainable && p.grad.is_none() {
            return Err(Error::Precondition(format!("no gradient for {path}")));
        }
    }
    let t = state.step + 1;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for path in paths {
        let Some((value, grad)) = take_grad(params, path)? else {
            continue;
        };
        let buf = state
            .buffers
            .entry(path.to_owned())
            .or_insert_with(|| vec![Tensor::zeros(value.shape()), Tensor::zeros(value.shape())]);
        let (m_buf, v_buf) = buf.split_at_mut(1);
        let mut next = value;
        for (((p, g), m), v) in next
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m_buf[0].data_mut())
            .zip(v_buf[0].data_mut())
        {
            let g = g + weight_decay * *p;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        params.get_mut(path).unwrap().value = next;
    }
    state.step = t;
    Ok(())
}
