use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    AdamW,
}

/// Optimizer hyperparameters and per-parameter moment buffers.
///
/// SGD uses classical (heavy-ball) momentum: `v <- mu*v + g; p <- p - lr*v`.
/// AdamW applies decoupled weight decay `p <- p - lr*wd*p` before the
/// bias-corrected adaptive step.
#[derive(Clone, Debug)]
pub struct OptimState<F: Real = f32> {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Real> OptimState<F> {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::with_kind(OptimKind::Sgd, lr, momentum, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimKind::AdamW, lr, 0.0, weight_decay)
    }

    fn with_kind(kind: OptimKind, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            kind,
            lr,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn ensure_buffers(&mut self, params: &[Tensor<F>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            if self.kind == OptimKind::AdamW {
                self.second = self.first.clone();
            }
            return Ok(());
        }
        if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params)
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::shape("optimizer buffers do not match parameters"));
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        match self.kind {
            OptimKind::Sgd => sgd_step(params, grads, self),
            OptimKind::AdamW => adamw_step(params, grads, self),
        }
    }
}

fn check_shapes<F: Real>(params: &[Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

pub fn sgd_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimState<F>,
) -> Result<()> {
    if state.kind != OptimKind::Sgd {
        return Err(Error::invalid("sgd_step on a non-SGD optimizer state"));
    }
    check_shapes(params, grads)?;
    state.ensure_buffers(params)?;
    let mu = F::of(state.momentum);
    let lr = F::of(state.lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    state.step_count += 1;
    Ok(())
}

pub fn adamw_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimState<F>,
) -> Result<()> {
    if state.kind != OptimKind::AdamW {
        return Err(Error::invalid("adamw_step on a non-AdamW optimizer state"));
    }
    check_shapes(params, grads)?;
    state.ensure_buffers(params)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = F::of(1.0 - b1.powi(t));
    let bc2 = F::of(1.0 - b2.powi(t));
    let lr = F::of(state.lr);
    let decay = F::of(state.lr * state.weight_decay);
    let eps = F::of(state.eps);
    let (b1f, b2f) = (F::of(b1), F::of(b2));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *pv -= decay * *pv;
            *mv = b1f * *mv + (F::one() - b1f) * gv;
            *vv = b2f * *vv + (F::one() - b2f) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
