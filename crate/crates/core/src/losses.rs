//! Multi-label binary cross-entropy with per-class positive weights.
//!
//! `loss = -(1/(N*d)) * sum_n sum_k [ p_k * y_nk * ln x_nk + (1 - y_nk) * ln(1 - x_nk) ]`
//! where `p_k = max(f) / f_k` for absolute train-set class frequencies `f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Graph, Real, Tensor, Var};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub frequencies: Vec<u64>,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(d: usize) -> Self {
        ClassWeights {
            frequencies: vec![1; d],
            weights: vec![1.0; d],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weights `max(f) / f_k`. Every class must occur at least once.
pub fn class_weights(frequencies: &[u64]) -> Result<ClassWeights> {
    if frequencies.is_empty() {
        return Err(Error::invalid("no classes"));
    }
    if let Some(k) = frequencies.iter().position(|&f| f == 0) {
        return Err(Error::invalid(format!(
            "class {k} never occurs in the training set"
        )));
    }
    let max = *frequencies.iter().max().expect("non-empty") as f64;
    Ok(ClassWeights {
        frequencies: frequencies.to_vec(),
        weights: frequencies.iter().map(|&f| max / f as f64).collect(),
    })
}

/// A batch of sigmoid outputs `x` and multi-hot targets `y`, both `[N, d]`.
#[derive(Clone, Debug)]
pub struct BceBatch<F: Real = f64> {
    pub probs: Tensor<F>,
    pub targets: Tensor<F>,
}

impl<F: Real> BceBatch<F> {
    pub fn new(probs: Tensor<F>, targets: Tensor<F>) -> Result<Self> {
        if probs.shape() != targets.shape() || probs.shape().len() != 2 {
            return Err(Error::shape(format!(
                "bce probs {:?} vs targets {:?}",
                probs.shape(),
                targets.shape()
            )));
        }
        Ok(BceBatch { probs, targets })
    }
}

fn check(probs: &Tensor<impl Real>, targets: &Tensor<impl Real>, w: &ClassWeights) -> Result<()> {
    if probs.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "bce probs {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    if probs.cols() != w.len() {
        return Err(Error::shape(format!(
            "{} classes but {} weights",
            probs.cols(),
            w.len()
        )));
    }
    Ok(())
}

fn value_and_grad<F: Real>(
    probs: &Tensor<F>,
    targets: &Tensor<F>,
    w: &ClassWeights,
) -> (F, Vec<F>) {
    let d = probs.cols();
    let scale = F::of(1.0 / probs.numel() as f64);
    let eps = F::of(PROB_EPS);
    let hi = F::one() - eps;
    let mut total = F::zero();
    let mut grad = vec![F::zero(); probs.numel()];
    for (idx, (&x_raw, &y)) in probs.data().iter().zip(targets.data()).enumerate() {
        let p = F::of(w.weights[idx % d]);
        let x = x_raw.max(eps).min(hi);
        total += p * y * x.ln() + (F::one() - y) * (F::one() - x).ln();
        if x_raw > eps && x_raw < hi {
            grad[idx] = -scale * (p * y / x - (F::one() - y) / (F::one() - x));
        }
    }
    (-scale * total, grad)
}

pub fn reweighted_bce<F: Real>(batch: &BceBatch<F>, w: &ClassWeights) -> Result<F> {
    check(&batch.probs, &batch.targets, w)?;
    Ok(value_and_grad(&batch.probs, &batch.targets, w).0)
}

struct BceOp<F: Real> {
    grad: Vec<F>,
    shape: Vec<usize>,
}

impl<F: Real> CustomOp<F> for BceOp<F> {
    fn name(&self) -> &'static str {
        "reweighted_bce"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>> {
        let s = grad_out.item();
        let g = self.grad.iter().map(|&v| v * s).collect();
        vec![
            Some(Tensor::new(self.shape.clone(), g).expect("bce grad")),
            None,
        ]
    }
}

/// Graph node for the loss on `probs` (already passed through a sigmoid).
pub fn reweighted_bce_node<F: Real>(
    g: &mut Graph<F>,
    probs: Var,
    targets: Var,
    w: &ClassWeights,
) -> Result<Var> {
    check(g.value(probs), g.value(targets), w)?;
    let (loss, grad) = value_and_grad(g.value(probs), g.value(targets), w);
    let shape = g.shape(probs).to_vec();
    Ok(g.custom(
        &[probs, targets],
        Tensor::scalar(loss),
        Box::new(BceOp { grad, shape }),
    ))
}
