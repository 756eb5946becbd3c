//! Linear-chain CRF over per-token emission scores.
//!
//! A path `y` over `L` positions scores
//! `start[y0] + sum_i emit[i][y_i] + sum_i trans[y_{i-1}][y_i] + end[y_last]`.
//! Training minimizes `log Z - score(gold)` (forward algorithm); a
//! cost-augmented max-margin loss is available as an alternative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{logsumexp_unchecked, CustomOp, Graph, Real, Tensor, Var};

/// BIO label ids used throughout span tagging.
pub const TAG_O: usize = 0;
pub const TAG_B: usize = 1;
pub const TAG_I: usize = 2;
pub const NUM_BIO: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams<F: Real = f32> {
    /// `[from, to]`
    pub transitions: Tensor<F>,
    pub start: Vec<F>,
    pub end: Vec<F>,
}

impl<F: Real> CrfParams<F> {
    pub fn zeros(num_labels: usize) -> Self {
        CrfParams {
            transitions: Tensor::zeros(vec![num_labels, num_labels]),
            start: vec![F::zero(); num_labels],
            end: vec![F::zero(); num_labels],
        }
    }

    pub fn new(transitions: Tensor<F>, start: Vec<F>, end: Vec<F>) -> Result<Self> {
        let k = start.len();
        if transitions.shape() != [k, k] || end.len() != k {
            return Err(Error::shape(format!(
                "crf params: transitions {:?}, start {}, end {}",
                transitions.shape(),
                k,
                end.len()
            )));
        }
        Ok(CrfParams {
            transitions,
            start,
            end,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    #[inline]
    fn trans(&self, from: usize, to: usize) -> F {
        self.transitions.data()[from * self.num_labels() + to]
    }
}

/// Allowed transitions and start labels. Disallowed moves score `-inf`
/// during decoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMask {
    num_labels: usize,
    allowed: Vec<bool>,
    start_allowed: Vec<bool>,
}

impl ConstraintMask {
    pub fn allow_all(num_labels: usize) -> Self {
        ConstraintMask {
            num_labels,
            allowed: vec![true; num_labels * num_labels],
            start_allowed: vec![true; num_labels],
        }
    }

    /// BIO validity: no `I` at the start and no `O -> I`.
    pub fn bio() -> Self {
        let mut m = Self::allow_all(NUM_BIO);
        m.allowed[TAG_O * NUM_BIO + TAG_I] = false;
        m.start_allowed[TAG_I] = false;
        m
    }

    pub fn new(num_labels: usize, allowed: Vec<bool>, start_allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != num_labels * num_labels || start_allowed.len() != num_labels {
            return Err(Error::shape("constraint mask size"));
        }
        let m = ConstraintMask {
            num_labels,
            allowed,
            start_allowed,
        };
        if !m.feasible_for_all_lengths() {
            return Err(Error::invalid(
                "constraint mask admits no path for some sequence length",
            ));
        }
        Ok(m)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.num_labels + to]
    }

    pub fn allows_start(&self, label: usize) -> bool {
        self.start_allowed[label]
    }

    /// True when every length admits at least one allowed path. The reachable
    /// label sets form a deterministic sequence, so it suffices to iterate
    /// until a set repeats.
    fn feasible_for_all_lengths(&self) -> bool {
        let k = self.num_labels;
        let mut seen: Vec<Vec<bool>> = Vec::new();
        let mut cur = self.start_allowed.clone();
        loop {
            if !cur.iter().any(|&b| b) {
                return false;
            }
            if seen.contains(&cur) {
                return true;
            }
            let next: Vec<bool> = (0..k)
                .map(|to| (0..k).any(|from| cur[from] && self.allows(from, to)))
                .collect();
            seen.push(cur);
            cur = next;
        }
    }

    pub fn accepts(&self, tags: &[usize]) -> bool {
        match tags.first() {
            None => true,
            Some(&t0) => self.allows_start(t0) && tags.windows(2).all(|w| self.allows(w[0], w[1])),
        }
    }
}

fn check_inputs<F: Real>(emissions: &Tensor<F>, params: &CrfParams<F>) -> Result<(usize, usize)> {
    let k = params.num_labels();
    if emissions.shape().len() != 2 || emissions.cols() != k {
        return Err(Error::shape(format!(
            "emissions {:?} for {k} labels",
            emissions.shape()
        )));
    }
    let len = emissions.rows();
    if len == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    Ok((len, k))
}

fn check_tags(tags: &[usize], len: usize, k: usize) -> Result<()> {
    if tags.len() != len {
        return Err(Error::shape(format!(
            "{} tags for {len} positions",
            tags.len()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("label id {bad} outside {k} labels")));
    }
    Ok(())
}

pub fn path_score<F: Real>(
    emissions: &Tensor<F>,
    tags: &[usize],
    params: &CrfParams<F>,
) -> Result<F> {
    let (len, k) = check_inputs(emissions, params)?;
    check_tags(tags, len, k)?;
    let mut s = params.start[tags[0]];
    for (i, &t) in tags.iter().enumerate() {
        s += emissions.at(i, t);
        if i > 0 {
            s += params.trans(tags[i - 1], t);
        }
    }
    s += params.end[tags[len - 1]];
    Ok(s)
}

/// Forward recursion: `alpha[i][y]` is the log-sum of scores of all prefixes
/// ending in `y` at position `i` (start scores included, end excluded).
fn forward_table<F: Real>(emissions: &Tensor<F>, params: &CrfParams<F>) -> Vec<Vec<F>> {
    let (len, k) = (emissions.rows(), params.num_labels());
    let mut alpha = Vec::with_capacity(len);
    alpha.push(
        (0..k)
            .map(|y| params.start[y] + emissions.at(0, y))
            .collect::<Vec<F>>(),
    );
    let mut buf = vec![F::zero(); k];
    for i in 1..len {
        let prev = &alpha[i - 1];
        let row: Vec<F> = (0..k)
            .map(|y| {
                for (from, b) in buf.iter_mut().enumerate() {
                    *b = prev[from] + params.trans(from, y);
                }
                logsumexp_unchecked(&buf) + emissions.at(i, y)
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

/// `beta[i][y]`: log-sum of suffix scores after position `i` given `y` at `i`,
/// end scores included.
fn backward_table<F: Real>(emissions: &Tensor<F>, params: &CrfParams<F>) -> Vec<Vec<F>> {
    let (len, k) = (emissions.rows(), params.num_labels());
    let mut beta = vec![vec![F::zero(); k]; len];
    beta[len - 1].clone_from(&params.end);
    let mut buf = vec![F::zero(); k];
    for i in (0..len - 1).rev() {
        for y in 0..k {
            for (to, b) in buf.iter_mut().enumerate() {
                *b = params.trans(y, to) + emissions.at(i + 1, to) + beta[i + 1][to];
            }
            beta[i][y] = logsumexp_unchecked(&buf);
        }
    }
    beta
}

pub fn log_partition<F: Real>(emissions: &Tensor<F>, params: &CrfParams<F>) -> Result<F> {
    let (len, k) = check_inputs(emissions, params)?;
    let alpha = forward_table(emissions, params);
    let last: Vec<F> = (0..k).map(|y| alpha[len - 1][y] + params.end[y]).collect();
    Ok(logsumexp_unchecked(&last))
}

/// Negative log-likelihood of `tags`. When a mask is given, tags it rejects
/// are an error.
pub fn nll<F: Real>(
    emissions: &Tensor<F>,
    tags: &[usize],
    params: &CrfParams<F>,
    mask: Option<&ConstraintMask>,
) -> Result<F> {
    if let Some(m) = mask {
        if !m.accepts(tags) {
            return Err(Error::invalid("tag sequence violates the constraint mask"));
        }
    }
    Ok(log_partition(emissions, params)? - path_score(emissions, tags, params)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfGrads<F: Real> {
    pub emissions: Tensor<F>,
    pub transitions: Tensor<F>,
    pub start: Vec<F>,
    pub end: Vec<F>,
}

impl<F: Real> CrfGrads<F> {
    fn zeros(len: usize, k: usize) -> Self {
        CrfGrads {
            emissions: Tensor::zeros(vec![len, k]),
            transitions: Tensor::zeros(vec![k, k]),
            start: vec![F::zero(); k],
            end: vec![F::zero(); k],
        }
    }

    /// Adds `sign` times the feature counts of a path.
    fn add_path(&mut self, tags: &[usize], sign: F) {
        let k = self.start.len();
        self.start[tags[0]] += sign;
        self.end[tags[tags.len() - 1]] += sign;
        for (i, &t) in tags.iter().enumerate() {
            self.emissions.data_mut()[i * k + t] += sign;
            if i > 0 {
                self.transitions.data_mut()[tags[i - 1] * k + t] += sign;
            }
        }
    }
}

/// NLL and its gradient: expected feature counts under the model minus the
/// gold path's counts, from forward-backward marginals.
pub fn nll_with_grad<F: Real>(
    emissions: &Tensor<F>,
    tags: &[usize],
    params: &CrfParams<F>,
) -> Result<(F, CrfGrads<F>)> {
    let (len, k) = check_inputs(emissions, params)?;
    check_tags(tags, len, k)?;
    let alpha = forward_table(emissions, params);
    let beta = backward_table(emissions, params);
    let last: Vec<F> = (0..k).map(|y| alpha[len - 1][y] + params.end[y]).collect();
    let log_z = logsumexp_unchecked(&last);
    let loss = log_z - path_score(emissions, tags, params)?;

    let mut g = CrfGrads::zeros(len, k);
    for i in 0..len {
        for y in 0..k {
            let p = (alpha[i][y] + beta[i][y] - log_z).exp();
            g.emissions.data_mut()[i * k + y] = p;
            if i == 0 {
                g.start[y] = p;
            }
            if i == len - 1 {
                g.end[y] = p;
            }
        }
    }
    for i in 1..len {
        for a in 0..k {
            for b in 0..k {
                let p = (alpha[i - 1][a] + params.trans(a, b) + emissions.at(i, b) + beta[i][b]
                    - log_z)
                    .exp();
                g.transitions.data_mut()[a * k + b] += p;
            }
        }
    }
    g.add_path(tags, -F::one());
    Ok((loss, g))
}

/// Viterbi decoding. Predecessor ties resolve to the lowest label id, as does
/// the choice of the final label.
pub fn viterbi<F: Real>(
    emissions: &Tensor<F>,
    params: &CrfParams<F>,
    mask: Option<&ConstraintMask>,
) -> Result<(Vec<usize>, F)> {
    viterbi_with_cost(emissions, params, mask, None)
}

fn viterbi_with_cost<F: Real>(
    emissions: &Tensor<F>,
    params: &CrfParams<F>,
    mask: Option<&ConstraintMask>,
    hamming_against: Option<&[usize]>,
) -> Result<(Vec<usize>, F)> {
    let (len, k) = check_inputs(emissions, params)?;
    if let Some(m) = mask {
        if m.num_labels() != k {
            return Err(Error::shape("constraint mask label count"));
        }
    }
    let ninf = F::neg_infinity();
    let cost = |i: usize, y: usize| match hamming_against {
        Some(gold) if gold[i] != y => F::one(),
        _ => F::zero(),
    };
    let start_ok = |y: usize| mask.is_none_or(|m| m.allows_start(y));
    let trans_ok = |a: usize, b: usize| mask.is_none_or(|m| m.allows(a, b));

    let mut delta: Vec<F> = (0..k)
        .map(|y| {
            if start_ok(y) {
                params.start[y] + emissions.at(0, y) + cost(0, y)
            } else {
                ninf
            }
        })
        .collect();
    let mut back = vec![vec![0usize; k]; len];
    for i in 1..len {
        let mut next = vec![ninf; k];
        for y in 0..k {
            let mut best = ninf;
            let mut arg = 0;
            let mut found = false;
            for from in 0..k {
                if !trans_ok(from, y) || delta[from] == ninf {
                    continue;
                }
                let s = delta[from] + params.trans(from, y);
                if !found || s > best {
                    best = s;
                    arg = from;
                    found = true;
                }
            }
            if found {
                next[y] = best + emissions.at(i, y) + cost(i, y);
                back[i][y] = arg;
            }
        }
        delta = next;
    }
    let mut best = ninf;
    let mut last = 0;
    let mut found = false;
    for y in 0..k {
        if delta[y] == ninf {
            continue;
        }
        let s = delta[y] + params.end[y];
        if !found || s > best {
            best = s;
            last = y;
            found = true;
        }
    }
    if !found {
        return Err(Error::invalid(
            "no feasible label path under the constraint mask",
        ));
    }
    let mut path = vec![0usize; len];
    path[len - 1] = last;
    for i in (1..len).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok((path, best))
}

/// Structured hinge loss `max_y [score(y) + hamming(y, gold)] - score(gold)`
/// with its subgradient.
pub fn margin_loss_with_grad<F: Real>(
    emissions: &Tensor<F>,
    tags: &[usize],
    params: &CrfParams<F>,
) -> Result<(F, CrfGrads<F>)> {
    let (len, k) = check_inputs(emissions, params)?;
    check_tags(tags, len, k)?;
    let (pred, augmented) = viterbi_with_cost(emissions, params, None, Some(tags))?;
    let gold = path_score(emissions, tags, params)?;
    let loss = (augmented - gold).max(F::zero());
    let mut g = CrfGrads::zeros(len, k);
    if loss > F::zero() {
        g.add_path(&pred, F::one());
        g.add_path(tags, -F::one());
    }
    Ok((loss, g))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrfLoss {
    #[default]
    Nll,
    MaxMargin,
}

struct CrfLossOp<F: Real> {
    grads: CrfGrads<F>,
}

impl<F: Real> CustomOp<F> for CrfLossOp<F> {
    fn name(&self) -> &'static str {
        "crf_loss"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>> {
        let s = grad_out.item();
        let scale = |t: &Tensor<F>| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|x| *x *= s);
            t
        };
        let k = self.grads.start.len();
        let vec_t =
            |v: &[F]| Tensor::new(vec![k], v.iter().map(|&x| x * s).collect()).expect("crf vec");
        vec![
            Some(scale(&self.grads.emissions)),
            Some(scale(&self.grads.transitions)),
            Some(vec_t(&self.grads.start)),
            Some(vec_t(&self.grads.end)),
        ]
    }
}

/// Graph node for the CRF training loss of one sequence. `start` and `end`
/// are rank-1 tensors of length `labels`.
pub fn crf_loss_node<F: Real>(
    g: &mut Graph<F>,
    emissions: Var,
    transitions: Var,
    start: Var,
    end: Var,
    tags: &[usize],
    kind: CrfLoss,
) -> Result<Var> {
    let params = CrfParams::new(
        g.value(transitions).clone(),
        g.value(start).data().to_vec(),
        g.value(end).data().to_vec(),
    )?;
    let em = g.value(emissions);
    let (loss, grads) = match kind {
        CrfLoss::Nll => nll_with_grad(em, tags, &params)?,
        CrfLoss::MaxMargin => margin_loss_with_grad(em, tags, &params)?,
    };
    Ok(g.custom(
        &[emissions, transitions, start, end],
        Tensor::scalar(loss),
        Box::new(CrfLossOp { grads }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn path_score_single_position() {
        let p = CrfParams::<f64>::zeros(3);
        let s = path_score(&em(&[vec![1.0, 2.0, 3.0]]), &[2], &p).unwrap();
        assert_eq!(s, 3.0);
    }

    #[test]
    fn path_score_two_positions() {
        let mut p = CrfParams::<f64>::zeros(2);
        p.transitions = Tensor::new(vec![2, 2], vec![0.3, -1.7, 0.25, 0.9]).unwrap();
        let e = em(&[vec![0.41, -0.2], vec![1.3, 0.77]]);
        let s = path_score(&e, &[0, 1], &p).unwrap();
        assert!((s - (0.41 - 1.7 + 0.77)).abs() < 1e-12);
    }

    #[test]
    fn path_score_all_zero() {
        let p = CrfParams::<f64>::zeros(3);
        let e = Tensor::zeros(vec![4, 3]);
        assert_eq!(path_score(&e, &[0, 1, 2, 0], &p).unwrap(), 0.0);
    }

    #[test]
    fn path_score_rejects_bad_label() {
        let p = CrfParams::<f64>::zeros(3);
        assert!(path_score(&em(&[vec![0.0; 3]]), &[3], &p).is_err());
    }

    #[test]
    fn log_partition_length_one() {
        let p = CrfParams::<f64>::zeros(2);
        let z = log_partition(&em(&[vec![1.0, 2.0]]), &p).unwrap();
        assert!((z - 2.313_261_687_518_223).abs() < 1e-12);
    }

    #[test]
    fn nll_uniform_three_labels() {
        let p = CrfParams::<f64>::zeros(3);
        let v = nll(&em(&[vec![0.0; 3]]), &[1], &p, None).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_peaked_gold_goes_to_zero() {
        let p = CrfParams::<f64>::zeros(3);
        let gold = [1, 2, 2, 0];
        let rows: Vec<Vec<f64>> = gold
            .iter()
            .map(|&t| (0..3).map(|y| if y == t { 20.0 } else { 0.0 }).collect())
            .collect();
        let v = nll(&em(&rows), &gold, &p, None).unwrap();
        assert!((0.0..=0.01).contains(&v), "nll {v}");
    }

    #[test]
    fn nll_mask_violation_is_error() {
        let p = CrfParams::<f64>::zeros(3);
        let e = Tensor::zeros(vec![2, 3]);
        let mask = ConstraintMask::bio();
        assert!(nll(&e, &[TAG_O, TAG_I], &p, Some(&mask)).is_err());
        assert!(nll(&e, &[TAG_B, TAG_I], &p, Some(&mask)).is_ok());
    }

    #[test]
    fn viterbi_zero_transitions_is_argmax() {
        let p = CrfParams::<f64>::zeros(3);
        let e = em(&[
            vec![0.1, 0.5, 0.2],
            vec![0.9, 0.0, 0.3],
            vec![-1.0, -2.0, 4.0],
        ]);
        let (path, _) = viterbi(&e, &p, None).unwrap();
        assert_eq!(path, vec![1, 0, 2]);
    }

    #[test]
    fn viterbi_bio_mask_blocks_o_then_i() {
        let p = CrfParams::<f64>::zeros(3);
        // unconstrained argmax would be O I I
        let e = em(&[
            vec![1.0, 0.0, 0.5],
            vec![0.0, 0.2, 1.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let (path, _) = viterbi(&e, &p, Some(&ConstraintMask::bio())).unwrap();
        assert!(ConstraintMask::bio().accepts(&path));
        assert!(!path.windows(2).any(|w| w == [TAG_O, TAG_I]));
    }

    #[test]
    fn infeasible_mask_rejected() {
        let r = ConstraintMask::new(2, vec![false, true, false, false], vec![true, false]);
        assert!(r.is_err());
        assert!(ConstraintMask::new(2, vec![true; 4], vec![true, true]).is_ok());
    }

    #[test]
    fn margin_loss_zero_when_gold_dominates() {
        let p = CrfParams::<f64>::zeros(2);
        let e = em(&[vec![5.0, 0.0], vec![0.0, 5.0]]);
        let (l, _) = margin_loss_with_grad(&e, &[0, 1], &p).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = margin_loss_with_grad(&e, &[1, 0], &p).unwrap();
        assert!((l - 12.0).abs() < 1e-12);
    }
}
