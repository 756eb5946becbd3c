//! Reverse-mode differentiation over a per-forward-pass computation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! parameters (gradient tracked) or constants. Every op records enough of its
//! forward state to produce vector-Jacobian products when [`Graph::backward`]
//! walks the node list in reverse.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A fused operation with a hand-written backward pass.
pub trait CustomOp<F: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. Entries may be `None` for inputs that need no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Transpose(Var),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<F: Real> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl<F: Real> Graph<F> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.value(bias).numel() != n {
            return Err(Error::shape(format!(
                "add_row [{m},{n}] + {:?}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], out).expect("transpose"),
            Op::Transpose(a),
            &[a],
        )
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero weight.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row)?;
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm affine size"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = F::of(n as f64);
        let mut out = vec![F::zero(); m * n];
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(&x, &k)| x * k).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x: a, mask }, &[a])
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "id {bad} outside table of {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), n], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims2(p).1)
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.dims2(p);
            if c != n {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("row {bad} outside {m} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start >= end || end > n {
            return Err(Error::shape(format!("slice [{start},{end}) of {n} cols")));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        Ok(self.push(
            Tensor::new(vec![m, w], out)?,
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.dims2(p).0)
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        if parts.iter().any(|&p| self.dims2(p).0 != m) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = vec![F::zero(); m * total];
        let mut off = 0;
        for &p in parts {
            let w = self.dims2(p).1;
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum();
        let m = s / F::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy over rows of `logits` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::shape(format!(
                "{} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!("target {bad} outside {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (i, row) in probs.chunks_mut(n).enumerate() {
            softmax_in_place(row)?;
            loss -= row[targets[i]].max(F::min_positive_value()).ln();
        }
        loss = loss / F::of(m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<F>, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    matmul_nt_acc(gout, val(*b), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    matmul_tn_acc(val(*a), gout, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    matmul_acc(gout, val(*b), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, n * k);
                    matmul_tn_acc(gout, val(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, gout.len()), gout);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = slot(grads, *bias, n);
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, gout.len());
                    for ((g, &go), &y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += go * y;
                    }
                }
                if self.wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, gout.len());
                    for ((g, &go), &x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += go * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, gout.len());
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go * *c;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gout[j * m + i];
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                let ga = slot(grads, *a, gout.len());
                for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                    let dot: F = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((g, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *g += p * (d - dot);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let ga = slot(grads, *a, gout.len());
                for ((g, &go), &xv) in ga.iter_mut().zip(gout).zip(x) {
                    *g += go * gelu_grad(xv);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, gout.len());
                for ((g, &go), &s) in ga.iter_mut().zip(gout).zip(y) {
                    *g += go * s * (F::one() - s);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gv = val(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gout[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, n);
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if self.wants(*x) {
                    let nf = F::of(n as f64);
                    let gx = slot(grads, *x, m * n);
                    let mut dxhat = vec![F::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dxhat[j] = gout[i * n + j] * gv[j];
                        }
                        let h = &xhat[i * n..(i + 1) * n];
                        let sum_d: F = dxhat.iter().copied().sum();
                        let sum_dh: F = dxhat.iter().zip(h).map(|(&d, &hv)| d * hv).sum();
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] / nf * (nf * dxhat[j] - sum_d - h[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, gout.len());
                for ((g, &go), &k) in gx.iter_mut().zip(gout).zip(mask) {
                    *g += go * k;
                }
            }
            Op::Gather { table, ids } => {
                let (v, n) = self.dims2(*table);
                let gt = slot(grads, *table, v * n);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * n..(id + 1) * n], &gout[r * n..(r + 1) * n]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        add_into(slot(grads, p, len), &gout[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SelectRows { x, idx } => {
                let (m, n) = self.dims2(*x);
                let gx = slot(grads, *x, m * n);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * n..(i + 1) * n], &gout[r * n..(r + 1) * n]);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x);
                let w = node.value.cols();
                let gx = slot(grads, *x, m * n);
                for i in 0..m {
                    add_into(
                        &mut gx[i * n + start..i * n + start + w],
                        &gout[i * w..(i + 1) * w],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    if self.wants(p) {
                        let gp = slot(grads, p, m * w);
                        for i in 0..m {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &gout[i * total + off..i * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let d = gout[0] / F::of(n as f64);
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|g| *g += d);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims2(*logits);
                let scale = gout[0] / F::of(m as f64);
                let gl = slot(grads, *logits, m * n);
                for i in 0..m {
                    for j in 0..n {
                        let ind = if targets[i] == j { F::one() } else { F::zero() };
                        gl[i * n + j] += scale * (probs[i * n + j] - ind);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gout_t =
                    Tensor::new(node.value.shape().to_vec(), gout.to_vec()).expect("grad shape");
                let gs = op.backward(&ins, &node.value, &gout_t);
                for (v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if self.wants(*v) {
                            add_into(slot(grads, *v, g.numel()), g.data());
                        }
                    }
                }
            }
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) -> Result<()> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return Err(Error::invalid("softmax row fully masked"));
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
