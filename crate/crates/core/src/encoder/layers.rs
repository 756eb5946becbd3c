use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};

/// Affine map `x W + b`, `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / input as f64).sqrt();
        let w = store.normal(format!("{name}.weight"), &[input, output], std, rng);
        let b = store.zeros(format!("{name}.bias"), &[output]);
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, vars[self.w])?;
        g.add_row(y, vars[self.b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.gamma"), &[dim]),
            beta: store.zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vars: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, vars[self.gamma], vars[self.beta], F::of(LN_EPS))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropouts {
    pub hidden: f64,
    pub attention: f64,
}

/// Pre-norm transformer block with multi-head self-attention and a GELU
/// feed-forward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    heads: usize,
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        hidden: usize,
        heads: usize,
        intermediate: usize,
        rng: &mut R,
    ) -> Self {
        Block {
            heads,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), hidden),
            query: Linear::new(store, &format!("{name}.attn.query"), hidden, hidden, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), hidden, hidden, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), hidden, hidden, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), hidden, hidden, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), hidden),
            ff_in: Linear::new(store, &format!("{name}.ff.in"), hidden, intermediate, rng),
            ff_out: Linear::new(store, &format!("{name}.ff.out"), intermediate, hidden, rng),
        }
    }

    /// `key_bias` is a constant `[L, L]` tensor holding `0` for visible keys
    /// and `-inf` for masked ones.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        x: Var,
        key_bias: Var,
        drop: Dropouts,
    ) -> Result<Var> {
        let hidden = g.shape(x)[1];
        let dh = hidden / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let h = self.ln_attn.forward(g, vars, x)?;
        let q = self.query.forward(g, vars, h)?;
        let k = self.key.forward(g, vars, h)?;
        let v = self.value.forward(g, vars, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let (a, b) = (i * dh, (i + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, key_bias)?;
            let probs = g.softmax(scores)?;
            let probs = g.dropout(probs, drop.attention);
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn = self.out.forward(g, vars, merged)?;
        let attn = g.dropout(attn, drop.hidden);
        let x = g.add(x, attn)?;

        let h = self.ln_ff.forward(g, vars, x)?;
        let h = self.ff_in.forward(g, vars, h)?;
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, vars, h)?;
        let h = g.dropout(h, drop.hidden);
        g.add(x, h)
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    blocks: Vec<Block>,
    ln_final: LayerNorm,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        layers: usize,
        hidden: usize,
        heads: usize,
        intermediate: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("{name}.layer{i}"),
                    hidden,
                    heads,
                    intermediate,
                    rng,
                )
            })
            .collect();
        Stack {
            blocks,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), hidden),
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        x: Var,
        key_mask: &[bool],
        drop: Dropouts,
    ) -> Result<Var> {
        let len = g.shape(x)[0];
        if key_mask.len() != len {
            return Err(Error::shape(format!(
                "mask of {} for {len} positions",
                key_mask.len()
            )));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::invalid("attention mask hides every position"));
        }
        let bias = g.constant(key_bias::<F>(key_mask));
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, vars, h, bias, drop)?;
        }
        self.ln_final.forward(g, vars, h)
    }
}

/// `[L, L]` additive attention bias: column `j` is `-inf` when `mask[j]` is
/// false.
pub fn key_bias<F: Real>(mask: &[bool]) -> Tensor<F> {
    let len = mask.len();
    let row: Vec<F> = mask
        .iter()
        .map(|&m| if m { F::zero() } else { F::neg_infinity() })
        .collect();
    let data = (0..len).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![len, len], data).expect("square")
}
