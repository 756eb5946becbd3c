//! Small transformer encoder standing in for a pretrained host model, and the
//! three heads built on it: BIO emissions for span tagging, `[BOS]`
//! classification over marker-injected input, and Span CLS.

mod checkpoint;
mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorEntry, MAGIC};
pub use layers::{key_bias, Block, Dropouts, LayerNorm, Linear, Stack};

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1000,
            hidden: 64,
            layers: 2,
            heads: 4,
            intermediate: 256,
            max_positions: 256,
            dropout: 0.1,
            attention_dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.intermediate == 0 {
            return Err(Error::invalid("zero-sized encoder dimension"));
        }
        Ok(())
    }

    pub fn dropouts(&self) -> Dropouts {
        Dropouts {
            hidden: self.dropout,
            attention: self.attention_dropout,
        }
    }
}

/// Stacked transformer for Span CLS; hidden size comes from the host.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanClsConfig {
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
}

impl Default for SpanClsConfig {
    fn default() -> Self {
        SpanClsConfig {
            layers: 3,
            heads: 4,
            intermediate: 512,
        }
    }
}

/// Token plus learned positional embeddings feeding a pre-norm stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok_emb: usize,
    pos_emb: usize,
    stack: Stack,
}

impl Encoder {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let tok_emb = store.normal(
            "encoder.tok_emb",
            &[config.vocab_size, config.hidden],
            0.02,
            rng,
        );
        let pos_emb = store.normal(
            "encoder.pos_emb",
            &[config.max_positions, config.hidden],
            0.02,
            rng,
        );
        let stack = Stack::new(
            store,
            "encoder",
            config.layers,
            config.hidden,
            config.heads,
            config.intermediate,
            rng,
        );
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            stack,
        })
    }

    /// Hidden states `[L, hidden]`. Positions with `mask == false` are never
    /// attended to.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        ids: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        if ids.len() > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds {} positions",
                ids.len(),
                self.config.max_positions
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if mask.len() != ids.len() {
            return Err(Error::shape("mask length differs from ids"));
        }
        let tok = g.gather(vars[self.tok_emb], ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather(vars[self.pos_emb], &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.dropout(x, self.config.dropout);
        self.stack.forward(g, vars, x, mask, self.config.dropouts())
    }
}

/// Per-token label scores `[L, labels]`.
pub fn emissions<F: Real>(
    g: &mut Graph<F>,
    vars: &[Var],
    head: &Linear,
    hidden: Var,
) -> Result<Var> {
    head.forward(g, vars, hidden)
}

/// Class logits from the `[BOS]` (position 0) representation.
pub fn marker_cls<F: Real>(
    g: &mut Graph<F>,
    vars: &[Var],
    head: &Linear,
    hidden: Var,
) -> Result<Var> {
    let bos = g.select_rows(hidden, &[0])?;
    head.forward(g, vars, bos)
}

/// Small transformer run over a learned `[BOS]` vector followed by the host
/// representations of the span tokens. It adds no positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanCls {
    pub config: SpanClsConfig,
    bos: usize,
    stack: Stack,
    head: Linear,
}

impl SpanCls {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        config: SpanClsConfig,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || !hidden.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!(
                "host hidden size {hidden} not divisible by {} span heads",
                config.heads
            )));
        }
        let bos = store.normal("span_cls.bos", &[1, hidden], 0.02, rng);
        let stack = Stack::new(
            store,
            "span_cls",
            config.layers,
            hidden,
            config.heads,
            config.intermediate,
            rng,
        );
        let head = Linear::new(store, "span_cls.head", hidden, classes, rng);
        Ok(SpanCls {
            config,
            bos,
            stack,
            head,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        hidden: Var,
        span: &[usize],
        drop: Dropouts,
    ) -> Result<Var> {
        if span.is_empty() {
            return Err(Error::invalid("Span CLS over an empty span"));
        }
        let picked = g.select_rows(hidden, span)?;
        let seq = g.concat_rows(&[vars[self.bos], picked])?;
        let mask = vec![true; span.len() + 1];
        let out = self.stack.forward(g, vars, seq, &mask, drop)?;
        let bos = g.select_rows(out, &[0])?;
        self.head.forward(g, vars, bos)
    }

    /// Reference formulation: the same layers over `[BOS]` plus the whole
    /// host sequence, with attention restricted to `[BOS]` and the span.
    pub fn forward_masked<F: Real>(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        hidden: Var,
        span: &[usize],
        drop: Dropouts,
    ) -> Result<Var> {
        if span.is_empty() {
            return Err(Error::invalid("Span CLS over an empty span"));
        }
        let len = g.shape(hidden)[0];
        let seq = g.concat_rows(&[vars[self.bos], hidden])?;
        let mut mask = vec![false; len + 1];
        mask[0] = true;
        for &i in span {
            if i >= len {
                return Err(Error::invalid(format!(
                    "span index {i} outside {len} tokens"
                )));
            }
            mask[i + 1] = true;
        }
        let out = self.stack.forward(g, vars, seq, &mask, drop)?;
        let bos = g.select_rows(out, &[0])?;
        self.head.forward(g, vars, bos)
    }
}
