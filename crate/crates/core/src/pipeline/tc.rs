//! Technique classification of given spans, with a `[BOS]` head over
//! marker-injected input or a Span CLS head.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ensemble::{argmax, ProbTable};
use super::si::{
    annotate_si, encoder_config, train_si, vocab_for, vocab_from_meta, SiModel, SiRun,
};
use super::{
    fit, sub_seed, HasParams, HyperParams, Mix, ModelSize, SelfTrainOverwrite, TcOptions,
    TrainReport, STREAM_INIT,
};
use crate::encoder::{
    marker_cls, Checkpoint, Encoder, EncoderConfig, Linear, SpanCls, SpanClsConfig,
};
use crate::error::{Error, Result};
use crate::losses::{class_weights, reweighted_bce_node, ClassWeights};
use crate::metrics::micro_f1;
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::spandata::{
    extend_context, inject_markers, tokenize, Dataset, Span, TokenizedText, Vocab, BOS, EOS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TcHead {
    Marker,
    SpanCls(SpanClsConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcConfig {
    pub encoder: EncoderConfig,
    pub head: TcHead,
    pub techniques: Vec<String>,
}

#[derive(Clone, Debug)]
enum Head {
    Marker(Linear),
    SpanCls(SpanCls),
}

#[derive(Clone, Debug)]
pub struct TcModel {
    pub config: TcConfig,
    pub vocab: Vocab,
    pub params: ParamStore<f32>,
    encoder: Encoder,
    head: Head,
}

impl HasParams for TcModel {
    fn store(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
}

/// Model input for one span: token ids of the context window with special
/// tokens, and the span's positions within them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TcExample {
    pub ids: Vec<usize>,
    pub span: Range<usize>,
    pub label: Option<usize>,
}

impl TcModel {
    pub fn new(config: TcConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::invalid(
                "config vocabulary size differs from the vocabulary",
            ));
        }
        if config.techniques.is_empty() {
            return Err(Error::invalid("empty technique inventory"));
        }
        let d = config.techniques.len();
        let hidden = config.encoder.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_INIT));
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, config.encoder.clone(), &mut rng)?;
        let head = match &config.head {
            TcHead::Marker => {
                Head::Marker(Linear::new(&mut params, "tc.head", hidden, d, &mut rng))
            }
            TcHead::SpanCls(sc) => {
                Head::SpanCls(SpanCls::new(&mut params, sc.clone(), hidden, d, &mut rng)?)
            }
        };
        Ok(TcModel {
            config,
            vocab,
            params,
            encoder,
            head,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.config.techniques.len()
    }

    pub fn span_cls(&self) -> bool {
        matches!(self.config.head, TcHead::SpanCls(_))
    }

    fn logits(&self, g: &mut Graph<f32>, vars: &[Var], ex: &TcExample) -> Result<Var> {
        let hidden = self
            .encoder
            .encode(g, vars, &ex.ids, &vec![true; ex.ids.len()])?;
        match &self.head {
            Head::Marker(lin) => marker_cls(g, vars, lin, hidden),
            Head::SpanCls(sc) => {
                let idx: Vec<usize> = ex.span.clone().collect();
                sc.forward(g, vars, hidden, &idx, self.config.encoder.dropouts())
            }
        }
    }

    fn loss(
        &self,
        g: &mut Graph<f32>,
        vars: &[Var],
        ex: &TcExample,
        w: &ClassWeights,
    ) -> Result<Var> {
        let label = ex
            .label
            .ok_or_else(|| Error::invalid("training example without a label"))?;
        let logits = self.logits(g, vars, ex)?;
        let probs = g.sigmoid(logits);
        let mut target = vec![0.0; self.num_labels()];
        target[label] = 1.0;
        let target = g.constant(Tensor::new(vec![1, self.num_labels()], target)?);
        reweighted_bce_node(g, probs, target, w)
    }

    /// Per-class sigmoid probabilities.
    pub fn probs(&self, ex: &TcExample) -> Result<Vec<f64>> {
        let mut g = Graph::eval();
        let vars = self.params.bind_frozen(&mut g);
        let logits = self.logits(&mut g, &vars, ex)?;
        let p = g.sigmoid(logits);
        Ok(g.value(p).data().iter().map(|&v| v as f64).collect())
    }

    pub fn predict_table(&self, examples: &[TcExample]) -> Result<ProbTable> {
        examples.par_iter().map(|ex| self.probs(ex)).collect()
    }

    /// Probabilities for every span of `ds`, in span order.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<ProbTable> {
        let ex = tc_examples(
            ds,
            &self.vocab,
            self.span_cls(),
            self.config.encoder.max_positions,
            false,
        )?;
        self.predict_table(&ex)
    }

    pub fn to_checkpoint(&self, report: Option<&TrainReport>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "tc".into(),
            config: serde_json::to_value(&self.config)?,
            meta: json!({ "vocab": self.vocab.tokens(), "report": report }),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "tc" {
            return Err(Error::Checkpoint(format!(
                "expected a tc checkpoint, found {}",
                ckpt.kind
            )));
        }
        let config: TcConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = TcModel::new(config, vocab_from_meta(&ckpt.meta)?, 0)?;
        model.params.load_from(&ckpt.params)?;
        Ok(model)
    }
}

fn example(
    tt: &TokenizedText,
    ids: &[usize],
    span: &Span,
    span_cls: bool,
    max_len: usize,
) -> Result<TcExample> {
    let toks = tt.tokens_overlapping(span.start, span.end);
    if toks.is_empty() {
        return Err(Error::invalid(format!(
            "span {}:{}-{} covers no token",
            span.article_id, span.start, span.end
        )));
    }
    let specials = if span_cls { 2 } else { 4 };
    let win = extend_context(tt.len(), toks.clone(), max_len - specials, true)?;
    let window = &ids[win.clone()];
    let rel = toks.start - win.start..toks.end.min(win.end) - win.start;
    let (ids, positions) = if span_cls {
        let mut seq = Vec::with_capacity(window.len() + 2);
        seq.push(BOS);
        seq.extend_from_slice(window);
        seq.push(EOS);
        (seq, rel.start + 1..rel.end + 1)
    } else {
        (
            inject_markers(window, rel.clone(), None)?,
            rel.start + 2..rel.end + 2,
        )
    };
    Ok(TcExample {
        ids,
        span: positions,
        label: span.technique,
    })
}

/// One example per span of `ds`, in span order. With `require_labels`,
/// each span must carry a technique from the inventory.
pub fn tc_examples(
    ds: &Dataset,
    vocab: &Vocab,
    span_cls: bool,
    max_len: usize,
    require_labels: bool,
) -> Result<Vec<TcExample>> {
    let mut cache: BTreeMap<&str, (TokenizedText, Vec<usize>)> = BTreeMap::new();
    let mut out = Vec::with_capacity(ds.spans.len());
    for s in &ds.spans {
        if require_labels {
            match s.technique {
                Some(t) if t < ds.techniques.len() => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "span {}:{}-{} has no known technique",
                        s.article_id, s.start, s.end
                    )))
                }
            }
        }
        if !cache.contains_key(s.article_id.as_str()) {
            let text = ds.articles.get(&s.article_id).ok_or_else(|| {
                Error::invalid(format!("span refers to unknown article {}", s.article_id))
            })?;
            let tt = tokenize(text);
            let ids = vocab.encode(&tt);
            cache.insert(s.article_id.as_str(), (tt, ids));
        }
        let (tt, ids) = &cache[s.article_id.as_str()];
        out.push(example(tt, ids, s, span_cls, max_len)?);
    }
    Ok(out)
}

/// Micro-F1 of argmax predictions over labeled examples.
pub fn evaluate_tc(model: &TcModel, examples: &[TcExample]) -> Result<f64> {
    let table = model.predict_table(examples)?;
    let pred: Vec<usize> = table.iter().map(|p| argmax(p)).collect();
    let gold: Vec<usize> = examples
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::invalid("evaluation example without a label"))
        })
        .collect::<Result<_>>()?;
    micro_f1(&pred, &gold)
}

#[derive(Clone, Debug)]
pub struct TcRun {
    pub model: TcModel,
    pub report: TrainReport,
}

/// Trains one classifier. Silver spans are appended to the gold ones when
/// `opts.self_train` is set, and must then be supplied.
#[allow(clippy::too_many_arguments)]
pub fn train_tc(
    train: &Dataset,
    silver: Option<&Dataset>,
    dev: &Dataset,
    opts: TcOptions,
    size: &ModelSize,
    span_cfg: &SpanClsConfig,
    hp: &HyperParams,
    seed: u64,
) -> Result<TcRun> {
    hp.validate()?;
    train.validate()?;
    if train.spans.is_empty() {
        return Err(Error::invalid("empty TC training set"));
    }
    let silver = match (opts.self_train, silver) {
        (true, Some(s)) => Some(s),
        (true, None) => return Err(Error::invalid("self-training option needs a silver set")),
        (false, _) => None,
    };
    if let Some(s) = silver {
        if s.techniques != train.techniques {
            return Err(Error::invalid(
                "silver technique inventory differs from gold",
            ));
        }
    }
    let vocab = vocab_for(
        train
            .articles
            .values()
            .chain(silver.iter().flat_map(|s| s.articles.values())),
    );
    let weights = if opts.reweight {
        class_weights(&train.technique_counts())?
    } else {
        ClassWeights::uniform(train.techniques.len())
    };
    let config = TcConfig {
        encoder: encoder_config(&vocab, size, hp),
        head: if opts.span_cls {
            TcHead::SpanCls(span_cfg.clone())
        } else {
            TcHead::Marker
        },
        techniques: train.techniques.clone(),
    };
    let mut model = TcModel::new(config, vocab, seed)?;
    let gold_ex = tc_examples(train, &model.vocab, opts.span_cls, hp.max_seq_len, true)?;
    let silver_ex = match silver {
        Some(s) => tc_examples(s, &model.vocab, opts.span_cls, hp.max_seq_len, true)?,
        None => Vec::new(),
    };
    let dev_ex = tc_examples(dev, &model.vocab, opts.span_cls, hp.max_seq_len, true)?;
    let report = fit(
        &mut model,
        &gold_ex,
        &silver_ex,
        Mix::Append,
        hp,
        seed,
        |m, g, vars, ex| m.loss(g, vars, ex, &weights),
        |m| evaluate_tc(m, &dev_ex),
    )?;
    Ok(TcRun { model, report })
}

/// Silver TC set: spans found by `si` in the pool, labeled by `tc`.
pub fn build_tc_silver(
    si: &SiModel,
    tc: &TcModel,
    pool: &BTreeMap<String, String>,
) -> Result<Dataset> {
    let mut found = annotate_si(si, pool)?;
    found.techniques = tc.config.techniques.clone();
    let table = tc.predict_dataset(&found)?;
    for (s, p) in found.spans.iter_mut().zip(&table) {
        s.technique = Some(argmax(p));
    }
    let keep: std::collections::BTreeSet<&str> =
        found.spans.iter().map(|s| s.article_id.as_str()).collect();
    let articles = found
        .articles
        .iter()
        .filter(|(k, _)| keep.contains(k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(Dataset {
        articles,
        spans: found.spans.clone(),
        techniques: found.techniques.clone(),
    })
}

/// The full self-training recipe for one TC model: an SI annotator and a
/// gold-only classifier with the same options label the pool, then a fresh
/// classifier trains on gold plus silver. `overwrite` covers that whole
/// final run.
pub struct TcSelfRun {
    pub annotator: SiRun,
    pub labeler: TcRun,
    pub silver: Dataset,
    pub run: TcRun,
}

#[allow(clippy::too_many_arguments)]
pub fn train_tc_self(
    train: &Dataset,
    dev: &Dataset,
    pool: &BTreeMap<String, String>,
    opts: TcOptions,
    size: &ModelSize,
    span_cfg: &SpanClsConfig,
    hp_si: &HyperParams,
    hp_tc: &HyperParams,
    overwrite: Option<&SelfTrainOverwrite>,
    seed: u64,
) -> Result<TcSelfRun> {
    let annotator = train_si(train, None, dev, size, hp_si, true, seed)?;
    let gold_opts = TcOptions {
        self_train: false,
        ..opts
    };
    let labeler = train_tc(train, None, dev, gold_opts, size, span_cfg, hp_tc, seed)?;
    let silver = build_tc_silver(&annotator.model, &labeler.model, pool)?;
    let hp = overwrite.map_or_else(|| hp_tc.clone(), |o| o.apply(hp_tc));
    let opts = TcOptions {
        self_train: true,
        ..opts
    };
    let run = train_tc(train, Some(&silver), dev, opts, size, span_cfg, &hp, seed)?;
    Ok(TcSelfRun {
        annotator,
        labeler,
        silver,
        run,
    })
}
