//! Span identification: encoder, BIO emissions and an optional CRF.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    fit, sub_seed, HasParams, HyperParams, Mix, ModelSize, SelfTrainOverwrite, TrainReport,
    STREAM_INIT, STREAM_POOL,
};
use crate::crf::{crf_loss_node, viterbi, ConstraintMask, CrfLoss, CrfParams, NUM_BIO};
use crate::encoder::{emissions, Checkpoint, Encoder, EncoderConfig, Linear};
use crate::error::{Error, Result};
use crate::metrics::flc_f1;
use crate::numcore::{Graph, ParamStore, Var};
use crate::spandata::{
    spans_to_tags, split_windows, tags_to_spans, tokenize, Dataset, Span, TagSequence, Vocab,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiConfig {
    pub encoder: EncoderConfig,
    pub crf: bool,
}

#[derive(Clone, Debug)]
pub struct SiModel {
    pub config: SiConfig,
    pub vocab: Vocab,
    pub params: ParamStore<f32>,
    encoder: Encoder,
    head: Linear,
    /// Transition, start and end parameter slots.
    crf: Option<[usize; 3]>,
}

impl HasParams for SiModel {
    fn store(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
}

pub(crate) struct SiExample {
    ids: Vec<usize>,
    tags: Vec<usize>,
}

pub(crate) fn vocab_for<'a>(texts: impl IntoIterator<Item = &'a String>) -> Vocab {
    let toks: Vec<String> = texts
        .into_iter()
        .flat_map(|t| tokenize(t).tokens.into_iter().map(|tok| tok.surface))
        .collect();
    Vocab::build(toks.iter().map(String::as_str))
}

pub(crate) fn encoder_config(vocab: &Vocab, size: &ModelSize, hp: &HyperParams) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        hidden: size.hidden,
        layers: size.layers,
        heads: size.heads,
        intermediate: size.intermediate,
        max_positions: hp.max_seq_len,
        dropout: hp.dropout,
        attention_dropout: hp.attention_dropout,
    }
}

impl SiModel {
    pub fn new(config: SiConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "config vocabulary of {} entries, vocabulary has {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_INIT));
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, config.encoder.clone(), &mut rng)?;
        let head = Linear::new(
            &mut params,
            "si.emissions",
            config.encoder.hidden,
            NUM_BIO,
            &mut rng,
        );
        let crf = config.crf.then(|| {
            [
                params.zeros("crf.transitions", &[NUM_BIO, NUM_BIO]),
                params.zeros("crf.start", &[NUM_BIO]),
                params.zeros("crf.end", &[NUM_BIO]),
            ]
        });
        Ok(SiModel {
            config,
            vocab,
            params,
            encoder,
            head,
            crf,
        })
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_positions
    }

    fn scores(&self, g: &mut Graph<f32>, vars: &[Var], ids: &[usize]) -> Result<Var> {
        let hidden = self.encoder.encode(g, vars, ids, &vec![true; ids.len()])?;
        emissions(g, vars, &self.head, hidden)
    }

    fn loss(&self, g: &mut Graph<f32>, vars: &[Var], ex: &SiExample, kind: CrfLoss) -> Result<Var> {
        let em = self.scores(g, vars, &ex.ids)?;
        match self.crf {
            Some([t, s, e]) => {
                let l = crf_loss_node(g, em, vars[t], vars[s], vars[e], &ex.tags, kind)?;
                Ok(g.scale(l, 1.0 / ex.ids.len() as f32))
            }
            None => g.softmax_cross_entropy(em, &ex.tags),
        }
    }

    /// Best BIO tag ids for one window: constrained Viterbi with the CRF,
    /// per-token argmax without.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let mut g = Graph::eval();
        let vars = self.params.bind_frozen(&mut g);
        let em = self.scores(&mut g, &vars, ids)?;
        let em = g.value(em).clone();
        match self.crf {
            Some([t, s, e]) => {
                let p = CrfParams::new(
                    self.params.get(t).clone(),
                    self.params.get(s).data().to_vec(),
                    self.params.get(e).data().to_vec(),
                )?;
                Ok(viterbi(&em, &p, Some(&ConstraintMask::bio()))?.0)
            }
            None => Ok((0..em.rows())
                .map(|r| {
                    let row = em.row(r);
                    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect()),
        }
    }

    pub fn to_checkpoint(&self, report: Option<&TrainReport>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "si".into(),
            config: serde_json::to_value(&self.config)?,
            meta: json!({ "vocab": self.vocab.tokens(), "report": report }),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "si" {
            return Err(Error::Checkpoint(format!(
                "expected an si checkpoint, found {}",
                ckpt.kind
            )));
        }
        let config: SiConfig = serde_json::from_value(ckpt.config.clone())?;
        let vocab = vocab_from_meta(&ckpt.meta)?;
        let mut model = SiModel::new(config, vocab, 0)?;
        model.params.load_from(&ckpt.params)?;
        Ok(model)
    }
}

pub(crate) fn vocab_from_meta(meta: &Value) -> Result<Vocab> {
    let tokens: Vec<String> = serde_json::from_value(
        meta.get("vocab")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks a vocabulary".into()))?,
    )?;
    Ok(Vocab::from_tokens(tokens))
}

fn si_examples(ds: &Dataset, vocab: &Vocab, max_len: usize) -> Result<Vec<SiExample>> {
    let by_article = ds.spans_by_article();
    let mut out = Vec::new();
    for (id, text) in &ds.articles {
        let tt = tokenize(text);
        let spans: Vec<Span> = by_article
            .get(id.as_str())
            .map(|v| v.iter().map(|s| (*s).clone()).collect())
            .unwrap_or_default();
        let tags = spans_to_tags(&tt, &spans)?.ids();
        let ids = vocab.encode(&tt);
        for w in split_windows(&tt, max_len) {
            out.push(SiExample {
                ids: ids[w.clone()].to_vec(),
                tags: tags[w].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Predicted spans over every text, in article order.
pub fn predict_si(model: &SiModel, articles: &BTreeMap<String, String>) -> Result<Vec<Span>> {
    let per: Vec<Result<Vec<Span>>> = articles
        .par_iter()
        .map(|(id, text)| {
            let tt = tokenize(text);
            let ids = model.vocab.encode(&tt);
            let mut tags = Vec::with_capacity(ids.len());
            for w in split_windows(&tt, model.max_len()) {
                tags.extend(model.decode(&ids[w])?);
            }
            tags_to_spans(&tt, &TagSequence::from_ids(&tags)?, id)
        })
        .collect();
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

/// Dev FLC-F1 of the model's predictions (labels ignored).
pub fn evaluate_si(model: &SiModel, dev: &Dataset) -> Result<f64> {
    let pred = predict_si(model, &dev.articles)?;
    Ok(flc_f1(&pred, &dev.spans, false)?.f1)
}

/// Silver set: every pool text with its decoded spans, kept even when no
/// span was found.
pub fn annotate_si(model: &SiModel, pool: &BTreeMap<String, String>) -> Result<Dataset> {
    Ok(Dataset {
        articles: pool.clone(),
        spans: predict_si(model, pool)?,
        techniques: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct SiRun {
    pub model: SiModel,
    pub report: TrainReport,
}

/// Trains a fresh model on `gold`, optionally mixed with silver data.
/// The returned model holds the parameters with the best dev FLC-F1.
pub fn train_si(
    gold: &Dataset,
    silver: Option<(&Dataset, Mix)>,
    dev: &Dataset,
    size: &ModelSize,
    hp: &HyperParams,
    crf: bool,
    seed: u64,
) -> Result<SiRun> {
    hp.validate()?;
    gold.validate()?;
    if gold.is_empty() {
        return Err(Error::invalid("empty SI training set"));
    }
    let vocab = vocab_for(
        gold.articles
            .values()
            .chain(silver.iter().flat_map(|(s, _)| s.articles.values())),
    );
    let config = SiConfig {
        encoder: encoder_config(&vocab, size, hp),
        crf,
    };
    let mut model = SiModel::new(config, vocab, seed)?;
    let gold_ex = si_examples(gold, &model.vocab, hp.max_seq_len)?;
    let (silver_ex, mix) = match silver {
        Some((s, mix)) => (si_examples(s, &model.vocab, hp.max_seq_len)?, mix),
        None => (Vec::new(), Mix::Append),
    };
    let kind = hp.crf_loss;
    let report = fit(
        &mut model,
        &gold_ex,
        &silver_ex,
        mix,
        hp,
        seed,
        |m, g, vars, ex| m.loss(g, vars, ex, kind),
        |m| evaluate_si(m, dev),
    )?;
    Ok(SiRun { model, report })
}

/// Naive self-training. Run 1 is trained on gold alone; run `i > 1` is a
/// fresh model trained on gold plus the previous best model's annotations
/// of a fresh pool partition. `overwrite`, when given, applies from run 3
/// onward.
#[allow(clippy::too_many_arguments)]
pub fn self_train_si(
    gold: &Dataset,
    dev: &Dataset,
    pool: &BTreeMap<String, String>,
    iterations: usize,
    size: &ModelSize,
    hp: &HyperParams,
    overwrite: Option<&SelfTrainOverwrite>,
    ratio: f64,
    crf: bool,
    seed: u64,
) -> Result<Vec<SiRun>> {
    if iterations == 0 {
        return Err(Error::invalid("self-training needs at least one iteration"));
    }
    if !(ratio >= 0.0) {
        return Err(Error::invalid("gold:silver ratio must be non-negative"));
    }
    let parts = iterations - 1;
    let mut ids: Vec<&String> = pool.keys().collect();
    if parts > 0 && ids.len() < parts {
        return Err(Error::invalid(format!(
            "pool of {} texts cannot give {parts} non-empty partitions",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_POOL)));
    let mut runs = vec![train_si(gold, None, dev, size, hp, crf, seed)?];
    for i in 0..parts {
        let lo = ids.len() * i / parts;
        let hi = ids.len() * (i + 1) / parts;
        let part: BTreeMap<String, String> = ids[lo..hi]
            .iter()
            .map(|&k| (k.clone(), pool[k].clone()))
            .collect();
        let silver = annotate_si(&runs[runs.len() - 1].model, &part)?;
        let hp_i = match overwrite {
            Some(o) if i >= 1 => o.apply(hp),
            _ => hp.clone(),
        };
        runs.push(train_si(
            gold,
            Some((&silver, Mix::Ratio(ratio))),
            dev,
            size,
            &hp_i,
            crf,
            seed,
        )?);
    }
    Ok(runs)
}
