//! Training loops, self-training, ensembling and cross-validation.

mod ensemble;
mod si;
mod tc;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use ensemble::{
    argmax, average_probs, ensemble_predict, enumerate_ensembles, mean_std, EnsembleResult,
    ProbTable,
};
pub use si::{
    annotate_si, evaluate_si, predict_si, self_train_si, train_si, SiConfig, SiModel, SiRun,
};
pub use tc::{
    build_tc_silver, evaluate_tc, tc_examples, train_tc, train_tc_self, TcConfig, TcExample,
    TcHead, TcModel, TcRun, TcSelfRun,
};

use crate::crf::CrfLoss;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Mode, OptimKind, OptimState, ParamStore, Tensor, Var};
use crate::spandata::{Dataset, Span};

/// Training hyperparameters shared by both tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub dropout: f64,
    pub attention_dropout: f64,
    pub max_seq_len: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: OptimKind,
    pub crf_loss: CrfLoss,
    /// Evaluate on dev every this many optimizer steps.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
}

impl HyperParams {
    /// Desk-scale SI defaults: from-scratch models need a larger step size
    /// than fine-tuning does.
    pub fn si_desk() -> Self {
        HyperParams {
            dropout: 0.1,
            attention_dropout: 0.1,
            max_seq_len: 256,
            batch: 8,
            lr: 0.05,
            steps: 2000,
            momentum: 0.9,
            weight_decay: 0.0,
            optimizer: OptimKind::Sgd,
            crf_loss: CrfLoss::Nll,
            eval_every: 200,
            patience: 5,
        }
    }

    /// Desk-scale TC defaults. A from-scratch encoder cannot locate the
    /// marked span in a 256-token window, so the context is kept short.
    pub fn tc_desk() -> Self {
        HyperParams {
            max_seq_len: 32,
            batch: 16,
            lr: 1e-3,
            steps: 1000,
            momentum: 0.0,
            weight_decay: 0.01,
            optimizer: OptimKind::AdamW,
            eval_every: 100,
            ..Self::si_desk()
        }
    }

    pub fn si_paper() -> Self {
        HyperParams {
            lr: 5e-4,
            steps: 60_000,
            eval_every: 2000,
            ..Self::si_desk()
        }
    }

    pub fn tc_paper() -> Self {
        HyperParams {
            lr: 2e-5,
            steps: 20_000,
            eval_every: 2000,
            max_seq_len: 256,
            ..Self::tc_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.eval_every == 0 || self.max_seq_len < 8 {
            return Err(Error::invalid(
                "learning rate, batch and eval interval must be positive and max_seq_len at least 8",
            ));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimState<f32> {
        match self.optimizer {
            OptimKind::Sgd => OptimState::sgd(self.lr, self.momentum),
            OptimKind::AdamW => OptimState::adamw(self.lr, self.weight_decay),
        }
    }
}

/// Hyperparameter overwrites for later self-training rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainOverwrite {
    pub dropout: f64,
    pub attention_dropout: f64,
    pub batch: usize,
}

impl Default for SelfTrainOverwrite {
    fn default() -> Self {
        SelfTrainOverwrite {
            dropout: 0.0,
            attention_dropout: 0.0,
            batch: 16,
        }
    }
}

impl SelfTrainOverwrite {
    pub fn apply(&self, hp: &HyperParams) -> HyperParams {
        HyperParams {
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            batch: self.batch,
            ..hp.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcOptions {
    pub reweight: bool,
    pub span_cls: bool,
    pub self_train: bool,
}

/// Encoder dimensions independent of vocabulary and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSize {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        ModelSize {
            hidden: 64,
            layers: 2,
            heads: 4,
            intermediate: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub hp: HyperParams,
    pub trace: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_score: f64,
    pub steps_run: usize,
}

/// How silver examples join the gold ones in each batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mix {
    /// Each example is silver with probability `r / (1 + r)`, i.e. gold to
    /// silver `1 : r` in expectation.
    Ratio(f64),
    /// Silver appended to gold and sampled uniformly from the union.
    Append,
}

/// Independent seed for a numbered sub-stream of `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_BATCHES: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;
pub(crate) const STREAM_POOL: u64 = 4;

pub(crate) trait HasParams {
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
}

/// Mini-batch training with periodic dev evaluation and early stopping.
/// The model ends holding the best evaluated parameters.
pub(crate) fn fit<M: HasParams, E>(
    model: &mut M,
    gold: &[E],
    silver: &[E],
    mix: Mix,
    hp: &HyperParams,
    seed: u64,
    loss: impl Fn(&M, &mut Graph<f32>, &[Var], &E) -> Result<Var>,
    mut eval: impl FnMut(&M) -> Result<f64>,
) -> Result<TrainReport> {
    hp.validate()?;
    if gold.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut report = TrainReport {
        hp: hp.clone(),
        trace: Vec::new(),
        best_step: 0,
        best_score: f64::NEG_INFINITY,
        steps_run: 0,
    };
    if hp.steps == 0 {
        let score = eval(model)?;
        report.trace.push(EvalPoint { step: 0, score });
        report.best_score = score;
        return Ok(report);
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_BATCHES));
    let dropout_seed = sub_seed(seed, STREAM_DROPOUT);
    let mut opt = hp.optimizer();
    let mut best: Option<ParamStore<f32>> = None;
    let mut since_best = 0;
    let inv_batch = 1.0 / hp.batch as f32;
    let silver_p = match mix {
        Mix::Ratio(r) if !silver.is_empty() => r / (1.0 + r),
        Mix::Append => silver.len() as f64 / (gold.len() + silver.len()) as f64,
        _ => 0.0,
    };
    for step in 1..=hp.steps {
        let mut acc: Vec<Tensor<f32>> = model
            .store()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        for b in 0..hp.batch {
            let from_silver = silver_p > 0.0 && batch_rng.random::<f64>() < silver_p;
            let pool = if from_silver { silver } else { gold };
            let ex = &pool[batch_rng.random_range(0..pool.len())];
            let mut g = Graph::new(Mode::Train, dropout_seed ^ ((step * hp.batch + b) as u64));
            let vars = model.store().bind(&mut g);
            let l = loss(model, &mut g, &vars, ex)?;
            let l = g.scale(l, inv_batch);
            let grads = g.backward(l)?;
            for (a, gr) in acc
                .iter_mut()
                .zip(model.store().collect_grads(&vars, &grads))
            {
                for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                    *x += *y;
                }
            }
        }
        opt.step(model.store_mut().tensors_mut(), &acc)?;
        report.steps_run = step;
        if step % hp.eval_every == 0 || step == hp.steps {
            let score = eval(model)?;
            report.trace.push(EvalPoint { step, score });
            if score > report.best_score {
                report.best_score = score;
                report.best_step = step;
                best = Some(model.store().clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= hp.patience {
                    break;
                }
            }
        }
    }
    if let Some(best) = best {
        model.store_mut().load_from(&best)?;
    }
    Ok(report)
}

/// Shuffles `items` with `seed` and deals them into `k` folds whose sizes
/// differ by at most one. The last `n mod k` folds take one extra item.
pub fn kfold_split<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k < 2 {
        return Err(Error::invalid("k-fold split needs k >= 2"));
    }
    if k > items.len() {
        return Err(Error::invalid(format!(
            "{k} folds for {} items",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f >= k - extra);
        folds.push(
            order[pos..pos + size]
                .iter()
                .map(|&i| items[i].clone())
                .collect(),
        );
        pos += size;
    }
    Ok(folds)
}

/// Pools the spans of `train` and `dev`, splits them into `k` folds and
/// returns `(training, held-out)` datasets per fold. Both sides keep every
/// article text.
pub fn kfold_datasets(
    train: &Dataset,
    dev: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(Dataset, Dataset)>> {
    if train.techniques != dev.techniques {
        return Err(Error::invalid(
            "train and dev use different technique inventories",
        ));
    }
    let mut articles = train.articles.clone();
    for (id, text) in &dev.articles {
        if articles
            .insert(id.clone(), text.clone())
            .is_some_and(|t| t != *text)
        {
            return Err(Error::invalid(format!(
                "article {id} differs between train and dev"
            )));
        }
    }
    let spans: Vec<Span> = train.spans.iter().chain(&dev.spans).cloned().collect();
    let folds = kfold_split(&spans, k, seed)?;
    Ok((0..k)
        .map(|f| {
            let rest = folds
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != f)
                .flat_map(|(_, v)| v.iter().cloned())
                .collect();
            let make = |spans| Dataset {
                articles: articles.clone(),
                spans,
                techniques: train.techniques.clone(),
            };
            (make(rest), make(folds[f].clone()))
        })
        .collect())
}

/// One line of `runs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub config: Value,
    pub seed: u64,
    pub eval_trace: Vec<EvalPoint>,
    pub best_score: f64,
    pub checkpoint: Option<PathBuf>,
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash(config: &Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

pub fn append_manifest(path: &Path, record: &RunRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_evenly() {
        let items: Vec<usize> = (0..13).collect();
        let folds = kfold_split(&items, 6, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 2).count(), 5);
        assert_eq!(sizes.iter().filter(|&&s| s == 3).count(), 1);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(folds, kfold_split(&items, 6, 3).unwrap());
        assert!(kfold_split(&items[..12], 6, 0)
            .unwrap()
            .iter()
            .all(|f| f.len() == 2));
        assert!(kfold_split(&items[..5], 6, 0).is_err());
        assert!(kfold_split(&items, 1, 0).is_err());
    }

    #[test]
    fn overwrite_zeroes_dropout() {
        let hp = SelfTrainOverwrite::default().apply(&HyperParams::si_desk());
        assert_eq!((hp.dropout, hp.attention_dropout, hp.batch), (0.0, 0.0, 16));
        assert_eq!(hp.lr, HyperParams::si_desk().lr);
    }

    #[test]
    fn paper_profiles() {
        let si = HyperParams::si_paper();
        let tc = HyperParams::tc_paper();
        assert_eq!((si.batch, si.lr, si.steps), (8, 5e-4, 60_000));
        assert_eq!((tc.batch, tc.lr, tc.steps), (16, 2e-5, 20_000));
        assert_eq!((si.momentum, tc.weight_decay), (0.9, 0.01));
        assert_eq!((si.max_seq_len, tc.max_seq_len), (256, 256));
    }

    #[test]
    fn hash_is_key_order_independent() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":2,"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
