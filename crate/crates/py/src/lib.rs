//! Python bindings. Build with `--features extension-module` to get an
//! importable `spfg` module.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use ::spfg::analysis::{self, AnalysisItem, FeatureSpec};
use ::spfg::crf::{self, ConstraintMask, CrfParams};
use ::spfg::encoder::read_checkpoint;
use ::spfg::error::Error;
use ::spfg::losses::{self, BceBatch, ClassWeights};
use ::spfg::metrics;
use ::spfg::numcore::Tensor;
use ::spfg::pipeline::{self, SiModel, TcModel};
use ::spfg::spandata::{self, Span, Tag};
use ::spfg::stats::{self, Alternative, TestResult};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type SpanTuple = (String, usize, usize, Option<usize>);

fn to_spans(spans: Vec<SpanTuple>) -> Vec<Span> {
    spans
        .into_iter()
        .map(|(id, s, e, t)| Span {
            technique: t,
            ..Span::new(id, s, e)
        })
        .collect()
}

fn from_spans(spans: &[Span]) -> Vec<SpanTuple> {
    spans
        .iter()
        .map(|s| (s.article_id.clone(), s.start, s.end, s.technique))
        .collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.concat()).map_err(err)
}

fn crf_params(
    transitions: Vec<Vec<f64>>,
    start: Vec<f64>,
    end: Vec<f64>,
) -> PyResult<CrfParams<f64>> {
    Ok(CrfParams {
        transitions: matrix(transitions)?,
        start,
        end,
    })
}

/// Result of a rank test.
#[pyclass(name = "TestResult", frozen, get_all)]
struct PyTestResult {
    statistic: f64,
    p_value: f64,
    method: String,
}

impl From<TestResult> for PyTestResult {
    fn from(t: TestResult) -> Self {
        PyTestResult {
            statistic: t.statistic,
            p_value: t.p_value,
            method: format!("{:?}", t.method).to_lowercase(),
        }
    }
}

#[pymethods]
impl PyTestResult {
    fn __repr__(&self) -> String {
        format!(
            "TestResult(statistic={}, p_value={}, method='{}')",
            self.statistic, self.p_value, self.method
        )
    }
}

/// Log partition function of a linear-chain CRF.
#[pyfunction]
fn crf_log_partition(
    emissions: Vec<Vec<f64>>,
    transitions: Vec<Vec<f64>>,
    start: Vec<f64>,
    end: Vec<f64>,
) -> PyResult<f64> {
    let params = crf_params(transitions, start, end)?;
    crf::log_partition(&matrix(emissions)?, &params).map_err(err)
}

/// Best label path and its score; `bio=True` forbids `O -> I` and a leading `I`.
#[pyfunction]
#[pyo3(signature = (emissions, transitions, start, end, bio=false))]
fn crf_viterbi(
    emissions: Vec<Vec<f64>>,
    transitions: Vec<Vec<f64>>,
    start: Vec<f64>,
    end: Vec<f64>,
    bio: bool,
) -> PyResult<(Vec<usize>, f64)> {
    let params = crf_params(transitions, start, end)?;
    let mask = ConstraintMask::bio();
    crf::viterbi(&matrix(emissions)?, &params, bio.then_some(&mask)).map_err(err)
}

/// Re-weighted binary cross-entropy; `weights=None` gives plain BCE.
#[pyfunction]
#[pyo3(signature = (probs, targets, weights=None))]
fn reweighted_bce(
    probs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
) -> PyResult<f64> {
    let batch = BceBatch::new(matrix(probs)?, matrix(targets)?).map_err(err)?;
    let d = batch.probs.shape()[1];
    let w = match weights {
        Some(weights) => ClassWeights {
            frequencies: vec![0; weights.len()],
            weights,
        },
        None => ClassWeights::uniform(d),
    };
    losses::reweighted_bce(&batch, &w).map_err(err)
}

/// Inverse-frequency class weights.
#[pyfunction]
fn class_weights(frequencies: Vec<u64>) -> PyResult<Vec<f64>> {
    Ok(losses::class_weights(&frequencies).map_err(err)?.weights)
}

/// Partial-match (precision, recall, F1). Spans are
/// `(article_id, start, end, technique_or_None)` tuples.
#[pyfunction]
#[pyo3(signature = (pred, gold, label_aware=false))]
fn flc_f1(
    pred: Vec<SpanTuple>,
    gold: Vec<SpanTuple>,
    label_aware: bool,
) -> PyResult<(f64, f64, f64)> {
    let s = metrics::flc_f1(&to_spans(pred), &to_spans(gold), label_aware).map_err(err)?;
    Ok((s.precision, s.recall, s.f1))
}

#[pyfunction]
fn micro_f1(pred: Vec<usize>, gold: Vec<usize>) -> PyResult<f64> {
    metrics::micro_f1(&pred, &gold).map_err(err)
}

/// BIO tags (`"O"`, `"B"`, `"I"`) for character spans of `text`.
#[pyfunction]
fn spans_to_tags(text: &str, spans: Vec<(usize, usize)>) -> PyResult<Vec<String>> {
    let tt = spandata::tokenize(text);
    let spans: Vec<Span> = spans
        .into_iter()
        .map(|(s, e)| Span::new("", s, e))
        .collect();
    let tags = spandata::spans_to_tags(&tt, &spans).map_err(err)?;
    Ok(tags.0.iter().map(|t| t.to_string()).collect())
}

/// Character spans covered by maximal `B I*` runs.
#[pyfunction]
fn tags_to_spans(text: &str, tags: Vec<String>) -> PyResult<Vec<(usize, usize)>> {
    let tt = spandata::tokenize(text);
    let tags = tags
        .iter()
        .map(|t| match t.as_str() {
            "O" => Ok(Tag::O),
            "B" => Ok(Tag::B),
            "I" => Ok(Tag::I),
            other => Err(PyValueError::new_err(format!("unknown tag {other:?}"))),
        })
        .collect::<PyResult<Vec<Tag>>>()?;
    let spans = spandata::tags_to_spans(&tt, &spandata::TagSequence(tags), "").map_err(err)?;
    Ok(spans.iter().map(|s| (s.start, s.end)).collect())
}

fn alternative(s: &str) -> PyResult<Alternative> {
    s.parse().map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, alternative="two-sided"))]
fn mann_whitney_u(a: Vec<f64>, b: Vec<f64>, alternative: &str) -> PyResult<PyTestResult> {
    let alt = self::alternative(alternative)?;
    Ok(stats::mann_whitney_u(&a, &b, alt).map_err(err)?.into())
}

#[pyfunction]
fn kruskal_wallis(groups: Vec<Vec<f64>>) -> PyResult<PyTestResult> {
    Ok(stats::kruskal_wallis(&groups).map_err(err)?.into())
}

#[pyfunction]
fn bartlett(groups: Vec<Vec<f64>>) -> PyResult<PyTestResult> {
    Ok(stats::bartlett(&groups).map_err(err)?.into())
}

#[pyfunction]
fn spearman_rho(x: Vec<f64>, y: Vec<f64>) -> PyResult<PyTestResult> {
    Ok(stats::spearman_rho(&x, &y).map_err(err)?.into())
}

/// Features whose presence lowers the scores, as
/// `(feature, location, count, p_value)` rows sorted by p. Items are
/// `(text, start, end)` tuples; `specs` are `(name, location, pattern)`
/// tuples and default to the built-in list.
#[pyfunction]
#[pyo3(signature = (items, scores, specs=None))]
fn worsening_features(
    items: Vec<(String, usize, usize)>,
    scores: Vec<f64>,
    specs: Option<Vec<(String, String, String)>>,
) -> PyResult<Vec<(String, String, usize, f64)>> {
    let items: Vec<AnalysisItem> = items
        .into_iter()
        .map(|(t, s, e)| AnalysisItem::classified(t, s, e))
        .collect();
    let specs = match specs {
        Some(v) => v
            .into_iter()
            .map(|(n, l, p)| FeatureSpec::new(n, l.parse().map_err(err)?, &p).map_err(err))
            .collect::<PyResult<Vec<_>>>()?,
        None => analysis::default_feature_specs(),
    };
    let report = analysis::worsening_features(&items, &scores, &specs).map_err(err)?;
    Ok(report
        .rows
        .into_iter()
        .map(|r| (r.feature, r.location.to_string(), r.count, r.p_value))
        .collect())
}

/// Mean micro-F1 of every subset of at least two models, as
/// `(members, mean, std)`. `folds` is a list of `(tables, gold)` pairs with
/// one probability table per model.
#[pyfunction]
fn enumerate_ensembles(
    folds: Vec<(Vec<Vec<Vec<f64>>>, Vec<usize>)>,
) -> PyResult<Vec<(Vec<usize>, f64, f64)>> {
    let res = pipeline::enumerate_ensembles(&folds).map_err(err)?;
    Ok(res
        .into_iter()
        .map(|r| (r.members, r.mean, r.std))
        .collect())
}

/// Writes a synthetic corpus like `spfg gen-synth` and returns
/// `(train_spans, dev_spans)` plus article texts keyed by id.
#[pyfunction]
#[pyo3(signature = (seed, train_articles=20, dev_articles=5, pool_texts=0, techniques=4))]
fn gen_synth(
    seed: u64,
    train_articles: usize,
    dev_articles: usize,
    pool_texts: usize,
    techniques: usize,
) -> PyResult<(BTreeMap<String, String>, Vec<SpanTuple>, Vec<SpanTuple>)> {
    let cfg = spandata::SynthConfig {
        seed,
        train_articles,
        dev_articles,
        pool_texts,
        techniques,
        ..Default::default()
    };
    let c = spandata::gen_synth(&cfg).map_err(err)?;
    let mut articles = c.train.articles.clone();
    articles.extend(c.dev.articles.clone());
    Ok((
        articles,
        from_spans(&c.train.spans),
        from_spans(&c.dev.spans),
    ))
}

/// A trained model loaded from a checkpoint file.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Loaded,
}

enum Loaded {
    Si(SiModel),
    Tc(TcModel),
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = read_checkpoint(&path).map_err(err)?;
        let inner = match ckpt.kind.as_str() {
            "si" => Loaded::Si(SiModel::from_checkpoint(&ckpt).map_err(err)?),
            "tc" => Loaded::Tc(TcModel::from_checkpoint(&ckpt).map_err(err)?),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown model kind {other:?}"
                )))
            }
        };
        Ok(PyModel { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            Loaded::Si(_) => "si",
            Loaded::Tc(_) => "tc",
        }
    }

    /// Predicted character spans for each article.
    fn identify(&self, articles: BTreeMap<String, String>) -> PyResult<Vec<SpanTuple>> {
        let Loaded::Si(m) = &self.inner else {
            return Err(PyValueError::new_err(
                "identify needs a span identification model",
            ));
        };
        Ok(from_spans(
            &pipeline::predict_si(m, &articles).map_err(err)?,
        ))
    }

    /// Per-technique probabilities for each span.
    fn classify(
        &self,
        articles: BTreeMap<String, String>,
        spans: Vec<SpanTuple>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let Loaded::Tc(m) = &self.inner else {
            return Err(PyValueError::new_err(
                "classify needs a technique classifier",
            ));
        };
        let ds = spandata::Dataset {
            articles,
            spans: to_spans(spans),
            techniques: m.config.techniques.clone(),
        };
        m.predict_dataset(&ds).map_err(err)
    }
}

#[pymodule]
fn spfg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTestResult>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(crf_log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(crf_viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(reweighted_bce, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(flc_f1, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(spans_to_tags, m)?)?;
    m.add_function(wrap_pyfunction!(tags_to_spans, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(kruskal_wallis, m)?)?;
    m.add_function(wrap_pyfunction!(bartlett, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(worsening_features, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_ensembles, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synth, m)?)?;
    Ok(())
}
