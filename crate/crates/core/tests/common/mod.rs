//! Independent oracles shared by the integration tests and the acceptance
//! harness: brute-force enumeration, naive double sums and random instance
//! generators.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spfg::analysis::{worsening_features, AnalysisItem, FeatureSpec, Location};
use spfg::crf::{
    crf_loss_node, log_partition, path_score, viterbi, ConstraintMask, CrfLoss, CrfParams,
};
use spfg::encoder::{
    emissions, marker_cls, Block, Dropouts, Encoder, EncoderConfig, LayerNorm, Linear, SpanCls,
    SpanClsConfig, Stack,
};
use spfg::losses::{reweighted_bce_node, ClassWeights};
use spfg::metrics::f1_of;
use spfg::numcore::{grad_check, Graph, ParamStore, Tensor, Var};
use spfg::spandata::{spans_to_tags, tags_to_spans, tokenize, Span};
use spfg::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * r.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn rand_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(r, n, scale)).unwrap()
}

// ---------------------------------------------------------------------------
// CRF

/// Every label sequence of length `len` over `k` labels, in lexicographic
/// order.
pub fn all_paths(len: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn brute_log_partition(em: &Tensor<f64>, params: &CrfParams<f64>) -> f64 {
    let scores: Vec<f64> = all_paths(em.rows(), params.num_labels())
        .iter()
        .map(|p| path_score(em, p, params).unwrap())
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Highest-scoring admissible path; the first in lexicographic order wins
/// ties.
pub fn brute_viterbi(
    em: &Tensor<f64>,
    params: &CrfParams<f64>,
    mask: Option<&ConstraintMask>,
) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in all_paths(em.rows(), params.num_labels()) {
        if mask.is_some_and(|m| !m.accepts(&p)) {
            continue;
        }
        let s = path_score(em, &p, params).unwrap();
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, p));
        }
    }
    best.unwrap().1
}

pub fn random_crf(r: &mut impl Rng, len: usize, k: usize) -> (Tensor<f64>, CrfParams<f64>) {
    let em = rand_tensor(r, &[len, k], 1.5);
    let params = CrfParams::new(
        rand_tensor(r, &[k, k], 1.0),
        normal_vec(r, k, 1.0),
        normal_vec(r, k, 1.0),
    )
    .unwrap();
    (em, params)
}

pub struct CrfOracleOutcome {
    pub instances: usize,
    pub max_abs_err: f64,
    pub viterbi_mismatches: usize,
}

/// Random instances with length 1..=6 and 1..=4 labels. Three-label
/// instances alternate between no mask and the BIO mask.
pub fn crf_oracle(n: usize, seed: u64) -> CrfOracleOutcome {
    let mut r = rng(seed);
    let mut max_abs_err: f64 = 0.0;
    let mut viterbi_mismatches = 0;
    for i in 0..n {
        let len = r.random_range(1..=6);
        let k = r.random_range(1..=4);
        let (em, params) = random_crf(&mut r, len, k);
        let z = log_partition(&em, &params).unwrap();
        max_abs_err = max_abs_err.max((z - brute_log_partition(&em, &params)).abs());
        let bio = ConstraintMask::bio();
        let mask = (k == 3 && i % 2 == 1).then_some(&bio);
        let (path, score) = viterbi(&em, &params, mask).unwrap();
        let expected = brute_viterbi(&em, &params, mask);
        if path != expected || (score - path_score(&em, &expected, &params).unwrap()).abs() > 1e-9 {
            viterbi_mismatches += 1;
        }
    }
    CrfOracleOutcome {
        instances: n,
        max_abs_err,
        viterbi_mismatches,
    }
}

// ---------------------------------------------------------------------------
// Gradient checks

pub const GRAD_EPS: f64 = 1e-6;

/// A scalar function of graph inputs plus the inputs to probe it at.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

/// Reduces any output to a scalar through a fixed random projection, so that
/// sum-invariant outputs (softmax rows, normalized layers) still carry
/// gradient.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn projected(
    seed: u64,
    out_shape: Vec<usize>,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let w = rand_tensor(&mut rng(seed), &out_shape, 1.0);
    GradCase {
        inputs,
        f: Box::new(move |g, v| {
            let out = f(g, v)?;
            project(g, out, &w)
        }),
    }
}

fn tiny_encoder_config(r: &mut impl Rng) -> EncoderConfig {
    let heads = r.random_range(1..=2);
    EncoderConfig {
        vocab_size: 7,
        hidden: 4 * heads,
        layers: r.random_range(1..=2),
        heads,
        intermediate: 6,
        max_positions: 8,
        dropout: 0.0,
        attention_dropout: 0.0,
    }
}

fn random_mask(r: &mut impl Rng, len: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..len).map(|_| r.random_bool(0.7)).collect();
    let keep = r.random_range(0..len);
    m[keep] = true;
    m
}

/// Parameters of `store` jittered away from their initial values (unit
/// layer-norm gains, zero biases) so every code path is exercised.
fn store_inputs(store: &ParamStore<f64>, r: &mut impl Rng) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .map(|t| {
            let noise = rand_tensor(r, t.shape(), 0.3);
            let data = t
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

/// Names of every primitive and layer covered by [`grad_case`].
pub const GRAD_CASES: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "mul",
    "scale",
    "transpose",
    "softmax",
    "gelu",
    "sigmoid",
    "layer_norm",
    "dropout",
    "gather",
    "concat_rows",
    "select_rows",
    "slice_cols",
    "concat_cols",
    "sum",
    "mean",
    "softmax_cross_entropy",
    "linear",
    "layer_norm_layer",
    "attention_block",
    "stack",
    "encoder",
    "emissions",
    "marker_cls",
    "span_cls",
    "crf_nll",
    "reweighted_bce",
];

/// One random instance of the named case.
pub fn grad_case(name: &str, r: &mut ChaCha8Rng) -> GradCase {
    let m = r.random_range(1..=4);
    let n = r.random_range(1..=5);
    let k = r.random_range(1..=4);
    match name {
        "matmul" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, k], 1.0), rand_tensor(r, &[k, n], 1.0)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        "matmul_nt" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, k], 1.0), rand_tensor(r, &[n, k], 1.0)],
            |g, v| g.matmul_nt(v[0], v[1]),
        ),
        "add" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m, n], 1.0)],
            |g, v| g.add(v[0], v[1]),
        ),
        "add_row" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[n], 1.0)],
            |g, v| g.add_row(v[0], v[1]),
        ),
        "mul" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m, n], 1.0)],
            |g, v| g.mul(v[0], v[1]),
        ),
        "scale" => {
            let c = r.sample::<f64, _>(StandardNormal);
            projected(
                r.random(),
                vec![m, n],
                vec![rand_tensor(r, &[m, n], 1.0)],
                move |g, v| Ok(g.scale(v[0], c)),
            )
        }
        "transpose" => projected(
            r.random(),
            vec![n, m],
            vec![rand_tensor(r, &[m, n], 1.0)],
            |g, v| Ok(g.transpose(v[0])),
        ),
        "softmax" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 2.0)],
            |g, v| g.softmax(v[0]),
        ),
        "gelu" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 2.0)],
            |g, v| Ok(g.gelu(v[0])),
        ),
        "sigmoid" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 2.0)],
            |g, v| Ok(g.sigmoid(v[0])),
        ),
        "layer_norm" => {
            let n = n.max(2);
            projected(
                r.random(),
                vec![m, n],
                vec![
                    rand_tensor(r, &[m, n], 1.0),
                    rand_tensor(r, &[n], 1.0),
                    rand_tensor(r, &[n], 1.0),
                ],
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            )
        }
        "dropout" => projected(
            r.random(),
            vec![m, n],
            vec![rand_tensor(r, &[m, n], 1.0)],
            |g, v| Ok(g.dropout(v[0], 0.3)),
        ),
        "gather" => {
            let ids: Vec<usize> = (0..m + 1).map(|_| r.random_range(0..k)).collect();
            projected(
                r.random(),
                vec![ids.len(), n],
                vec![rand_tensor(r, &[k, n], 1.0)],
                move |g, v| g.gather(v[0], &ids),
            )
        }
        "concat_rows" => projected(
            r.random(),
            vec![m + k, n],
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[k, n], 1.0)],
            |g, v| g.concat_rows(&[v[0], v[1]]),
        ),
        "select_rows" => {
            let idx: Vec<usize> = (0..k).map(|_| r.random_range(0..m)).collect();
            projected(
                r.random(),
                vec![idx.len(), n],
                vec![rand_tensor(r, &[m, n], 1.0)],
                move |g, v| g.select_rows(v[0], &idx),
            )
        }
        "slice_cols" => {
            let a = r.random_range(0..n);
            let b = r.random_range(a + 1..=n);
            projected(
                r.random(),
                vec![m, b - a],
                vec![rand_tensor(r, &[m, n], 1.0)],
                move |g, v| g.slice_cols(v[0], a, b),
            )
        }
        "concat_cols" => projected(
            r.random(),
            vec![m, n + k],
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m, k], 1.0)],
            |g, v| g.concat_cols(&[v[0], v[1]]),
        ),
        "sum" => GradCase {
            inputs: vec![rand_tensor(r, &[m, n], 1.0)],
            f: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        "mean" => GradCase {
            inputs: vec![rand_tensor(r, &[m, n], 1.0)],
            f: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
        "softmax_cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            GradCase {
                inputs: vec![rand_tensor(r, &[m, n], 2.0)],
                f: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &targets)),
            }
        }
        "linear" => {
            let mut store = ParamStore::<f64>::new();
            let lin = Linear::new(&mut store, "lin", k, n, r);
            let mut inputs = store_inputs(&store, r);
            let x = inputs.len();
            inputs.push(rand_tensor(r, &[m, k], 1.0));
            projected(r.random(), vec![m, n], inputs, move |g, v| {
                lin.forward(g, v, v[x])
            })
        }
        "layer_norm_layer" => {
            let n = n.max(2);
            let mut store = ParamStore::<f64>::new();
            let ln = LayerNorm::new(&mut store, "ln", n);
            let mut inputs = store_inputs(&store, r);
            let x = inputs.len();
            inputs.push(rand_tensor(r, &[m, n], 1.0));
            projected(r.random(), vec![m, n], inputs, move |g, v| {
                ln.forward(g, v, v[x])
            })
        }
        "attention_block" | "stack" => {
            let heads = r.random_range(1..=2);
            let hidden = 4 * heads;
            let len = r.random_range(1..=5);
            let mask = random_mask(r, len);
            let mut store = ParamStore::<f64>::new();
            let drop = Dropouts {
                hidden: 0.0,
                attention: 0.0,
            };
            let mut inputs;
            let x;
            let f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> = if name == "stack" {
                let layers = r.random_range(1..=2);
                let stack = Stack::new(&mut store, "s", layers, hidden, heads, 6, r);
                inputs = store_inputs(&store, r);
                x = inputs.len();
                Box::new(move |g, v| stack.forward(g, v, v[x], &mask, drop))
            } else {
                let block = Block::new(&mut store, "b", hidden, heads, 6, r);
                inputs = store_inputs(&store, r);
                x = inputs.len();
                Box::new(move |g, v| {
                    let bias = g.constant(spfg::encoder::key_bias(&mask));
                    block.forward(g, v, v[x], bias, drop)
                })
            };
            inputs.push(rand_tensor(r, &[len, hidden], 1.0));
            projected(r.random(), vec![len, hidden], inputs, f)
        }
        "encoder" | "emissions" | "marker_cls" | "span_cls" => {
            let cfg = tiny_encoder_config(r);
            let hidden = cfg.hidden;
            let len = r.random_range(2..=cfg.max_positions);
            let ids: Vec<usize> = (0..len)
                .map(|_| r.random_range(0..cfg.vocab_size))
                .collect();
            let mask = random_mask(r, len);
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(&mut store, cfg, r).unwrap();
            let head = Linear::new(&mut store, "head", hidden, 3, r);
            let span_cls = SpanCls::new(
                &mut store,
                SpanClsConfig {
                    layers: 1,
                    heads: 1,
                    intermediate: 5,
                },
                hidden,
                3,
                r,
            )
            .unwrap();
            let a = r.random_range(0..len);
            let b = r.random_range(a + 1..=len);
            let span: Vec<usize> = (a..b).collect();
            let inputs = store_inputs(&store, r);
            let drop = Dropouts {
                hidden: 0.0,
                attention: 0.0,
            };
            let out_shape = match name {
                "encoder" => vec![len, hidden],
                "emissions" => vec![len, 3],
                _ => vec![1, 3],
            };
            let which = name.to_string();
            projected(r.random(), out_shape, inputs, move |g, v| {
                let h = enc.encode(g, v, &ids, &mask)?;
                match which.as_str() {
                    "encoder" => Ok(h),
                    "emissions" => emissions(g, v, &head, h),
                    "marker_cls" => marker_cls(g, v, &head, h),
                    _ => span_cls.forward(g, v, h, &span, drop),
                }
            })
        }
        "crf_nll" => {
            let len = r.random_range(1..=6);
            let tags: Vec<usize> = (0..len).map(|_| r.random_range(0..k)).collect();
            GradCase {
                inputs: vec![
                    rand_tensor(r, &[len, k], 1.5),
                    rand_tensor(r, &[k, k], 1.0),
                    rand_tensor(r, &[k], 1.0),
                    rand_tensor(r, &[k], 1.0),
                ],
                f: Box::new(move |g, v| {
                    crf_loss_node(g, v[0], v[1], v[2], v[3], &tags, CrfLoss::Nll)
                }),
            }
        }
        "reweighted_bce" => {
            let targets = Tensor::new(
                vec![m, n],
                (0..m * n)
                    .map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            let w = ClassWeights {
                frequencies: vec![1; n],
                weights: (0..n).map(|_| r.random_range(0.5..4.0)).collect(),
            };
            GradCase {
                inputs: vec![rand_tensor(r, &[m, n], 2.0)],
                f: Box::new(move |g, v| {
                    let p = g.sigmoid(v[0]);
                    let y = g.constant(targets.clone());
                    reweighted_bce_node(g, p, y, &w)
                }),
            }
        }
        other => panic!("no gradient case named {other}"),
    }
}

/// Largest relative error of each case over `n` random instances.
pub fn gradient_suite(n: usize, seed: u64) -> Vec<(&'static str, f64)> {
    GRAD_CASES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut r = rng(seed.wrapping_add(i as u64 * 7919));
            let worst = (0..n)
                .map(|_| {
                    let case = grad_case(name, &mut r);
                    grad_check(&case.f, &case.inputs, GRAD_EPS).unwrap()
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Losses

/// Unweighted binary cross-entropy averaged over all entries.
pub fn plain_bce(probs: &Tensor<f64>, targets: &Tensor<f64>) -> f64 {
    let n = probs.numel() as f64;
    -probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| y * x.ln() + (1.0 - y) * (1.0 - x).ln())
        .sum::<f64>()
        / n
}

// ---------------------------------------------------------------------------
// Span CLS

/// Largest absolute difference between the gathered-span and the
/// masked-full-sequence formulations over `n` random configurations.
pub fn span_cls_equivalence(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let heads = r.random_range(1..=4);
        let hidden = heads * r.random_range(1..=4);
        let len = r.random_range(1..=12);
        let classes = r.random_range(1..=5);
        let cfg = SpanClsConfig {
            layers: r.random_range(1..=3),
            heads,
            intermediate: r.random_range(1..=16),
        };
        let mut store = ParamStore::<f64>::new();
        let sc = SpanCls::new(&mut store, cfg, hidden, classes, &mut r).unwrap();
        let params = store_inputs(&store, &mut r);
        let host = rand_tensor(&mut r, &[len, hidden], 1.0);
        let a = r.random_range(0..len);
        let b = r.random_range(a + 1..=len);
        let span: Vec<usize> = (a..b).collect();
        let drop = Dropouts {
            hidden: 0.0,
            attention: 0.0,
        };
        let run = |masked: bool| {
            let mut g = Graph::<f64>::eval();
            let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let h = g.constant(host.clone());
            let out = if masked {
                sc.forward_masked(&mut g, &vars, h, &span, drop)
            } else {
                sc.forward(&mut g, &vars, h, &span, drop)
            }
            .unwrap();
            g.value(out).data().to_vec()
        };
        for (x, y) in run(false).iter().zip(run(true)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Span codec

/// A random text with random token-aligned spans, each followed by at least
/// one uncovered token. Token-adjacent spans form one maximal tag run and
/// are read back as a single span.
pub fn random_tagged_text(r: &mut impl Rng) -> (String, Vec<Span>) {
    const WORDS: [&str; 8] = ["alpha", "beta", "gamma", ",", ".", "délta", "«", "x"];
    let n = r.random_range(1..=20);
    let words: Vec<&str> = (0..n)
        .map(|_| WORDS[r.random_range(0..WORDS.len())])
        .collect();
    let text = words.join(if r.random_bool(0.5) { " " } else { "  " });
    let tt = tokenize(&text);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tt.len() {
        if r.random_bool(0.3) {
            let j = r.random_range(i + 1..=tt.len().min(i + 4));
            spans.push(Span::new("a", tt.tokens[i].start, tt.tokens[j - 1].end));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    (text, spans)
}

/// Number of instances whose decoded spans differ from the encoded ones.
pub fn codec_round_trip(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..n)
        .filter(|_| {
            let (text, spans) = random_tagged_text(&mut r);
            let tt = tokenize(&text);
            let tags = spans_to_tags(&tt, &spans).unwrap();
            tags_to_spans(&tt, &tags, "a").unwrap() != spans
        })
        .count()
}

// ---------------------------------------------------------------------------
// FLC-F1

/// Direct double sum over every prediction/gold pair in input order.
pub fn naive_flc(pred: &[Span], gold: &[Span], label_aware: bool) -> (f64, f64, f64) {
    let credit = |from: &[Span], against: &[Span]| -> f64 {
        let mut total = 0.0;
        for s in from {
            for t in against {
                let same =
                    s.article_id == t.article_id && (!label_aware || s.technique == t.technique);
                let lo = s.start.max(t.start);
                let hi = s.end.min(t.end);
                if same && hi > lo {
                    total += (hi - lo) as f64 / (s.end - s.start) as f64;
                }
            }
        }
        total
    };
    let p = if pred.is_empty() {
        0.0
    } else {
        credit(pred, gold) / pred.len() as f64
    };
    let r = if gold.is_empty() {
        0.0
    } else {
        credit(gold, pred) / gold.len() as f64
    };
    (p, r, f1_of(p, r))
}

/// Random, possibly overlapping spans over three articles and two labels.
pub fn random_spans(r: &mut impl Rng, max: usize) -> Vec<Span> {
    let n = r.random_range(0..=max);
    (0..n)
        .map(|_| {
            let start = r.random_range(0..60);
            let end = start + r.random_range(1..15);
            Span::labeled(
                ["1", "2", "3"][r.random_range(0..3)],
                start,
                end,
                r.random_range(0..2),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Null calibration

/// Fraction of trials in which a feature assigned independently of the
/// scores reaches p < .05. Each trial draws `items` continuous scores and a
/// presence flag with probability one half.
pub fn null_calibration(trials: usize, items: usize, seed: u64) -> f64 {
    let spec = FeatureSpec::new("comma", Location::InsideSpan, "class:comma").unwrap();
    let mut r = rng(seed);
    let mut hits = 0;
    for _ in 0..trials {
        let mut items_v = Vec::with_capacity(items);
        let mut scores = Vec::with_capacity(items);
        for _ in 0..items {
            let text = if r.random_bool(0.5) {
                "so, then"
            } else {
                "so then"
            };
            items_v.push(AnalysisItem::classified(text, 0, text.len()));
            scores.push(r.random::<f64>());
        }
        let report = worsening_features(&items_v, &scores, std::slice::from_ref(&spec)).unwrap();
        if report.rows.first().is_some_and(|row| row.p_value < 0.05) {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

/// Per-article map helper used by several tests.
pub fn by_article(spans: &[Span]) -> BTreeMap<String, Vec<Span>> {
    let mut m: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    for s in spans {
        m.entry(s.article_id.clone()).or_default().push(s.clone());
    }
    m
}
