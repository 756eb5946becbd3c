//! Synthetic corpora with planted technique spans.
//!
//! Articles are lines of random filler words. A planted span centres on a
//! trigger word drawn from technique `k`'s lexicon and covers the trigger plus
//! `half_width` tokens on each side. The unlabeled pool comes from the same
//! process with its spans kept aside.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Span};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of filler words.
    pub vocab_size: usize,
    /// Number of techniques `K`.
    pub techniques: usize,
    pub triggers_per_technique: usize,
    pub half_width: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a line carries a planted span.
    pub span_rate: f64,
    /// Frequency ratio between the most and least common technique.
    pub label_skew: f64,
    /// Probability of a comma after a filler word.
    pub comma_rate: f64,
    /// Probability that a trigger word shows up in a line without a span.
    pub decoy_rate: f64,
    pub train_articles: usize,
    pub dev_articles: usize,
    pub pool_texts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            techniques: 4,
            triggers_per_technique: 6,
            half_width: 1,
            min_lines: 3,
            max_lines: 6,
            min_words: 6,
            max_words: 12,
            span_rate: 0.6,
            label_skew: 4.0,
            comma_rate: 0.08,
            decoy_rate: 0.0,
            train_articles: 200,
            dev_articles: 50,
            pool_texts: 400,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.techniques == 0 {
            return Err(Error::invalid(
                "synthetic corpus needs at least one technique",
            ));
        }
        if self.vocab_size == 0 || self.triggers_per_technique == 0 {
            return Err(Error::invalid("empty filler vocabulary or trigger lexicon"));
        }
        if self.min_lines == 0 || self.min_lines > self.max_lines {
            return Err(Error::invalid("bad line count range"));
        }
        if self.min_words > self.max_words || self.max_words < 2 * self.half_width + 1 {
            return Err(Error::invalid("lines too short for the span half-width"));
        }
        if !(self.label_skew >= 1.0) {
            return Err(Error::invalid("label skew must be >= 1"));
        }
        for (name, p) in [
            ("span_rate", self.span_rate),
            ("comma_rate", self.comma_rate),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be a probability")));
            }
        }
        Ok(())
    }

    /// Target probability of each technique: log-linear from 1 down to
    /// `1 / label_skew`, normalized.
    pub fn label_distribution(&self) -> Vec<f64> {
        let k = self.techniques;
        let raw: Vec<f64> = (0..k)
            .map(|i| {
                if k == 1 {
                    1.0
                } else {
                    self.label_skew.powf(-(i as f64) / (k - 1) as f64)
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    /// Unlabeled texts keyed by id.
    pub pool: BTreeMap<String, String>,
    /// Withheld spans of the pool, for measuring silver-label quality.
    pub pool_truth: Vec<Span>,
    pub lexicons: Vec<Vec<String>>,
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for an index.
fn word(mut i: usize, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[i % ONSETS.len()]);
        i /= ONSETS.len();
        w.push_str(NUCLEI[i % NUCLEI.len()]);
        i /= NUCLEI.len();
    }
    w
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    filler: Vec<String>,
    lexicons: Vec<Vec<String>>,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pick_technique(&mut self) -> usize {
        let u: f64 = self.rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Appends one line to `text`, returning the planted span if any.
    fn line(&mut self, text: &mut String, char_pos: &mut usize) -> Option<(usize, usize, usize)> {
        let cfg = self.cfg;
        let n_words = self.rng.random_range(cfg.min_words..=cfg.max_words);
        let mut toks: Vec<String> = Vec::with_capacity(n_words * 2);
        for _ in 0..n_words {
            toks.push(self.filler.choose(&mut self.rng).expect("filler").clone());
            if self.rng.random::<f64>() < cfg.comma_rate {
                toks.push(",".into());
            }
        }
        if cfg.decoy_rate > 0.0 && self.rng.random::<f64>() < cfg.decoy_rate {
            let k = self.rng.random_range(0..cfg.techniques);
            let pos = self.rng.random_range(0..toks.len());
            toks[pos] = self.lexicons[k]
                .choose(&mut self.rng)
                .expect("lexicon")
                .clone();
        }
        let mut planted = None;
        let hw = cfg.half_width;
        if toks.len() > 2 * hw && self.rng.random::<f64>() < cfg.span_rate {
            let k = self.pick_technique();
            let centre = self.rng.random_range(hw..toks.len() - hw);
            toks[centre] = self.lexicons[k]
                .choose(&mut self.rng)
                .expect("lexicon")
                .clone();
            planted = Some((centre - hw, centre + hw, k));
        }
        toks.push(".".into());

        let mut offsets = Vec::with_capacity(toks.len());
        for (i, t) in toks.iter().enumerate() {
            let glue = i > 0 && !(t == "," || t == ".");
            if glue {
                text.push(' ');
                *char_pos += 1;
            }
            let start = *char_pos;
            text.push_str(t);
            *char_pos += t.chars().count();
            offsets.push((start, *char_pos));
        }
        planted.map(|(a, b, k)| (offsets[a].0, offsets[b].1, k))
    }

    fn article(&mut self, id: &str, lines: usize) -> (String, Vec<Span>) {
        let mut text = String::new();
        let mut pos = 0;
        let mut spans = Vec::new();
        for l in 0..lines {
            if l > 0 {
                text.push('\n');
                pos += 1;
            }
            if let Some((s, e, k)) = self.line(&mut text, &mut pos) {
                spans.push(Span::labeled(id, s, e, k));
            }
        }
        text.push('\n');
        (text, spans)
    }

    fn dataset(&mut self, n: usize, id_base: usize, techniques: &[String]) -> Dataset {
        let mut ds = Dataset {
            techniques: techniques.to_vec(),
            ..Dataset::default()
        };
        for i in 0..n {
            let id = (id_base + i).to_string();
            let lines = self
                .rng
                .random_range(self.cfg.min_lines..=self.cfg.max_lines);
            let (text, spans) = self.article(&id, lines);
            ds.articles.insert(id, text);
            ds.spans.extend(spans);
        }
        ds
    }
}

pub fn technique_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("Technique_{i}")).collect()
}

/// Generates train/dev gold sets and an unlabeled pool. Identical configs give
/// identical corpora.
pub fn gen_synth(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let filler: Vec<String> = (0..cfg.vocab_size).map(|i| word(i, 3)).collect();
    // two-syllable words never collide with three-syllable filler
    let lexicons: Vec<Vec<String>> = (0..cfg.techniques)
        .map(|k| {
            (0..cfg.triggers_per_technique)
                .map(|j| word(k * cfg.triggers_per_technique + j, 2).to_uppercase())
                .collect()
        })
        .collect();
    let mut acc = 0.0;
    let cumulative = cfg
        .label_distribution()
        .into_iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    let mut g = Generator {
        cfg,
        filler,
        lexicons: lexicons.clone(),
        cumulative,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let techniques = technique_names(cfg.techniques);
    let train = g.dataset(cfg.train_articles, 100_000, &techniques);
    let dev = g.dataset(cfg.dev_articles, 200_000, &techniques);
    let mut pool = BTreeMap::new();
    let mut pool_truth = Vec::new();
    for i in 0..cfg.pool_texts {
        let id = (900_000 + i).to_string();
        let (text, spans) = g.article(&id, 1);
        pool.insert(id, text);
        pool_truth.extend(spans);
    }
    Ok(SynthCorpus {
        train,
        dev,
        pool,
        pool_truth,
        lexicons,
    })
}
