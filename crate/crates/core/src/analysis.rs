//! No-box error analysis: shallow features are checked on each item, items
//! are split by feature presence, and a one-sided Mann-Whitney U test asks
//! whether items carrying the feature score lower.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spandata::{char_slice, tokenize};
use crate::stats::{mann_whitney_u, Alternative};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Location {
    InsideSpan,
    BeforeSpan,
    AfterSpan,
    ExpectedSpan,
    OutputSpan,
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "inside-span" | "inside" => Location::InsideSpan,
            "before-span" | "before" => Location::BeforeSpan,
            "after-span" | "after" => Location::AfterSpan,
            "expected-span" | "expected" => Location::ExpectedSpan,
            "output-span" | "output" => Location::OutputSpan,
            other => {
                return Err(Error::invalid(format!(
                    "unknown feature location {other:?}"
                )))
            }
        })
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::InsideSpan => "inside-span",
            Location::BeforeSpan => "before-span",
            Location::AfterSpan => "after-span",
            Location::ExpectedSpan => "expected-span",
            Location::OutputSpan => "output-span",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharClass {
    Comma,
    Question,
    Dot,
    Quotation,
    Exclamation,
}

impl CharClass {
    pub fn matches(self, c: char) -> bool {
        match self {
            CharClass::Comma => c == ',',
            CharClass::Question => c == '?',
            CharClass::Dot => c == '.',
            CharClass::Quotation => matches!(
                c,
                '"' | '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2018}' | '\u{2019}' | '«' | '»'
            ),
            CharClass::Exclamation => c == '!',
        }
    }

    fn name(self) -> &'static str {
        match self {
            CharClass::Comma => "comma",
            CharClass::Question => "question",
            CharClass::Dot => "dot",
            CharClass::Quotation => "quotation",
            CharClass::Exclamation => "exclamation",
        }
    }
}

impl FromStr for CharClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "comma" => CharClass::Comma,
            "question" => CharClass::Question,
            "dot" => CharClass::Dot,
            "quotation" => CharClass::Quotation,
            "exclamation" => CharClass::Exclamation,
            other => return Err(Error::invalid(format!("unknown character class {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    /// Case-insensitive token sequence, matched on token boundaries.
    Literal(Vec<String>),
    Class(CharClass),
}

impl Pattern {
    /// `class:<name>` selects a character class; anything else is a literal.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("class:") {
            return Ok(Pattern::Class(name.parse()?));
        }
        let toks: Vec<String> = tokenize(s).surfaces().map(str::to_lowercase).collect();
        if toks.is_empty() {
            return Err(Error::invalid("empty feature pattern"));
        }
        Ok(Pattern::Literal(toks))
    }

    pub fn matches(&self, region: &str) -> bool {
        match self {
            Pattern::Class(c) => region.chars().any(|ch| c.matches(ch)),
            Pattern::Literal(seq) => {
                let toks: Vec<String> =
                    tokenize(region).surfaces().map(str::to_lowercase).collect();
                toks.windows(seq.len()).any(|w| w == seq.as_slice())
            }
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Class(c) => write!(f, "class:{}", c.name()),
            Pattern::Literal(seq) => f.write_str(&seq.join(" ")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub location: Location,
    pub pattern: Pattern,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, location: Location, pattern: &str) -> Result<Self> {
        Ok(FeatureSpec {
            name: name.into(),
            location,
            pattern: Pattern::parse(pattern)?,
        })
    }

    /// Parses `name<TAB>location<TAB>pattern`.
    pub fn parse_line(line: &str) -> Result<Self> {
        let mut parts = line.split('\t');
        let (Some(name), Some(loc), Some(pat), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::invalid(format!(
                "feature spec needs three tab-separated fields: {line:?}"
            )));
        };
        if name.is_empty() {
            return Err(Error::invalid("feature spec with empty name"));
        }
        FeatureSpec::new(name, loc.parse()?, pat)
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.name, self.location, self.pattern)
    }
}

/// Reads a spec file; blank lines and `#` comments are skipped.
pub fn load_feature_specs(path: &Path) -> Result<Vec<FeatureSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(FeatureSpec::parse_line(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Features from the span identification and technique classification
/// error tables.
pub fn default_feature_specs() -> Vec<FeatureSpec> {
    use Location::*;
    let rows: [(&str, Location, &str); 15] = [
        ("question", ExpectedSpan, "class:question"),
        ("dot", ExpectedSpan, "class:dot"),
        ("quotation", ExpectedSpan, "class:quotation"),
        ("exclamation", ExpectedSpan, "class:exclamation"),
        ("and", OutputSpan, "and"),
        ("comma", InsideSpan, "class:comma"),
        ("we", InsideSpan, "we"),
        ("this", InsideSpan, "this"),
        ("will", InsideSpan, "will"),
        ("not", InsideSpan, "not"),
        ("exclamation", InsideSpan, "class:exclamation"),
        ("CIA", BeforeSpan, "CIA"),
        ("according to", AfterSpan, "according to"),
        ("quotation", BeforeSpan, "class:quotation"),
        ("comma", ExpectedSpan, "class:comma"),
    ];
    rows.iter()
        .map(|&(n, l, p)| FeatureSpec::new(n, l, p).expect("built-in spec"))
        .collect()
}

/// One scored item. Offsets are character positions in `text`; for
/// classification items `text` is the context window and `span` the
/// classified fragment.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisItem {
    pub text: String,
    pub span: Option<(usize, usize)>,
    pub expected: Vec<(usize, usize)>,
    pub output: Vec<(usize, usize)>,
}

impl AnalysisItem {
    pub fn classified(text: impl Into<String>, start: usize, end: usize) -> Self {
        AnalysisItem {
            text: text.into(),
            span: Some((start, end)),
            ..Default::default()
        }
    }

    pub fn identified(
        text: impl Into<String>,
        expected: Vec<(usize, usize)>,
        output: Vec<(usize, usize)>,
    ) -> Self {
        AnalysisItem {
            text: text.into(),
            span: None,
            expected,
            output,
        }
    }

    fn regions(&self, location: Location) -> Vec<&str> {
        let n = self.text.chars().count();
        let clip = |(s, e): (usize, usize)| char_slice(&self.text, s.min(n), e.min(n));
        match location {
            Location::InsideSpan => self.span.map(clip).into_iter().collect(),
            Location::BeforeSpan => self.span.map(|(s, _)| clip((0, s))).into_iter().collect(),
            Location::AfterSpan => self.span.map(|(_, e)| clip((e, n))).into_iter().collect(),
            Location::ExpectedSpan => self.expected.iter().copied().map(clip).collect(),
            Location::OutputSpan => self.output.iter().copied().map(clip).collect(),
        }
    }
}

pub fn extract_feature(item: &AnalysisItem, spec: &FeatureSpec) -> bool {
    item.regions(spec.location)
        .into_iter()
        .any(|r| spec.pattern.matches(r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorseningRow {
    pub feature: String,
    pub location: Location,
    pub count: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorseningReport {
    pub rows: Vec<WorseningRow>,
    /// Specs skipped because the feature was present in no item or in all.
    pub notices: Vec<String>,
}

impl WorseningReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("feature\tlocation\tcount\tp_value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                r.feature, r.location, r.count, r.p_value
            ));
        }
        out
    }
}

/// Ranks features by how strongly their presence lowers `scores`.
/// Rows are sorted by ascending p, then descending count.
pub fn worsening_features(
    items: &[AnalysisItem],
    scores: &[f64],
    specs: &[FeatureSpec],
) -> Result<WorseningReport> {
    if items.len() != scores.len() {
        return Err(Error::shape(format!(
            "{} items but {} scores",
            items.len(),
            scores.len()
        )));
    }
    let results: Vec<Result<std::result::Result<WorseningRow, String>>> = specs
        .par_iter()
        .map(|spec| {
            let mut present = Vec::new();
            let mut absent = Vec::new();
            for (item, &s) in items.iter().zip(scores) {
                if extract_feature(item, spec) {
                    present.push(s);
                } else {
                    absent.push(s);
                }
            }
            if present.is_empty() || absent.is_empty() {
                return Ok(Err(format!(
                    "skipped {} ({}): present in {} of {} items",
                    spec.name,
                    spec.location,
                    present.len(),
                    items.len()
                )));
            }
            let t = mann_whitney_u(&present, &absent, Alternative::Less)?;
            Ok(Ok(WorseningRow {
                feature: spec.name.clone(),
                location: spec.location,
                count: present.len(),
                p_value: t.p_value,
            }))
        })
        .collect();
    let mut report = WorseningReport::default();
    for r in results {
        match r? {
            Ok(row) => report.rows.push(row),
            Err(note) => report.notices.push(note),
        }
    }
    report.rows.sort_by(|a, b| {
        a.p_value
            .total_cmp(&b.p_value)
            .then(b.count.cmp(&a.count))
            .then_with(|| a.feature.cmp(&b.feature))
            .then_with(|| a.location.to_string().cmp(&b.location.to_string()))
    });
    Ok(report)
}
