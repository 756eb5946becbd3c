//! Shared-task file layout: `article<id>.txt` files plus tab-separated
//! label files with character offsets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub article_id: String,
    pub start: usize,
    pub end: usize,
    pub technique: Option<usize>,
}

impl Span {
    pub fn new(article_id: impl Into<String>, start: usize, end: usize) -> Self {
        Span {
            article_id: article_id.into(),
            start,
            end,
            technique: None,
        }
    }

    pub fn labeled(
        article_id: impl Into<String>,
        start: usize,
        end: usize,
        technique: usize,
    ) -> Self {
        Span {
            technique: Some(technique),
            ..Span::new(article_id, start, end)
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Si,
    Tc,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si" => Ok(Task::Si),
            "tc" => Ok(Task::Tc),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Si => "si",
            Task::Tc => "tc",
        })
    }
}

/// Articles keyed by id plus their span annotations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub articles: BTreeMap<String, String>,
    pub spans: Vec<Span>,
    pub techniques: Vec<String>,
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn article_len(&self, id: &str) -> Option<usize> {
        self.articles.get(id).map(|t| t.chars().count())
    }

    pub fn spans_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Span> + 'a {
        self.spans.iter().filter(move |s| s.article_id == id)
    }

    pub fn spans_by_article(&self) -> BTreeMap<&str, Vec<&Span>> {
        let mut out: BTreeMap<&str, Vec<&Span>> = BTreeMap::new();
        for s in &self.spans {
            out.entry(s.article_id.as_str()).or_default().push(s);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.spans {
            let len = self.article_len(&s.article_id).ok_or_else(|| {
                Error::invalid(format!("span refers to unknown article {}", s.article_id))
            })?;
            if s.start >= s.end || s.end > len {
                return Err(Error::SpanBounds {
                    article: s.article_id.clone(),
                    start: s.start,
                    end: s.end,
                    len,
                });
            }
            if let Some(t) = s.technique {
                if t >= self.techniques.len() {
                    return Err(Error::invalid(format!("technique id {t} not in inventory")));
                }
            }
        }
        Ok(())
    }

    /// Subset holding only the given articles and their spans.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Dataset {
        let articles: BTreeMap<String, String> = ids
            .into_iter()
            .filter_map(|id| self.articles.get(id).map(|t| (id.to_string(), t.clone())))
            .collect();
        let spans = self
            .spans
            .iter()
            .filter(|s| articles.contains_key(&s.article_id))
            .cloned()
            .collect();
        Dataset {
            articles,
            spans,
            techniques: self.techniques.clone(),
        }
    }

    /// Label counts over the technique inventory.
    pub fn technique_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.techniques.len()];
        for s in &self.spans {
            if let Some(t) = s.technique {
                counts[t] += 1;
            }
        }
        counts
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn article_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("article{id}.txt"))
}

/// Reads every `article<id>.txt` in `dir`.
pub fn load_articles(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(id) = name
            .strip_prefix("article")
            .and_then(|r| r.strip_suffix(".txt"))
        {
            out.insert(id.to_string(), read(&entry.path())?);
        }
    }
    Ok(out)
}

pub fn write_articles(dir: &Path, articles: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, text) in articles {
        write(&article_path(dir, id), text)?;
    }
    Ok(())
}

/// One label per line; line index is the label id.
pub fn load_techniques(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_techniques(path: &Path, techniques: &[String]) -> Result<()> {
    let mut s = techniques.join("\n");
    s.push('\n');
    write(path, &s)
}

/// Parses a label file. SI rows are `id<TAB>start<TAB>end`; TC rows are
/// `id<TAB>technique<TAB>start<TAB>end`.
pub fn parse_labels(
    contents: &str,
    path: &Path,
    task: Task,
    techniques: &[String],
) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    for (i, raw) in contents.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let (id, technique, start, end) = match (task, fields.as_slice()) {
            (Task::Si, [id, s, e]) => (*id, None, *s, *e),
            (Task::Tc, [id, t, s, e]) => (*id, Some(*t), *s, *e),
            (Task::Si, _) => return Err(err(format!("expected 3 fields, got {}", fields.len()))),
            (Task::Tc, _) => return Err(err(format!("expected 4 fields, got {}", fields.len()))),
        };
        let start: usize = start
            .trim()
            .parse()
            .map_err(|_| err(format!("bad start offset {start:?}")))?;
        let end: usize = end
            .trim()
            .parse()
            .map_err(|_| err(format!("bad end offset {end:?}")))?;
        if end <= start {
            return Err(err(format!("end {end} not after start {start}")));
        }
        let technique = match technique {
            None => None,
            Some(name) => Some(
                techniques
                    .iter()
                    .position(|t| t == name)
                    .ok_or_else(|| err(format!("unknown technique {name:?}")))?,
            ),
        };
        spans.push(Span {
            article_id: id.trim().to_string(),
            start,
            end,
            technique,
        });
    }
    Ok(spans)
}

pub fn load_labels(path: &Path, task: Task, techniques: &[String]) -> Result<Vec<Span>> {
    parse_labels(&read(path)?, path, task, techniques)
}

/// Loads articles and labels, validating every span against its article.
pub fn load_dataset(
    articles_dir: &Path,
    labels: &Path,
    task: Task,
    techniques: &[String],
) -> Result<Dataset> {
    if task == Task::Tc && techniques.is_empty() {
        return Err(Error::invalid("TC labels need a technique inventory"));
    }
    let ds = Dataset {
        articles: load_articles(articles_dir)?,
        spans: load_labels(labels, task, techniques)?,
        techniques: techniques.to_vec(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn format_labels(spans: &[Span], task: Task, techniques: &[String]) -> Result<String> {
    let mut out = String::new();
    for s in spans {
        match task {
            Task::Si => out.push_str(&format!("{}\t{}\t{}\n", s.article_id, s.start, s.end)),
            Task::Tc => {
                let t = s
                    .technique
                    .and_then(|t| techniques.get(t))
                    .ok_or_else(|| Error::invalid("TC row without a known technique"))?;
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    s.article_id, t, s.start, s.end
                ));
            }
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, spans: &[Span], task: Task, techniques: &[String]) -> Result<()> {
    write(path, &format_labels(spans, task, techniques)?)
}
