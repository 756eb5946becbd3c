//! Command-line front end.
//!
//! Every training command resolves a flat configuration map with dotted keys
//! (`hp.lr`, `model.hidden`, ...). Defaults come from the task profile, then
//! the `--config` file, then dedicated flags, then `--set key=value` pairs.
//! Exit codes: 0 success, 1 invalid usage or input, 2 runtime failure.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::analysis::{
    default_feature_specs, load_feature_specs, worsening_features, AnalysisItem,
};
use crate::encoder::{read_checkpoint, write_checkpoint, Checkpoint, SpanClsConfig};
use crate::error::Error;
use crate::metrics::{f1_of, flc_f1};
use crate::pipeline::{
    append_manifest, argmax, average_probs, config_hash, enumerate_ensembles, kfold_datasets,
    kfold_split, mean_std, predict_si, self_train_si, sub_seed, train_si, train_tc, train_tc_self,
    HyperParams, ModelSize, ProbTable, RunRecord, SelfTrainOverwrite, SiModel, TcModel, TcOptions,
    TrainReport,
};
use crate::spandata::{
    char_slice, format_labels, gen_synth, load_articles, load_techniques, parse_labels,
    write_articles, write_techniques, Dataset, Span, SynthConfig, Task,
};

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit 1.
    Usage(String),
    /// Failure while computing: exit 2.
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(_) | Error::Parse { .. } | Error::SpanBounds { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "spfg",
    version,
    about = "Propaganda span identification and technique classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: train, dev and an unlabeled pool.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a span identification tagger.
    TrainSi {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Per-token softmax head instead of the CRF.
        #[arg(long)]
        no_crf: bool,
    },
    /// Train a technique classifier.
    TrainTc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        tc: TcFlags,
    },
    /// Naive self-training: gold first, then gold plus silver annotations.
    SelfTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        tc: TcFlags,
        /// Total number of models trained (SI).
        #[arg(long)]
        iterations: Option<usize>,
        /// Silver examples per gold example in each batch (SI).
        #[arg(long)]
        gold_silver_ratio: Option<f64>,
        #[arg(long)]
        no_crf: bool,
    },
    /// Predict with a checkpoint; TC needs the spans to label in --labels.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Average TC model probabilities, or score every subset with --enumerate.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        enumerate: bool,
    },
    /// Score predictions against gold: FLC-F1 for SI, micro-F1 for TC.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// K-fold cross-validation over train plus dev.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        tc: TcFlags,
        #[arg(long)]
        folds: Option<usize>,
        /// TC option sets, e.g. `plain,reweight,reweight+span-cls+self-train`.
        /// Two or more also score every ensemble of them.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Rank shallow features by how much they lower per-item scores.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        articles: PathBuf,
        /// Gold labels.
        #[arg(long)]
        labels: PathBuf,
        /// Predicted labels.
        #[arg(long)]
        pred: PathBuf,
        /// Feature spec file, `name<TAB>location<TAB>pattern` per line.
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<Task>,
    /// Use the full-scale fine-tuning hyperparameters.
    #[arg(long)]
    paper_scale: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set hp.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct Data {
    /// Directory of `article<id>.txt` training files.
    #[arg(long)]
    articles: Option<PathBuf>,
    /// Training labels TSV.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    dev_articles: Option<PathBuf>,
    #[arg(long)]
    dev_labels: Option<PathBuf>,
    /// Technique inventory, one name per line.
    #[arg(long)]
    techniques: Option<PathBuf>,
    /// Directory of unlabeled texts for self-training.
    #[arg(long)]
    pool: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TcFlags {
    #[arg(long)]
    reweight: bool,
    #[arg(long)]
    span_cls: bool,
    #[arg(long)]
    self_train: bool,
}

fn profiles_help() -> String {
    let row = |name: &str, hp: &HyperParams| {
        format!(
            "  {name:<9} batch {:<3} lr {:<8} steps {:<6} optimizer {:?}\n",
            hp.batch, hp.lr, hp.steps, hp.optimizer
        )
    };
    let mut s = String::from(
        "Hyperparameter profiles (desk is the default, --paper-scale selects paper):\n",
    );
    s += &row("si desk", &HyperParams::si_desk());
    s += &row("tc desk", &HyperParams::tc_desk());
    s += &row("si paper", &HyperParams::si_paper());
    s += &row("tc paper", &HyperParams::tc_paper());
    s
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_help(profiles_help());
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenSynth { common } => cmd_gen_synth(&common),
        Command::TrainSi {
            common,
            data,
            no_crf,
        } => {
            let mut flags = Vec::new();
            if no_crf {
                flags.push(("si.crf", json!(false)));
            }
            let cfg = Resolved::new("train-si", &common, Task::Si, Sections::si(), &data, flags)?;
            cmd_train_si(&cfg, &data)
        }
        Command::TrainTc { common, data, tc } => {
            let cfg = Resolved::new(
                "train-tc",
                &common,
                Task::Tc,
                Sections::tc(),
                &data,
                tc_flags(&tc),
            )?;
            cmd_train_tc(&cfg, &data)
        }
        Command::SelfTrain {
            common,
            data,
            tc,
            iterations,
            gold_silver_ratio,
            no_crf,
        } => {
            let mut flags = tc_flags(&tc);
            flags.push(("tc.self_train", json!(true)));
            if let Some(i) = iterations {
                flags.push(("self_train.iterations", json!(i)));
            }
            if let Some(r) = gold_silver_ratio {
                flags.push(("self_train.ratio", json!(r)));
            }
            if no_crf {
                flags.push(("si.crf", json!(false)));
            }
            let task = task_of(&common, Task::Si)?;
            let sections = match task {
                Task::Si => Sections::si_self(),
                Task::Tc => Sections::tc(),
            };
            let flags = match task {
                Task::Si => flags
                    .into_iter()
                    .filter(|(k, _)| !k.starts_with("tc."))
                    .collect(),
                Task::Tc => flags
                    .into_iter()
                    .filter(|(k, _)| k.starts_with("tc."))
                    .collect(),
            };
            let cfg = Resolved::new("self-train", &common, Task::Si, sections, &data, flags)?;
            match cfg.task {
                Task::Si => cmd_self_train_si(&cfg, &data),
                Task::Tc => cmd_train_tc(&cfg, &data),
            }
        }
        Command::Annotate {
            common,
            model,
            articles,
            labels,
        } => cmd_annotate(&common, &model, &articles, labels.as_deref()),
        Command::Ensemble {
            common,
            models,
            articles,
            labels,
            enumerate,
        } => cmd_ensemble(&common, &models, &articles, &labels, enumerate),
        Command::Score { common, pred, gold } => cmd_score(&common, &pred, &gold),
        Command::Cv {
            common,
            data,
            tc,
            folds,
            variants,
        } => {
            let mut flags = tc_flags(&tc);
            if let Some(k) = folds {
                flags.push(("cv.folds", json!(k)));
            }
            let task = task_of(&common, Task::Tc)?;
            let sections = match task {
                Task::Si => Sections::si().with_cv(),
                Task::Tc => Sections::tc().with_cv(),
            };
            if task == Task::Si {
                flags.retain(|(k, _)| !k.starts_with("tc."));
                if !variants.is_empty() {
                    return Err(usage("--variants applies to TC cross-validation"));
                }
            }
            let cfg = Resolved::new("cv", &common, Task::Tc, sections, &data, flags)?;
            cmd_cv(&cfg, &data, &variants)
        }
        Command::Analyze {
            common,
            articles,
            labels,
            pred,
            features,
        } => cmd_analyze(&common, &articles, &labels, &pred, features.as_deref()),
    }
}

fn tc_flags(tc: &TcFlags) -> Vec<(&'static str, Value)> {
    let mut v = Vec::new();
    if tc.reweight {
        v.push(("tc.reweight", json!(true)));
    }
    if tc.span_cls {
        v.push(("tc.span_cls", json!(true)));
    }
    if tc.self_train {
        v.push(("tc.self_train", json!(true)));
    }
    v
}

// ---------------------------------------------------------------------------
// Configuration

/// Which config sections a command accepts.
#[derive(Clone, Copy, Default)]
struct Sections {
    si: bool,
    tc: bool,
    self_train: bool,
    cv: bool,
    synth: bool,
}

impl Sections {
    fn si() -> Self {
        Sections {
            si: true,
            ..Default::default()
        }
    }

    fn si_self() -> Self {
        Sections {
            si: true,
            self_train: true,
            ..Default::default()
        }
    }

    fn tc() -> Self {
        Sections {
            tc: true,
            ..Default::default()
        }
    }

    fn with_cv(self) -> Self {
        Sections { cv: true, ..self }
    }
}

fn flatten_into(prefix: &str, value: Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                out.insert(format!("{prefix}.{k}"), v);
            }
        }
        other => {
            out.insert(prefix.to_string(), other);
        }
    }
}

fn section<T: DeserializeOwned>(map: &BTreeMap<String, Value>, prefix: &str) -> CliResult<T> {
    let dotted = format!("{prefix}.");
    let obj: Map<String, Value> = map
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|f| (f.to_string(), v.clone())))
        .collect();
    serde_json::from_value(Value::Object(obj))
        .map_err(|e| usage(format!("config section {prefix}: {e}")))
}

fn get<T: DeserializeOwned>(map: &BTreeMap<String, Value>, key: &str) -> CliResult<T> {
    let v = map
        .get(key)
        .cloned()
        .ok_or_else(|| usage(format!("missing config key {key}")))?;
    serde_json::from_value(v).map_err(|e| usage(format!("config key {key}: {e}")))
}

fn read_config_file(path: &Path) -> CliResult<BTreeMap<String, Value>> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} is not JSON: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        _ => Err(usage("config file must hold a JSON object")),
    }
}

fn parse_set(pair: &str) -> CliResult<(String, Value)> {
    let (k, v) = pair
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn task_of(common: &Common, default: Task) -> CliResult<Task> {
    if let Some(t) = common.task {
        return Ok(t);
    }
    if let Some(path) = &common.config {
        if let Some(t) = read_config_file(path)?.get("task") {
            return serde_json::from_value(t.clone())
                .map_err(|e| usage(format!("config key task: {e}")));
        }
    }
    Ok(default)
}

fn profile(task: Task, paper: bool) -> HyperParams {
    match (task, paper) {
        (Task::Si, false) => HyperParams::si_desk(),
        (Task::Tc, false) => HyperParams::tc_desk(),
        (Task::Si, true) => HyperParams::si_paper(),
        (Task::Tc, true) => HyperParams::tc_paper(),
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config types serialize")
}

/// The effective configuration of one command.
struct Resolved {
    command: String,
    task: Task,
    seed: u64,
    map: BTreeMap<String, Value>,
    out: PathBuf,
}

impl Resolved {
    fn new(
        command: &str,
        common: &Common,
        default_task: Task,
        sections: Sections,
        data: &Data,
        flags: Vec<(&str, Value)>,
    ) -> CliResult<Self> {
        let file = match &common.config {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        let task = task_of(common, default_task)?;
        let paper = common.paper_scale
            || match file.get("scale") {
                Some(Value::String(s)) if s == "paper" => true,
                Some(Value::String(s)) if s == "desk" => false,
                Some(other) => return Err(usage(format!("config key scale: {other}"))),
                None => false,
            };

        let mut map = BTreeMap::new();
        map.insert("task".into(), to_value(&task));
        map.insert("scale".into(), json!(if paper { "paper" } else { "desk" }));
        map.insert("seed".into(), Value::Null);
        if sections.synth {
            flatten_into("synth", to_value(&SynthConfig::default()), &mut map);
        } else {
            flatten_into("hp", to_value(&profile(task, paper)), &mut map);
            flatten_into("model", to_value(&ModelSize::default()), &mut map);
        }
        if sections.si {
            map.insert("si.crf".into(), json!(true));
        }
        if sections.tc {
            flatten_into("tc", to_value(&TcOptions::default()), &mut map);
            flatten_into("span_cls", to_value(&SpanClsConfig::default()), &mut map);
            // SI annotator used by TC self-training
            flatten_into("annotator", to_value(&profile(Task::Si, paper)), &mut map);
        }
        if sections.self_train {
            map.insert("self_train.iterations".into(), json!(3));
            map.insert("self_train.ratio".into(), json!(4.0));
        }
        if sections.self_train || sections.tc {
            map.insert("self_train.overwrite".into(), json!(true));
            flatten_into(
                "overwrite",
                to_value(&SelfTrainOverwrite::default()),
                &mut map,
            );
        }
        if sections.cv {
            map.insert("cv.folds".into(), json!(6));
        }

        let mut overrides: Vec<(String, Value)> = file.into_iter().collect();
        if let Some(s) = common.seed {
            overrides.push(("seed".into(), json!(s)));
        }
        overrides.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
        for pair in &common.set {
            overrides.push(parse_set(pair)?);
        }
        for (k, v) in overrides {
            if k == "task" || k == "scale" {
                continue;
            }
            if !map.contains_key(&k) {
                return Err(usage(format!("unknown config key {k} for {command}")));
            }
            map.insert(k, v);
        }
        for (key, path) in [
            ("data.articles", &data.articles),
            ("data.labels", &data.labels),
            ("data.dev_articles", &data.dev_articles),
            ("data.dev_labels", &data.dev_labels),
            ("data.techniques", &data.techniques),
            ("data.pool", &data.pool),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(usage(format!("{} does not exist", p.display())));
                }
                map.insert(key.into(), json!(p.display().to_string()));
            }
        }
        let seed = match map.get("seed") {
            Some(Value::Null) | None => return Err(usage(format!("{command} needs --seed"))),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| usage(format!("config key seed: {e}")))?,
        };
        let out = common
            .out
            .clone()
            .ok_or_else(|| usage(format!("{command} needs --out")))?;
        let cfg = Resolved {
            command: command.to_string(),
            task,
            seed,
            map,
            out,
        };
        if !sections.synth {
            cfg.hp()?.validate()?;
        }
        Ok(cfg)
    }

    fn value(&self) -> Value {
        Value::Object(self.map.clone().into_iter().collect())
    }

    fn hp(&self) -> CliResult<HyperParams> {
        section(&self.map, "hp")
    }

    fn size(&self) -> CliResult<ModelSize> {
        section(&self.map, "model")
    }

    fn record(&self, command: &str, report: &TrainReport, ckpt: Option<PathBuf>) -> RunRecord {
        let config = self.value();
        RunRecord {
            command: command.to_string(),
            config_hash: config_hash(&config),
            config,
            seed: self.seed,
            eval_trace: report.trace.clone(),
            best_score: report.best_score,
            checkpoint: ckpt,
        }
    }
}

// ---------------------------------------------------------------------------
// Data helpers

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn pretty<T: Serialize>(t: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(t)?;
    s.push('\n');
    Ok(s)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("missing {flag}")))
}

/// Sorted distinct technique names of a TC label file.
fn scan_techniques(contents: &str) -> Vec<String> {
    let names: BTreeSet<&str> = contents
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.trim_end_matches('\r').split('\t').collect();
            (f.len() == 4).then_some(f[1])
        })
        .collect();
    names.into_iter().map(String::from).collect()
}

fn techniques_for(data: &Data) -> CliResult<Vec<String>> {
    if let Some(p) = &data.techniques {
        return Ok(load_techniques(p)?);
    }
    let labels = require(&data.labels, "--labels")?;
    let names = scan_techniques(&read_file(labels)?);
    if names.is_empty() {
        return Err(usage("no technique names found; pass --techniques"));
    }
    Ok(names)
}

fn load(articles: &Path, labels: &Path, task: Task, techniques: &[String]) -> CliResult<Dataset> {
    let ds = Dataset {
        articles: load_articles(articles)?,
        spans: parse_labels(&read_file(labels)?, labels, task, techniques)?,
        techniques: techniques.to_vec(),
    };
    ds.validate()?;
    Ok(ds)
}

fn train_and_dev(data: &Data, task: Task, techniques: &[String]) -> CliResult<(Dataset, Dataset)> {
    let train = load(
        require(&data.articles, "--articles")?,
        require(&data.labels, "--labels")?,
        task,
        techniques,
    )?;
    let dev = load(
        require(&data.dev_articles, "--dev-articles")?,
        require(&data.dev_labels, "--dev-labels")?,
        task,
        techniques,
    )?;
    Ok((train, dev))
}

fn label_tc(ds: &Dataset, table: &ProbTable, techniques: &[String]) -> Vec<Span> {
    ds.spans
        .iter()
        .zip(table)
        .map(|(s, p)| Span {
            technique: Some(argmax(p)),
            ..s.clone()
        })
        .map(|mut s| {
            if techniques.is_empty() {
                s.technique = None;
            }
            s
        })
        .collect()
}

fn save(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    Ok(write_checkpoint(path, ckpt)?)
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_gen_synth(common: &Common) -> CliResult<()> {
    let sections = Sections {
        synth: true,
        ..Default::default()
    };
    let mut cfg = Resolved::new(
        "gen-synth",
        common,
        Task::Si,
        sections,
        &Data::default(),
        vec![],
    )?;
    cfg.map.insert("synth.seed".into(), json!(cfg.seed));
    let synth: SynthConfig = section(&cfg.map, "synth")?;
    let corpus = gen_synth(&synth)?;
    let out = &cfg.out;
    create_dir(out)?;
    let t = &corpus.train.techniques;
    for (name, ds) in [("train", &corpus.train), ("dev", &corpus.dev)] {
        write_articles(&out.join(name), &ds.articles)?;
        write_file(
            &out.join(format!("{name}-si.tsv")),
            &format_labels(&ds.spans, Task::Si, t)?,
        )?;
        write_file(
            &out.join(format!("{name}-tc.tsv")),
            &format_labels(&ds.spans, Task::Tc, t)?,
        )?;
    }
    write_articles(&out.join("pool"), &corpus.pool)?;
    write_file(
        &out.join("pool-tc.tsv"),
        &format_labels(&corpus.pool_truth, Task::Tc, t)?,
    )?;
    write_techniques(&out.join("techniques.txt"), t)?;
    write_file(&out.join("config.json"), &pretty(&cfg.value())?)?;
    println!(
        "wrote {} train, {} dev and {} pool articles to {}",
        corpus.train.articles.len(),
        corpus.dev.articles.len(),
        corpus.pool.len(),
        out.display()
    );
    Ok(())
}

fn si_report(report: &TrainReport, dev_pred: &[Span], dev: &Dataset) -> CliResult<Value> {
    let score = flc_f1(dev_pred, &dev.spans, false)?;
    Ok(json!({
        "best_step": report.best_step,
        "best_score": report.best_score,
        "steps_run": report.steps_run,
        "trace": report.trace,
        "dev": { "precision": score.precision, "recall": score.recall, "f1": score.f1 },
    }))
}

fn cmd_train_si(cfg: &Resolved, data: &Data) -> CliResult<()> {
    let (train, dev) = train_and_dev(data, Task::Si, &[])?;
    let crf: bool = get(&cfg.map, "si.crf")?;
    let run = train_si(&train, None, &dev, &cfg.size()?, &cfg.hp()?, crf, cfg.seed)?;
    create_dir(&cfg.out)?;
    let ckpt = cfg.out.join("model.ckpt");
    save(&ckpt, &run.model.to_checkpoint(Some(&run.report))?)?;
    let pred = predict_si(&run.model, &dev.articles)?;
    write_file(
        &cfg.out.join("dev-pred.tsv"),
        &format_labels(&pred, Task::Si, &[])?,
    )?;
    let report = si_report(&run.report, &pred, &dev)?;
    write_file(&cfg.out.join("report.json"), &pretty(&report)?)?;
    append_manifest(
        &cfg.out.join("runs.jsonl"),
        &cfg.record(&cfg.command, &run.report, Some(ckpt)),
    )?;
    println!(
        "best dev FLC-F1 {:.4} at step {}",
        run.report.best_score, run.report.best_step
    );
    Ok(())
}

fn cmd_self_train_si(cfg: &Resolved, data: &Data) -> CliResult<()> {
    let (train, dev) = train_and_dev(data, Task::Si, &[])?;
    let pool = load_articles(require(&data.pool, "--pool")?)?;
    let iterations: usize = get(&cfg.map, "self_train.iterations")?;
    let ratio: f64 = get(&cfg.map, "self_train.ratio")?;
    let crf: bool = get(&cfg.map, "si.crf")?;
    let overwrite: Option<SelfTrainOverwrite> = if get(&cfg.map, "self_train.overwrite")? {
        Some(section(&cfg.map, "overwrite")?)
    } else {
        None
    };
    let runs = self_train_si(
        &train,
        &dev,
        &pool,
        iterations,
        &cfg.size()?,
        &cfg.hp()?,
        overwrite.as_ref(),
        ratio,
        crf,
        cfg.seed,
    )?;
    create_dir(&cfg.out)?;
    let mut reports = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let n = i + 1;
        let ckpt = cfg.out.join(format!("iter{n}.ckpt"));
        save(&ckpt, &run.model.to_checkpoint(Some(&run.report))?)?;
        let pred = predict_si(&run.model, &dev.articles)?;
        write_file(
            &cfg.out.join(format!("dev-pred-iter{n}.tsv")),
            &format_labels(&pred, Task::Si, &[])?,
        )?;
        reports.push(si_report(&run.report, &pred, &dev)?);
        append_manifest(
            &cfg.out.join("runs.jsonl"),
            &cfg.record(&format!("{}:iter{n}", cfg.command), &run.report, Some(ckpt)),
        )?;
        println!(
            "iteration {n}: best dev FLC-F1 {:.4}",
            run.report.best_score
        );
    }
    write_file(
        &cfg.out.join("report.json"),
        &pretty(&json!({ "iterations": reports }))?,
    )?;
    Ok(())
}

fn tc_setup(cfg: &Resolved) -> CliResult<(TcOptions, SpanClsConfig, Option<SelfTrainOverwrite>)> {
    let opts: TcOptions = section(&cfg.map, "tc")?;
    let span: SpanClsConfig = section(&cfg.map, "span_cls")?;
    let overwrite = if get(&cfg.map, "self_train.overwrite")? {
        Some(section(&cfg.map, "overwrite")?)
    } else {
        None
    };
    Ok((opts, span, overwrite))
}

fn tc_report(report: &TrainReport, pred: &[Span], dev: &Dataset) -> Value {
    json!({
        "best_step": report.best_step,
        "best_score": report.best_score,
        "steps_run": report.steps_run,
        "trace": report.trace,
        "dev": { "micro_f1": tc_micro_f1(pred, &dev.spans) },
    })
}

fn cmd_train_tc(cfg: &Resolved, data: &Data) -> CliResult<()> {
    let techniques = techniques_for(data)?;
    let (train, dev) = train_and_dev(data, Task::Tc, &techniques)?;
    let (opts, span, overwrite) = tc_setup(cfg)?;
    let size = cfg.size()?;
    let hp = cfg.hp()?;
    create_dir(&cfg.out)?;
    let run = if opts.self_train {
        let pool = load_articles(require(&data.pool, "--pool")?)?;
        let annotator_hp: HyperParams = section(&cfg.map, "annotator")?;
        let r = train_tc_self(
            &train,
            &dev,
            &pool,
            opts,
            &size,
            &span,
            &annotator_hp,
            &hp,
            overwrite.as_ref(),
            cfg.seed,
        )?;
        let a = cfg.out.join("annotator.ckpt");
        save(
            &a,
            &r.annotator.model.to_checkpoint(Some(&r.annotator.report))?,
        )?;
        let l = cfg.out.join("labeler.ckpt");
        save(&l, &r.labeler.model.to_checkpoint(Some(&r.labeler.report))?)?;
        write_file(
            &cfg.out.join("silver-tc.tsv"),
            &format_labels(&r.silver.spans, Task::Tc, &r.silver.techniques)?,
        )?;
        let manifest = cfg.out.join("runs.jsonl");
        append_manifest(
            &manifest,
            &cfg.record(
                &format!("{}:annotator", cfg.command),
                &r.annotator.report,
                Some(a),
            ),
        )?;
        append_manifest(
            &manifest,
            &cfg.record(
                &format!("{}:labeler", cfg.command),
                &r.labeler.report,
                Some(l),
            ),
        )?;
        r.run
    } else {
        train_tc(&train, None, &dev, opts, &size, &span, &hp, cfg.seed)?
    };
    let ckpt = cfg.out.join("model.ckpt");
    save(&ckpt, &run.model.to_checkpoint(Some(&run.report))?)?;
    let pred = label_tc(&dev, &run.model.predict_dataset(&dev)?, &techniques);
    write_file(
        &cfg.out.join("dev-pred.tsv"),
        &format_labels(&pred, Task::Tc, &techniques)?,
    )?;
    write_file(
        &cfg.out.join("report.json"),
        &pretty(&tc_report(&run.report, &pred, &dev))?,
    )?;
    append_manifest(
        &cfg.out.join("runs.jsonl"),
        &cfg.record(&cfg.command, &run.report, Some(ckpt)),
    )?;
    println!(
        "best dev micro-F1 {:.4} at step {}",
        run.report.best_score, run.report.best_step
    );
    Ok(())
}

fn out_dir(common: &Common, command: &str) -> CliResult<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| usage(format!("{command} needs --out")))?;
    create_dir(&out)?;
    Ok(out)
}

/// Spans to classify: TC rows keep their gold label, SI rows carry none.
fn spans_for_tc(labels: &Path, techniques: &[String]) -> CliResult<Vec<Span>> {
    let text = read_file(labels)?;
    let tc_rows = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.split('\t').count() == 4);
    let task = if tc_rows { Task::Tc } else { Task::Si };
    Ok(parse_labels(&text, labels, task, techniques)?)
}

fn cmd_annotate(
    common: &Common,
    model: &Path,
    articles: &Path,
    labels: Option<&Path>,
) -> CliResult<()> {
    let out = out_dir(common, "annotate")?;
    let ckpt = read_checkpoint(model)?;
    let texts = load_articles(articles)?;
    let tsv = match ckpt.kind.as_str() {
        "si" => {
            let m = SiModel::from_checkpoint(&ckpt)?;
            format_labels(&predict_si(&m, &texts)?, Task::Si, &[])?
        }
        "tc" => {
            let m = TcModel::from_checkpoint(&ckpt)?;
            let labels = labels.ok_or_else(|| usage("a TC model needs the spans in --labels"))?;
            let t = m.config.techniques.clone();
            let ds = Dataset {
                articles: texts,
                spans: spans_for_tc(labels, &t)?,
                techniques: t.clone(),
            };
            ds.validate()?;
            format_labels(&label_tc(&ds, &m.predict_dataset(&ds)?, &t), Task::Tc, &t)?
        }
        other => return Err(usage(format!("unknown checkpoint kind {other}"))),
    };
    write_file(&out.join("predictions.tsv"), &tsv)
}

fn cmd_ensemble(
    common: &Common,
    models: &[PathBuf],
    articles: &Path,
    labels: &Path,
    enumerate: bool,
) -> CliResult<()> {
    let out = out_dir(common, "ensemble")?;
    let loaded: Vec<TcModel> = models
        .iter()
        .map(|p| TcModel::from_checkpoint(&read_checkpoint(p)?))
        .collect::<crate::Result<_>>()?;
    let t = loaded[0].config.techniques.clone();
    if loaded.iter().any(|m| m.config.techniques != t) {
        return Err(usage("ensemble members use different label inventories"));
    }
    let ds = Dataset {
        articles: load_articles(articles)?,
        spans: spans_for_tc(labels, &t)?,
        techniques: t.clone(),
    };
    ds.validate()?;
    let tables: Vec<ProbTable> = loaded
        .iter()
        .map(|m| m.predict_dataset(&ds))
        .collect::<crate::Result<_>>()?;
    if enumerate {
        let gold: Vec<usize> = ds
            .spans
            .iter()
            .map(|s| s.technique)
            .collect::<Option<_>>()
            .ok_or_else(|| usage("--enumerate needs gold TC labels"))?;
        let results = enumerate_ensembles(&[(tables, gold)])?;
        let mut tsv = String::from("members\tmean\tstd\n");
        for r in &results {
            let names: Vec<String> = r
                .members
                .iter()
                .map(|&i| models[i].display().to_string())
                .collect();
            tsv.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                names.join(","),
                r.mean,
                r.std
            ));
        }
        print!("{tsv}");
        write_file(&out.join("ensembles.tsv"), &tsv)
    } else {
        let avg = average_probs(&tables.iter().collect::<Vec<_>>())?;
        let pred = label_tc(&ds, &avg, &t);
        if ds.spans.iter().all(|s| s.technique.is_some()) {
            let f1 = tc_micro_f1(&pred, &ds.spans);
            println!("ensemble micro-F1 {f1:.4}");
            write_file(
                &out.join("score.json"),
                &pretty(&json!({ "task": "tc", "micro_f1": f1 }))?,
            )?;
        }
        write_file(
            &out.join("predictions.tsv"),
            &format_labels(&pred, Task::Tc, &t)?,
        )
    }
}

/// Micro-F1 over spans matched by article and offsets. Gold spans without a
/// prediction count as misses, unmatched predictions as false positives.
fn tc_micro_f1(pred: &[Span], gold: &[Span]) -> f64 {
    let key = |s: &Span| (s.article_id.clone(), s.start, s.end);
    let gold_map: BTreeMap<_, Option<usize>> = gold.iter().map(|s| (key(s), s.technique)).collect();
    let tp = pred
        .iter()
        .filter(|s| gold_map.get(&key(s)).is_some_and(|g| *g == s.technique))
        .count() as f64;
    let p = if pred.is_empty() {
        0.0
    } else {
        tp / pred.len() as f64
    };
    let r = if gold.is_empty() {
        0.0
    } else {
        tp / gold.len() as f64
    };
    f1_of(p, r)
}

fn cmd_score(common: &Common, pred: &Path, gold: &Path) -> CliResult<()> {
    let task = common.task.ok_or_else(|| usage("score needs --task"))?;
    let pred_text = read_file(pred)?;
    let gold_text = read_file(gold)?;
    let report = match task {
        Task::Si => {
            let p = parse_labels(&pred_text, pred, Task::Si, &[])?;
            let g = parse_labels(&gold_text, gold, Task::Si, &[])?;
            let s = flc_f1(&p, &g, false)?;
            json!({ "task": "si", "precision": s.precision, "recall": s.recall, "f1": s.f1 })
        }
        Task::Tc => {
            let mut names = scan_techniques(&gold_text);
            names.extend(scan_techniques(&pred_text));
            names.sort();
            names.dedup();
            let p = parse_labels(&pred_text, pred, Task::Tc, &names)?;
            let g = parse_labels(&gold_text, gold, Task::Tc, &names)?;
            json!({ "task": "tc", "f1": tc_micro_f1(&p, &g) })
        }
    };
    let text = pretty(&report)?;
    print!("{text}");
    if common.out.is_some() {
        write_file(&out_dir(common, "score")?.join("score.json"), &text)?;
    }
    Ok(())
}

/// Parses `plain`, `reweight`, `span-cls`, `self-train` joined by `+`.
fn parse_variant(name: &str) -> CliResult<TcOptions> {
    let mut o = TcOptions::default();
    for part in name.split('+').map(str::trim) {
        match part {
            "plain" => {}
            "reweight" => o.reweight = true,
            "span-cls" => o.span_cls = true,
            "self-train" => o.self_train = true,
            other => return Err(usage(format!("unknown variant part {other:?}"))),
        }
    }
    Ok(o)
}

fn cmd_cv(cfg: &Resolved, data: &Data, variants: &[String]) -> CliResult<()> {
    let k: usize = get(&cfg.map, "cv.folds")?;
    let hp = cfg.hp()?;
    let size = cfg.size()?;
    create_dir(&cfg.out)?;
    let manifest = cfg.out.join("runs.jsonl");
    match cfg.task {
        Task::Si => {
            let (train, dev) = train_and_dev(data, Task::Si, &[])?;
            let mut all = train.clone();
            all.articles.extend(dev.articles.clone());
            all.spans.extend(dev.spans.clone());
            let ids: Vec<String> = all.articles.keys().cloned().collect();
            let folds = kfold_split(&ids, k, cfg.seed)?;
            let crf: bool = get(&cfg.map, "si.crf")?;
            let mut scores = Vec::new();
            for (f, held) in folds.iter().enumerate() {
                let held_set: BTreeSet<&str> = held.iter().map(String::as_str).collect();
                let test = all.subset(held.iter().map(String::as_str));
                let fit = all.subset(
                    ids.iter()
                        .map(String::as_str)
                        .filter(|i| !held_set.contains(i)),
                );
                let run = train_si(
                    &fit,
                    None,
                    &test,
                    &size,
                    &hp,
                    crf,
                    sub_seed(cfg.seed, 100 + f as u64),
                )?;
                append_manifest(
                    &manifest,
                    &cfg.record(&format!("cv:fold{f}"), &run.report, None),
                )?;
                scores.push(run.report.best_score);
            }
            let (mean, std) = mean_std(&scores);
            println!("{k}-fold FLC-F1 {mean:.4} ± {std:.4}");
            write_file(
                &cfg.out.join("cv.json"),
                &pretty(&json!({ "task": "si", "scores": scores, "mean": mean, "std": std }))?,
            )
        }
        Task::Tc => {
            let techniques = techniques_for(data)?;
            let (train, dev) = train_and_dev(data, Task::Tc, &techniques)?;
            let (flag_opts, span, overwrite) = tc_setup(cfg)?;
            let named: Vec<(String, TcOptions)> = if variants.is_empty() {
                vec![("configured".into(), flag_opts)]
            } else {
                variants
                    .iter()
                    .map(|v| Ok((v.clone(), parse_variant(v)?)))
                    .collect::<CliResult<_>>()?
            };
            let pool = if named.iter().any(|(_, o)| o.self_train) {
                Some(load_articles(require(&data.pool, "--pool")?)?)
            } else {
                None
            };
            let annotator_hp: HyperParams = section(&cfg.map, "annotator")?;
            let folds = kfold_datasets(&train, &dev, k, cfg.seed)?;
            let mut per_fold = Vec::new();
            let mut variant_scores = vec![Vec::new(); named.len()];
            for (f, (fit, test)) in folds.iter().enumerate() {
                let seed = sub_seed(cfg.seed, 100 + f as u64);
                let gold: Vec<usize> = test
                    .spans
                    .iter()
                    .map(|s| s.technique.unwrap_or(0))
                    .collect();
                let mut tables = Vec::new();
                for (v, (name, opts)) in named.iter().enumerate() {
                    let run = match (&pool, opts.self_train) {
                        (Some(pool), true) => {
                            train_tc_self(
                                fit,
                                test,
                                pool,
                                *opts,
                                &size,
                                &span,
                                &annotator_hp,
                                &hp,
                                overwrite.as_ref(),
                                seed,
                            )?
                            .run
                        }
                        _ => train_tc(fit, None, test, *opts, &size, &span, &hp, seed)?,
                    };
                    let table = run.model.predict_dataset(test)?;
                    let pred = label_tc(test, &table, &techniques);
                    variant_scores[v].push(tc_micro_f1(&pred, &test.spans));
                    append_manifest(
                        &manifest,
                        &cfg.record(&format!("cv:{name}:fold{f}"), &run.report, None),
                    )?;
                    tables.push(table);
                }
                per_fold.push((tables, gold));
            }
            let summary: Vec<Value> = named
                .iter()
                .zip(&variant_scores)
                .map(|((name, _), s)| {
                    let (mean, std) = mean_std(s);
                    println!("{name}: {k}-fold micro-F1 {mean:.4} ± {std:.4}");
                    json!({ "variant": name, "scores": s, "mean": mean, "std": std })
                })
                .collect();
            let mut report = json!({ "task": "tc", "variants": summary });
            if named.len() >= 2 {
                let ens = enumerate_ensembles(&per_fold)?;
                let mut tsv = String::from("members\tmean\tstd\n");
                for r in &ens {
                    let names: Vec<&str> = r.members.iter().map(|&i| named[i].0.as_str()).collect();
                    tsv.push_str(&format!(
                        "{}\t{:.6}\t{:.6}\n",
                        names.join(","),
                        r.mean,
                        r.std
                    ));
                }
                write_file(&cfg.out.join("ensembles.tsv"), &tsv)?;
                report["ensembles"] = to_value(&ens);
            }
            write_file(&cfg.out.join("cv.json"), &pretty(&report)?)
        }
    }
}

/// The line of `text` holding `[start, end)`, with the span offsets
/// relative to that line.
fn line_window(text: &str, start: usize, end: usize) -> (String, usize, usize) {
    let chars: Vec<char> = text.chars().collect();
    let end = end.min(chars.len());
    let lo = chars[..start.min(end)]
        .iter()
        .rposition(|&c| c == '\n')
        .map_or(0, |i| i + 1);
    let hi = chars[end..]
        .iter()
        .position(|&c| c == '\n')
        .map_or(chars.len(), |i| end + i);
    (char_slice(text, lo, hi).to_string(), start - lo, end - lo)
}

fn cmd_analyze(
    common: &Common,
    articles: &Path,
    labels: &Path,
    pred: &Path,
    features: Option<&Path>,
) -> CliResult<()> {
    let task = common.task.ok_or_else(|| usage("analyze needs --task"))?;
    let texts = load_articles(articles)?;
    let specs = match features {
        Some(p) => load_feature_specs(p)?,
        None => default_feature_specs(),
    };
    let gold_text = read_file(labels)?;
    let pred_text = read_file(pred)?;
    let (items, scores) = match task {
        Task::Si => {
            let g = parse_labels(&gold_text, labels, Task::Si, &[])?;
            let p = parse_labels(&pred_text, pred, Task::Si, &[])?;
            let per_item = flc_f1(&p, &g, false)?.per_item;
            let offsets = |spans: &[Span], id: &str| -> Vec<(usize, usize)> {
                spans
                    .iter()
                    .filter(|s| s.article_id == id)
                    .map(|s| (s.start, s.end))
                    .collect()
            };
            let mut items = Vec::new();
            let mut scores = Vec::new();
            for (id, score) in per_item {
                let text = texts
                    .get(&id)
                    .ok_or_else(|| usage(format!("no text for article {id}")))?;
                items.push(AnalysisItem::identified(
                    text.clone(),
                    offsets(&g, &id),
                    offsets(&p, &id),
                ));
                scores.push(score);
            }
            (items, scores)
        }
        Task::Tc => {
            let mut names = scan_techniques(&gold_text);
            names.extend(scan_techniques(&pred_text));
            names.sort();
            names.dedup();
            let g = parse_labels(&gold_text, labels, Task::Tc, &names)?;
            let p = parse_labels(&pred_text, pred, Task::Tc, &names)?;
            let predicted: BTreeMap<_, _> = p
                .iter()
                .map(|s| ((s.article_id.as_str(), s.start, s.end), s.technique))
                .collect();
            let mut items = Vec::new();
            let mut scores = Vec::new();
            for s in &g {
                let text = texts
                    .get(&s.article_id)
                    .ok_or_else(|| usage(format!("no text for article {}", s.article_id)))?;
                let (window, a, b) = line_window(text, s.start, s.end);
                items.push(AnalysisItem::classified(window, a, b));
                let hit =
                    predicted.get(&(s.article_id.as_str(), s.start, s.end)) == Some(&s.technique);
                scores.push(if hit { 1.0 } else { 0.0 });
            }
            (items, scores)
        }
    };
    let report = worsening_features(&items, &scores, &specs)?;
    for n in &report.notices {
        eprintln!("note: {n}");
    }
    let tsv = report.to_tsv();
    print!("{tsv}");
    if common.out.is_some() {
        write_file(&out_dir(common, "analyze")?.join("worsening.tsv"), &tsv)?;
    }
    Ok(())
}
