//! Command-line front end: `generate`, `train`, `score`, `eval` and `blobs`.
//!
//! Every command resolves its settings from an optional flat config file
//! (`key = value` lines, `#` comments) overlaid with command-line flags, and
//! writes a `manifest.txt` into its output directory. The manifest uses the
//! same grammar, so `--config <dir>/manifest.txt` reruns the command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{gen_blobs, generate_named, write_series_csv, LabeledSeries, DEFAULT_LEN};
use crate::evalmod::{chrono_split, positive_mask, roc_auc, EvalConfig, MetricsReport, MinMaxTransform, ToleranceMode};
use crate::pipeline::{Mode, ScoreSeries};
use crate::trainer::{fit, TrainConfig, TrainedModel};
use crate::tstest::{blob_power, BlobConfig};
use crate::Error;

pub const MANIFEST: &str = "manifest.txt";

/// Failure of a command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Parameter(_) => CliError::Usage(msg),
            Error::Shape(_) | Error::Parse(_) | Error::Io(_) | Error::UndefinedAuc(_) => CliError::Data(msg),
            Error::NonFinite(_) | Error::State(_) => CliError::Numeric(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "klcpd", version, about = "Kernel change-point detection with learned deep kernels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic series (CSV plus labels) or a blob sample.
    Generate(GenerateArgs),
    /// Train a kernel on the training split of a series.
    Train(TrainArgs),
    /// Score one split of a series with a trained model.
    Score(ScoreArgs),
    /// AUC of a score file against the labels of the same split.
    Eval(EvalArgs),
    /// Test power of the blob kernel selectors.
    Blobs(BlobsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// jumping-mean, scaling-variance, gaussian-mixtures, highdim-variance or blobs.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub len: Option<usize>,
    /// Dimension for highdim-variance.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Blob eigenvalue ratio.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Blob sample count.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Series CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// dataspace, codespace, negsample or klcpd.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Train/validation/test fractions, comma separated.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// all, train, val or test.
    #[arg(long)]
    pub part: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Score CSV written by `score`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub part: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub tolerance: Option<usize>,
    /// forward or symmetric.
    #[arg(long)]
    pub tolerance_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct BlobsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Eigenvalue ratio of Q.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Eigenvalue ratio of the surrogate G; defaults to eps - 2.
    #[arg(long)]
    pub eps_g: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sparse: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub perms: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses the flat config grammar: one `key = value` per line, blank lines
/// and `#` comments ignored, later keys override earlier ones.
pub fn parse_config(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("config line {}: expected key = value", i + 1));
        };
        let k = k.trim();
        if k.is_empty() {
            return usage(format!("config line {}: empty key", i + 1));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Resolved settings of one command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn resolve(command: &str, common: &Common, flags: Vec<(&str, Option<String>)>, allowed: &[&str]) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                if k == "command" {
                    if v != command {
                        return usage(format!("config is for '{v}', not '{command}'"));
                    }
                    continue;
                }
                if k.starts_with("sha256.") {
                    continue;
                }
                values.insert(k, v);
            }
        }
        for kv in &common.set {
            let Some((k, v)) = kv.split_once('=') else {
                return usage(format!("--set expects key=value, got '{kv}'"));
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(out) = &common.out {
            values.insert("out".into(), out.display().to_string());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        for k in values.keys() {
            if k != "out" && !allowed.contains(&k.as_str()) {
                return usage(format!("unknown setting '{k}' for {command}"));
            }
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> CliResult<T>
    where
        T: ToString,
    {
        match self.values.get(key) {
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("bad value '{v}' for {key}"))),
            None => {
                self.values.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    fn required(&self, key: &str) -> CliResult<String> {
        self.values
            .get(key)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("missing required setting '{key}'")))
    }

    fn path(&self, key: &str) -> CliResult<PathBuf> {
        Ok(PathBuf::from(self.required(key)?))
    }

    fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.path("out")?;
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, command: &str, settings: &Settings, inputs: &[(&str, &Path)]) -> CliResult<()> {
    let mut text = format!("command = {command}\n");
    for (k, v) in &settings.values {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for (name, path) in inputs {
        text.push_str(&format!("sha256.{name} = {}\n", sha256_file(path)?));
    }
    fs::write(dir.join(MANIFEST), text).map_err(|e| CliError::Data(e.to_string()))
}

/// Reads `key` from the manifest in the directory holding `path`, if any.
fn upstream(path: &Path, key: &str) -> Option<String> {
    let dir = path.parent()?;
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    parse_config(&text).ok()?.remove(key)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn parse_split(s: &str) -> CliResult<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad split '{s}'")))?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => usage(format!("split needs three fractions, got '{s}'")),
    }
}

const DEFAULT_SPLIT: &str = "0.6,0.2,0.2";

fn select_part(data: &LabeledSeries, part: &str, split: [f64; 3]) -> CliResult<LabeledSeries> {
    if part == "all" {
        return Ok(data.clone());
    }
    let [train, val, test] = chrono_split(data, split)?;
    match part {
        "train" => Ok(train),
        "val" => Ok(val),
        "test" => Ok(test),
        _ => usage(format!("unknown part '{part}' (all, train, val, test)")),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<String> {
    let mut s = Settings::resolve(
        "generate",
        &a.common,
        vec![
            ("dataset", a.dataset.clone()),
            ("seed", opt(&a.seed)),
            ("len", opt(&a.len)),
            ("dim", opt(&a.dim)),
            ("epsilon", opt(&a.epsilon)),
            ("n", opt(&a.n)),
        ],
        &["dataset", "seed", "len", "dim", "epsilon", "n"],
    )?;
    let dataset = s.required("dataset")?;
    let seed: u64 = s.parse_or("seed", 0)?;
    let dir = s.out_dir()?;
    let summary = if dataset == "blobs" {
        let eps: f64 = s.parse_or("epsilon", 1.0)?;
        let n: usize = s.parse_or("n", 500)?;
        let x = gen_blobs(eps, n, seed)?;
        write_series_csv(&dir.join("blobs.csv"), &x)?;
        format!("blobs: n={n} d=2 epsilon={eps}")
    } else {
        let len: usize = s.parse_or("len", DEFAULT_LEN)?;
        let dim: usize = s.parse_or("dim", 1)?;
        let data = generate_named(&dataset, seed, len, dim).map_err(|e| match e {
            Error::Config(m) => CliError::Usage(m),
            other => other.into(),
        })?;
        data.save(&dir.join("series.csv"))?;
        format!("{dataset}: T={} d={} labels={}", data.len(), data.dim(), data.labels.len())
    };
    write_manifest(&dir, "generate", &s, &[])?;
    Ok(summary)
}

fn train_config(s: &mut Settings) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, default) in TrainConfig::default().to_pairs() {
        let v = s.parse_or::<String>(k, default)?;
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

const TRAIN_KEYS: [&str; 13] = [
    "lr",
    "clip_c",
    "n_c",
    "lambda",
    "beta",
    "epsilon",
    "max_epochs",
    "batch",
    "window",
    "d_h",
    "seed",
    "noise",
    "neg_noise",
];

pub fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let mut allowed = vec!["data", "mode", "split"];
    allowed.extend(TRAIN_KEYS);
    let mut s = Settings::resolve(
        "train",
        &a.common,
        vec![
            ("data", a.data.as_ref().map(|p| p.display().to_string())),
            ("mode", a.mode.clone()),
            ("seed", opt(&a.seed)),
            ("max_epochs", opt(&a.max_epochs)),
            ("lr", opt(&a.lr)),
            ("lambda", opt(&a.lambda)),
            ("beta", opt(&a.beta)),
            ("window", opt(&a.window)),
            ("split", a.split.clone()),
        ],
        &allowed,
    )?;
    let data_path = s.path("data")?;
    let mode = Mode::parse(&s.parse_or::<String>("mode", Mode::Klcpd.name().into())?).map_err(|e| CliError::Usage(e.to_string()))?;
    let split = parse_split(&s.parse_or::<String>("split", DEFAULT_SPLIT.into())?)?;
    let cfg = train_config(&mut s)?;
    let data = LabeledSeries::load(&data_path)?;
    let [train, _, _] = chrono_split(&data, split)?;
    let tf = MinMaxTransform::fit(&train.series)?;
    let out = fit(&tf.apply(&train.series)?, mode, &cfg)?;
    let mut model = out.model;
    model.normalization = Some(tf);
    let dir = s.out_dir()?;
    model.save(&dir.join("model.ckpt"))?;
    fs::write(dir.join("train_log.jsonl"), out.log.to_jsonl()).map_err(|e| CliError::Data(e.to_string()))?;
    write_manifest(&dir, "train", &s, &[("data", &data_path)])?;
    Ok(format!(
        "{}: {} epochs, converged={}, train T={}",
        mode.name(),
        out.log.records.len(),
        out.converged,
        train.len()
    ))
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<String> {
    let mut s = Settings::resolve(
        "score",
        &a.common,
        vec![
            ("model", a.model.as_ref().map(|p| p.display().to_string())),
            ("data", a.data.as_ref().map(|p| p.display().to_string())),
            ("part", a.part.clone()),
            ("split", a.split.clone()),
        ],
        &["model", "data", "part", "split", "mode", "seed"],
    )?;
    let model_path = s.path("model")?;
    let data_path = s.path("data")?;
    let part: String = s.parse_or("part", "test".to_string())?;
    let split = parse_split(&s.parse_or::<String>("split", DEFAULT_SPLIT.into())?)?;
    let model = TrainedModel::load(&model_path)?;
    s.values.insert("mode".into(), model.mode.name().into());
    if let Some(seed) = upstream(&model_path, "seed") {
        s.values.insert("seed".into(), seed);
    }
    let data = LabeledSeries::load(&data_path)?;
    let piece = select_part(&data, &part, split)?;
    let scores = model.score_raw(&piece.series)?;
    if scores.scores.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric("non-finite score".into()));
    }
    let dir = s.out_dir()?;
    scores.save(&dir.join("scores.csv"))?;
    write_manifest(&dir, "score", &s, &[("model", &model_path), ("data", &data_path)])?;
    Ok(format!("{} scores for part '{part}' (T={})", scores.len(), piece.len()))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let mut s = Settings::resolve(
        "eval",
        &a.common,
        vec![
            ("scores", a.scores.as_ref().map(|p| p.display().to_string())),
            ("data", a.data.as_ref().map(|p| p.display().to_string())),
            ("part", a.part.clone()),
            ("split", a.split.clone()),
            ("tolerance", opt(&a.tolerance)),
            ("tolerance_mode", a.tolerance_mode.clone()),
        ],
        &["scores", "data", "part", "split", "tolerance", "tolerance_mode"],
    )?;
    let scores_path = s.path("scores")?;
    let data_path = s.path("data")?;
    let defaults = EvalConfig::default();
    let part: String = s.parse_or("part", "test".to_string())?;
    let split = parse_split(&s.parse_or::<String>("split", DEFAULT_SPLIT.into())?)?;
    let tolerance: usize = s.parse_or("tolerance", defaults.tolerance)?;
    let tolerance_mode = ToleranceMode::parse(&s.parse_or::<String>("tolerance_mode", defaults.tolerance_mode.name().into())?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let scores = ScoreSeries::load(&scores_path)?;
    let data = LabeledSeries::load(&data_path)?;
    if data.labels.is_empty() {
        return Err(CliError::Data(format!("no labels next to {}", data_path.display())));
    }
    let piece = select_part(&data, &part, split)?;
    let auc = roc_auc(scores.start, &scores.scores, &piece.labels, tolerance, tolerance_mode)?;
    let positives = positive_mask(scores.start, scores.len(), &piece.labels, tolerance, tolerance_mode)
        .iter()
        .filter(|&&p| p)
        .count();
    let mut report = MetricsReport::default();
    report.set("auc", auc);
    report.set("dataset", data_path.display());
    report.set("mode", upstream(&scores_path, "mode").unwrap_or_else(|| "unknown".into()));
    report.set("seed", upstream(&scores_path, "seed").unwrap_or_else(|| "none".into()));
    report.set("part", &part);
    report.set("tolerance", tolerance);
    report.set("tolerance_mode", tolerance_mode.name());
    report.set("n_scores", scores.len());
    report.set("n_positive", positives);
    let dir = s.out_dir()?;
    report.save(&dir.join("metrics.txt"))?;
    write_manifest(&dir, "eval", &s, &[("scores", &scores_path), ("data", &data_path)])?;
    Ok(format!("auc = {auc}"))
}

pub fn cmd_blobs(a: &BlobsArgs) -> CliResult<String> {
    let mut s = Settings::resolve(
        "blobs",
        &a.common,
        vec![
            ("eps", opt(&a.eps)),
            ("eps_g", opt(&a.eps_g)),
            ("m", opt(&a.m)),
            ("sparse", opt(&a.sparse)),
            ("trials", opt(&a.trials)),
            ("perms", opt(&a.perms)),
            ("alpha", opt(&a.alpha)),
            ("lambda", opt(&a.lambda)),
            ("seed", opt(&a.seed)),
        ],
        &[
            "eps", "eps_g", "m", "sparse", "trials", "perms", "alpha", "lambda", "seed", "bandwidths", "sigma_lo",
            "sigma_hi",
        ],
    )?;
    let d = BlobConfig::default();
    let epsilon_q: f64 = s.parse_or("eps", d.epsilon_q)?;
    let cfg = BlobConfig {
        epsilon_q,
        epsilon_g: s.parse_or("eps_g", (epsilon_q - 2.0).max(1.0))?,
        m: s.parse_or("m", d.m)?,
        sparse: s.parse_or("sparse", d.sparse)?,
        trials: s.parse_or("trials", d.trials)?,
        n_permutations: s.parse_or("perms", d.n_permutations)?,
        alpha: s.parse_or("alpha", d.alpha)?,
        n_bandwidths: s.parse_or("bandwidths", d.n_bandwidths)?,
        sigma_lo: s.parse_or("sigma_lo", d.sigma_lo)?,
        sigma_hi: s.parse_or("sigma_hi", d.sigma_hi)?,
        lambda: s.parse_or("lambda", d.lambda)?,
        seed: s.parse_or("seed", d.seed)?,
    };
    let table = blob_power(&cfg)?;
    let mut csv = String::from("selector,power\n");
    let mut summary = String::new();
    for (sel, p) in &table {
        csv.push_str(&format!("{},{p}\n", sel.name()));
        summary.push_str(&format!("{} {p:.3}\n", sel.name()));
    }
    let dir = s.out_dir()?;
    fs::write(dir.join("power.csv"), csv).map_err(|e| CliError::Data(e.to_string()))?;
    write_manifest(&dir, "blobs", &s, &[])?;
    Ok(summary.trim_end().to_string())
}

/// Runs one parsed command and returns its summary line.
pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Blobs(a) => cmd_blobs(a),
    }
}
