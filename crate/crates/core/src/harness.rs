//! Experiment configuration, metrics, result export and the `profe` CLI.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::QuantMode;
use crate::datagen::PartitionScheme;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::federation::{self, Algorithm, RunReport};

/// Unweighted mean over classes of per-class F1.
///
/// Classes absent from both `predictions` and `truths` are left out of the
/// mean; a zero precision or recall denominator counts as 0.
pub fn macro_f1(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("macro F1 of an empty sample".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::dim("macro_f1", truths.len(), predictions.len()));
    }
    if let Some(&c) = predictions.iter().chain(truths).find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("class {c} out of range for {n_classes} classes")));
    }
    let mut tp = vec![0u64; n_classes];
    let mut predicted = vec![0u64; n_classes];
    let mut actual = vec![0u64; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if predicted[c] == 0 && actual[c] == 0 {
            continue;
        }
        present += 1;
        let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
        let recall = if actual[c] == 0 { 0.0 } else { tp[c] as f64 / actual[c] as f64 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / present as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Blobs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    #[default]
    FullMesh,
}

/// Quantization of the exchanged model as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum QuantSetting {
    F16,
    I16,
    None,
}

impl From<QuantSetting> for QuantMode {
    fn from(q: QuantSetting) -> Self {
        match q {
            QuantSetting::F16 => QuantMode::Float16,
            QuantSetting::I16 => QuantMode::Int16Affine,
            QuantSetting::None => QuantMode::Float32,
        }
    }
}

/// A full run description. The JSON form uses the same names as the CLI flags
/// (with underscores); flags given on the command line win over file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algo: Algorithm,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Use only the first `samples` examples of the dataset.
    pub samples: Option<usize>,
    pub nodes: usize,
    pub topology: TopologyKind,
    pub rounds: usize,
    pub epochs: usize,
    pub partition: PartitionScheme,
    pub quant: QuantSetting,
    pub temperature: f32,
    pub alpha_s: f32,
    pub beta_s: f32,
    pub beta_t: f32,
    pub beta_limit: f32,
    pub literal_eq4: bool,
    pub lr: f32,
    pub batch_size: usize,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub repr_width: usize,
    pub blob_classes: usize,
    pub blob_per_class: usize,
    pub blob_dim: usize,
    pub blob_spread: f32,
    pub test_fraction: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub sequential: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        ExperimentConfig {
            algo: Algorithm::ProFe,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            samples: None,
            nodes: 5,
            topology: TopologyKind::FullMesh,
            rounds: 10,
            epochs: 1,
            partition: PartitionScheme::Iid,
            quant: QuantSetting::F16,
            temperature: d.temperature,
            alpha_s: d.alpha_s,
            beta_s: d.beta_s,
            beta_t: d.beta_t,
            beta_limit: d.beta_limit,
            literal_eq4: false,
            lr: 0.05,
            batch_size: 16,
            teacher_hidden: vec![256],
            student_hidden: vec![128],
            repr_width: 64,
            blob_classes: 10,
            blob_per_class: 100,
            blob_dim: 32,
            blob_spread: 0.15,
            test_fraction: 0.1,
            train_fraction: 0.8,
            seed: 42,
            out: None,
            sequential: false,
        }
    }
}

fn field_err(field: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{field}`: {reason}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            alpha_s: self.alpha_s,
            beta_s: self.beta_s,
            beta_t: self.beta_t,
            beta_limit: self.beta_limit,
        }
    }

    pub fn quant_mode(&self) -> QuantMode {
        self.quant.into()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("rounds", self.rounds),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("repr_width", self.repr_width),
            ("blob_classes", self.blob_classes),
            ("blob_per_class", self.blob_per_class),
            ("blob_dim", self.blob_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(field_err(name, "must be at least 1"));
            }
        }
        if self.nodes > u16::MAX as usize {
            return Err(field_err("nodes", format!("at most {} nodes are addressable", u16::MAX)));
        }
        if self.samples == Some(0) {
            return Err(field_err("samples", "must be at least 1"));
        }
        if self.teacher_hidden.contains(&0) {
            return Err(field_err("teacher_hidden", "layer widths must be positive"));
        }
        if self.student_hidden.contains(&0) {
            return Err(field_err("student_hidden", "layer widths must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(field_err("lr", format!("must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.blob_spread >= 0.0 && self.blob_spread.is_finite()) {
            return Err(field_err("blob_spread", format!("must be non-negative, got {}", self.blob_spread)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(field_err("test_fraction", format!("must lie in (0, 1), got {}", self.test_fraction)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(field_err("train_fraction", format!("must lie in (0, 1], got {}", self.train_fraction)));
        }
        if self.rounds > u32::MAX as usize {
            return Err(field_err("rounds", "too many rounds"));
        }
        self.distill().validate().map_err(|e| match e {
            Error::Parameter { name, reason } => field_err(name, reason),
            other => Error::Config(other.to_string()),
        })
    }
}

/// One row of `metrics.csv`. Byte counts and elapsed time are cumulative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub node_id: usize,
    pub macro_f1: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub elapsed_seconds: f64,
}

pub const METRICS_HEADER: &str = "round,node_id,macro_f1,bytes_sent,bytes_received,elapsed_seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_macro_f1: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub nodes: usize,
    pub rounds: usize,
    /// Sums over the final round's rows (the CSV columns are cumulative).
    pub totals: Totals,
    pub final_mean_macro_f1: f64,
    pub per_round: Vec<RoundSummary>,
    pub wall_seconds: f64,
    pub decode_errors: usize,
}

impl Summary {
    pub fn from_records(algorithm: Algorithm, records: &[MetricsRecord], wall_seconds: f64, decode_errors: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("no metrics records to summarize".into()));
        }
        let rounds = records.iter().map(|r| r.round).max().unwrap_or(0);
        let per_round: Vec<RoundSummary> = (1..=rounds)
            .filter_map(|round| {
                let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.round == round).collect();
                (!rows.is_empty()).then(|| RoundSummary {
                    round,
                    mean_macro_f1: rows.iter().map(|r| r.macro_f1).sum::<f64>() / rows.len() as f64,
                    bytes_sent: rows.iter().map(|r| r.bytes_sent).sum(),
                    bytes_received: rows.iter().map(|r| r.bytes_received).sum(),
                })
            })
            .collect();
        let last: Vec<&MetricsRecord> = records.iter().filter(|r| r.round == rounds).collect();
        Ok(Summary {
            algorithm,
            nodes: last.len(),
            rounds,
            totals: Totals {
                bytes_sent: last.iter().map(|r| r.bytes_sent).sum(),
                bytes_received: last.iter().map(|r| r.bytes_received).sum(),
                elapsed_seconds: last.iter().map(|r| r.elapsed_seconds).sum(),
            },
            final_mean_macro_f1: per_round.last().map_or(0.0, |r| r.mean_macro_f1),
            per_round,
            wall_seconds,
            decode_errors,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Format {
            file: path.display().to_string(),
            offset: 0,
            reason: format!("unexpected header `{}`", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => Error::Format {
            file: path.display().to_string(),
            offset,
            reason: format!("{kind:?}"),
        },
    }
}

/// Writes `metrics.csv`, `summary.json` and, when given, the `config.json` echo.
pub fn export_metrics(
    records: &[MetricsRecord],
    summary: &Summary,
    config: Option<&ExperimentConfig>,
    dir: &Path,
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("no metrics records to export".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_metrics_csv(records, &dir.join("metrics.csv"))?;
    write_json(&dir.join("summary.json"), summary)?;
    if let Some(cfg) = config {
        write_json(&dir.join("config.json"), cfg)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Parser, Debug)]
#[command(name = "profe", version, about = "Decentralized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json
    Run(RunArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algorithm>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// iid, classes:P or dirichlet:A
    #[arg(long, value_parser = parse_partition)]
    partition: Option<PartitionScheme>,
    #[arg(long, value_enum)]
    quant: Option<QuantSetting>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    alpha_s: Option<f32>,
    #[arg(long)]
    beta_s: Option<f32>,
    #[arg(long)]
    beta_t: Option<f32>,
    #[arg(long)]
    beta_limit: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Divide global prototypes by the number of contributing nodes
    #[arg(long)]
    literal_eq4: bool,
    /// Train nodes one after another (bitwise reproducible output)
    #[arg(long)]
    sequential: bool,
}

fn parse_algo(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse()
}

fn parse_partition(s: &str) -> std::result::Result<PartitionScheme, String> {
    s.parse()
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(
            algo, dataset, data_dir, nodes, rounds, epochs, partition, quant, temperature, alpha_s, beta_s, beta_t,
            beta_limit, lr, batch_size, seed
        );
        if self.samples.is_some() {
            cfg.samples = self.samples;
        }
        if self.out.is_some() {
            cfg.out = self.out;
        }
        cfg.literal_eq4 |= self.literal_eq4;
        cfg.sequential |= self.sequential;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("PROFE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs an experiment end to end and exports its results.
pub fn run_and_export(cfg: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    let report = federation::run_experiment(cfg)?;
    let summary = Summary::from_records(cfg.algo, &report.records, report.wall_seconds, report.decode_errors)?;
    export_metrics(&report.records, &summary, Some(cfg), dir)?;
    Ok(report)
}

/// Entry point of the `profe` binary. Returns the process exit code:
/// 0 on success, 2 on usage or configuration errors, 1 on run failures.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run(args) => {
            let cfg = match args.into_config() {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("profe-out"));
            match run_and_export(&cfg, &dir) {
                Ok(report) => {
                    let last = report.records.iter().map(|r| r.round).max().unwrap_or(0);
                    let rows: Vec<_> = report.records.iter().filter(|r| r.round == last).collect();
                    let f1 = rows.iter().map(|r| r.macro_f1).sum::<f64>() / rows.len().max(1) as f64;
                    println!(
                        "{}: {} rounds, final mean macro-F1 {f1:.4}, {} bytes sent, results in {}",
                        cfg.algo,
                        last,
                        report.total_bytes_sent,
                        dir.display()
                    );
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
    }
}
