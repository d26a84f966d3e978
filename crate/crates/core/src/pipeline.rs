//! End-to-end commands: group statistics, the deployment matrix, context
//! similarity and the consolidated report.
//!
//! Every command writes its CSVs into an output directory plus a JSON
//! manifest carrying the tool version, seed, config hash and the SHA-256 of
//! each CSV it wrote. Nothing time- or path-dependent enters an artifact, so
//! equal configs give byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    build_global, compute_group_stats, load_context_dir, ContextCollection, DataError, Dataset,
    GroupStats, Schema,
};
use crate::encode::{fit_encoder_with, EncodeError};
use crate::harness::{
    read_cells_csv, run_experiment, summarize_records, write_cells_csv, write_summary_csv,
    CellRecord, ExperimentConfig, Failure, HarnessError, Scope,
};
use crate::mmd::{global_local_mmd, pairwise_mmd, Estimator, MmdError};
use crate::synth::{generate_collection, SynthError, SynthSpec};
use crate::{fmt_float, sha256_hex};

pub const TOOL: &str = "ctxfair";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const STATS_CSV: &str = "stats.csv";
pub const STATS_JSON: &str = "stats.json";
pub const CELLS_CSV: &str = "cells.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const RUN_JSON: &str = "run.json";
pub const MATRIX_CSV: &str = "matrix.csv";
pub const ROWSUMS_CSV: &str = "rowsums.csv";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const MMD_JSON: &str = "mmd.json";
pub const REPORT_JSON: &str = "report.json";

/// Score column used for the similarity scatter.
pub const SCATTER_METRIC: &str = "eqodds_wb";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing inputs in {dir}: {}", missing.join(", "))]
    MissingInputs { dir: PathBuf, missing: Vec<String> },
    #[error("invalid artifact {name}: {message}")]
    Artifact { name: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

impl PipelineError {
    /// 1 for configuration problems, 2 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Output { .. }
            | PipelineError::MissingInputs { .. }
            | PipelineError::Artifact { .. }
            | PipelineError::Harness(HarnessError::Config(_)) => 1,
            PipelineError::Synth(SynthError::Spec(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    DataDir(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    /// Schema for `DataDir` sources; the default income schema when absent.
    pub schema: Option<Schema>,
    pub experiment: ExperimentConfig,
    pub estimator: Estimator,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(source: Source, out: impl Into<PathBuf>) -> Self {
        Self {
            source,
            schema: None,
            experiment: ExperimentConfig::default(),
            estimator: Estimator::Biased,
            out: out.into(),
        }
    }

    pub fn effective_schema(&self) -> Schema {
        match (&self.source, &self.schema) {
            (_, Some(s)) => s.clone(),
            (Source::Synth(spec), None) => spec.schema(),
            (Source::DataDir(_), None) => Schema::income(),
        }
    }

    /// Everything that determines artifact contents. The output directory
    /// and thread count are left out.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "source": self.source,
            "schema": self.effective_schema(),
            "experiment": self.experiment,
            "estimator": self.estimator.to_string(),
        })
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.echo().to_string().as_bytes())
    }
}

/// Sidecar metadata written next to a command's CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// File name to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub row_cap: Option<usize>,
    #[serde(default)]
    pub failures: Vec<Failure>,
}

impl Manifest {
    fn new(cfg: &RunConfig, command: &str) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seed: cfg.experiment.seed,
            config_hash: cfg.config_hash(),
            config: cfg.echo(),
            artifacts: BTreeMap::new(),
            row_cap: cfg.experiment.row_cap,
            failures: Vec::new(),
        }
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_artifact(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    manifest: Option<&mut Manifest>,
) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| PipelineError::Output { path, source })?;
    if let Some(m) = manifest {
        m.artifacts.insert(name.to_string(), sha256_hex(bytes));
    }
    Ok(())
}

fn write_manifest(dir: &Path, name: &str, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_artifact(dir, name, text.as_bytes(), None)
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Loads or generates the configured collection, restricted to the
/// configured contexts.
pub fn load_collection(cfg: &RunConfig) -> Result<ContextCollection> {
    cfg.experiment.validate()?;
    let coll = match &cfg.source {
        Source::DataDir(dir) => load_context_dir(dir, &cfg.effective_schema())?.0,
        Source::Synth(spec) => generate_collection(spec)?,
    };
    Ok(cfg.experiment.select(&coll)?)
}

/// The collection's own global dataset, or all local contexts pooled.
pub fn global_dataset(coll: &ContextCollection) -> Result<Dataset> {
    match coll.global() {
        Some(g) => Ok(g.clone()),
        None => Ok(build_global(coll, &BTreeSet::new())?),
    }
}

/// One row of `stats.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsRow {
    pub context: String,
    pub raw_count: usize,
    pub cleaned_count: usize,
    pub w_rate: f64,
    pub b_rate: f64,
    pub o_rate: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Negatives per positive; empty without positives.
    pub ir: Option<f64>,
    pub ir_label: String,
}

impl From<&GroupStats> for StatsRow {
    fn from(s: &GroupStats) -> Self {
        Self {
            context: s.context.clone(),
            raw_count: s.raw_count,
            cleaned_count: s.cleaned_count,
            w_rate: s.group_rates[0],
            b_rate: s.group_rates[1],
            o_rate: s.group_rates[2],
            positives: s.positives,
            negatives: s.negatives,
            ir: s.imbalance.value(),
            ir_label: s.imbalance.to_string(),
        }
    }
}

const STATS_HEADER: [&str; 10] = [
    "context",
    "raw_count",
    "cleaned_count",
    "w_rate",
    "b_rate",
    "o_rate",
    "positives",
    "negatives",
    "ir",
    "ir_label",
];

/// Per-context group statistics plus a final row for the global dataset.
pub fn cmd_stats(cfg: &RunConfig) -> Result<Vec<StatsRow>> {
    prepare_out(&cfg.out)?;
    let coll = load_collection(cfg)?;
    let mut rows: Vec<StatsRow> = coll
        .iter()
        .map(|(_, ds)| compute_group_stats(ds).map(|s| StatsRow::from(&s)))
        .collect::<std::result::Result<_, _>>()?;
    rows.push(StatsRow::from(&compute_group_stats(&global_dataset(
        &coll,
    )?)?));

    let bytes = csv_bytes(
        &STATS_HEADER,
        rows.iter()
            .map(|r| {
                vec![
                    r.context.clone(),
                    r.raw_count.to_string(),
                    r.cleaned_count.to_string(),
                    fmt_float(r.w_rate),
                    fmt_float(r.b_rate),
                    fmt_float(r.o_rate),
                    r.positives.to_string(),
                    r.negatives.to_string(),
                    opt(r.ir),
                    r.ir_label.clone(),
                ]
            })
            .collect(),
    );
    let mut manifest = Manifest::new(cfg, "stats");
    write_artifact(&cfg.out, STATS_CSV, &bytes, Some(&mut manifest))?;
    write_manifest(&cfg.out, STATS_JSON, &manifest)?;
    Ok(rows)
}

pub struct MatrixOutcome {
    pub records: Vec<CellRecord>,
    pub failures: Vec<Failure>,
}

/// Local and global deployment experiments for the configured model kind.
/// Partial failures are recorded in `run.json` and returned; the caller
/// decides how to report them.
pub fn cmd_matrix(cfg: &RunConfig) -> Result<MatrixOutcome> {
    prepare_out(&cfg.out)?;
    let coll = load_collection(cfg)?;
    if coll.len() < 2 {
        return Err(PipelineError::Config(format!(
            "deployment experiments need at least 2 contexts, found {}",
            coll.len()
        )));
    }
    let matrix = run_experiment(&coll, &cfg.experiment)?;

    let mut cells = Vec::new();
    write_cells_csv(&matrix, &mut cells)?;
    let (metrics, records) = read_cells_csv(cells.as_slice())?;
    let mut summary = Vec::new();
    write_summary_csv(&summarize_records(&metrics, &records), &mut summary)?;

    let mut manifest = Manifest::new(cfg, "matrix");
    manifest.failures = matrix.failures.clone();
    write_artifact(&cfg.out, CELLS_CSV, &cells, Some(&mut manifest))?;
    write_artifact(&cfg.out, SUMMARY_CSV, &summary, Some(&mut manifest))?;
    write_manifest(&cfg.out, RUN_JSON, &manifest)?;
    Ok(MatrixOutcome {
        records,
        failures: matrix.failures,
    })
}

/// One row of `scatter.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterEntry {
    pub context: String,
    pub mmd_raw: f64,
    pub mmd: f64,
    pub ir: Option<f64>,
    pub eq_odds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSum {
    pub context: String,
    pub row_sum: f64,
}

pub struct MmdOutcome {
    pub row_sums: Vec<RowSum>,
    pub scatter: Option<Vec<ScatterEntry>>,
}

/// Global-model Eq.Odds per deployment context from a previous `cells.csv`.
pub fn global_eq_odds(out: &Path) -> Result<BTreeMap<String, Option<f64>>> {
    let path = out.join(CELLS_CSV);
    let file = fs::File::open(&path).map_err(|_| PipelineError::MissingInputs {
        dir: out.to_path_buf(),
        missing: vec![format!("{CELLS_CSV} (run the matrix command first)")],
    })?;
    let (metrics, records) = read_cells_csv(file)?;
    let k = metrics
        .iter()
        .position(|m| m == SCATTER_METRIC)
        .ok_or_else(|| PipelineError::Artifact {
            name: CELLS_CSV.into(),
            message: format!("no {SCATTER_METRIC} column"),
        })?;
    let map: BTreeMap<String, Option<f64>> = records
        .iter()
        .filter(|r| r.scope == Scope::Global)
        .map(|r| (r.deploy.clone(), r.values[k]))
        .collect();
    if map.is_empty() {
        return Err(PipelineError::MissingInputs {
            dir: out.to_path_buf(),
            missing: vec![format!("global cells in {CELLS_CSV}")],
        });
    }
    Ok(map)
}

/// Pairwise context MMD (`matrix.csv`, `rowsums.csv`) and, unless
/// `with_scatter` is false, the global-vs-local scatter against the global
/// model's Eq.Odds from a previous matrix run in the same directory.
///
/// All contexts are encoded with one encoder fitted on the pooled data.
pub fn cmd_mmd(cfg: &RunConfig, with_scatter: bool) -> Result<MmdOutcome> {
    prepare_out(&cfg.out)?;
    let eq_odds = if with_scatter {
        Some(global_eq_odds(&cfg.out)?)
    } else {
        None
    };
    let coll = load_collection(cfg)?;
    let global = global_dataset(&coll)?;
    let encoder = fit_encoder_with(&global, cfg.experiment.encoder)?;
    let matrix = pairwise_mmd(&coll, &encoder, cfg.estimator)?;

    let mut manifest = Manifest::new(cfg, "mmd");
    let k = matrix.size();
    let mut rows = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            rows.push(vec![
                matrix.ids[i].clone(),
                matrix.ids[j].clone(),
                fmt_float(matrix.raw_at(i, j)),
                fmt_float(matrix.normalized_at(i, j)),
            ]);
        }
    }
    write_artifact(
        &cfg.out,
        MATRIX_CSV,
        &csv_bytes(&["context_a", "context_b", "mmd_raw", "mmd"], rows),
        Some(&mut manifest),
    )?;

    let row_sums: Vec<RowSum> = matrix
        .ids
        .iter()
        .zip(&matrix.row_sums)
        .map(|(id, &s)| RowSum {
            context: id.clone(),
            row_sum: s,
        })
        .collect();
    write_artifact(
        &cfg.out,
        ROWSUMS_CSV,
        &csv_bytes(
            &["context", "row_sum"],
            row_sums
                .iter()
                .map(|r| vec![r.context.clone(), fmt_float(r.row_sum)])
                .collect(),
        ),
        Some(&mut manifest),
    )?;

    let scatter = match eq_odds {
        Some(eq) => {
            let rows = global_local_mmd(&global, &coll, &encoder, cfg.estimator, Some(&eq))?;
            let entries: Vec<ScatterEntry> = rows
                .into_iter()
                .map(|r| ScatterEntry {
                    context: r.context,
                    mmd_raw: r.mmd_raw,
                    mmd: r.mmd,
                    ir: r.ir,
                    eq_odds: r.eq_odds,
                })
                .collect();
            write_artifact(
                &cfg.out,
                SCATTER_CSV,
                &csv_bytes(
                    &["context", "mmd_raw", "mmd", "ir", "eq_odds"],
                    entries
                        .iter()
                        .map(|e| {
                            vec![
                                e.context.clone(),
                                fmt_float(e.mmd_raw),
                                fmt_float(e.mmd),
                                opt(e.ir),
                                opt(e.eq_odds),
                            ]
                        })
                        .collect(),
                ),
                Some(&mut manifest),
            )?;
            Some(entries)
        }
        None => None,
    };
    write_manifest(&cfg.out, MMD_JSON, &manifest)?;
    Ok(MmdOutcome { row_sums, scatter })
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryEntry {
    pub model: String,
    pub scope: String,
    pub train: String,
    pub metric: String,
    pub n: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub whisker_low: Option<f64>,
    pub whisker_high: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub outliers: Vec<f64>,
}

/// Consolidated output of a full run; `report.json` deserializes into this
/// type or is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub stats: Vec<StatsRow>,
    pub summary: Vec<SummaryEntry>,
    pub failures: Vec<Failure>,
    pub row_sums: Vec<RowSum>,
    pub scatter: Vec<ScatterEntry>,
    /// Manifest file name to manifest.
    pub manifests: BTreeMap<String, Manifest>,
}

pub fn validate_report(text: &str) -> Result<Report> {
    serde_json::from_str(text).map_err(|e| PipelineError::Artifact {
        name: REPORT_JSON.into(),
        message: e.to_string(),
    })
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>> {
    let bad = |e: csv::Error| PipelineError::Artifact {
        name: name.into(),
        message: e.to_string(),
    };
    let mut rdr = csv::Reader::from_path(dir.join(name)).map_err(bad)?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(bad)
}

fn read_manifest(dir: &Path, name: &str) -> Result<Manifest> {
    let bad = |message: String| PipelineError::Artifact {
        name: name.into(),
        message,
    };
    let text = fs::read_to_string(dir.join(name)).map_err(|e| bad(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
}

fn parse_summary(dir: &Path) -> Result<Vec<SummaryEntry>> {
    let bad = |message: String| PipelineError::Artifact {
        name: SUMMARY_CSV.into(),
        message,
    };
    let mut rdr = csv::Reader::from_path(dir.join(SUMMARY_CSV)).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 13 {
            return Err(bad(format!("expected 13 fields, got {}", rec.len())));
        }
        let num = |k: usize| -> Result<Option<f64>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                crate::parse_float(&rec[k])
                    .map(Some)
                    .ok_or_else(|| bad(format!("bad number {:?}", &rec[k])))
            }
        };
        let outliers = if rec[12].is_empty() {
            Vec::new()
        } else {
            rec[12]
                .split(';')
                .map(|s| crate::parse_float(s).ok_or_else(|| bad(format!("bad outlier {s:?}"))))
                .collect::<Result<_>>()?
        };
        out.push(SummaryEntry {
            model: rec[0].to_string(),
            scope: rec[1].to_string(),
            train: rec[2].to_string(),
            metric: rec[3].to_string(),
            n: rec[4]
                .parse()
                .map_err(|_| bad(format!("bad count {:?}", &rec[4])))?,
            median: num(5)?,
            q1: num(6)?,
            q3: num(7)?,
            whisker_low: num(8)?,
            whisker_high: num(9)?,
            min: num(10)?,
            max: num(11)?,
            outliers,
        });
    }
    Ok(out)
}

/// Merges the artifacts of `stats`, `matrix` and `mmd` in `dir` into
/// `report.json`. Every missing input is listed in the error.
pub fn cmd_report(dir: &Path) -> Result<Report> {
    let required = [
        STATS_CSV,
        STATS_JSON,
        CELLS_CSV,
        SUMMARY_CSV,
        RUN_JSON,
        ROWSUMS_CSV,
        SCATTER_CSV,
        MMD_JSON,
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|name| !dir.join(name).is_file())
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingInputs {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let mut manifests = BTreeMap::new();
    for name in [STATS_JSON, RUN_JSON, MMD_JSON] {
        manifests.insert(name.to_string(), read_manifest(dir, name)?);
    }
    let run = &manifests[RUN_JSON];
    for (name, m) in &manifests {
        if m.config_hash != run.config_hash {
            return Err(PipelineError::Artifact {
                name: name.clone(),
                message: format!("config hash {} differs from {RUN_JSON}", m.config_hash),
            });
        }
    }
    let report = Report {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed: run.seed,
        config_hash: run.config_hash.clone(),
        config: run.config.clone(),
        stats: read_csv_rows(dir, STATS_CSV)?,
        summary: parse_summary(dir)?,
        failures: run.failures.clone(),
        row_sums: read_csv_rows(dir, ROWSUMS_CSV)?,
        scatter: read_csv_rows(dir, SCATTER_CSV)?,
        manifests,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_artifact(dir, REPORT_JSON, text.as_bytes(), None)?;
    Ok(report)
}

/// Runs `f` on a thread pool of `jobs` threads (the global pool when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(PipelineError::Config("--jobs must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Stats, matrix, MMD with scatter and report in one go.
pub fn run_all(cfg: &RunConfig) -> Result<Report> {
    cmd_stats(cfg)?;
    cmd_matrix(cfg)?;
    cmd_mmd(cfg, true)?;
    cmd_report(&cfg.out)
}
