//! `cells.csv` and `summary.csv` writers and readers.

use std::io::{Read, Write};

use super::{aggregate_boxplot, median, DeploymentMatrix, HarnessError, ModelKind, Scope};
use crate::data::GLOBAL_CONTEXT;
use crate::metrics::FairnessScores;
use crate::{fmt_float, parse_float};

const CELL_KEYS: [&str; 5] = ["model", "scope", "train", "deploy", "folds"];

/// One row of `cells.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub model: ModelKind,
    pub scope: Scope,
    pub train: String,
    pub deploy: String,
    pub folds: usize,
    pub values: Vec<Option<f64>>,
    pub defined: Vec<usize>,
}

impl CellRecord {
    pub fn from_matrix(m: &DeploymentMatrix) -> Vec<CellRecord> {
        m.cells
            .iter()
            .map(|c| CellRecord {
                model: m.model,
                scope: c.scope,
                train: c.train.clone(),
                deploy: c.deploy.clone(),
                folds: c.folds,
                values: c.scores.values(),
                defined: c.defined.clone(),
            })
            .collect()
    }
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Config(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn write_cells_csv<W: Write>(m: &DeploymentMatrix, out: W) -> Result<(), HarnessError> {
    let metrics = FairnessScores::column_names(m.reference);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = CELL_KEYS.iter().map(|s| s.to_string()).collect();
    for name in &metrics {
        header.push(name.clone());
        header.push(format!("{name}_n"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in CellRecord::from_matrix(m) {
        let mut rec = vec![
            r.model.to_string(),
            r.scope.to_string(),
            r.train,
            r.deploy,
            r.folds.to_string(),
        ];
        for (v, n) in r.values.iter().zip(&r.defined) {
            rec.push(opt(*v));
            rec.push(n.to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| HarnessError::Config(format!("write: {e}")))?;
    Ok(())
}

/// Parses `cells.csv`; returns the metric column names and the records.
pub fn read_cells_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<CellRecord>), HarnessError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let bad = |m: String| HarnessError::Config(format!("cells.csv: {m}"));
    if header.len() < CELL_KEYS.len() || !(header.len() - CELL_KEYS.len()).is_multiple_of(2) {
        return Err(bad("unexpected header".into()));
    }
    for (k, key) in CELL_KEYS.iter().enumerate() {
        if &header[k] != *key {
            return Err(bad(format!("column {k} should be {key}")));
        }
    }
    let metrics: Vec<String> = header
        .iter()
        .skip(CELL_KEYS.len())
        .step_by(2)
        .map(str::to_string)
        .collect();
    let mut records = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("row {line}: bad count {s:?}")))
        };
        let mut values = Vec::with_capacity(metrics.len());
        let mut defined = Vec::with_capacity(metrics.len());
        for k in 0..metrics.len() {
            let v = &rec[CELL_KEYS.len() + 2 * k];
            values.push(if v.is_empty() {
                None
            } else {
                Some(parse_float(v).ok_or_else(|| bad(format!("row {line}: bad value {v:?}")))?)
            });
            defined.push(num(&rec[CELL_KEYS.len() + 2 * k + 1])?);
        }
        records.push(CellRecord {
            model: rec[0].parse()?,
            scope: rec[1].parse()?,
            train: rec[2].to_string(),
            deploy: rec[3].to_string(),
            folds: num(&rec[4])?,
            values,
            defined,
        });
    }
    Ok((metrics, records))
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub scope: Scope,
    /// A context id, `ALL` for cross-context aggregates, or the global id.
    pub train: String,
    pub metric: String,
    pub summary: Option<super::BoxSummary>,
}

pub const ALL_CONTEXTS: &str = "ALL";

/// Boxplot summaries of cell records:
/// - `in/ALL`: in-distribution scores across contexts;
/// - `local/<ctx>`: one local model's scores across its deployments;
/// - `local/ALL`: the per-context medians above (its median is the
///   median of medians);
/// - `global/US`: the global model's scores across deployments.
pub fn summarize_records(metrics: &[String], records: &[CellRecord]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let mut models: Vec<ModelKind> = records.iter().map(|r| r.model).collect();
    models.dedup();
    for model in models {
        let of = |scope: Scope| {
            records
                .iter()
                .filter(move |r| r.model == model && r.scope == scope)
        };
        let mut local_trains: Vec<&str> = of(Scope::Local).map(|r| r.train.as_str()).collect();
        local_trains.dedup();
        for (k, metric) in metrics.iter().enumerate() {
            let mut push = |scope: Scope, train: &str, vals: Vec<Option<f64>>| {
                out.push(SummaryRow {
                    model,
                    scope,
                    train: train.to_string(),
                    metric: metric.clone(),
                    summary: aggregate_boxplot(&vals),
                })
            };
            if of(Scope::In).next().is_some() {
                push(
                    Scope::In,
                    ALL_CONTEXTS,
                    of(Scope::In).map(|r| r.values[k]).collect(),
                );
            }
            let mut medians = Vec::new();
            for t in &local_trains {
                let vals: Vec<Option<f64>> = of(Scope::Local)
                    .filter(|r| r.train == *t)
                    .map(|r| r.values[k])
                    .collect();
                medians.push(median(&vals));
                push(Scope::Local, t, vals);
            }
            if !local_trains.is_empty() {
                push(Scope::Local, ALL_CONTEXTS, medians);
            }
            if of(Scope::Global).next().is_some() {
                push(
                    Scope::Global,
                    GLOBAL_CONTEXT,
                    of(Scope::Global).map(|r| r.values[k]).collect(),
                );
            }
        }
    }
    out
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "scope",
        "train",
        "metric",
        "n",
        "median",
        "q1",
        "q3",
        "whisker_low",
        "whisker_high",
        "min",
        "max",
        "outliers",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.model.to_string(),
            r.scope.to_string(),
            r.train.clone(),
            r.metric.clone(),
        ];
        match &r.summary {
            Some(s) => {
                rec.push(s.n.to_string());
                for v in [
                    s.median,
                    s.q1,
                    s.q3,
                    s.whisker_low,
                    s.whisker_high,
                    s.min,
                    s.max,
                ] {
                    rec.push(fmt_float(v));
                }
                rec.push(
                    s.outliers
                        .iter()
                        .map(|&v| fmt_float(v))
                        .collect::<Vec<_>>()
                        .join(";"),
                );
            }
            None => {
                rec.push("0".into());
                rec.extend(std::iter::repeat_n(String::new(), 8));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| HarnessError::Config(format!("write: {e}")))?;
    Ok(())
}
