//! Cross-validated local and global deployment experiments.
//!
//! A local model is trained on one context and deployed on every other one;
//! a global model is trained on the pooled collection minus the deployment
//! context. Every train set is split into `k` stratified folds; each fold
//! model is deployed on the full deployment data and a cell reports the mean
//! over fold models. In-distribution scores come from the held-out folds.

mod artifacts;
mod boxplot;
mod folds;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifacts::{
    read_cells_csv, summarize_records, write_cells_csv, write_summary_csv, CellRecord, SummaryRow,
    ALL_CONTEXTS,
};
pub use boxplot::{aggregate_boxplot, median, quantile_sorted, BoxSummary};
pub use folds::{stratified_kfold, stratified_subsample, train_indices};

use crate::data::{build_global, ContextCollection, DataError, Dataset, Group, GLOBAL_CONTEXT};
use crate::derive_seed;
use crate::encode::{fit_encoder_with, EncodeError, EncoderOptions, EncoderSpec};
use crate::metrics::{mean_scores, FairnessScores, MetricsError};
use crate::trainer::{
    predict, reweighing_weights, train_prejudice_remover, train_vanilla, ModelParams,
    SampleWeights, TrainError, TrainerConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("class {class} has {found} rows, fewer than the {folds} folds")]
    Stratify {
        class: u8,
        found: usize,
        folds: usize,
    },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Plain weighted logistic regression.
    Vanilla,
    /// Reweighing followed by the prejudice-remover model.
    Fair,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::Fair => "fair",
        })
    }
}

impl FromStr for ModelKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(ModelKind::Vanilla),
            "fair" => Ok(ModelKind::Fair),
            other => Err(HarnessError::Config(format!(
                "unknown model kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Held-out folds of the training context.
    In,
    Local,
    Global,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::In => "in",
            Scope::Local => "local",
            Scope::Global => "global",
        })
    }
}

impl FromStr for Scope {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in" => Ok(Scope::In),
            "local" => Ok(Scope::Local),
            "global" => Ok(Scope::Global),
            other => Err(HarnessError::Config(format!("unknown scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub folds: usize,
    pub trainer: TrainerConfig,
    pub seed: u64,
    /// Contexts to use; empty means all.
    pub contexts: Vec<String>,
    /// Contexts never pooled into a global training set. Ids missing from
    /// the collection are ignored.
    pub global_exclusions: Vec<String>,
    /// Stratified cap on the rows of each global training set.
    pub row_cap: Option<usize>,
    pub encoder: EncoderOptions,
    pub reference: Group,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Vanilla,
            folds: 10,
            trainer: TrainerConfig::default(),
            seed: 0,
            contexts: Vec::new(),
            global_exclusions: vec!["PR".into()],
            row_cap: None,
            encoder: EncoderOptions::default(),
            reference: Group::W,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.folds < 2 {
            return Err(HarnessError::Config(format!(
                "folds must be >= 2, got {}",
                self.folds
            )));
        }
        if self.row_cap == Some(0) {
            return Err(HarnessError::Config("row cap must be positive".into()));
        }
        self.trainer.validate()?;
        Ok(())
    }

    /// The configured subset of `coll` (all of it when no contexts are listed).
    pub fn select(&self, coll: &ContextCollection) -> Result<ContextCollection, HarnessError> {
        if self.contexts.is_empty() {
            Ok(coll.clone())
        } else {
            Ok(coll.restrict(&self.contexts)?)
        }
    }
}

/// An encoder plus the model fitted on its encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub encoder: EncoderSpec,
    pub params: ModelParams,
}

impl FittedModel {
    pub fn evaluate(&self, ds: &Dataset, reference: Group) -> Result<FairnessScores, HarnessError> {
        let x = self.encoder.transform(ds)?;
        let pred = predict(&self.params, &x, ds.groups())?;
        Ok(FairnessScores::compute(
            ds.labels(),
            &pred.labels,
            ds.groups(),
            reference,
        )?)
    }
}

/// Fits the encoder on `train` and trains the configured model kind.
pub fn fit_model(train: &Dataset, cfg: &ExperimentConfig) -> Result<FittedModel, HarnessError> {
    let encoder = fit_encoder_with(train, cfg.encoder)?;
    let x = encoder.transform(train)?;
    let params = match cfg.model {
        ModelKind::Vanilla => {
            let w = SampleWeights::new(train.weights_or_unit())?;
            train_vanilla(&x, train.labels(), &w, &cfg.trainer)?
        }
        ModelKind::Fair => {
            let w = reweighing_weights(train.labels(), train.groups())?;
            train_prejudice_remover(&x, train.labels(), train.groups(), &w, &cfg.trainer)?
        }
    };
    Ok(FittedModel { encoder, params })
}

/// Fold models of one training set with their held-out scores.
struct FoldRun {
    models: Vec<FittedModel>,
    held_out: Vec<FairnessScores>,
}

fn run_folds(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<FoldRun, HarnessError> {
    let folds = stratified_kfold(ds.labels(), cfg.folds, seed)?;
    let per_fold: Vec<(FittedModel, FairnessScores)> = (0..folds.len())
        .into_par_iter()
        .map(|f| {
            let wrap = |e: HarnessError| HarnessError::Fold {
                fold: f,
                source: Box::new(e),
            };
            let model = fit_model(&ds.subset(&train_indices(&folds, f)), cfg).map_err(wrap)?;
            let scores = model
                .evaluate(&ds.subset(&folds[f]), cfg.reference)
                .map_err(wrap)?;
            Ok((model, scores))
        })
        .collect::<Result<_, HarnessError>>()?;
    let (models, held_out) = per_fold.into_iter().unzip();
    Ok(FoldRun { models, held_out })
}

fn deploy_mean(
    models: &[FittedModel],
    ds: &Dataset,
    reference: Group,
) -> Result<(FairnessScores, Vec<usize>), HarnessError> {
    let scores: Vec<FairnessScores> = models
        .iter()
        .map(|m| m.evaluate(ds, reference))
        .collect::<Result<_, _>>()?;
    Ok(mean_scores(&scores))
}

/// Scores of one (train, deploy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentCell {
    pub scope: Scope,
    pub train: String,
    pub deploy: String,
    /// Mean over fold models, skipping undefined values.
    pub scores: FairnessScores,
    /// Per score column, how many fold models produced a defined value.
    pub defined: Vec<usize>,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub scope: Scope,
    pub context: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentMatrix {
    pub model: ModelKind,
    pub reference: Group,
    pub cells: Vec<DeploymentCell>,
    pub failures: Vec<Failure>,
}

impl DeploymentMatrix {
    pub fn cells_in(&self, scope: Scope) -> impl Iterator<Item = &DeploymentCell> {
        self.cells.iter().filter(move |c| c.scope == scope)
    }

    /// Value of one score column (see [`FairnessScores::column_names`]) for
    /// every cell of `scope`.
    pub fn column(&self, scope: Scope, metric: &str) -> Vec<Option<f64>> {
        let k = metric_index(self.reference, metric);
        self.cells_in(scope).map(|c| c.scores.values()[k]).collect()
    }

    /// Per local training context, the median of `metric` over its
    /// deployments.
    pub fn local_medians(&self, metric: &str) -> Vec<(String, Option<f64>)> {
        let k = metric_index(self.reference, metric);
        let mut trains: Vec<&str> = self
            .cells_in(Scope::Local)
            .map(|c| c.train.as_str())
            .collect();
        trains.dedup();
        trains
            .into_iter()
            .map(|t| {
                let vals: Vec<Option<f64>> = self
                    .cells_in(Scope::Local)
                    .filter(|c| c.train == t)
                    .map(|c| c.scores.values()[k])
                    .collect();
                (t.to_string(), median(&vals))
            })
            .collect()
    }

    /// Median over local training contexts of their per-context medians.
    pub fn local_median_of_medians(&self, metric: &str) -> Option<f64> {
        let meds: Vec<Option<f64>> = self
            .local_medians(metric)
            .into_iter()
            .map(|(_, m)| m)
            .collect();
        median(&meds)
    }

    /// Median of `metric` over the global model's deployments.
    pub fn global_median(&self, metric: &str) -> Option<f64> {
        median(&self.column(Scope::Global, metric))
    }

    pub fn merge(&mut self, other: DeploymentMatrix) {
        self.cells.extend(other.cells);
        self.failures.extend(other.failures);
    }
}

fn metric_index(reference: Group, metric: &str) -> usize {
    FairnessScores::column_names(reference)
        .iter()
        .position(|m| m == metric)
        .unwrap_or_else(|| panic!("unknown metric column {metric:?}"))
}

fn in_cell(context: &str, run: &FoldRun) -> DeploymentCell {
    let (scores, defined) = mean_scores(&run.held_out);
    DeploymentCell {
        scope: Scope::In,
        train: context.to_string(),
        deploy: context.to_string(),
        scores,
        defined,
        folds: run.held_out.len(),
    }
}

/// Fold-averaged held-out scores on a single dataset.
pub fn run_in_distribution(
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<DeploymentCell, HarnessError> {
    cfg.validate()?;
    let run = run_folds(
        ds,
        cfg,
        derive_seed(cfg.seed, &format!("folds/{}", ds.context())),
    )?;
    Ok(in_cell(ds.context(), &run))
}

/// Local models: in-distribution cells plus one cell per ordered pair of
/// distinct contexts. A context whose training fails is recorded and skipped.
pub fn run_local_models(
    coll: &ContextCollection,
    cfg: &ExperimentConfig,
) -> Result<DeploymentMatrix, HarnessError> {
    cfg.validate()?;
    let coll = cfg.select(coll)?;
    let entries: Vec<(&str, &Dataset)> = coll.iter().collect();
    let results: Vec<Result<Vec<DeploymentCell>, Failure>> = entries
        .par_iter()
        .map(|&(id, ds)| {
            let fail = |e: HarnessError| Failure {
                scope: Scope::Local,
                context: id.to_string(),
                message: e.to_string(),
            };
            let run =
                run_folds(ds, cfg, derive_seed(cfg.seed, &format!("folds/{id}"))).map_err(fail)?;
            let mut cells = vec![in_cell(id, &run)];
            let deployed: Vec<DeploymentCell> = entries
                .par_iter()
                .filter(|(other, _)| *other != id)
                .map(|&(other, target)| {
                    let (scores, defined) = deploy_mean(&run.models, target, cfg.reference)?;
                    Ok(DeploymentCell {
                        scope: Scope::Local,
                        train: id.to_string(),
                        deploy: other.to_string(),
                        scores,
                        defined,
                        folds: run.models.len(),
                    })
                })
                .collect::<Result<_, HarnessError>>()
                .map_err(fail)?;
            cells.extend(deployed);
            Ok(cells)
        })
        .collect();
    Ok(collect_results(cfg, results))
}

fn collect_results(
    cfg: &ExperimentConfig,
    results: Vec<Result<Vec<DeploymentCell>, Failure>>,
) -> DeploymentMatrix {
    let mut out = DeploymentMatrix {
        model: cfg.model,
        reference: cfg.reference,
        cells: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(cells) => out.cells.extend(cells),
            Err(f) => out.failures.push(f),
        }
    }
    out
}

/// Exclusion set for the global model deployed on `deploy`.
pub fn global_exclusions(
    coll: &ContextCollection,
    deploy: &str,
    cfg: &ExperimentConfig,
) -> BTreeSet<String> {
    let mut ex: BTreeSet<String> = cfg
        .global_exclusions
        .iter()
        .map(|id| crate::data::normalize_context_id(id))
        .filter(|id| coll.get(id).is_some())
        .collect();
    ex.insert(deploy.to_string());
    ex
}

/// The pooled training set for deployment on `deploy`, after exclusions and
/// the optional row cap.
pub fn global_training_set(
    coll: &ContextCollection,
    deploy: &str,
    cfg: &ExperimentConfig,
) -> Result<Dataset, HarnessError> {
    let pooled = build_global(coll, &global_exclusions(coll, deploy, cfg))?;
    Ok(match cfg.row_cap {
        Some(cap) if cap < pooled.len() => {
            let rows = stratified_subsample(
                pooled.labels(),
                cap,
                derive_seed(cfg.seed, &format!("cap/{deploy}")),
            );
            pooled.subset(&rows)
        }
        _ => pooled,
    })
}

/// Global models: for each deployment context, fold models trained on the
/// pooled remaining contexts, averaged on the full deployment data.
pub fn run_global_model(
    coll: &ContextCollection,
    cfg: &ExperimentConfig,
) -> Result<DeploymentMatrix, HarnessError> {
    cfg.validate()?;
    let coll = cfg.select(coll)?;
    let entries: Vec<(&str, &Dataset)> = coll.iter().collect();
    let results: Vec<Result<Vec<DeploymentCell>, Failure>> = entries
        .par_iter()
        .map(|&(id, target)| {
            let fail = |e: HarnessError| Failure {
                scope: Scope::Global,
                context: id.to_string(),
                message: e.to_string(),
            };
            let train = global_training_set(&coll, id, cfg).map_err(fail)?;
            let run = run_folds(
                &train,
                cfg,
                derive_seed(cfg.seed, &format!("global-folds/{id}")),
            )
            .map_err(fail)?;
            let (scores, defined) =
                deploy_mean(&run.models, target, cfg.reference).map_err(fail)?;
            Ok(vec![DeploymentCell {
                scope: Scope::Global,
                train: GLOBAL_CONTEXT.to_string(),
                deploy: id.to_string(),
                scores,
                defined,
                folds: run.models.len(),
            }])
        })
        .collect();
    Ok(collect_results(cfg, results))
}

/// Local and global experiments in one matrix.
pub fn run_experiment(
    coll: &ContextCollection,
    cfg: &ExperimentConfig,
) -> Result<DeploymentMatrix, HarnessError> {
    let mut m = run_local_models(coll, cfg)?;
    m.merge(run_global_model(coll, cfg)?);
    Ok(m)
}
