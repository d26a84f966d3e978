//! Vanilla and fairness-aware logistic regression.
//!
//! Both models minimise a weighted mean negative log-likelihood with an L2
//! penalty on the coefficients (intercepts are not penalised):
//!
//! ```text
//! vanilla:  (1/W) Σ w_i nll_i + (λ/2) ‖θ‖²
//! fair:     (1/W) Σ w_i nll_i + η · PI / n + (λ/2) Σ_g π_g ‖θ_g‖²
//! ```
//!
//! where `π_g = W_g / W` is the weighted share of group `g` and `PI` is the
//! empirical prejudice index
//!
//! ```text
//! PI = Σ_i Σ_{c∈{0,1}} p_c(x_i, g_i) · ln( P̂(ŷ=c | g_i) / P̂(ŷ=c) )
//! ```
//!
//! with the `P̂` terms taken as weighted means of predicted probabilities.
//! The fair model keeps one coefficient vector per group. Scaling the penalty
//! by `π_g` makes the `η = 0` problem separate exactly into per-group vanilla
//! fits with the same `λ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Group};
use crate::encode::EncodedMatrix;
use crate::optim::{self, LbfgsConfig, Objective};

/// Clamp applied to group-conditional and marginal positive rates inside the
/// prejudice index logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("input lengths disagree: {0}")]
    Length(String),
    #[error("cell (group {group}, label {label}) is empty; reweighing needs every cell populated")]
    EmptyCell { group: Group, label: u8 },
    #[error("group {0} is absent from the training data")]
    MissingGroup(Group),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("model has {expected} coefficients, matrix has {found} columns")]
    Width { expected: usize, found: usize },
    #[error("no coefficients fitted for group {0}")]
    UnfittedGroup(Group),
    #[error("cannot train on an empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// L2 strength λ on the mean-loss scale.
    pub l2: f64,
    /// Prejudice index strength η.
    pub eta: f64,
    pub max_iter: usize,
    /// Gradient-norm stopping tolerance.
    pub tol: f64,
    /// Echoed into artifacts. Optimisation starts from zero and is
    /// deterministic, so the seed does not change fitted parameters.
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            eta: 1.0,
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TrainError::Config(format!(
                "l2 must be >= 0, got {}",
                self.l2
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(TrainError::Config(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if !(self.tol > 0.0) {
            return Err(TrainError::Config(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.max_iter,
            grad_tol: self.tol,
            ..LbfgsConfig::default()
        }
    }
}

/// Positive per-row weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, TrainError> {
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(TrainError::Config("sample weights must be positive".into()));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Reweighing: a row in cell `(g, y)` gets
/// `n_g · n_y / (n · n_{g,y})`. Only groups and classes present in the data
/// are considered; each such combination must be populated.
pub fn reweighing_weights(labels: &[u8], groups: &[Group]) -> Result<SampleWeights, TrainError> {
    if labels.len() != groups.len() {
        return Err(TrainError::Length(format!(
            "{} labels, {} groups",
            labels.len(),
            groups.len()
        )));
    }
    let n = labels.len() as f64;
    let mut joint = [[0usize; 2]; 3];
    for (&y, g) in labels.iter().zip(groups) {
        joint[g.index()][usize::from(y)] += 1;
    }
    let n_g: Vec<usize> = joint.iter().map(|c| c[0] + c[1]).collect();
    let n_y = [0, 1].map(|y| joint.iter().map(|c| c[y]).sum::<usize>());
    for g in Group::ALL {
        for y in 0..2u8 {
            if n_g[g.index()] > 0
                && n_y[usize::from(y)] > 0
                && joint[g.index()][usize::from(y)] == 0
            {
                return Err(TrainError::EmptyCell { group: g, label: y });
            }
        }
    }
    let w = labels
        .iter()
        .zip(groups)
        .map(|(&y, g)| {
            let (gi, yi) = (g.index(), usize::from(y));
            (n_g[gi] as f64 * n_y[yi] as f64) / (n * joint[gi][yi] as f64)
        })
        .collect();
    Ok(SampleWeights(w))
}

pub fn compute_reweighing_weights(ds: &Dataset) -> Result<SampleWeights, TrainError> {
    reweighing_weights(ds.labels(), ds.groups())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    Vanilla,
    PrejudiceRemover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoefficients {
    pub group: Group,
    pub coef: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub form: ModelForm,
    pub dim: usize,
    /// One entry per group; identical entries when `shared` is set.
    pub groups: Vec<GroupCoefficients>,
    pub shared: bool,
    pub convergence: ConvergenceRecord,
    pub config: TrainerConfig,
}

impl ModelParams {
    pub fn coefficients(&self, g: Group) -> Option<&GroupCoefficients> {
        self.groups.iter().find(|c| c.group == g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model params serialize")
    }

    /// Flat parameter vector, `[θ_g..., b_g]` per group in group order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.groups {
            out.extend_from_slice(&c.coef);
            out.push(c.intercept);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The full training objective over a flat parameter vector laid out as
/// `slots × (d + 1)`, each slot holding `[θ (d), b]`.
pub struct LogisticObjective<'a> {
    x: &'a EncodedMatrix,
    y: &'a [u8],
    w: &'a [f64],
    slot_of_row: Vec<usize>,
    slots: usize,
    penalty_share: Vec<f64>,
    l2: f64,
    eta: f64,
    total_weight: f64,
    slot_weight: Vec<f64>,
    slot_count: Vec<f64>,
}

impl<'a> LogisticObjective<'a> {
    /// Single shared coefficient vector, no prejudice term.
    pub fn vanilla(
        x: &'a EncodedMatrix,
        y: &'a [u8],
        w: &'a [f64],
        l2: f64,
    ) -> Result<Self, TrainError> {
        check_lengths(x, y, w, None)?;
        Ok(Self::build(x, y, w, vec![0; y.len()], 1, l2, 0.0))
    }

    /// Per-group coefficient vectors (slots follow [`Group::index`]) with the
    /// prejudice index term. Every group must be present.
    pub fn prejudice_remover(
        x: &'a EncodedMatrix,
        y: &'a [u8],
        groups: &[Group],
        w: &'a [f64],
        l2: f64,
        eta: f64,
    ) -> Result<Self, TrainError> {
        check_lengths(x, y, w, Some(groups))?;
        for g in Group::ALL {
            if !groups.contains(&g) {
                return Err(TrainError::MissingGroup(g));
            }
        }
        let slot_of_row = groups.iter().map(|g| g.index()).collect();
        Ok(Self::build(x, y, w, slot_of_row, 3, l2, eta))
    }

    fn build(
        x: &'a EncodedMatrix,
        y: &'a [u8],
        w: &'a [f64],
        slot_of_row: Vec<usize>,
        slots: usize,
        l2: f64,
        eta: f64,
    ) -> Self {
        let mut slot_weight = vec![0.0; slots];
        let mut slot_count = vec![0.0; slots];
        for (&s, &wi) in slot_of_row.iter().zip(w) {
            slot_weight[s] += wi;
            slot_count[s] += 1.0;
        }
        let total_weight: f64 = slot_weight.iter().sum();
        let penalty_share = slot_weight.iter().map(|sw| sw / total_weight).collect();
        Self {
            x,
            y,
            w,
            slot_of_row,
            slots,
            penalty_share,
            l2,
            eta,
            total_weight,
            slot_weight,
            slot_count,
        }
    }

    fn width(&self) -> usize {
        self.x.cols() + 1
    }

    fn logits(&self, params: &[f64]) -> Vec<f64> {
        let d = self.x.cols();
        self.x
            .iter_rows()
            .zip(&self.slot_of_row)
            .map(|(row, &s)| {
                let p = &params[s * (d + 1)..(s + 1) * (d + 1)];
                row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + p[d]
            })
            .collect()
    }

    /// Empirical prejudice index (unnormalised sum over rows) for the given
    /// parameters.
    pub fn prejudice_index(&self, params: &[f64]) -> f64 {
        let probs: Vec<f64> = self.logits(params).into_iter().map(sigmoid).collect();
        self.pi_parts(&probs).value
    }

    fn pi_parts(&self, probs: &[f64]) -> PiParts {
        let mut wp_slot = vec![0.0; self.slots];
        let mut p_slot = vec![0.0; self.slots];
        for ((&s, &p), &wi) in self.slot_of_row.iter().zip(probs).zip(self.w) {
            wp_slot[s] += wi * p;
            p_slot[s] += p;
        }
        let clamp = |v: f64| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let inside = |v: f64| {
            if v > PROB_CLAMP && v < 1.0 - PROB_CLAMP {
                1.0
            } else {
                0.0
            }
        };
        let r_raw = wp_slot.iter().sum::<f64>() / self.total_weight;
        let r = clamp(r_raw);
        let n: f64 = self.slot_count.iter().sum();
        let s_all: f64 = p_slot.iter().sum();
        let mut value = 0.0;
        let mut a = vec![0.0; self.slots];
        let mut b = vec![0.0; self.slots];
        for s in 0..self.slots {
            if self.slot_count[s] == 0.0 {
                continue;
            }
            let q_raw = wp_slot[s] / self.slot_weight[s];
            let q = clamp(q_raw);
            let (pos, neg) = (p_slot[s], self.slot_count[s] - p_slot[s]);
            let l1 = (q / r).ln();
            let l0 = ((1.0 - q) / (1.0 - r)).ln();
            value += pos * l1 + neg * l0;
            a[s] = l1 - l0;
            b[s] = (pos / q - neg / (1.0 - q)) * inside(q_raw);
        }
        let c = (-s_all / r + (n - s_all) / (1.0 - r)) * inside(r_raw);
        PiParts { value, a, b, c }
    }
}

struct PiParts {
    value: f64,
    /// ∂/∂p_j through the direct term, per slot.
    a: Vec<f64>,
    /// ∂/∂q_s, to be scaled by w_j / W_s.
    b: Vec<f64>,
    /// ∂/∂r, to be scaled by w_j / W.
    c: f64,
}

impl Objective for LogisticObjective<'_> {
    fn dim(&self) -> usize {
        self.slots * self.width()
    }

    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.cols();
        let z = self.logits(params);
        let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();

        let mut nll = 0.0;
        let mut dz: Vec<f64> = Vec::with_capacity(z.len());
        for i in 0..z.len() {
            let yi = f64::from(self.y[i]);
            nll += self.w[i] * (softplus(z[i]) - yi * z[i]);
            dz.push(self.w[i] * (probs[i] - yi) / self.total_weight);
        }
        let mut value = nll / self.total_weight;

        if self.eta > 0.0 {
            let n = z.len() as f64;
            let pi = self.pi_parts(&probs);
            value += self.eta * pi.value / n;
            for i in 0..z.len() {
                let s = self.slot_of_row[i];
                let dp = pi.a[s]
                    + self.w[i] / self.slot_weight[s] * pi.b[s]
                    + self.w[i] / self.total_weight * pi.c;
                dz[i] += self.eta / n * probs[i] * (1.0 - probs[i]) * dp;
            }
        }

        grad.fill(0.0);
        for (i, row) in self.x.iter_rows().enumerate() {
            let s = self.slot_of_row[i];
            let g = &mut grad[s * (d + 1)..(s + 1) * (d + 1)];
            for (gk, xk) in g.iter_mut().zip(row) {
                *gk += dz[i] * xk;
            }
            g[d] += dz[i];
        }
        for s in 0..self.slots {
            let share = self.penalty_share[s];
            let theta = &params[s * (d + 1)..s * (d + 1) + d];
            value += 0.5 * self.l2 * share * theta.iter().map(|t| t * t).sum::<f64>();
            for k in 0..d {
                grad[s * (d + 1) + k] += self.l2 * share * theta[k];
            }
        }
        value
    }
}

fn check_lengths(
    x: &EncodedMatrix,
    y: &[u8],
    w: &[f64],
    groups: Option<&[Group]>,
) -> Result<(), TrainError> {
    if x.rows() != y.len() || y.len() != w.len() || groups.is_some_and(|g| g.len() != y.len()) {
        return Err(TrainError::Length(format!(
            "{} rows, {} labels, {} weights",
            x.rows(),
            y.len(),
            w.len()
        )));
    }
    if y.is_empty() {
        return Err(TrainError::Empty);
    }
    Ok(())
}

fn fit(
    obj: &LogisticObjective<'_>,
    cfg: &TrainerConfig,
) -> Result<(Vec<f64>, ConvergenceRecord), TrainError> {
    let min = optim::minimize(obj, vec![0.0; obj.dim()], &cfg.lbfgs()).map_err(|e| match e {
        optim::OptimError::NonFinite { iteration } => TrainError::NonFiniteLoss { iteration },
    })?;
    let record = ConvergenceRecord {
        iterations: min.iterations,
        grad_norm: min.grad_norm,
        converged: min.converged,
        final_loss: min.value,
        loss_history: min.history,
    };
    Ok((min.x, record))
}

pub fn train_vanilla(
    x: &EncodedMatrix,
    y: &[u8],
    w: &SampleWeights,
    cfg: &TrainerConfig,
) -> Result<ModelParams, TrainError> {
    cfg.validate()?;
    let obj = LogisticObjective::vanilla(x, y, w.as_slice(), cfg.l2)?;
    let (params, convergence) = fit(&obj, cfg)?;
    let d = x.cols();
    let groups = Group::ALL
        .iter()
        .map(|&g| GroupCoefficients {
            group: g,
            coef: params[..d].to_vec(),
            intercept: params[d],
        })
        .collect();
    Ok(ModelParams {
        form: ModelForm::Vanilla,
        dim: d,
        groups,
        shared: true,
        convergence,
        config: *cfg,
    })
}

pub fn train_prejudice_remover(
    x: &EncodedMatrix,
    y: &[u8],
    groups: &[Group],
    w: &SampleWeights,
    cfg: &TrainerConfig,
) -> Result<ModelParams, TrainError> {
    cfg.validate()?;
    let obj = LogisticObjective::prejudice_remover(x, y, groups, w.as_slice(), cfg.l2, cfg.eta)?;
    let (params, convergence) = fit(&obj, cfg)?;
    let d = x.cols();
    let groups = Group::ALL
        .iter()
        .map(|&g| {
            let p = &params[g.index() * (d + 1)..(g.index() + 1) * (d + 1)];
            GroupCoefficients {
                group: g,
                coef: p[..d].to_vec(),
                intercept: p[d],
            }
        })
        .collect();
    Ok(ModelParams {
        form: ModelForm::PrejudiceRemover,
        dim: d,
        groups,
        shared: false,
        convergence,
        config: *cfg,
    })
}

/// `p_i = σ(θ_{g_i}·x_i + b_{g_i})`; the hard label is 1 only when `p > 0.5`.
pub fn predict(
    params: &ModelParams,
    x: &EncodedMatrix,
    groups: &[Group],
) -> Result<Predictions, TrainError> {
    if x.cols() != params.dim {
        return Err(TrainError::Width {
            expected: params.dim,
            found: x.cols(),
        });
    }
    if groups.len() != x.rows() {
        return Err(TrainError::Length(format!(
            "{} rows, {} groups",
            x.rows(),
            groups.len()
        )));
    }
    let mut lookup: [Option<&GroupCoefficients>; 3] = [None; 3];
    for c in &params.groups {
        lookup[c.group.index()] = Some(c);
    }
    let mut probs = Vec::with_capacity(x.rows());
    for (row, g) in x.iter_rows().zip(groups) {
        let c = lookup[g.index()].ok_or(TrainError::UnfittedGroup(*g))?;
        let z = row.iter().zip(&c.coef).map(|(a, b)| a * b).sum::<f64>() + c.intercept;
        probs.push(sigmoid(z));
    }
    let labels = probs.iter().map(|&p| u8::from(p > 0.5)).collect();
    Ok(Predictions { probs, labels })
}
