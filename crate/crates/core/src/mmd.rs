//! Maximum mean discrepancy between encoded contexts.
//!
//! With the linear kernel the feature map is the identity, so every estimate
//! reduces to sums of encoded rows: the biased (V-statistic) estimate is the
//! squared distance between mean embeddings, and the unbiased (U-statistic)
//! estimate only additionally needs the sum of squared row norms. Both run in
//! `O((m + n) d)` and never materialise a Gram matrix. Generic quadratic-time
//! estimators are available for other [`Kernel`]s.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ContextCollection, Dataset};
use crate::encode::{EncodeError, EncodedMatrix, EncoderSpec};

#[derive(Debug, Error, PartialEq)]
pub enum MmdError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("estimator needs at least {needed} rows per sample, got {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("need at least two contexts, got {0}")]
    TooFewContexts(usize),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

pub type Result<T> = std::result::Result<T, MmdError>;

pub trait Kernel: Sync {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64;
    fn name(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearKernel;

impl Kernel for LinearKernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

pub fn linear_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MmdError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(LinearKernel.eval(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Biased,
    Unbiased,
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "biased" => Ok(Estimator::Biased),
            "unbiased" => Ok(Estimator::Unbiased),
            other => Err(format!("unknown estimator `{other}` (biased|unbiased)")),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Biased => "biased",
            Estimator::Unbiased => "unbiased",
        })
    }
}

/// Sufficient statistics of an encoded sample under the linear kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEmbedding {
    n: usize,
    sum: Vec<f64>,
    sum_sq_norm: f64,
}

impl MeanEmbedding {
    fn empty(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq_norm: 0.0,
        }
    }

    fn push(&mut self, row: &[f64]) {
        self.n += 1;
        for (s, v) in self.sum.iter_mut().zip(row) {
            *s += v;
        }
        self.sum_sq_norm += row.iter().map(|v| v * v).sum::<f64>();
    }

    pub fn from_matrix(x: &EncodedMatrix) -> Self {
        let mut e = Self::empty(x.cols());
        for row in x.iter_rows() {
            e.push(row);
        }
        e
    }

    /// Streams `ds` through the encoder.
    pub fn from_dataset(encoder: &EncoderSpec, ds: &Dataset) -> Result<Self> {
        let mut e = Self::empty(encoder.dim);
        encoder.for_each_row(ds, |row| e.push(row))?;
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    fn check(&self, other: &Self, needed: usize) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(MmdError::DimensionMismatch(self.dim(), other.dim()));
        }
        let found = self.n.min(other.n);
        if found < needed {
            return Err(MmdError::TooFewRows { needed, found });
        }
        Ok(())
    }

    /// ‖mean(X) − mean(V)‖².
    pub fn biased(&self, other: &Self) -> Result<f64> {
        self.check(other, 1)?;
        let (m, n) = (self.n as f64, other.n as f64);
        Ok(self
            .sum
            .iter()
            .zip(&other.sum)
            .map(|(a, b)| (a / m - b / n).powi(2))
            .sum())
    }

    /// Diagonal-excluded within-sample terms minus twice the cross term, each
    /// normalised by its own sample sizes. May be negative.
    pub fn unbiased(&self, other: &Self) -> Result<f64> {
        self.check(other, 2)?;
        let (m, n) = (self.n as f64, other.n as f64);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let xx = (dot(&self.sum, &self.sum) - self.sum_sq_norm) / (m * (m - 1.0));
        let vv = (dot(&other.sum, &other.sum) - other.sum_sq_norm) / (n * (n - 1.0));
        let xv = dot(&self.sum, &other.sum) / (m * n);
        Ok(xx - 2.0 * xv + vv)
    }

    pub fn estimate(&self, other: &Self, estimator: Estimator) -> Result<f64> {
        match estimator {
            Estimator::Biased => self.biased(other),
            Estimator::Unbiased => self.unbiased(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub biased: f64,
    /// `None` when either sample has fewer than two rows.
    pub unbiased: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub kernel: String,
}

fn check_dims(x: &EncodedMatrix, v: &EncodedMatrix) -> Result<()> {
    if x.cols() != v.cols() {
        return Err(MmdError::DimensionMismatch(x.cols(), v.cols()));
    }
    Ok(())
}

pub fn mmd2_biased(x: &EncodedMatrix, v: &EncodedMatrix) -> Result<f64> {
    check_dims(x, v)?;
    MeanEmbedding::from_matrix(x).biased(&MeanEmbedding::from_matrix(v))
}

pub fn mmd2_unbiased(x: &EncodedMatrix, v: &EncodedMatrix) -> Result<f64> {
    check_dims(x, v)?;
    MeanEmbedding::from_matrix(x).unbiased(&MeanEmbedding::from_matrix(v))
}

pub fn mmd(x: &EncodedMatrix, v: &EncodedMatrix) -> Result<MmdResult> {
    check_dims(x, v)?;
    let (ex, ev) = (MeanEmbedding::from_matrix(x), MeanEmbedding::from_matrix(v));
    Ok(MmdResult {
        biased: ex.biased(&ev)?,
        unbiased: ex.unbiased(&ev).ok(),
        m: x.rows(),
        n: v.rows(),
        kernel: LinearKernel.name().to_string(),
    })
}

/// Quadratic-time V-statistic for an arbitrary kernel.
pub fn mmd2_biased_with<K: Kernel>(
    kernel: &K,
    x: &EncodedMatrix,
    v: &EncodedMatrix,
) -> Result<f64> {
    check_dims(x, v)?;
    if x.rows() == 0 || v.rows() == 0 {
        return Err(MmdError::TooFewRows {
            needed: 1,
            found: 0,
        });
    }
    let mean_gram = |a: &EncodedMatrix, b: &EncodedMatrix| {
        let mut s = 0.0;
        for ra in a.iter_rows() {
            for rb in b.iter_rows() {
                s += kernel.eval(ra, rb);
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    Ok(mean_gram(x, x) - 2.0 * mean_gram(x, v) + mean_gram(v, v))
}

// ---------------------------------------------------------------------------
// Matrices over contexts
// ---------------------------------------------------------------------------

/// Symmetric context-by-context MMD values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdMatrix {
    pub ids: Vec<String>,
    pub estimator: Estimator,
    /// Row-major `ids.len()²`; the diagonal is zero.
    pub raw: Vec<f64>,
    /// Min–max scaled off-diagonal values in `[0, 1]`; zero diagonal.
    pub normalized: Vec<f64>,
    /// Per context, the sum of normalized values against all other contexts.
    pub row_sums: Vec<f64>,
}

impl MmdMatrix {
    pub fn from_raw(ids: Vec<String>, raw: Vec<f64>, estimator: Estimator) -> Result<Self> {
        let k = ids.len();
        if k < 2 {
            return Err(MmdError::TooFewContexts(k));
        }
        assert_eq!(raw.len(), k * k, "raw matrix must be square");
        let normalized = normalize_matrix(&raw, k);
        let row_sums = mmd_row_sums(&normalized, k);
        Ok(Self {
            ids,
            estimator,
            raw,
            normalized,
            row_sums,
        })
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn raw_at(&self, i: usize, j: usize) -> f64 {
        self.raw[i * self.size() + j]
    }

    pub fn normalized_at(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.size() + j]
    }

    pub fn row_sum(&self, id: &str) -> Option<f64> {
        self.index(id).map(|i| self.row_sums[i])
    }
}

/// Min–max scaling: `(v − min) / (max − min)`; all zeros when `max == min`.
pub fn normalize_values(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect()
}

/// Min–max scales the off-diagonal entries of a `k×k` matrix; the diagonal
/// is set to zero.
pub fn normalize_matrix(raw: &[f64], k: usize) -> Vec<f64> {
    let off: Vec<f64> = (0..k * k)
        .filter(|&idx| idx / k != idx % k)
        .map(|idx| raw[idx])
        .collect();
    let scaled = normalize_values(&off);
    let mut out = vec![0.0; k * k];
    let mut it = scaled.into_iter();
    for (idx, slot) in out.iter_mut().enumerate() {
        if idx / k != idx % k {
            *slot = it.next().expect("one value per off-diagonal entry");
        }
    }
    out
}

/// Per-row sums over off-diagonal entries.
pub fn mmd_row_sums(values: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| values[i * k + j]).sum())
        .collect()
}

pub fn pairwise_from_embeddings(
    ids: Vec<String>,
    embeddings: &[MeanEmbedding],
    estimator: Estimator,
) -> Result<MmdMatrix> {
    let k = ids.len();
    if k < 2 {
        return Err(MmdError::TooFewContexts(k));
    }
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| embeddings[i].estimate(&embeddings[j], estimator))
        .collect::<Result<_>>()?;
    let mut raw = vec![0.0; k * k];
    for (&(i, j), v) in pairs.iter().zip(values) {
        raw[i * k + j] = v;
        raw[j * k + i] = v;
    }
    MmdMatrix::from_raw(ids, raw, estimator)
}

/// Pairwise MMD between all contexts of a collection under one shared
/// encoder. Group and label columns never enter the encoding.
pub fn pairwise_mmd(
    coll: &ContextCollection,
    encoder: &EncoderSpec,
    estimator: Estimator,
) -> Result<MmdMatrix> {
    let entries: Vec<(&str, &Dataset)> = coll.iter().collect();
    if entries.len() < 2 {
        return Err(MmdError::TooFewContexts(entries.len()));
    }
    let embeddings: Vec<MeanEmbedding> = entries
        .par_iter()
        .map(|(_, ds)| MeanEmbedding::from_dataset(encoder, ds))
        .collect::<Result<_>>()?;
    let ids = entries.iter().map(|(id, _)| id.to_string()).collect();
    pairwise_from_embeddings(ids, &embeddings, estimator)
}

/// One point of the global-vs-local similarity scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub context: String,
    pub mmd_raw: f64,
    /// Min–max scaled over the contexts of this invocation.
    pub mmd: f64,
    /// Negatives per positive of the local dataset; `None` without positives.
    pub ir: Option<f64>,
    pub eq_odds: Option<f64>,
}

/// MMD of every local context against the global dataset, with the local
/// imbalance ratio and (when given) the global model's Eq.Odds on that context.
pub fn global_local_mmd(
    global: &Dataset,
    coll: &ContextCollection,
    encoder: &EncoderSpec,
    estimator: Estimator,
    eq_odds: Option<&BTreeMap<String, Option<f64>>>,
) -> Result<Vec<ScatterRow>> {
    let reference = MeanEmbedding::from_dataset(encoder, global)?;
    let entries: Vec<(&str, &Dataset)> = coll.iter().collect();
    let raw: Vec<f64> = entries
        .par_iter()
        .map(|(_, ds)| MeanEmbedding::from_dataset(encoder, ds)?.estimate(&reference, estimator))
        .collect::<Result<_>>()?;
    let scaled = normalize_values(&raw);
    Ok(entries
        .iter()
        .zip(raw.iter().zip(scaled))
        .map(|((id, ds), (&mmd_raw, mmd))| {
            let pos = ds.labels().iter().filter(|&&y| y == 1).count();
            ScatterRow {
                context: id.to_string(),
                mmd_raw,
                mmd,
                ir: (pos > 0).then(|| (ds.len() - pos) as f64 / pos as f64),
                eq_odds: eq_odds.and_then(|m| m.get(*id).copied().flatten()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> EncodedMatrix {
        EncodedMatrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kernel_basics() {
        assert_eq!(linear_kernel(&[0.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(linear_kernel(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let a = [1.5, -2.0, 0.25];
        assert_eq!(
            linear_kernel(&a, &a).unwrap(),
            a.iter().map(|v| v * v).sum::<f64>()
        );
        assert_eq!(
            linear_kernel(&[1.0], &[1.0, 2.0]),
            Err(MmdError::DimensionMismatch(1, 2))
        );
    }

    #[test]
    fn hand_case() {
        let x = col(&[0.0, 2.0]);
        let v = col(&[1.0, 3.0]);
        assert_eq!(mmd2_biased(&x, &v).unwrap(), 1.0);
        assert_eq!(mmd2_unbiased(&x, &v).unwrap(), -1.0);
        assert_eq!(mmd2_biased(&x, &x).unwrap(), 0.0);
        assert_eq!(mmd2_biased_with(&LinearKernel, &x, &v).unwrap(), 1.0);
    }

    #[test]
    fn scaling_is_quadratic() {
        let x = col(&[0.0, 2.0, 5.0]);
        let v = col(&[1.0, 3.0]);
        let base = mmd2_biased(&x, &v).unwrap();
        let scaled = mmd2_biased(&x.scaled(3.0), &v.scaled(3.0)).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn unbiased_needs_two_rows() {
        assert_eq!(
            mmd2_unbiased(&col(&[1.0]), &col(&[1.0, 2.0])),
            Err(MmdError::TooFewRows {
                needed: 2,
                found: 1
            })
        );
        assert!(mmd(&col(&[1.0]), &col(&[2.0])).unwrap().unbiased.is_none());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_values(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_values(&[3.0, 3.0]), vec![0.0, 0.0]);
        // 3x3 with off-diagonal {2, 4, 6}
        let raw = vec![0.0, 2.0, 4.0, 2.0, 0.0, 6.0, 4.0, 6.0, 0.0];
        let m = MmdMatrix::from_raw(
            vec!["A".into(), "B".into(), "C".into()],
            raw,
            Estimator::Biased,
        )
        .unwrap();
        assert_eq!(
            m.normalized,
            vec![0.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.5, 1.0, 0.0]
        );
        assert_eq!(m.row_sums, vec![0.5, 1.0, 1.5]);
        assert!(MmdMatrix::from_raw(vec!["A".into()], vec![0.0], Estimator::Biased).is_err());
    }

    #[test]
    fn estimator_parsing() {
        assert_eq!("biased".parse::<Estimator>().unwrap(), Estimator::Biased);
        assert_eq!(
            "unbiased".parse::<Estimator>().unwrap(),
            Estimator::Unbiased
        );
        assert!("rbf".parse::<Estimator>().is_err());
    }
}
