//! Numeric encoding of mixed-type datasets.
//!
//! Numeric features are standardized with training-set population statistics;
//! categorical features are one-hot encoded over the categories seen at fit
//! time (sorted lexicographically). Categories unseen at fit time encode as an
//! all-zero block. Group and label columns are never part of the encoding.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, Dataset, FeatureKind};

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("cannot fit an encoder on an empty dataset")]
    EmptyTraining,
    #[error("dataset feature `{found}` does not match encoder feature `{expected}`")]
    FeatureMismatch { expected: String, found: String },
    #[error("dataset has {found} features, encoder expects {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("non-finite value in feature `{0}`")]
    NonFinite(String),
    #[error("matrix data has {len} entries, expected {rows}x{cols}")]
    Shape {
        len: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureEncoding {
    Numeric {
        name: String,
        mean: f64,
        std: f64,
    },
    Categorical {
        name: String,
        categories: Vec<String>,
    },
}

impl FeatureEncoding {
    pub fn name(&self) -> &str {
        match self {
            FeatureEncoding::Numeric { name, .. } | FeatureEncoding::Categorical { name, .. } => {
                name
            }
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureEncoding::Numeric { .. } => 1,
            FeatureEncoding::Categorical { categories, .. } => categories.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncoderOptions {
    /// Categories seen fewer times than this in training are dropped (they
    /// then encode like unseen categories). `0` and `1` keep everything.
    pub min_category_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub features: Vec<FeatureEncoding>,
    pub dim: usize,
}

/// Dense row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EncodedMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EncodeError> {
        if data.len() != rows * cols {
            return Err(EncodeError::Shape {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EncodeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(EncodeError::Shape {
                    len: r.len(),
                    rows: 1,
                    cols,
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> EncodedMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        EncodedMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scaled(&self, c: f64) -> EncodedMatrix {
        EncodedMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

pub fn fit_encoder(train: &Dataset) -> Result<EncoderSpec, EncodeError> {
    fit_encoder_with(train, EncoderOptions::default())
}

pub fn fit_encoder_with(train: &Dataset, opts: EncoderOptions) -> Result<EncoderSpec, EncodeError> {
    if train.is_empty() {
        return Err(EncodeError::EmptyTraining);
    }
    let mut features = Vec::with_capacity(train.features().len());
    for (spec, column) in train.features().iter().zip(train.columns()) {
        let enc = match column {
            Column::Numeric(values) => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EncodeError::NonFinite(spec.name.clone()));
                }
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                FeatureEncoding::Numeric {
                    name: spec.name.clone(),
                    mean,
                    std: if std > 0.0 { std } else { 1.0 },
                }
            }
            Column::Categorical(values) => {
                let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
                for v in values {
                    *counts.entry(v.as_ref()).or_default() += 1;
                }
                let categories = counts
                    .into_iter()
                    .filter(|&(_, c)| c >= opts.min_category_count)
                    .map(|(k, _)| k.to_string())
                    .collect();
                FeatureEncoding::Categorical {
                    name: spec.name.clone(),
                    categories,
                }
            }
        };
        features.push(enc);
    }
    let dim = features.iter().map(FeatureEncoding::width).sum();
    Ok(EncoderSpec { features, dim })
}

impl EncoderSpec {
    fn check(&self, ds: &Dataset) -> Result<(), EncodeError> {
        if ds.features().len() != self.features.len() {
            return Err(EncodeError::WidthMismatch {
                expected: self.features.len(),
                found: ds.features().len(),
            });
        }
        for (enc, spec) in self.features.iter().zip(ds.features()) {
            let kind_ok = matches!(
                (enc, spec.kind),
                (FeatureEncoding::Numeric { .. }, FeatureKind::Numeric)
                    | (
                        FeatureEncoding::Categorical { .. },
                        FeatureKind::Categorical
                    )
            );
            if enc.name() != spec.name || !kind_ok {
                return Err(EncodeError::FeatureMismatch {
                    expected: enc.name().to_string(),
                    found: spec.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Writes row `row` of `ds` into `out` (length `dim`). Assumes `check` passed.
    fn encode_row(&self, ds: &Dataset, lookups: &[Lookup<'_>], row: usize, out: &mut [f64]) {
        out.fill(0.0);
        let mut offset = 0;
        for ((enc, column), lookup) in self.features.iter().zip(ds.columns()).zip(lookups) {
            match (enc, column) {
                (FeatureEncoding::Numeric { mean, std, .. }, Column::Numeric(v)) => {
                    out[offset] = (v[row] - mean) / std;
                }
                (FeatureEncoding::Categorical { .. }, Column::Categorical(v)) => {
                    if let Some(pos) = lookup.position(&v[row]) {
                        out[offset + pos] = 1.0;
                    }
                }
                _ => unreachable!("feature kinds checked"),
            }
            offset += enc.width();
        }
    }

    fn lookups(&self) -> Vec<Lookup<'_>> {
        self.features
            .iter()
            .map(|f| match f {
                FeatureEncoding::Categorical { categories, .. } => Lookup::new(categories),
                FeatureEncoding::Numeric { .. } => Lookup::new(&[]),
            })
            .collect()
    }

    pub fn transform(&self, ds: &Dataset) -> Result<EncodedMatrix, EncodeError> {
        self.check(ds)?;
        let lookups = self.lookups();
        let mut data = vec![0.0; ds.len() * self.dim];
        if self.dim > 0 {
            for (row, out) in data.chunks_exact_mut(self.dim).enumerate() {
                self.encode_row(ds, &lookups, row, out);
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            let name = self
                .features
                .iter()
                .find(|f| matches!(f, FeatureEncoding::Numeric { .. }))
                .map_or("?", FeatureEncoding::name);
            return Err(EncodeError::NonFinite(name.to_string()));
        }
        EncodedMatrix::new(ds.len(), self.dim, data)
    }

    /// Streams the encoded rows of `ds` through `f` without materialising the
    /// full matrix.
    pub fn for_each_row(&self, ds: &Dataset, mut f: impl FnMut(&[f64])) -> Result<(), EncodeError> {
        self.check(ds)?;
        let lookups = self.lookups();
        let mut buf = vec![0.0; self.dim];
        for row in 0..ds.len() {
            self.encode_row(ds, &lookups, row, &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(EncodeError::NonFinite(format!("row {row}")));
            }
            f(&buf);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("encoder spec serializes")
    }
}

pub fn transform(spec: &EncoderSpec, ds: &Dataset) -> Result<EncodedMatrix, EncodeError> {
    spec.transform(ds)
}

struct Lookup<'a> {
    categories: &'a [String],
}

impl<'a> Lookup<'a> {
    fn new(categories: &'a [String]) -> Self {
        Self { categories }
    }

    fn position(&self, value: &Arc<str>) -> Option<usize> {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(value.as_ref()))
            .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSpec, Group};

    fn ds(nums: Vec<f64>, cats: Vec<&str>) -> Dataset {
        let n = nums.len();
        Dataset::new(
            "t",
            vec![FeatureSpec::numeric("x"), FeatureSpec::categorical("c")],
            vec![
                Column::Numeric(nums),
                Column::Categorical(cats.into_iter().map(Arc::from).collect()),
            ],
            vec![0; n],
            vec![Group::W; n],
            None,
        )
        .unwrap()
    }

    #[test]
    fn population_std() {
        let spec = fit_encoder(&ds(vec![1.0, 2.0, 3.0], vec!["a", "b", "a"])).unwrap();
        match &spec.features[0] {
            FeatureEncoding::Numeric { mean, std, .. } => {
                assert_eq!(*mean, 2.0);
                assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        match &spec.features[1] {
            FeatureEncoding::Categorical { categories, .. } => {
                assert_eq!(categories, &["a".to_string(), "b".to_string()]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.dim, 3);
    }

    #[test]
    fn constant_feature_gets_unit_std() {
        let spec = fit_encoder(&ds(vec![5.0; 3], vec!["a"; 3])).unwrap();
        assert_eq!(
            spec.features[0],
            FeatureEncoding::Numeric {
                name: "x".into(),
                mean: 5.0,
                std: 1.0
            }
        );
        let m = spec.transform(&ds(vec![5.0, 6.0], vec!["a", "a"])).unwrap();
        assert_eq!(m.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn width_and_unseen_category() {
        let train = ds(vec![0.0, 2.0], vec!["no", "yes"]);
        let spec = fit_encoder(&train).unwrap();
        let m = spec.transform(&train).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.row(0), &[-1.0, 1.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 0.0, 1.0]);

        let other = ds(vec![1.0], vec!["z"]);
        assert_eq!(spec.transform(&other).unwrap().row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardized_columns_have_zero_mean() {
        let train = ds(vec![3.5, -1.0, 8.25, 0.0, 12.0], vec!["a"; 5]);
        let spec = fit_encoder(&train).unwrap();
        let m = spec.transform(&train).unwrap();
        let mean: f64 = m.iter_rows().map(|r| r[0]).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn min_category_count_drops_rare_levels() {
        let train = ds(vec![0.0; 4], vec!["a", "a", "b", "c"]);
        let spec = fit_encoder_with(
            &train,
            EncoderOptions {
                min_category_count: 2,
            },
        )
        .unwrap();
        assert_eq!(spec.dim, 2);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let spec = fit_encoder(&ds(vec![1.0], vec!["a"])).unwrap();
        let other = Dataset::new(
            "t",
            vec![FeatureSpec::numeric("y")],
            vec![Column::Numeric(vec![1.0])],
            vec![0],
            vec![Group::W],
            None,
        )
        .unwrap();
        assert!(spec.transform(&other).is_err());
    }

    #[test]
    fn spec_serializes() {
        let spec = fit_encoder(&ds(vec![1.0, 2.0], vec!["a", "b"])).unwrap();
        let back: EncoderSpec = serde_json::from_str(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn empty_training_is_an_error() {
        assert_eq!(
            fit_encoder(&ds(vec![], vec![])),
            Err(EncodeError::EmptyTraining)
        );
    }
}
