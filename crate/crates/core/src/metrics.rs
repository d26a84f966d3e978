//! Group-conditioned error rates and equalized-odds style gaps.
//!
//! A rate whose conditioning set is empty (e.g. FNR of a group without
//! positives) is undefined and represented as `None`; it is never folded into
//! a zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Group;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {labels} labels, {preds} predictions, {groups} groups")]
    Length {
        labels: usize,
        preds: usize,
        groups: usize,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// FN / (TP + FN).
    pub fn fnr(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.fn_ as f64 / pos as f64)
    }

    /// FP / (FP + TN).
    pub fn fpr(&self) -> Option<f64> {
        let neg = self.fp + self.tn;
        (neg > 0).then(|| self.fp as f64 / neg as f64)
    }
}

/// Confusion counts per group, indexed by [`Group::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion(pub [Confusion; 3]);

impl GroupConfusion {
    pub fn get(&self, g: Group) -> &Confusion {
        &self.0[g.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(Confusion::total).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        let correct: usize = self.0.iter().map(|c| c.tp + c.tn).sum();
        (n > 0).then(|| correct as f64 / n as f64)
    }
}

pub fn confusion_by_group(
    labels: &[u8],
    preds: &[u8],
    groups: &[Group],
) -> Result<GroupConfusion, MetricsError> {
    if labels.len() != preds.len() || labels.len() != groups.len() {
        return Err(MetricsError::Length {
            labels: labels.len(),
            preds: preds.len(),
            groups: groups.len(),
        });
    }
    let mut out = GroupConfusion::default();
    for ((&y, &p), g) in labels.iter().zip(preds).zip(groups) {
        let c = &mut out.0[g.index()];
        match (y, p) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fn_ += 1,
            (_, 1) => c.fp += 1,
            _ => c.tn += 1,
        }
    }
    Ok(out)
}

/// |FNR_reference − FNR_other|, undefined if either group has no positives.
pub fn delta_fnr(conf: &GroupConfusion, reference: Group, other: Group) -> Option<f64> {
    Some((conf.get(reference).fnr()? - conf.get(other).fnr()?).abs())
}

/// |FPR_reference − FPR_other|, undefined if either group has no negatives.
pub fn delta_fpr(conf: &GroupConfusion, reference: Group, other: Group) -> Option<f64> {
    Some((conf.get(reference).fpr()? - conf.get(other).fpr()?).abs())
}

/// |δFPR| + |δFNR|; undefined when either component is.
pub fn eq_odds(dfpr: Option<f64>, dfnr: Option<f64>) -> Option<f64> {
    Some(dfpr?.abs() + dfnr?.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub other: Group,
    pub dfpr: Option<f64>,
    pub dfnr: Option<f64>,
    pub eq_odds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessScores {
    pub reference: Group,
    pub accuracy: Option<f64>,
    /// One entry per non-reference group, in group order.
    pub pairs: Vec<PairScores>,
}

impl FairnessScores {
    pub fn from_confusion(conf: &GroupConfusion, reference: Group) -> Self {
        let pairs = Group::ALL
            .iter()
            .filter(|&&g| g != reference)
            .map(|&other| {
                let dfpr = delta_fpr(conf, reference, other);
                let dfnr = delta_fnr(conf, reference, other);
                PairScores {
                    other,
                    dfpr,
                    dfnr,
                    eq_odds: eq_odds(dfpr, dfnr),
                }
            })
            .collect();
        Self {
            reference,
            accuracy: conf.accuracy(),
            pairs,
        }
    }

    pub fn compute(
        labels: &[u8],
        preds: &[u8],
        groups: &[Group],
        reference: Group,
    ) -> Result<Self, MetricsError> {
        Ok(Self::from_confusion(
            &confusion_by_group(labels, preds, groups)?,
            reference,
        ))
    }

    pub fn pair(&self, other: Group) -> Option<&PairScores> {
        self.pairs.iter().find(|p| p.other == other)
    }

    /// Flat column names matching [`FairnessScores::values`], e.g.
    /// `accuracy, dfpr_wb, dfnr_wb, eqodds_wb, dfpr_wo, ...`.
    pub fn column_names(reference: Group) -> Vec<String> {
        let mut out = vec!["accuracy".to_string()];
        for other in Group::ALL.iter().filter(|&&g| g != reference) {
            let tag = format!("{}{}", reference.letter(), other.letter());
            out.push(format!("dfpr_{tag}"));
            out.push(format!("dfnr_{tag}"));
            out.push(format!("eqodds_{tag}"));
        }
        out
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        let mut out = vec![self.accuracy];
        for p in &self.pairs {
            out.extend([p.dfpr, p.dfnr, p.eq_odds]);
        }
        out
    }

    fn from_values(reference: Group, values: &[Option<f64>]) -> Self {
        let others: Vec<Group> = Group::ALL.into_iter().filter(|&g| g != reference).collect();
        let pairs = others
            .iter()
            .enumerate()
            .map(|(k, &other)| PairScores {
                other,
                dfpr: values[1 + 3 * k],
                dfnr: values[2 + 3 * k],
                eq_odds: values[3 + 3 * k],
            })
            .collect();
        Self {
            reference,
            accuracy: values[0],
            pairs,
        }
    }
}

/// Unweighted mean of several score sets, skipping undefined entries.
/// Returns the averaged scores and, per column, how many inputs were defined.
///
/// # Panics
/// If `scores` is empty or mixes reference groups.
pub fn mean_scores(scores: &[FairnessScores]) -> (FairnessScores, Vec<usize>) {
    let reference = scores[0].reference;
    assert!(scores.iter().all(|s| s.reference == reference));
    let width = FairnessScores::column_names(reference).len();
    let mut sums = vec![0.0; width];
    let mut counts = vec![0usize; width];
    for s in scores {
        for (k, v) in s.values().into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    (FairnessScores::from_values(reference, &means), counts)
}
