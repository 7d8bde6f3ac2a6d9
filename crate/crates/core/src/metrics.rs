//! Group fairness metrics over binary predictions: selection rate,
//! demographic parity ratio/difference, per-group error rates and
//! equalized odds ratio/difference, plus plain accuracy.
//!
//! Rates are computed from exact integer counts with a single division.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("group `{0}` has no instances")]
    EmptyGroup(String),
    #[error("{which} undefined for group `{group}` (zero denominator)")]
    UndefinedRate { group: String, which: &'static str },
    #[error("need at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    fn add(&mut self, pred: u8, label: u8) {
        match (pred == 1, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

pub fn selection_rate(predictions: &[u8]) -> Result<f64, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::EmptyGroup(String::new()));
    }
    let pos = predictions.iter().filter(|&&p| p == 1).count();
    Ok(pos as f64 / predictions.len() as f64)
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64, MetricsError> {
    check_len(predictions.len(), labels.len(), "predictions/labels")?;
    if predictions.is_empty() {
        return Err(MetricsError::EmptyGroup(String::new()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `(min / max, max - min)` with the all-zero convention `(1, 0)`.
fn ratio_and_gap(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if hi == 0.0 {
        log::warn!("all group rates are zero; using ratio 1, difference 0");
        return (1.0, 0.0);
    }
    (lo / hi, hi - lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport<G: Ord> {
    pub rates: BTreeMap<G, f64>,
    pub ratio: f64,
    pub difference: f64,
}

pub fn demographic_parity<G: Ord + Clone + Debug>(
    predictions: &[u8],
    groups: &[G],
) -> Result<ParityReport<G>, MetricsError> {
    check_len(predictions.len(), groups.len(), "predictions/groups")?;
    let mut counts: BTreeMap<G, (u64, u64)> = BTreeMap::new();
    for (p, g) in predictions.iter().zip(groups) {
        let c = counts.entry(g.clone()).or_default();
        c.0 += u64::from(*p == 1);
        c.1 += 1;
    }
    if counts.len() < 2 {
        return Err(MetricsError::TooFewGroups(counts.len()));
    }
    let rates: BTreeMap<G, f64> = counts
        .into_iter()
        .map(|(g, (pos, n))| (g, pos as f64 / n as f64))
        .collect();
    let (ratio, difference) = ratio_and_gap(rates.values().copied());
    Ok(ParityReport {
        rates,
        ratio,
        difference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub confusion: Confusion,
    pub tpr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tnr: f64,
}

pub fn group_confusion<G: Ord + Clone>(
    predictions: &[u8],
    labels: &[u8],
    groups: &[G],
) -> Result<BTreeMap<G, Confusion>, MetricsError> {
    check_len(predictions.len(), labels.len(), "predictions/labels")?;
    check_len(predictions.len(), groups.len(), "predictions/groups")?;
    let mut out: BTreeMap<G, Confusion> = BTreeMap::new();
    for ((&p, &l), g) in predictions.iter().zip(labels).zip(groups) {
        out.entry(g.clone()).or_default().add(p, l);
    }
    Ok(out)
}

pub fn group_rates<G: Ord + Clone + Debug>(
    predictions: &[u8],
    labels: &[u8],
    groups: &[G],
) -> Result<BTreeMap<G, GroupRates>, MetricsError> {
    group_confusion(predictions, labels, groups)?
        .into_iter()
        .map(|(g, c)| {
            let undefined = |which| MetricsError::UndefinedRate {
                group: format!("{g:?}"),
                which,
            };
            if c.positives() == 0 {
                return Err(undefined("tpr"));
            }
            if c.negatives() == 0 {
                return Err(undefined("fpr"));
            }
            let pos = c.positives() as f64;
            let neg = c.negatives() as f64;
            let rates = GroupRates {
                confusion: c,
                tpr: c.tp as f64 / pos,
                fpr: c.fp as f64 / neg,
                fnr: c.fn_ as f64 / pos,
                tnr: c.tn as f64 / neg,
            };
            Ok((g, rates))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsReport<G: Ord> {
    pub rates: BTreeMap<G, GroupRates>,
    pub ratio: f64,
    pub difference: f64,
}

pub fn equalized_odds<G: Ord + Clone + Debug>(
    predictions: &[u8],
    labels: &[u8],
    groups: &[G],
) -> Result<OddsReport<G>, MetricsError> {
    let rates = group_rates(predictions, labels, groups)?;
    if rates.len() < 2 {
        return Err(MetricsError::TooFewGroups(rates.len()));
    }
    let (tpr_ratio, tpr_gap) = ratio_and_gap(rates.values().map(|r| r.tpr));
    let (fpr_ratio, fpr_gap) = ratio_and_gap(rates.values().map(|r| r.fpr));
    Ok(OddsReport {
        rates,
        ratio: tpr_ratio.min(fpr_ratio),
        difference: tpr_gap.max(fpr_gap),
    })
}

/// All per-run fairness numbers for one phase (before or after mitigation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub selection_rate: BTreeMap<String, f64>,
    pub dp_ratio: f64,
    pub dp_difference: f64,
    pub fnr: BTreeMap<String, f64>,
    pub tpr: BTreeMap<String, f64>,
    pub fpr: BTreeMap<String, f64>,
    pub eo_ratio: f64,
    pub eo_difference: f64,
    pub accuracy: f64,
}

impl MetricSnapshot {
    pub fn compute<G: Ord + Clone + Debug + ToString>(
        predictions: &[u8],
        labels: &[u8],
        groups: &[G],
    ) -> Result<Self, MetricsError> {
        let dp = demographic_parity(predictions, groups)?;
        let eo = equalized_odds(predictions, labels, groups)?;
        let by_name = |f: &dyn Fn(&GroupRates) -> f64| -> BTreeMap<String, f64> {
            eo.rates.iter().map(|(g, r)| (g.to_string(), f(r))).collect()
        };
        Ok(Self {
            selection_rate: dp.rates.iter().map(|(g, r)| (g.to_string(), *r)).collect(),
            dp_ratio: dp.ratio,
            dp_difference: dp.difference,
            fnr: by_name(&|r| r.fnr),
            tpr: by_name(&|r| r.tpr),
            fpr: by_name(&|r| r.fpr),
            eo_ratio: eo.ratio,
            eo_difference: eo.difference,
            accuracy: accuracy(predictions, labels)?,
        })
    }

    /// Flattened `name -> value` view (`selection_rate.male`, `dp_ratio`, ...).
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [
            ("selection_rate", &self.selection_rate),
            ("fnr", &self.fnr),
            ("tpr", &self.tpr),
            ("fpr", &self.fpr),
        ] {
            for (g, v) in map {
                out.insert(format!("{prefix}.{g}"), *v);
            }
        }
        out.insert("dp_ratio".into(), self.dp_ratio);
        out.insert("dp_difference".into(), self.dp_difference);
        out.insert("eo_ratio".into(), self.eo_ratio);
        out.insert("eo_difference".into(), self.eo_difference);
        out.insert("accuracy".into(), self.accuracy);
        out
    }
}
