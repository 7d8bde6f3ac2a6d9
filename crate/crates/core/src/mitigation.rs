//! Post-processing bias mitigation by per-group randomized thresholds.
//!
//! Each group gets a mixture of threshold rules over the base model's scores
//! (`predict 1 iff score > threshold`), optionally blended with a group-blind
//! coin flip. Demographic parity is enforced on a selection-rate lattice using
//! each group's concave accuracy/selection-rate envelope; equalized odds is
//! enforced on an FPR lattice using the pointwise minimum of the groups' ROC
//! convex hulls. Both maximise expected accuracy on the fitting data.
//!
//! Hull geometry is computed on integer counts so vertex selection is exact.

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DP_GRID: usize = 100;
pub const DEFAULT_EO_GRID: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum MitigationError {
    #[error("group `{0}` has no instances")]
    EmptyGroup(String),
    #[error("group `{group}` has no {which} labels; ROC undefined")]
    UndefinedRate { group: String, which: &'static str },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("no groups to fit")]
    NoGroups,
    #[error("grid size must be positive")]
    BadGrid,
    #[error("scores, labels and groups differ in length")]
    LengthMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    DemographicParity,
    EqualizedOdds,
}

impl Constraint {
    pub fn name(self) -> &'static str {
        match self {
            Constraint::DemographicParity => "demographic_parity",
            Constraint::EqualizedOdds => "equalized_odds",
        }
    }
}

/// `predict 1 iff score > threshold`; the threshold may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    #[serde(with = "signed_inf")]
    pub threshold: f64,
}

impl ThresholdRule {
    pub fn predict(&self, score: f64) -> u8 {
        u8::from(score > self.threshold)
    }
}

/// Serializes infinite thresholds as the strings `"inf"` / `"-inf"`.
mod signed_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("bad threshold `{other}`"))),
            },
        }
    }
}

/// Per-group randomized decision rule.
///
/// With probability `p_random` predict positive with probability
/// `random_rate` regardless of score; otherwise apply `threshold_a` with
/// probability `p` and `threshold_b` with probability `1 - p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMixture {
    #[serde(with = "signed_inf")]
    pub threshold_a: f64,
    #[serde(with = "signed_inf")]
    pub threshold_b: f64,
    pub p: f64,
    pub p_random: f64,
    pub random_rate: f64,
}

impl GroupMixture {
    fn thresholds(a: f64, b: f64, p: f64) -> Self {
        Self {
            threshold_a: a,
            threshold_b: b,
            p,
            p_random: 0.0,
            random_rate: 0.0,
        }
    }

    /// Prediction for a given uniform draw `u` in `[0, 1)`.
    pub fn decide(&self, score: f64, u: f64) -> u8 {
        if u < self.p_random {
            return u8::from(u < self.p_random * self.random_rate);
        }
        let v = (u - self.p_random) / (1.0 - self.p_random);
        let t = if v < self.p {
            self.threshold_a
        } else {
            self.threshold_b
        };
        u8::from(score > t)
    }

    /// Probability of predicting positive for `score`.
    pub fn positive_probability(&self, score: f64) -> f64 {
        let rule = |t: f64| if score > t { 1.0 } else { 0.0 };
        self.p_random * self.random_rate
            + (1.0 - self.p_random)
                * (self.p * rule(self.threshold_a) + (1.0 - self.p) * rule(self.threshold_b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Common selection rate (DP) or false positive rate (EO).
    pub target_x: f64,
    /// Common true positive rate (EO only).
    pub target_y: Option<f64>,
    /// Expected accuracy on the fitting data.
    pub objective: f64,
    pub grid_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "G: Serialize + Ord",
    deserialize = "G: Deserialize<'de> + Ord"
))]
pub struct ThresholdPolicy<G> {
    pub constraint: Constraint,
    pub groups: BTreeMap<G, GroupMixture>,
    pub diagnostics: FitDiagnostics,
}

/// Uniform draw in `[0, 1)` from a counter-based stream keyed by
/// `(seed, instance_id)`.
pub fn instance_uniform(seed: u64, instance_id: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance_id);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl<G: Ord + Debug> ThresholdPolicy<G> {
    pub fn apply(&self, score: f64, group: &G, seed: u64, instance_id: u64) -> Result<u8, MitigationError> {
        let m = self
            .groups
            .get(group)
            .ok_or_else(|| MitigationError::UnknownGroup(format!("{group:?}")))?;
        Ok(m.decide(score, instance_uniform(seed, instance_id)))
    }
}

/// Score/label data for one sensitive group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl GroupData {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MitigationError> {
        if scores.len() != labels.len() {
            return Err(MitigationError::LengthMismatch);
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Splits parallel score/label/group slices into per-group data.
pub fn partition_by_group<G: Ord + Clone>(
    scores: &[f64],
    labels: &[u8],
    groups: &[G],
) -> Result<BTreeMap<G, GroupData>, MitigationError> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return Err(MitigationError::LengthMismatch);
    }
    let mut out: BTreeMap<G, GroupData> = BTreeMap::new();
    for ((&s, &l), g) in scores.iter().zip(labels).zip(groups) {
        let d = out.entry(g.clone()).or_insert_with(|| GroupData {
            scores: Vec::new(),
            labels: Vec::new(),
        });
        d.scores.push(s);
        d.labels.push(l);
    }
    Ok(out)
}

/// `+inf`, the midpoints between consecutive distinct scores (descending) and
/// `-inf`, so successive rules select strictly more instances.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(f64::INFINITY);
    for w in distinct.windows(2) {
        let m = w[1] + (w[0] - w[1]) / 2.0;
        out.push(if m >= w[0] { w[1] } else { m });
    }
    out.push(f64::NEG_INFINITY);
    out
}

/// Counts produced by one deterministic threshold rule on one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleCounts {
    pub selected: u64,
    pub true_pos: u64,
    pub false_pos: u64,
    pub correct: u64,
}

pub fn rule_counts(data: &GroupData, threshold: f64) -> RuleCounts {
    let mut c = RuleCounts {
        selected: 0,
        true_pos: 0,
        false_pos: 0,
        correct: 0,
    };
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        let pred = s > threshold;
        if pred {
            c.selected += 1;
            if l == 1 {
                c.true_pos += 1;
            } else {
                c.false_pos += 1;
            }
        }
        if pred == (l == 1) {
            c.correct += 1;
        }
    }
    c
}

/// Every deterministic rule for the group with its counts, in order of
/// increasing selection.
pub fn enumerate_rules(data: &GroupData) -> Vec<(f64, RuleCounts)> {
    candidate_thresholds(&data.scores)
        .into_iter()
        .map(|t| (t, rule_counts(data, t)))
        .collect()
}

fn cross(o: (i128, i128), a: (i128, i128), b: (i128, i128)) -> i128 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Indices of the upper convex hull of integer points already sorted by
/// `(x, y)` ascending.
fn upper_hull(points: &[(i128, i128)]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        while hull.len() >= 2 {
            let a = points[hull[hull.len() - 2]];
            let b = points[hull[hull.len() - 1]];
            if cross(a, b, p) >= 0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// A vertex of a piecewise-linear concave curve and the rule realizing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub x: f64,
    pub y: f64,
    pub rule: ThresholdRule,
}

/// Locates `x` on a concave vertex chain: returns `(a, b, p)` where the point
/// is `p * v[a] + (1 - p) * v[b]`. At a shared x (vertical start) the top
/// vertex is used.
fn bracket(vertices: &[Vertex], x: f64) -> (usize, usize, f64) {
    let last = vertices.len() - 1;
    // top-most vertex at the left edge when the chain starts vertically
    let mut start = 0;
    while start < last && vertices[start + 1].x == vertices[0].x {
        start += 1;
    }
    if x <= vertices[start].x {
        return (start, start, 1.0);
    }
    for i in start..last {
        let (a, b) = (&vertices[i], &vertices[i + 1]);
        if x <= b.x {
            if x == b.x {
                return (i + 1, i + 1, 1.0);
            }
            let p = (b.x - x) / (b.x - a.x);
            return (i, i + 1, p);
        }
    }
    (last, last, 1.0)
}

fn interpolate(vertices: &[Vertex], x: f64) -> (f64, GroupMixture) {
    let (a, b, p) = bracket(vertices, x);
    let (va, vb) = (&vertices[a], &vertices[b]);
    let y = if a == b { va.y } else { p * va.y + (1.0 - p) * vb.y };
    (
        y,
        GroupMixture::thresholds(va.rule.threshold, vb.rule.threshold, p),
    )
}

/// Upper concave envelope of (selection rate, accuracy) over all threshold
/// rules of one group.
pub fn dp_envelope(data: &GroupData) -> Result<Vec<Vertex>, MitigationError> {
    if data.is_empty() {
        return Err(MitigationError::EmptyGroup(String::new()));
    }
    let n = data.len() as f64;
    let rules = enumerate_rules(data);
    let pts: Vec<(i128, i128)> = rules
        .iter()
        .map(|(_, c)| (c.selected as i128, c.correct as i128))
        .collect();
    Ok(upper_hull(&pts)
        .into_iter()
        .map(|i| Vertex {
            x: pts[i].0 as f64 / n,
            y: pts[i].1 as f64 / n,
            rule: ThresholdRule {
                threshold: rules[i].0,
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub selection_rate: f64,
    pub accuracy: f64,
    pub mixture: GroupMixture,
}

pub fn lattice(grid_size: usize) -> Vec<f64> {
    (0..=grid_size).map(|i| i as f64 / grid_size as f64).collect()
}

/// Best achievable accuracy of one group at each lattice selection rate,
/// with the two-rule mixture that realizes it in expectation.
pub fn dp_tradeoff_curve(data: &GroupData, grid_size: usize) -> Result<Vec<CurvePoint>, MitigationError> {
    if grid_size == 0 {
        return Err(MitigationError::BadGrid);
    }
    let env = dp_envelope(data)?;
    Ok(lattice(grid_size)
        .into_iter()
        .map(|r| {
            let (accuracy, mixture) = interpolate(&env, r);
            CurvePoint {
                selection_rate: r,
                accuracy,
                mixture,
            }
        })
        .collect())
}

fn first_argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

pub fn fit_demographic_parity<G: Ord + Clone + Debug>(
    groups: &BTreeMap<G, GroupData>,
    grid_size: usize,
) -> Result<ThresholdPolicy<G>, MitigationError> {
    if groups.is_empty() {
        return Err(MitigationError::NoGroups);
    }
    let total: usize = groups.values().map(GroupData::len).sum();
    let mut curves = BTreeMap::new();
    for (g, d) in groups {
        let curve = dp_tradeoff_curve(d, grid_size)
            .map_err(|e| match e {
                MitigationError::EmptyGroup(_) => MitigationError::EmptyGroup(format!("{g:?}")),
                other => other,
            })?;
        curves.insert(g.clone(), (d.len() as f64 / total as f64, curve));
    }
    let objective = |i: usize| -> f64 { curves.values().map(|(w, c)| w * c[i].accuracy).sum() };
    let (best, value) = first_argmax((0..=grid_size).map(objective));
    Ok(ThresholdPolicy {
        constraint: Constraint::DemographicParity,
        groups: curves
            .iter()
            .map(|(g, (_, c))| (g.clone(), c[best].mixture))
            .collect(),
        diagnostics: FitDiagnostics {
            target_x: best as f64 / grid_size as f64,
            target_y: None,
            objective: value,
            grid_size,
        },
    })
}

/// Upper convex hull of a group's ROC points from (0, 0) to (1, 1).
///
/// Vertices are increasing in FPR except for a possible vertical first
/// segment at FPR 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocHull {
    pub vertices: Vec<Vertex>,
}

impl RocHull {
    /// Hull TPR at `fpr` and the mixture realizing it.
    pub fn at(&self, fpr: f64) -> (f64, GroupMixture) {
        interpolate(&self.vertices, fpr)
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.vertices.iter().map(|v| (v.x, v.y)).collect()
    }
}

pub fn roc_convex_hull(data: &GroupData) -> Result<RocHull, MitigationError> {
    let pos = data.positives();
    let neg = data.len() - pos;
    if pos == 0 {
        return Err(MitigationError::UndefinedRate {
            group: String::new(),
            which: "positive",
        });
    }
    if neg == 0 {
        return Err(MitigationError::UndefinedRate {
            group: String::new(),
            which: "negative",
        });
    }
    let rules = enumerate_rules(data);
    // rules come in order of increasing selection, so (fp, tp) is sorted
    let pts: Vec<(i128, i128)> = rules
        .iter()
        .map(|(_, c)| (c.false_pos as i128, c.true_pos as i128))
        .collect();
    let vertices = upper_hull(&pts)
        .into_iter()
        .map(|i| Vertex {
            x: pts[i].0 as f64 / neg as f64,
            y: pts[i].1 as f64 / pos as f64,
            rule: ThresholdRule {
                threshold: rules[i].0,
            },
        })
        .collect();
    Ok(RocHull { vertices })
}

pub fn fit_equalized_odds<G: Ord + Clone + Debug>(
    groups: &BTreeMap<G, GroupData>,
    fpr_grid_size: usize,
) -> Result<ThresholdPolicy<G>, MitigationError> {
    if groups.is_empty() {
        return Err(MitigationError::NoGroups);
    }
    if fpr_grid_size == 0 {
        return Err(MitigationError::BadGrid);
    }
    let total: usize = groups.values().map(GroupData::len).sum();
    let mut fitted = Vec::new();
    for (g, d) in groups {
        if d.is_empty() {
            return Err(MitigationError::EmptyGroup(format!("{g:?}")));
        }
        let hull = roc_convex_hull(d).map_err(|e| match e {
            MitigationError::UndefinedRate { which, .. } => MitigationError::UndefinedRate {
                group: format!("{g:?}"),
                which,
            },
            other => other,
        })?;
        let weight = d.len() as f64 / total as f64;
        let base_rate = d.positives() as f64 / d.len() as f64;
        fitted.push((g.clone(), weight, base_rate, hull));
    }

    let xs = lattice(fpr_grid_size);
    let envelope: Vec<f64> = xs
        .iter()
        .map(|&x| {
            fitted
                .iter()
                .map(|(_, _, _, h)| h.at(x).0)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let objective = |i: usize| -> f64 {
        let (x, y) = (xs[i], envelope[i]);
        fitted
            .iter()
            .map(|(_, w, pi, _)| w * (y * pi + (1.0 - x) * (1.0 - pi)))
            .sum()
    };
    let (best, value) = first_argmax((0..xs.len()).map(objective));
    let (x, y) = (xs[best], envelope[best]);

    let groups = fitted
        .into_iter()
        .map(|(g, _, _, hull)| {
            let (h, mut mixture) = hull.at(x);
            if h - y > 1e-12 {
                // blend the hull point with the coin flip at (x, x)
                let lambda = (y - x) / (h - x);
                mixture.p_random = 1.0 - lambda;
                mixture.random_rate = x;
            }
            (g, mixture)
        })
        .collect();
    Ok(ThresholdPolicy {
        constraint: Constraint::EqualizedOdds,
        groups,
        diagnostics: FitDiagnostics {
            target_x: x,
            target_y: Some(y),
            objective: value,
            grid_size: fpr_grid_size,
        },
    })
}

pub fn fit_policy<G: Ord + Clone + Debug>(
    constraint: Constraint,
    groups: &BTreeMap<G, GroupData>,
    grid_size: usize,
) -> Result<ThresholdPolicy<G>, MitigationError> {
    match constraint {
        Constraint::DemographicParity => fit_demographic_parity(groups, grid_size),
        Constraint::EqualizedOdds => fit_equalized_odds(groups, grid_size),
    }
}

/// Expected selection rate, FPR, TPR and accuracy of a mixture on one
/// group's data. FPR/TPR are NaN when the group lacks negatives/positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedRates {
    pub selection_rate: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub accuracy: f64,
}

pub fn expected_rates(mixture: &GroupMixture, data: &GroupData) -> ExpectedRates {
    let (mut sel, mut tp, mut fp, mut correct) = (0.0, 0.0, 0.0, 0.0);
    let pos = data.positives() as f64;
    let neg = data.len() as f64 - pos;
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        let q = mixture.positive_probability(s);
        sel += q;
        if l == 1 {
            tp += q;
            correct += q;
        } else {
            fp += q;
            correct += 1.0 - q;
        }
    }
    let n = data.len() as f64;
    ExpectedRates {
        selection_rate: sel / n,
        fpr: fp / neg,
        tpr: tp / pos,
        accuracy: correct / n,
    }
}
