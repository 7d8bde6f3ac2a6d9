//! Binary CART classifier with gini/entropy impurity, min-samples stopping
//! rules and leaves that score by positive-class fraction, plus k-fold grid
//! search over the stopping rules.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("features and labels disagree in length ({features} vs {labels})")]
    LengthMismatch { features: usize, labels: usize },
    #[error("invalid tree params: {0}")]
    InvalidParams(String),
    #[error("{found} instances are too few for {folds}-fold cross-validation")]
    TooFewInstances { found: usize, folds: usize },
    #[error("empty parameter grid")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gini,
    Entropy,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Gini => "gini",
            Criterion::Entropy => "entropy",
        })
    }
}

impl FromStr for Criterion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gini" => Ok(Criterion::Gini),
            "entropy" => Ok(Criterion::Entropy),
            other => Err(format!("unknown criterion `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    pub criterion: Criterion,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
}

impl TreeParams {
    /// The optimum reported for the original breathing corpora.
    pub const PUBLISHED: TreeParams = TreeParams {
        criterion: Criterion::Gini,
        min_samples_leaf: 3,
        min_samples_split: 4,
    };

    pub fn validate(&self) -> Result<(), TreeError> {
        if self.min_samples_leaf < 1 {
            return Err(TreeError::InvalidParams("min_samples_leaf must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(TreeError::InvalidParams("min_samples_split must be >= 2".into()));
        }
        Ok(())
    }
}

impl Default for TreeParams {
    fn default() -> Self {
        Self::PUBLISHED
    }
}

impl fmt::Display for TreeParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{}",
            self.criterion, self.min_samples_leaf, self.min_samples_split
        )
    }
}

/// Parses `criterion,leaf,split`, e.g. `gini,3,4`.
impl FromStr for TreeParams {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("expected criterion,leaf,split; got `{s}`"));
        }
        let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
        let params = TreeParams {
            criterion: parts[0].parse()?,
            min_samples_leaf: num(parts[1])?,
            min_samples_split: num(parts[2])?,
        };
        params.validate().map_err(|e| e.to_string())?;
        Ok(params)
    }
}

pub fn impurity(n_pos: usize, n_neg: usize, criterion: Criterion) -> f64 {
    let n = (n_pos + n_neg) as f64;
    let p = n_pos as f64 / n;
    let q = n_neg as f64 / n;
    match criterion {
        Criterion::Gini => 1.0 - p * p - q * q,
        Criterion::Entropy => {
            let h = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
            h(p) + h(q)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature_index: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        n_pos: usize,
        n_neg: usize,
    },
}

impl Node {
    fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub params: TreeParams,
    pub n_features: usize,
    pub root: Node,
}

impl Tree {
    pub fn n_leaves(&self) -> usize {
        self.root.leaves()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Fraction of positive training instances in the leaf `x` routes to.
    pub fn predict_score(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { n_pos, n_neg } => return *n_pos as f64 / (n_pos + n_neg) as f64,
                Node::Split {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature_index] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn predict_scores(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict_score(r)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }
}

/// Best split found at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature_index: usize,
    pub threshold: f64,
    pub gain: f64,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // adjacent floats can round the midpoint up to b
    if m >= b {
        a
    } else {
        m
    }
}

/// Impurity decrease `I(parent) - (n_L I(L) + n_R I(R)) / n` for the best
/// admissible (feature, midpoint) pair, ties going to the lower feature index
/// then the lower threshold.
pub fn best_split(
    rows: &[Vec<f64>],
    labels: &[u8],
    idx: &[usize],
    params: &TreeParams,
) -> Option<SplitChoice> {
    let n = idx.len();
    let n_pos = idx.iter().filter(|&&i| labels[i] == 1).count();
    let parent = impurity(n_pos, n - n_pos, params.criterion);
    let n_features = rows[idx[0]].len();
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = idx.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]));
        let mut left_pos = 0usize;
        for k in 0..n - 1 {
            if labels[order[k]] == 1 {
                left_pos += 1;
            }
            let (a, b) = (rows[order[k]][f], rows[order[k + 1]][f]);
            if a == b {
                continue;
            }
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < params.min_samples_leaf || n_right < params.min_samples_leaf {
                continue;
            }
            let right_pos = n_pos - left_pos;
            let child = (n_left as f64 * impurity(left_pos, n_left - left_pos, params.criterion)
                + n_right as f64 * impurity(right_pos, n_right - right_pos, params.criterion))
                / n as f64;
            let gain = parent - child;
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature_index: f,
                    threshold: midpoint(a, b),
                    gain,
                });
            }
        }
    }
    best
}

/// Gains below this are treated as zero (float noise on equal impurities).
const MIN_GAIN: f64 = 1e-12;

fn grow(rows: &[Vec<f64>], labels: &[u8], idx: Vec<usize>, params: &TreeParams) -> Node {
    let n_pos = idx.iter().filter(|&&i| labels[i] == 1).count();
    let n_neg = idx.len() - n_pos;
    let leaf = Node::Leaf { n_pos, n_neg };
    if idx.len() < params.min_samples_split || n_pos == 0 || n_neg == 0 {
        return leaf;
    }
    let Some(split) = best_split(rows, labels, &idx, params) else {
        return leaf;
    };
    if split.gain <= MIN_GAIN {
        return leaf;
    }
    let (left, right): (Vec<usize>, Vec<usize>) = idx
        .into_iter()
        .partition(|&i| rows[i][split.feature_index] <= split.threshold);
    Node::Split {
        feature_index: split.feature_index,
        threshold: split.threshold,
        left: Box::new(grow(rows, labels, left, params)),
        right: Box::new(grow(rows, labels, right, params)),
    }
}

pub fn fit_tree(rows: &[Vec<f64>], labels: &[u8], params: &TreeParams) -> Result<Tree, TreeError> {
    params.validate()?;
    if rows.is_empty() {
        return Err(TreeError::EmptyTrainingSet);
    }
    if rows.len() != labels.len() {
        return Err(TreeError::LengthMismatch {
            features: rows.len(),
            labels: labels.len(),
        });
    }
    let root = grow(rows, labels, (0..rows.len()).collect(), params);
    Ok(Tree {
        params: *params,
        n_features: rows[0].len(),
        root,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamGrid {
    pub criteria: Vec<Criterion>,
    pub leaf_values: Vec<usize>,
    pub split_values: Vec<usize>,
    pub folds: usize,
}

impl Default for ParamGrid {
    fn default() -> Self {
        Self {
            criteria: vec![Criterion::Gini, Criterion::Entropy],
            leaf_values: vec![2, 3, 4, 5],
            split_values: vec![2, 3, 4, 5],
            folds: 5,
        }
    }
}

impl ParamGrid {
    /// Cells in tie-break order: criterion, then leaf, then split.
    pub fn cells(&self) -> Vec<TreeParams> {
        let mut criteria = self.criteria.clone();
        criteria.sort();
        criteria.dedup();
        let mut leaves = self.leaf_values.clone();
        leaves.sort_unstable();
        leaves.dedup();
        let mut splits = self.split_values.clone();
        splits.sort_unstable();
        splits.dedup();
        let mut out = Vec::new();
        for &criterion in &criteria {
            for &min_samples_leaf in &leaves {
                for &min_samples_split in &splits {
                    out.push(TreeParams {
                        criterion,
                        min_samples_leaf,
                        min_samples_split,
                    });
                }
            }
        }
        out
    }
}

/// Assigns each instance to one of `k` folds, stratified by label and kept
/// patient-disjoint when `groups` is given.
pub fn stratified_folds(labels: &[u8], groups: Option<&[String]>, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // units: instance indices that must share a fold, stratified by the
    // majority label of the unit
    let mut by_key: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..labels.len() {
        let key = match groups {
            Some(g) => g[i].clone(),
            None => i.to_string(),
        };
        by_key.entry(key).or_default().push(i);
    }
    let mut units: BTreeMap<(u8, String), Vec<usize>> = BTreeMap::new();
    for (key, members) in by_key {
        let pos = members.iter().filter(|&&i| labels[i] == 1).count();
        let label = u8::from(2 * pos >= members.len());
        units.insert((label, key), members);
    }
    let mut fold_of = vec![0usize; labels.len()];
    for label in [0u8, 1] {
        let mut members: Vec<&Vec<usize>> = units
            .iter()
            .filter(|((y, _), _)| *y == label)
            .map(|(_, v)| v)
            .collect();
        members.shuffle(&mut rng);
        // largest units first, each into the currently smallest fold
        members.sort_by_key(|m| std::cmp::Reverse(m.len()));
        let mut load = vec![0usize; k];
        for m in members {
            let f = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
            load[f] += m.len();
            for &i in m {
                fold_of[i] = f;
            }
        }
    }
    fold_of
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TreeParams,
    pub best_accuracy: f64,
    pub cells: Vec<(TreeParams, f64)>,
}

fn accuracy_at_half(tree: &Tree, rows: &[Vec<f64>], labels: &[u8], idx: &[usize]) -> f64 {
    let correct = idx
        .iter()
        .filter(|&&i| (tree.predict_score(&rows[i]) > 0.5) == (labels[i] == 1))
        .count();
    correct as f64 / idx.len() as f64
}

/// Mean k-fold validation accuracy for every grid cell; the first cell in
/// grid order with the highest mean wins.
pub fn grid_search_cv(
    rows: &[Vec<f64>],
    labels: &[u8],
    groups: Option<&[String]>,
    grid: &ParamGrid,
    seed: u64,
) -> Result<GridResult, TreeError> {
    let cells = grid.cells();
    if cells.is_empty() || grid.folds < 2 {
        return Err(TreeError::EmptyGrid);
    }
    let k = grid.folds;
    let folds = stratified_folds(labels, groups, k, seed);
    let fold_sizes: Vec<usize> = (0..k).map(|f| folds.iter().filter(|&&x| x == f).count()).collect();
    if fold_sizes.iter().any(|&s| s == 0) {
        return Err(TreeError::TooFewInstances {
            found: rows.len(),
            folds: k,
        });
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..k)
        .map(|f| {
            let (val, tr): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| folds[i] == f);
            (tr, val)
        })
        .collect();
    let scored: Vec<(TreeParams, f64)> = cells
        .par_iter()
        .map(|params| -> Result<(TreeParams, f64), TreeError> {
            let mut total = 0.0;
            for (tr, val) in &splits {
                let tr_rows: Vec<Vec<f64>> = tr.iter().map(|&i| rows[i].clone()).collect();
                let tr_labels: Vec<u8> = tr.iter().map(|&i| labels[i]).collect();
                let tree = fit_tree(&tr_rows, &tr_labels, params)?;
                total += accuracy_at_half(&tree, rows, labels, val);
            }
            Ok((*params, total / k as f64))
        })
        .collect::<Result<_, _>>()?;
    let (best, best_accuracy) = scored
        .iter()
        .fold(None::<(TreeParams, f64)>, |acc, &(p, a)| match acc {
            Some((_, b)) if b >= a => acc,
            _ => Some((p, a)),
        })
        .expect("non-empty grid");
    Ok(GridResult {
        best,
        best_accuracy,
        cells: scored,
    })
}
