//! Repeated-run experiment protocol: for every run, rebalance, resplit, fit a
//! tree, measure fairness at the 0.5 baseline threshold, then fit and apply
//! each mitigation policy and measure again. Runs are aggregated with Welch
//! tests and percentage improvements.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, Label, Sex};
use crate::dataset::{self, BalanceComposition, DatasetError, Instance, SplitSpec};
use crate::dsp::DspConfig;
use crate::metrics::{MetricSnapshot, MetricsError};
use crate::mitigation::{self, Constraint, GroupData, MitigationError, ThresholdPolicy};
use crate::stats::{self, MetricSummary, RunSamples, StatsError};
use crate::synthetic::{self, SyntheticError, SyntheticSpec};
use crate::tree::{self, ParamGrid, TreeError, TreeParams};

/// Baseline decision threshold on leaf scores.
pub const BASELINE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("run {index} failed: {message}")]
    Run { index: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<DatasetError> for ExperimentError {
    fn from(e: DatasetError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<SyntheticError> for ExperimentError {
    fn from(e: SyntheticError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory with `metadata.csv` and `audio/`.
    Corpus(PathBuf),
    /// Feature cache CSV.
    Features(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub min_seconds: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: audio::DEFAULT_SAMPLE_RATE,
            min_seconds: dataset::MIN_SECONDS,
        }
    }
}

/// Which scores the mitigation policy is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFitData {
    /// Scores of the fitted tree on its own training split.
    Train,
    /// Out-of-fold scores on the training split (k-fold cross-fitted trees),
    /// stacked over `oof_repeats` independent fold assignments.
    TrainOutOfFold,
    /// Scores on the evaluation split itself.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    pub dp_grid_size: usize,
    pub eo_grid_size: usize,
    pub fit_on: PolicyFitData,
    pub oof_folds: usize,
    pub oof_repeats: usize,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            dp_grid_size: mitigation::DEFAULT_DP_GRID,
            eo_grid_size: mitigation::DEFAULT_EO_GRID,
            fit_on: PolicyFitData::TrainOutOfFold,
            oof_folds: 5,
            oof_repeats: 10,
        }
    }
}

fn default_constraints() -> Vec<Constraint> {
    vec![Constraint::DemographicParity, Constraint::EqualizedOdds]
}

fn default_runs() -> usize {
    30
}

fn default_source() -> DataSource {
    DataSource::Synthetic(SyntheticSpec::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_source")]
    pub source: DataSource,
    #[serde(default)]
    pub audio: AudioConfig,
    #[serde(default)]
    pub dsp: DspConfig,
    #[serde(default)]
    pub split: SplitSpec,
    /// Grid-search per run when set; otherwise `params` are used.
    #[serde(default)]
    pub grid: Option<ParamGrid>,
    #[serde(default)]
    pub params: Option<TreeParams>,
    #[serde(default = "default_constraints")]
    pub constraints: Vec<Constraint>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub mitigation: MitigationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: default_source(),
            audio: AudioConfig::default(),
            dsp: DspConfig::default(),
            split: SplitSpec::default(),
            grid: None,
            params: None,
            constraints: default_constraints(),
            runs: default_runs(),
            master_seed: 0,
            output_dir: None,
            mitigation: MitigationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.runs < 2 {
            return bad(format!("runs must be >= 2 (got {})", self.runs));
        }
        if self.constraints.is_empty() {
            return bad("constraints must not be empty".into());
        }
        if self.grid.is_some() && self.params.is_some() {
            return bad("set either `grid` or `params`, not both".into());
        }
        if let Some(p) = &self.params {
            p.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if self.mitigation.dp_grid_size == 0 || self.mitigation.eo_grid_size == 0 {
            return bad("mitigation grid sizes must be positive".into());
        }
        if self.mitigation.oof_folds < 2 || self.mitigation.oof_repeats == 0 {
            return bad("mitigation.oof_folds must be >= 2 and oof_repeats >= 1".into());
        }
        if let DataSource::Synthetic(s) = &self.source {
            s.validate()?;
        }
        if let DataSource::Corpus(_) = &self.source {
            self.dsp
                .validate(self.audio.sample_rate)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn tree_params(&self) -> TreeParams {
        self.params.unwrap_or(TreeParams::PUBLISHED)
    }
}

/// Seed of run `index`, drawn from the master seed's counter-based stream.
pub fn run_seed(master_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub composition: BalanceComposition,
    pub params: TreeParams,
    pub tree_leaves: usize,
    pub before: MetricSnapshot,
    pub after: BTreeMap<Constraint, MetricSnapshot>,
    pub policies: BTreeMap<Constraint, ThresholdPolicy<Sex>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAggregate {
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Mean per-run dp_difference is at least the gap between mean group
    /// selection rates, before and after.
    pub dp_aggregation_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub positive_class: Label,
    pub negative_class: Label,
    pub sensitive_feature: String,
    pub baseline_threshold: f64,
    pub n_instances: usize,
    pub n_patients: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: ReportHeader,
    pub runs: Vec<RunRecord>,
    pub aggregate: BTreeMap<Constraint, ConstraintAggregate>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self, constraint: Constraint, metric: &str) -> Option<&MetricSummary> {
        self.aggregate.get(&constraint)?.metrics.get(metric)
    }
}

/// Loads the instance set named by the config's data source.
pub fn load_instances(cfg: &ExperimentConfig) -> Result<Vec<Instance>, ExperimentError> {
    let instances = match &cfg.source {
        DataSource::Synthetic(spec) => synthetic::generate_synthetic(spec, cfg.master_seed)?,
        DataSource::Features(path) => dataset::read_feature_file(path)?,
        DataSource::Corpus(root) => featurize_corpus_dir(root, &cfg.audio, &cfg.dsp)?.0,
    };
    Ok(dataset::filter_zero(instances))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeLog {
    pub scanned: usize,
    pub rejected: Vec<audio::Reject>,
    pub selected: usize,
    pub summary: BTreeMap<Label, audio::SexCounts>,
    pub instances: usize,
}

/// metadata.csv + audio/ -> filtered instances.
pub fn featurize_corpus_dir(
    root: &Path,
    audio_cfg: &AudioConfig,
    dsp_cfg: &DspConfig,
) -> Result<(Vec<Instance>, FeaturizeLog), ExperimentError> {
    let records = audio::load_metadata(root.join("metadata.csv"))
        .map_err(|e| ExperimentError::Data(e.to_string()))?;
    let corpus = audio::scan_corpus(root, &records);
    let selected = dataset::select_recordings(&corpus, audio_cfg.min_seconds)?;
    let instances = dataset::filter_zero(dataset::featurize_corpus(
        &selected,
        audio_cfg.sample_rate,
        dsp_cfg,
    )?);
    let log = FeaturizeLog {
        scanned: records.len(),
        rejected: corpus.rejects.clone(),
        selected: selected.entries.len(),
        summary: selected.summary(),
        instances: instances.len(),
    };
    Ok((instances, log))
}

fn rows_of(instances: &[Instance], idx: &[usize]) -> (Vec<Vec<f64>>, Vec<u8>) {
    idx.iter()
        .map(|&i| (instances[i].model_features(), instances[i].label_bit()))
        .unzip()
}

/// Out-of-fold tree scores for every training instance, once per repeat;
/// repeat `r` occupies positions `r * n .. (r + 1) * n`.
fn out_of_fold_scores(
    rows: &[Vec<f64>],
    labels: &[u8],
    patients: Option<&[String]>,
    params: &TreeParams,
    folds: usize,
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TreeError> {
    let mut scores = Vec::with_capacity(rows.len() * repeats);
    for _ in 0..repeats {
        let fold_of = tree::stratified_folds(labels, patients, folds, rng.next_u64());
        let mut pass = vec![0.0; rows.len()];
        for f in 0..folds {
            let (held, fit): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| fold_of[i] == f);
            if held.is_empty() {
                continue;
            }
            let fit_rows: Vec<Vec<f64>> = fit.iter().map(|&i| rows[i].clone()).collect();
            let fit_labels: Vec<u8> = fit.iter().map(|&i| labels[i]).collect();
            let t = tree::fit_tree(&fit_rows, &fit_labels, params)?;
            for i in held {
                pass[i] = t.predict_score(&rows[i]);
            }
        }
        scores.extend(pass);
    }
    Ok(scores)
}

fn constraint_salt(c: Constraint) -> u64 {
    match c {
        Constraint::DemographicParity => 0x6470_0000_0000_0001,
        Constraint::EqualizedOdds => 0x656f_0000_0000_0002,
    }
}

fn run_once(
    cfg: &ExperimentConfig,
    instances: &[Instance],
    index: usize,
) -> Result<RunRecord, String> {
    let seed = run_seed(cfg.master_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (balanced, composition) =
        dataset::balance_classes(instances.to_vec(), &mut rng).map_err(|e| e.to_string())?;
    let (train_idx, test_idx) =
        dataset::split_indices(&balanced, &cfg.split, &mut rng).map_err(|e| e.to_string())?;
    let (train_rows, train_labels) = rows_of(&balanced, &train_idx);
    let (test_rows, test_labels) = rows_of(&balanced, &test_idx);
    let train_patients: Vec<String> = train_idx.iter().map(|&i| balanced[i].patient_id.clone()).collect();
    let patients = cfg.split.group_by_patient.then_some(train_patients.as_slice());

    let params = match &cfg.grid {
        Some(grid) => {
            tree::grid_search_cv(&train_rows, &train_labels, patients, grid, rng.next_u64())
                .map_err(|e| e.to_string())?
                .best
        }
        None => cfg.tree_params(),
    };
    let model = tree::fit_tree(&train_rows, &train_labels, &params).map_err(|e| e.to_string())?;
    let test_scores = model.predict_scores(&test_rows);
    let test_sex: Vec<Sex> = test_idx.iter().map(|&i| balanced[i].sex).collect();
    let baseline: Vec<u8> = test_scores
        .iter()
        .map(|&s| u8::from(s > BASELINE_THRESHOLD))
        .collect();
    let before = MetricSnapshot::compute(&baseline, &test_labels, &test_sex).map_err(|e: MetricsError| e.to_string())?;

    let train_sex: Vec<Sex> = train_idx.iter().map(|&i| balanced[i].sex).collect();
    let (fit_scores, fit_labels, fit_sex): (Vec<f64>, Vec<u8>, Vec<Sex>) = match cfg.mitigation.fit_on {
        PolicyFitData::Train => (model.predict_scores(&train_rows), train_labels.clone(), train_sex),
        PolicyFitData::TrainOutOfFold => {
            let m = &cfg.mitigation;
            let scores = out_of_fold_scores(
                &train_rows,
                &train_labels,
                patients,
                &params,
                m.oof_folds,
                m.oof_repeats,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            (scores, train_labels.repeat(m.oof_repeats), train_sex.repeat(m.oof_repeats))
        }
        PolicyFitData::Test => (test_scores.clone(), test_labels.clone(), test_sex.clone()),
    };
    let fit_groups: BTreeMap<Sex, GroupData> =
        mitigation::partition_by_group(&fit_scores, &fit_labels, &fit_sex).map_err(|e| e.to_string())?;

    let mut after = BTreeMap::new();
    let mut policies = BTreeMap::new();
    for &constraint in &cfg.constraints {
        let grid = match constraint {
            Constraint::DemographicParity => cfg.mitigation.dp_grid_size,
            Constraint::EqualizedOdds => cfg.mitigation.eo_grid_size,
        };
        let policy = mitigation::fit_policy(constraint, &fit_groups, grid)
            .map_err(|e: MitigationError| format!("{}: {e}", constraint.name()))?;
        let salt = seed ^ constraint_salt(constraint);
        let preds: Vec<u8> = test_idx
            .iter()
            .zip(&test_scores)
            .zip(&test_sex)
            .map(|((&i, &s), g)| policy.apply(s, g, salt, i as u64))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let snapshot = MetricSnapshot::compute(&preds, &test_labels, &test_sex).map_err(|e| e.to_string())?;
        after.insert(constraint, snapshot);
        policies.insert(constraint, policy);
    }

    Ok(RunRecord {
        run: index,
        seed,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        composition,
        params,
        tree_leaves: model.n_leaves(),
        before,
        after,
        policies,
    })
}

fn mean_gap_of_rates(snapshots: &[&MetricSnapshot]) -> f64 {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for s in snapshots {
        for (g, r) in &s.selection_rate {
            *sums.entry(g.as_str()).or_default() += r;
        }
    }
    let n = snapshots.len() as f64;
    let means: Vec<f64> = sums.values().map(|v| v / n).collect();
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo
}

pub fn aggregate_runs(
    runs: &[RunRecord],
    constraints: &[Constraint],
) -> Result<BTreeMap<Constraint, ConstraintAggregate>, StatsError> {
    let mut out = BTreeMap::new();
    for &c in constraints {
        let befores: Vec<&MetricSnapshot> = runs.iter().map(|r| &r.before).collect();
        let afters: Vec<&MetricSnapshot> = runs.iter().filter_map(|r| r.after.get(&c)).collect();
        if afters.len() != runs.len() {
            continue;
        }
        let names: Vec<String> = befores[0].flatten().into_keys().collect();
        let samples: Vec<RunSamples> = names
            .iter()
            .map(|m| RunSamples {
                metric: m.clone(),
                before: befores.iter().map(|s| s.flatten()[m]).collect(),
                after: afters.iter().map(|s| s.flatten().get(m).copied().unwrap_or(f64::NAN)).collect(),
            })
            .collect();
        let metrics = stats::summarize_runs(&samples)?;
        let consistent = |snaps: &[&MetricSnapshot]| {
            let per_run: Vec<f64> = snaps.iter().map(|s| s.dp_difference).collect();
            stats::mean(&per_run) + 1e-12 >= mean_gap_of_rates(snaps)
        };
        let dp_aggregation_consistent = consistent(&befores) && consistent(&afters);
        out.insert(
            c,
            ConstraintAggregate {
                metrics,
                dp_aggregation_consistent,
            },
        );
    }
    Ok(out)
}

pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    instances: &[Instance],
) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    let results: Vec<Result<RunRecord, String>> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| run_once(cfg, instances, i))
        .collect();
    let mut runs = Vec::with_capacity(cfg.runs);
    for (index, r) in results.into_iter().enumerate() {
        runs.push(r.map_err(|message| ExperimentError::Run { index, message })?);
    }
    let aggregate = aggregate_runs(&runs, &cfg.constraints)
        .map_err(|e| ExperimentError::Run {
            index: cfg.runs,
            message: e.to_string(),
        })?;
    let n_patients = instances
        .iter()
        .map(|i| i.patient_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    Ok(RunReport {
        header: ReportHeader {
            positive_class: Label::Covid,
            negative_class: Label::Copd,
            sensitive_feature: "sex".into(),
            baseline_threshold: BASELINE_THRESHOLD,
            n_instances: instances.len(),
            n_patients,
            config: cfg.clone(),
        },
        runs,
        aggregate,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    let instances = load_instances(cfg)?;
    log::info!(
        "positive class = covid (label 1); {} instances loaded",
        instances.len()
    );
    run_experiment_on(cfg, &instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub params: TreeParams,
    /// Mean cross-validated accuracy of the winning cell, when grid-searched.
    pub cv_accuracy: Option<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub leaves: usize,
    pub depth: usize,
    pub tree: tree::Tree,
}

/// One balance/split/fit pass, for inspecting a single model.
pub fn train_model(
    instances: &[Instance],
    split: &SplitSpec,
    grid: Option<&ParamGrid>,
    params: TreeParams,
    seed: u64,
) -> Result<TrainSummary, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (balanced, _) = dataset::balance_classes(instances.to_vec(), &mut rng)?;
    let (train_idx, test_idx) = dataset::split_indices(&balanced, split, &mut rng)?;
    let (train_rows, train_labels) = rows_of(&balanced, &train_idx);
    let (test_rows, test_labels) = rows_of(&balanced, &test_idx);
    let runtime = |e: TreeError| ExperimentError::Run {
        index: 0,
        message: e.to_string(),
    };
    let (params, cv_accuracy) = match grid {
        Some(g) => {
            let patients: Vec<String> = train_idx.iter().map(|&i| balanced[i].patient_id.clone()).collect();
            let groups = split.group_by_patient.then_some(patients.as_slice());
            let r = tree::grid_search_cv(&train_rows, &train_labels, groups, g, rng.next_u64()).map_err(runtime)?;
            (r.best, Some(r.best_accuracy))
        }
        None => (params, None),
    };
    let model = tree::fit_tree(&train_rows, &train_labels, &params).map_err(runtime)?;
    let acc = |rows: &[Vec<f64>], labels: &[u8]| {
        let preds: Vec<u8> = model
            .predict_scores(rows)
            .iter()
            .map(|&s| u8::from(s > BASELINE_THRESHOLD))
            .collect();
        crate::metrics::accuracy(&preds, labels).unwrap_or(f64::NAN)
    };
    Ok(TrainSummary {
        seed,
        params,
        cv_accuracy,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        train_accuracy: acc(&train_rows, &train_labels),
        test_accuracy: acc(&test_rows, &test_labels),
        leaves: model.n_leaves(),
        depth: model.depth(),
        tree: model,
    })
}
