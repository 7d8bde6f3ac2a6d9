//! Recording selection, 7 x 2 s segmentation, featurization, zero filtering,
//! class balancing and patient-grouped train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, CorpusEntry, CorpusIndex, Label, Sex};
use crate::dsp::{self, DspConfig, DspError, FeatureVec, N_MFCC};

pub const MIN_SECONDS: f64 = 14.0;
pub const SEGMENTS: usize = 7;
pub const SEGMENT_SECONDS: usize = 2;
/// sex, age, then the MFCC means.
pub const N_FEATURES: usize = 2 + N_MFCC;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no recording is at least {0} s long")]
    EmptySelection(f64),
    #[error("{path}: {seconds:.3} s is shorter than the required {required} s")]
    TooShort {
        path: String,
        seconds: f64,
        required: f64,
    },
    #[error("need at least 2 patients per label for a grouped split; label {label} has {found}")]
    InsufficientPatients { label: Label, found: usize },
    #[error("both classes must be present to balance")]
    MissingClass,
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("feature csv row {row}: {msg}")]
    BadFeatureRow { row: usize, msg: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One 2 s segment of one patient's recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub patient_id: String,
    pub segment_index: usize,
    pub features: FeatureVec,
    pub sex: Sex,
    pub age: u32,
    pub label: Label,
}

impl Instance {
    /// `[sex, age, mfcc_0 .. mfcc_39]`.
    pub fn model_features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.features.0.len());
        v.push(self.sex.encoding());
        v.push(self.age as f64);
        v.extend_from_slice(&self.features.0);
        v
    }

    pub fn label_bit(&self) -> u8 {
        self.label.bit()
    }
}

pub fn select_recordings(
    corpus: &CorpusIndex,
    min_seconds: f64,
) -> Result<CorpusIndex, DatasetError> {
    let entries: Vec<CorpusEntry> = corpus
        .entries
        .iter()
        .filter(|e| e.duration_seconds >= min_seconds)
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(DatasetError::EmptySelection(min_seconds));
    }
    Ok(CorpusIndex {
        entries,
        rejects: corpus.rejects.clone(),
    })
}

/// Splits the first 14 s of `samples` into seven 2 s windows and featurizes each.
pub fn featurize_waveform(
    waveform: &audio::Waveform,
    record: &audio::PatientRecord,
    cfg: &DspConfig,
) -> Result<Vec<Instance>, DatasetError> {
    let rate = waveform.sample_rate() as usize;
    let seg_len = SEGMENT_SECONDS * rate;
    if waveform.samples().len() < SEGMENTS * seg_len {
        return Err(DatasetError::TooShort {
            path: waveform.source_path().to_string(),
            seconds: waveform.duration_seconds(),
            required: (SEGMENTS * SEGMENT_SECONDS) as f64,
        });
    }
    (0..SEGMENTS)
        .map(|i| {
            let seg = waveform.slice(i * seg_len, (i + 1) * seg_len)?;
            let m = dsp::mfcc(&seg, cfg)?;
            Ok(Instance {
                patient_id: record.patient_id.clone(),
                segment_index: i,
                features: dsp::summarize(&m),
                sex: record.sex,
                age: record.age,
                label: record.label,
            })
        })
        .collect()
}

/// Decodes, resamples to `sample_rate` and featurizes one corpus entry.
pub fn segment_and_featurize(
    entry: &CorpusEntry,
    sample_rate: u32,
    cfg: &DspConfig,
) -> Result<Vec<Instance>, DatasetError> {
    let raw = audio::decode_wav(&entry.path)?;
    let w = audio::to_mono_resampled(&raw, sample_rate)?;
    featurize_waveform(&w, &entry.record, cfg)
}

pub fn featurize_corpus(
    corpus: &CorpusIndex,
    sample_rate: u32,
    cfg: &DspConfig,
) -> Result<Vec<Instance>, DatasetError> {
    let per_entry: Vec<Vec<Instance>> = corpus
        .entries
        .par_iter()
        .map(|e| segment_and_featurize(e, sample_rate, cfg))
        .collect::<Result<_, _>>()?;
    Ok(per_entry.into_iter().flatten().collect())
}

/// Drops every instance of any patient that has an all-zero MFCC vector.
pub fn filter_zero(instances: Vec<Instance>) -> Vec<Instance> {
    let zeroed: HashSet<String> = instances
        .iter()
        .filter(|i| i.features.is_all_zero())
        .map(|i| i.patient_id.clone())
        .collect();
    instances
        .into_iter()
        .filter(|i| !zeroed.contains(&i.patient_id))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceComposition {
    /// label -> sex -> instance count after balancing.
    pub counts: BTreeMap<Label, BTreeMap<Sex, usize>>,
    pub per_class: usize,
}

/// Downsamples the majority class uniformly without replacement.
pub fn balance_classes<R: Rng + ?Sized>(
    instances: Vec<Instance>,
    rng: &mut R,
) -> Result<(Vec<Instance>, BalanceComposition), DatasetError> {
    let (mut pos, mut neg): (Vec<Instance>, Vec<Instance>) =
        instances.into_iter().partition(|i| i.label == Label::Covid);
    if pos.is_empty() || neg.is_empty() {
        return Err(DatasetError::MissingClass);
    }
    let n = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        if class.len() > n {
            // partial Fisher-Yates, then restore the original order of survivors
            let mut idx: Vec<usize> = (0..class.len()).collect();
            let (chosen, _) = idx.partial_shuffle(rng, n);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            let keep: HashSet<usize> = chosen.into_iter().collect();
            let mut i = 0;
            class.retain(|_| {
                let k = keep.contains(&i);
                i += 1;
                k
            });
        }
    }
    let mut out = neg;
    out.extend(pos);
    let mut composition = BalanceComposition {
        per_class: n,
        ..Default::default()
    };
    for i in &out {
        *composition
            .counts
            .entry(i.label)
            .or_default()
            .entry(i.sex)
            .or_default() += 1;
    }
    Ok((out, composition))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub group_by_patient: bool,
    pub stratify_by_label: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            group_by_patient: true,
            stratify_by_label: true,
        }
    }
}

/// Chooses a prefix of `sizes` whose sum is closest to `target`, keeping at
/// least one element on each side when `len >= 2`.
fn closest_prefix(sizes: &[usize], target: f64) -> usize {
    let n = sizes.len();
    let (lo, hi) = if n >= 2 { (1, n - 1) } else { (0, n) };
    let mut best = lo;
    let mut best_err = f64::INFINITY;
    let mut sum = 0usize;
    for k in 0..=hi {
        if k >= lo {
            let err = (sum as f64 - target).abs();
            if err < best_err {
                best_err = err;
                best = k;
            }
        }
        if k < n {
            sum += sizes[k];
        }
    }
    best
}

/// Returns `(train, test)` index lists into `instances`.
///
/// Grouped splits keep every patient on one side. Stratification works per
/// (label, sex) cell, so each sensitive group sees both labels on both sides
/// whenever the cell has at least two patients.
pub fn split_indices<R: Rng + ?Sized>(
    instances: &[Instance],
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DatasetError::InvalidSplit(format!(
            "test_fraction {} outside (0, 1)",
            spec.test_fraction
        )));
    }
    // unit = patient (grouped) or single instance
    let mut units: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let key = if spec.group_by_patient {
            inst.patient_id.clone()
        } else {
            format!("{}#{i}", inst.patient_id)
        };
        units.entry(key).or_default().push(i);
    }
    if spec.group_by_patient {
        for label in [Label::Copd, Label::Covid] {
            let found: BTreeSet<&str> = instances
                .iter()
                .filter(|i| i.label == label)
                .map(|i| i.patient_id.as_str())
                .collect();
            if found.len() < 2 {
                return Err(DatasetError::InsufficientPatients {
                    label,
                    found: found.len(),
                });
            }
        }
    }

    let mut strata: BTreeMap<(Option<Label>, Option<Sex>), Vec<&Vec<usize>>> = BTreeMap::new();
    for members in units.values() {
        let first = &instances[members[0]];
        let key = if spec.stratify_by_label {
            (Some(first.label), Some(first.sex))
        } else {
            (None, None)
        };
        strata.entry(key).or_default().push(members);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    // each stratum aims at the running target so rounding errors do not pile up
    let mut seen = 0usize;
    for (_, mut members) in strata {
        members.shuffle(rng);
        let sizes: Vec<usize> = members.iter().map(|m| m.len()).collect();
        seen += sizes.iter().sum::<usize>();
        let target = seen as f64 * spec.test_fraction - test.len() as f64;
        let k = closest_prefix(&sizes, target);
        for (j, m) in members.iter().enumerate() {
            if j < k {
                test.extend_from_slice(m);
            } else {
                train.extend_from_slice(m);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_train_test<R: Rng + ?Sized>(
    instances: &[Instance],
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<(Vec<Instance>, Vec<Instance>), DatasetError> {
    let (train, test) = split_indices(instances, spec, rng)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| instances[i].clone()).collect();
    Ok((pick(&train), pick(&test)))
}

fn feature_header() -> Vec<String> {
    let mut h: Vec<String> = ["patient_id", "segment_index", "sex", "age", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..N_MFCC).map(|k| format!("mfcc_{k:02}")));
    h
}

/// Writes the feature cache (one row per instance, 6-decimal fixed point).
pub fn write_feature_csv<W: Write>(out: W, instances: &[Instance]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(feature_header())?;
    for inst in instances {
        let mut row = vec![
            inst.patient_id.clone(),
            inst.segment_index.to_string(),
            inst.sex.to_string(),
            inst.age.to_string(),
            inst.label.to_string(),
        ];
        row.extend(inst.features.0.iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_csv<R: Read>(input: R) -> Result<Vec<Instance>, DatasetError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let expected = feature_header();
    let headers = r.headers()?.clone();
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(DatasetError::BadFeatureRow {
            row: 0,
            msg: "header must be patient_id,segment_index,sex,age,label,mfcc_00..mfcc_39".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let bad = |msg: String| DatasetError::BadFeatureRow { row, msg };
        let get = |k: usize| rec.get(k).unwrap_or("");
        let segment_index = get(1)
            .parse()
            .map_err(|_| bad(format!("bad segment_index `{}`", get(1))))?;
        let sex = get(2).parse().map_err(|_| bad(format!("bad sex `{}`", get(2))))?;
        let age = get(3).parse().map_err(|_| bad(format!("bad age `{}`", get(3))))?;
        let label = get(4).parse().map_err(|_| bad(format!("bad label `{}`", get(4))))?;
        let features = (0..N_MFCC)
            .map(|k| {
                get(5 + k)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("bad mfcc_{k:02}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Instance {
            patient_id: get(0).to_string(),
            segment_index,
            features: FeatureVec(features),
            sex,
            age,
            label,
        });
    }
    Ok(out)
}

pub fn write_feature_file(path: impl AsRef<Path>, instances: &[Instance]) -> Result<(), DatasetError> {
    let f = std::fs::File::create(path)?;
    write_feature_csv(std::io::BufWriter::new(f), instances)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Vec<Instance>, DatasetError> {
    let f = std::fs::File::open(path)?;
    read_feature_csv(std::io::BufReader::new(f))
}
