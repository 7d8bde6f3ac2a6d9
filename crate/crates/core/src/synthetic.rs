//! Synthetic MFCC-like cohorts with a controllable sex-dependent bias, used
//! when the clinical corpora are not available.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{Label, Sex, SexCounts};
use crate::dataset::{Instance, SEGMENTS};
use crate::dsp::{FeatureVec, N_MFCC};

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("cell ({0}, {1}) needs at least 2 patients")]
    SmallCell(Label, Sex),
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Patients per (label, sex) cell.
    pub patients: BTreeMap<Label, SexCounts>,
    /// Shift of the class-informative coordinates of every female patient
    /// toward the COPD mean.
    pub bias: f64,
    /// Per-segment Gaussian noise scale.
    pub noise: f64,
    /// Class separation on the informative coordinates.
    pub separation: f64,
    /// Number of leading MFCC coordinates that carry the class signal.
    pub informative: usize,
    /// Per-patient random-effect scale shared by a patient's segments.
    pub patient_spread: f64,
    pub age_min: u32,
    pub age_max: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            patients: BTreeMap::from([
                (Label::Copd, SexCounts { male: 15, female: 15 }),
                (Label::Covid, SexCounts { male: 30, female: 30 }),
            ]),
            bias: 1.0,
            noise: 1.0,
            separation: 1.25,
            informative: N_MFCC,
            patient_spread: 0.0,
            age_min: 40,
            age_max: 80,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        for label in [Label::Copd, Label::Covid] {
            let c = self.patients.get(&label).copied().unwrap_or_default();
            for (sex, n) in [(Sex::Male, c.male), (Sex::Female, c.female)] {
                if n < 2 {
                    return Err(SyntheticError::SmallCell(label, sex));
                }
            }
        }
        if self.informative > N_MFCC {
            return Err(SyntheticError::Invalid(format!(
                "informative must be <= {N_MFCC}"
            )));
        }
        if !(self.noise >= 0.0 && self.patient_spread >= 0.0) || self.age_min > self.age_max {
            return Err(SyntheticError::Invalid(
                "noise and patient_spread must be >= 0 and age_min <= age_max".into(),
            ));
        }
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.patients.values().map(|c| c.male + c.female).sum()
    }
}

/// Smooth MFCC-looking baseline: large negative c0, decaying higher orders.
fn baseline(k: usize) -> f64 {
    if k == 0 {
        -350.0
    } else {
        60.0 / k as f64 * if k % 2 == 0 { -1.0 } else { 1.0 }
    }
}

/// Seven instances per patient; deterministic given `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Instance>, SyntheticError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, spec.patient_spread).expect("finite scale");
    let noise = Normal::new(0.0, spec.noise).expect("finite scale");
    let mut out = Vec::with_capacity(spec.n_patients() * SEGMENTS);
    for (&label, counts) in &spec.patients {
        for (sex, n) in [(Sex::Male, counts.male), (Sex::Female, counts.female)] {
            for p in 0..n {
                let patient_id = format!("syn-{label}-{}-{p:03}", &sex.as_str()[..1]);
                let age = rng.random_range(spec.age_min..=spec.age_max);
                let centre: Vec<f64> = (0..N_MFCC)
                    .map(|k| {
                        let mut v = baseline(k) + spread.sample(&mut rng);
                        if k < spec.informative {
                            if label == Label::Covid {
                                v += spec.separation;
                            }
                            if sex == Sex::Female {
                                v -= spec.bias;
                            }
                        }
                        v
                    })
                    .collect();
                for segment_index in 0..SEGMENTS {
                    let features = centre.iter().map(|c| c + noise.sample(&mut rng)).collect();
                    out.push(Instance {
                        patient_id: patient_id.clone(),
                        segment_index,
                        features: FeatureVec(features),
                        sex,
                        age,
                        label,
                    });
                }
            }
        }
    }
    Ok(out)
}
