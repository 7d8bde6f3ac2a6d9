//! WAV decoding, resampling to a canonical rate and corpus/metadata joining.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical analysis rate used when nothing else is configured.
pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

/// Kaiser window shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.6;
/// Sinc zero crossings kept on each side of the filter centre.
pub const ZERO_CROSSINGS: usize = 32;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed RIFF/WAVE container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio file contains no samples")]
    EmptyAudio,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("metadata header must be exactly `patient_id,sex,age,label,filename`; missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: bad value `{value}` for {field}")]
    BadEnumValue {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: duplicate (patient_id, filename) pair ({patient_id}, {filename})")]
    DuplicateRow {
        row: usize,
        patient_id: String,
        filename: String,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Decoded mono (or multi-channel mixed down) audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
    source_path: String,
}

impl Waveform {
    pub fn new(
        samples: Vec<f32>,
        sample_rate: u32,
        source_path: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_path: source_path.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `[start, end)` as a new waveform sharing the rate and source.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, AudioError> {
        Self::new(
            self.samples[start..end].to_vec(),
            self.sample_rate,
            self.source_path.clone(),
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AudioError + '_ {
    move |source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Decodes a RIFF/WAVE file into a mono waveform.
///
/// Integer PCM is scaled by `2^(bits-1)`; multi-channel audio is mixed down
/// to the arithmetic mean of each frame.
pub fn decode_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut waveform = decode_wav_reader(std::io::BufReader::new(file))?;
    waveform.source_path = path.display().to_string();
    Ok(waveform)
}

pub fn decode_wav_reader<R: Read>(reader: R) -> Result<Waveform, AudioError> {
    let reader = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::MalformedContainer("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(map_hound)?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{fmt:?} with {bits} bits per sample"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved.into_iter().map(|s| s as f32).collect()
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| (frame.iter().sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate, "")
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) => AudioError::MalformedContainer(e.to_string()),
        hound::Error::FormatError(msg) => AudioError::MalformedContainer(msg.to_string()),
        hound::Error::Unsupported => {
            AudioError::UnsupportedEncoding("compressed or non-PCM format".into())
        }
        other => AudioError::UnsupportedEncoding(other.to_string()),
    }
}

/// Writes a waveform as mono 32-bit float WAV.
pub fn write_wav_f32(path: impl AsRef<Path>, waveform: &Waveform) -> Result<(), AudioError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => AudioError::MalformedContainer(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &waveform.samples {
        writer.write_sample(s).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Band-limited rate conversion with a Kaiser-windowed sinc polyphase filter.
///
/// Returns the input unchanged when the rates already match. The output has
/// `round(len * target / source)` samples; the signal is zero outside its
/// support.
pub fn to_mono_resampled(w: &Waveform, target_rate: u32) -> Result<Waveform, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    let source_rate = w.sample_rate;
    if source_rate == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    // output sample j sits at input position j * down / up
    let up = (target_rate as u64 / g) as usize;
    let down = (source_rate as u64 / g) as usize;
    let cutoff = (target_rate as f64 / source_rate as f64).min(1.0);
    let half_width = ZERO_CROSSINGS as f64 / cutoff;
    let reach = half_width.ceil() as i64;
    let taps = (2 * reach + 1) as usize;
    let window_norm = bessel_i0(KAISER_BETA);

    // one filter per fractional phase; tap k corresponds to input offset k - reach
    let kernel = |d: f64| -> f64 {
        if d.abs() > half_width {
            return 0.0;
        }
        let ratio = d / half_width;
        let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).max(0.0).sqrt()) / window_norm;
        let arg = std::f64::consts::PI * cutoff * d;
        let sinc = if arg == 0.0 { 1.0 } else { arg.sin() / arg };
        cutoff * sinc * window
    };
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|k| kernel(frac - (k as i64 - reach) as f64))
                .collect()
        })
        .collect();

    let n_in = w.samples.len();
    let n_out = ((n_in as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    let n_out = n_out.max(1);
    let input = &w.samples;
    let out: Vec<f32> = (0..n_out)
        .into_par_iter()
        .map(|j| {
            let pos = j as u64 * down as u64;
            let base = (pos / up as u64) as i64;
            let filter = &phases[(pos % up as u64) as usize];
            let mut acc = 0.0f64;
            for (k, coeff) in filter.iter().enumerate() {
                let idx = base + k as i64 - reach;
                if idx >= 0 && (idx as usize) < n_in {
                    acc += coeff * input[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    Waveform::new(out, target_rate, w.source_path.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    /// Numeric encoding used as a tree feature (male = 1, female = 0).
    pub fn encoding(self) -> f64 {
        match self {
            Sex::Male => 1.0,
            Sex::Female => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" => Ok(Sex::Male),
            "female" => Ok(Sex::Female),
            _ => Err(()),
        }
    }
}

/// Diagnosis label. COVID-19 is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Copd,
    Covid,
}

impl Label {
    pub fn bit(self) -> u8 {
        match self {
            Label::Covid => 1,
            Label::Copd => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Copd => "copd",
            Label::Covid => "covid",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "copd" => Ok(Label::Copd),
            "covid" => Ok(Label::Covid),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub sex: Sex,
    pub age: u32,
    pub label: Label,
    pub filename: String,
}

pub const METADATA_HEADER: [&str; 5] = ["patient_id", "sex", "age", "label", "filename"];

/// Parses `metadata.csv`.
pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>, MetadataError> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    parse_metadata(reader)
}

pub fn parse_metadata<R: Read>(
    mut reader: csv::Reader<R>,
) -> Result<Vec<PatientRecord>, MetadataError> {
    let headers = reader.headers()?.clone();
    for (i, expected) in METADATA_HEADER.iter().enumerate() {
        if headers.get(i) != Some(*expected) {
            return Err(MetadataError::MissingColumn((*expected).to_string()));
        }
    }
    if headers.len() != METADATA_HEADER.len() {
        return Err(MetadataError::MissingColumn(
            headers.get(METADATA_HEADER.len()).unwrap_or("").to_string(),
        ));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |idx: usize| row.get(idx).unwrap_or("").to_string();
        let bad = |field: &'static str, value: String| MetadataError::BadEnumValue {
            row: row_no,
            field,
            value,
        };
        let patient_id = field(0);
        let sex = field(1).parse::<Sex>().map_err(|_| bad("sex", field(1)))?;
        let age = field(2).parse::<u32>().map_err(|_| bad("age", field(2)))?;
        let label = field(3).parse::<Label>().map_err(|_| bad("label", field(3)))?;
        let filename = field(4);
        if !seen.insert((patient_id.clone(), filename.clone())) {
            return Err(MetadataError::DuplicateRow {
                row: row_no,
                patient_id,
                filename,
            });
        }
        records.push(PatientRecord {
            patient_id,
            sex,
            age,
            label,
            filename,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub record: PatientRecord,
    pub path: PathBuf,
    pub sample_rate: u32,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    FileMissing,
    DecodeFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub record: PatientRecord,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SexCounts {
    pub male: usize,
    pub female: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    pub rejects: Vec<Reject>,
}

impl CorpusIndex {
    /// Per-label, per-sex counts of the accepted entries.
    pub fn summary(&self) -> BTreeMap<Label, SexCounts> {
        let mut out: BTreeMap<Label, SexCounts> = BTreeMap::new();
        for e in &self.entries {
            let c = out.entry(e.record.label).or_default();
            match e.record.sex {
                Sex::Male => c.male += 1,
                Sex::Female => c.female += 1,
            }
        }
        out
    }
}

/// Joins records to `<root>/audio/<filename>`, decoding each file to check it
/// and measure its duration. Failures go to the rejects list, sorted by
/// filename.
pub fn scan_corpus(root: impl AsRef<Path>, records: &[PatientRecord]) -> CorpusIndex {
    let audio_dir = root.as_ref().join("audio");
    let results: Vec<Result<CorpusEntry, Reject>> = records
        .par_iter()
        .map(|record| {
            let path = audio_dir.join(&record.filename);
            if !path.is_file() {
                return Err(Reject {
                    record: record.clone(),
                    reason: RejectReason::FileMissing,
                });
            }
            match decode_wav(&path) {
                Ok(w) => Ok(CorpusEntry {
                    record: record.clone(),
                    path,
                    sample_rate: w.sample_rate(),
                    duration_seconds: w.duration_seconds(),
                }),
                Err(e) => Err(Reject {
                    record: record.clone(),
                    reason: RejectReason::DecodeFailed(e.to_string()),
                }),
            }
        })
        .collect();
    let mut index = CorpusIndex::default();
    for r in results {
        match r {
            Ok(e) => index.entries.push(e),
            Err(r) => index.rejects.push(r),
        }
    }
    index
        .rejects
        .sort_by(|a, b| a.record.filename.cmp(&b.record.filename));
    index
}
