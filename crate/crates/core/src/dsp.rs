//! MFCC front end: centred STFT power spectrogram, Slaney mel filterbank,
//! dB compression and an orthonormal DCT-II, plus the per-coefficient frame
//! mean that turns a segment into one feature vector.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;

pub const N_MFCC: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid dsp config: {0}")]
    InvalidConfig(String),
    #[error("mel filter {0} covers no FFT bin; reduce n_mels or increase frame_length")]
    DegenerateFilter(usize),
    #[error("empty signal")]
    EmptySignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    /// Defaults to half the sample rate.
    pub fmax: Option<f64>,
    pub amin: f64,
    pub top_db: f64,
    /// Area-normalise the mel triangles (Slaney). Off gives unit-peak filters.
    pub area_norm: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_length: 2048,
            hop_length: 512,
            n_mels: 128,
            n_mfcc: N_MFCC,
            fmin: 0.0,
            fmax: None,
            amin: 1e-10,
            top_db: 80.0,
            area_norm: true,
        }
    }
}

impl DspConfig {
    pub fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn n_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::InvalidConfig(m.to_string()));
        if self.hop_length == 0 || self.hop_length > self.frame_length {
            return bad("require 0 < hop_length <= frame_length");
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("require 0 < n_mfcc <= n_mels");
        }
        let fmax = self.fmax_for(sample_rate);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return bad("require 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.amin > 0.0) || self.top_db < 0.0 {
            return bad("require amin > 0 and top_db >= 0");
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Index into a signal of length `n` with numpy-style `reflect` padding.
fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn n_frames(n_samples: usize, hop_length: usize) -> usize {
    1 + n_samples / hop_length
}

/// `(frame_length/2 + 1) x n_frames` power spectrogram of the reflect-padded,
/// Hann-windowed signal.
pub fn power_spectrogram(samples: &[f32], cfg: &DspConfig) -> Result<Matrix, DspError> {
    if samples.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let n_fft = cfg.frame_length;
    let pad = (n_fft / 2) as i64;
    let frames = n_frames(samples.len(), cfg.hop_length);
    let bins = cfg.n_bins();
    let window = hann_periodic(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Matrix::zeros(bins, frames);
    for t in 0..frames {
        let start = (t * cfg.hop_length) as i64 - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let x = samples[reflect_index(start + k as i64, samples.len())] as f64;
            *slot = Complex::new(x * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (b, c) in buf.iter().take(bins).enumerate() {
            out.set(b, t, c.norm_sqr());
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular mel filters, `n_mels x (frame_length/2 + 1)`.
pub fn mel_filterbank(cfg: &DspConfig, sample_rate: u32) -> Result<Matrix, DspError> {
    cfg.validate(sample_rate)?;
    let bins = cfg.n_bins();
    let fft_freqs: Vec<f64> = (0..bins)
        .map(|b| b as f64 * sample_rate as f64 / cfg.frame_length as f64)
        .collect();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax_for(sample_rate));
    let n_edges = cfg.n_mels + 2;
    let edges: Vec<f64> = (0..n_edges)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_edges - 1) as f64))
        .collect();

    let mut fb = Matrix::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = if cfg.area_norm { 2.0 / (hi - lo) } else { 1.0 };
        let mut any = false;
        for (b, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lo) / (centre - lo);
            let falling = (hi - f) / (hi - centre);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                any = true;
                fb.set(m, b, w * norm);
            }
        }
        if !any {
            return Err(DspError::DegenerateFilter(m));
        }
    }
    Ok(fb)
}

/// Orthonormal DCT-II basis restricted to the first `n_out` coefficients.
fn dct_basis(n_in: usize, n_out: usize) -> Matrix {
    let mut basis = Matrix::zeros(n_out, n_in);
    let n = n_in as f64;
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            let v = scale * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos();
            basis.set(k, i, v);
        }
    }
    basis
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    /// `n_mfcc x n_frames`.
    pub coefficients: Matrix,
    pub config: DspConfig,
    pub sample_rate: u32,
}

impl MfccMatrix {
    pub fn n_frames(&self) -> usize {
        self.coefficients.cols
    }
}

/// Log-mel spectrogram in dB, floored at `amin` and clamped to `top_db` below
/// the global peak.
pub fn log_mel_spectrogram(w: &Waveform, cfg: &DspConfig) -> Result<Matrix, DspError> {
    let fb = mel_filterbank(cfg, w.sample_rate())?;
    let spec = power_spectrogram(w.samples(), cfg)?;
    let mut mel = Matrix::zeros(cfg.n_mels, spec.cols);
    for m in 0..cfg.n_mels {
        let filter = fb.row(m);
        for t in 0..spec.cols {
            let e: f64 = filter
                .iter()
                .enumerate()
                .filter(|(_, &wt)| wt != 0.0)
                .map(|(b, &wt)| wt * spec.get(b, t))
                .sum();
            mel.set(m, t, 10.0 * e.max(cfg.amin).log10());
        }
    }
    let peak = mel.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = peak - cfg.top_db;
    for v in &mut mel.data {
        *v = v.max(floor);
    }
    Ok(mel)
}

/// `n_mfcc x n_frames` cepstral coefficients.
pub fn mfcc(w: &Waveform, cfg: &DspConfig) -> Result<MfccMatrix, DspError> {
    let log_mel = log_mel_spectrogram(w, cfg)?;
    let basis = dct_basis(cfg.n_mels, cfg.n_mfcc);
    let mut coefficients = Matrix::zeros(cfg.n_mfcc, log_mel.cols);
    for t in 0..log_mel.cols {
        let column = log_mel.column(t);
        for k in 0..cfg.n_mfcc {
            let v: f64 = basis.row(k).iter().zip(&column).map(|(a, b)| a * b).sum();
            coefficients.set(k, t, v);
        }
    }
    Ok(MfccMatrix {
        coefficients,
        config: cfg.clone(),
        sample_rate: w.sample_rate(),
    })
}

/// Per-coefficient mean over frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

pub fn summarize(m: &MfccMatrix) -> FeatureVec {
    let c = &m.coefficients;
    FeatureVec(
        (0..c.rows)
            .map(|k| c.row(k).iter().sum::<f64>() / c.cols as f64)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn wave(samples: Vec<f32>, rate: u32) -> Waveform {
        Waveform::new(samples, rate, "t").unwrap()
    }

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Vec<f32> {
        (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn reflect_padding_matches_numpy() {
        // np.pad([0,1,2,3], 3, 'reflect') -> [3,2,1,0,1,2,3,2,1,0]
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn spectrogram_of_silence_is_zero() {
        let s = power_spectrogram(&[0.0; 5000], &DspConfig::default()).unwrap();
        assert_eq!(s.cols, n_frames(5000, 512));
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectrogram_dc_concentrates_in_bin_zero() {
        let cfg = DspConfig::default();
        let s = power_spectrogram(&[0.3; 10000], &cfg).unwrap();
        for t in 4..s.cols - 4 {
            let col = s.column(t);
            let total: f64 = col.iter().sum();
            // a periodic Hann window leaks half the bin-0 amplitude into bin 1,
            // so bin 0 holds exactly 1 / (1 + 1/4) of the column energy
            assert_relative_eq!(col[0], 0.8 * total, max_relative = 1e-9);
            assert!(col[0] + col[1] >= 0.99 * total);
        }
    }

    #[test]
    fn spectrogram_sine_peak_bin() {
        let cfg = DspConfig::default();
        let s = power_spectrogram(&sine(1000.0, 22050, 22050, 0.5), &cfg).unwrap();
        let expected = (1000.0f64 * 2048.0 / 22050.0).round() as usize;
        assert_eq!(expected, 93);
        // edge frames see the reflected (phase-flipped) padding
        for t in 2..s.cols - 2 {
            let col = s.column(t);
            let argmax = (0..col.len())
                .max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn parseval_per_column() {
        // sum_k |X_k|^2 over the full spectrum = N * sum (x w)^2; fold the
        // one-sided spectrum back to full before comparing.
        let cfg = DspConfig::default();
        let x: Vec<f32> = (0..8192).map(|i| ((i * 7919 % 1000) as f32 / 1000.0) - 0.5).collect();
        let s = power_spectrogram(&x, &cfg).unwrap();
        let window = hann_periodic(2048);
        let t = 6;
        let start = t * 512 - 1024;
        let energy: f64 = (0..2048)
            .map(|k| (x[start + k] as f64 * window[k]).powi(2))
            .sum();
        let col = s.column(t);
        let full: f64 = col[0] + col[1024] + 2.0 * col[1..1024].iter().sum::<f64>();
        assert_relative_eq!(full, 2048.0 * energy, max_relative = 1e-6);
    }

    #[test]
    fn filterbank_shape_and_rows() {
        let fb = mel_filterbank(&DspConfig::default(), 22050).unwrap();
        assert_eq!((fb.rows, fb.cols), (128, 1025));
        for m in 0..fb.rows {
            assert!(fb.row(m).iter().all(|&v| v >= 0.0));
            assert!(fb.row(m).iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn unnormalised_triangle_peaks_match_geometry() {
        // Independent oracle: each triangle's maximum over the bin grid is
        // attained at the bin nearest its centre and equals the linear ramp
        // evaluated there.
        let cfg = DspConfig {
            area_norm: false,
            n_mels: 20,
            n_mfcc: 20,
            ..DspConfig::default()
        };
        let rate = 22050;
        let fb = mel_filterbank(&cfg, rate).unwrap();
        let mel_hi = hz_to_mel(rate as f64 / 2.0);
        for m in 0..cfg.n_mels {
            let edge = |i: usize| mel_to_hz(mel_hi * i as f64 / (cfg.n_mels + 1) as f64);
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let df = rate as f64 / 2048.0;
            let expected = (0..1025)
                .map(|b| {
                    let f = b as f64 * df;
                    ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
                })
                .fold(0.0, f64::max);
            let got = fb.row(m).iter().cloned().fold(0.0, f64::max);
            assert_relative_eq!(got, expected, max_relative = 1e-12);
            assert!(got <= 1.0 + 1e-12);
        }
        // with a dense enough FFT every triangle peaks at (almost exactly) 1
        let dense = DspConfig {
            frame_length: 1 << 16,
            hop_length: 512,
            ..cfg
        };
        let fb = mel_filterbank(&dense, rate).unwrap();
        for m in 0..dense.n_mels {
            let peak = fb.row(m).iter().cloned().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 0.05, "filter {m} peak {peak}");
        }
    }

    #[test]
    fn too_many_mels_is_degenerate() {
        let cfg = DspConfig {
            frame_length: 256,
            hop_length: 128,
            n_mels: 128,
            ..DspConfig::default()
        };
        assert!(matches!(
            mel_filterbank(&cfg, 22050),
            Err(DspError::DegenerateFilter(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = DspConfig {
            hop_length: 4096,
            ..DspConfig::default()
        };
        assert!(matches!(cfg.validate(22050), Err(DspError::InvalidConfig(_))));
        let cfg = DspConfig {
            n_mfcc: 200,
            ..DspConfig::default()
        };
        assert!(cfg.validate(22050).is_err());
    }

    #[test]
    fn silence_mfcc_is_analytic() {
        let m = mfcc(&wave(vec![0.0; 44100], 22050), &DspConfig::default()).unwrap();
        assert_eq!(m.coefficients.rows, 40);
        assert_eq!(m.n_frames(), 1 + 44100 / 512);
        let c0 = -100.0 * 128f64.sqrt();
        assert_relative_eq!(c0, -1131.370849898476, epsilon = 1e-9);
        for t in 0..m.n_frames() {
            assert_relative_eq!(m.coefficients.get(0, t), c0, epsilon = 1e-9);
            for k in 1..40 {
                assert!(m.coefficients.get(k, t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gain_only_moves_c0() {
        let noise: Vec<f32> = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            (0..22050).map(|_| rng.random_range(-0.25f32..0.25)).collect()
        };
        let cfg = DspConfig {
            top_db: 1e6,
            ..DspConfig::default()
        };
        let a = mfcc(&wave(noise.clone(), 22050), &cfg).unwrap();
        let b = mfcc(&wave(noise.iter().map(|v| v * 2.0).collect(), 22050), &cfg).unwrap();
        let shift = 10.0 * 4f64.log10() * 128f64.sqrt();
        for t in 0..a.n_frames() {
            assert_relative_eq!(
                b.coefficients.get(0, t) - a.coefficients.get(0, t),
                shift,
                epsilon = 1e-4
            );
            for k in 1..40 {
                assert!((b.coefficients.get(k, t) - a.coefficients.get(k, t)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mfcc_is_deterministic() {
        let w = wave(sine(440.0, 22050, 30000, 0.3), 22050);
        let cfg = DspConfig::default();
        assert_eq!(mfcc(&w, &cfg).unwrap(), mfcc(&w, &cfg).unwrap());
    }

    fn matrix_of(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> MfccMatrix {
        let mut c = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for t in 0..cols {
                c.set(r, t, f(r, t));
            }
        }
        MfccMatrix {
            coefficients: c,
            config: DspConfig::default(),
            sample_rate: 22050,
        }
    }

    #[test]
    fn summarize_means() {
        let single = matrix_of(40, 1, |r, _| r as f64 - 3.5);
        assert_eq!(summarize(&single).0, single.coefficients.column(0));
        let sym = matrix_of(40, 2, |r, t| if t == 0 { r as f64 } else { -(r as f64) });
        assert!(summarize(&sym).is_all_zero());
        let ramp = matrix_of(40, 3, |_, t| (t + 1) as f64);
        assert!(summarize(&ramp).0.iter().all(|&v| v == 2.0));
    }
}
