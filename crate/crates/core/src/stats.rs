//! Welch's two-sample t-test, percentage improvement and run aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 samples per group (got {0} and {1})")]
    TooFewSamples(usize, usize),
    #[error("baseline value is zero; improvement undefined")]
    ZeroBaseline,
    #[error("run samples disagree in length: {0}")]
    UnequalRuns(String),
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the fraction converges fastest on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mu_before: f64,
    pub mu_after: f64,
    /// Both samples had zero variance; `t`/`df` are conventional values.
    pub degenerate: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n - 1) sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(a.len(), b.len()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        // zero spread on both sides: t is 0 for equal means, otherwise the
        // separation is exact
        let (t, p) = if ma == mb {
            (0.0, 1.0)
        } else {
            (f64::MAX.copysign(ma - mb), 0.0)
        };
        return Ok(WelchResult {
            t,
            df: na + nb - 2.0,
            p,
            mu_before: ma,
            mu_after: mb,
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p: student_t_two_sided_p(t, df),
        mu_before: ma,
        mu_after: mb,
        degenerate: false,
    })
}

/// `100 * |before - after| / before`.
pub fn percent_improvement(before: f64, after: f64) -> Result<f64, StatsError> {
    if before == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (before - after).abs() / before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSamples {
    pub metric: String,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let mean = mean(xs);
        let std = if xs.len() > 1 { variance(xs).sqrt() } else { 0.0 };
        Self {
            mean,
            std,
            stderr: std / (xs.len() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub n: usize,
    pub before: Spread,
    pub after: Spread,
    pub welch: Option<WelchResult>,
    pub pct_improvement: Option<f64>,
}

pub fn summarize_runs(samples: &[RunSamples]) -> Result<BTreeMap<String, MetricSummary>, StatsError> {
    let mut out = BTreeMap::new();
    let n = samples.first().map(|s| s.before.len());
    for s in samples {
        if Some(s.before.len()) != n || s.after.len() != s.before.len() {
            return Err(StatsError::UnequalRuns(s.metric.clone()));
        }
        let before = Spread::of(&s.before);
        let after = Spread::of(&s.after);
        out.insert(
            s.metric.clone(),
            MetricSummary {
                metric: s.metric.clone(),
                n: s.before.len(),
                before,
                after,
                welch: welch_t_test(&s.before, &s.after).ok(),
                pct_improvement: percent_improvement(before.mean, after.mean).ok(),
            },
        );
    }
    Ok(out)
}
