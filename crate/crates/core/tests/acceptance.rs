//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) so the lines print in order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fairbreath::audio::decode_wav;
use fairbreath::experiment::{self, AudioConfig, ExperimentConfig};
use fairbreath::metrics::{self, MetricsError};
use fairbreath::mitigation::{self, expected_rates, GroupData};
use fairbreath::stats;
use fairbreath::{Constraint, DataSource, DspConfig, Label, RunReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// tolerances and budgets
const METRIC_CASES: usize = 1000;
const METRIC_MAX_N: usize = 200;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const MFCC_REL_FROBENIUS: f64 = 1e-4;
const SILENCE_ABS: f64 = 1e-9;
const MFCC_BUDGET: Duration = Duration::from_secs(10);
const MITIGATION_CASES: usize = 300;
const MITIGATION_MAX_PER_GROUP: usize = 50;
const OBJECTIVE_ABS: f64 = 1e-12;
const MITIGATION_BUDGET: Duration = Duration::from_secs(30);
const E2E_MIN_IMPROVEMENT: f64 = 50.0;
const E2E_MAX_P: f64 = 0.05;
const E2E_MAX_ACCURACY_LOSS: f64 = 0.10;
const E2E_BUDGET: Duration = Duration::from_secs(120);
const WELCH_ABS: f64 = 1e-9;
const PVALUE_ABS: f64 = 1e-9;
const PCT_ABS: f64 = 0.05;
const STATS_BUDGET: Duration = Duration::from_secs(1);
const REAL_CORPUS_ENV: &str = "FAIRBREATH_CORPUS";

struct Outcome {
    ok: bool,
    detail: String,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn timed(budget: Duration, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    let start = Instant::now();
    let result = f();
    let took = start.elapsed();
    match result {
        Ok(detail) if took <= budget => Outcome {
            ok: true,
            detail: format!("{detail} [{:.2}s, budget {}s]", took.as_secs_f64(), budget.as_secs()),
        },
        Ok(detail) => Outcome {
            ok: false,
            detail: format!("{detail} but took {:.2}s > {}s", took.as_secs_f64(), budget.as_secs()),
        },
        Err(detail) => Outcome { ok: false, detail },
    }
}

// 1: metric oracle

struct Counts {
    n: u64,
    sel: u64,
    tp: u64,
    fp: u64,
    pos: u64,
    neg: u64,
}

fn counts(pred: &[u8], lab: &[u8], grp: &[u8], g: u8) -> Counts {
    let mut c = Counts { n: 0, sel: 0, tp: 0, fp: 0, pos: 0, neg: 0 };
    for i in 0..pred.len() {
        if grp[i] != g {
            continue;
        }
        c.n += 1;
        c.sel += pred[i] as u64;
        if lab[i] == 1 {
            c.pos += 1;
            c.tp += pred[i] as u64;
        } else {
            c.neg += 1;
            c.fp += pred[i] as u64;
        }
    }
    c
}

/// (min/max, max-min) where the ordering is decided on the exact fractions.
fn oracle_pair(a: (u64, u64), b: (u64, u64)) -> (f64, f64) {
    let (ra, rb) = (a.0 as f64 / a.1 as f64, b.0 as f64 / b.1 as f64);
    let a_hi = a.0 as u128 * b.1 as u128 >= b.0 as u128 * a.1 as u128;
    let (hi, lo) = if a_hi { (ra, rb) } else { (rb, ra) };
    if hi == 0.0 {
        (1.0, 0.0)
    } else {
        (lo / hi, hi - lo)
    }
}

/// |a - b| as an exact fraction (numerator, denominator).
fn gap_fraction(a: (u64, u64), b: (u64, u64)) -> (u128, u128) {
    let x = a.0 as i128 * b.1 as i128 - b.0 as i128 * a.1 as i128;
    (x.unsigned_abs(), a.1 as u128 * b.1 as u128)
}

fn metric_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.random_range(2..=METRIC_MAX_N);
    let p_pos = rng.random_range(0.0..1.0);
    let p_sel = rng.random_range(0.0..1.0);
    let p_grp = rng.random_range(0.05..0.95);
    let lab: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p_pos))).collect();
    let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p_sel))).collect();
    let mut grp: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p_grp))).collect();
    grp[0] = 0;
    grp[1] = 1;

    let c = [counts(&pred, &lab, &grp, 0), counts(&pred, &lab, &grp, 1)];
    let correct = pred.iter().zip(&lab).filter(|(p, l)| p == l).count();
    let acc = metrics::accuracy(&pred, &lab).map_err(|e| e.to_string())?;
    if acc != correct as f64 / n as f64 {
        return Err(format!("accuracy {acc} vs {correct}/{n}"));
    }

    let dp = metrics::demographic_parity(&pred, &grp).map_err(|e| e.to_string())?;
    for (g, cg) in c.iter().enumerate() {
        if dp.rates[&(g as u8)] != cg.sel as f64 / cg.n as f64 {
            return Err(format!("selection rate of group {g}"));
        }
    }
    let (ratio, diff) = oracle_pair((c[0].sel, c[0].n), (c[1].sel, c[1].n));
    if dp.ratio != ratio || dp.difference != diff {
        return Err(format!("dp ({}, {}) vs oracle ({ratio}, {diff})", dp.ratio, dp.difference));
    }

    let eo = metrics::equalized_odds(&pred, &lab, &grp);
    let defined = c.iter().all(|cg| cg.pos > 0 && cg.neg > 0);
    let eo = match (eo, defined) {
        (Err(MetricsError::UndefinedRate { .. }), false) => return Ok(()),
        (Err(e), _) => return Err(format!("unexpected error {e}")),
        (Ok(_), false) => return Err("rates defined for a group missing a class".into()),
        (Ok(eo), true) => eo,
    };
    for (g, cg) in c.iter().enumerate() {
        let r = &eo.rates[&(g as u8)];
        let want = (
            cg.tp as f64 / cg.pos as f64,
            cg.fp as f64 / cg.neg as f64,
            (cg.pos - cg.tp) as f64 / cg.pos as f64,
        );
        if (r.tpr, r.fpr, r.fnr) != want {
            return Err(format!("group {g} rates {:?} vs {want:?}", (r.tpr, r.fpr, r.fnr)));
        }
    }
    let tpr_frac = [(c[0].tp, c[0].pos), (c[1].tp, c[1].pos)];
    let fpr_frac = [(c[0].fp, c[0].neg), (c[1].fp, c[1].neg)];
    let (tpr_ratio, tpr_gap) = oracle_pair(tpr_frac[0], tpr_frac[1]);
    let (fpr_ratio, fpr_gap) = oracle_pair(fpr_frac[0], fpr_frac[1]);
    let (tn, td) = gap_fraction(tpr_frac[0], tpr_frac[1]);
    let (fnum, fden) = gap_fraction(fpr_frac[0], fpr_frac[1]);
    let want_diff = match (tn * fden).cmp(&(fnum * td)) {
        std::cmp::Ordering::Greater => tpr_gap,
        std::cmp::Ordering::Less => fpr_gap,
        std::cmp::Ordering::Equal => tpr_gap.max(fpr_gap),
    };
    let want_ratio = tpr_ratio.min(fpr_ratio);
    if eo.difference != want_diff || eo.ratio != want_ratio {
        return Err(format!(
            "eo ({}, {}) vs oracle ({want_ratio}, {want_diff})",
            eo.ratio, eo.difference
        ));
    }
    Ok(())
}

fn criterion_metrics() -> Outcome {
    timed(METRIC_BUDGET, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..METRIC_CASES {
            metric_case(&mut rng).map_err(|e| format!("case {case}: {e}"))?;
        }
        Ok(format!("{METRIC_CASES} random cases match the count-loop oracle exactly"))
    })
}

// 2: MFCC fixtures

#[derive(serde::Deserialize)]
struct MfccFixture {
    name: String,
    n_mfcc: usize,
    frames: usize,
    mfcc: Vec<Vec<f64>>,
}

fn criterion_mfcc() -> Outcome {
    timed(MFCC_BUDGET, || {
        let dir = fixtures().join("mfcc");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        if names.len() != 10 {
            return Err(format!("expected 10 fixtures, found {}", names.len()));
        }
        let cfg = DspConfig::default();
        let mut worst = (0.0f64, String::new());
        for json in &names {
            let fx: MfccFixture =
                serde_json::from_str(&std::fs::read_to_string(json).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
            let wave = decode_wav(json.with_extension("wav")).map_err(|e| e.to_string())?;
            let got = fairbreath::dsp::mfcc(&wave, &cfg).map_err(|e| e.to_string())?.coefficients;
            if (got.rows, got.cols) != (fx.n_mfcc, fx.frames) {
                return Err(format!("{}: shape {}x{} vs {}x{}", fx.name, got.rows, got.cols, fx.n_mfcc, fx.frames));
            }
            let (mut num, mut den) = (0.0, 0.0);
            for (r, row) in fx.mfcc.iter().enumerate() {
                for (c, &want) in row.iter().enumerate() {
                    let d = got.get(r, c) - want;
                    num += d * d;
                    den += want * want;
                }
            }
            let rel = (num / den).sqrt();
            if rel > worst.0 {
                worst = (rel, fx.name.clone());
            }
            if rel > MFCC_REL_FROBENIUS {
                return Err(format!("{}: relative Frobenius error {rel:.3e} > {MFCC_REL_FROBENIUS:e}", fx.name));
            }
            if fx.name == "silence" {
                let c0 = -100.0 * 128f64.sqrt();
                for c in 0..got.cols {
                    if (got.get(0, c) - c0).abs() > SILENCE_ABS {
                        return Err(format!("silence c0 = {} vs {c0}", got.get(0, c)));
                    }
                    for r in 1..got.rows {
                        if got.get(r, c).abs() > SILENCE_ABS {
                            return Err(format!("silence c{r} = {}", got.get(r, c)));
                        }
                    }
                }
            }
        }
        Ok(format!(
            "10 fixtures within {MFCC_REL_FROBENIUS:e} (worst {:.2e} on {}); silence analytic",
            worst.0, worst.1
        ))
    })
}

// 3: mitigator optimality

/// (selected, true positives, false positives, correct) of every
/// distinct "score > t" rule.
fn all_rules(d: &GroupData) -> Vec<(u64, u64, u64, u64)> {
    let mut ts: Vec<f64> = d.scores.clone();
    ts.push(f64::INFINITY);
    ts.push(f64::NEG_INFINITY);
    ts.iter()
        .map(|&t| {
            let mut r = (0, 0, 0, 0);
            for (&s, &l) in d.scores.iter().zip(&d.labels) {
                let p = s > t;
                r.0 += p as u64;
                r.1 += (p && l == 1) as u64;
                r.2 += (p && l == 0) as u64;
                r.3 += (p == (l == 1)) as u64;
            }
            r
        })
        .collect()
}

/// Best interpolated value at `x` over pairs of points bracketing it.
fn best_bracketing(points: &[(f64, f64)], x: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &(xa, ya) in points {
        if xa > x {
            continue;
        }
        for &(xb, yb) in points {
            if xb < x {
                continue;
            }
            let v = if xb == xa {
                ya.max(yb)
            } else {
                let p = (xb - x) / (xb - xa);
                p * ya + (1.0 - p) * yb
            };
            best = best.max(v);
        }
    }
    best
}

fn random_group(rng: &mut ChaCha8Rng) -> GroupData {
    loop {
        let n = rng.random_range(2..=MITIGATION_MAX_PER_GROUP);
        let coarse = rng.random_bool(0.5);
        let lift = rng.random_range(-0.3..0.6);
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let l = u8::from(rng.random_bool(0.5));
            let mut s: f64 = (rng.random_range(0.0..1.0) + lift * l as f64).clamp(0.0, 1.0);
            if coarse {
                s = (s * 8.0).round() / 8.0;
            }
            scores.push(s);
            labels.push(l);
        }
        if labels.contains(&0) && labels.contains(&1) {
            return GroupData::new(scores, labels).unwrap();
        }
    }
}

fn mitigation_case(rng: &mut ChaCha8Rng, grid: usize, fpr_grid: usize) -> Result<(), String> {
    let groups: BTreeMap<u8, GroupData> = (0..2).map(|g| (g, random_group(rng))).collect();
    let total: usize = groups.values().map(GroupData::len).sum();
    let weight = |d: &GroupData| d.len() as f64 / total as f64;

    // DP oracle
    let dp = mitigation::fit_demographic_parity(&groups, grid).map_err(|e| e.to_string())?;
    let dp_points: Vec<Vec<(f64, f64)>> = groups
        .values()
        .map(|d| {
            let n = d.len() as f64;
            all_rules(d).iter().map(|r| (r.0 as f64 / n, r.3 as f64 / n)).collect()
        })
        .collect();
    let dp_best = (0..=grid)
        .map(|i| {
            let r = i as f64 / grid as f64;
            groups
                .values()
                .zip(&dp_points)
                .map(|(d, pts)| weight(d) * best_bracketing(pts, r))
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if (dp.diagnostics.objective - dp_best).abs() > OBJECTIVE_ABS {
        return Err(format!("dp objective {} vs oracle {dp_best}", dp.diagnostics.objective));
    }
    let rates: Vec<_> = groups.iter().map(|(g, d)| expected_rates(&dp.groups[g], d)).collect();
    let sel_gap = (rates[0].selection_rate - rates[1].selection_rate).abs();
    if sel_gap >= 1.0 / grid as f64 {
        return Err(format!("dp residual {sel_gap} >= 1/{grid}"));
    }
    let realized: f64 = groups.values().zip(&rates).map(|(d, r)| weight(d) * r.accuracy).sum();
    if (realized - dp_best).abs() > OBJECTIVE_ABS {
        return Err(format!("dp realized accuracy {realized} vs oracle {dp_best}"));
    }

    // EO oracle
    let eo = mitigation::fit_equalized_odds(&groups, fpr_grid).map_err(|e| e.to_string())?;
    let roc: Vec<Vec<(f64, f64)>> = groups
        .values()
        .map(|d| {
            let pos = d.positives() as f64;
            let neg = d.len() as f64 - pos;
            all_rules(d).iter().map(|r| (r.2 as f64 / neg, r.1 as f64 / pos)).collect()
        })
        .collect();
    let eo_best = (0..=fpr_grid)
        .map(|i| {
            let x = i as f64 / fpr_grid as f64;
            let y = roc.iter().map(|pts| best_bracketing(pts, x)).fold(f64::INFINITY, f64::min);
            groups
                .values()
                .map(|d| {
                    let pi = d.positives() as f64 / d.len() as f64;
                    weight(d) * (y * pi + (1.0 - x) * (1.0 - pi))
                })
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if (eo.diagnostics.objective - eo_best).abs() > OBJECTIVE_ABS {
        return Err(format!("eo objective {} vs oracle {eo_best}", eo.diagnostics.objective));
    }
    let rates: Vec<_> = groups.iter().map(|(g, d)| expected_rates(&eo.groups[g], d)).collect();
    let fpr_gap = (rates[0].fpr - rates[1].fpr).abs();
    let tpr_gap = (rates[0].tpr - rates[1].tpr).abs();
    if fpr_gap >= 1.0 / fpr_grid as f64 || tpr_gap >= 1.0 / fpr_grid as f64 {
        return Err(format!("eo residuals fpr {fpr_gap}, tpr {tpr_gap} >= 1/{fpr_grid}"));
    }
    let realized: f64 = groups.values().zip(&rates).map(|(d, r)| weight(d) * r.accuracy).sum();
    if (realized - eo_best).abs() > OBJECTIVE_ABS {
        return Err(format!("eo realized accuracy {realized} vs oracle {eo_best}"));
    }
    Ok(())
}

fn criterion_mitigation() -> Outcome {
    timed(MITIGATION_BUDGET, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..MITIGATION_CASES {
            // most cases on a coarse lattice, a few at the default sizes
            let (grid, fpr_grid) = if case % 30 == 0 {
                (mitigation::DEFAULT_DP_GRID, mitigation::DEFAULT_EO_GRID)
            } else {
                (rng.random_range(5..=100), rng.random_range(5..=100))
            };
            mitigation_case(&mut rng, grid, fpr_grid).map_err(|e| format!("case {case}: {e}"))?;
        }
        Ok(format!(
            "{MITIGATION_CASES} cases: objectives within {OBJECTIVE_ABS:e} of exhaustive search, residuals below 1/grid"
        ))
    })
}

// 4 + 6: end-to-end on the synthetic cohort, twice

fn e2e_config() -> ExperimentConfig {
    ExperimentConfig {
        runs: 30,
        params: Some(fairbreath::TreeParams::PUBLISHED),
        master_seed: 0,
        ..ExperimentConfig::default()
    }
}

fn check_improvement(report: &RunReport) -> Result<String, String> {
    let mut parts = Vec::new();
    for (constraint, key) in [
        (Constraint::DemographicParity, "dp_difference"),
        (Constraint::EqualizedOdds, "eo_difference"),
    ] {
        let m = report.summary(constraint, key).ok_or(format!("missing {key}"))?;
        let pct = m.pct_improvement.ok_or(format!("{key}: no improvement value"))?;
        let p = m.welch.as_ref().map(|w| w.p).ok_or(format!("{key}: no Welch result"))?;
        let acc = report.summary(constraint, "accuracy").ok_or("missing accuracy")?;
        let loss = acc.before.mean - acc.after.mean;
        let line = format!(
            "{key} {:.3} -> {:.3} ({pct:.1}%, p={p:.1e}), accuracy {:.3} -> {:.3}",
            m.before.mean, m.after.mean, acc.before.mean, acc.after.mean
        );
        if m.after.mean >= m.before.mean || pct < E2E_MIN_IMPROVEMENT || p >= E2E_MAX_P || loss > E2E_MAX_ACCURACY_LOSS {
            return Err(line);
        }
        parts.push(line);
    }
    Ok(parts.join("; "))
}

fn criterion_e2e_and_determinism() -> (Outcome, Outcome) {
    let cfg = e2e_config();
    let start = Instant::now();
    let first = experiment::run_experiment(&cfg);
    let took = start.elapsed();
    let checked = first.as_ref().map_err(|e| e.to_string()).and_then(check_improvement);
    let e2e = Outcome {
        ok: checked.is_ok() && took <= E2E_BUDGET,
        detail: format!(
            "{} [{:.1}s, budget {}s]",
            checked.unwrap_or_else(|e| e),
            took.as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    };
    let det = timed(E2E_BUDGET * 2, || {
        let a = first.as_ref().map_err(|e| e.to_string())?.to_json();
        let b = experiment::run_experiment(&cfg).map_err(|e| e.to_string())?.to_json();
        if a.as_bytes() == b.as_bytes() {
            Ok(format!("report.json identical across two runs ({} bytes)", a.len()))
        } else {
            Err("report.json differs between two invocations".into())
        }
    });
    (e2e, det)
}

// 5: statistics

#[derive(serde::Deserialize)]
struct PRow {
    t: f64,
    df: f64,
    p: f64,
}

fn criterion_stats() -> Outcome {
    timed(STATS_BUDGET, || {
        let w = stats::welch_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
        if (w.t - -1.224744871391589).abs() > WELCH_ABS || (w.df - 4.0).abs() > WELCH_ABS {
            return Err(format!("welch t={} df={}", w.t, w.df));
        }
        let mut rows = csv::Reader::from_path(fixtures().join("t_pvalues.csv")).map_err(|e| e.to_string())?;
        let mut n = 0;
        let mut worst: f64 = 0.0;
        for row in rows.deserialize() {
            let r: PRow = row.map_err(|e| e.to_string())?;
            let got = stats::student_t_two_sided_p(r.t, r.df);
            worst = worst.max((got - r.p).abs());
            if (got - r.p).abs() > PVALUE_ABS {
                return Err(format!("p(t={}, df={}) = {got:e} vs {:e}", r.t, r.df, r.p));
            }
            n += 1;
        }
        if n != 100 {
            return Err(format!("expected 100 p-value rows, found {n}"));
        }
        let pct = stats::percent_improvement(4.85, 0.90).map_err(|e| e.to_string())?;
        if (pct - 81.44).abs() > PCT_ABS {
            return Err(format!("percent_improvement(4.85, 0.90) = {pct}"));
        }
        Ok(format!("welch t={:.6} df={}; 100 p-values (worst {worst:.1e}); pct {pct:.2}", w.t, w.df))
    })
}

// 7: real corpora, when supplied

fn criterion_real_data() -> Option<Outcome> {
    let root = PathBuf::from(std::env::var_os(REAL_CORPUS_ENV)?);
    Some(timed(Duration::from_secs(3600), || {
        let (instances, log) =
            experiment::featurize_corpus_dir(&root, &AudioConfig::default(), &DspConfig::default())
                .map_err(|e| e.to_string())?;
        let patients = |l: Label| log.summary.get(&l).map_or(0, |c| c.male + c.female);
        let (copd, covid) = (patients(Label::Copd), patients(Label::Covid));
        if (copd, covid) != (29, 319) {
            return Err(format!("selected {copd} COPD / {covid} COVID patients, want 29 / 319"));
        }
        let cfg = ExperimentConfig {
            source: DataSource::Corpus(root.clone()),
            ..e2e_config()
        };
        let report = experiment::run_experiment_on(&cfg, &instances).map_err(|e| e.to_string())?;
        let per_class = report.runs[0].composition.per_class;
        if per_class != 203 {
            return Err(format!("balanced set {per_class}+{per_class}, want 203+203"));
        }
        let mut parts = Vec::new();
        for (constraint, key) in [
            (Constraint::DemographicParity, "dp_difference"),
            (Constraint::EqualizedOdds, "eo_difference"),
        ] {
            let m = report.summary(constraint, key).ok_or(format!("missing {key}"))?;
            let p = m.welch.as_ref().map_or(1.0, |w| w.p);
            let line = format!("{key} {:.3} -> {:.3} (p={p:.1e})", m.before.mean, m.after.mean);
            if m.after.mean >= m.before.mean || p >= E2E_MAX_P {
                return Err(line);
            }
            parts.push(line);
        }
        Ok(format!("29/319 patients, 203+203 balanced; {}", parts.join("; ")))
    }))
}

fn main() {
    let mut lines: Vec<(&str, Outcome)> = vec![
        ("1 metric oracle equivalence", criterion_metrics()),
        ("2 MFCC fidelity", criterion_mfcc()),
        ("3 mitigator optimality", criterion_mitigation()),
    ];
    let (e2e, det) = criterion_e2e_and_determinism();
    lines.push(("4 synthetic end-to-end", e2e));
    lines.push(("5 statistics correctness", criterion_stats()));
    lines.push(("6 determinism", det));
    let mut failed = 0;
    for (name, o) in &lines {
        println!("{} criterion {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    match criterion_real_data() {
        None => println!("SKIP criterion 7 real-data check: set {REAL_CORPUS_ENV} to a corpus dir with metadata.csv"),
        Some(o) => {
            println!("{} criterion 7 real-data check: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
            failed += usize::from(!o.ok);
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
