//! Acceptance criteria. Runs without the libtest harness so that every
//! `criterion N: PASS|FAIL` line is printed; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use moneyfrac::analysis::{cascade_hurst, gen_binomial_cascade, gen_fgn, mean, Method};
use moneyfrac::harness::{run_sweep, ExperimentPlan, SweepRow};
use moneyfrac::mfdfa::{self, MfdfaConfig};
use moneyfrac::model::ModelConfig;
use moneyfrac::wtmm::{self, WtmmConfig};

const FGN_LEN: usize = 1 << 16;
const ESTIMATOR_BUDGET: Duration = Duration::from_secs(120);
const SWEEP_THRESH: [f64; 6] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
const SWEEP_SEEDS: u64 = 20;
const SWEEP_N: usize = 50;
/// Gives MFDFA at least 1.5 decades between its smallest scale and len/4.
const SWEEP_EVENTS: usize = 4096;
const SWEEP_MAX_TURNS: u64 = 500_000;
const SEED_PAIR_BUDGET: Duration = Duration::from_secs(600);

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn criterion_1_monofractal_closure() {
    let mut failures = Vec::new();
    let mut slowest = Duration::ZERO;
    for hurst in [0.3, 0.5, 0.7] {
        for seed in 0..10 {
            let x = gen_fgn(FGN_LEN, hurst, seed).unwrap();
            let (r, took) = timed(|| mfdfa::analyze(&x, &MfdfaConfig::default()).unwrap());
            slowest = slowest.max(took);
            let h2 = r.hurst.at(2.0).unwrap();
            if (h2 - hurst).abs() > 0.05 {
                failures.push(format!("MFDFA H={hurst} seed={seed}: h(2)={h2:.4}"));
            }
        }
    }
    for seed in 0..10 {
        let x = gen_fgn(FGN_LEN, 0.5, seed).unwrap();
        let (r, took) = timed(|| wtmm::analyze(&x, &WtmmConfig::default()).unwrap());
        slowest = slowest.max(took);
        for q in [-2.0, 2.0] {
            let tau = r.partition.tau_at(q).unwrap();
            let expected = q * 0.5 - 1.0;
            if (tau - expected).abs() > 0.1 {
                failures.push(format!("WTMM seed={seed}: tau({q})={tau:.4}, expected {expected}"));
            }
        }
    }
    if slowest > ESTIMATOR_BUDGET {
        failures.push(format!("slowest estimator call took {slowest:?}"));
    }
    report(1, failures.is_empty(), &format!("(slowest estimator call {slowest:.2?}) {failures:?}"));
    assert!(failures.is_empty(), "{failures:?}");
}

fn criterion_2_cascade_closure() {
    let p = 0.6;
    let x = gen_binomial_cascade(16, p).unwrap();
    let m = mfdfa::analyze(&x, &MfdfaConfig::default()).unwrap();
    let w = wtmm::analyze(&x, &WtmmConfig::default()).unwrap();
    let mut failures = Vec::new();
    for q in [-4.0, -2.0, 2.0, 4.0] {
        let (est, exact) = (m.hurst.at(q).unwrap(), cascade_hurst(p, q));
        if (est - exact).abs() > 0.05 {
            failures.push(format!("MFDFA h({q})={est:.4} vs {exact:.4}"));
        }
    }
    // tau(q) = q h(q) - 1 with the h(q) above, so tau(0) = -1
    let tau_exact = |q: f64| -(p.powf(q) + (1.0 - p).powf(q)).log2();
    for q in [-2.0, 2.0] {
        let (est, exact) = (w.partition.tau_at(q).unwrap(), tau_exact(q));
        if (est - exact).abs() > 0.1 {
            failures.push(format!("WTMM tau({q})={est:.4} vs {exact:.4}"));
        }
    }
    let (dm, dw) = (m.spectrum.width(), w.spectrum.width());
    if (dm - dw).abs() > 0.15 {
        failures.push(format!("widths MFDFA {dm:.4} WTMM {dw:.4}"));
    }
    report(2, failures.is_empty(), &format!("(widths MFDFA {dm:.4} WTMM {dw:.4}) {failures:?}"));
    assert!(failures.is_empty(), "{failures:?}");
}

struct Sweep {
    rows: Vec<SweepRow>,
    elapsed: Duration,
}

impl Sweep {
    fn rows(&self, thresh: f64, method: Method) -> impl Iterator<Item = &SweepRow> {
        self.rows
            .iter()
            .filter(move |r| r.thresh == thresh && r.method == method)
    }

    fn seed_mean(&self, thresh: f64, method: Method, field: impl Fn(&SweepRow) -> Option<f64>) -> f64 {
        let v: Vec<f64> = self.rows(thresh, method).filter_map(&field).filter(|v| v.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            mean(&v)
        }
    }

    /// Per-seed values, keyed by seed.
    fn by_seed(&self, thresh: f64, method: Method, field: impl Fn(&SweepRow) -> Option<f64>) -> BTreeMap<u64, f64> {
        self.rows(thresh, method)
            .filter_map(|r| field(r).filter(|v| v.is_finite()).map(|v| (r.seed, v)))
            .collect()
    }
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let dir: PathBuf = std::env::temp_dir().join(format!("moneyfrac-acceptance-{}", std::process::id()));
        let plan = ExperimentPlan {
            model: ModelConfig {
                max_turns: SWEEP_MAX_TURNS,
                ..ModelConfig::new(SWEEP_N, 2.5, 0)
            },
            thresh_list: SWEEP_THRESH.to_vec(),
            seeds: (0..SWEEP_SEEDS).collect(),
            min_lifetime_events: SWEEP_EVENTS,
            output_dir: dir.clone(),
            detail: false,
            ..ExperimentPlan::default()
        };
        let (report, elapsed) = timed(|| run_sweep(&plan).unwrap());
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let _ = std::fs::remove_dir_all(&dir);
        Sweep {
            rows: report.rows,
            elapsed,
        }
    })
}

/// One-sided sign test p-value for `wins` successes out of `n` untied pairs.
fn sign_test(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

fn paired_sign_test(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> (usize, usize, f64) {
    let diffs: Vec<f64> = a
        .iter()
        .filter_map(|(s, x)| b.get(s).map(|y| x - y))
        .filter(|d| *d != 0.0)
        .collect();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    (wins, diffs.len(), if diffs.is_empty() { 1.0 } else { sign_test(wins, diffs.len()) })
}

fn criterion_3_phase_contrast() {
    let s = sweep();
    let median_at = |t| s.seed_mean(t, Method::Mfdfa, |r| r.median_lifetime);
    let (low, high) = (median_at(1.0), median_at(2.5));
    let max_at_high: Vec<u64> = s.rows(2.5, Method::Mfdfa).filter_map(|r| r.max_lifetime).collect();
    let long = max_at_high.iter().filter(|&&m| m >= 1000).count();
    let per_pair = s.elapsed / SWEEP_SEEDS as u32;
    let ok = high >= 10.0 * low
        && long as f64 >= 0.8 * SWEEP_SEEDS as f64
        && per_pair <= SEED_PAIR_BUDGET;
    report(
        3,
        ok,
        &format!(
            "(median lifetime {low:.1} at 1.0, {high:.1} at 2.5; max >= 1000 for {long}/{SWEEP_SEEDS} seeds at 2.5; sweep {:.0?}, {per_pair:.0?} per seed)",
            s.elapsed
        ),
    );
    assert!(ok);
}

fn criterion_4_critical_peak() {
    let s = sweep();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for method in [Method::Mfdfa, Method::Wtmm] {
        let curve: Vec<(f64, f64)> = SWEEP_THRESH
            .iter()
            .map(|&t| (t, s.seed_mean(t, method, |r| r.delta_alpha)))
            .collect();
        let peak = curve
            .iter()
            .filter(|(_, d)| d.is_finite())
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|&(t, _)| t);
        lines.push(format!("{method} {curve:.3?}"));
        if peak != Some(2.5) {
            failures.push(format!("{method} peak at {peak:?}"));
        }
        let at = |t| s.by_seed(t, method, |r| r.delta_alpha);
        for other in [1.0, 3.5] {
            let (wins, n, p) = paired_sign_test(&at(2.5), &at(other));
            lines.push(format!("{method} 2.5 > {other}: {wins}/{n}, p={p:.3}"));
            if !(p < 0.05) {
                failures.push(format!("{method} 2.5 vs {other}: p={p:.3}"));
            }
        }
    }
    report(4, failures.is_empty(), &format!("{lines:?} {failures:?}"));
    assert!(failures.is_empty(), "{failures:?}");
}

fn criterion_5_surrogate_narrowing() {
    let s = sweep();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for method in [Method::Mfdfa, Method::Wtmm] {
        let peak = s.seed_mean(2.5, method, |r| r.alpha_at_max_f_shuffled);
        let width = s.seed_mean(2.5, method, |r| r.delta_alpha);
        let shuffled = s.seed_mean(2.5, method, |r| r.delta_alpha_shuffled);
        lines.push(format!("{method}: alpha0 {peak:.3}, width {width:.3} -> {shuffled:.3}"));
        if !((peak - 0.5).abs() <= 0.1) {
            failures.push(format!("{method} shuffled alpha at max f {peak:.3}"));
        }
        if !(shuffled <= 0.5 * width) {
            failures.push(format!("{method} shuffled width {shuffled:.3} vs {width:.3}"));
        }
    }
    report(5, failures.is_empty(), &format!("{lines:?} {failures:?}"));
    assert!(failures.is_empty(), "{failures:?}");
}

fn criterion_6_scaling_quality() {
    let s = sweep();
    let mut failures = Vec::new();
    for r in s.rows(2.5, Method::Mfdfa) {
        let (r2, decades) = (r.q2_r2.unwrap_or(f64::NAN), r.fit_decades.unwrap_or(f64::NAN));
        if !(r2 >= 0.97 && decades >= 1.5) {
            failures.push(format!("seed {}: r2 {r2:.3} over {decades:.2} decades", r.seed));
        }
    }
    let (flat, wide) = (
        s.seed_mean(1.0, Method::Mfdfa, |r| r.h_range),
        s.seed_mean(2.5, Method::Mfdfa, |r| r.h_range),
    );
    if !(flat < 0.15) {
        failures.push(format!("h(q) range {flat:.3} at 1.0"));
    }
    if !(wide >= 0.4) {
        failures.push(format!("h(q) range {wide:.3} at 2.5"));
    }
    report(6, failures.is_empty(), &format!("(h range {flat:.3} at 1.0, {wide:.3} at 2.5) {failures:?}"));
    assert!(failures.is_empty(), "{failures:?}");
}

fn criterion_7_determinism_and_invariants() {
    let mut failures = Vec::new();
    for (thresh, seed) in [(1.0, 3), (2.5, 4)] {
        let config = ModelConfig::new(SWEEP_N, thresh, seed);
        match common::check_transactions(&config, 100_000) {
            Ok((r, _)) => {
                if r.transactions != 100_000 || r.exchanges == 0 {
                    failures.push(format!("thresh {thresh}: {r:?}"));
                }
            }
            Err(e) => failures.push(format!("thresh {thresh}: {e}")),
        }
        let a = common::checksum_after(&config, 2_000);
        let b = common::checksum_after(&config, 2_000);
        if a != b {
            failures.push(format!("thresh {thresh}: replay checksum {a} vs {b}"));
        }
    }
    report(7, failures.is_empty(), &format!("{failures:?}"));
    assert!(failures.is_empty(), "{failures:?}");
}

fn sign_test_oracle() {
    // P(X >= 15 | n = 20) = 21700 / 2^20
    assert!((sign_test(15, 20) - 21700.0 / 1048576.0).abs() < 1e-12);
    assert_eq!(sign_test(0, 7), 1.0);
}

fn main() {
    sign_test_oracle();
    let criteria: [(&str, fn()); 7] = [
        ("criterion_1_monofractal_closure", criterion_1_monofractal_closure),
        ("criterion_2_cascade_closure", criterion_2_cascade_closure),
        ("criterion_3_phase_contrast", criterion_3_phase_contrast),
        ("criterion_4_critical_peak", criterion_4_critical_peak),
        ("criterion_5_surrogate_narrowing", criterion_5_surrogate_narrowing),
        ("criterion_6_scaling_quality", criterion_6_scaling_quality),
        ("criterion_7_determinism_and_invariants", criterion_7_determinism_and_invariants),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        if std::panic::catch_unwind(f).is_err() {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
