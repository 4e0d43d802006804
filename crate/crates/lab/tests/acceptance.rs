//! Acceptance suite. Runs every experiment through the harness, prints one
//! PASS/FAIL line per criterion and exits non-zero on any hard failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sdmd::estimate::{estimate_coefficients, EstimatorConfig};
use sdmd::models::{SdeCoefficients, SdeModel};
use sdmd::simulate::{generate_ensemble, EnsembleOptions, SamplerSpec};
use sdmd::Complex64;
use sdmd_lab::report::{MethodReport, Report};
use sdmd_lab::{invariants, run_file, Command, Overrides};

const OU_TOL_LOW: f64 = 0.1;
const OU_TOL_HIGH: f64 = 0.2;
const DL_TOLS: [f64; 4] = [0.01, 0.25, 0.7, 1.0];
const SL_IM_TOL: f64 = 0.1;
const SL_RE_MAX: f64 = 0.02;
const SL_CONJ_TOL: f64 = 1e-6;
const TW_LEAD_TOL: f64 = 1e-3;
const TW_IM_TOL: f64 = 0.05;
const TW_BAND: (f64, f64) = (0.80, 1.0);
const RATIO_BAND: (f64, f64) = (0.35, 0.65);
const FIRST_ORDER: (f64, f64) = (1.8, 2.2);
const SECOND_ORDER: (f64, f64) = (2.7, 3.3);
const IDENTITY_TOL: f64 = 1e-12;
const CONSTANT_TOL: f64 = 1e-10;
const ROUNDTRIP_TOL: f64 = 1e-14;
const HAND_TOL: f64 = 1e-12;
const DRIFT_TOL: f64 = 0.1;
const SIGMA_REL_TOL: f64 = 0.2;
const NM_SAMPLES: usize = 60_000;
const NM_SOFT_TARGET: f64 = 0.8;

struct Check {
    what: String,
    ok: bool,
    hard: bool,
}

#[derive(Default)]
struct Criterion {
    checks: Vec<Check>,
}

impl Criterion {
    fn hard(&mut self, ok: bool, what: impl Into<String>) {
        self.checks.push(Check { what: what.into(), ok, hard: true });
    }

    fn flag(&mut self, ok: bool, what: impl Into<String>) {
        self.checks.push(Check { what: what.into(), ok, hard: false });
    }

    fn runtime(&mut self, elapsed: Duration, limit: Duration) {
        self.hard(
            elapsed < limit,
            format!("runtime {:.1} s < {} s", elapsed.as_secs_f64(), limit.as_secs()),
        );
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok || !c.hard)
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// Runs one config into `dir`. The report is read back from disk so that runs
/// ending in an invariant failure can still be inspected.
fn run(command: Command, config: &str, dir: &Path, c: &mut Criterion) -> Option<Report> {
    let overrides = Overrides {
        out: Some(dir.to_path_buf()),
        seed: None,
    };
    let result = run_file(command, &configs().join(config), &overrides);
    c.hard(
        result.is_ok(),
        match &result {
            Ok(_) => format!("{config} completed"),
            Err(e) => format!("{config} failed: {e}"),
        },
    );
    let text = std::fs::read_to_string(dir.join("report.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn method<'a>(report: &'a Option<Report>, label: &str, c: &mut Criterion) -> Option<&'a MethodReport> {
    let m = report.as_ref().and_then(|r| r.method(label));
    if m.is_none() {
        c.hard(false, format!("no {label} results"));
    }
    m
}

fn c1(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Spectrum, "ou.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(30));
    if let Some(m) = method(&report, "sdmd", &mut c) {
        let rows = &m.matches.as_ref().expect("OU references").rows;
        for n in 0..=5usize {
            let tol = if n <= 3 { OU_TOL_LOW } else { OU_TOL_HIGH };
            match rows.iter().find(|r| r.label == format!("n={n}")).and_then(|r| r.error) {
                Some(e) => c.hard(e <= tol, format!("|lambda_{n} + {n}| = {e:.2e} <= {tol}")),
                None => c.hard(false, format!("n={n} unmatched")),
            }
        }
    }
    c
}

fn c2(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Spectrum, "ou-dl.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(300));
    if let Some(m) = method(&report, "sdmd-dl", &mut c) {
        c.hard(m.dictionary_size == 20, format!("N = {}", m.dictionary_size));
        let eigs = m.slow_generator_eigs();
        for (k, tol) in DL_TOLS.iter().enumerate() {
            match eigs.get(k) {
                Some(z) => {
                    let e = (z + Complex64::new(k as f64, 0.0)).norm();
                    c.hard(e <= *tol, format!("|lambda_{} + {k}| = {e:.3} <= {tol}", k + 1));
                }
                None => c.hard(false, format!("lambda_{} missing", k + 1)),
            }
        }
    }
    c
}

fn c3(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Spectrum, "stuart-landau.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(120));
    if let Some(m) = method(&report, "sdmd", &mut c) {
        let rows = &m.matches.as_ref().expect("SL references").rows;
        let est = |n: i64| {
            rows.iter()
                .find(|r| r.label == format!("l=0,n={n}"))
                .and_then(|r| r.estimate)
                .map(|p| Complex64::new(p[0], p[1]))
        };
        let (mut im_err, mut re_max, mut conj_err) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
        let mut complete = true;
        for n in -5..=5i64 {
            match (est(n), est(-n)) {
                (Some(a), Some(b)) => {
                    im_err = im_err.max((a.im - 0.75 * n as f64).abs());
                    re_max = re_max.max(a.re);
                    conj_err = conj_err.max((a - b.conj()).norm());
                }
                _ => complete = false,
            }
        }
        c.hard(complete, "all |n| <= 5 matched");
        c.hard(im_err <= SL_IM_TOL, format!("max |Im - 0.75n| = {im_err:.3} <= {SL_IM_TOL}"));
        c.hard(re_max <= SL_RE_MAX, format!("max Re = {re_max:.2e} <= {SL_RE_MAX}"));
        c.hard(conj_err <= SL_CONJ_TOL, format!("conjugate symmetry {conj_err:.1e} <= {SL_CONJ_TOL:e}"));
    }
    c
}

fn c4(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Spectrum, "triple-well.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(600));
    if let Some(m) = method(&report, "sdmd-dl", &mut c) {
        let mu = m.slow_semigroup_eigs();
        if mu.len() < 3 {
            c.hard(false, "fewer than three eigenvalues");
            return c;
        }
        let lead = (mu[0] - Complex64::new(1.0, 0.0)).norm();
        c.hard(lead <= TW_LEAD_TOL, format!("|mu_1 - 1| = {lead:.1e} <= {TW_LEAD_TOL:e}"));
        for (k, z) in mu.iter().enumerate().skip(1).take(2) {
            let ok = z.im.abs() <= TW_IM_TOL && z.re > TW_BAND.0 && z.re < TW_BAND.1;
            c.hard(ok, format!("mu_{} = {:.4}{:+.4}i real and in (0.8, 1)", k + 1, z.re, z.im));
        }
        let phi2: Vec<f64> = m.probes.iter().filter_map(|p| p.values.get(1).copied()).collect();
        let ok = phi2.len() == 2 && phi2[0] * phi2[1] < 0.0;
        c.hard(ok, format!("phi_2 at (-1,0), (1,0) = {phi2:.3?} has opposite signs"));
    }
    c
}

fn metric(report: &Option<Report>, key: &str) -> Option<f64> {
    report.as_ref()?.convergence.as_ref()?.metrics.get(key).copied()
}

fn band(c: &mut Criterion, report: &Option<Report>, key: &str, b: (f64, f64)) {
    match metric(report, key) {
        Some(v) => c.hard(v >= b.0 && v <= b.1, format!("{key} = {v:.3} in [{}, {}]", b.0, b.1)),
        None => c.hard(false, format!("{key} missing")),
    }
}

fn c5(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Convergence, "convergence-m.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(120));
    for key in ["g_ratio_1000_to_4000", "g_ratio_4000_to_16000", "h_ratio_1000_to_4000", "h_ratio_4000_to_16000"] {
        band(&mut c, &report, key, RATIO_BAND);
    }
    c
}

fn c6(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Convergence, "convergence-dt.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(60));
    band(&mut c, &report, "first_order_slope[x^2@probe0]", FIRST_ORDER);
    band(&mut c, &report, "second_order_slope[x^2@probe0]", SECOND_ORDER);
    c
}

fn c7(ou_report: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let pre = invariants::preflight();
    c.runtime(start.elapsed(), Duration::from_secs(1));
    let Ok(pre) = pre else {
        c.hard(false, "preflight errored");
        return c;
    };
    let value = |name: &str| pre.iter().find(|o| o.name == name).map(|o| o.value);
    let mut expect = |name: &str, tol: f64| match value(name) {
        Some(v) => c.hard(v <= tol, format!("{name} {v:.1e} <= {tol:e}")),
        None => c.hard(false, format!("{name} missing")),
    };
    expect("preflight identity relation", IDENTITY_TOL);
    expect("preflight sdmd-gedmd identity", IDENTITY_TOL);
    expect("preflight constant eigenpair", CONSTANT_TOL);
    expect("lambda-mu roundtrip", ROUNDTRIP_TOL);
    expect("preflight hand gram", HAND_TOL);
    expect("preflight hand spectrum", HAND_TOL);

    // The same identities on the OU run of the first criterion.
    let report: Option<Report> = std::fs::read_to_string(ou_report)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let find = |name: &str| report.as_ref()?.invariants.iter().find(|o| o.name == name).map(|o| o.value);
    for (name, tol) in [("identity relation", IDENTITY_TOL), ("sdmd constant eigenpair", CONSTANT_TOL)] {
        match find(name) {
            Some(v) => c.hard(v <= tol, format!("OU run {name} {v:.1e} <= {tol:e}")),
            None => c.hard(false, format!("OU run {name} missing")),
        }
    }
    c
}

/// Estimates OU coefficients from pooled pairs and writes them as CSV.
fn c8(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let model = SdeModel::ou(1.0, 0.0, 0.1).expect("valid OU");
    let sampler = SamplerSpec::UniformRandom {
        domain: vec![[-2.0, 2.0]],
        m: 100_000,
    };
    let est = generate_ensemble(&model, &sampler, 0.05, 50, 8, EnsembleOptions::default()).and_then(|data| {
        estimate_coefficients(
            &data,
            &EstimatorConfig {
                bins_per_axis: 50,
                domain: Some(vec![[-2.0, 2.0]]),
            },
        )
    });
    let est = match est {
        Ok(e) => e,
        Err(e) => {
            c.hard(false, format!("estimation failed: {e}"));
            return c;
        }
    };
    let xs: Vec<f64> = (0..=300).map(|i| -1.5 + 3.0 * i as f64 / 300.0).collect();
    let mut rows = Vec::new();
    let (mut drift_err, mut sigma_sum, mut sigma_n) = (0.0f64, 0.0, 0usize);
    for &x in &xs {
        let b = est.drift(&[x]).map(|v| v[0]).unwrap_or(f64::NAN);
        let s = est.diffusion(&[x]).map(|v| v[0]).unwrap_or(f64::NAN);
        drift_err = drift_err.max((b + x).abs());
        if x.abs() <= 1.0 {
            sigma_sum += s;
            sigma_n += 1;
        }
        rows.push(vec![x, b, s]);
    }
    c.runtime(start.elapsed(), Duration::from_secs(120));
    let sigma = sigma_sum / sigma_n as f64;
    let rel = (sigma - 0.1).abs() / 0.1;
    c.hard(drift_err <= DRIFT_TOL, format!("max |b(x) + x| = {drift_err:.3} <= {DRIFT_TOL}"));
    c.hard(rel <= SIGMA_REL_TOL, format!("mean sigma = {sigma:.4}, {:.1}% off 0.1", 100.0 * rel));
    let table = sdmd::io::csv_table(&["x", "drift", "sigma"], rows);
    std::fs::create_dir_all(dir).expect("output dir");
    std::fs::write(dir.join("coefficients.csv"), table).expect("write coefficients");
    c
}

fn c9(dir: &Path) -> Criterion {
    let mut c = Criterion::default();
    let start = Instant::now();
    let report = run(Command::Neuralmass, "neural-mass.json", dir, &mut c);
    c.runtime(start.elapsed(), Duration::from_secs(900));
    let Some(nm) = report.as_ref().and_then(|r| r.neural_mass.as_ref()) else {
        c.hard(false, "no neural-mass summary");
        return c;
    };
    c.hard(nm.samples == NM_SAMPLES, format!("{} points", nm.samples));
    let scores = std::fs::read_to_string(dir.join("nm_scores.csv")).unwrap_or_default();
    let emitted = ["sdmd-dl", "edmd-dl"]
        .iter()
        .all(|m| nm.phi2_scores.contains_key(*m) && scores.lines().any(|l| l.starts_with(&format!("{m},"))));
    c.hard(emitted, "similarity scores emitted for both methods");
    let sd = nm.phi2_scores.get("sdmd-dl").copied().unwrap_or(f64::NAN);
    let ed = nm.phi2_scores.get("edmd-dl").copied().unwrap_or(f64::NAN);
    c.flag(
        nm.soft_target_met,
        format!("SDMD-DL |Pearson(phi_2, I)| = {:.3} >= {NM_SOFT_TARGET} (epoch {:?})", sd.abs(), nm.sdmd_selected_epoch),
    );
    c.flag(nm.sdmd_at_least_edmd, format!("SDMD-DL {:.3} >= EDMD-DL {:.3}", sd.abs(), ed.abs()));
    c
}

/// All CSV files under `dir`, keyed by name.
fn csvs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.ends_with(".csv") {
                out.insert(name, std::fs::read(e.path()).unwrap_or_default());
            }
        }
    }
    out
}

fn c10(pairs: &[(&str, PathBuf, PathBuf)]) -> Criterion {
    let mut c = Criterion::default();
    for (name, a, b) in pairs {
        let (x, y) = (csvs(a), csvs(b));
        let differing: Vec<&String> = x.keys().filter(|k| y.get(*k) != x.get(*k)).collect();
        let ok = !x.is_empty() && x.len() == y.len() && differing.is_empty();
        c.hard(ok, format!("{name}: {} CSVs identical{}", x.len(), if ok { String::new() } else { format!(", differ: {differing:?}") }));
    }
    c
}

fn report_line(id: usize, title: &str, c: &Criterion) {
    let status = if c.passed() { "PASS" } else { "FAIL" };
    let flagged = c.checks.iter().any(|k| !k.hard && !k.ok);
    let summary: Vec<&str> = c.checks.iter().map(|k| k.what.as_str()).collect();
    println!(
        "{status} criterion {id:>2} {title}{}: {}",
        if flagged { " [flagged]" } else { "" },
        summary.join("; ")
    );
    for k in c.checks.iter().filter(|k| !k.ok) {
        println!("       {} {}", if k.hard { "failed:" } else { "flag:" }, k.what);
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let first = root.path().join("first");
    let second = root.path().join("second");
    let mut results: Vec<(usize, &str, Criterion)> = Vec::new();
    let mut record = |id: usize, title: &'static str, c: Criterion| {
        report_line(id, title, &c);
        results.push((id, title, c));
    };

    type Runner = fn(&Path) -> Criterion;
    let runs: [(usize, &str, &str, Runner); 8] = [
        (1, "OU fixed-dictionary spectrum", "ou", c1),
        (2, "OU learned-dictionary spectrum", "ou-dl", c2),
        (3, "Stuart-Landau ladder", "stuart-landau", c3),
        (4, "triple-well metastability", "triple-well", c4),
        (5, "Gram concentration rates", "convergence-m", c5),
        (6, "Taylor-order slopes", "convergence-dt", c6),
        (8, "coefficient estimation", "coefficients", c8),
        (9, "neural-mass scaled run", "neural-mass", c9),
    ];
    let mut pairs = Vec::new();
    for (id, title, name, f) in runs {
        let (a, b) = (first.join(name), second.join(name));
        record(id, title, f(&a));
        if id == 1 {
            record(7, "algebraic identities", c7(&a.join("report.json")));
        }
        // The repeat only feeds the reproducibility check.
        let _ = f(&b);
        pairs.push((name, a, b));
    }
    record(10, "reproducibility", c10(&pairs));

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
