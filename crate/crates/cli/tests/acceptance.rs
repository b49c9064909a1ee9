//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use glitchlab::classify::{svm_predict, svm_train, SvmParams};
use glitchlab::detect::{detect, exhaustive_scan, DetectionConfig, ModelTarget};
use glitchlab::diagnostics::wasserstein_1d;
use glitchlab::features::{extract_features, read_traces, write_traces, KeyLayerSet};
use glitchlab::model::{load_model, save_model, synth_copy_model, HookPoint, ModelConfig, Site, SynthParams, TransformerModel};
use glitchlab::oracle::{build_repetition_prompt, Label};
use glitchlab::reduce::pca_fit;
use glitchlab::repair::{
    load_profile, neuron_sets, profile_normal, repair_all, repair_forward, save_profile, AdjustmentFactors,
    DEFAULT_THRESHOLD_M, DEFAULT_UP_QUOTA,
};
use glitchlab::report::Report;
use glitchlab::TokenId;
use nalgebra::DMatrix;
use serde_json::Value;
use tempfile::TempDir;

type Check = Result<String, String>;
type Criterion = fn() -> Check;

const FIXTURE: &str = include_str!("fixtures/reference_run.json");
const SCENARIO_SEEDS: [u64; 3] = [7, 11, 23];
const VOCAB: usize = 512;
const N_GLITCH: usize = 102;
const KEY_LAYERS: [usize; 2] = [1, 2];

const PCA_TOL: f64 = 1e-8;
const SVM_TOL: f64 = 1e-9;
const W1_TOL: f64 = 1e-9;
const DETECT_BUDGET: Duration = Duration::from_secs(10);
const KERNEL_BUDGET: Duration = Duration::from_secs(5);
const INVARIANT_BUDGET: Duration = Duration::from_secs(60);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture() -> &'static Value {
    static F: OnceLock<Value> = OnceLock::new();
    F.get_or_init(|| serde_json::from_str(FIXTURE).expect("fixture parses"))
}

fn scenario(seed: u64) -> TransformerModel {
    let cfg = ModelConfig { vocab_size: VOCAB, rng_seed: seed, ..ModelConfig::default() };
    synth_copy_model(&cfg, &SynthParams { n_glitch: N_GLITCH, ..SynthParams::default() }).expect("scenario builds")
}

fn reference_model() -> &'static TransformerModel {
    static M: OnceLock<TransformerModel> = OnceLock::new();
    M.get_or_init(|| scenario(7))
}

fn key_layers() -> KeyLayerSet {
    KeyLayerSet::explicit(KEY_LAYERS.to_vec()).unwrap()
}

/// One CLI invocation set on the reference scenario, shared by several criteria.
struct CliRun {
    _dir: TempDir,
    out: PathBuf,
}

fn run_cli(out: &Path) -> Result<(), String> {
    for cmd in ["synth", "detect", "repair", "diagnose"] {
        let o = Command::new(env!("CARGO_BIN_EXE_glitchlab"))
            .args(["--seed", "7", "--gamma", "0.1", "--key-layers", "1,2", "--out-dir"])
            .arg(out)
            .arg(cmd)
            .env_remove("RUST_LOG")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || format!("{cmd} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))?;
    }
    Ok(())
}

fn reference_run() -> Result<&'static CliRun, String> {
    static R: OnceLock<Result<CliRun, String>> = OnceLock::new();
    R.get_or_init(|| {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let out = dir.path().to_path_buf();
        run_cli(&out)?;
        Ok(CliRun { _dir: dir, out })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn report(out: &Path, command: &str) -> Result<Report, String> {
    Report::read(&out.join(format!("{command}.json"))).map_err(|e| format!("{command}.json: {e}"))
}

fn structural_precision() -> Check {
    let mut lines = Vec::new();
    for seed in SCENARIO_SEEDS {
        let m = scenario(seed);
        let truth = exhaustive_scan(&m, 8).map_err(|e| e.to_string())?.0.glitch();
        let mut cfg = DetectionConfig::for_model(m.config()).map_err(|e| e.to_string())?;
        cfg.rng_seed = seed;
        cfg.key_layers = key_layers();
        let start = Instant::now();
        let out = detect(&ModelTarget::new(&m, &cfg), &cfg, Some(&truth)).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let r = &out.report;
        let metrics = r.metrics.ok_or("no metrics")?;
        ensure(metrics.precision == 1.0, || format!("seed {seed}: precision {}", metrics.precision))?;
        ensure(r.glitch().is_subset(&truth), || format!("seed {seed}: detected set escapes the scan"))?;
        ensure(elapsed < DETECT_BUDGET, || format!("seed {seed}: detect took {elapsed:?}"))?;
        lines.push(format!("seed {seed} precision 1.0 recall {:.4} in {:.2}s", metrics.recall, elapsed.as_secs_f64()));
    }
    Ok(lines.join("; "))
}

fn oracle_budget() -> Check {
    let run = reference_run()?;
    let calls = report(&run.out, "detect")?.payload["detection"]["oracle_calls"].as_u64().ok_or("missing oracle_calls")?;
    let limit = VOCAB as u64 / 2;
    ensure(calls < VOCAB as u64 && calls <= limit, || format!("{calls} oracle calls, limit {limit}"))?;
    Ok(format!("{calls} oracle calls vs {VOCAB} for an exhaustive scan"))
}

fn detection_band() -> Check {
    let run = reference_run()?;
    let synth = report(&run.out, "synth")?.payload;
    let f = fixture();
    ensure(synth["model_sha256"] == f["model_sha256"], || "reference model bytes drifted".into())?;
    let d = &report(&run.out, "detect")?.payload["detection"];
    let want = &f["detection"];
    for key in ["tp", "fp", "fn", "precision", "recall", "f1"] {
        ensure(d["metrics"][key] == want[key], || format!("{key}: got {} want {}", d["metrics"][key], want[key]))?;
    }
    for key in ["oracle_calls", "pca_dim"] {
        ensure(d[key] == want[key], || format!("{key}: got {} want {}", d[key], want[key]))?;
    }
    Ok(format!("recall {} F1 {} match the frozen run", d["metrics"]["recall"], d["metrics"]["f1"]))
}

fn svm_dataset(n: usize, dim: usize, phase: f64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let glitch = i % 3 == 0;
        let shift = if glitch { 1.2 } else { -0.4 };
        rows.push((0..dim).map(|j| shift + ((i * 7 + j * 13) as f64 + phase).sin()).collect());
        labels.push(if glitch { Label::Glitch } else { Label::Normal });
    }
    (rows, labels)
}

fn math_kernels() -> Check {
    let start = Instant::now();
    for (i, rows) in support::PCA_FIXTURES.iter().enumerate() {
        let x = DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
        let model = pca_fit(&x, 3).map_err(|e| e.to_string())?;
        let cov = support::covariance(rows);
        let values = support::eigenvalues_3x3(cov);
        for k in 0..3 {
            let v = support::eigenvector_3x3(cov, values[k]);
            let gap = support::sign_free_gap(&model.components[k], &v);
            ensure(gap < PCA_TOL, || format!("PCA fixture {i} component {k}: gap {gap:e}"))?;
        }
    }
    for degree in 1..=4 {
        let (rows, labels) = svm_dataset(36, 4, degree as f64);
        let model = svm_train(&rows, &labels, &SvmParams { degree, ..SvmParams::default() }).map_err(|e| e.to_string())?;
        let (probe, _) = svm_dataset(20, 4, 0.5 + degree as f64);
        let k = model.kernel;
        for x in probe.iter().chain(&rows) {
            let expect = support::dual_decision(&model.support_vectors, &model.dual_coefs, model.bias, k.scale, k.offset, k.degree, x);
            let (_, value) = svm_predict(&model, x).map_err(|e| e.to_string())?;
            ensure((value - expect).abs() <= SVM_TOL * expect.abs().max(1.0), || format!("SVM degree {degree}: {value} vs {expect}"))?;
        }
    }
    let a = [0.3, -1.2, 4.0, 2.5, 0.0];
    let b = [1.0, 1.5, -2.0];
    let w = |x: &[f64], y: &[f64]| wasserstein_1d(x, y).map_err(|e| e.to_string());
    ensure(w(&a, &a)?.abs() <= W1_TOL, || "W1(a, a) != 0".into())?;
    let shifted: Vec<f64> = a.iter().map(|v| v + 3.25).collect();
    ensure((w(&a, &shifted)? - 3.25).abs() <= W1_TOL, || "translation by 3.25".into())?;
    let both: Vec<f64> = b.iter().map(|v| v - 0.75).collect();
    let sa: Vec<f64> = a.iter().map(|v| v - 0.75).collect();
    ensure((w(&a, &b)? - w(&sa, &both)?).abs() <= W1_TOL, || "common translation changes W1".into())?;
    for (x, y, expect) in support::wasserstein_fixtures() {
        let got = w(&x, &y)?;
        ensure((got - expect).abs() <= W1_TOL, || format!("W1({x:?}, {y:?}) = {got}, expected {expect}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < KERNEL_BUDGET, || format!("kernels took {elapsed:?}"))?;
    Ok(format!("3 PCA fixtures, 4 SVM degrees, W1 properties and 3 fixtures in {:.3}s", elapsed.as_secs_f64()))
}

fn repair_ordering() -> Check {
    let run = reference_run()?;
    let p = report(&run.out, "repair")?.payload;
    let want = &fixture()["repair"];
    let adaptive = p["adaptive"]["repair_rate"].as_f64().ok_or("missing adaptive rate")?;
    let rule = p["rule_based"]["repair_rate"].as_f64().ok_or("missing rule-based rate")?;
    ensure(p["rule_based"]["factors"]["alpha"] == 4.0 && p["rule_based"]["factors"]["beta"] == 1.5, || {
        "rule-based factors are not alpha=4 beta=1.5".into()
    })?;
    ensure(p["partition"]["glitch_count"] == want["partition_glitch"], || "glitch partition drifted".into())?;
    ensure(p["adaptive"]["repair_rate"] == want["adaptive_rate"], || format!("adaptive rate {adaptive} drifted"))?;
    ensure(p["rule_based"]["repair_rate"] == want["rule_based_rate"], || format!("rule-based rate {rule} drifted"))?;
    ensure(adaptive >= rule, || format!("adaptive {adaptive} < rule-based {rule}"))?;
    Ok(format!("adaptive {:.2}% >= rule-based {:.2}%", 100.0 * adaptive, 100.0 * rule))
}

fn identity_patch() -> Check {
    let m = reference_model();
    let glitch = m.planted_glitch_set().ok_or("no planted set")?.clone();
    let normal: Vec<TokenId> = (0..VOCAB as TokenId).filter(|t| !glitch.contains(t)).collect();
    let profile =
        profile_normal(m, &normal, 0.1, DEFAULT_THRESHOLD_M, &key_layers(), 7).map_err(|e| e.to_string())?;
    let factors = AdjustmentFactors::fixed(1.0, 0.0).map_err(|e| e.to_string())?;
    for &t in &glitch {
        let r = repair_forward(m, t, &profile, factors, 8).map_err(|e| e.to_string())?;
        ensure(r.after == r.before, || format!("token {t}: patched echo {:?} vs {:?}", r.after, r.before))?;
    }
    let report = repair_all(m, &glitch, &profile, factors, 8, "identity").map_err(|e| e.to_string())?;
    ensure(report.repaired_tokens == 0, || format!("{} tokens repaired by the identity", report.repaired_tokens))?;
    Ok(format!("{} glitch tokens echo identically under alpha=1 beta=0", glitch.len()))
}

fn invariants() -> Check {
    let start = Instant::now();
    let m = reference_model();
    let cfg = m.config();
    let hooks: Vec<HookPoint> = (0..cfg.n_layers).map(|l| HookPoint::new(l, Site::AttnPattern)).collect();
    for t in (0..VOCAB as TokenId).step_by(17) {
        let prompt = build_repetition_prompt(t, m.template()).map_err(|e| e.to_string())?;
        let out = m.forward(&prompt.tokens, &hooks).map_err(|e| e.to_string())?;
        let width = prompt.tokens.len();
        for c in &out.captures {
            for (h, row) in c.values.chunks(width).enumerate() {
                let s: f32 = row.iter().sum();
                ensure((s - 1.0).abs() < 1e-5, || format!("token {t} layer {} head {h}: softmax sums to {s}", c.layer))?;
            }
        }
        let mut longer = prompt.tokens.clone();
        longer.push((t + 1) % VOCAB as TokenId);
        let full = m.forward(&longer, &[]).map_err(|e| e.to_string())?.logits;
        for pos in 0..width {
            ensure(full.row(pos) == out.logits.row(pos), || format!("token {t}: position {pos} sees the future"))?;
        }
    }

    let (scan, _) = exhaustive_scan(m, 8).map_err(|e| e.to_string())?;
    let g = scan.glitch();
    let n = scan.normal();
    ensure(g.is_disjoint(&n) && g.len() + n.len() == VOCAB, || "scan is not a partition of V".into())?;

    let (rows, labels) = svm_dataset(40, 3, 0.0);
    for c in [0.1, 1.0, 5.0] {
        let params = SvmParams { c, ..SvmParams::default() };
        let svm = svm_train(&rows, &labels, &params).map_err(|e| e.to_string())?;
        ensure(svm.dual_coefs.iter().all(|a| a.abs() <= c * (1.0 + 1e-9)), || format!("C={c}: box constraint violated"))?;
        let sum: f64 = svm.dual_coefs.iter().sum();
        ensure(sum.abs() <= params.tolerance, || format!("C={c}: sum of alpha_i y_i = {sum}"))?;
    }

    let table = vec![
        vec![2.0, 0.5, 1.0, 1.5],
        vec![1.5, 0.0, 3.0, 0.9],
        vec![3.0, -1.0, 0.2, 2.0],
        vec![1.1, 1.0, 0.8, 1.2],
        vec![5.0, 0.3, 1.0, 1.3],
    ];
    for (m_thr, quota) in [(1.0, DEFAULT_UP_QUOTA), (1.0, 0.8), (0.4, 0.6), (2.0, 0.5)] {
        let got = neuron_sets(&table, m_thr, quota).map_err(|e| e.to_string())?;
        let want = support::brute_neuron_sets(&table, m_thr, quota);
        ensure(got == want, || format!("m={m_thr} quota={quota}: {got:?} vs {want:?}"))?;
    }

    let normal_sample: Vec<TokenId> = n.iter().copied().filter(|t| t % 2 == 0).collect();
    let profile = profile_normal(m, &normal_sample, 0.2, DEFAULT_THRESHOLD_M, &key_layers(), 3).map_err(|e| e.to_string())?;
    let small: BTreeSet<TokenId> = g.iter().copied().take(20).collect();
    let r = repair_all(m, &small, &profile, AdjustmentFactors::rule_based(), 8, "rule_based").map_err(|e| e.to_string())?;
    let recount = r.records.iter().filter(|x| x.repaired).count();
    ensure(r.repaired_tokens == recount && r.total_glitch == small.len(), || "repair counts disagree with records".into())?;
    ensure(r.repair_rate == Some(recount as f64 / small.len() as f64), || "repair rate arithmetic".into())?;

    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let model_path = dir.path().join("model.bin");
    save_model(m, &model_path).map_err(|e| e.to_string())?;
    let back = load_model(&model_path).map_err(|e| e.to_string())?;
    let again = dir.path().join("again.bin");
    save_model(&back, &again).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&model_path).unwrap() == std::fs::read(&again).unwrap(), || "model round-trip".into())?;
    ensure(back.planted_glitch_set() == m.planted_glitch_set(), || "planted set round-trip".into())?;

    let traces = (0..32)
        .map(|t| extract_features(m, t, &key_layers(), &Site::ALL))
        .collect::<glitchlab::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let trace_path = dir.path().join("traces.bin");
    write_traces(&trace_path, VOCAB, &traces).map_err(|e| e.to_string())?;
    ensure(read_traces(&trace_path).map_err(|e| e.to_string())?.traces == traces, || "trace round-trip".into())?;

    let profile_path = dir.path().join("profile.bin");
    save_profile(&profile_path, &profile).map_err(|e| e.to_string())?;
    ensure(load_profile(&profile_path).map_err(|e| e.to_string())? == profile, || "profile round-trip".into())?;

    let rep = Report::new("scan", &serde_json::json!({ "seed": 7 }), &scan, Default::default()).map_err(|e| e.to_string())?;
    let rep_path = dir.path().join("scan.json");
    rep.write(&rep_path).map_err(|e| e.to_string())?;
    ensure(Report::read(&rep_path).map_err(|e| e.to_string())? == rep, || "report round-trip".into())?;

    let elapsed = start.elapsed();
    ensure(elapsed < INVARIANT_BUDGET, || format!("invariants took {elapsed:?}"))?;
    Ok(format!("softmax, causality, partition, KKT, neuron sets, repair arithmetic, round-trips in {:.2}s", elapsed.as_secs_f64()))
}

fn reproducibility() -> Check {
    let first = reference_run()?;
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    run_cli(dir.path())?;
    let mut checked = Vec::new();
    for cmd in ["synth", "detect", "repair", "diagnose"] {
        let a = report(&first.out, cmd)?;
        let b = report(dir.path(), cmd)?;
        ensure(a.payload_digest == b.payload_digest && a.payload == b.payload, || format!("{cmd} payload differs"))?;
        ensure(a.manifest == b.manifest, || format!("{cmd} manifest differs"))?;
        checked.push(cmd);
    }
    Ok(format!("identical payload digests for {}", checked.join(", ")))
}

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("structural precision", structural_precision),
        ("oracle budget", oracle_budget),
        ("detection quality band", detection_band),
        ("math-kernel oracles", math_kernels),
        ("repair ordering", repair_ordering),
        ("identity-patch invariance", identity_patch),
        ("invariant suites", invariants),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
