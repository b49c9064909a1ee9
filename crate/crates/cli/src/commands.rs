//! Subcommand implementations. Each writes `<command>.json` into the output
//! directory plus any command-specific artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use glitchlab::detect::{
    detect as run_detect, exhaustive_scan, rule_based_baseline, save_classifier, sweep as run_sweep, DetectionReport,
    ModelTarget, TraceTarget,
};
use glitchlab::diagnostics::{
    attention_histograms, cluster_spread, layer_profile_from_traces, mlp_scatter, pooled_values, suggest_key_layers,
    wasserstein_1d, write_histogram_csv, write_layer_profile_csv, write_scatter_csv, all_layer_traces,
};
use glitchlab::features::{extract_features, read_traces, write_traces, ActivationTrace, TRACE_FORMAT};
use glitchlab::model::{load_model, save_model, synth_copy_model, Site, TransformerModel, MODEL_FORMAT};
use glitchlab::oracle::{write_verdicts, Label};
use glitchlab::repair::{adapt_factors, profile_normal, repair_all, save_profile, AdjustmentFactors};
use glitchlab::report::{sha256_hex, Report};
use glitchlab::TokenId;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tracing::warn;

use crate::config::{PartitionSource, RunConfig};
use crate::summary;
use crate::{Inputs, TraceInputs};

pub struct Context {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

pub struct Outcome {
    pub fallback: bool,
}

const OK: Outcome = Outcome { fallback: false };

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    model: String,
    traces: Option<String>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

impl Context {
    fn manifest<'a>(&'a self, command: &'a str, model: Option<&Path>, traces: Option<&Path>) -> Manifest<'a> {
        Manifest {
            tool: "glitchlab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: self.cfg.seed,
            config: &self.cfg,
            model: match (model, traces) {
                (Some(p), _) => file_name(p),
                (None, Some(_)) => "none".into(),
                (None, None) => "synthetic".into(),
            },
            traces: traces.map(file_name),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_report(
        &self,
        command: &str,
        inputs: (Option<&Path>, Option<&Path>),
        payload: &impl Serialize,
        timings: BTreeMap<String, f64>,
    ) -> anyhow::Result<PathBuf> {
        let report = Report::new(command, &self.manifest(command, inputs.0, inputs.1), payload, timings)?;
        let path = self.path(&format!("{command}.json"));
        report.write(&path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn model(&self, inputs: &Inputs) -> anyhow::Result<TransformerModel> {
        match &inputs.model {
            Some(p) => Ok(load_model(p).with_context(|| format!("loading {}", p.display()))?),
            None => Ok(synth_copy_model(&self.cfg.model_config(), &self.cfg.synth_params())?),
        }
    }
}

/// Ground-truth glitch set: the planted set when the model carries one,
/// otherwise an exhaustive oracle scan.
fn ground_truth(model: &TransformerModel, echo_budget: usize) -> anyhow::Result<(BTreeSet<TokenId>, &'static str)> {
    match model.planted_glitch_set() {
        Some(g) => Ok((g.clone(), "planted")),
        None => Ok((exhaustive_scan(model, echo_budget)?.0.glitch(), "exhaustive_scan")),
    }
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, phase: &str, f: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
    let start = std::time::Instant::now();
    let out = f()?;
    timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
    Ok(out)
}

pub fn synth(ctx: &Context) -> anyhow::Result<Outcome> {
    let mut timings = BTreeMap::new();
    let model = timed(&mut timings, "build", || ctx.model(&Inputs::default()))?;
    let path = ctx.path("model.bin");
    save_model(&model, &path).with_context(|| format!("writing {}", path.display()))?;
    let planted: Vec<TokenId> = model.planted_glitch_set().map(|g| g.iter().copied().collect()).unwrap_or_default();
    let payload = json!({
        "format": MODEL_FORMAT,
        "vocab_size": model.config().vocab_size,
        "n_planted": planted.len(),
        "planted": planted,
        "model_sha256": sha256_hex(&std::fs::read(&path)?),
    });
    ctx.write_report("synth", (None, None), &payload, timings)?;
    println!("model: {} ({} planted glitch tokens of {})", path.display(), planted.len(), model.config().vocab_size);
    Ok(OK)
}

pub fn scan(ctx: &Context, inputs: &Inputs) -> anyhow::Result<Outcome> {
    let model = ctx.model(inputs)?;
    let (report, verdicts) = exhaustive_scan(&model, ctx.cfg.echo_budget)?;
    write_verdicts(&ctx.path("verdicts.jsonl"), &verdicts)?;
    let timings = report.timings.clone();
    ctx.write_report("scan", (inputs.model.as_deref(), None), &json!({ "scan": report }), timings)?;
    println!("{} glitch tokens of {} ({} oracle calls)", report.glitch_set.len(), report.vocab_size, report.oracle_calls);
    Ok(OK)
}

pub fn detect(ctx: &Context, inputs: &TraceInputs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let (out, rule, truth_source, n_truth) = if let Some(tp) = &inputs.traces {
        let file = read_traces(tp).with_context(|| format!("reading {}", tp.display()))?;
        let n_layers = file.layout.iter().map(|e| e.layer + 1).max().unwrap_or(1);
        let mut dcfg = cfg.detection_config(n_layers)?;
        dcfg.sites.retain(|s| file.layout.iter().any(|e| e.site == *s));
        if dcfg.sites.is_empty() {
            bail!(glitchlab::Error::InvalidArgument("none of the configured sites are present in the traces".into()));
        }
        let target = TraceTarget::new(file.traces, Some(&dcfg.sites))?;
        let truth = target.ground_truth();
        let out = run_detect(&target, &dcfg, truth.as_ref())?;
        if let (Some(pca), Some(svm)) = (&out.pca, &out.svm) {
            save_classifier(&ctx.path("classifier.bin"), &dcfg, pca, svm)?;
        }
        let n = truth.as_ref().map(BTreeSet::len);
        (out, None, if truth.is_some() { "trace_labels" } else { "none" }, n)
    } else {
        let model = ctx.model(&inputs.inputs)?;
        let dcfg = cfg.detection_config(model.config().n_layers)?;
        let (truth, source) = ground_truth(&model, cfg.echo_budget)?;
        let out = run_detect(&ModelTarget::new(&model, &dcfg), &dcfg, Some(&truth))?;
        if let (Some(pca), Some(svm)) = (&out.pca, &out.svm) {
            save_classifier(&ctx.path("classifier.bin"), &dcfg, pca, svm)?;
        }
        let display = &model.vocab().display;
        let rule = if display.is_empty() {
            None
        } else {
            Some(rule_based_baseline(display, cfg.seed, Some(&truth))?)
        };
        (out, rule, source, Some(truth.len()))
    };
    let r = &out.report;
    let payload = json!({
        "detection": r,
        "rule_based": rule,
        "ground_truth": { "source": truth_source, "glitch_count": n_truth },
    });
    ctx.write_report(
        "detect",
        (inputs.inputs.model.as_deref(), inputs.traces.as_deref()),
        &payload,
        r.timings.clone(),
    )?;
    let mut rows = vec![("Adaptive", r.metrics, r.oracle_calls)];
    if let Some(rb) = &rule {
        rows.push(("Rule-based", rb.metrics, 0));
    }
    print!("{}", summary::detection_table(&rows));
    for w in &r.warnings {
        println!("note: {w}");
    }
    Ok(Outcome { fallback: r.fallback.is_some() })
}

fn partition(ctx: &Context, model: &TransformerModel) -> anyhow::Result<(DetectionReport, &'static str)> {
    let cfg = &ctx.cfg;
    Ok(match cfg.repair.partition {
        PartitionSource::Exhaustive => (exhaustive_scan(model, cfg.echo_budget)?.0, "exhaustive"),
        PartitionSource::Detect => {
            let dcfg = cfg.detection_config(model.config().n_layers)?;
            (run_detect(&ModelTarget::new(model, &dcfg), &dcfg, None)?.report, "detect")
        }
    })
}

pub fn repair(ctx: &Context, inputs: &Inputs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let model = ctx.model(inputs)?;
    let mut timings = BTreeMap::new();
    let (part, source) = timed(&mut timings, "partition", || partition(ctx, &model))?;
    let glitch = part.glitch();
    let key_layers = cfg.key_layers(model.config().n_layers)?;
    let profile = timed(&mut timings, "profile", || {
        Ok(profile_normal(&model, &part.normal_set, cfg.repair.gamma, cfg.repair.threshold_m, &key_layers, cfg.seed)?)
    })?;
    save_profile(&ctx.path("profile.bin"), &profile)?;
    let factors = if cfg.repair.alpha.is_some() || cfg.repair.beta.is_some() {
        AdjustmentFactors::fixed(cfg.repair.alpha.unwrap_or(1.0), cfg.repair.beta.unwrap_or(0.0))?
    } else if profile.is_degenerate() || glitch.is_empty() {
        warn!("no usable neuron profile or glitch sample; adaptive repair is the identity");
        AdjustmentFactors::identity()
    } else {
        let g: Vec<TokenId> = glitch.iter().copied().collect();
        adapt_factors(&model, &profile, &g, cfg.repair.gamma, cfg.seed, cfg.repair.coefficients)?
    };
    let adaptive = timed(&mut timings, "repair", || {
        Ok(repair_all(&model, &glitch, &profile, factors, cfg.echo_budget, "adaptive")?)
    })?;
    let rule = repair_all(&model, &glitch, &profile, AdjustmentFactors::rule_based(), cfg.echo_budget, "rule_based")?;
    let layers: Vec<_> = profile
        .layers
        .iter()
        .map(|l| json!({ "layer": l.layer, "up": l.up_set.len(), "down": l.down_set.len() }))
        .collect();
    let payload = json!({
        "partition": { "source": source, "glitch_count": glitch.len(), "normal_count": part.normal_set.len() },
        "profile": { "m": profile.m, "sample_size": profile.sample_ids.len(), "layers": layers },
        "adaptive": adaptive,
        "rule_based": rule,
    });
    ctx.write_report("repair", (inputs.model.as_deref(), None), &payload, timings)?;
    print!("{}", summary::repair_table(&[("Adaptive", &adaptive), ("Rule-based", &rule)]));
    Ok(OK)
}

fn split_labelled(traces: Vec<ActivationTrace>) -> (Vec<ActivationTrace>, Vec<ActivationTrace>) {
    let mut g = Vec::new();
    let mut n = Vec::new();
    for t in traces {
        match t.label {
            Some(Label::Glitch) => g.push(t),
            Some(Label::Normal) => n.push(t),
            None => {}
        }
    }
    (g, n)
}

pub fn diagnose(ctx: &Context, inputs: &TraceInputs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let (glitch, normal) = match &inputs.traces {
        Some(tp) => split_labelled(read_traces(tp).with_context(|| format!("reading {}", tp.display()))?.traces),
        None => {
            let model = ctx.model(&inputs.inputs)?;
            let (truth, _) = ground_truth(&model, cfg.echo_budget)?;
            let n: Vec<TokenId> = (0..model.config().vocab_size as TokenId).filter(|t| !truth.contains(t)).collect();
            let g: Vec<TokenId> = truth.into_iter().collect();
            (all_layer_traces(&model, &g)?, all_layer_traces(&model, &n)?)
        }
    };
    if glitch.is_empty() || normal.is_empty() {
        bail!(glitchlab::Error::InvalidArgument("diagnostics need both glitch and normal tokens".into()));
    }
    let (hg, hn) = attention_histograms(&glitch, &normal, cfg.diagnose.bin_width)?;
    let attention_w1 = wasserstein_1d(
        &pooled_values(&glitch, Site::AttnPattern, None),
        &pooled_values(&normal, Site::AttnPattern, None),
    )?;
    let points = mlp_scatter(&glitch, &normal, cfg.diagnose.scatter_site)?;
    let profile = layer_profile_from_traces(&glitch, &normal)?;
    let suggested = suggest_key_layers(&profile)?;
    write_histogram_csv(&ctx.path("attention_histogram.csv"), &[hg.clone(), hn.clone()])?;
    write_scatter_csv(&ctx.path("mlp_scatter.csv"), &points)?;
    write_layer_profile_csv(&ctx.path("layer_profile.csv"), &profile)?;
    let payload = json!({
        "glitch_count": glitch.len(),
        "normal_count": normal.len(),
        "attention_wasserstein": attention_w1,
        "histograms": [hg, hn],
        "scatter_site": cfg.diagnose.scatter_site,
        "scatter_spread": {
            "glitch": cluster_spread(&points, Label::Glitch),
            "normal": cluster_spread(&points, Label::Normal),
        },
        "layer_profile": profile,
        "layer_scores": profile.layer_scores(),
        "suggested_key_layers": suggested.layers(),
    });
    ctx.write_report(
        "diagnose",
        (inputs.inputs.model.as_deref(), inputs.traces.as_deref()),
        &payload,
        BTreeMap::new(),
    )?;
    println!("{:<6} {:<13} {:>12}", "Layer", "Site", "W1");
    for d in &profile.distances {
        println!("{:<6} {:<13} {:>12.6}", d.layer, d.site.as_str(), d.wasserstein);
    }
    println!("suggested key layers: {:?}", suggested.layers());
    Ok(OK)
}

pub fn sweep(ctx: &Context, inputs: &Inputs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let model = ctx.model(inputs)?;
    let base = cfg.detection_config(model.config().n_layers)?;
    let (truth, _) = ground_truth(&model, cfg.echo_budget)?;
    let mut timings = BTreeMap::new();
    let rows = timed(&mut timings, "sweep", || Ok(run_sweep(&model, &base, &cfg.sweep_grid(), &truth)?))?;
    ctx.write_report("sweep", (inputs.model.as_deref(), None), &json!({ "rows": rows }), timings)?;
    print!("{}", summary::sweep_table(&rows));
    Ok(Outcome { fallback: rows.iter().any(|r| r.fallback) })
}

pub fn export_traces(ctx: &Context, inputs: &Inputs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let model = ctx.model(inputs)?;
    let key_layers = cfg.key_layers(model.config().n_layers)?;
    let (truth, _) = ground_truth(&model, cfg.echo_budget)?;
    let traces: Vec<ActivationTrace> = (0..model.config().vocab_size as TokenId)
        .into_par_iter()
        .map(|t| {
            let mut tr = extract_features(&model, t, &key_layers, &cfg.detect.sites)?;
            tr.label = Some(if truth.contains(&t) { Label::Glitch } else { Label::Normal });
            Ok(tr)
        })
        .collect::<glitchlab::Result<_>>()?;
    let path = ctx.path("traces.bin");
    write_traces(&path, model.config().vocab_size, &traces)?;
    let payload = json!({
        "format": TRACE_FORMAT,
        "records": traces.len(),
        "width": traces.first().map_or(0, ActivationTrace::width),
        "layout": traces.first().map(|t| t.layout.clone()),
        "sha256": sha256_hex(&std::fs::read(&path)?),
    });
    ctx.write_report("export-traces", (inputs.model.as_deref(), None), &payload, BTreeMap::new())?;
    println!("traces: {} ({} records)", path.display(), traces.len());
    Ok(OK)
}
