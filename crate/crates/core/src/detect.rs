//! Sample → label → reduce → train → scan → validate, plus the exhaustive
//! and rule-based baselines and the hyperparameter sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::classify::{svm_predict, svm_train, SvmMeta, SvmModel, SvmParams};
use crate::container::Container;
use crate::error::{format_err, invalid, Error, Result};
use crate::features::{extract_features, normalize_sites, ActivationTrace, KeyLayerSet, LayoutEntry};
use crate::model::{ModelConfig, Site, TransformerModel};
use crate::oracle::{classify_token, Label, OracleVerdict, DEFAULT_ECHO_BUDGET};
use crate::reduce::{pca_fit, pca_transform, PcaModel, DEFAULT_PCA_DIM, PCA_DIM_BAND};
use crate::stopwords::is_stopword;
use crate::TokenId;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const GAMMA_BAND: (f64, f64) = (0.1, 0.3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Fraction of the vocabulary sampled and oracle-labelled.
    pub gamma: f64,
    pub pca_dim: usize,
    pub key_layers: KeyLayerSet,
    pub sites: Vec<Site>,
    pub svm: SvmParams,
    pub rng_seed: u64,
    pub echo_budget: usize,
    /// Oracle-check every predicted glitch before accepting it.
    pub post_validation: bool,
}

impl DetectionConfig {
    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            gamma: DEFAULT_GAMMA,
            pca_dim: DEFAULT_PCA_DIM,
            key_layers: KeyLayerSet::downstream_band(config.n_layers)?,
            sites: Site::ALL.to_vec(),
            svm: SvmParams::default(),
            rng_seed: config.rng_seed,
            echo_budget: DEFAULT_ECHO_BUDGET,
            post_validation: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid(format!("gamma {} must lie in (0, 1]", self.gamma)));
        }
        if self.pca_dim == 0 {
            return Err(invalid("pca_dim must be positive"));
        }
        if self.echo_budget == 0 {
            return Err(invalid("echo_budget must be positive"));
        }
        normalize_sites(&self.sites)?;
        self.svm.validate()
    }

    /// Soft range checks; these never fail a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.gamma < GAMMA_BAND.0 || self.gamma > GAMMA_BAND.1 {
            out.push(format!(
                "gamma {} is outside the recommended band [{}, {}]",
                self.gamma, GAMMA_BAND.0, GAMMA_BAND.1
            ));
        }
        if self.pca_dim < PCA_DIM_BAND.0 || self.pca_dim > PCA_DIM_BAND.1 {
            out.push(format!(
                "pca_dim {} is outside the recommended band [{}, {}]",
                self.pca_dim, PCA_DIM_BAND.0, PCA_DIM_BAND.1
            ));
        }
        out
    }
}

/// Something the detector can scan: a token list, per-token features, and
/// a label source.
pub trait ScanTarget: Sync {
    fn tokens(&self) -> Vec<TokenId>;
    fn features(&self, token: TokenId) -> Result<Vec<f32>>;
    /// Ground-truth label. For oracle-backed targets this runs the oracle.
    fn label(&self, token: TokenId) -> Result<Option<Label>>;
    /// Whether [`ScanTarget::label`] is a live oracle that can validate
    /// arbitrary tokens.
    fn has_oracle(&self) -> bool;
}

pub struct ModelTarget<'m> {
    pub model: &'m TransformerModel,
    pub key_layers: KeyLayerSet,
    pub sites: Vec<Site>,
    pub echo_budget: usize,
}

impl<'m> ModelTarget<'m> {
    pub fn new(model: &'m TransformerModel, cfg: &DetectionConfig) -> Self {
        Self {
            model,
            key_layers: cfg.key_layers.clone(),
            sites: cfg.sites.clone(),
            echo_budget: cfg.echo_budget,
        }
    }
}

impl ScanTarget for ModelTarget<'_> {
    fn tokens(&self) -> Vec<TokenId> {
        (0..self.model.config().vocab_size as TokenId).collect()
    }

    fn features(&self, token: TokenId) -> Result<Vec<f32>> {
        Ok(extract_features(self.model, token, &self.key_layers, &self.sites)?.values)
    }

    fn label(&self, token: TokenId) -> Result<Option<Label>> {
        Ok(Some(classify_token(self.model, token, self.echo_budget)?.label))
    }

    fn has_oracle(&self) -> bool {
        true
    }
}

/// Pre-recorded traces, optionally restricted to a subset of sites.
pub struct TraceTarget {
    traces: BTreeMap<TokenId, ActivationTrace>,
    columns: Vec<LayoutEntry>,
}

impl TraceTarget {
    pub fn new(traces: Vec<ActivationTrace>, sites: Option<&[Site]>) -> Result<Self> {
        let first = traces.first().ok_or_else(|| invalid("no traces supplied"))?;
        let layout = first.layout.clone();
        let columns: Vec<LayoutEntry> = match sites {
            Some(s) => {
                let s = normalize_sites(s)?;
                layout.iter().copied().filter(|e| s.contains(&e.site)).collect()
            }
            None => layout.clone(),
        };
        if columns.is_empty() {
            return Err(invalid("requested sites are not present in the traces"));
        }
        let mut map = BTreeMap::new();
        for t in traces {
            if t.layout != layout {
                return Err(invalid(format!("trace for token {} has a different layout", t.token)));
            }
            if map.insert(t.token, t).is_some() {
                return Err(invalid("duplicate token in trace set"));
            }
        }
        Ok(Self { traces: map, columns })
    }

    /// Glitch set implied by the trace labels, when every trace is labelled.
    pub fn ground_truth(&self) -> Option<BTreeSet<TokenId>> {
        let mut g = BTreeSet::new();
        for (t, tr) in &self.traces {
            match tr.label? {
                Label::Glitch => {
                    g.insert(*t);
                }
                Label::Normal => {}
            }
        }
        Some(g)
    }
}

impl ScanTarget for TraceTarget {
    fn tokens(&self) -> Vec<TokenId> {
        self.traces.keys().copied().collect()
    }

    fn features(&self, token: TokenId) -> Result<Vec<f32>> {
        let t = self
            .traces
            .get(&token)
            .ok_or_else(|| invalid(format!("no trace for token {token}")))?;
        let mut out = Vec::new();
        for e in &self.columns {
            out.extend_from_slice(&t.values[e.offset..e.offset + e.length]);
        }
        Ok(out)
    }

    fn label(&self, token: TokenId) -> Result<Option<Label>> {
        Ok(self.traces.get(&token).and_then(|t| t.label))
    }

    fn has_oracle(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of `predicted` against `truth`. An empty
/// denominator counts as a perfect score.
pub fn metrics(predicted: &BTreeSet<TokenId>, truth: &BTreeSet<TokenId>) -> Metrics {
    let tp = predicted.intersection(truth).count();
    let fp = predicted.len() - tp;
    let fn_ = truth.len() - tp;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics { tp, fp, fn_, precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    pub glitch_set: Vec<TokenId>,
    pub normal_set: Vec<TokenId>,
    pub vocab_size: usize,
    pub sample_size: usize,
    /// Unsampled tokens the classifier flagged.
    pub predicted_glitch: usize,
    pub oracle_calls: usize,
    pub pca_dim: Option<usize>,
    /// Whether every reported glitch was confirmed by the oracle.
    pub validated: bool,
    pub metrics: Option<Metrics>,
    /// Metrics of the raw classifier output (sampled labels plus
    /// predictions, no oracle confirmation).
    pub unvalidated_metrics: Option<Metrics>,
    pub fallback: Option<String>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub timings: BTreeMap<String, f64>,
}

impl DetectionReport {
    pub fn glitch(&self) -> BTreeSet<TokenId> {
        self.glitch_set.iter().copied().collect()
    }

    pub fn normal(&self) -> BTreeSet<TokenId> {
        self.normal_set.iter().copied().collect()
    }
}

/// Report plus the fitted reducer and classifier (absent on fallback).
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub report: DetectionReport,
    pub pca: Option<PcaModel>,
    pub svm: Option<SvmModel>,
}

struct Timer(BTreeMap<String, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Self(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, phase: &str) {
        self.0.insert(phase.to_string(), self.1.elapsed().as_secs_f64());
        self.1 = Instant::now();
    }
}

/// Size of the labelled sample: `⌈γ·n⌉`, at least one token.
pub fn sample_size(gamma: f64, n: usize) -> usize {
    ((gamma * n as f64).ceil() as usize).clamp(1.min(n), n)
}

pub fn detect(target: &dyn ScanTarget, cfg: &DetectionConfig, ground_truth: Option<&BTreeSet<TokenId>>) -> Result<DetectionOutcome> {
    cfg.validate()?;
    let mut warnings = cfg.warnings();
    for w in &warnings {
        warn!("{w}");
    }
    let mut timer = Timer::new();
    let tokens = target.tokens();
    if tokens.is_empty() {
        return Err(invalid("empty vocabulary"));
    }
    let n = tokens.len();
    let k = sample_size(cfg.gamma, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let sampled: Vec<TokenId> = picked.iter().map(|&i| tokens[i]).collect();
    let in_sample: BTreeSet<TokenId> = sampled.iter().copied().collect();
    timer.lap("sample");

    let labels: Vec<Label> = sampled
        .par_iter()
        .map(|&t| target.label(t)?.ok_or_else(|| invalid(format!("no label available for sampled token {t}"))))
        .collect::<Result<_>>()?;
    let mut oracle_calls = if target.has_oracle() { k } else { 0 };
    timer.lap("label");

    let mut glitch = BTreeSet::new();
    let mut normal = BTreeSet::new();
    for (&t, &l) in sampled.iter().zip(&labels) {
        match l {
            Label::Glitch => glitch.insert(t),
            Label::Normal => normal.insert(t),
        };
    }

    let n_glitch = labels.iter().filter(|l| l.is_glitch()).count();
    if n_glitch == 0 || n_glitch == k {
        if !target.has_oracle() {
            return Err(Error::Degenerate("sampled traces contain a single class and no oracle is available".into()));
        }
        let msg = format!("sample of {k} tokens contains a single class; fell back to exhaustive oracle scan");
        warn!("{msg}");
        warnings.push(msg.clone());
        let rest: Vec<TokenId> = tokens.iter().copied().filter(|t| !in_sample.contains(t)).collect();
        let rest_labels: Vec<Option<Label>> = rest.par_iter().map(|&t| target.label(t)).collect::<Result<_>>()?;
        oracle_calls += rest.len();
        for (t, l) in rest.into_iter().zip(rest_labels) {
            if l == Some(Label::Glitch) {
                glitch.insert(t);
            } else {
                normal.insert(t);
            }
        }
        timer.lap("scan");
        let m = ground_truth.map(|g| metrics(&glitch, g));
        return Ok(DetectionOutcome {
            report: DetectionReport {
                method: "adaptive".into(),
                glitch_set: glitch.into_iter().collect(),
                normal_set: normal.into_iter().collect(),
                vocab_size: n,
                sample_size: k,
                predicted_glitch: 0,
                oracle_calls,
                pca_dim: None,
                validated: true,
                metrics: m,
                unvalidated_metrics: m,
                fallback: Some(msg),
                warnings,
                timings: timer.0,
            },
            pca: None,
            svm: None,
        });
    }

    let raw: Vec<Vec<f32>> = sampled.par_iter().map(|&t| target.features(t)).collect::<Result<_>>()?;
    let cols = raw[0].len();
    if raw.iter().any(|r| r.len() != cols) {
        return Err(invalid("feature vectors differ in length"));
    }
    let x = nalgebra::DMatrix::from_fn(k, cols, |i, j| f64::from(raw[i][j]));
    let p = cfg.pca_dim.min(k - 1).min(cols);
    if p < cfg.pca_dim {
        let msg = format!("pca_dim {} reduced to {p} for a {k}x{cols} sample", cfg.pca_dim);
        warn!("{msg}");
        warnings.push(msg);
    }
    let pca = pca_fit(&x, p)?;
    let reduced: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| pca_transform(&pca, &r.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let svm = svm_train(&reduced, &labels, &cfg.svm)?;
    timer.lap("fit");

    let validate = cfg.post_validation && target.has_oracle();
    let rest: Vec<TokenId> = tokens.iter().copied().filter(|t| !in_sample.contains(t)).collect();
    // (token, predicted glitch, oracle verdict if consulted)
    let scanned: Vec<(TokenId, bool, Option<Label>)> = rest
        .par_iter()
        .map(|&t| {
            let f: Vec<f64> = target.features(t)?.into_iter().map(f64::from).collect();
            let (pred, _) = svm_predict(&svm, &pca_transform(&pca, &f)?)?;
            if pred == Label::Glitch && validate {
                Ok((t, true, target.label(t)?))
            } else {
                Ok((t, pred == Label::Glitch, None))
            }
        })
        .collect::<Result<_>>()?;
    timer.lap("scan");

    let mut raw_glitch = glitch.clone();
    let mut predicted_glitch = 0;
    for (t, pred, verdict) in scanned {
        if pred {
            predicted_glitch += 1;
            raw_glitch.insert(t);
        }
        let is_glitch = match verdict {
            Some(l) => {
                oracle_calls += 1;
                l.is_glitch()
            }
            None => pred,
        };
        if is_glitch {
            glitch.insert(t);
        } else {
            normal.insert(t);
        }
    }
    if !validate {
        warnings.push("post-validation disabled: reported glitches are unconfirmed predictions".into());
    }

    Ok(DetectionOutcome {
        report: DetectionReport {
            method: "adaptive".into(),
            metrics: ground_truth.map(|g| metrics(&glitch, g)),
            unvalidated_metrics: ground_truth.map(|g| metrics(&raw_glitch, g)),
            glitch_set: glitch.into_iter().collect(),
            normal_set: normal.into_iter().collect(),
            vocab_size: n,
            sample_size: k,
            predicted_glitch,
            oracle_calls,
            pca_dim: Some(p),
            validated: validate,
            fallback: None,
            warnings,
            timings: timer.0,
        },
        pca: Some(pca),
        svm: Some(svm),
    })
}

/// Runs the oracle on every token. Serves as ground truth.
pub fn exhaustive_scan(model: &TransformerModel, echo_budget: usize) -> Result<(DetectionReport, Vec<OracleVerdict>)> {
    let start = Instant::now();
    let n = model.config().vocab_size;
    let verdicts: Vec<OracleVerdict> = (0..n as TokenId)
        .into_par_iter()
        .map(|t| classify_token(model, t, echo_budget))
        .collect::<Result<_>>()?;
    let glitch: BTreeSet<TokenId> = verdicts.iter().filter(|v| v.label.is_glitch()).map(|v| v.token).collect();
    let normal: Vec<TokenId> = verdicts.iter().filter(|v| !v.label.is_glitch()).map(|v| v.token).collect();
    let m = metrics(&glitch, &glitch);
    let mut timings = BTreeMap::new();
    timings.insert("scan".to_string(), start.elapsed().as_secs_f64());
    Ok((
        DetectionReport {
            method: "exhaustive".into(),
            glitch_set: glitch.into_iter().collect(),
            normal_set: normal,
            vocab_size: n,
            sample_size: n,
            predicted_glitch: 0,
            oracle_calls: n,
            pca_dim: None,
            validated: true,
            metrics: Some(m),
            unvalidated_metrics: Some(m),
            fallback: None,
            warnings: Vec::new(),
            timings,
        },
        verdicts,
    ))
}

/// Picks half the vocabulary at random, drops stopwords, and calls the
/// remainder glitches.
pub fn rule_based_baseline(display: &[String], rng_seed: u64, ground_truth: Option<&BTreeSet<TokenId>>) -> Result<DetectionReport> {
    let n = display.len();
    if n == 0 {
        return Err(invalid("display strings are required for the rule-based baseline"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picked = sample(&mut rng, n, n / 2);
    let glitch: BTreeSet<TokenId> = picked
        .into_iter()
        .filter(|&i| !is_stopword(&display[i]))
        .map(|i| i as TokenId)
        .collect();
    let normal: Vec<TokenId> = (0..n as TokenId).filter(|t| !glitch.contains(t)).collect();
    Ok(DetectionReport {
        method: "rule_based".into(),
        metrics: ground_truth.map(|g| metrics(&glitch, g)),
        unvalidated_metrics: None,
        predicted_glitch: glitch.len(),
        glitch_set: glitch.into_iter().collect(),
        normal_set: normal,
        vocab_size: n,
        sample_size: n / 2,
        oracle_calls: 0,
        pca_dim: None,
        validated: false,
        fallback: None,
        warnings: Vec::new(),
        timings: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub site_sets: Vec<Vec<Site>>,
    pub c_values: Vec<f64>,
    pub degrees: Vec<u32>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.site_sets.len() * self.c_values.len() * self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            site_sets: vec![
                vec![Site::AttnPattern],
                vec![Site::MlpGate],
                vec![Site::MlpData],
                Site::ALL.to_vec(),
            ],
            c_values: vec![0.1, 1.0, 10.0],
            degrees: vec![2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sites: Vec<Site>,
    pub c: f64,
    pub degree: u32,
    pub f1_validated: f64,
    pub f1_unvalidated: f64,
    pub precision: f64,
    pub recall: f64,
    pub oracle_calls: usize,
    pub fallback: bool,
}

/// One detection run per grid cell on `model`, scored against `ground_truth`.
pub fn sweep(model: &TransformerModel, base: &DetectionConfig, grid: &SweepGrid, ground_truth: &BTreeSet<TokenId>) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(invalid("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for sites in &grid.site_sets {
        for &c in &grid.c_values {
            for &degree in &grid.degrees {
                let mut cfg = base.clone();
                cfg.sites = normalize_sites(sites)?;
                cfg.svm.c = c;
                cfg.svm.degree = degree;
                let target = ModelTarget::new(model, &cfg);
                let out = detect(&target, &cfg, Some(ground_truth))?;
                let m = out.report.metrics.expect("ground truth supplied");
                let raw = out.report.unvalidated_metrics.expect("ground truth supplied");
                rows.push(SweepRow {
                    sites: cfg.sites.clone(),
                    c,
                    degree,
                    f1_validated: m.f1,
                    f1_unvalidated: raw.f1,
                    precision: m.precision,
                    recall: m.recall,
                    oracle_calls: out.report.oracle_calls,
                    fallback: out.report.fallback.is_some(),
                });
            }
        }
    }
    Ok(rows)
}

pub const CLASSIFIER_FORMAT: &str = "glitchlab-classifier/1";

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    version: u32,
    config: DetectionConfig,
    svm: SvmMeta,
}

/// Writes the fitted reducer and classifier with the config that produced them.
pub fn save_classifier(path: &Path, cfg: &DetectionConfig, pca: &PcaModel, svm: &SvmModel) -> Result<()> {
    let header = ClassifierHeader { version: 1, config: cfg.clone(), svm: svm.meta() };
    let mut tensors = pca.to_tensors("pca");
    tensors.extend(svm.to_tensors("svm"));
    Container {
        format: CLASSIFIER_FORMAT.into(),
        header: serde_json::to_value(header).map_err(|e| format_err(0, e.to_string()))?,
        tensors,
    }
    .write(path)
}

pub fn load_classifier(path: &Path) -> Result<(DetectionConfig, PcaModel, SvmModel)> {
    let c = Container::read(path, CLASSIFIER_FORMAT)?;
    let header: ClassifierHeader = serde_json::from_value(c.header.clone()).map_err(|e| format_err(0, format!("classifier header: {e}")))?;
    if header.version != 1 {
        return Err(format_err(0, format!("unsupported classifier version {}", header.version)));
    }
    let find = |name: &str| c.tensor(name).cloned();
    let pca = PcaModel::from_tensors("pca", find)?;
    let svm = SvmModel::from_tensors("svm", header.svm, find)?;
    if pca.dim() != svm.dim() && !svm.support_vectors.is_empty() {
        return Err(format_err(0, "PCA and SVM dimensions disagree"));
    }
    Ok((header.config, pca, svm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_arithmetic() {
        let p: BTreeSet<TokenId> = [1, 2, 3, 4].into();
        let t: BTreeSet<TokenId> = [2, 3, 5].into();
        let m = metrics(&p, &t);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 2, 1));
        assert!((m.precision - 0.5).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-12);
        let e = metrics(&BTreeSet::new(), &BTreeSet::new());
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn sample_size_rounds_up() {
        assert_eq!(sample_size(0.1, 512), 52);
        assert_eq!(sample_size(1.0, 512), 512);
        assert_eq!(sample_size(0.001, 10), 1);
    }

    #[test]
    fn rule_based_with_no_stopwords_flags_half() {
        let display: Vec<String> = (0..100).map(|i| format!("tok{i}")).collect();
        let r = rule_based_baseline(&display, 3, None).unwrap();
        assert_eq!(r.glitch_set.len(), 50);
        assert_eq!(r.glitch_set.len() + r.normal_set.len(), 100);
    }

    #[test]
    fn rule_based_drops_stopwords() {
        let display: Vec<String> = (0..100).map(|i| if i % 2 == 0 { "the".into() } else { format!("x{i}") }).collect();
        let r = rule_based_baseline(&display, 3, None).unwrap();
        assert!(r.glitch_set.iter().all(|t| t % 2 == 1));
    }

    #[test]
    fn config_validation() {
        let mut cfg = DetectionConfig::for_model(&ModelConfig::default()).unwrap();
        assert!(cfg.validate().is_ok());
        assert!(cfg.warnings().is_empty());
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.5;
        cfg.pca_dim = 10;
        assert_eq!(cfg.warnings().len(), 2);
        assert!(SweepGrid { site_sets: vec![], c_values: vec![1.0], degrees: vec![3] }.is_empty());
    }

    #[test]
    fn classifier_roundtrip() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![3.0, 3.0]];
        let labels = [Label::Normal, Label::Glitch, Label::Normal, Label::Glitch];
        let x = nalgebra::DMatrix::from_fn(4, 2, |i, j| rows[i][j]);
        let pca = pca_fit(&x, 2).unwrap();
        let red: Vec<Vec<f64>> = rows.iter().map(|r| pca_transform(&pca, r).unwrap()).collect();
        let svm = svm_train(&red, &labels, &SvmParams::default()).unwrap();
        let cfg = DetectionConfig::for_model(&ModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.bin");
        save_classifier(&path, &cfg, &pca, &svm).unwrap();
        let (cfg2, pca2, svm2) = load_classifier(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(pca, pca2);
        assert_eq!(svm, svm2);
    }
}
