//! TOML run configuration. Every section is optional; unknown keys are
//! rejected.

use std::path::Path;

use anyhow::{bail, Context};
use glitchlab::classify::SvmParams;
use glitchlab::detect::{DetectionConfig, SweepGrid, DEFAULT_GAMMA};
use glitchlab::features::KeyLayerSet;
use glitchlab::model::{Activation, ModelConfig, Site, SynthParams};
use glitchlab::oracle::DEFAULT_ECHO_BUDGET;
use glitchlab::reduce::DEFAULT_PCA_DIM;
use glitchlab::repair::{RepairCoefficients, DEFAULT_THRESHOLD_M};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub echo_budget: usize,
    pub model: ModelSection,
    pub scenario: ScenarioSection,
    pub detect: DetectSection,
    pub repair: RepairSection,
    pub diagnose: DiagnoseSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            echo_budget: DEFAULT_ECHO_BUDGET,
            model: ModelSection::default(),
            scenario: ScenarioSection::default(),
            detect: DetectSection::default(),
            repair: RepairSection::default(),
            diagnose: DiagnoseSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_mlp: m.d_mlp,
            vocab_size: m.vocab_size,
            activation: m.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Planted glitch count as a fraction of the vocabulary (floored).
    pub glitch_fraction: f64,
    /// Explicit planted count; overrides `glitch_fraction`.
    pub n_glitch: Option<usize>,
    pub corruption_scale: f32,
    pub n_attractors: usize,
    pub cohesion: f32,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let p = SynthParams::default();
        Self {
            glitch_fraction: 0.2,
            n_glitch: None,
            corruption_scale: p.corruption_scale,
            n_attractors: p.n_attractors,
            cohesion: p.cohesion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub gamma: f64,
    pub pca_dim: usize,
    /// Explicit key layers; the downstream band when absent.
    pub key_layers: Option<Vec<usize>>,
    pub sites: Vec<Site>,
    pub svm_c: f64,
    pub svm_degree: u32,
    pub kernel_scale: Option<f64>,
    pub kernel_offset: f64,
    pub balance_classes: bool,
    pub post_validation: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        let svm = SvmParams::default();
        Self {
            gamma: DEFAULT_GAMMA,
            pca_dim: DEFAULT_PCA_DIM,
            key_layers: None,
            sites: Site::ALL.to_vec(),
            svm_c: svm.c,
            svm_degree: svm.degree,
            kernel_scale: svm.kernel_scale,
            kernel_offset: svm.kernel_offset,
            balance_classes: svm.balance_classes,
            post_validation: true,
        }
    }
}

/// Where repair takes its glitch/normal partition from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSource {
    Exhaustive,
    Detect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepairSection {
    pub gamma: f64,
    pub threshold_m: f64,
    pub partition: PartitionSource,
    pub coefficients: RepairCoefficients,
    /// Fixed factors; when either is set, the adaptive computation is bypassed.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl Default for RepairSection {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            threshold_m: DEFAULT_THRESHOLD_M,
            partition: PartitionSource::Exhaustive,
            coefficients: RepairCoefficients::default(),
            alpha: None,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub bin_width: f64,
    pub scatter_site: Site,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self { bin_width: glitchlab::diagnostics::DEFAULT_BIN_WIDTH, scatter_site: Site::MlpGate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub site_sets: Vec<Vec<Site>>,
    pub c_values: Vec<f64>,
    pub degrees: Vec<u32>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let g = SweepGrid::default();
        Self { site_sets: g.site_sets, c_values: g.c_values, degrees: g.degrees }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub pca_dim: Option<usize>,
    pub svm_c: Option<f64>,
    pub svm_degree: Option<u32>,
    pub threshold_m: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub key_layers: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(g) = o.gamma {
            self.detect.gamma = g;
            self.repair.gamma = g;
        }
        if let Some(p) = o.pca_dim {
            self.detect.pca_dim = p;
        }
        if let Some(c) = o.svm_c {
            self.detect.svm_c = c;
        }
        if let Some(d) = o.svm_degree {
            self.detect.svm_degree = d;
        }
        if let Some(m) = o.threshold_m {
            self.repair.threshold_m = m;
        }
        if o.alpha.is_some() {
            self.repair.alpha = o.alpha;
        }
        if o.beta.is_some() {
            self.repair.beta = o.beta;
        }
        if let Some(k) = &o.key_layers {
            self.detect.key_layers = Some(k.clone());
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_mlp: m.d_mlp,
            vocab_size: m.vocab_size,
            activation: m.activation,
            rng_seed: self.seed,
        }
    }

    pub fn n_glitch(&self) -> usize {
        self.scenario
            .n_glitch
            .unwrap_or((self.scenario.glitch_fraction * self.model.vocab_size as f64).floor() as usize)
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            n_glitch: self.n_glitch(),
            corruption_scale: self.scenario.corruption_scale,
            echo_budget: self.echo_budget,
            n_attractors: self.scenario.n_attractors,
            cohesion: self.scenario.cohesion,
        }
    }

    pub fn key_layers(&self, n_layers: usize) -> glitchlab::Result<KeyLayerSet> {
        match &self.detect.key_layers {
            Some(l) => KeyLayerSet::explicit(l.clone()),
            None => KeyLayerSet::downstream_band(n_layers),
        }
    }

    pub fn detection_config(&self, n_layers: usize) -> glitchlab::Result<DetectionConfig> {
        let d = &self.detect;
        let cfg = DetectionConfig {
            gamma: d.gamma,
            pca_dim: d.pca_dim,
            key_layers: self.key_layers(n_layers)?,
            sites: d.sites.clone(),
            svm: SvmParams {
                c: d.svm_c,
                degree: d.svm_degree,
                kernel_scale: d.kernel_scale,
                kernel_offset: d.kernel_offset,
                balance_classes: d.balance_classes,
                ..SvmParams::default()
            },
            rng_seed: self.seed,
            echo_budget: self.echo_budget,
            post_validation: d.post_validation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        SweepGrid {
            site_sets: self.sweep.site_sets.clone(),
            c_values: self.sweep.c_values.clone(),
            degrees: self.sweep.degrees.clone(),
        }
    }

    /// Checks that do not need a model.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model_config().validate()?;
        if self.echo_budget == 0 {
            bail!("echo_budget must be positive");
        }
        if !(0.0..1.0).contains(&self.scenario.glitch_fraction) {
            bail!("glitch_fraction must lie in [0, 1)");
        }
        if !(self.repair.gamma > 0.0 && self.repair.gamma <= 1.0) {
            bail!("repair gamma must lie in (0, 1]");
        }
        if !self.repair.threshold_m.is_finite() {
            bail!("threshold_m must be finite");
        }
        if let Some(a) = self.repair.alpha {
            if !(a.is_finite() && a > 0.0) {
                bail!("alpha must be positive");
            }
        }
        if let Some(b) = self.repair.beta {
            if !b.is_finite() {
                bail!("beta must be finite");
            }
        }
        if !(self.diagnose.bin_width > 0.0 && self.diagnose.bin_width <= 1.0) {
            bail!("bin_width must lie in (0, 1]");
        }
        self.detection_config(self.model.n_layers)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[detect]\ngama = 0.2").is_err());
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::parse(
            "seed = 11\n[detect]\ngamma = 0.2\nsites = [\"mlp_gate\"]\nkey_layers = [1]\n[repair]\npartition = \"detect\"\n[repair.coefficients]\nk1 = 2.0\nb1 = 0.0\nk2 = 1.0\nb2 = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.detect.sites, vec![Site::MlpGate]);
        assert_eq!(c.repair.partition, PartitionSource::Detect);
        assert_eq!(c.repair.coefficients.b2, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn glitch_count_floors_fraction() {
        assert_eq!(RunConfig::default().n_glitch(), 102);
    }

    #[test]
    fn overrides_apply() {
        let mut c = RunConfig::default();
        c.apply(&Overrides { seed: Some(3), gamma: Some(0.3), alpha: Some(1.0), beta: Some(0.0), key_layers: Some(vec![2]), ..Overrides::default() });
        assert_eq!((c.seed, c.detect.gamma, c.repair.gamma), (3, 0.3, 0.3));
        assert_eq!((c.repair.alpha, c.repair.beta), (Some(1.0), Some(0.0)));
        assert_eq!(c.key_layers(4).unwrap().layers(), &[2]);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c = RunConfig::default();
        c.detect.gamma = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.repair.alpha = Some(-1.0);
        assert!(c.validate().is_err());
    }
}
