//! Neuron profiling on normal tokens, adaptive adjustment factors, and
//! patched decoding of glitch tokens.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::container::{Container, Tensor, TensorData};
use crate::detect::sample_size;
use crate::error::{format_err, invalid, Result};
use crate::features::KeyLayerSet;
use crate::model::{decode_patched, greedy_decode, ActivationPatch, HookPoint, Site, TransformerModel};
use crate::oracle::{build_repetition_prompt, echo_matches};
use crate::TokenId;

pub const DEFAULT_THRESHOLD_M: f64 = 1.0;
pub const DEFAULT_UP_QUOTA: f64 = 0.99;
pub const ALPHA_RANGE: (f64, f64) = (1.0, 16.0);
pub const BETA_RANGE: (f64, f64) = (0.0, 8.0);
/// Floor on the normal-token mean in the suppression ratio.
pub const RATIO_EPSILON: f64 = 1e-6;
pub const RULE_BASED_ALPHA: f64 = 4.0;
pub const RULE_BASED_BETA: f64 = 1.5;
pub const MIN_NORMAL_TOKENS: usize = 10;
pub const PROFILE_FORMAT: &str = "glitchlab-profile/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    /// Neurons above `m` for at least `up_quota` of the sampled normals.
    pub up_set: Vec<usize>,
    /// Neurons at or below `m` for every sampled normal.
    pub down_set: Vec<usize>,
    pub normal_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronProfile {
    pub layers: Vec<LayerProfile>,
    pub m: f64,
    pub up_quota: f64,
    pub sample_ids: Vec<TokenId>,
}

impl NeuronProfile {
    pub fn key_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    /// No neuron qualifies for either set, so any patch is the identity.
    pub fn is_degenerate(&self) -> bool {
        self.layers.iter().all(|l| l.up_set.is_empty() && l.down_set.is_empty())
    }
}

/// Splits neurons into the up and down sets for one layer. `table[t][i]`
/// is neuron `i`'s activation on sampled token `t`.
pub fn neuron_sets(table: &[Vec<f64>], m: f64, up_quota: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let width = table.first().map_or(0, Vec::len);
    if table.is_empty() {
        return Err(invalid("activation table is empty"));
    }
    if table.iter().any(|r| r.len() != width) {
        return Err(invalid("activation table rows differ in width"));
    }
    if !(up_quota > 0.0 && up_quota <= 1.0) {
        return Err(invalid(format!("up_quota {up_quota} must lie in (0, 1]")));
    }
    let need = up_quota * table.len() as f64;
    let mut up = Vec::new();
    let mut down = Vec::new();
    for i in 0..width {
        let above = table.iter().filter(|r| r[i] > m).count();
        if above as f64 >= need {
            up.push(i);
        } else if above == 0 {
            down.push(i);
        }
    }
    Ok((up, down))
}

fn column_means(table: &[Vec<f64>]) -> Vec<f64> {
    let width = table.first().map_or(0, Vec::len);
    let n = table.len() as f64;
    (0..width).map(|i| table.iter().map(|r| r[i]).sum::<f64>() / n).collect()
}

/// `Z̃ = gate ⊙ data` at the last prompt position, one vector per layer.
pub fn gated_activations(model: &TransformerModel, token: TokenId, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    let prompt = build_repetition_prompt(token, model.template())?;
    let mut hooks: Vec<HookPoint> = layers
        .iter()
        .flat_map(|&l| [HookPoint::new(l, Site::MlpGate), HookPoint::new(l, Site::MlpData)])
        .collect();
    hooks.sort();
    let out = model.forward(&prompt.tokens, &hooks)?;
    layers
        .iter()
        .map(|&l| {
            let find = |site| {
                out.captures
                    .iter()
                    .find(|c| c.layer == l && c.site == site)
                    .map(|c| c.values.as_slice())
                    .ok_or_else(|| invalid(format!("missing capture for layer {l}")))
            };
            let gate = find(Site::MlpGate)?;
            let data = find(Site::MlpData)?;
            Ok(gate.iter().zip(data).map(|(g, d)| f64::from(g * d)).collect())
        })
        .collect()
}

/// Builds a profile from per-layer activation tables (`tables[l][t][i]`).
pub fn profile_from_tables(
    layers: &[usize],
    tables: &[Vec<Vec<f64>>],
    m: f64,
    up_quota: f64,
    sample_ids: Vec<TokenId>,
) -> Result<NeuronProfile> {
    if layers.len() != tables.len() {
        return Err(invalid("one activation table per layer is required"));
    }
    let layers = layers
        .iter()
        .zip(tables)
        .map(|(&layer, table)| {
            let (up_set, down_set) = neuron_sets(table, m, up_quota)?;
            Ok(LayerProfile { layer, up_set, down_set, normal_mean: column_means(table) })
        })
        .collect::<Result<Vec<_>>>()?;
    let profile = NeuronProfile { layers, m, up_quota, sample_ids };
    if profile.is_degenerate() {
        warn!("neuron profile is degenerate: no up or down neurons at m = {m}; repair will be the identity");
    }
    Ok(profile)
}

fn sample_tokens(tokens: &[TokenId], gamma: f64, rng_seed: u64) -> Result<Vec<TokenId>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma {gamma} must lie in (0, 1]")));
    }
    if tokens.is_empty() {
        return Err(invalid("cannot sample from an empty token set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let k = sample_size(gamma, tokens.len());
    let mut idx = sample(&mut rng, tokens.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| tokens[i]).collect())
}

/// Per-layer activation tables for `tokens`, laid out as `[layer][token][neuron]`.
pub fn activation_tables(model: &TransformerModel, tokens: &[TokenId], layers: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    let per_token: Vec<Vec<Vec<f64>>> = tokens
        .par_iter()
        .map(|&t| gated_activations(model, t, layers))
        .collect::<Result<_>>()?;
    Ok((0..layers.len())
        .map(|li| per_token.iter().map(|acts| acts[li].clone()).collect())
        .collect())
}

pub fn profile_normal(
    model: &TransformerModel,
    normal: &[TokenId],
    gamma: f64,
    m: f64,
    key_layers: &KeyLayerSet,
    rng_seed: u64,
) -> Result<NeuronProfile> {
    if normal.len() < MIN_NORMAL_TOKENS {
        return Err(invalid(format!(
            "profiling needs at least {MIN_NORMAL_TOKENS} normal tokens, got {}",
            normal.len()
        )));
    }
    if !m.is_finite() {
        return Err(invalid("threshold m must be finite"));
    }
    key_layers.validate(model.config().n_layers)?;
    let ids = sample_tokens(normal, gamma, rng_seed)?;
    let tables = activation_tables(model, &ids, key_layers.layers())?;
    profile_from_tables(key_layers.layers(), &tables, m, DEFAULT_UP_QUOTA, ids)
}

/// Linear maps from activation gaps to factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairCoefficients {
    pub k1: f64,
    pub b1: f64,
    pub k2: f64,
    pub b2: f64,
}

impl Default for RepairCoefficients {
    fn default() -> Self {
        Self { k1: 1.0, b1: 0.0, k2: 1.0, b2: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentFactors {
    /// Added to up-set neurons.
    pub beta: f64,
    /// Divides down-set neurons.
    pub alpha: f64,
    /// Mean normal-minus-glitch gap over the up set, if non-empty.
    pub delta_up: Option<f64>,
    /// Mean glitch-over-normal ratio over the down set, if non-empty.
    pub delta_down: Option<f64>,
    pub coefficients: Option<RepairCoefficients>,
}

impl AdjustmentFactors {
    /// Fixed factors that bypass the gap statistics.
    pub fn fixed(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) || !beta.is_finite() {
            return Err(invalid(format!("alpha must be positive and beta finite, got {alpha}, {beta}")));
        }
        Ok(Self { beta, alpha, delta_up: None, delta_down: None, coefficients: None })
    }

    pub fn identity() -> Self {
        Self { beta: 0.0, alpha: 1.0, delta_up: None, delta_down: None, coefficients: None }
    }

    pub fn rule_based() -> Self {
        Self { beta: RULE_BASED_BETA, alpha: RULE_BASED_ALPHA, delta_up: None, delta_down: None, coefficients: None }
    }
}

/// Derives α and β from glitch activations laid out as
/// `[layer][token][neuron]`, layers in profile order. Gaps are pooled over
/// every key layer.
pub fn compute_adjustments(
    profile: &NeuronProfile,
    glitch_tables: &[Vec<Vec<f64>>],
    coefficients: RepairCoefficients,
) -> Result<AdjustmentFactors> {
    if glitch_tables.len() != profile.layers.len() {
        return Err(invalid("one glitch activation table per profiled layer is required"));
    }
    if glitch_tables.iter().any(Vec::is_empty) {
        return Err(invalid("glitch sample is empty"));
    }
    if profile.is_degenerate() {
        return Err(invalid("profile has neither up nor down neurons"));
    }
    let mut up_gaps = Vec::new();
    let mut down_ratios = Vec::new();
    for (lp, table) in profile.layers.iter().zip(glitch_tables) {
        if table.iter().any(|r| r.len() != lp.normal_mean.len()) {
            return Err(invalid(format!("glitch activations for layer {} have the wrong width", lp.layer)));
        }
        let glitch_mean = column_means(table);
        up_gaps.extend(lp.up_set.iter().map(|&i| lp.normal_mean[i] - glitch_mean[i]));
        down_ratios.extend(lp.down_set.iter().map(|&i| glitch_mean[i] / lp.normal_mean[i].max(RATIO_EPSILON)));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let delta_up = mean(&up_gaps);
    let delta_down = mean(&down_ratios);
    let c = coefficients;
    let beta = delta_up.map_or(0.0, |d| (c.k1 * d + c.b1).clamp(BETA_RANGE.0, BETA_RANGE.1));
    let alpha = delta_down.map_or(1.0, |d| (c.k2 * d + c.b2).clamp(ALPHA_RANGE.0, ALPHA_RANGE.1));
    if !(alpha.is_finite() && beta.is_finite()) {
        return Err(crate::Error::Numeric("adjustment factors are not finite".into()));
    }
    Ok(AdjustmentFactors { beta, alpha, delta_up, delta_down, coefficients: Some(c) })
}

/// Samples the glitch set at rate `gamma` and derives factors from it.
pub fn adapt_factors(
    model: &TransformerModel,
    profile: &NeuronProfile,
    glitch: &[TokenId],
    gamma: f64,
    rng_seed: u64,
    coefficients: RepairCoefficients,
) -> Result<AdjustmentFactors> {
    let ids = sample_tokens(glitch, gamma, rng_seed)?;
    let tables = activation_tables(model, &ids, &profile.key_layers())?;
    compute_adjustments(profile, &tables, coefficients)
}

/// `+β` on the up set and `÷α` on the down set of every profiled layer.
pub struct NeuronPatch<'a> {
    pub profile: &'a NeuronProfile,
    pub factors: AdjustmentFactors,
}

impl ActivationPatch for NeuronPatch<'_> {
    fn patch(&self, layer: usize, gated: &mut [f32]) {
        let Some(lp) = self.profile.layers.iter().find(|l| l.layer == layer) else {
            return;
        };
        if self.factors.beta != 0.0 {
            let beta = self.factors.beta as f32;
            for &i in &lp.up_set {
                gated[i] += beta;
            }
        }
        if self.factors.alpha != 1.0 {
            let alpha = self.factors.alpha as f32;
            for &i in &lp.down_set {
                gated[i] /= alpha;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRepair {
    pub token: TokenId,
    pub before: Vec<TokenId>,
    pub after: Vec<TokenId>,
    pub echoed_before: bool,
    pub repaired: bool,
}

pub fn repair_forward(
    model: &TransformerModel,
    token: TokenId,
    profile: &NeuronProfile,
    factors: AdjustmentFactors,
    echo_budget: usize,
) -> Result<TokenRepair> {
    let prompt = build_repetition_prompt(token, model.template())?;
    let before = greedy_decode(model, &prompt.tokens, echo_budget)?;
    let patch = NeuronPatch { profile, factors };
    let after = decode_patched(model, &prompt.tokens, echo_budget, Some(&patch))?;
    Ok(TokenRepair {
        token,
        echoed_before: echo_matches(token, &before),
        repaired: echo_matches(token, &after),
        before,
        after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub method: String,
    pub total_glitch: usize,
    pub repaired_tokens: usize,
    /// `None` when the glitch set is empty.
    pub repair_rate: Option<f64>,
    pub factors: AdjustmentFactors,
    pub records: Vec<TokenRepair>,
}

pub fn repair_all(
    model: &TransformerModel,
    glitch: &BTreeSet<TokenId>,
    profile: &NeuronProfile,
    factors: AdjustmentFactors,
    echo_budget: usize,
    method: &str,
) -> Result<RepairReport> {
    if !(factors.alpha.is_finite() && factors.alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    let tokens: Vec<TokenId> = glitch.iter().copied().collect();
    let records: Vec<TokenRepair> = tokens
        .par_iter()
        .map(|&t| repair_forward(model, t, profile, factors, echo_budget))
        .collect::<Result<_>>()?;
    let repaired_tokens = records.iter().filter(|r| r.repaired).count();
    let total_glitch = records.len();
    if total_glitch == 0 {
        warn!("glitch set is empty; repair rate is not applicable");
    }
    Ok(RepairReport {
        method: method.to_string(),
        total_glitch,
        repaired_tokens,
        repair_rate: (total_glitch > 0).then(|| repaired_tokens as f64 / total_glitch as f64),
        factors,
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct ProfileHeader {
    version: u32,
    m: f64,
    up_quota: f64,
    sample_ids: Vec<TokenId>,
    layers: Vec<ProfileLayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct ProfileLayerHeader {
    layer: usize,
    up_set: Vec<usize>,
    down_set: Vec<usize>,
}

pub fn save_profile(path: &Path, profile: &NeuronProfile) -> Result<()> {
    let header = ProfileHeader {
        version: 1,
        m: profile.m,
        up_quota: profile.up_quota,
        sample_ids: profile.sample_ids.clone(),
        layers: profile
            .layers
            .iter()
            .map(|l| ProfileLayerHeader { layer: l.layer, up_set: l.up_set.clone(), down_set: l.down_set.clone() })
            .collect(),
    };
    let tensors = profile
        .layers
        .iter()
        .map(|l| Tensor {
            name: format!("layers.{}.normal_mean", l.layer),
            shape: vec![l.normal_mean.len()],
            data: TensorData::F64(l.normal_mean.clone()),
        })
        .collect();
    Container {
        format: PROFILE_FORMAT.into(),
        header: serde_json::to_value(header).map_err(|e| format_err(0, e.to_string()))?,
        tensors,
    }
    .write(path)
}

pub fn load_profile(path: &Path) -> Result<NeuronProfile> {
    let c = Container::read(path, PROFILE_FORMAT)?;
    let header: ProfileHeader =
        serde_json::from_value(c.header.clone()).map_err(|e| format_err(0, format!("profile header: {e}")))?;
    if header.version != 1 {
        return Err(format_err(0, format!("unsupported profile version {}", header.version)));
    }
    let layers = header
        .layers
        .into_iter()
        .map(|l| {
            let name = format!("layers.{}.normal_mean", l.layer);
            let normal_mean = match c.tensor(&name).map(|t| &t.data) {
                Some(TensorData::F64(v)) => v.clone(),
                _ => return Err(format_err(0, format!("missing or mistyped tensor {name}"))),
            };
            if l.up_set.iter().chain(&l.down_set).any(|&i| i >= normal_mean.len()) {
                return Err(format_err(0, format!("neuron index out of range in layer {}", l.layer)));
            }
            Ok(LayerProfile { layer: l.layer, up_set: l.up_set, down_set: l.down_set, normal_mean })
        })
        .collect::<Result<_>>()?;
    Ok(NeuronProfile { layers, m: header.m, up_quota: header.up_quota, sample_ids: header.sample_ids })
}
