//! Hookable decoder-only transformer.
//!
//! Each layer is `x += Attn(x); x += MLP(x)` with no normalization. The MLP
//! is gated: `Z = xU`, split into halves `Z₁ | Z₂`, `Z̃ = σ(Z₁) ⊙ Z₂`,
//! output `Z̃W`. Hook points expose the attention row, `σ(Z₁)` and `Z₂` of
//! any layer; an [`ActivationPatch`] may rewrite `Z̃` before the
//! down-projection.

mod io;
mod ops;
mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use io::{load_model, save_model, MODEL_FORMAT};
pub use ops::{attention_scores, mlp_block, mlp_hidden, softmax_prefix, Activation, MlpOutput, MlpRow};
pub use synth::{synth_copy_model, SynthParams, SynthLayout, RESERVED_TOKENS};

use crate::error::{invalid, Error, Result};
use crate::oracle::PromptTemplate;
use crate::tensor::Matrix;
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_mlp: 128,
            vocab_size: 512,
            activation: Activation::Sigmoid,
            rng_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_mlp.is_multiple_of(2) {
            return Err(invalid(format!("d_mlp {} must be even", self.d_mlp)));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of gated neurons per layer (`d_mlp / 2`).
    pub fn d_gated(&self) -> usize {
        self.d_mlp / 2
    }
}

/// Where a hook reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    AttnPattern,
    MlpGate,
    MlpData,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::AttnPattern, Site::MlpGate, Site::MlpData];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::AttnPattern => "attn_pattern",
            Site::MlpGate => "mlp_gate",
            Site::MlpData => "mlp_data",
        }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_pattern" => Ok(Site::AttnPattern),
            "mlp_gate" => Ok(Site::MlpGate),
            "mlp_data" => Ok(Site::MlpData),
            other => Err(invalid(format!("unknown site '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
}

impl HookPoint {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }
}

/// Values recorded at one hook point for a single sequence position.
///
/// `attn_pattern` holds one row per head, concatenated head-major, each of
/// length `position + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookCapture {
    pub layer: usize,
    pub site: Site,
    pub values: Vec<f32>,
}

/// Rewrites the gated MLP activation `Z̃` of a layer in place.
pub trait ActivationPatch: Sync {
    fn patch(&self, layer: usize, gated: &mut [f32]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// Up-projection `U`, `d_model × d_mlp`.
    pub up: Matrix,
    /// Down-projection `W`, `d_mlp/2 × d_model`.
    pub down: Matrix,
}

impl LayerWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            up: Matrix::zeros(d, config.d_mlp),
            down: Matrix::zeros(config.d_gated(), d),
        }
    }

    fn named(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("up", &self.up),
            ("down", &self.down),
        ]
    }
}

/// Token metadata carried alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    /// Optional human-readable string per token id.
    pub display: Vec<String>,
    pub eos: Option<TokenId>,
    pub template: PromptTemplate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    layers: Vec<LayerWeights>,
    unembedding: Matrix,
    vocab: Vocabulary,
    planted: Option<BTreeSet<TokenId>>,
}

impl TransformerModel {
    pub fn new(
        config: ModelConfig,
        token_embedding: Matrix,
        position_embedding: Matrix,
        layers: Vec<LayerWeights>,
        unembedding: Matrix,
        vocab: Vocabulary,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let check = |name: &str, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(invalid(format!("{name}: shape {:?}, expected {shape:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("{name}: non-finite weights")));
            }
            Ok(())
        };
        check("token_embedding", &token_embedding, (v, d))?;
        check("position_embedding", &position_embedding, (position_embedding.rows(), d))?;
        check("unembedding", &unembedding, (d, v))?;
        if layers.len() != config.n_layers {
            return Err(invalid(format!(
                "{} layers supplied, config says {}",
                layers.len(),
                config.n_layers
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            check(&format!("layer{i}.wq"), &l.wq, (d, d))?;
            check(&format!("layer{i}.wk"), &l.wk, (d, d))?;
            check(&format!("layer{i}.wv"), &l.wv, (d, d))?;
            check(&format!("layer{i}.wo"), &l.wo, (d, d))?;
            check(&format!("layer{i}.up"), &l.up, (d, config.d_mlp))?;
            check(&format!("layer{i}.down"), &l.down, (config.d_gated(), d))?;
        }
        if !vocab.display.is_empty() && vocab.display.len() != v {
            return Err(invalid("display string count must match vocab_size"));
        }
        if let Some(eos) = vocab.eos {
            if eos as usize >= v {
                return Err(invalid("eos id out of range"));
            }
        }
        vocab.template.validate(v)?;
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
            vocab,
            planted: None,
        })
    }

    pub fn with_planted(mut self, planted: BTreeSet<TokenId>) -> Result<Self> {
        if let Some(&t) = planted.iter().next_back() {
            if t as usize >= self.config.vocab_size {
                return Err(invalid(format!("planted token {t} out of range")));
            }
        }
        self.planted = Some(planted);
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.vocab.template
    }

    pub fn planted_glitch_set(&self) -> Option<&BTreeSet<TokenId>> {
        self.planted.as_ref()
    }

    pub fn token_embedding(&self) -> &Matrix {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Matrix {
        &self.position_embedding
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    /// Copy of the model with one embedding row replaced.
    pub fn with_embedding_row(&self, token: TokenId, row: &[f32]) -> Result<Self> {
        self.check_token(token)?;
        if row.len() != self.config.d_model || row.iter().any(|v| !v.is_finite()) {
            return Err(invalid("replacement row must be finite with length d_model"));
        }
        let mut out = self.clone();
        out.token_embedding.row_mut(token as usize).copy_from_slice(row);
        Ok(out)
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in l.named() {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(invalid(format!(
                "token id {token} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder::new(self)
    }

    /// Runs the whole sequence and returns per-position logits plus the
    /// requested captures taken at the last position.
    pub fn forward(&self, tokens: &[TokenId], sites: &[HookPoint]) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        let requested: BTreeSet<HookPoint> = sites.iter().copied().collect();
        for h in &requested {
            if h.layer >= self.config.n_layers {
                return Err(invalid(format!("hook layer {} out of range", h.layer)));
            }
        }
        let requested: Vec<HookPoint> = requested.into_iter().collect();
        let mut dec = self.decoder();
        let mut logits = Matrix::zeros(tokens.len(), self.config.vocab_size);
        let mut captures = Vec::new();
        for (pos, &tok) in tokens.iter().enumerate() {
            let last = pos + 1 == tokens.len();
            let step = dec.step(tok, if last { &requested } else { &[] }, None)?;
            logits.row_mut(pos).copy_from_slice(&step.logits);
            if last {
                captures = step.captures;
            }
        }
        Ok(ForwardOutput { logits, captures })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `n × vocab_size`.
    pub logits: Matrix,
    pub captures: Vec<HookCapture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    pub captures: Vec<HookCapture>,
}

/// Incremental decoder holding per-layer key/value caches.
pub struct Decoder<'m> {
    model: &'m TransformerModel,
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    position: usize,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m TransformerModel) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            position: 0,
        }
    }

    /// Number of positions processed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Appends `token` and returns its next-token logits. `capture` must be
    /// sorted; `patch`, when given, rewrites `Z̃` at every layer for this
    /// position.
    pub fn step(
        &mut self,
        token: TokenId,
        capture: &[HookPoint],
        patch: Option<&dyn ActivationPatch>,
    ) -> Result<StepOutput> {
        let model = self.model;
        model.check_token(token)?;
        let cfg = &model.config;
        let pos = self.position;
        let d_head = cfg.d_head();
        let scale = 1.0 / (d_head as f64).sqrt();

        let mut x = model.token_embedding.row(token as usize).to_vec();
        if pos < model.position_embedding.rows() {
            for (a, b) in x.iter_mut().zip(model.position_embedding.row(pos)) {
                *a += b;
            }
        }

        let mut captures = Vec::with_capacity(capture.len());
        let wants = |layer: usize, site: Site| capture.iter().any(|h| h.layer == layer && h.site == site);

        for (li, layer) in model.layers.iter().enumerate() {
            let q = layer.wq.vec_mul(&x);
            self.keys[li].push(layer.wk.vec_mul(&x));
            self.values[li].push(layer.wv.vec_mul(&x));
            let keys = &self.keys[li];
            let values = &self.values[li];

            let mut mixed = vec![0.0f32; cfg.d_model];
            let mut pattern = Vec::new();
            let keep_pattern = wants(li, Site::AttnPattern);
            let mut row = vec![0.0f32; pos + 1];
            for h in 0..cfg.n_heads {
                let span = h * d_head..(h + 1) * d_head;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = (ops::dot(&q[span.clone()], &keys[j][span.clone()]) * scale) as f32;
                }
                softmax_prefix(&mut row, pos + 1);
                for c in span.clone() {
                    let acc: f64 = row
                        .iter()
                        .zip(values.iter())
                        .map(|(&a, v)| f64::from(a) * f64::from(v[c]))
                        .sum();
                    mixed[c] = acc as f32;
                }
                if keep_pattern {
                    pattern.extend_from_slice(&row);
                }
            }
            if keep_pattern {
                captures.push(HookCapture {
                    layer: li,
                    site: Site::AttnPattern,
                    values: pattern,
                });
            }
            for (a, b) in x.iter_mut().zip(layer.wo.vec_mul(&mixed)) {
                *a += b;
            }

            let mut hidden = mlp_hidden(&x, &layer.up, cfg.activation);
            if wants(li, Site::MlpGate) {
                captures.push(HookCapture {
                    layer: li,
                    site: Site::MlpGate,
                    values: hidden.gate.clone(),
                });
            }
            if wants(li, Site::MlpData) {
                captures.push(HookCapture {
                    layer: li,
                    site: Site::MlpData,
                    values: hidden.data.clone(),
                });
            }
            if let Some(p) = patch {
                p.patch(li, &mut hidden.gated);
            }
            for (a, b) in x.iter_mut().zip(layer.down.vec_mul(&hidden.gated)) {
                *a += b;
            }
        }

        let logits = model.unembedding.vec_mul(&x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits at position {pos}")));
        }
        self.position += 1;
        Ok(StepOutput { logits, captures })
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Temperature-0 decoding. Returns only the newly generated tokens.
pub fn greedy_decode(model: &TransformerModel, prompt: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>> {
    decode_patched(model, prompt, max_new_tokens, None)
}

/// Greedy decoding with `patch` applied at the last prompt position and at
/// every generated position.
pub fn decode_patched(
    model: &TransformerModel,
    prompt: &[TokenId],
    max_new_tokens: usize,
    patch: Option<&dyn ActivationPatch>,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(invalid("empty prompt"));
    }
    if max_new_tokens == 0 {
        return Err(invalid("max_new_tokens must be at least 1"));
    }
    let mut dec = model.decoder();
    let mut logits = Vec::new();
    for (i, &t) in prompt.iter().enumerate() {
        let p = if i + 1 == prompt.len() { patch } else { None };
        logits = dec.step(t, &[], p)?.logits;
    }
    let mut out = Vec::with_capacity(max_new_tokens);
    loop {
        let next = argmax(&logits);
        out.push(next);
        if out.len() == max_new_tokens || model.vocab.eos == Some(next) {
            break;
        }
        logits = dec.step(next, &[], patch)?.logits;
    }
    Ok(out)
}
