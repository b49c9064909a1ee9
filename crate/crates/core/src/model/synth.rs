//! Analytically constructed copy model with planted glitch tokens.
//!
//! Residual stream layout (`d_model = D`, `d_head = D / n_heads`):
//!
//! ```text
//! [0, d_id)                 token identity (read by the unembedding)
//! [d_id, content)           token features (read by the noise neurons)
//! [content, D-2)            scratch (written by filler heads and neurons)
//! D-2                       slot flag (positional)
//! D-1                       constant 1 carried by every token embedding
//! ```
//!
//! with `content = (n_heads - 1) · d_head`. In layer 0 the first
//! `n_heads - 1` heads attend from every position to the template slot and
//! copy its content block, so the unembedding sees the quoted token's
//! identity and the echo succeeds. Layers in the downstream band carry
//! "noise" neurons that rectify the copied feature block and write toward a
//! few attractor tokens; normal tokens have tiny features and never trip
//! them. Planted tokens get their content block replaced by a blend of
//! random vectors with a large feature part, which derails the echo toward
//! an attractor.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelConfig, TransformerModel, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::oracle::{classify_token, Label, PromptTemplate, TemplateItem, DEFAULT_ECHO_BUDGET};
use crate::stopwords::STOPWORDS;
use crate::tensor::Matrix;
use crate::TokenId;

/// `<s>`, `</s>`, `Repeat`, `"`.
pub const RESERVED_TOKENS: usize = 4;
const BOS: TokenId = 0;
const EOS: TokenId = 1;
const REPEAT: TokenId = 2;
const QUOTE: TokenId = 3;

const COPY_GAIN: f32 = 5.0;
const FEATURE_COPY_GAIN: f32 = 1.0;
const SLOT_LOGIT: f32 = 24.0;
const NORMAL_FEATURE_NORM: f32 = 0.15;
const NOISE_GATE_GAIN: f32 = 4.0;
const NOISE_DATA_GAIN: f32 = 2.0;
const NOISE_WRITE: f32 = 0.5;
const FILLER_QK_STD: f32 = 0.35;
const FILLER_V_STD: f32 = 0.3;
const FILLER_O_STD: f32 = 0.1;
const MAX_REDRAWS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_glitch: usize,
    /// Base norm of a planted token's random feature vector; each planted
    /// token draws a norm in `[scale, 3·scale)`.
    pub corruption_scale: f32,
    /// Echo budget used for the build-time verification scan.
    pub echo_budget: usize,
    /// Number of tokens that glitching echoes collapse onto.
    pub n_attractors: usize,
    /// Weight of a feature direction shared by all planted tokens, relative
    /// to each token's own random direction. Zero makes planted features
    /// independent.
    pub cohesion: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_glitch: 102,
            corruption_scale: 6.0,
            echo_budget: DEFAULT_ECHO_BUDGET,
            n_attractors: 4,
            cohesion: 1.0,
        }
    }
}

/// Residual-stream partition used by [`synth_copy_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthLayout {
    pub identity: Range<usize>,
    pub feature: Range<usize>,
    pub scratch: Range<usize>,
    pub slot_dim: usize,
    pub bias_dim: usize,
    /// Layers holding the noise neurons.
    pub band: Vec<usize>,
}

impl SynthLayout {
    pub fn for_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let dh = config.d_head();
        if config.n_heads < 2 || dh < 4 || config.n_layers < 2 || config.d_gated() < 8 {
            return Err(invalid(
                "copy model needs n_heads >= 2, d_head >= 4, n_layers >= 2 and d_mlp >= 16",
            ));
        }
        let content = (config.n_heads - 1) * dh;
        let d_feat = (content / 4).max(2);
        let last_band = if config.n_layers > 2 { config.n_layers - 2 } else { 1 };
        Ok(Self {
            identity: 0..content - d_feat,
            feature: content - d_feat..content,
            scratch: content..config.d_model - 2,
            slot_dim: config.d_model - 2,
            bias_dim: config.d_model - 1,
            band: (1..=last_band).collect(),
        })
    }

    fn content(&self) -> Range<usize> {
        self.identity.start..self.feature.end
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..n).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn fill_random(m: &mut Matrix, rows: Range<usize>, cols: Range<usize>, std: f32, rng: &mut ChaCha8Rng) {
    for r in rows {
        for c in cols.clone() {
            m.set(r, c, std * gaussian(rng));
        }
    }
}

fn display_strings(vocab_size: usize, planted: &BTreeSet<TokenId>, rng: &mut ChaCha8Rng) -> Vec<String> {
    const SYLLABLES: [&str; 16] = [
        "ka", "lo", "mi", "ren", "tas", "vu", "zel", "dor", "pha", "quin", "sol", "gar", "bex", "nim", "ot", "yul",
    ];
    let mut out = vec!["<s>".to_string(), "</s>".to_string(), "Repeat".to_string(), "\"".to_string()];
    let mut words = STOPWORDS.iter();
    for t in RESERVED_TOKENS..vocab_size {
        if planted.contains(&(t as TokenId)) {
            // glitch-like byte soup
            let len = rng.random_range(6..12);
            let s: String = (0..len)
                .map(|_| {
                    let c = rng.random_range(0..36u32);
                    char::from_digit(c, 36).unwrap()
                })
                .collect();
            out.push(format!("Ġ{s}"));
        } else if let Some(w) = words.next() {
            out.push((*w).to_string());
        } else {
            let n = rng.random_range(1..4);
            let s: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
            out.push(format!("{s}{t}"));
        }
    }
    out.truncate(vocab_size);
    out
}

/// Builds the copy model, plants `params.n_glitch` glitch tokens, and
/// verifies by exhaustive oracle scan that the planted set is exactly the
/// set of tokens the model fails to echo.
pub fn synth_copy_model(config: &ModelConfig, params: &SynthParams) -> Result<TransformerModel> {
    let layout = SynthLayout::for_config(config)?;
    let v = config.vocab_size;
    let d = config.d_model;
    let dh = config.d_head();
    let half = config.d_gated();
    if v <= RESERVED_TOKENS + params.n_attractors {
        return Err(invalid("vocab too small for the reserved template tokens"));
    }
    if params.n_glitch >= v - RESERVED_TOKENS - params.n_attractors {
        return Err(invalid(format!(
            "n_glitch {} leaves no normal tokens (vocab {v})",
            params.n_glitch
        )));
    }
    if params.n_attractors == 0 {
        return Err(invalid("need at least one attractor token"));
    }
    if !(params.corruption_scale.is_finite() && params.corruption_scale > 0.0) {
        return Err(invalid("corruption_scale must be positive"));
    }
    if !(params.cohesion.is_finite() && params.cohesion >= 0.0) {
        return Err(invalid("cohesion must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let id_dim = layout.identity.len();
    let feat_dim = layout.feature.len();

    let identity: Vec<Vec<f32>> = (0..v).map(|_| unit_vector(&mut rng, id_dim)).collect();
    let mut emb = Matrix::zeros(v, d);
    for (t, e) in identity.iter().enumerate() {
        let row = emb.row_mut(t);
        row[layout.identity.clone()].copy_from_slice(e);
        let f = unit_vector(&mut rng, feat_dim);
        for (dst, x) in row[layout.feature.clone()].iter_mut().zip(f) {
            *dst = NORMAL_FEATURE_NORM * x;
        }
        row[layout.bias_dim] = 1.0;
    }

    let template = PromptTemplate::new(vec![
        TemplateItem::Token(BOS),
        TemplateItem::Token(REPEAT),
        TemplateItem::Token(QUOTE),
        TemplateItem::Slot,
        TemplateItem::Token(QUOTE),
    ]);
    let slot = template.slot_position()?;
    let mut pos_emb = Matrix::zeros(template.len(), d);
    pos_emb.set(slot, layout.slot_dim, 1.0);

    let mut unemb = Matrix::zeros(d, v);
    for (t, e) in identity.iter().enumerate() {
        for (i, &x) in e.iter().enumerate() {
            unemb.set(layout.identity.start + i, t, x);
        }
    }

    let attractors: Vec<TokenId> = sample(&mut rng, v - RESERVED_TOKENS, params.n_attractors)
        .into_iter()
        .map(|i| (i + RESERVED_TOKENS) as TokenId)
        .collect();

    let content = layout.content();
    let readable = layout.identity.start..layout.scratch.end;
    let qk = (SLOT_LOGIT * (dh as f32).sqrt()).sqrt();
    let mut layers = Vec::with_capacity(config.n_layers);
    for li in 0..config.n_layers {
        let mut l = LayerWeights::zeros(config);
        let filler_heads = if li == 0 { config.n_heads - 1..config.n_heads } else { 0..config.n_heads };
        if li == 0 {
            for h in 0..config.n_heads - 1 {
                let base = h * dh;
                l.wq.set(layout.bias_dim, base, qk);
                l.wk.set(layout.slot_dim, base, qk);
                for c in base..base + dh {
                    if content.contains(&c) {
                        l.wv.set(c, c, 1.0);
                        let gain = if layout.identity.contains(&c) { COPY_GAIN } else { FEATURE_COPY_GAIN };
                        l.wo.set(c, c, gain);
                    }
                }
            }
        }
        for h in filler_heads {
            let cols = h * dh..(h + 1) * dh;
            fill_random(&mut l.wq, readable.clone(), cols.clone(), FILLER_QK_STD, &mut rng);
            fill_random(&mut l.wk, readable.clone(), cols.clone(), FILLER_QK_STD, &mut rng);
            fill_random(&mut l.wv, readable.clone(), cols.clone(), FILLER_V_STD, &mut rng);
            fill_random(&mut l.wo, cols, layout.scratch.clone(), FILLER_O_STD, &mut rng);
        }

        if layout.band.contains(&li) {
            let pairs = half / 4;
            for k in 0..pairs {
                let u = unit_vector(&mut rng, feat_dim);
                let a = attractors[k % attractors.len()] as usize;
                for (sign, neuron) in [(1.0f32, 2 * k), (-1.0, 2 * k + 1)] {
                    for (i, &x) in u.iter().enumerate() {
                        let r = layout.feature.start + i;
                        l.up.set(r, neuron, sign * NOISE_GATE_GAIN * x);
                        l.up.set(r, half + neuron, sign * NOISE_DATA_GAIN * x);
                    }
                    for (i, &x) in identity[a].iter().enumerate() {
                        l.down.set(neuron, layout.identity.start + i, NOISE_WRITE * x);
                    }
                }
            }
            // always-on background neurons
            for neuron in 2 * pairs..half {
                l.up.set(layout.bias_dim, neuron, 4.0);
                l.up.set(layout.bias_dim, half + neuron, 1.5 + 0.5 * rng.random::<f32>());
                for r in layout.feature.clone() {
                    l.up.set(r, neuron, 0.05 * gaussian(&mut rng));
                    l.up.set(r, half + neuron, 0.05 * gaussian(&mut rng));
                }
                for c in layout.scratch.clone() {
                    l.down.set(neuron, c, 0.1 * gaussian(&mut rng));
                }
            }
        } else if li > 0 {
            fill_random(&mut l.up, readable.clone(), 0..config.d_mlp, 0.2, &mut rng);
            fill_random(&mut l.down, 0..half, layout.scratch.clone(), 0.1, &mut rng);
        }
        layers.push(l);
    }

    let candidates: Vec<TokenId> = (RESERVED_TOKENS..v)
        .map(|t| t as TokenId)
        .filter(|t| !attractors.contains(t))
        .collect();
    let shared = unit_vector(&mut rng, feat_dim);
    let planted: BTreeSet<TokenId> = sample(&mut rng, candidates.len(), params.n_glitch)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let corrupt = |row: &mut [f32], t: TokenId, rng: &mut ChaCha8Rng| {
        let keep: f32 = rng.random();
        let noise = unit_vector(rng, id_dim);
        for (i, dst) in row[layout.identity.clone()].iter_mut().enumerate() {
            *dst = (1.0 - keep) * identity[t as usize][i] + keep * noise[i];
        }
        let norm = params.corruption_scale * (1.0 + 2.0 * rng.random::<f32>());
        let own = unit_vector(rng, feat_dim);
        let mut dir: Vec<f32> = own.iter().zip(&shared).map(|(o, s)| o + params.cohesion * s).collect();
        let len = dir.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        dir.iter_mut().for_each(|x| *x /= len);
        for (dst, x) in row[layout.feature.clone()].iter_mut().zip(dir) {
            *dst = norm * x;
        }
    };
    for &t in &planted {
        corrupt(emb.row_mut(t as usize), t, &mut rng);
    }

    let display = display_strings(v, &planted, &mut rng);
    let vocab = Vocabulary {
        display,
        eos: Some(EOS),
        template,
    };
    let mut model = TransformerModel::new(config.clone(), emb, pos_emb, layers, unemb, vocab)?.with_planted(planted.clone())?;
    // A planted token whose corruption happens to leave the echo intact gets
    // a fresh draw; anything else that disagrees is a construction failure.
    for _ in 0..MAX_REDRAWS {
        let still_echo = match verify_planted(&model, params.echo_budget) {
            Ok(()) => return Ok(model),
            Err(Error::Verification { tokens, .. }) if tokens.iter().all(|t| planted.contains(t)) => tokens,
            Err(e) => return Err(e),
        };
        for t in still_echo {
            corrupt(model.token_embedding.row_mut(t as usize), t, &mut rng);
        }
    }
    verify_planted(&model, params.echo_budget)?;
    Ok(model)
}

fn verify_planted(model: &TransformerModel, echo_budget: usize) -> Result<()> {
    let planted = model.planted_glitch_set().cloned().unwrap_or_default();
    let verdicts: Vec<(TokenId, Label)> = (0..model.config().vocab_size as TokenId)
        .into_par_iter()
        .map(|t| classify_token(model, t, echo_budget).map(|v| (t, v.label)))
        .collect::<Result<_>>()?;
    let bad: Vec<TokenId> = verdicts
        .into_iter()
        .filter(|&(t, label)| label.is_glitch() != planted.contains(&t))
        .map(|(t, _)| t)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification {
            detail: format!("{} tokens disagree with the planted set", bad.len()),
            tokens: bad,
        })
    }
}
