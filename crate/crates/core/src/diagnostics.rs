//! Distribution diagnostics: attention histograms, MLP scatter, and
//! per-layer Wasserstein-1 distances between glitch and normal tokens.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{extract_features, ActivationTrace, KeyLayerSet};
use crate::model::{Site, TransformerModel};
use crate::oracle::Label;
use crate::reduce::{pca_fit, pca_transform};
use crate::TokenId;

pub const DEFAULT_BIN_WIDTH: f64 = 0.02;
/// Percentile a layer's distance must exceed to be suggested as a key layer.
pub const KEY_LAYER_PERCENTILE: f64 = 70.0;

/// Empirical 1-D Wasserstein-1 distance by inverse-CDF coupling.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Wasserstein distance needs non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample value".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / a.len() as f64);
    }
    // Walk the merged quantile breakpoints i/n and j/m.
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (a[i] - b[j]).abs() * (next - u);
        u = next;
        // compare in integer arithmetic to avoid drift at shared breakpoints
        let (ca, cb) = ((i + 1) * m, (j + 1) * n);
        if ca <= cb {
            i += 1;
        }
        if cb <= ca {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub population: Label,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins values on `[0, 1]`; a value of exactly 1 lands in the last bin.
    pub fn build(population: Label, values: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(invalid(format!("bin width {bin_width} must lie in (0, 1]")));
        }
        let bins = (1.0 / bin_width).round().max(1.0) as usize;
        let bin_edges: Vec<f64> = (0..=bins).map(|k| k as f64 / bins as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                return Err(invalid(format!("value {v} is outside [0, 1]")));
            }
            let k = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self { population, bin_edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Values of `site` flattened across traces, optionally restricted to one layer.
pub fn pooled_values(traces: &[ActivationTrace], site: Site, layer: Option<usize>) -> Vec<f64> {
    traces
        .iter()
        .flat_map(|t| {
            t.layout
                .iter()
                .filter(move |e| e.site == site && layer.is_none_or(|l| e.layer == l))
                .flat_map(move |e| t.values[e.offset..e.offset + e.length].iter().map(|&v| f64::from(v)))
        })
        .collect()
}

fn has_site(traces: &[ActivationTrace], site: Site) -> bool {
    traces.iter().all(|t| t.layout.iter().any(|e| e.site == site))
}

/// Attention values pooled over every layer and head, one histogram per
/// population.
pub fn attention_histograms(glitch: &[ActivationTrace], normal: &[ActivationTrace], bin_width: f64) -> Result<(Histogram, Histogram)> {
    if !has_site(glitch, Site::AttnPattern) || !has_site(normal, Site::AttnPattern) {
        return Err(invalid("traces lack the attn_pattern site"));
    }
    Ok((
        Histogram::build(Label::Glitch, &pooled_values(glitch, Site::AttnPattern, None), bin_width)?,
        Histogram::build(Label::Normal, &pooled_values(normal, Site::AttnPattern, None), bin_width)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub token: TokenId,
    pub population: Label,
    pub x: f64,
    pub y: f64,
}

/// Two-component PCA of one MLP site, fitted on both populations together.
pub fn mlp_scatter(glitch: &[ActivationTrace], normal: &[ActivationTrace], site: Site) -> Result<Vec<ScatterPoint>> {
    if site == Site::AttnPattern {
        return Err(invalid("scatter needs an MLP site"));
    }
    let rows: Vec<(TokenId, Label, Vec<f64>)> = glitch
        .iter()
        .map(|t| (t, Label::Glitch))
        .chain(normal.iter().map(|t| (t, Label::Normal)))
        .map(|(t, l)| (t.token, l, pooled_values(std::slice::from_ref(t), site, None)))
        .collect();
    if rows.len() < 3 {
        return Err(invalid(format!("scatter needs at least 3 traces, got {}", rows.len())));
    }
    let cols = rows[0].2.len();
    if cols < 2 || rows.iter().any(|r| r.2.len() != cols) {
        return Err(invalid("traces lack a consistent MLP site of width ≥ 2"));
    }
    let x = nalgebra::DMatrix::from_fn(rows.len(), cols, |i, j| rows[i].2[j]);
    let pca = pca_fit(&x, 2)?;
    rows.into_iter()
        .map(|(token, population, v)| {
            let p = pca_transform(&pca, &v)?;
            Ok(ScatterPoint { token, population, x: p[0], y: p[1] })
        })
        .collect()
}

/// Mean distance of a population's points to that population's centroid.
pub fn cluster_spread(points: &[ScatterPoint], population: Label) -> Option<f64> {
    let pts: Vec<&ScatterPoint> = points.iter().filter(|p| p.population == population).collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    Some(pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDistance {
    pub layer: usize,
    pub site: Site,
    pub wasserstein: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistanceProfile {
    pub n_layers: usize,
    pub distances: Vec<LayerDistance>,
}

impl LayerDistanceProfile {
    /// Mean distance over sites for each layer.
    pub fn layer_scores(&self) -> Vec<f64> {
        (0..self.n_layers)
            .map(|l| {
                let d: Vec<f64> = self.distances.iter().filter(|x| x.layer == l).map(|x| x.wasserstein).collect();
                if d.is_empty() {
                    0.0
                } else {
                    d.iter().sum::<f64>() / d.len() as f64
                }
            })
            .collect()
    }
}

/// Distances for every layer and site present in both trace sets.
pub fn layer_profile_from_traces(glitch: &[ActivationTrace], normal: &[ActivationTrace]) -> Result<LayerDistanceProfile> {
    let first = glitch.first().or(normal.first()).ok_or_else(|| invalid("no traces supplied"))?;
    if glitch.is_empty() || normal.is_empty() {
        return Err(invalid("both populations need at least one trace"));
    }
    let layout = first.layout.clone();
    if glitch.iter().chain(normal).any(|t| t.layout != layout) {
        return Err(invalid("traces have differing layouts"));
    }
    let n_layers = layout.iter().map(|e| e.layer + 1).max().unwrap_or(0);
    let distances = layout
        .par_iter()
        .map(|e| {
            Ok(LayerDistance {
                layer: e.layer,
                site: e.site,
                wasserstein: wasserstein_1d(&pooled_values(glitch, e.site, Some(e.layer)), &pooled_values(normal, e.site, Some(e.layer)))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerDistanceProfile { n_layers, distances })
}

/// Traces over every layer and site for each token in `tokens`.
pub fn all_layer_traces(model: &TransformerModel, tokens: &[TokenId]) -> Result<Vec<ActivationTrace>> {
    let layers = KeyLayerSet::explicit((0..model.config().n_layers).collect())?;
    tokens
        .par_iter()
        .map(|&t| extract_features(model, t, &layers, &Site::ALL))
        .collect()
}

pub fn layer_profile(model: &TransformerModel, glitch: &BTreeSet<TokenId>, normal: &BTreeSet<TokenId>) -> Result<LayerDistanceProfile> {
    if glitch.is_empty() || normal.is_empty() {
        return Err(invalid("glitch and normal sets must be non-empty"));
    }
    let g = all_layer_traces(model, &glitch.iter().copied().collect::<Vec<_>>())?;
    let n = all_layer_traces(model, &normal.iter().copied().collect::<Vec<_>>())?;
    layer_profile_from_traces(&g, &n)
}

/// Number of final layers never suggested: three out of every 32, at least one.
pub fn excluded_tail(n_layers: usize) -> usize {
    ((3.0 * n_layers as f64 / 32.0).round() as usize).max(1)
}

/// Linear-interpolated percentile of `values` (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Layers whose score exceeds the percentile cut, both taken over the
/// layers left after excluding the final ones, widened to a contiguous
/// band. Falls back to the best eligible layer when none clears the cut.
pub fn suggest_key_layers(profile: &LayerDistanceProfile) -> Result<KeyLayerSet> {
    let scores = profile.layer_scores();
    let eligible = scores.len().saturating_sub(excluded_tail(scores.len()));
    if eligible == 0 {
        return KeyLayerSet::explicit(vec![0]);
    }
    let cut = percentile(&scores[..eligible], KEY_LAYER_PERCENTILE).unwrap_or(0.0);
    let picked: Vec<usize> = (0..eligible).filter(|&l| scores[l] > cut).collect();
    let (lo, hi) = match (picked.first(), picked.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => {
            let best = (0..eligible).fold(0, |b, l| if scores[l] > scores[b] { l } else { b });
            (best, best)
        }
    };
    KeyLayerSet::explicit((lo..=hi).collect())
}

pub fn write_histogram_csv(path: &Path, hists: &[Histogram]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["population", "bin_start", "bin_end", "count"]).map_err(csv_err)?;
    for h in hists {
        for (k, c) in h.counts.iter().enumerate() {
            w.write_record([
                h.population.to_string(),
                h.bin_edges[k].to_string(),
                h.bin_edges[k + 1].to_string(),
                c.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_scatter_csv(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["token", "population", "x", "y"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.token.to_string(), p.population.to_string(), p.x.to_string(), p.y.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_layer_profile_csv(path: &Path, profile: &LayerDistanceProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["layer", "site", "wasserstein"]).map_err(csv_err)?;
    for d in &profile.distances {
        w.write_record([d.layer.to_string(), d.site.to_string(), d.wasserstein.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => invalid(format!("CSV output: {other:?}")),
    }
}
