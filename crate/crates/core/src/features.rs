//! Hooked feature extraction and the portable `glitchlab-trace/1` format.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::ByteReader;
use crate::error::{format_err, invalid, Result};
use crate::model::{HookPoint, ModelConfig, Site, TransformerModel};
use crate::oracle::{build_repetition_prompt, Label};
use crate::TokenId;

pub const TRACE_FORMAT: &str = "glitchlab-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Explicit,
    DownstreamBand,
}

/// Sorted, non-empty set of layers to hook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLayerSet {
    layers: Vec<usize>,
    selection_rule: SelectionRule,
}

impl KeyLayerSet {
    pub fn explicit(mut layers: Vec<usize>) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(invalid("key layer set is empty"));
        }
        Ok(Self {
            layers,
            selection_rule: SelectionRule::Explicit,
        })
    }

    /// Downstream band: every layer after the first, stopping short of the
    /// final layer when the model has more than two.
    pub fn downstream_band(n_layers: usize) -> Result<Self> {
        let layers: Vec<usize> = match n_layers {
            0 => Vec::new(),
            1 => vec![0],
            2 => vec![1],
            n => (1..n - 1).collect(),
        };
        if layers.is_empty() {
            return Err(invalid("model has no layers"));
        }
        Ok(Self {
            layers,
            selection_rule: SelectionRule::DownstreamBand,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn selection_rule(&self) -> SelectionRule {
        self.selection_rule
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("key layer set is empty"));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(invalid(format!("key layer {l} out of range for {n_layers} layers")));
        }
        Ok(())
    }
}

/// Deduplicated sites in canonical order (attn_pattern, mlp_gate, mlp_data).
pub fn normalize_sites(sites: &[Site]) -> Result<Vec<Site>> {
    let mut s = sites.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(invalid("feature site set is empty"));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub site: Site,
    pub offset: usize,
    pub length: usize,
}

/// Site length at a given prompt length.
pub fn site_len(config: &ModelConfig, prompt_len: usize, site: Site) -> usize {
    match site {
        Site::AttnPattern => prompt_len * config.n_heads,
        Site::MlpGate | Site::MlpData => config.d_gated(),
    }
}

/// Layer-major, then site order.
pub fn site_layout(config: &ModelConfig, prompt_len: usize, key_layers: &KeyLayerSet, sites: &[Site]) -> Result<Vec<LayoutEntry>> {
    key_layers.validate(config.n_layers)?;
    let sites = normalize_sites(sites)?;
    let mut offset = 0;
    let mut out = Vec::new();
    for &layer in key_layers.layers() {
        for &site in &sites {
            let length = site_len(config, prompt_len, site);
            out.push(LayoutEntry { layer, site, offset, length });
            offset += length;
        }
    }
    Ok(out)
}

fn layout_width(layout: &[LayoutEntry]) -> usize {
    layout.last().map_or(0, |e| e.offset + e.length)
}

fn check_layout(layout: &[LayoutEntry]) -> std::result::Result<(), String> {
    let mut next = 0;
    for e in layout {
        if e.offset != next {
            return Err(format!("layout entry {}:{} starts at {} instead of {next}", e.layer, e.site, e.offset));
        }
        next += e.length;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub token: TokenId,
    pub label: Option<Label>,
    pub layout: Vec<LayoutEntry>,
    pub values: Vec<f32>,
}

impl ActivationTrace {
    pub fn site(&self, layer: usize, site: Site) -> Option<&[f32]> {
        self.layout
            .iter()
            .find(|e| e.layer == layer && e.site == site)
            .map(|e| &self.values[e.offset..e.offset + e.length])
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }
}

/// Captures the requested sites at the last prompt position of the token's
/// repetition prompt.
pub fn extract_features(model: &TransformerModel, token: TokenId, key_layers: &KeyLayerSet, sites: &[Site]) -> Result<ActivationTrace> {
    let prompt = build_repetition_prompt(token, model.template())?;
    let layout = site_layout(model.config(), prompt.tokens.len(), key_layers, sites)?;
    let hooks: Vec<HookPoint> = layout.iter().map(|e| HookPoint::new(e.layer, e.site)).collect();
    let out = model.forward(&prompt.tokens, &hooks)?;
    let mut values = Vec::with_capacity(layout_width(&layout));
    for (entry, cap) in layout.iter().zip(&out.captures) {
        debug_assert_eq!((entry.layer, entry.site), (cap.layer, cap.site));
        if cap.values.len() != entry.length {
            return Err(invalid("capture length does not match layout"));
        }
        values.extend_from_slice(&cap.values);
    }
    Ok(ActivationTrace {
        token,
        label: None,
        layout,
        values,
    })
}

/// Dense `rows × cols` feature matrix, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    tokens: Vec<TokenId>,
    layout: Vec<LayoutEntry>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

pub fn assemble_matrix(traces: &[ActivationTrace]) -> Result<FeatureMatrix> {
    let first = traces.first().ok_or_else(|| invalid("no traces to assemble"))?;
    let cols = first.width();
    let mut data = Vec::with_capacity(traces.len() * cols);
    for t in traces {
        if t.layout != first.layout || t.width() != cols {
            return Err(invalid(format!("trace for token {} has a different layout", t.token)));
        }
        data.extend(t.values.iter().map(|&v| f64::from(v)));
    }
    Ok(FeatureMatrix {
        rows: traces.len(),
        cols,
        data,
        tokens: traces.iter().map(|t| t.token).collect(),
        layout: first.layout.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub vocab_size: usize,
    pub layout: Vec<LayoutEntry>,
    pub traces: Vec<ActivationTrace>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    version: String,
    vocab_size: usize,
    has_labels: bool,
    width: usize,
    record_count: usize,
    layout: Vec<LayoutEntry>,
}

const LABEL_NORMAL: u8 = 0;
const LABEL_GLITCH: u8 = 1;
const LABEL_UNKNOWN: u8 = 2;

/// Path of the plain-text layout descriptor written next to a trace file.
pub fn layout_descriptor_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".layout.txt");
    PathBuf::from(s)
}

/// Writes `glitchlab-trace/1`:
///
/// ```text
/// glitchlab-trace/1\n
/// u32 header_len, JSON header {version, vocab_size, has_labels, width, record_count, layout}
/// record_count × { u32 token, [u8 label: 0 normal, 1 glitch, 2 unknown], width × f32 }
/// ```
///
/// All integers and floats are little-endian; the label byte is present only
/// when `has_labels` is true.
pub fn write_traces(path: &Path, vocab_size: usize, traces: &[ActivationTrace]) -> Result<()> {
    let layout = traces.first().map(|t| t.layout.clone()).unwrap_or_default();
    let width = layout_width(&layout);
    for t in traces {
        if t.layout != layout || t.values.len() != width {
            return Err(invalid(format!("trace for token {} has a different layout", t.token)));
        }
        if t.token as usize >= vocab_size {
            return Err(invalid(format!("token {} out of range", t.token)));
        }
    }
    let has_labels = traces.iter().any(|t| t.label.is_some());
    let header = TraceHeader {
        version: TRACE_FORMAT.to_string(),
        vocab_size,
        has_labels,
        width,
        record_count: traces.len(),
        layout: layout.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(std::io::Error::from)?;
    let mut out = Vec::with_capacity(header.len() + traces.len() * (5 + 4 * width) + 32);
    out.extend_from_slice(TRACE_FORMAT.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in traces {
        out.extend_from_slice(&t.token.to_le_bytes());
        if has_labels {
            out.push(match t.label {
                Some(Label::Normal) => LABEL_NORMAL,
                Some(Label::Glitch) => LABEL_GLITCH,
                None => LABEL_UNKNOWN,
            });
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    f.flush()?;
    std::fs::write(layout_descriptor_path(path), layout_descriptor(&layout))?;
    Ok(())
}

pub fn layout_descriptor(layout: &[LayoutEntry]) -> String {
    let mut s = format!("# {TRACE_FORMAT} layout\n# layer site offset length\n");
    for e in layout {
        let _ = writeln!(s, "{} {} {} {}", e.layer, e.site, e.offset, e.length);
    }
    s
}

pub fn read_traces(path: &Path) -> Result<TraceFile> {
    decode_traces(&std::fs::read(path)?)
}

pub fn decode_traces(bytes: &[u8]) -> Result<TraceFile> {
    let magic = format!("{TRACE_FORMAT}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        let shown: String = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).chars().take_while(|&c| c != '\n').collect();
        return Err(format_err(0, format!("expected '{TRACE_FORMAT}', found '{shown}'")));
    }
    let mut r = ByteReader::new(bytes);
    r.pos = magic.len();
    let header_len = r.u32()? as usize;
    let at = r.pos as u64;
    let header: TraceHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| format_err(at, format!("bad trace header: {e}")))?;
    if header.version != TRACE_FORMAT {
        return Err(format_err(at, format!("unsupported trace version '{}'", header.version)));
    }
    check_layout(&header.layout).map_err(|m| format_err(at, m))?;
    if layout_width(&header.layout) != header.width {
        return Err(format_err(at, format!("layout covers {} values, header width is {}", layout_width(&header.layout), header.width)));
    }
    let mut traces = Vec::with_capacity(header.record_count.min(1 << 20));
    for _ in 0..header.record_count {
        let at = r.pos as u64;
        let token = r.u32()?;
        if token as usize >= header.vocab_size {
            return Err(format_err(at, format!("token {token} out of range for vocab {}", header.vocab_size)));
        }
        let label = if header.has_labels {
            match r.u8()? {
                LABEL_NORMAL => Some(Label::Normal),
                LABEL_GLITCH => Some(Label::Glitch),
                LABEL_UNKNOWN => None,
                other => return Err(format_err(at + 4, format!("bad label byte {other}"))),
            }
        } else {
            None
        };
        let values = r
            .take(header.width * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        traces.push(ActivationTrace {
            token,
            label,
            layout: header.layout.clone(),
            values,
        });
    }
    if r.remaining() != 0 {
        return Err(format_err(r.pos as u64, format!("{} trailing bytes after last record", r.remaining())));
    }
    Ok(TraceFile {
        vocab_size: header.vocab_size,
        layout: header.layout,
        traces,
    })
}
