//! Repetition-task oracle: quote a token, decode greedily, check the echo.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::model::{greedy_decode, TransformerModel};
use crate::TokenId;

/// Echo budget used when none is configured.
pub const DEFAULT_ECHO_BUDGET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Glitch,
    Normal,
}

impl Label {
    pub fn is_glitch(self) -> bool {
        self == Label::Glitch
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Glitch => "glitch",
            Label::Normal => "normal",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateItem {
    Token(TokenId),
    Slot,
}

/// Prompt skeleton with a single slot for the quoted token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub items: Vec<TemplateItem>,
}

impl PromptTemplate {
    pub fn new(items: Vec<TemplateItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Position of the single slot.
    pub fn slot_position(&self) -> Result<usize> {
        let mut slots = self
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| matches!(it, TemplateItem::Slot))
            .map(|(i, _)| i);
        match (slots.next(), slots.next()) {
            (Some(i), None) => Ok(i),
            (None, _) => Err(invalid("prompt template has no slot")),
            (Some(_), Some(_)) => Err(invalid("prompt template has more than one slot")),
        }
    }

    pub(crate) fn validate(&self, vocab_size: usize) -> Result<()> {
        self.slot_position()?;
        for it in &self.items {
            if let TemplateItem::Token(t) = it {
                if *t as usize >= vocab_size {
                    return Err(invalid(format!("template token {t} out of range")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepetitionPrompt {
    pub tokens: Vec<TokenId>,
    pub slot: usize,
}

pub fn build_repetition_prompt(token: TokenId, template: &PromptTemplate) -> Result<RepetitionPrompt> {
    let slot = template.slot_position()?;
    let tokens = template
        .items
        .iter()
        .map(|it| match it {
            TemplateItem::Token(t) => *t,
            TemplateItem::Slot => token,
        })
        .collect();
    Ok(RepetitionPrompt { tokens, slot })
}

/// Containment rule: the echo passes if the quoted id appears anywhere in it.
pub fn echo_matches(token: TokenId, echoed: &[TokenId]) -> bool {
    echoed.contains(&token)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub token: TokenId,
    pub label: Label,
    pub echoed: Vec<TokenId>,
    pub prompt_len: usize,
}

pub fn classify_token(model: &TransformerModel, token: TokenId, max_new_tokens: usize) -> Result<OracleVerdict> {
    if token as usize >= model.config().vocab_size {
        return Err(invalid(format!("token id {token} out of range")));
    }
    let prompt = build_repetition_prompt(token, model.template())?;
    let echoed = greedy_decode(model, &prompt.tokens, max_new_tokens)?;
    let label = if echo_matches(token, &echoed) {
        Label::Normal
    } else {
        Label::Glitch
    };
    Ok(OracleVerdict {
        token,
        label,
        echoed,
        prompt_len: prompt.tokens.len(),
    })
}

/// Oracle bound to a model that counts how often it was consulted.
pub struct Oracle<'m> {
    model: &'m TransformerModel,
    echo_budget: usize,
    calls: AtomicUsize,
}

impl<'m> Oracle<'m> {
    pub fn new(model: &'m TransformerModel, echo_budget: usize) -> Self {
        Self {
            model,
            echo_budget,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn model(&self) -> &'m TransformerModel {
        self.model
    }

    pub fn echo_budget(&self) -> usize {
        self.echo_budget
    }

    pub fn classify(&self, token: TokenId) -> Result<OracleVerdict> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        classify_token(self.model, token, self.echo_budget)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// One JSON object per line: `{"token":..,"label":..,"echoed":[..],"prompt_len":..}`.
pub fn write_verdicts(path: &Path, verdicts: &[OracleVerdict]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in verdicts {
        serde_json::to_writer(&mut w, v).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_verdicts(path: &Path) -> Result<Vec<OracleVerdict>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let v = serde_json::from_str(&line).map_err(|e| format_err(offset, format!("bad verdict record: {e}")))?;
            out.push(v);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
