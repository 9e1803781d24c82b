use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tasks::ArchSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// One token per weight matrix and one per bias vector.
    LayerByLayer,
    /// Like layer-by-layer, but groups longer than `M` are split greedily.
    Chunked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Weight,
    Bias,
}

/// A contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub layer: usize,
    pub kind: GroupKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub mode: TokenMode,
    /// Chunk bound in chunked mode.
    pub chunk: Option<usize>,
    pub tokens: Vec<TokenSpec>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total parameters covered, `D`.
    pub fn dim(&self) -> usize {
        self.tokens.iter().map(|t| t.len).sum()
    }

    pub fn max_token_len(&self) -> usize {
        self.tokens.iter().map(|t| t.len).max().unwrap_or(0)
    }
}

pub fn build_layout(arch: &ArchSpec, mode: TokenMode, chunk: usize) -> Result<TokenLayout> {
    if mode == TokenMode::Chunked && chunk == 0 {
        return Err(invalid("chunk size M must be ≥ 1"));
    }
    let mut tokens = Vec::new();
    for (layer, off) in arch.offsets().into_iter().enumerate() {
        let groups = std::iter::once((GroupKind::Weight, off.weight)).chain(off.bias.map(|b| (GroupKind::Bias, b)));
        for (kind, range) in groups {
            let step = match mode {
                TokenMode::LayerByLayer => range.len(),
                TokenMode::Chunked => chunk,
            };
            let mut start = range.start;
            while start < range.end {
                let len = step.min(range.end - start);
                tokens.push(TokenSpec {
                    layer,
                    kind,
                    offset: start,
                    len,
                });
                start += len;
            }
        }
    }
    Ok(TokenLayout {
        mode,
        chunk: (mode == TokenMode::Chunked).then_some(chunk),
        tokens,
    })
}

/// Splits θ into token vectors in layout order.
pub fn tokenize(layout: &TokenLayout, theta: &[f32]) -> Result<Vec<Vec<f32>>> {
    if theta.len() != layout.dim() {
        return Err(shape("tokenize", format!("θ has {} values, layout covers {}", theta.len(), layout.dim())));
    }
    Ok(layout
        .tokens
        .iter()
        .map(|t| theta[t.offset..t.offset + t.len].to_vec())
        .collect())
}

pub fn detokenize(layout: &TokenLayout, tokens: &[Vec<f32>]) -> Result<Vec<f32>> {
    if tokens.len() != layout.len() {
        return Err(shape("detokenize", "token count does not match layout"));
    }
    let mut theta = vec![0.0; layout.dim()];
    for (spec, tok) in layout.tokens.iter().zip(tokens) {
        if tok.len() != spec.len {
            return Err(shape("detokenize", "token length does not match layout"));
        }
        theta[spec.offset..spec.offset + spec.len].copy_from_slice(tok);
    }
    Ok(theta)
}
