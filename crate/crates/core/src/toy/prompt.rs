use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{normalize, Tensor};
use crate::topology::BlockId;

/// Seeded unit vector identifying a label. Shared by the toy prompt encoder
/// and the stub embedder so that planted signals line up.
pub fn label_signature(seed: u64, label: &str, dim: usize) -> Vec<f32> {
    let mut rng = Rng::for_label(seed, "signature", label);
    loop {
        if let Ok(v) = normalize(&rng.normal_vec(dim, 1.0)) {
            return v;
        }
    }
}

/// Maps a text label to a `tokens × dim` prompt embedding. Every row is the
/// label signature scaled to unit RMS plus a small seeded per-token offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoder {
    pub seed: u64,
    pub tokens: usize,
    pub dim: usize,
}

const TOKEN_JITTER: f64 = 0.5;

impl PromptEncoder {
    pub fn new(seed: u64, tokens: usize, dim: usize) -> Self {
        PromptEncoder { seed, tokens, dim }
    }

    pub fn embed(&self, label: &str) -> Tensor {
        let sig = label_signature(self.seed, label, self.dim);
        let amp = (self.dim as f32).sqrt();
        let mut rng = Rng::for_label(self.seed, "prompt-tokens", label);
        let mut data = Vec::with_capacity(self.tokens * self.dim);
        for _ in 0..self.tokens {
            for s in &sig {
                data.push(s * amp + (rng.normal() * TOKEN_JITTER) as f32);
            }
        }
        Tensor::new(vec![self.tokens, self.dim], data).expect("positive dims")
    }
}

/// Which prompt embedding each block's cross-attention reads.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRouting {
    default: Tensor,
    overrides: BTreeMap<BlockId, Tensor>,
}

impl PromptRouting {
    pub fn new(default: Tensor) -> Self {
        PromptRouting {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, block: BlockId, embedding: Tensor) -> Self {
        self.overrides.insert(block, embedding);
        self
    }

    pub fn default_embedding(&self) -> &Tensor {
        &self.default
    }

    pub fn overrides(&self) -> &BTreeMap<BlockId, Tensor> {
        &self.overrides
    }

    pub fn resolve(&self, block: BlockId) -> &Tensor {
        self.overrides.get(&block).unwrap_or(&self.default)
    }
}

/// Prompt embeddings for `A [c]`, `A [s]` and `A [c] in [s] style`.
#[derive(Debug, Clone)]
pub struct AblationPrompts {
    pub content: Tensor,
    pub style: Tensor,
    pub joint: Tensor,
}

impl AblationPrompts {
    pub fn encode(encoder: &PromptEncoder, content_token: &str, style_token: &str) -> Self {
        AblationPrompts {
            content: encoder.embed(&format!("A {content_token}")),
            style: encoder.embed(&format!("A {style_token}")),
            joint: encoder.embed(&format!("A {content_token} in {style_token} style")),
        }
    }
}

/// Named routing templates for the prompt-injection ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationScheme {
    /// Joint prompt everywhere.
    Joint,
    /// Content prompt into the content block, style prompt everywhere else.
    ContentOverStyle,
    /// Style prompt into the style block, content prompt everywhere else.
    StyleOverContent,
    /// Content prompt into the content block, joint prompt elsewhere.
    ContentOverJoint,
    /// Style prompt into the style block, joint prompt elsewhere.
    StyleOverJoint,
}

impl AblationScheme {
    pub const ALL: [AblationScheme; 5] = [
        AblationScheme::Joint,
        AblationScheme::ContentOverStyle,
        AblationScheme::StyleOverContent,
        AblationScheme::ContentOverJoint,
        AblationScheme::StyleOverJoint,
    ];

    /// Scheme number 1..=5.
    pub fn number(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("listed") + 1
    }

    pub fn routing(self, p: &AblationPrompts, content_block: BlockId, style_block: BlockId) -> PromptRouting {
        match self {
            AblationScheme::Joint => PromptRouting::new(p.joint.clone()),
            AblationScheme::ContentOverStyle => {
                PromptRouting::new(p.style.clone()).with_override(content_block, p.content.clone())
            }
            AblationScheme::StyleOverContent => {
                PromptRouting::new(p.content.clone()).with_override(style_block, p.style.clone())
            }
            AblationScheme::ContentOverJoint => {
                PromptRouting::new(p.joint.clone()).with_override(content_block, p.content.clone())
            }
            AblationScheme::StyleOverJoint => {
                PromptRouting::new(p.joint.clone()).with_override(style_block, p.style.clone())
            }
        }
    }
}

impl fmt::Display for AblationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for AblationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<usize>()
            .ok()
            .and_then(|n| n.checked_sub(1))
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or_else(|| Error::InvalidArgument(format!("routing scheme must be 1..=5, got {s:?}")))
    }
}
