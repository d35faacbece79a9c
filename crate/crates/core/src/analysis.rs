//! Prompt-injection attribution and embedding-similarity evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{cosine_sim, normalize, Tensor};
use crate::topology::BlockId;
use crate::toy::{label_signature, PromptEncoder, PromptRouting, ToyModel};

/// Score above which a planted label counts as detected.
pub const DETECTION_THRESHOLD: f32 = 0.5;

/// Reference style / content scores (mean, std) reported for the original
/// method with DINO ViT-B/8 features. For comparison displays only: the stub
/// embedder cannot reproduce them.
pub const REFERENCE_STYLE_SCORE: (f32, f32) = (0.881, 0.05);
pub const REFERENCE_CONTENT_SCORE: (f32, f32) = (0.790, 0.05);

/// Maps token grids and text labels to unit vectors in a shared space.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, grid: &Tensor) -> Result<Vec<f32>>;
    fn embed_text(&self, label: &str) -> Result<Vec<f32>>;
}

/// Planted-signal embedder.
///
/// Text labels map to seeded unit vectors. An image is mean-pooled over its
/// tokens and compared with each vocabulary label's signature (the direction
/// [`PromptEncoder`] uses for that label); the image embedding is the
/// softmax-weighted mix of the matching text embeddings. A grid produced by
/// copying a label's prompt embedding therefore lands next to that label.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
    token_dim: usize,
    sharpness: f32,
    /// `(label, signature, text embedding)`
    vocabulary: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl StubEmbedder {
    pub const DEFAULT_DIM: usize = 512;
    pub const DEFAULT_SHARPNESS: f32 = 30.0;

    /// `seed` must match the prompt encoder's seed for planted signals to line up.
    pub fn new(seed: u64, token_dim: usize, vocabulary: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut vocab: Vec<String> = vocabulary.into_iter().map(Into::into).collect();
        vocab.sort();
        vocab.dedup();
        let mut stub = StubEmbedder {
            seed,
            dim: Self::DEFAULT_DIM,
            token_dim,
            sharpness: Self::DEFAULT_SHARPNESS,
            vocabulary: Vec::new(),
        };
        stub.vocabulary = vocab
            .into_iter()
            .map(|l| {
                let sig = label_signature(seed, &l, token_dim);
                let text = stub.text_vector(&l);
                (l, sig, text)
            })
            .collect();
        stub
    }

    fn text_vector(&self, label: &str) -> Vec<f32> {
        let mut rng = Rng::for_label(self.seed, "stub-text", label);
        loop {
            if let Ok(v) = normalize(&rng.normal_vec(self.dim, 1.0)) {
                return v;
            }
        }
    }

    /// A grid every token of which is `label`'s signature.
    pub fn plant(&self, label: &str, tokens: usize) -> Tensor {
        let sig = label_signature(self.seed, label, self.token_dim);
        let data = (0..tokens).flat_map(|_| sig.iter().copied()).collect();
        Tensor::new(vec![tokens, self.token_dim], data).expect("positive dims")
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, label: &str) -> Result<Vec<f32>> {
        Ok(match self.vocabulary.iter().find(|(l, _, _)| l == label) {
            Some((_, _, text)) => text.clone(),
            None => self.text_vector(label),
        })
    }

    fn embed_image(&self, grid: &Tensor) -> Result<Vec<f32>> {
        let (t, d) = grid.dims2()?;
        if d != self.token_dim {
            return Err(Error::ShapeMismatch {
                op: "embed_image",
                left: grid.shape().to_vec(),
                right: vec![self.token_dim],
            });
        }
        if self.vocabulary.is_empty() {
            return Err(Error::InvalidArgument("stub embedder has an empty vocabulary".into()));
        }
        let mut pooled = vec![0.0f32; d];
        for row in grid.data().chunks(d) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v / t as f32;
            }
        }
        let logits: Vec<f32> = self
            .vocabulary
            .iter()
            .map(|(_, sig, _)| cosine_sim(&pooled, sig).map(|c| c * self.sharpness).unwrap_or(0.0))
            .collect();
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let weights: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
        let mut mix = vec![0.0f32; self.dim];
        for ((_, _, text), w) in self.vocabulary.iter().zip(&weights) {
            for (m, e) in mix.iter_mut().zip(text) {
                *m += w * e;
            }
        }
        normalize(&mix)
    }
}

/// Lookup-table embedder over precomputed vectors. Images are looked up by
/// [`image_key`].
#[derive(Debug, Clone)]
pub struct LookupEmbedder {
    dim: usize,
    vectors: BTreeMap<String, Vec<f32>>,
}

/// `"image:<sha256 of the grid's F32 bytes>"`.
pub fn image_key(grid: &Tensor) -> String {
    let bytes: Vec<u8> = grid.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("image:{hex}")
}

/// Builds a [`LookupEmbedder`] from a tensor file mapping labels to vectors.
/// Every vector is normalized on load.
pub fn load_embeddings(file: &TensorFile) -> Result<LookupEmbedder> {
    let mut dim = None;
    let mut vectors = BTreeMap::new();
    for entry in file.entries() {
        let t = file.tensor(&entry.name)?;
        let n = t.len();
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(Error::RaggedDimensions {
                    label: entry.name.clone(),
                    got: n,
                    expected: d,
                })
            }
            _ => {}
        }
        vectors.insert(entry.name.clone(), normalize(t.data())?);
    }
    Ok(LookupEmbedder {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

impl LookupEmbedder {
    fn lookup(&self, key: &str) -> Result<Vec<f32>> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingLabel(key.to_string()))
    }
}

impl Embedder for LookupEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, grid: &Tensor) -> Result<Vec<f32>> {
        self.lookup(&image_key(grid))
    }

    fn embed_text(&self, label: &str) -> Result<Vec<f32>> {
        self.lookup(label)
    }
}

/// Cosine similarity between an image embedding and a text embedding.
pub fn clip_score(image: &[f32], text: &[f32]) -> Result<f32> {
    cosine_sim(image, text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f32,
    pub std: f32,
}

impl Stat {
    /// Mean and population standard deviation, accumulated in `f64`.
    pub fn of(values: &[f32]) -> Stat {
        if values.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean: mean as f32,
            std: var.sqrt() as f32,
        }
    }
}

/// Object and style label lists used to build probe prompts.
#[derive(Debug, Clone, Deserialize)]
pub struct LabelLists {
    pub objects: Vec<String>,
    pub styles: Vec<String>,
}

impl LabelLists {
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../data/labels.json")).expect("bundled label file parses")
    }

    pub fn content_prompts(&self) -> Vec<String> {
        self.objects.iter().map(|o| format!("A {o}")).collect()
    }

    pub fn style_prompts(&self) -> Vec<String> {
        self.styles.iter().map(|s| format!("A {s} colored object")).collect()
    }
}

/// `n` ordered pairs `(p, p̂)` with `p ≠ p̂`, drawn deterministically.
pub fn prompt_pairs(prompts: &[String], n: usize, seed: u64, family: &str) -> Result<Vec<(String, String)>> {
    if prompts.len() < 2 {
        return Err(Error::InvalidArgument("need at least two prompts to form pairs".into()));
    }
    let mut rng = Rng::for_label(seed, "probe-pairs", family);
    Ok((0..n)
        .map(|_| {
            let i = rng.below(prompts.len());
            let j = (i + 1 + rng.below(prompts.len() - 1)) % prompts.len();
            (prompts[i].clone(), prompts[j].clone())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub block: String,
    pub index: usize,
    pub content: Stat,
    pub style: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub content_pairs: usize,
    pub style_pairs: usize,
    pub blocks: Vec<BlockScores>,
    /// Scores of `p̂` against images generated under `p` alone.
    pub baseline: BlockBaseline,
    pub content_argmax: usize,
    pub style_argmax: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockBaseline {
    pub content: Stat,
    pub style: Stat,
}

/// Inputs shared by every probe cell.
pub struct ProbeSetup<'a> {
    pub model: &'a ToyModel,
    pub encoder: &'a PromptEncoder,
    pub embedder: &'a dyn Embedder,
    pub latent: &'a Tensor,
    pub blocks: Vec<BlockId>,
    /// Permit `p == p̂` (the identity-routing sanity check).
    pub allow_identity: bool,
}

impl ProbeSetup<'_> {
    /// Blocks W1..=W6, the six ten-layer blocks.
    pub fn inner_blocks() -> Vec<BlockId> {
        (1..=6).map(|i| BlockId::new(i).expect("< 8")).collect()
    }

    fn score(&self, p: &str, p_hat: &str, block: Option<BlockId>) -> Result<f32> {
        let mut routing = PromptRouting::new(self.encoder.embed(p));
        if let Some(b) = block {
            routing = routing.with_override(b, self.encoder.embed(p_hat));
        }
        let image = self.model.forward(self.latent, &routing)?;
        clip_score(&self.embedder.embed_image(&image)?, &self.embedder.embed_text(p_hat)?)
    }

    fn family(&self, pairs: &[(String, String)]) -> Result<(Vec<Stat>, Stat)> {
        if !self.allow_identity {
            if let Some((p, _)) = pairs.iter().find(|(p, q)| p == q) {
                return Err(Error::InvalidArgument(format!("probe pair repeats prompt {p:?}")));
            }
        }
        let cells: Vec<(Option<BlockId>, &(String, String))> = self
            .blocks
            .iter()
            .map(|b| Some(*b))
            .chain(std::iter::once(None))
            .flat_map(|b| pairs.iter().map(move |pair| (b, pair)))
            .collect();
        let scores: Vec<f32> = cells
            .par_iter()
            .map(|(b, (p, q))| self.score(p, q, *b))
            .collect::<Result<_>>()?;
        let n = pairs.len();
        let per_block = scores.chunks(n.max(1)).take(self.blocks.len()).map(Stat::of).collect();
        let baseline = Stat::of(&scores[self.blocks.len() * n..]);
        Ok((per_block, baseline))
    }
}

/// For every block `i` and pair `(p, p̂)`, generates with `p̂` injected into
/// `i` and `p` everywhere else, scores the image against `p̂`, and averages
/// per block.
pub fn probe_blocks(
    setup: &ProbeSetup<'_>,
    content_pairs: &[(String, String)],
    style_pairs: &[(String, String)],
) -> Result<ProbeReport> {
    if setup.blocks.is_empty() {
        return Err(Error::InvalidArgument("probe needs at least one block".into()));
    }
    let (content, content_base) = setup.family(content_pairs)?;
    let (style, style_base) = setup.family(style_pairs)?;
    let argmax = |stats: &[Stat]| {
        let best = (0..stats.len()).fold(0, |best, i| if stats[i].mean > stats[best].mean { i } else { best });
        setup.blocks[best].index()
    };
    Ok(ProbeReport {
        content_pairs: content_pairs.len(),
        style_pairs: style_pairs.len(),
        content_argmax: argmax(&content),
        style_argmax: argmax(&style),
        blocks: setup
            .blocks
            .iter()
            .zip(content.iter().zip(&style))
            .map(|(b, (c, s))| BlockScores {
                block: b.name(),
                index: b.index(),
                content: *c,
                style: *s,
            })
            .collect(),
        baseline: BlockBaseline {
            content: content_base,
            style: style_base,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub style_score: f32,
    pub content_score: f32,
}

/// Cosine of `output` to the style and content references.
pub fn eval_similarity(output: &[f32], style_ref: &[f32], content_ref: &[f32]) -> Result<EvalEntry> {
    Ok(EvalEntry {
        style_score: cosine_sim(output, style_ref)?,
        content_score: cosine_sim(output, content_ref)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub style: Stat,
    pub content: Stat,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn from_entries(entries: Vec<EvalEntry>) -> Self {
        let style: Vec<f32> = entries.iter().map(|e| e.style_score).collect();
        let content: Vec<f32> = entries.iter().map(|e| e.content_score).collect();
        EvalReport {
            count: entries.len(),
            style: Stat::of(&style),
            content: Stat::of(&content),
            entries,
        }
    }
}
