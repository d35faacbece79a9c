//! LoRA adapter algebra: delta reconstruction, α-scaling, merging, and
//! block-level extraction and recombination.
//!
//! A [`LoraPair`] stores the two factors of `ΔW = B·A` for one projection,
//! `B` ("up", m×r) and `A` ("down", r×n). The delta reported by
//! [`lora_delta`] includes the checkpoint's `network_alpha / rank` factor when
//! present. A separate user scale (set by [`scale_adapter`]) multiplies on top
//! of that and is applied whenever the adapter is merged, so the merged weight
//! is `W0 + α · scale · (network_alpha / r) · B·A`.
//!
//! All operations return new values; inputs are never modified.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};
use crate::topology::{canonical_stem, parse_stem, BlockId};

pub const META_BLOCK: &str = "blora.block";
pub const META_ROLE: &str = "blora.role";
pub const META_ALPHA: &str = "blora.alpha";
/// Per-stem scale override, written as `blora.alpha:<stem>`.
const META_ALPHA_STEM: &str = "blora.alpha:";
pub const META_PROMPT: &str = "blora.prompt";
/// Suggested inference prompt for a combined content/style adapter.
pub const COMBINED_PROMPT: &str = "A [c] in [s] style";

const UP_SUFFIXES: [&str; 2] = [".lora.up.weight", ".lora_up.weight"];
const DOWN_SUFFIXES: [&str; 2] = [".lora.down.weight", ".lora_down.weight"];
const ALPHA_SUFFIX: &str = ".alpha";

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    up: Tensor,
    down: Tensor,
    network_alpha: Option<f32>,
    scale: f32,
}

impl LoraPair {
    pub fn new(up: Tensor, down: Tensor, network_alpha: Option<f32>) -> Result<Self> {
        let (m, r_up) = up.dims2()?;
        let (r_down, n) = down.dims2()?;
        if r_up != r_down {
            return Err(Error::InvalidPair(format!("up is {m}x{r_up} but down is {r_down}x{n}")));
        }
        if r_up > m.min(n) {
            return Err(Error::InvalidPair(format!("rank {r_up} exceeds min({m}, {n})")));
        }
        if let Some(a) = network_alpha {
            if !a.is_finite() {
                return Err(Error::InvalidPair(format!("network_alpha {a} is not finite")));
            }
        }
        Ok(LoraPair {
            up,
            down,
            network_alpha,
            scale: 1.0,
        })
    }

    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn rank(&self) -> usize {
        self.up.shape()[1]
    }

    /// `(m, n)` of the projection this pair adapts.
    pub fn dims(&self) -> (usize, usize) {
        (self.up.shape()[0], self.down.shape()[1])
    }

    pub fn network_alpha(&self) -> Option<f32> {
        self.network_alpha
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// `network_alpha / rank`, or 1 when the checkpoint carries no alpha.
    pub fn network_scale(&self) -> f32 {
        self.network_alpha.map_or(1.0, |a| a / self.rank() as f32)
    }

    /// Total multiplier applied to `B·A` at merge time for `α = 1`.
    pub fn effective_scale(&self) -> f32 {
        self.scale * self.network_scale()
    }

    /// `scale · lora_delta(self)`.
    pub fn effective_delta(&self) -> Tensor {
        let data = delta_f64(self, self.scale as f64)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Tensor::new(vec![self.dims().0, self.dims().1], data).expect("pair invariants guarantee compatible factors")
    }
}

/// `B·A`, times `network_alpha / rank` when the pair carries a network alpha.
/// Accumulates in f64 and rounds once.
pub fn lora_delta(pair: &LoraPair) -> Tensor {
    let (m, n) = pair.dims();
    let data = delta_f64(pair, 1.0).into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![m, n], data).expect("pair invariants guarantee compatible factors")
}

fn delta_f64(pair: &LoraPair, factor: f64) -> Vec<f64> {
    let (m, n) = pair.dims();
    let up: Vec<f64> = pair.up.data().iter().map(|&v| v as f64).collect();
    let down: Vec<f64> = pair.down.data().iter().map(|&v| v as f64).collect();
    let s = factor * pair.network_alpha.map_or(1.0, |a| a as f64 / pair.rank() as f64);
    let mut out = kernels::matmul(&up, &down, m, pair.rank(), n);
    if s != 1.0 {
        out.iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// `base + alpha · scale · lora_delta(pair)`. `alpha = 0` returns `base` unchanged.
pub fn merge(base: &Tensor, pair: &LoraPair, alpha: f32) -> Result<Tensor> {
    if base.shape() != [pair.dims().0, pair.dims().1] {
        return Err(Error::ShapeMismatch {
            op: "merge",
            left: base.shape().to_vec(),
            right: vec![pair.dims().0, pair.dims().1],
        });
    }
    if alpha == 0.0 {
        return Tensor::new(base.shape().to_vec(), base.data().to_vec());
    }
    let delta = delta_f64(pair, alpha as f64 * pair.scale as f64);
    let data = base
        .data()
        .iter()
        .zip(&delta)
        .map(|(&w, d)| (w as f64 + d) as f32)
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Content,
    Style,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Content => "content",
            Role::Style => "style",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Role::Content),
            "style" => Ok(Role::Style),
            other => Err(Error::InvalidArgument(format!(
                "role must be content or style, got {other:?}"
            ))),
        }
    }
}

/// Keyed collection of LoRA pairs. Stems in the attention topology are stored
/// in the dot-separated naming scheme; other stems are kept verbatim and
/// reported as out-of-topology.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraAdapter {
    pairs: BTreeMap<String, LoraPair>,
    metadata: BTreeMap<String, String>,
}

impl LoraAdapter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, stem: &str, pair: LoraPair) -> Result<()> {
        let stem = canonical_stem(stem);
        if self.pairs.contains_key(&stem) {
            return Err(Error::DuplicateName(stem));
        }
        self.pairs.insert(stem, pair);
        Ok(())
    }

    pub fn get(&self, stem: &str) -> Option<&LoraPair> {
        self.pairs.get(&canonical_stem(stem))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &LoraPair)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Up and down factors plus one scalar per pair that carries a network alpha.
    pub fn tensor_count(&self) -> usize {
        self.pairs
            .values()
            .map(|p| 2 + usize::from(p.network_alpha.is_some()))
            .sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Sets a metadata entry. Scale keys (`blora.alpha*`) are derived from the
    /// pairs on save and cannot be set directly.
    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let key = key.into();
        if key.starts_with(META_ALPHA) {
            return Err(Error::InvalidArgument(format!(
                "{key:?} is derived from pair scales; use scale_adapter"
            )));
        }
        self.metadata.insert(key, value.into());
        Ok(())
    }

    pub fn blocks(&self) -> BTreeSet<BlockId> {
        self.pairs
            .keys()
            .filter_map(|s| parse_stem(s))
            .map(|a| a.block)
            .collect()
    }

    pub fn stems_in_block(&self, block: BlockId) -> Vec<&str> {
        self.stems()
            .filter(|s| parse_stem(s).is_some_and(|a| a.block == block))
            .collect()
    }

    pub fn out_of_topology(&self) -> Vec<&str> {
        self.stems().filter(|s| parse_stem(s).is_none()).collect()
    }
}

/// An adapter whose stems all belong to one block, tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct BLora {
    adapter: LoraAdapter,
    block: BlockId,
    role: Role,
}

impl BLora {
    /// Wraps an adapter after checking block purity.
    pub fn new(adapter: LoraAdapter, block: BlockId, role: Role) -> Result<Self> {
        if adapter.is_empty() {
            return Err(Error::EmptyBlock(block.name()));
        }
        if let Some(stray) = adapter.stems().find(|s| parse_stem(s).map(|a| a.block) != Some(block)) {
            return Err(Error::InvalidArgument(format!(
                "stem {stray:?} does not belong to {block}"
            )));
        }
        let mut adapter = adapter;
        adapter.metadata.insert(META_BLOCK.into(), block.name());
        adapter.metadata.insert(META_ROLE.into(), role.to_string());
        Ok(BLora { adapter, block, role })
    }

    /// Reads block and role back from `blora.block` / `blora.role` metadata.
    pub fn from_tagged(adapter: LoraAdapter) -> Result<Self> {
        let block: BlockId = adapter
            .metadata
            .get(META_BLOCK)
            .ok_or_else(|| Error::InvalidArgument(format!("adapter has no {META_BLOCK} metadata")))?
            .parse()?;
        let role: Role = adapter
            .metadata
            .get(META_ROLE)
            .ok_or_else(|| Error::InvalidArgument(format!("adapter has no {META_ROLE} metadata")))?
            .parse()?;
        BLora::new(adapter, block, role)
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn into_adapter(self) -> LoraAdapter {
        self.adapter
    }

    pub fn block(&self) -> BlockId {
        self.block
    }

    pub fn role(&self) -> Role {
        self.role
    }
}

pub fn extract_blora(adapter: &LoraAdapter, block: BlockId, role: Role) -> Result<BLora> {
    let mut out = LoraAdapter::new();
    for (stem, pair) in adapter.pairs() {
        if parse_stem(stem).is_some_and(|a| a.block == block) {
            out.pairs.insert(stem.to_string(), pair.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyBlock(block.name()));
    }
    out.metadata = adapter
        .metadata
        .iter()
        .filter(|(k, _)| !k.starts_with("blora."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    BLora::new(out, block, role)
}

fn union(a: &LoraAdapter, b: &LoraAdapter) -> Result<LoraAdapter> {
    let overlap: Vec<&str> = a.stems().filter(|s| b.pairs.contains_key(*s)).collect();
    if !overlap.is_empty() {
        let shown = overlap.iter().take(3).copied().collect::<Vec<_>>().join(", ");
        return Err(Error::Overlap(format!("{} shared stems ({shown})", overlap.len())));
    }
    let mut out = a.clone();
    out.metadata.clear();
    out.pairs.extend(b.pairs.iter().map(|(k, v)| (k.clone(), v.clone())));
    Ok(out)
}

fn record_provenance(out: &mut LoraAdapter, role: &str, source: &LoraAdapter) {
    for (k, v) in &source.metadata {
        if k == META_BLOCK || k == META_ROLE {
            continue;
        }
        let k = k.strip_prefix("blora.").unwrap_or(k);
        out.metadata.insert(format!("blora.{role}.{k}"), v.clone());
    }
}

/// Key-union of a content B-LoRA and a style B-LoRA from disjoint blocks.
pub fn combine_bloras(content: &BLora, style: &BLora) -> Result<LoraAdapter> {
    if content.block == style.block {
        return Err(Error::Overlap(format!("both inputs occupy {}", content.block)));
    }
    let mut out = union(&content.adapter, &style.adapter)?;
    out.metadata.insert(META_ROLE.into(), "combined".into());
    out.metadata.insert("blora.content.block".into(), content.block.name());
    out.metadata.insert("blora.style.block".into(), style.block.name());
    out.metadata.insert(META_PROMPT.into(), COMBINED_PROMPT.into());
    record_provenance(&mut out, "content", &content.adapter);
    record_provenance(&mut out, "style", &style.adapter);
    Ok(out)
}

/// Key-union of two arbitrary adapters. Out-of-topology stems (e.g. text
/// encoder adapters) are preserved; the returned warnings list them.
pub fn combine_adapters(content: &LoraAdapter, style: &LoraAdapter) -> Result<(LoraAdapter, Vec<String>)> {
    let mut out = union(content, style)?;
    out.metadata.insert(META_ROLE.into(), "combined".into());
    out.metadata.insert(META_PROMPT.into(), COMBINED_PROMPT.into());
    record_provenance(&mut out, "content", content);
    record_provenance(&mut out, "style", style);
    let warnings = out
        .out_of_topology()
        .into_iter()
        .map(|s| format!("preserving out-of-topology stem {s:?}"))
        .collect();
    Ok((out, warnings))
}

/// [`combine_bloras`] when both inputs carry block and role tags, else
/// [`combine_adapters`].
pub fn combine(content: &LoraAdapter, style: &LoraAdapter) -> Result<(LoraAdapter, Vec<String>)> {
    let tagged = |a: &LoraAdapter| a.metadata.contains_key(META_BLOCK) && a.metadata.contains_key(META_ROLE);
    if tagged(content) && tagged(style) {
        let out = combine_bloras(
            &BLora::from_tagged(content.clone())?,
            &BLora::from_tagged(style.clone())?,
        )?;
        Ok((out, Vec::new()))
    } else {
        combine_adapters(content, style)
    }
}

/// Multiplies every pair's user scale by `alpha`.
pub fn scale_adapter(adapter: &LoraAdapter, alpha: f32) -> Result<LoraAdapter> {
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha {alpha} is not finite")));
    }
    let mut out = adapter.clone();
    for pair in out.pairs.values_mut() {
        pair.scale *= alpha;
    }
    Ok(out)
}

fn split_tensor_name(name: &str) -> Option<(&str, Factor)> {
    for s in UP_SUFFIXES {
        if let Some(stem) = name.strip_suffix(s) {
            return Some((stem, Factor::Up));
        }
    }
    for s in DOWN_SUFFIXES {
        if let Some(stem) = name.strip_suffix(s) {
            return Some((stem, Factor::Down));
        }
    }
    name.strip_suffix(ALPHA_SUFFIX).map(|stem| (stem, Factor::Alpha))
}

#[derive(Clone, Copy)]
enum Factor {
    Up,
    Down,
    Alpha,
}

#[derive(Default)]
struct Parts {
    up: Option<Tensor>,
    down: Option<Tensor>,
    alpha: Option<f32>,
}

fn parse_scale(key: &str, value: &str) -> Result<f32> {
    value
        .parse::<f32>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::MalformedHeader(format!("{key} = {value:?} is not a finite number")))
}

pub fn load_adapter(file: &TensorFile) -> Result<LoraAdapter> {
    let mut parts: BTreeMap<String, Parts> = BTreeMap::new();
    for entry in file.entries() {
        let (stem, factor) =
            split_tensor_name(&entry.name).ok_or_else(|| Error::UnrecognizedKey(entry.name.clone()))?;
        let slot = parts.entry(canonical_stem(stem)).or_default();
        let dup = || Error::DuplicateName(entry.name.clone());
        match factor {
            Factor::Up => {
                if slot.up.replace(file.tensor(&entry.name)?).is_some() {
                    return Err(dup());
                }
            }
            Factor::Down => {
                if slot.down.replace(file.tensor(&entry.name)?).is_some() {
                    return Err(dup());
                }
            }
            Factor::Alpha => {
                if slot.alpha.replace(file.scalar(&entry.name)?).is_some() {
                    return Err(dup());
                }
            }
        }
    }

    let mut metadata = file.metadata().clone();
    let uniform = metadata
        .remove(META_ALPHA)
        .map(|v| parse_scale(META_ALPHA, &v))
        .transpose()?
        .unwrap_or(1.0);
    let overrides: Vec<(String, String)> = metadata
        .iter()
        .filter(|(k, _)| k.starts_with(META_ALPHA_STEM))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut per_stem = BTreeMap::new();
    for (k, v) in overrides {
        metadata.remove(&k);
        let stem = canonical_stem(&k[META_ALPHA_STEM.len()..]);
        per_stem.insert(stem, parse_scale(&k, &v)?);
    }

    let mut adapter = LoraAdapter {
        pairs: BTreeMap::new(),
        metadata,
    };
    for (stem, p) in parts {
        let (up, down) = match (p.up, p.down) {
            (Some(u), Some(d)) => (u, d),
            (Some(_), None) => {
                return Err(Error::OrphanFactor {
                    stem,
                    present: "up",
                    missing: "down",
                })
            }
            (None, Some(_)) => {
                return Err(Error::OrphanFactor {
                    stem,
                    present: "down",
                    missing: "up",
                })
            }
            (None, None) => {
                return Err(Error::OrphanFactor {
                    stem,
                    present: "alpha",
                    missing: "up/down",
                })
            }
        };
        let (up_rank, down_rank) = (up.dims2()?.1, down.dims2()?.0);
        if up_rank != down_rank {
            return Err(Error::RankMismatch {
                stem,
                up: up_rank,
                down: down_rank,
            });
        }
        let scale = per_stem.remove(&stem).unwrap_or(uniform);
        let pair = LoraPair::new(up, down, p.alpha)?.with_scale(scale);
        adapter.pairs.insert(stem, pair);
    }
    if let Some(stem) = per_stem.keys().next() {
        return Err(Error::MalformedHeader(format!(
            "scale override for unknown stem {stem:?}"
        )));
    }
    Ok(adapter)
}

pub fn save_adapter(adapter: &LoraAdapter) -> Result<TensorFile> {
    let mut file = TensorFile::new();
    for (k, v) in &adapter.metadata {
        file.set_metadata(k.clone(), v.clone());
    }
    let scales: BTreeSet<u32> = adapter.pairs.values().map(|p| p.scale.to_bits()).collect();
    match scales.len() {
        0 => {}
        1 => {
            let s = f32::from_bits(*scales.iter().next().expect("one scale"));
            if s != 1.0 {
                file.set_metadata(META_ALPHA, s.to_string());
            }
        }
        _ => {
            for (stem, pair) in &adapter.pairs {
                if pair.scale != 1.0 {
                    file.set_metadata(format!("{META_ALPHA_STEM}{stem}"), pair.scale.to_string());
                }
            }
        }
    }
    for (stem, pair) in &adapter.pairs {
        file.push_tensor(format!("{stem}.lora.up.weight"), &pair.up)?;
        file.push_tensor(format!("{stem}.lora.down.weight"), &pair.down)?;
        if let Some(a) = pair.network_alpha {
            file.push_scalar(format!("{stem}{ALPHA_SUFFIX}"), a)?;
        }
    }
    Ok(file)
}

/// Base tensor name for an adapter stem: `<stem>.weight`, also trying the
/// stem without its `unet.` prefix.
fn base_key(base: &TensorFile, stem: &str) -> Option<String> {
    let direct = format!("{stem}.weight");
    if base.entry(&direct).is_some() {
        return Some(direct);
    }
    let bare = format!("{}.weight", stem.strip_prefix("unet.")?);
    base.entry(&bare).map(|_| bare)
}

/// Dense `W = W0 + α·ΔW` for every adapted projection of `base`. Tensors the
/// adapter does not touch are copied verbatim; merged tensors keep the base
/// tensor's dtype.
pub fn merge_into_base(base: &TensorFile, adapter: &LoraAdapter, alpha: f32) -> Result<TensorFile> {
    let mut merged: BTreeMap<String, Tensor> = BTreeMap::new();
    for (stem, pair) in adapter.pairs() {
        let key = base_key(base, stem).ok_or_else(|| Error::MissingBase(stem.to_string()))?;
        let w0 = base.tensor(&key)?;
        let w = merge(&w0, pair, alpha)?;
        merged.insert(key, w.cast(w0.dtype())?);
    }
    let mut out = TensorFile::new();
    for (k, v) in base.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    for entry in base.entries() {
        match merged.get(&entry.name) {
            Some(t) => out.push_tensor(entry.name.clone(), t)?,
            None => out.push_raw(
                entry.name.clone(),
                entry.dtype,
                entry.shape.clone(),
                base.raw(&entry.name).expect("entry exists"),
            )?,
        }
    }
    Ok(out)
}
