//! SDXL attention-layer layout and the adapter-key ↔ block mapping.
//!
//! The UNet holds 70 attention layers (one self- and one cross-attention per
//! layer) spread over 11 transformer blocks. They are grouped into eight
//! blocks `W0..W7` in forward-pass order:
//!
//! | block | layers | diffusers modules                                   |
//! |-------|--------|-----------------------------------------------------|
//! | W0    | 4      | `down_blocks.1.attentions.{0,1}` (2 layers each)    |
//! | W1    | 10     | `down_blocks.2.attentions.0`                        |
//! | W2    | 10     | `down_blocks.2.attentions.1`                        |
//! | W3    | 10     | `mid_block.attentions.0`                            |
//! | W4    | 10     | `up_blocks.0.attentions.0`                          |
//! | W5    | 10     | `up_blocks.0.attentions.1`                          |
//! | W6    | 10     | `up_blocks.0.attentions.2`                          |
//! | W7    | 6      | `up_blocks.1.attentions.{0,1,2}` (2 layers each)    |
//!
//! The table is data; code never hard-codes module paths outside it.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const BLOCK_COUNT: usize = 8;
pub const LAYER_COUNTS: [usize; BLOCK_COUNT] = [4, 10, 10, 10, 10, 10, 10, 6];
pub const TOTAL_LAYERS: usize = 70;

/// One diffusers `Transformer2DModel`: `<path>.attentions.<attention>` with
/// `depth` consecutive `transformer_blocks`.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub path: &'static str,
    pub attention: usize,
    pub depth: usize,
}

const fn seg(path: &'static str, attention: usize, depth: usize) -> Segment {
    Segment { path, attention, depth }
}

pub static SDXL_TABLE: [&[Segment]; BLOCK_COUNT] = [
    &[seg("down_blocks.1", 0, 2), seg("down_blocks.1", 1, 2)],
    &[seg("down_blocks.2", 0, 10)],
    &[seg("down_blocks.2", 1, 10)],
    &[seg("mid_block", 0, 10)],
    &[seg("up_blocks.0", 0, 10)],
    &[seg("up_blocks.0", 1, 10)],
    &[seg("up_blocks.0", 2, 10)],
    &[
        seg("up_blocks.1", 0, 2),
        seg("up_blocks.1", 1, 2),
        seg("up_blocks.1", 2, 2),
    ],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(u8);

impl BlockId {
    pub const ALL: [BlockId; BLOCK_COUNT] = [
        BlockId(0),
        BlockId(1),
        BlockId(2),
        BlockId(3),
        BlockId(4),
        BlockId(5),
        BlockId(6),
        BlockId(7),
    ];

    pub fn new(index: usize) -> Result<Self> {
        if index < BLOCK_COUNT {
            Ok(BlockId(index as u8))
        } else {
            Err(Error::InvalidBlock(format!("W{index}")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> String {
        format!("W{}", self.0)
    }

    pub fn layer_count(self) -> usize {
        layer_count(self)
    }

    pub fn segments(self) -> &'static [Segment] {
        SDXL_TABLE[self.index()]
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}", self.0)
    }
}

/// Accepts `W4`, `w4`, `4`, or a diffusers module prefix that covers exactly
/// one block's modules (`up_blocks.0.attentions.0`, `unet.down_blocks.1`).
impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t.strip_prefix(['W', 'w']).unwrap_or(t);
        if let Ok(i) = digits.parse::<usize>() {
            return BlockId::new(i).map_err(|_| Error::InvalidBlock(s.to_string()));
        }
        let prefix = t.strip_prefix("unet.").unwrap_or(t);
        let covers = |seg: &Segment| {
            let full = format!("{}.attentions.{}", seg.path, seg.attention);
            full == prefix || full.starts_with(&format!("{prefix}."))
        };
        let matches: Vec<BlockId> = BlockId::ALL
            .into_iter()
            .filter(|b| b.segments().iter().any(covers))
            .collect();
        match matches[..] {
            [b] if b.segments().iter().all(covers) => Ok(b),
            _ => Err(Error::InvalidBlock(s.to_string())),
        }
    }
}

pub fn layer_count(block: BlockId) -> usize {
    LAYER_COUNTS[block.index()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    SelfAttn,
    Cross,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 2] = [AttentionKind::SelfAttn, AttentionKind::Cross];

    fn module(self) -> &'static str {
        match self {
            AttentionKind::SelfAttn => "attn1",
            AttentionKind::Cross => "attn2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::Out];

    fn module(self) -> &'static str {
        match self {
            Projection::Q => "to_q",
            Projection::K => "to_k",
            Projection::V => "to_v",
            Projection::Out => "to_out.0",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamingScheme {
    /// `unet.up_blocks.0.attentions.0.transformer_blocks.3.attn1.to_q`
    Diffusers,
    /// `lora_unet_up_blocks_0_attentions_0_transformer_blocks_3_attn1_to_q`
    Kohya,
}

impl FromStr for NamingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusers" | "dot" => Ok(NamingScheme::Diffusers),
            "kohya" => Ok(NamingScheme::Kohya),
            other => Err(Error::InvalidArgument(format!("unknown naming scheme {other:?}"))),
        }
    }
}

/// One projection of one attention unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerAddress {
    pub block: BlockId,
    pub layer: usize,
    pub kind: AttentionKind,
    pub projection: Projection,
}

impl LayerAddress {
    pub fn new(block: BlockId, layer: usize, kind: AttentionKind, projection: Projection) -> Result<Self> {
        if layer >= layer_count(block) {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range for {block} ({} layers)",
                layer_count(block)
            )));
        }
        Ok(LayerAddress {
            block,
            layer,
            kind,
            projection,
        })
    }

    /// The `(segment, transformer_block)` this address lives in.
    fn locate(&self) -> (&'static Segment, usize) {
        let mut rest = self.layer;
        for seg in self.block.segments() {
            if rest < seg.depth {
                return (seg, rest);
            }
            rest -= seg.depth;
        }
        unreachable!("layer index validated at construction")
    }

    pub fn stem(&self, scheme: NamingScheme) -> String {
        let (seg, tb) = self.locate();
        let dotted = format!(
            "{}.attentions.{}.transformer_blocks.{}.{}.{}",
            seg.path,
            seg.attention,
            tb,
            self.kind.module(),
            self.projection.module()
        );
        match scheme {
            NamingScheme::Diffusers => format!("unet.{dotted}"),
            NamingScheme::Kohya => format!("lora_unet_{}", dotted.replace('.', "_")),
        }
    }
}

fn diffusers_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?:unet\.)?(down_blocks\.\d+|mid_block|up_blocks\.\d+)\.attentions\.(\d+)\.transformer_blocks\.(\d+)\.(attn1|attn2)\.(to_q|to_k|to_v|to_out\.0)$",
        )
        .expect("valid regex")
    })
}

fn kohya_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^lora_unet_(down_blocks_\d+|mid_block|up_blocks_\d+)_attentions_(\d+)_transformer_blocks_(\d+)_(attn1|attn2)_(to_q|to_k|to_v|to_out_0)$",
        )
        .expect("valid regex")
    })
}

/// Resolves an adapter key stem in either naming scheme to its address.
/// Returns `None` for keys outside the attention topology.
pub fn parse_stem(stem: &str) -> Option<LayerAddress> {
    let (path, attention, tb, attn, proj) = if let Some(c) = diffusers_re().captures(stem) {
        (
            c[1].to_string(),
            c[2].to_string(),
            c[3].to_string(),
            c[4].to_string(),
            c[5].to_string(),
        )
    } else {
        let c = kohya_re().captures(stem)?;
        let path = match &c[1] {
            "mid_block" => "mid_block".to_string(),
            p => {
                let (head, idx) = p.rsplit_once('_')?;
                format!("{head}.{idx}")
            }
        };
        (
            path,
            c[2].to_string(),
            c[3].to_string(),
            c[4].to_string(),
            c[5].replace("_0", ".0"),
        )
    };
    let attention: usize = attention.parse().ok()?;
    let tb: usize = tb.parse().ok()?;
    let kind = if attn == "attn1" {
        AttentionKind::SelfAttn
    } else {
        AttentionKind::Cross
    };
    let projection = Projection::ALL.into_iter().find(|p| p.module() == proj)?;
    for block in BlockId::ALL {
        let mut base = 0;
        for seg in block.segments() {
            if seg.path == path && seg.attention == attention {
                if tb >= seg.depth {
                    return None;
                }
                return Some(LayerAddress {
                    block,
                    layer: base + tb,
                    kind,
                    projection,
                });
            }
            base += seg.depth;
        }
    }
    None
}

/// Tensor-name suffixes stripped before stem lookup.
const FACTOR_SUFFIXES: [&str; 5] = [
    ".lora.up.weight",
    ".lora.down.weight",
    ".lora_up.weight",
    ".lora_down.weight",
    ".alpha",
];

pub fn block_of_key(key: &str) -> Result<BlockId> {
    let stem = FACTOR_SUFFIXES.iter().find_map(|s| key.strip_suffix(s)).unwrap_or(key);
    parse_stem(stem)
        .map(|a| a.block)
        .ok_or_else(|| Error::UnrecognizedKey(key.to_string()))
}

/// Rewrites an in-topology stem to the dot-separated scheme; other stems are
/// returned unchanged.
pub fn canonical_stem(stem: &str) -> String {
    parse_stem(stem)
        .map(|a| a.stem(NamingScheme::Diffusers))
        .unwrap_or_else(|| stem.to_string())
}

pub fn addresses_of_block(block: BlockId) -> Vec<LayerAddress> {
    let mut out = Vec::with_capacity(layer_count(block) * 8);
    for layer in 0..layer_count(block) {
        for kind in AttentionKind::ALL {
            for projection in Projection::ALL {
                out.push(LayerAddress {
                    block,
                    layer,
                    kind,
                    projection,
                });
            }
        }
    }
    out
}

/// All adapter key stems of a block, sorted.
pub fn keys_of_block(block: BlockId, scheme: NamingScheme) -> Vec<String> {
    let mut keys: Vec<String> = addresses_of_block(block).iter().map(|a| a.stem(scheme)).collect();
    keys.sort();
    keys
}

/// Machine-readable dump of the mapping table.
pub fn keymap_document(scheme: NamingScheme) -> Value {
    let blocks: Vec<Value> = BlockId::ALL
        .into_iter()
        .map(|b| {
            let segments: Vec<Value> = b
                .segments()
                .iter()
                .map(|s| {
                    json!({
                        "module": format!("unet.{}.attentions.{}", s.path, s.attention),
                        "transformer_blocks": s.depth,
                    })
                })
                .collect();
            json!({
                "block": b.name(),
                "index": b.index(),
                "layers": layer_count(b),
                "segments": segments,
                "stems": keys_of_block(b, scheme),
            })
        })
        .collect();
    json!({
        "topology": "sdxl",
        "scheme": match scheme {
            NamingScheme::Diffusers => "diffusers",
            NamingScheme::Kohya => "kohya",
        },
        "total_layers": TOTAL_LAYERS,
        "blocks": blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn w(i: usize) -> BlockId {
        BlockId::new(i).unwrap()
    }

    #[test]
    fn layer_counts() {
        assert_eq!(layer_count(w(4)), 10);
        assert_eq!(layer_count(w(0)), 4);
        assert_eq!(BlockId::ALL.iter().map(|b| layer_count(*b)).sum::<usize>(), 70);
        for b in BlockId::ALL {
            let depth: usize = b.segments().iter().map(|s| s.depth).sum();
            assert_eq!(depth, layer_count(b), "{b}");
        }
    }

    /// Enumerates the table in forward-pass order and checks the resolved
    /// block of three known keys.
    #[test]
    fn known_keys() {
        let cases = [
            ("unet.up_blocks.0.attentions.0.transformer_blocks.3.attn1.to_q", 4),
            ("unet.up_blocks.0.attentions.1.transformer_blocks.0.attn2.to_v", 5),
            ("unet.mid_block.attentions.0.transformer_blocks.9.attn1.to_out.0", 3),
            ("unet.down_blocks.1.attentions.1.transformer_blocks.1.attn2.to_k", 0),
            ("unet.up_blocks.1.attentions.2.transformer_blocks.0.attn1.to_q", 7),
            (
                "lora_unet_up_blocks_0_attentions_1_transformer_blocks_9_attn2_to_out_0",
                5,
            ),
            (
                "unet.up_blocks.0.attentions.0.transformer_blocks.3.attn1.to_q.lora.up.weight",
                4,
            ),
        ];
        for (key, block) in cases {
            assert_eq!(block_of_key(key).unwrap(), w(block), "{key}");
        }
    }

    #[test]
    fn traversal_order_of_table() {
        // forward-pass enumeration: down path, mid, up path
        let order: Vec<&str> = BlockId::ALL.iter().map(|b| b.segments()[0].path).collect();
        assert_eq!(
            order,
            [
                "down_blocks.1",
                "down_blocks.2",
                "down_blocks.2",
                "mid_block",
                "up_blocks.0",
                "up_blocks.0",
                "up_blocks.0",
                "up_blocks.1"
            ]
        );
    }

    #[test]
    fn unrecognized_keys() {
        for key in [
            "unet.up_blocks.0.attentions.0.transformer_blocks.10.attn1.to_q",
            "unet.down_blocks.0.attentions.0.transformer_blocks.0.attn1.to_q",
            "lora_te1_text_model_encoder_layers_0_self_attn_q_proj",
            "garbage",
        ] {
            match block_of_key(key) {
                Err(Error::UnrecognizedKey(k)) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn key_counts() {
        assert_eq!(keys_of_block(w(4), NamingScheme::Diffusers).len(), 80);
        assert_eq!(keys_of_block(w(0), NamingScheme::Diffusers).len(), 32);
        let mut all = BTreeSet::new();
        for b in BlockId::ALL {
            for k in keys_of_block(b, NamingScheme::Diffusers) {
                assert!(all.insert(k));
            }
        }
        assert_eq!(all.len(), 560);
    }

    #[test]
    fn partition_is_bijective_in_both_schemes() {
        for scheme in [NamingScheme::Diffusers, NamingScheme::Kohya] {
            for b in BlockId::ALL {
                let keys = keys_of_block(b, scheme);
                let mut sorted = keys.clone();
                sorted.sort();
                assert_eq!(keys, sorted);
                for k in keys {
                    assert_eq!(block_of_key(&k).unwrap(), b, "{k}");
                }
            }
        }
    }

    #[test]
    fn kohya_and_diffusers_agree() {
        for b in BlockId::ALL {
            for a in addresses_of_block(b) {
                let dot = a.stem(NamingScheme::Diffusers);
                let kohya = a.stem(NamingScheme::Kohya);
                assert_eq!(parse_stem(&kohya), Some(a));
                assert_eq!(canonical_stem(&kohya), dot);
                assert_eq!(parse_stem(dot.strip_prefix("unet.").unwrap()), Some(a));
            }
        }
    }

    #[test]
    fn block_names() {
        assert_eq!("W4".parse::<BlockId>().unwrap(), w(4));
        assert_eq!("w7".parse::<BlockId>().unwrap(), w(7));
        assert_eq!("up_blocks.0.attentions.1".parse::<BlockId>().unwrap(), w(5));
        assert_eq!("unet.mid_block.attentions.0".parse::<BlockId>().unwrap(), w(3));
        assert_eq!("down_blocks.1".parse::<BlockId>().unwrap(), w(0));
        assert_eq!("unet.up_blocks.1".parse::<BlockId>().unwrap(), w(7));
        for bad in ["W8", "up_blocks.0", "down_blocks.1.attentions.0", "mid", ""] {
            assert!(bad.parse::<BlockId>().is_err(), "{bad}");
        }
    }

    #[test]
    fn keymap_document_shape() {
        let doc = keymap_document(NamingScheme::Diffusers);
        assert_eq!(doc["total_layers"], 70);
        assert_eq!(doc["blocks"].as_array().unwrap().len(), 8);
        assert_eq!(doc["blocks"][4]["stems"].as_array().unwrap().len(), 80);
    }
}
