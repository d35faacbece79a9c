use crate::adapter::{merge, LoraAdapter};
use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::topology::{AttentionKind, BlockId, LayerAddress, NamingScheme, Projection};

use super::math::{layer_forward, LayerWeights, Mat, Scalar};
use super::prompt::PromptRouting;
use super::ToyConfig;

/// Gain of the frozen Q/K/V projections (`σ = gain/√in`).
const BASE_GAIN: f64 = 1.0;
/// Gain of the frozen output projections. Kept small so the residual stream
/// stays well-conditioned across the stacked layers.
const BASE_OUT_GAIN: f64 = 0.1;

/// Which embedding a cross-attention layer read during a traced forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Default,
    Override(BlockId),
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub output: Tensor,
    /// Residual stream after each of the eight blocks.
    pub block_outputs: Vec<Tensor>,
    /// `(block, layer, source)` for every cross-attention layer, in order.
    pub cross_sources: Vec<(BlockId, usize, EmbeddingSource)>,
}

#[derive(Debug, Clone, PartialEq)]
struct ToyLayer {
    block: BlockId,
    layer: usize,
    /// `[self, cross]`, each `[Q, K, V, out]`.
    weights: [[Tensor; 4]; 2],
}

/// Frozen base weights plus any attached adapters.
///
/// The denoiser output is the accumulated attention update: the final residual
/// stream minus the input latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    layers: Vec<ToyLayer>,
    attached: Vec<(LoraAdapter, f32)>,
}

fn projection_shape(config: &ToyConfig, kind: AttentionKind, proj: Projection) -> (usize, usize) {
    let d = config.token_dim;
    match (kind, proj) {
        (AttentionKind::Cross, Projection::K | Projection::V) => (d, config.prompt_dim),
        _ => (d, d),
    }
}

pub(crate) fn toy_stem(block: BlockId, layer: usize, kind: AttentionKind, proj: Projection) -> String {
    LayerAddress::new(block, layer, kind, proj)
        .expect("toy layer counts never exceed the topology")
        .stem(NamingScheme::Diffusers)
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::for_label(config.seed, "toy-base", "weights");
        let layers = config
            .layer_addresses()
            .into_iter()
            .map(|(block, layer)| {
                let weights = AttentionKind::ALL.map(|kind| {
                    Projection::ALL.map(|proj| {
                        let (m, n) = projection_shape(&config, kind, proj);
                        let gain = if proj == Projection::Out {
                            BASE_OUT_GAIN
                        } else {
                            BASE_GAIN
                        };
                        Tensor::new(vec![m, n], rng.normal_vec(m * n, gain / (n as f64).sqrt())).expect("positive dims")
                    })
                });
                ToyLayer { block, layer, weights }
            })
            .collect();
        Ok(ToyModel {
            config,
            layers,
            attached: Vec::new(),
        })
    }

    /// A model in which only `block` does anything: each of its
    /// cross-attention layers attends uniformly over the prompt tokens
    /// (`Q = K = 0`) and adds `gain ×` the mean prompt row to the stream.
    /// Everything else is zero, so the output is a scaled copy of the
    /// embedding routed to `block`.
    pub fn hand_wired(config: ToyConfig, block: BlockId, gain: f32) -> Result<Self> {
        config.validate()?;
        let eye = |m: usize, n: usize, s: f32| {
            let mut t = vec![0.0f32; m * n];
            for i in 0..m.min(n) {
                t[i * n + i] = s;
            }
            Tensor::new(vec![m, n], t).expect("positive dims")
        };
        let layers = config
            .layer_addresses()
            .into_iter()
            .map(|(b, layer)| {
                let weights = AttentionKind::ALL.map(|kind| {
                    Projection::ALL.map(|proj| {
                        let (m, n) = projection_shape(&config, kind, proj);
                        match (b == block, kind, proj) {
                            (true, AttentionKind::Cross, Projection::V) => eye(m, n, 1.0),
                            (true, AttentionKind::Cross, Projection::Out) => eye(m, n, gain),
                            _ => Tensor::zeros(vec![m, n]).expect("positive dims"),
                        }
                    })
                });
                ToyLayer {
                    block: b,
                    layer,
                    weights,
                }
            })
            .collect();
        Ok(ToyModel {
            config,
            layers,
            attached: Vec::new(),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Adapter key stems the toy instantiates, in forward order.
    pub fn stems(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| {
                AttentionKind::ALL
                    .into_iter()
                    .flat_map(move |k| Projection::ALL.map(move |p| toy_stem(l.block, l.layer, k, p)))
            })
            .collect()
    }

    pub fn base_weight(&self, stem: &str) -> Option<&Tensor> {
        self.layers.iter().find_map(|l| {
            AttentionKind::ALL.iter().enumerate().find_map(|(ki, &k)| {
                Projection::ALL
                    .iter()
                    .enumerate()
                    .find(|(_, &p)| toy_stem(l.block, l.layer, k, p) == stem)
                    .map(|(pi, _)| &l.weights[ki][pi])
            })
        })
    }

    /// Attaches `adapter` at strength `alpha`. Stems the toy does not
    /// instantiate are ignored; stems it does must match the base shapes.
    pub fn attach(&mut self, adapter: &LoraAdapter, alpha: f32) -> Result<()> {
        for (stem, pair) in adapter.pairs() {
            if let Some(w) = self.base_weight(stem) {
                let (m, n) = pair.dims();
                if w.shape() != [m, n] {
                    return Err(Error::ShapeMismatch {
                        op: "attach",
                        left: w.shape().to_vec(),
                        right: vec![m, n],
                    });
                }
            }
        }
        self.attached.push((adapter.clone(), alpha));
        Ok(())
    }

    pub fn with_adapter(mut self, adapter: &LoraAdapter, alpha: f32) -> Result<Self> {
        self.attach(adapter, alpha)?;
        Ok(self)
    }

    pub fn detach_all(&mut self) {
        self.attached.clear();
    }

    pub fn base(&self) -> ToyModel {
        ToyModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            attached: Vec::new(),
        }
    }

    /// `W0 + Σ α·ΔW` for every projection.
    fn effective(&self) -> Result<Vec<[[Tensor; 4]; 2]>> {
        self.layers
            .iter()
            .map(|l| {
                let mut w = l.weights.clone();
                for (ki, &kind) in AttentionKind::ALL.iter().enumerate() {
                    for (pi, &proj) in Projection::ALL.iter().enumerate() {
                        let stem = toy_stem(l.block, l.layer, kind, proj);
                        for (adapter, alpha) in &self.attached {
                            if let Some(pair) = adapter.get(&stem) {
                                w[ki][pi] = merge(&w[ki][pi], pair, *alpha)?;
                            }
                        }
                    }
                }
                Ok(w)
            })
            .collect()
    }

    pub(crate) fn base_mats<F: Scalar>(&self) -> Vec<(BlockId, usize, LayerWeights<F>)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    l.block,
                    l.layer,
                    l.weights.each_ref().map(|k| k.each_ref().map(Mat::from_tensor)),
                )
            })
            .collect()
    }

    fn check_inputs(&self, latent: &Tensor, routing: &PromptRouting) -> Result<()> {
        let (_, d) = latent.dims2()?;
        if d != self.config.token_dim {
            return Err(Error::ShapeMismatch {
                op: "forward latent",
                left: latent.shape().to_vec(),
                right: vec![self.config.token_dim],
            });
        }
        for e in std::iter::once(routing.default_embedding()).chain(routing.overrides().values()) {
            let (_, p) = e.dims2()?;
            if p != self.config.prompt_dim {
                return Err(Error::ShapeMismatch {
                    op: "forward prompt",
                    left: e.shape().to_vec(),
                    right: vec![self.config.prompt_dim],
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, latent: &Tensor, routing: &PromptRouting) -> Result<Tensor> {
        Ok(self.forward_traced(latent, routing)?.output)
    }

    pub fn forward_traced(&self, latent: &Tensor, routing: &PromptRouting) -> Result<Trace> {
        self.check_inputs(latent, routing)?;
        let weights = self.effective()?;
        let heads = self.config.head_count;
        let x0 = Mat::<f32>::from_tensor(latent);
        let mut x = x0.clone();
        let mut block_outputs = Vec::with_capacity(BlockId::ALL.len());
        let mut cross_sources = Vec::with_capacity(self.layers.len());
        let mut prompts = std::collections::BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            let source = if routing.overrides().contains_key(&l.block) {
                EmbeddingSource::Override(l.block)
            } else {
                EmbeddingSource::Default
            };
            let prompt = prompts
                .entry(l.block)
                .or_insert_with(|| Mat::<f32>::from_tensor(routing.resolve(l.block)));
            let w = weights[i].each_ref().map(|k| k.each_ref().map(Mat::from_tensor));
            x = layer_forward(&w, heads, &x, prompt).0;
            cross_sources.push((l.block, l.layer, source));
            let last_of_block = self.layers.get(i + 1).is_none_or(|n| n.block != l.block);
            if last_of_block {
                block_outputs.push(x.to_tensor());
            }
        }
        let mut out = x;
        for (o, v) in out.data.iter_mut().zip(&x0.data) {
            *o -= *v;
        }
        Ok(Trace {
            output: out.to_tensor(),
            block_outputs,
            cross_sources,
        })
    }

    /// The frozen base weights as a tensor file keyed `"<stem>.weight"`.
    pub fn base_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        file.set_metadata(
            "blora.toy.config",
            serde_json::to_string(&self.config).expect("plain struct"),
        );
        for l in &self.layers {
            for (ki, &kind) in AttentionKind::ALL.iter().enumerate() {
                for (pi, &proj) in Projection::ALL.iter().enumerate() {
                    file.push_tensor(
                        format!("{}.weight", toy_stem(l.block, l.layer, kind, proj)),
                        &l.weights[ki][pi],
                    )?;
                }
            }
        }
        Ok(file)
    }
}
