use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{LoraAdapter, LoraPair};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::topology::{AttentionKind, BlockId, Projection, BLOCK_COUNT};

use super::math::{cast, layer_backward, layer_forward, LayerCache, LayerWeights, Mat, Scalar};
use super::model::{toy_stem, ToyModel};
use super::prompt::PromptRouting;
use super::sample::SyntheticSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f32,
    pub rank: usize,
    pub adam: AdamConfig,
    pub blocks: BTreeSet<BlockId>,
    /// Prompt embedding fed to every cross-attention layer.
    pub prompt: Tensor,
    /// Seeds the input noise and the down-factor initialisation.
    pub seed: u64,
    /// The input latent is `√(1−σ²)·target + σ·ε`; `σ = 1` is pure noise.
    pub noise_level: f32,
    pub center_crop: Option<usize>,
    pub network_alpha: Option<f32>,
}

impl TrainSpec {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_LR: f32 = 5e-5;
    pub const DEFAULT_RANK: usize = 4;

    pub fn new(prompt: Tensor, blocks: impl IntoIterator<Item = BlockId>) -> Self {
        TrainSpec {
            steps: Self::DEFAULT_STEPS,
            learning_rate: Self::DEFAULT_LR,
            rank: Self::DEFAULT_RANK,
            adam: AdamConfig::default(),
            blocks: blocks.into_iter().collect(),
            prompt,
            seed: 0,
            noise_level: 1.0,
            center_crop: None,
            network_alpha: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one block must be trained".into());
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise level {} outside [0, 1]", self.noise_level));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.network_alpha.map_or(1.0, |a| a as f64 / self.rank as f64)
    }
}

/// The fixed noised input for `target`.
pub(crate) fn noised_latent(target: &Tensor, noise_level: f32, seed: u64) -> Tensor {
    let mut rng = Rng::for_label(seed, "train", "noise");
    let keep = (1.0 - noise_level * noise_level).max(0.0).sqrt();
    let data = target
        .data()
        .iter()
        .map(|&x| keep * x + noise_level * rng.normal() as f32)
        .collect();
    Tensor::new(target.shape().to_vec(), data).expect("same shape")
}

struct Slot<F> {
    layer: usize,
    kind: usize,
    proj: usize,
    stem: String,
    trainable: bool,
    up: Mat<F>,
    down: Mat<F>,
}

/// One reconstruction problem: frozen base, adapter slots, fixed input and
/// target. The stream entering the first trainable layer is precomputed.
struct Problem<F> {
    heads: usize,
    base: Vec<LayerWeights<F>>,
    prompt: Mat<F>,
    latent: Mat<F>,
    target: Mat<F>,
    scale: F,
    slots: Vec<Slot<F>>,
    start: usize,
    x_start: Mat<F>,
}

/// `(dB, dA)` for one slot.
type FactorGrads<F> = (Mat<F>, Mat<F>);

impl<F: Scalar> Problem<F> {
    /// Slots for every projection of every toy layer in `blocks`, with
    /// `trainable` set for those in `trainable`.
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &ToyModel,
        blocks: &BTreeSet<BlockId>,
        trainable: &BTreeSet<BlockId>,
        prompt: &Tensor,
        latent: &Tensor,
        target: &Tensor,
        scale: f64,
        mut init: impl FnMut(&str, usize, usize) -> (Mat<F>, Mat<F>),
    ) -> Self {
        let mats = model.base_mats::<F>();
        let mut slots = Vec::new();
        for (li, (block, layer, w)) in mats.iter().enumerate() {
            if !blocks.contains(block) {
                continue;
            }
            for (ki, &kind) in AttentionKind::ALL.iter().enumerate() {
                for (pi, &proj) in Projection::ALL.iter().enumerate() {
                    let stem = toy_stem(*block, *layer, kind, proj);
                    let (up, down) = init(&stem, w[ki][pi].rows, w[ki][pi].cols);
                    slots.push(Slot {
                        layer: li,
                        kind: ki,
                        proj: pi,
                        stem,
                        trainable: trainable.contains(block),
                        up,
                        down,
                    });
                }
            }
        }
        let base: Vec<LayerWeights<F>> = mats.into_iter().map(|(_, _, w)| w).collect();
        let start = slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.layer)
            .min()
            .unwrap_or(base.len());
        let mut p = Problem {
            heads: model.config().head_count,
            base,
            prompt: Mat::from_tensor(prompt),
            latent: Mat::from_tensor(latent),
            target: Mat::from_tensor(target),
            scale: cast(scale),
            slots,
            start: 0,
            x_start: Mat::zeros(0, 0),
        };
        let mut x = p.latent.clone();
        for li in 0..start {
            x = layer_forward(&p.layer_weights(li), p.heads, &x, &p.prompt).0;
        }
        p.start = start;
        p.x_start = x;
        p
    }

    fn layer_weights(&self, li: usize) -> LayerWeights<F> {
        let mut w = self.base[li].clone();
        for s in self.slots.iter().filter(|s| s.layer == li) {
            let delta = s.up.mm(&s.down).scale(self.scale);
            w[s.kind][s.proj].add_assign(&delta);
        }
        w
    }

    fn residual(&self, x: &Mat<F>) -> Mat<F> {
        let mut r = x.clone();
        for ((o, l), t) in r.data.iter_mut().zip(&self.latent.data).zip(&self.target.data) {
            *o = *o - *l - *t;
        }
        r
    }

    fn mse(&self, r: &Mat<F>) -> F {
        r.data.iter().fold(F::zero(), |acc, v| acc + *v * *v) / cast(r.data.len() as f64)
    }

    fn loss(&self) -> F {
        let mut x = self.x_start.clone();
        for li in self.start..self.base.len() {
            x = layer_forward(&self.layer_weights(li), self.heads, &x, &self.prompt).0;
        }
        self.mse(&self.residual(&x))
    }

    /// Loss and `(d up, d down)` per slot; frozen slots get exact zeros.
    fn loss_and_grads(&self) -> (F, Vec<FactorGrads<F>>) {
        let n = self.base.len();
        let weights: Vec<LayerWeights<F>> = (self.start..n).map(|li| self.layer_weights(li)).collect();
        let mut caches: Vec<LayerCache<F>> = Vec::with_capacity(weights.len());
        let mut x = self.x_start.clone();
        for w in &weights {
            let (y, c) = layer_forward(w, self.heads, &x, &self.prompt);
            caches.push(c);
            x = y;
        }
        let r = self.residual(&x);
        let loss = self.mse(&r);
        let mut dy = r.scale(cast(2.0 / r.data.len() as f64));
        let mut dws = Vec::with_capacity(weights.len());
        for (w, c) in weights.iter().zip(&caches).rev() {
            let (dx, dw) = layer_backward(w, self.heads, c, &dy);
            dws.push(dw);
            dy = dx;
        }
        dws.reverse();
        let grads = self
            .slots
            .iter()
            .map(|s| {
                if !s.trainable {
                    return (Mat::zeros(s.up.rows, s.up.cols), Mat::zeros(s.down.rows, s.down.cols));
                }
                let dw = &dws[s.layer - self.start][s.kind][s.proj];
                (dw.mm_nt(&s.down).scale(self.scale), s.up.mm_tn(dw).scale(self.scale))
            })
            .collect();
        (loss, grads)
    }
}

fn check_shapes(model: &ToyModel, sample: &SyntheticSample, prompt: &Tensor) -> Result<()> {
    let c = model.config();
    if sample.target.shape()[1] != c.token_dim {
        return Err(Error::ShapeMismatch {
            op: "train target",
            left: sample.target.shape().to_vec(),
            right: vec![c.token_dim],
        });
    }
    let (_, p) = prompt.dims2()?;
    if p != c.prompt_dim {
        return Err(Error::ShapeMismatch {
            op: "train prompt",
            left: prompt.shape().to_vec(),
            right: vec![c.prompt_dim],
        });
    }
    Ok(())
}

/// Down factor from `N(0, 1/r)` seeded per stem; up factor zero.
fn lora_init<F: Scalar>(seed: u64, stem: &str, m: usize, n: usize, rank: usize) -> (Mat<F>, Mat<F>) {
    let mut rng = Rng::for_label(seed, "lora-init", stem);
    let down = Tensor::new(vec![rank, n], rng.normal_vec(rank * n, 1.0 / (rank as f64).sqrt())).expect("positive dims");
    (Mat::zeros(m, rank), Mat::from_tensor(&down))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: LoraAdapter,
    /// Loss before each update.
    pub losses: Vec<f32>,
    pub initial_loss: f32,
    /// Loss after the last update.
    pub final_loss: f32,
}

impl TrainOutcome {
    pub fn reduction(&self) -> f32 {
        1.0 - self.final_loss / self.initial_loss
    }
}

/// Adam-optimizes the adapter factors of `spec.blocks` to reconstruct
/// `sample.target` from a fixed noised input. The base model is read-only;
/// adapters already attached to `model` are ignored.
pub fn train_blora(model: &ToyModel, sample: &SyntheticSample, spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let sample = match spec.center_crop {
        Some(side) => sample.center_crop(side)?,
        None => sample.clone(),
    };
    check_shapes(model, &sample, &spec.prompt)?;
    let latent = noised_latent(&sample.target, spec.noise_level, spec.seed);
    let mut problem = Problem::<f32>::new(
        model,
        &spec.blocks,
        &spec.blocks,
        &spec.prompt,
        &latent,
        &sample.target,
        spec.scale(),
        |stem, m, n| lora_init(spec.seed, stem, m, n, spec.rank),
    );

    let AdamConfig { beta1, beta2, eps } = spec.adam;
    let mut moments: Vec<[(Vec<f32>, Vec<f32>); 2]> = problem
        .slots
        .iter()
        .map(|s| {
            [
                (vec![0.0; s.up.data.len()], vec![0.0; s.up.data.len()]),
                (vec![0.0; s.down.data.len()], vec![0.0; s.down.data.len()]),
            ]
        })
        .collect();
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let (loss, grads) = problem.loss_and_grads();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: loss as f64,
            });
        }
        losses.push(loss);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((slot, (gu, gd)), mom) in problem.slots.iter_mut().zip(&grads).zip(&mut moments) {
            let [mu, md] = mom;
            for (param, grad, (m, v)) in [(&mut slot.up, gu, mu), (&mut slot.down, gd, md)] {
                for i in 0..param.data.len() {
                    let g = grad.data[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    param.data[i] -= spec.learning_rate * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    let final_loss = problem.loss();
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: spec.steps,
            loss: final_loss as f64,
        });
    }

    let mut adapter = LoraAdapter::new();
    for s in &problem.slots {
        let pair = LoraPair::new(s.up.to_tensor(), s.down.to_tensor(), spec.network_alpha)?;
        adapter.insert(&s.stem, pair)?;
    }
    Ok(TrainOutcome {
        adapter,
        initial_loss: losses[0],
        losses,
        final_loss,
    })
}

/// MSE of `model` (with whatever adapters it has attached) against
/// `sample.target`, from the same noised input `train_blora` would use.
pub fn reconstruction_loss(model: &ToyModel, sample: &SyntheticSample, spec: &TrainSpec) -> Result<f32> {
    let sample = match spec.center_crop {
        Some(side) => sample.center_crop(side)?,
        None => sample.clone(),
    };
    check_shapes(model, &sample, &spec.prompt)?;
    let latent = noised_latent(&sample.target, spec.noise_level, spec.seed);
    let out = model.forward(&latent, &PromptRouting::new(spec.prompt.clone()))?;
    let diff = out.sub(&sample.target)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f32>() / diff.len() as f32)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub sampled: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude on parameters outside the trained
    /// blocks.
    pub frozen_max_abs: f64,
    /// `err(2h) / err(h)` at the sampled parameter with the largest gradient;
    /// about 4 for a second-order difference.
    pub order_ratio: f64,
}

pub const GRAD_CHECK_STEP: f64 = 1e-3;

fn param(p: &mut Problem<f64>, slot: usize, factor: usize, idx: usize) -> &mut f64 {
    let s = &mut p.slots[slot];
    let m = if factor == 0 { &mut s.up } else { &mut s.down };
    &mut m.data[idx]
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compares the analytic adapter gradient against central finite differences
/// in `f64`. Adapter factors get random nonzero values (with `B = 0` the
/// down-factor gradient would vanish identically). Slots are created for every
/// toy layer; those outside `blocks` are frozen.
pub fn grad_check(
    model: &ToyModel,
    sample: &SyntheticSample,
    blocks: &BTreeSet<BlockId>,
    prompt: &Tensor,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("at least one block must be checked".into()));
    }
    if model.config().token_dim > 8 {
        return Err(Error::InvalidArgument(format!(
            "grad_check wants token_dim <= 8, got {}",
            model.config().token_dim
        )));
    }
    check_shapes(model, sample, prompt)?;
    let rank = 2;
    let latent = noised_latent(&sample.target, 0.5, seed);
    let all: BTreeSet<BlockId> = BlockId::ALL.into_iter().collect();
    let mut rng = Rng::for_label(seed, "grad-check", "factors");
    let problem = Problem::<f64>::new(model, &all, blocks, prompt, &latent, &sample.target, 1.0, |_, m, n| {
        let mk = |rng: &mut Rng, r, c| Mat::from_tensor(&Tensor::new(vec![r, c], rng.normal_vec(r * c, 0.3)).unwrap());
        (mk(&mut rng, m, rank), mk(&mut rng, rank, n))
    });
    let (_, grads) = problem.loss_and_grads();

    let frozen_max_abs = problem
        .slots
        .iter()
        .zip(&grads)
        .filter(|(s, _)| !s.trainable)
        .flat_map(|(_, (gu, gd))| gu.data.iter().chain(&gd.data))
        .fold(0.0f64, |m, g| m.max(g.abs()));

    let trainable: Vec<usize> = (0..problem.slots.len())
        .filter(|&i| problem.slots[i].trainable)
        .collect();
    let mut pick = Rng::for_label(seed, "grad-check", "params");
    let mut probe = problem;
    let mut fd = |slot: usize, factor: usize, idx: usize, h: f64| {
        let orig = *param(&mut probe, slot, factor, idx);
        *param(&mut probe, slot, factor, idx) = orig + h;
        let lp = probe.loss();
        *param(&mut probe, slot, factor, idx) = orig - h;
        let lm = probe.loss();
        *param(&mut probe, slot, factor, idx) = orig;
        (lp - lm) / (2.0 * h)
    };

    let mut max_rel_error = 0.0f64;
    let mut best: Option<(usize, usize, usize, f64)> = None;
    for _ in 0..samples {
        let slot = trainable[pick.below(trainable.len())];
        let factor = pick.below(2);
        let (ga, gb) = &grads[slot];
        let g = if factor == 0 { ga } else { gb };
        let idx = pick.below(g.data.len());
        let analytic = g.data[idx];
        let numeric = fd(slot, factor, idx, GRAD_CHECK_STEP);
        max_rel_error = max_rel_error.max(rel_err(analytic, numeric));
        if best.is_none_or(|b| analytic.abs() > b.3.abs()) {
            best = Some((slot, factor, idx, analytic));
        }
    }
    let order_ratio = match best {
        Some((slot, factor, idx, analytic)) => {
            let e1 = (fd(slot, factor, idx, GRAD_CHECK_STEP) - analytic).abs();
            let e2 = (fd(slot, factor, idx, 2.0 * GRAD_CHECK_STEP) - analytic).abs();
            e2 / e1.max(f64::MIN_POSITIVE)
        }
        None => f64::NAN,
    };
    Ok(GradCheckReport {
        sampled: samples,
        max_rel_error,
        frozen_max_abs,
        order_ratio,
    })
}

/// Final reconstruction loss for every block pair; the diagonal trains a
/// single block. Symmetric by construction.
#[derive(Debug, Clone, Serialize)]
pub struct PairGrid {
    pub losses: [[f32; BLOCK_COUNT]; BLOCK_COUNT],
    pub initial_loss: f32,
}

impl PairGrid {
    /// Median over the 36 distinct cells.
    pub fn median(&self) -> f32 {
        let mut cells: Vec<f32> = (0..BLOCK_COUNT)
            .flat_map(|i| (i..BLOCK_COUNT).map(move |j| (i, j)))
            .map(|(i, j)| self.losses[i][j])
            .collect();
        cells.sort_by(f32::total_cmp);
        let n = cells.len();
        if n % 2 == 1 {
            cells[n / 2]
        } else {
            (cells[n / 2 - 1] + cells[n / 2]) / 2.0
        }
    }
}

/// Trains every unordered block pair in parallel. Cell `(i, j)` uses its own
/// seed derived from `(spec.seed, i, j)`.
pub fn pair_grid(model: &ToyModel, sample: &SyntheticSample, spec: &TrainSpec) -> Result<PairGrid> {
    let cells: Vec<(usize, usize)> = (0..BLOCK_COUNT)
        .flat_map(|i| (i..BLOCK_COUNT).map(move |j| (i, j)))
        .collect();
    let results: Vec<((usize, usize), TrainOutcome)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut cell = spec.clone();
            cell.blocks = [i, j].iter().map(|&b| BlockId::new(b).expect("< 8")).collect();
            cell.seed = Rng::derived(spec.seed, &[i as u64, j as u64]).next_u64();
            train_blora(model, sample, &cell).map(|o| ((i, j), o))
        })
        .collect::<Result<_>>()?;
    let mut losses = [[0.0f32; BLOCK_COUNT]; BLOCK_COUNT];
    let mut initial_loss = 0.0;
    for ((i, j), o) in results {
        losses[i][j] = o.final_loss;
        losses[j][i] = o.final_loss;
        initial_loss = o.initial_loss;
    }
    Ok(PairGrid { losses, initial_loss })
}
