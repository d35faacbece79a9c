use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{normalize, Tensor};

/// Per-token norm of the content field.
const CONTENT_AMP: f64 = 0.8;
/// Norm of the constant style color.
const COLOR_AMP: f64 = 0.6;
/// Per-token norm of the style texture.
const TEXTURE_AMP: f64 = 0.5;

/// A family of token grids composed from a content label and a style label.
///
/// Content occupies the first half of the channels: a blob-shaped spatial
/// mask (`±1` per token, half the tokens each way) along a fixed channel
/// direction. Style occupies the second half: a constant color vector plus a
/// high-frequency `±1` texture along a label-specific direction. Changing the
/// content label moves a comparable amount of energy to changing the style
/// label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamily {
    pub grid_side: usize,
    pub token_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub content_label: u32,
    pub style_label: u32,
    pub grid_side: usize,
    pub content_field: Tensor,
    pub style_field: Tensor,
    pub target: Tensor,
}

fn unit(rng: &mut Rng, n: usize) -> Vec<f32> {
    loop {
        if let Ok(v) = normalize(&rng.normal_vec(n, 1.0)) {
            return v;
        }
    }
}

impl SyntheticFamily {
    pub fn new(grid_side: usize, token_dim: usize, seed: u64) -> Result<Self> {
        if grid_side < 2 || token_dim < 2 || !token_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "synthetic family needs grid_side >= 2 and an even token_dim >= 2, got {grid_side} and {token_dim}"
            )));
        }
        Ok(SyntheticFamily {
            grid_side,
            token_dim,
            seed,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// `±1` per token: a smoothed random field thresholded at its median.
    pub fn content_mask(&self, label: u32) -> Vec<f32> {
        let s = self.grid_side;
        let mut rng = Rng::derived(self.seed, &[1, label as u64]);
        let raw: Vec<f64> = (0..s * s).map(|_| rng.normal()).collect();
        let mut smooth = vec![0.0f64; s * s];
        for r in 0..s {
            for c in 0..s {
                let mut acc = 0.0;
                for dr in r.saturating_sub(1)..(r + 2).min(s) {
                    for dc in c.saturating_sub(1)..(c + 2).min(s) {
                        acc += raw[dr * s + dc];
                    }
                }
                smooth[r * s + c] = acc;
            }
        }
        let mut order: Vec<usize> = (0..s * s).collect();
        order.sort_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(a.cmp(&b)));
        let mut mask = vec![-1.0f32; s * s];
        for &i in &order[s * s / 2..] {
            mask[i] = 1.0;
        }
        mask
    }

    pub fn sample(&self, content_label: u32, style_label: u32) -> SyntheticSample {
        let (t, d) = (self.tokens(), self.token_dim);
        let half = d / 2;

        let content_dir = unit(&mut Rng::derived(self.seed, &[0]), half);
        let mask = self.content_mask(content_label);
        let mut content = vec![0.0f32; t * d];
        for (i, m) in mask.iter().enumerate() {
            for (j, u) in content_dir.iter().enumerate() {
                content[i * d + j] = m * u * CONTENT_AMP as f32;
            }
        }

        let mut rng = Rng::derived(self.seed, &[2, style_label as u64]);
        let color = unit(&mut rng, half);
        let texture_dir = unit(&mut rng, half);
        let mut texture: Vec<f32> = (0..t).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for i in (1..t).rev() {
            texture.swap(i, rng.below(i + 1));
        }
        let mut style = vec![0.0f32; t * d];
        for i in 0..t {
            for j in 0..half {
                style[i * d + half + j] =
                    color[j] * COLOR_AMP as f32 + texture[i] * texture_dir[j] * TEXTURE_AMP as f32;
            }
        }

        let target: Vec<f32> = content.iter().zip(&style).map(|(a, b)| a + b).collect();
        let mk = |v| Tensor::new(vec![t, d], v).expect("positive dims");
        SyntheticSample {
            content_label,
            style_label,
            grid_side: self.grid_side,
            content_field: mk(content),
            style_field: mk(style),
            target: mk(target),
        }
    }
}

impl SyntheticSample {
    /// The central `side × side` window of the grid.
    pub fn center_crop(&self, side: usize) -> Result<SyntheticSample> {
        if side == 0 || side > self.grid_side {
            return Err(Error::InvalidArgument(format!(
                "crop side {side} outside 1..={}",
                self.grid_side
            )));
        }
        let off = (self.grid_side - side) / 2;
        let crop = |t: &Tensor| {
            let d = t.shape()[1];
            let mut out = Vec::with_capacity(side * side * d);
            for r in off..off + side {
                for c in off..off + side {
                    let row = r * self.grid_side + c;
                    out.extend_from_slice(&t.data()[row * d..(row + 1) * d]);
                }
            }
            Tensor::new(vec![side * side, d], out).expect("positive dims")
        };
        Ok(SyntheticSample {
            content_label: self.content_label,
            style_label: self.style_label,
            grid_side: side,
            content_field: crop(&self.content_field),
            style_field: crop(&self.style_field),
            target: crop(&self.target),
        })
    }
}
