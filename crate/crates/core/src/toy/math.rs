//! Multi-head attention with hand-written reverse-mode gradients.
//!
//! Generic over the float type: training runs in `f32`, finite-difference
//! checks instantiate the same code in `f64`.
//!
//! Weight convention: a projection `W` is `out × in` and applies to row-major
//! token matrices as `Y = X · Wᵀ`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

pub trait Scalar: Float + Debug + Send + Sync + 'static {}
impl<T: Float + Debug + Send + Sync + 'static> Scalar for T {}

pub(crate) fn cast<F: Scalar>(x: f64) -> F {
    F::from(x).expect("finite constant")
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.dims2().expect("rank-2 tensor");
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| cast(v as f64)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("consistent matrix")
    }

    /// `self · other`
    pub fn mm(&self, other: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(self.cols, other.rows);
        Mat {
            rows: self.rows,
            cols: other.cols,
            data: kernels::matmul(&self.data, &other.data, self.rows, self.cols, other.cols),
        }
    }

    /// `self · otherᵀ`
    pub fn mm_nt(&self, other: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(self.cols, other.cols);
        Mat {
            rows: self.rows,
            cols: other.rows,
            data: kernels::matmul_nt(&self.data, &other.data, self.rows, self.cols, other.rows),
        }
    }

    /// `selfᵀ · other`
    pub fn mm_tn(&self, other: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(self.rows, other.rows);
        Mat {
            rows: self.cols,
            cols: other.cols,
            data: kernels::matmul_tn(&self.data, &other.data, self.rows, self.cols, other.cols),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn add(&self, other: &Mat<F>) -> Mat<F> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&self, s: F) -> Mat<F> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| *v * s).collect(),
        }
    }

    /// Columns `[h·width, (h+1)·width)`.
    pub fn head(&self, h: usize, width: usize) -> Mat<F> {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            let start = r * self.cols + h * width;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Mat {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn set_head(&mut self, h: usize, part: &Mat<F>) {
        let width = part.cols;
        for r in 0..self.rows {
            let start = r * self.cols + h * width;
            self.data[start..start + width].copy_from_slice(&part.data[r * width..(r + 1) * width]);
        }
    }
}

/// The four projections of one attention unit, in `Q, K, V, out` order.
pub(crate) type ProjSet<F> = [Mat<F>; 4];

pub(crate) struct AttnCache<F> {
    x: Mat<F>,
    ctx: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    probs: Vec<Mat<F>>,
    o: Mat<F>,
}

pub(crate) struct AttnGrads<F> {
    pub dx: Mat<F>,
    pub dctx: Mat<F>,
    pub dw: ProjSet<F>,
}

/// `softmax(q_h·k_hᵀ/√d_h)·v_h` per head, heads concatenated. Returns the
/// output and the per-head attention probabilities.
pub(crate) fn multi_head<F: Scalar>(q: &Mat<F>, k: &Mat<F>, v: &Mat<F>, heads: usize) -> (Mat<F>, Vec<Mat<F>>) {
    let width = q.cols / heads;
    let inv_sqrt = F::one() / cast::<F>(width as f64).sqrt();
    let mut out = Mat::zeros(q.rows, v.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.head(h, width), k.head(h, width), v.head(h, width));
        let mut s = qh.mm_nt(&kh).scale(inv_sqrt);
        kernels::softmax_rows(&mut s.data, s.cols);
        out.set_head(h, &s.mm(&vh));
        probs.push(s);
    }
    (out, probs)
}

pub(crate) fn attn_forward<F: Scalar>(
    w: &ProjSet<F>,
    heads: usize,
    x: &Mat<F>,
    ctx: &Mat<F>,
) -> (Mat<F>, AttnCache<F>) {
    let q = x.mm_nt(&w[0]);
    let k = ctx.mm_nt(&w[1]);
    let v = ctx.mm_nt(&w[2]);
    let (o, probs) = multi_head(&q, &k, &v, heads);
    let y = o.mm_nt(&w[3]);
    let cache = AttnCache {
        x: x.clone(),
        ctx: ctx.clone(),
        q,
        k,
        v,
        probs,
        o,
    };
    (y, cache)
}

pub(crate) fn attn_backward<F: Scalar>(w: &ProjSet<F>, heads: usize, c: &AttnCache<F>, dy: &Mat<F>) -> AttnGrads<F> {
    let width = c.q.cols / heads;
    let inv_sqrt = F::one() / cast::<F>(width as f64).sqrt();

    let dw_out = dy.mm_tn(&c.o);
    let d_o = dy.mm(&w[3]);

    let mut dq = Mat::zeros(c.q.rows, c.q.cols);
    let mut dk = Mat::zeros(c.k.rows, c.k.cols);
    let mut dv = Mat::zeros(c.v.rows, c.v.cols);
    for h in 0..heads {
        let p = &c.probs[h];
        let (qh, kh, vh) = (c.q.head(h, width), c.k.head(h, width), c.v.head(h, width));
        let doh = d_o.head(h, width);
        let dp = doh.mm_nt(&vh);
        dv.set_head(h, &p.mm_tn(&doh));
        // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
        let mut ds = Mat::zeros(p.rows, p.cols);
        for r in 0..p.rows {
            let row = r * p.cols..(r + 1) * p.cols;
            let dot = p.data[row.clone()]
                .iter()
                .zip(&dp.data[row.clone()])
                .fold(F::zero(), |acc, (a, b)| acc + *a * *b);
            for i in row {
                ds.data[i] = p.data[i] * (dp.data[i] - dot) * inv_sqrt;
            }
        }
        dq.set_head(h, &ds.mm(&kh));
        dk.set_head(h, &ds.mm_tn(&qh));
    }

    let dw_q = dq.mm_tn(&c.x);
    let dw_k = dk.mm_tn(&c.ctx);
    let dw_v = dv.mm_tn(&c.ctx);
    let dx = dq.mm(&w[0]);
    let mut dctx = dk.mm(&w[1]);
    dctx.add_assign(&dv.mm(&w[2]));
    AttnGrads {
        dx,
        dctx,
        dw: [dw_q, dw_k, dw_v, dw_out],
    }
}

/// Self-attention then cross-attention, each with a residual connection.
pub(crate) struct LayerCache<F> {
    self_attn: AttnCache<F>,
    cross_attn: AttnCache<F>,
}

/// Per-layer weights: `[self, cross]`.
pub(crate) type LayerWeights<F> = [ProjSet<F>; 2];

pub(crate) fn layer_forward<F: Scalar>(
    w: &LayerWeights<F>,
    heads: usize,
    x: &Mat<F>,
    prompt: &Mat<F>,
) -> (Mat<F>, LayerCache<F>) {
    let (y1, self_attn) = attn_forward(&w[0], heads, x, x);
    let x1 = x.add(&y1);
    let (y2, cross_attn) = attn_forward(&w[1], heads, &x1, prompt);
    (x1.add(&y2), LayerCache { self_attn, cross_attn })
}

/// Returns `(d input, [self dW, cross dW])`.
pub(crate) fn layer_backward<F: Scalar>(
    w: &LayerWeights<F>,
    heads: usize,
    cache: &LayerCache<F>,
    d_out: &Mat<F>,
) -> (Mat<F>, [ProjSet<F>; 2]) {
    let cross = attn_backward(&w[1], heads, &cache.cross_attn, d_out);
    let mut dx1 = d_out.clone();
    dx1.add_assign(&cross.dx);
    let selfg = attn_backward(&w[0], heads, &cache.self_attn, &dx1);
    let mut dx = dx1;
    dx.add_assign(&selfg.dx);
    dx.add_assign(&selfg.dctx);
    (dx, [selfg.dw, cross.dw])
}

/// Public multi-head attention on tensors: `q: t×d`, `k, v: s×d`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, dq) = q.dims2()?;
    let (s, dk) = k.dims2()?;
    let (s2, dv) = v.dims2()?;
    if heads == 0 || dq != dk || dq % heads != 0 || dv % heads != 0 || s != s2 {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape().to_vec(),
            right: [k.shape(), v.shape()].concat(),
        });
    }
    let (out, _) = multi_head(
        &Mat::<f32>::from_tensor(q),
        &Mat::from_tensor(k),
        &Mat::from_tensor(v),
        heads,
    );
    Ok(out.to_tensor())
}
