//! Dense row-major tensors and the numeric kernels built on them.
//!
//! All arithmetic happens in `f32`. Half-precision dtypes exist only at the
//! file boundary: a tensor remembers the dtype it was decoded from so that it
//! can be written back in the same encoding, but its elements are always held
//! as `f32`.
//!
//! The kernels in [`kernels`] are generic over the float type so that the toy
//! network can reuse them in `f64` for finite-difference checks.

use std::fmt;

use half::{bf16, f16};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Immutable dense tensor. `data.len() == shape.iter().product()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(shape.to_vec()))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let count = check_shape(&shape)?;
        if count != data.len() {
            return Err(Error::ElementCount {
                shape,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            dtype: DType::F32,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let count = check_shape(&shape)?;
        Tensor::new(shape, vec![0.0; count])
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::ElementCount {
                    shape: vec![rows.len(), cols],
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Decodes little-endian bytes of the given dtype. Half-precision inputs
    /// must decode to finite values.
    pub fn from_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let count = check_shape(&shape)?;
        if bytes.len() != count * dtype.byte_width() {
            return Err(Error::ElementCount {
                shape,
                actual: bytes.len() / dtype.byte_width(),
            });
        }
        let data = decode(dtype, bytes)?;
        Ok(Tensor { shape, dtype, data })
    }

    /// Encodes the elements in this tensor's storage dtype.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(self.dtype, &self.data)
    }

    /// Rounds every element to `dtype` (round-to-nearest-even) and tags the
    /// result with it. Values that overflow the target format are rejected.
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        let bytes = encode(dtype, &self.data)?;
        Tensor::from_bytes(dtype, self.shape.clone(), &bytes)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape(self.shape.clone())),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Tensor::new(vec![c, r], kernels::transpose(&self.data, r, c))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: DType::F32,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        axpy_scale(self, other, 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        axpy_scale(self, other, -1.0)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn frobenius_norm(&self) -> f32 {
        self.data.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    /// Bitwise equality of shape and elements, ignoring storage dtype.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn decode(dtype: DType, bytes: &[u8]) -> Result<Vec<f32>> {
    match dtype {
        DType::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()),
        DType::F16 | DType::BF16 => bytes
            .chunks_exact(2)
            .enumerate()
            .map(|(index, c)| {
                let bits = u16::from_le_bytes([c[0], c[1]]);
                let v = match dtype {
                    DType::F16 => f16::from_bits(bits).to_f32(),
                    _ => bf16::from_bits(bits).to_f32(),
                };
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite {
                        dtype: dtype.as_str(),
                        index,
                    })
                }
            })
            .collect(),
    }
}

fn encode(dtype: DType, data: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * dtype.byte_width());
    for (index, &v) in data.iter().enumerate() {
        match dtype {
            DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F16 | DType::BF16 => {
                let (bits, back) = match dtype {
                    DType::F16 => {
                        let h = f16::from_f32(v);
                        (h.to_bits(), h.to_f32())
                    }
                    _ => {
                        let h = bf16::from_f32(v);
                        (h.to_bits(), h.to_f32())
                    }
                };
                if !back.is_finite() {
                    return Err(Error::NonFinite {
                        dtype: dtype.as_str(),
                        index,
                    });
                }
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// `c[i][j] = Σ_t a[i][t]·b[t][j]`, accumulated in `t` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Tensor::new(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut data = x.data.clone();
    kernels::softmax_rows(&mut data, n);
    Tensor::new(x.shape.clone(), data)
}

/// Elementwise `w0 + alpha·delta`. `alpha == 0` returns `w0` unchanged.
pub fn axpy_scale(w0: &Tensor, delta: &Tensor, alpha: f32) -> Result<Tensor> {
    same_shape("axpy_scale", w0, delta)?;
    if alpha == 0.0 {
        return Ok(Tensor {
            dtype: DType::F32,
            ..w0.clone()
        });
    }
    let data = w0.data.iter().zip(&delta.data).map(|(w, d)| w + alpha * d).collect();
    Tensor::new(w0.shape.clone(), data)
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    kernels::cosine(x, y).ok_or(Error::ZeroNorm)
}

/// Returns `x / ‖x‖`, or a zero-norm error.
pub fn normalize(x: &[f32]) -> Result<Vec<f32>> {
    let norm = x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(x.iter().map(|v| (*v as f64 / norm) as f32).collect())
}

pub mod kernels {
    //! Slice-level kernels shared by [`Tensor`](super::Tensor) and the toy network.

    use num_traits::Float;

    pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        let mut c = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (t, &a_it) in a_row.iter().enumerate() {
                let b_row = &b[t * n..(t + 1) * n];
                for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                    *c_ij = *c_ij + a_it * b_tj;
                }
            }
        }
        c
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
        let mut c = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for (x, y) in a_row.iter().zip(b_row) {
                    acc = acc + *x * *y;
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    /// `aᵀ · b` for `a: k×m`, `b: k×n`.
    pub fn matmul_tn<F: Float>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
        let mut c = vec![F::zero(); m * n];
        for t in 0..k {
            let a_row = &a[t * m..(t + 1) * m];
            let b_row = &b[t * n..(t + 1) * n];
            for (i, &a_ti) in a_row.iter().enumerate() {
                let c_row = &mut c[i * n..(i + 1) * n];
                for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                    *c_ij = *c_ij + a_ti * b_tj;
                }
            }
        }
        c
    }

    pub fn transpose<F: Copy>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
        let mut out = Vec::with_capacity(a.len());
        for j in 0..cols {
            for i in 0..rows {
                out.push(a[i * cols + j]);
            }
        }
        out
    }

    pub fn softmax_rows<F: Float>(data: &mut [F], cols: usize) {
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
    }

    pub fn cosine<F: Float>(x: &[F], y: &[F]) -> Option<F> {
        let mut dot = 0.0f64;
        let mut nx = 0.0f64;
        let mut ny = 0.0f64;
        for (a, b) in x.iter().zip(y) {
            let (a, b) = (a.to_f64()?, b.to_f64()?);
            dot += a * b;
            nx += a * a;
            ny += b * b;
        }
        if nx == 0.0 || ny == 0.0 {
            return None;
        }
        F::from((dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normal_vec(n, 1.0)).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for t in 0..k {
                    acc += a.get2(i, t) * b.get2(t, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_outer_product() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap(), x);

        let col = Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let row = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        let outer = matmul(&col, &row).unwrap();
        assert_eq!(outer.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, vec![4, 3]);
        let b = random(&mut rng, vec![3, 5]);
        let c = matmul(&a, &b).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 3]).unwrap();
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, vec![3, 4]);
        let b = random(&mut rng, vec![5, 4]);
        let bt = b.transpose().unwrap();
        let plain = matmul(&a, &bt).unwrap();
        let nt = kernels::matmul_nt(a.data(), b.data(), 3, 4, 5);
        assert!(plain.data().iter().zip(&nt).all(|(x, y)| (x - y).abs() < 1e-5));

        let at = a.transpose().unwrap();
        let c = random(&mut rng, vec![3, 2]);
        let plain = matmul(&at, &c).unwrap();
        let tn = kernels::matmul_tn(a.data(), c.data(), 3, 4, 2);
        assert!(plain.data().iter().zip(&tn).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);

        let mut rng = Rng::new(3);
        let s = softmax_rows(&random(&mut rng, vec![3, 4])).unwrap();
        for row in s.data().chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77)), evaluated by hand in f64.
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got as f64 - expected).abs() < 1e-7);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn axpy_examples() {
        let mut rng = Rng::new(5);
        let w0 = random(&mut rng, vec![3, 4]);
        let delta = random(&mut rng, vec![3, 4]);
        assert!(axpy_scale(&w0, &delta, 0.0).unwrap().bit_eq(&w0));

        let zero = Tensor::zeros(vec![3, 4]).unwrap();
        assert_eq!(axpy_scale(&zero, &delta, 1.0).unwrap(), delta);

        let got = axpy_scale(&w0, &delta, 1.1).unwrap();
        for i in 0..w0.len() {
            let oracle = w0.data()[i] + 1.1f32 * delta.data()[i];
            assert_eq!(got.data()[i].to_bits(), oracle.to_bits());
        }
        assert!(axpy_scale(&w0, &Tensor::zeros(vec![4, 3]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    /// IEEE-754 binary16 edge cases with hand-derived round-to-nearest-even results.
    #[test]
    fn half_precision_edge_table() {
        let min_sub = 2f32.powi(-24);
        let cases: &[(f32, f32)] = &[
            (1.0, 1.0),
            (-2.5, -2.5),
            (65504.0, 65504.0),
            // just below the overflow midpoint rounds down to max finite
            (65519.0, 65504.0),
            (min_sub, min_sub),
            // exactly halfway between 0 and the smallest subnormal: ties to even (0)
            (2f32.powi(-25), 0.0),
            // 1.5 ulps of the smallest subnormal rounds up to 2 ulps
            (3.0 * 2f32.powi(-26), min_sub),
            (3.0 * 2f32.powi(-25), 2.0 * min_sub),
            // halfway between 1 and 1 + 2^-10: ties to even (1)
            (1.0 + 2f32.powi(-11), 1.0),
            // halfway between 1 + 2^-10 and 1 + 2^-9: ties to even (1 + 2^-9)
            (1.0 + 3.0 * 2f32.powi(-11), 1.0 + 2f32.powi(-9)),
            // largest subnormal and smallest normal
            (1023.0 * min_sub, 1023.0 * min_sub),
            (2f32.powi(-14), 2f32.powi(-14)),
        ];
        for &(input, expected) in cases {
            let t = Tensor::new(vec![1], vec![input]).unwrap();
            let h = t.cast(DType::F16).unwrap();
            assert_eq!(h.data()[0].to_bits(), expected.to_bits(), "f16 rounding of {input:e}");
            // decode(encode(x)) is stable once rounded
            let again = Tensor::from_bytes(DType::F16, vec![1], &h.to_bytes().unwrap()).unwrap();
            assert!(again.bit_eq(&h));
        }
        for overflow in [65520.0f32, 1e6, f32::INFINITY, f32::NEG_INFINITY] {
            let t = Tensor::new(vec![1], vec![overflow]).unwrap();
            assert!(t.cast(DType::F16).is_err(), "{overflow} must be rejected");
        }
        // +inf, -inf and NaN bit patterns are rejected on decode
        for bits in [0x7c00u16, 0xfc00, 0x7e00] {
            assert!(Tensor::from_bytes(DType::F16, vec![1], &bits.to_le_bytes()).is_err());
        }
    }

    #[test]
    fn bf16_round_trip() {
        let t = Tensor::new(vec![3], vec![1.0, -3.0, 1.0 + 2f32.powi(-8)]).unwrap();
        let b = t.cast(DType::BF16).unwrap();
        // 1 + 2^-8 is halfway between 1 and 1 + 2^-7: ties to even (1)
        assert_eq!(b.data(), &[1.0, -3.0, 1.0]);
        assert_eq!(b.dtype(), DType::BF16);
        assert!(Tensor::from_bytes(DType::BF16, vec![1], &0x7f80u16.to_le_bytes()).is_err());
    }
}
