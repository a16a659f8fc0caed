//! Dense row-major tensors over f32 (training/eval) or f64 (gradient
//! checking). Weights and activations are f32 everywhere; the f64
//! instantiation exists so analytic gradients can be validated against
//! central finite differences without f32 rounding noise.

use crate::error::{Error, Result};

/// Scalar element of a tensor. Implemented for f32 and f64 only.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense row-major tensor. `data.len() == shape.iter().product()` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::BadTensorData {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[F] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Lossless element conversion (exact for f32 -> f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }
}

impl Tensor<f32> {
    /// Little-endian bytes of the payload, for digests and checkpoint I/O.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bits().to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 4 != 0 {
            return Err(Error::CheckpointFormat {
                reason: format!("payload length {} not a multiple of 4", bytes.len()),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

trait F32Bits {
    fn to_le_bits(self) -> u32;
    fn from_le_bits(bits: u32) -> Self;
}

impl F32Bits for f32 {
    #[inline(always)]
    fn to_le_bits(self) -> u32 {
        self.to_bits()
    }
    #[inline(always)]
    fn from_le_bits(bits: u32) -> Self {
        f32::from_bits(bits)
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. These are the hot loops; everything is written axpy/dot
// style so the autovectorizer can do its job, and every reduction has a
// fixed order so results are bit-stable run to run.
// ---------------------------------------------------------------------------

/// `C[n,m] = A[n,k] @ B[k,m]`
pub fn mm<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * m..(l + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C[n,m] = A[n,k] @ B[m,k]^T` (dot products of contiguous rows)
pub fn mm_nt<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `C[k,m] = A[n,k]^T @ B[n,m]`
pub fn mm_tn<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            let crow = &mut c[l * m..(l + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Fixed-order 4-lane dot product: deterministic and still gives the
/// optimizer some ILP to chew on.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = F::ZERO;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::BadTensorData { .. }));
    }

    #[test]
    fn mm_small_reference() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0f32, 2.0, 3.0, 4.0];
        let b = vec![5.0f32, 6.0, 7.0, 8.0];
        assert_eq!(mm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mm_variants_agree() {
        let mut rng = crate::rng::Rng::new(42);
        let (n, k, m) = (5, 7, 3);
        let a: Vec<f64> = (0..n * k).map(|_| rng.gaussian()).collect();
        let b: Vec<f64> = (0..k * m).map(|_| rng.gaussian()).collect();
        let c = mm(&a, &b, n, k, m);
        // B^T laid out as [m,k]
        let mut bt = vec![0.0; m * k];
        for l in 0..k {
            for j in 0..m {
                bt[j * k + l] = b[l * m + j];
            }
        }
        let c2 = mm_nt(&a, &bt, n, k, m);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // A^T laid out as [k,n]: mm_tn(A^T as "a") reproduces plain mm
        let mut at = vec![0.0; k * n];
        for i in 0..n {
            for l in 0..k {
                at[l * n + i] = a[i * k + l];
            }
        }
        let c3 = mm_tn(&at, &b, k, n, m);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn le_bytes_roundtrip() {
        let t = Tensor::from_vec(&[2, 2], vec![1.5f32, -0.25, 3.0e-8, -1.0]).unwrap();
        let back = Tensor::from_le_bytes(&[2, 2], &t.le_bytes()).unwrap();
        assert_eq!(t, back);
    }
}
