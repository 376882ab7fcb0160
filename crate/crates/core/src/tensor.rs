//! Dense numeric substrate: 4-D tensors, row-major matrices, GEMM and the
//! seeded random source shared by every other module.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense `(n, c, h, w)` array stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::from_vec([n, c, h, w], vec![0.0; n * c * h * w])
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("tensor dims must be >= 1, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Number of values in one `(c, h, w)` item.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Copies the listed items into a new tensor.
    pub fn gather(&self, items: &[usize]) -> Result<Self> {
        let len = self.item_len();
        let mut data = Vec::with_capacity(items.len() * len);
        for &i in items {
            data.extend_from_slice(self.item(i));
        }
        Self::from_vec([items.len(), self.dims[1], self.dims[2], self.dims[3]], data)
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

/// General matrix product `a · b`.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "gemm: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    matmul(&a.data, &b.data, &mut c.data, a.rows, a.cols, b.cols);
    Ok(c)
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub(crate) fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: k×m` stored row-major, `b: k×n`, `c: m×n`.
pub(crate) fn matmul_at_b(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn matmul_a_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for ch in 0..chunks {
        let pa = &a[ch * 8..ch * 8 + 8];
        let pb = &b[ch * 8..ch * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut sum = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Seeded ChaCha8 stream. Substreams use ChaCha's 64-bit stream id, so
/// `Rng::new(s).substream(k)` is stable across platforms and releases of
/// this crate.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from the root seed; does not advance `self`.
    pub fn substream(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    /// Uniform draw from `[0, bound)`.
    pub fn uniform_int(&mut self, bound: usize) -> Result<usize> {
        if bound == 0 {
            return Err(Error::InvalidArgument("uniform_int bound must be >= 1".into()));
        }
        Ok(self.inner.random_range(0..bound))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && (p >= 1.0 || self.uniform() < p)
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `[0, len)`, in draw order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, amount.min(len)).into_vec()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                c.set(i, j, s as f32);
            }
        }
        c
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_left_is_noop() {
        let b = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(gemm(&Matrix::identity(2), &b).unwrap(), b);
        assert_eq!(gemm(&b, &Matrix::identity(3)).unwrap(), b);
    }

    #[test]
    fn hand_dot_product() {
        let a = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Matrix::from_vec(3, 1, vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(gemm(&a, &b).unwrap().as_slice(), &[32.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = gemm(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 times 2x3"), "{msg}");
    }

    #[test]
    fn gemm_matches_naive_on_random_inputs() {
        let mut rng = Rng::new(11);
        for trial in 0..120 {
            let (m, k, n) = if trial == 0 {
                (9, 27, 2)
            } else {
                (1 + rng.uniform_int(12).unwrap(), 1 + rng.uniform_int(40).unwrap(), 1 + rng.uniform_int(12).unwrap())
            };
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let got = gemm(&a, &b).unwrap();
            let want = naive(&a, &b);
            let scale = want.as_slice().iter().fold(1.0f32, |s, v| s.max(v.abs()));
            for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((g - w).abs() <= 1e-6 * scale * k as f32, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn transposed_kernels_agree_with_gemm() {
        let mut rng = Rng::new(5);
        let a = random_matrix(&mut rng, 4, 7);
        let b = random_matrix(&mut rng, 7, 5);
        let want = gemm(&a, &b).unwrap();
        let mut c1 = vec![0.0; 20];
        matmul_at_b(a.transpose().as_slice(), b.as_slice(), &mut c1, 4, 7, 5);
        let mut c2 = vec![0.0; 20];
        matmul_a_bt(a.as_slice(), b.transpose().as_slice(), &mut c2, 4, 7, 5);
        for i in 0..20 {
            assert!((c1[i] - want.as_slice()[i]).abs() < 1e-5);
            assert!((c2[i] - want.as_slice()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn uniform_int_bound_one_is_zero() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            assert_eq!(rng.uniform_int(1).unwrap(), 0);
        }
        assert!(rng.uniform_int(0).is_err());
    }

    #[test]
    fn uniform_int_golden_sequence() {
        let mut rng = Rng::new(2016);
        let draws: Vec<usize> = (0..5).map(|_| rng.uniform_int(4).unwrap()).collect();
        assert_eq!(draws, GOLDEN_BOUND4_SEED2016);
    }

    // Captured from this generator; a change means the stream changed.
    const GOLDEN_BOUND4_SEED2016: [usize; 5] = [0, 2, 3, 1, 1];

    #[test]
    fn uniform_int_is_uniform() {
        let mut rng = Rng::new(99);
        let mut bins = [0usize; 4];
        for _ in 0..100_000 {
            bins[rng.uniform_int(4).unwrap()] += 1;
        }
        for b in bins {
            let f = b as f64 / 100_000.0;
            assert!((f - 0.25).abs() <= 0.01, "{bins:?}");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut s1 = a.substream(7);
        let mut s2 = Rng::new(42).substream(7);
        let mut s3 = Rng::new(42).substream(8);
        let x = s1.next_u64();
        assert_eq!(x, s2.next_u64());
        assert_ne!(x, s3.next_u64());
    }
}
