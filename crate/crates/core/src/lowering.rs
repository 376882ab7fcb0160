//! Convolution lowering (im2col) and its strided variant.
//!
//! A convolution over a `c × H × W` input with `m` kernels of size `k × k`
//! becomes one product between a feature matrix (`P × Q`, one row per output
//! position, `Q = c·k²` columns) and a kernel matrix (`Q × m`). Columns are
//! ordered channel-major, then kernel row `dy`, then kernel column `dx`.
//!
//! When every outgoing kernel of a source channel shares the same
//! `(stride, offset)` pattern, the pruned kernel positions are identical for
//! all output maps, so the matching feature-matrix columns and kernel-matrix
//! rows can be deleted outright. The shrunken matrices stay dense.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix, Tensor4};

/// Keep-every-`stride`-th position of a flattened `k × k` kernel, starting at
/// `offset`. Shared by all outgoing kernels of one source channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StridedPattern {
    pub stride: u8,
    pub offset: u8,
}

impl StridedPattern {
    pub const DENSE: StridedPattern = StridedPattern { stride: 1, offset: 0 };

    pub fn new(stride: u8, offset: u8) -> Result<Self> {
        let p = StridedPattern { stride, offset };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.offset >= self.stride {
            return Err(Error::InvalidArgument(format!(
                "offset {} must be smaller than stride {}",
                self.offset, self.stride
            )));
        }
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.stride == 1
    }

    #[inline]
    pub fn keeps(&self, pos: usize) -> bool {
        let (s, o) = (self.stride as usize, self.offset as usize);
        pos >= o && (pos - o) % s == 0
    }

    /// Surviving positions out of `k2` flattened kernel entries.
    pub fn kept_count(&self, k2: usize) -> usize {
        let (s, o) = (self.stride as usize, self.offset as usize);
        if o >= k2 {
            0
        } else {
            (k2 - o).div_ceil(s)
        }
    }
}

impl Default for StridedPattern {
    fn default() -> Self {
        Self::DENSE
    }
}

/// Source of one feature-matrix column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ColumnEntry {
    pub channel: usize,
    pub dy: usize,
    pub dx: usize,
}

impl ColumnEntry {
    /// Offset of this entry inside one `(c, k, k)` kernel.
    #[inline]
    pub fn kernel_offset(&self, k: usize) -> usize {
        (self.channel * k + self.dy) * k + self.dx
    }
}

/// Shape of one convolution layer applied to a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub out_maps: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.in_channels == 0 || self.out_maps == 0 {
            return Err(Error::InvalidArgument(format!("degenerate geometry {self:?}")));
        }
        if self.kernel > self.in_h || self.kernel > self.in_w {
            return Err(Error::Shape(format!(
                "kernel {k}x{k} larger than input {}x{}",
                self.in_h,
                self.in_w,
                k = self.kernel
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        self.in_h - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.kernel + 1
    }

    /// Rows of the feature matrix.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn dense_q(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Surviving columns for the given per-channel patterns (`None` = dense).
pub fn column_map(
    channels: usize,
    k: usize,
    pattern: Option<&[StridedPattern]>,
) -> Result<Vec<ColumnEntry>> {
    if let Some(p) = pattern {
        if p.len() != channels {
            return Err(Error::Shape(format!(
                "strided pattern covers {} channels, layer has {channels}",
                p.len()
            )));
        }
        for sp in p {
            sp.validate()?;
        }
    }
    let mut cols = Vec::with_capacity(channels * k * k);
    for c in 0..channels {
        let sp = pattern.map_or(StridedPattern::DENSE, |p| p[c]);
        for pos in 0..k * k {
            if sp.keeps(pos) {
                cols.push(ColumnEntry { channel: c, dy: pos / k, dx: pos % k });
            }
        }
    }
    Ok(cols)
}

/// `Q = Σ_c ceil((k² − o_c) / s_c)`.
pub fn strided_q(k: usize, pattern: &[StridedPattern]) -> usize {
    pattern.iter().map(|p| p.kept_count(k * k)).sum()
}

/// Feature matrix, kernel matrix and column provenance of one lowered conv.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredPair {
    /// `P × Q`
    pub feature: Matrix,
    /// `Q × m`
    pub kernel: Matrix,
    pub col_map: Vec<ColumnEntry>,
    pub out_h: usize,
    pub out_w: usize,
}

fn geometry_of(input: &Tensor4, kernels: &Tensor4) -> Result<ConvGeometry> {
    if input.n() != 1 {
        return Err(Error::Shape(format!("lowering takes one image, got batch of {}", input.n())));
    }
    if kernels.c() != input.c() || kernels.h() != kernels.w() {
        return Err(Error::Shape(format!(
            "kernels {:?} do not match input {:?}",
            kernels.dims(),
            input.dims()
        )));
    }
    let g = ConvGeometry {
        in_channels: input.c(),
        in_h: input.h(),
        in_w: input.w(),
        kernel: kernels.h(),
        out_maps: kernels.n(),
    };
    g.validate()?;
    Ok(g)
}

fn lower_with(input: &Tensor4, kernels: &Tensor4, cols: Vec<ColumnEntry>) -> Result<LoweredPair> {
    let g = geometry_of(input, kernels)?;
    let (p, q, m, k) = (g.positions(), cols.len(), g.out_maps, g.kernel);
    let mut packed = vec![0.0; q * p];
    im2col(input.item(0), g.in_h, g.in_w, k, &cols, &mut packed);
    let feature = Matrix::from_vec(q, p, packed)?.transpose();

    let kk = g.dense_q();
    let mut kernel = Matrix::zeros(q, m);
    for (row, e) in cols.iter().enumerate() {
        let off = e.kernel_offset(k);
        for j in 0..m {
            kernel.set(row, j, kernels.as_slice()[j * kk + off]);
        }
    }
    Ok(LoweredPair { feature, kernel, col_map: cols, out_h: g.out_h(), out_w: g.out_w() })
}

/// Dense im2col lowering of one image.
pub fn lower_dense(input: &Tensor4, kernels: &Tensor4) -> Result<LoweredPair> {
    let g = geometry_of(input, kernels)?;
    let cols = column_map(g.in_channels, g.kernel, None)?;
    lower_with(input, kernels, cols)
}

/// Lowering with pruned columns and kernel rows physically removed.
pub fn lower_strided(
    input: &Tensor4,
    kernels: &Tensor4,
    pattern: &[StridedPattern],
) -> Result<LoweredPair> {
    let g = geometry_of(input, kernels)?;
    let cols = column_map(g.in_channels, g.kernel, Some(pattern))?;
    lower_with(input, kernels, cols)
}

/// Convolution as a single GEMM; returns a `(1, m, out_h, out_w)` tensor.
pub fn conv_via_gemm(pair: &LoweredPair) -> Result<Tensor4> {
    let p = pair.out_h * pair.out_w;
    if pair.feature.rows() != p || pair.feature.cols() != pair.col_map.len() {
        return Err(Error::Shape(format!(
            "feature matrix {}x{} inconsistent with {} positions and {} columns",
            pair.feature.rows(),
            pair.feature.cols(),
            p,
            pair.col_map.len()
        )));
    }
    let prod = gemm(&pair.feature, &pair.kernel)?;
    let m = prod.cols();
    let out = prod.transpose().into_vec();
    Tensor4::from_vec([1, m, pair.out_h, pair.out_w], out)
}

/// MACs of one convolution per image: `n·m·H·W·k²` dense, `H·W·m·Q` strided.
pub fn mac_count(geom: &ConvGeometry, pattern: Option<&[StridedPattern]>) -> Result<u64> {
    geom.validate()?;
    let hw = geom.positions() as u64;
    let m = geom.out_maps as u64;
    match pattern {
        None => Ok(geom.in_channels as u64 * m * hw * (geom.kernel * geom.kernel) as u64),
        Some(p) => {
            if p.len() != geom.in_channels {
                return Err(Error::Shape(format!(
                    "pattern covers {} channels, geometry has {}",
                    p.len(),
                    geom.in_channels
                )));
            }
            for sp in p {
                sp.validate()?;
            }
            Ok(hw * m * strided_q(geom.kernel, p) as u64)
        }
    }
}

/// Writes the transposed feature matrix (`Q × P`, one row per surviving
/// column) for one `(c, h, w)` image.
pub(crate) fn im2col(input: &[f32], h: usize, w: usize, k: usize, cols: &[ColumnEntry], out: &mut [f32]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    debug_assert_eq!(out.len(), cols.len() * p);
    for (q, e) in cols.iter().enumerate() {
        let row = &mut out[q * p..(q + 1) * p];
        let plane = &input[e.channel * h * w..(e.channel + 1) * h * w];
        for oy in 0..oh {
            let src = &plane[(oy + e.dy) * w + e.dx..(oy + e.dy) * w + e.dx + ow];
            row[oy * ow..(oy + 1) * ow].copy_from_slice(src);
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the image.
pub(crate) fn col2im(dcols: &[f32], h: usize, w: usize, k: usize, cols: &[ColumnEntry], dinput: &mut [f32]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    for (q, e) in cols.iter().enumerate() {
        let row = &dcols[q * p..(q + 1) * p];
        let plane = &mut dinput[e.channel * h * w..(e.channel + 1) * h * w];
        for oy in 0..oh {
            let dst = &mut plane[(oy + e.dy) * w + e.dx..(oy + e.dy) * w + e.dx + ow];
            for (d, s) in dst.iter_mut().zip(&row[oy * ow..(oy + 1) * ow]) {
                *d += *s;
            }
        }
    }
}
