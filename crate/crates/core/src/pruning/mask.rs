use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io_util::{read_u32, read_u8, write_u32, Tracked};
use crate::lowering::StridedPattern;
use crate::network::{Arch, LayerKind};

/// Masks for one convolution layer. Channel pruning is stored on the
/// layer's output maps only; removal of the next layer's incoming kernels is
/// derived, never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvMask {
    in_maps: usize,
    /// One bit per output map, `true` = keep.
    pub out_keep: Vec<bool>,
    /// One bit per `(out, in)` kernel at `out * in_maps + in`.
    pub kernel_keep: Vec<bool>,
    /// One pattern per source (input) map.
    pub strided: Vec<StridedPattern>,
}

impl ConvMask {
    pub fn full(in_maps: usize, out_maps: usize) -> Self {
        Self {
            in_maps,
            out_keep: vec![true; out_maps],
            kernel_keep: vec![true; in_maps * out_maps],
            strided: vec![StridedPattern::DENSE; in_maps],
        }
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn out_maps(&self) -> usize {
        self.out_keep.len()
    }

    #[inline]
    pub fn kernel(&self, out: usize, input: usize) -> bool {
        self.kernel_keep[out * self.in_maps + input]
    }

    pub fn set_kernel(&mut self, out: usize, input: usize, keep: bool) {
        self.kernel_keep[out * self.in_maps + input] = keep;
    }

    fn is_full(&self) -> bool {
        self.out_keep.iter().all(|&b| b)
            && self.kernel_keep.iter().all(|&b| b)
            && self.strided.iter().all(StridedPattern::is_dense)
    }
}

/// Channel, kernel and strided masks for every convolution layer of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMaskSet {
    layers: Vec<ConvMask>,
}

/// Weight-level keep bits derived from a [`PruneMaskSet`], aligned with
/// [`Arch::layers`]. Non-weighted layers carry empty vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    pub weights: Vec<Vec<bool>>,
    pub biases: Vec<Vec<bool>>,
}

impl WeightMask {
    pub fn kept_weights(&self) -> usize {
        self.weights.iter().flatten().filter(|&&b| b).count()
    }

    pub fn total_weights(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }
}

impl PruneMaskSet {
    /// Keep-everything mask for `arch`.
    pub fn full(arch: &Arch) -> Self {
        let layers = arch
            .conv_positions()
            .iter()
            .map(|&p| {
                let l = &arch.layers()[p];
                ConvMask::full(l.in_maps, l.out_maps)
            })
            .collect();
        Self { layers }
    }

    /// Builds a mask and checks it against `arch`.
    pub fn new(arch: &Arch, layers: Vec<ConvMask>) -> Result<Self> {
        let m = Self { layers };
        m.validate(arch)?;
        Ok(m)
    }

    pub fn layers(&self) -> &[ConvMask] {
        &self.layers
    }

    pub fn layer(&self, conv: usize) -> &ConvMask {
        &self.layers[conv]
    }

    pub fn layer_mut(&mut self, conv: usize) -> &mut ConvMask {
        &mut self.layers[conv]
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(ConvMask::is_full)
    }

    /// Shape check plus the channel ⇒ kernel implication.
    pub fn validate(&self, arch: &Arch) -> Result<()> {
        let convs = arch.conv_positions();
        if convs.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "mask has {} conv layers, arch {} has {}",
                self.layers.len(),
                arch,
                convs.len()
            )));
        }
        for (ci, (&pos, m)) in convs.iter().zip(&self.layers).enumerate() {
            let l = &arch.layers()[pos];
            if m.in_maps != l.in_maps
                || m.out_keep.len() != l.out_maps
                || m.kernel_keep.len() != l.in_maps * l.out_maps
                || m.strided.len() != l.in_maps
            {
                return Err(Error::Shape(format!(
                    "conv layer {ci} mask is {}x{}, arch layer is {}x{}",
                    m.in_maps,
                    m.out_keep.len(),
                    l.in_maps,
                    l.out_maps
                )));
            }
            for p in &m.strided {
                p.validate()?;
            }
            for o in 0..l.out_maps {
                if !m.out_keep[o] && (0..l.in_maps).any(|i| m.kernel(o, i)) {
                    return Err(Error::InvalidArgument(format!(
                        "conv layer {ci}: output map {o} is pruned but keeps incoming kernels"
                    )));
                }
            }
            if m.out_keep.iter().all(|&b| !b) {
                return Err(Error::InvalidArgument(format!(
                    "conv layer {ci}: every output map is pruned"
                )));
            }
        }
        Ok(())
    }

    /// Removes output map `out` of conv layer `conv` with all incoming kernels.
    pub fn drop_channel(&mut self, conv: usize, out: usize) {
        let m = &mut self.layers[conv];
        m.out_keep[out] = false;
        for i in 0..m.in_maps {
            m.set_kernel(out, i, false);
        }
    }

    /// Source-map keep bits of conv layer `conv`, induced by the previous
    /// conv layer's channel mask.
    pub fn in_keep(&self, conv: usize) -> Vec<bool> {
        if conv == 0 {
            vec![true; self.layers[0].in_maps]
        } else {
            self.layers[conv - 1].out_keep.clone()
        }
    }

    /// A kernel survives if its own bit, its destination map and its source
    /// map all survive.
    pub fn kernel_alive(&self, conv: usize, out: usize, input: usize) -> bool {
        let m = &self.layers[conv];
        m.out_keep[out] && m.kernel(out, input) && (conv == 0 || self.layers[conv - 1].out_keep[input])
    }

    /// Weight-level bitmap.
    pub fn expand(&self, arch: &Arch) -> Result<WeightMask> {
        self.validate(arch)?;
        let convs = arch.conv_positions();
        let n = arch.layers().len();
        let mut weights = vec![Vec::new(); n];
        let mut biases = vec![Vec::new(); n];
        let mut last_keep: Option<Vec<bool>> = None;
        let mut ci = 0;
        for (pos, l) in arch.layers().iter().enumerate() {
            match l.kind {
                LayerKind::Conv { kernel } => {
                    let m = &self.layers[ci];
                    let k2 = kernel * kernel;
                    let mut bits = vec![false; l.out_maps * l.in_maps * k2];
                    for o in 0..l.out_maps {
                        for i in 0..l.in_maps {
                            if !self.kernel_alive(ci, o, i) {
                                continue;
                            }
                            let base = (o * l.in_maps + i) * k2;
                            for (pos, b) in bits[base..base + k2].iter_mut().enumerate() {
                                *b = m.strided[i].keeps(pos);
                            }
                        }
                    }
                    weights[pos] = bits;
                    biases[pos] = m.out_keep.clone();
                    last_keep = Some(m.out_keep.clone());
                    ci += 1;
                }
                LayerKind::Fc => {
                    let fan_in = l.fan_in();
                    let spatial = l.in_h * l.in_w;
                    let input_bits: Vec<bool> = match last_keep.take() {
                        Some(keep) => (0..fan_in).map(|j| keep[j / spatial]).collect(),
                        None => vec![true; fan_in],
                    };
                    let mut bits = Vec::with_capacity(l.out_maps * fan_in);
                    for _ in 0..l.out_maps {
                        bits.extend_from_slice(&input_bits);
                    }
                    weights[pos] = bits;
                    biases[pos] = vec![true; l.out_maps];
                }
                LayerKind::Input | LayerKind::Pool => {}
            }
        }
        debug_assert_eq!(ci, convs.len());
        Ok(WeightMask { weights, biases })
    }

    /// Binary layout: `u32` conv-layer count, then per layer `u32 in_maps`,
    /// `u32 out_maps`, bit-packed channel bitmap, bit-packed kernel bitmap,
    /// and `(stride u8, offset u8)` per source map.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_u32(w, self.layers.len() as u32)?;
        for m in &self.layers {
            write_u32(w, m.in_maps as u32)?;
            write_u32(w, m.out_keep.len() as u32)?;
            w.write_all(&pack_bits(&m.out_keep))?;
            w.write_all(&pack_bits(&m.kernel_keep))?;
            for p in &m.strided {
                w.write_all(&[p.stride, p.offset])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        Self::read_tracked(&mut Tracked::new(r))
    }

    pub(crate) fn read_tracked<R: Read>(r: &mut Tracked<R>) -> Result<Self> {
        let what = |s: &str| format!("mask {s}");
        let count = read_u32(r, &what("layer count"))? as usize;
        let mut layers = Vec::with_capacity(count);
        for li in 0..count {
            let ctx = |s: &str| format!("mask conv layer {li} {s}");
            let in_maps = read_u32(r, &ctx("in_maps"))? as usize;
            let out_maps = read_u32(r, &ctx("out_maps"))? as usize;
            let out_keep = read_bits(r, out_maps, &ctx("channel bitmap"))?;
            let kernel_keep = read_bits(r, in_maps * out_maps, &ctx("kernel bitmap"))?;
            let mut strided = Vec::with_capacity(in_maps);
            for _ in 0..in_maps {
                let stride = read_u8(r, &ctx("stride"))?;
                let offset = read_u8(r, &ctx("offset"))?;
                strided.push(StridedPattern::new(stride, offset)?);
            }
            layers.push(ConvMask { in_maps, out_keep, kernel_keep, strided });
        }
        Ok(Self { layers })
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn read_bits<R: Read>(r: &mut Tracked<R>, n: usize, what: &str) -> Result<Vec<bool>> {
    let mut buf = vec![0u8; n.div_ceil(8)];
    crate::io_util::read_exact(r, &mut buf, what)?;
    Ok((0..n).map(|i| buf[i / 8] & (1 << (i % 8)) != 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_mask_expands_to_all_ones() {
        let arch = Arch::cifar();
        let wm = PruneMaskSet::full(&arch).expand(&arch).unwrap();
        assert_eq!(wm.kept_weights(), wm.total_weights());
        assert_eq!(wm.total_weights() + 32 + 32 + 64 + 10, 79_978);
    }

    #[test]
    fn hierarchy_violation_rejected() {
        let arch = Arch::cifar();
        let mut m = PruneMaskSet::full(&arch);
        m.layer_mut(1).out_keep[3] = false;
        assert!(m.validate(&arch).is_err());
        m.drop_channel(1, 3);
        assert!(m.validate(&arch).is_ok());
    }

    #[test]
    fn pruning_every_map_rejected() {
        let arch = Arch::mnist_desk();
        let mut m = PruneMaskSet::full(&arch);
        for o in 0..16 {
            m.drop_channel(1, o);
        }
        assert!(m.validate(&arch).is_err());
    }

    #[test]
    fn channel_drop_kills_outgoing_kernels_and_fc_rows() {
        let arch = Arch::mnist_desk();
        let mut m = PruneMaskSet::full(&arch);
        m.drop_channel(0, 2);
        m.drop_channel(1, 5);
        let wm = m.expand(&arch).unwrap();
        // C3 kernels sourced from C1 map 2.
        let c3 = &wm.weights[3];
        for o in 0..16 {
            for pos in 0..25 {
                assert!(!c3[(o * 8 + 2) * 25 + pos]);
            }
        }
        // F5 fan-in rows 5*16..6*16 gone for every unit.
        let f5 = &wm.weights[5];
        for u in 0..128 {
            for j in 0..256 {
                assert_eq!(f5[u * 256 + j], j / 16 != 5);
            }
        }
    }

    #[test]
    fn serialization_round_trip() {
        let arch = Arch::cifar_desk();
        let mut m = PruneMaskSet::full(&arch);
        m.drop_channel(1, 4);
        m.layer_mut(2).set_kernel(7, 3, false);
        m.layer_mut(2).strided[5] = StridedPattern::new(3, 2).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = PruneMaskSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
