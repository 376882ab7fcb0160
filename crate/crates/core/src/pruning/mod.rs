//! Channel, kernel and intra-kernel strided pruning: masks, application,
//! compaction and accounting.

mod mask;

pub use mask::{ConvMask, PruneMaskSet, WeightMask};

use crate::error::{Error, Result};
use crate::lowering::StridedPattern;
use crate::network::{Arch, ConvLayer, FcLayer, Layer, LayerKind, Network};
use crate::tensor::{Matrix, Rng, Tensor4};

/// Weight-level keep bits of `mask` on `arch`.
pub fn expand_mask(mask: &PruneMaskSet, arch: &Arch) -> Result<WeightMask> {
    mask.expand(arch)
}

/// Copy of `net` with every masked weight and bias set to exactly zero.
pub fn apply_mask(net: &Network, mask: &PruneMaskSet) -> Result<Network> {
    let wm = mask.expand(net.arch())?;
    let mut out = net.clone();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        let pos = i + 1;
        if let Some(w) = layer.weights_mut() {
            for (v, &keep) in w.iter_mut().zip(&wm.weights[pos]) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        if let Some(b) = layer.bias_mut() {
            for (v, &keep) in b.iter_mut().zip(&wm.biases[pos]) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Rebuilds `net` without its channel-pruned maps. Returns the smaller
/// network and the residual kernel/strided mask expressed on it.
pub fn compact(net: &Network, mask: &PruneMaskSet) -> Result<(Network, PruneMaskSet)> {
    let arch = net.arch();
    mask.validate(arch)?;
    let mut counts = arch.counts();
    let mut ci = 0;
    let mut keep_of_pos: Vec<Option<Vec<bool>>> = vec![None; arch.layers().len()];
    let mut current: Option<Vec<bool>> = None;
    for (pos, l) in arch.layers().iter().enumerate() {
        match l.kind {
            LayerKind::Conv { .. } => {
                let keep = mask.layer(ci).out_keep.clone();
                counts[pos] = keep.iter().filter(|&&b| b).count();
                current = Some(keep);
                ci += 1;
            }
            LayerKind::Pool => {
                if let Some(k) = &current {
                    counts[pos] = k.iter().filter(|&&b| b).count();
                }
            }
            LayerKind::Fc => current = None,
            LayerKind::Input => {}
        }
        keep_of_pos[pos] = current.clone();
    }
    let new_arch = arch.with_counts(&counts)?;

    let mut layers = Vec::with_capacity(net.layers().len());
    let mut residual = Vec::new();
    ci = 0;
    for (i, layer) in net.layers().iter().enumerate() {
        let pos = i + 1;
        let in_keep = keep_of_pos[pos - 1].clone();
        let spec = &arch.layers()[pos];
        match layer {
            Layer::Conv(c) => {
                let out_keep = &mask.layer(ci).out_keep;
                let ins: Vec<usize> =
                    (0..spec.in_maps).filter(|&i| in_keep.as_ref().is_none_or(|k| k[i])).collect();
                let outs: Vec<usize> = (0..spec.out_maps).filter(|&o| out_keep[o]).collect();
                let k = c.kernel();
                let mut kernels = Tensor4::zeros(outs.len(), ins.len(), k, k)?;
                let mut cm = ConvMask::full(ins.len(), outs.len());
                for (no, &o) in outs.iter().enumerate() {
                    for (ni, &i) in ins.iter().enumerate() {
                        for dy in 0..k {
                            for dx in 0..k {
                                kernels.set(no, ni, dy, dx, c.kernels.get(o, i, dy, dx));
                            }
                        }
                        cm.set_kernel(no, ni, mask.layer(ci).kernel(o, i));
                    }
                }
                for (ni, &i) in ins.iter().enumerate() {
                    cm.strided[ni] = mask.layer(ci).strided[i];
                }
                let bias = outs.iter().map(|&o| c.bias[o]).collect();
                layers.push(Layer::Conv(ConvLayer { kernels, bias }));
                residual.push(cm);
                ci += 1;
            }
            Layer::Pool => layers.push(Layer::Pool),
            Layer::Fc(f) => {
                let spatial = spec.in_h * spec.in_w;
                let cols: Vec<usize> =
                    (0..spec.fan_in()).filter(|&j| in_keep.as_ref().is_none_or(|k| k[j / spatial])).collect();
                let mut w = Matrix::zeros(f.weights.rows(), cols.len());
                for r in 0..f.weights.rows() {
                    for (nj, &j) in cols.iter().enumerate() {
                        w.set(r, nj, f.weights.get(r, j));
                    }
                }
                layers.push(Layer::Fc(FcLayer { weights: w, bias: f.bias.clone() }));
            }
        }
    }
    let small = Network::from_parts(new_arch, layers)?;
    let residual = PruneMaskSet::new(small.arch(), residual)?;
    let small = apply_mask(&small, &residual)?;
    Ok((small, residual))
}

/// Connection counts (`in_maps · out_maps`) of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerConnections {
    pub position: usize,
    pub name: String,
    pub connections: usize,
}

/// Per conv layer `in_maps · out_maps`.
pub fn count_connections(arch: &Arch) -> Vec<LayerConnections> {
    arch.conv_positions()
        .into_iter()
        .map(|p| {
            let l = &arch.layers()[p];
            LayerConnections { position: p, name: arch.layer_name(p), connections: l.in_maps * l.out_maps }
        })
        .collect()
}

/// Surviving kernels per conv layer under `mask`.
pub fn masked_connections(arch: &Arch, mask: &PruneMaskSet) -> Result<Vec<LayerConnections>> {
    mask.validate(arch)?;
    Ok(count_connections(arch)
        .into_iter()
        .enumerate()
        .map(|(ci, mut c)| {
            let m = mask.layer(ci);
            c.connections = (0..m.out_maps())
                .flat_map(|o| (0..m.in_maps()).map(move |i| (o, i)))
                .filter(|&(o, i)| mask.kernel_alive(ci, o, i))
                .count();
            c
        })
        .collect())
}

/// Size of a (possibly masked) network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PruneStats {
    /// Surviving weights and biases.
    pub params: usize,
    /// Surviving conv kernels.
    pub connections: usize,
    /// Multiply-accumulates per image over conv and FC layers.
    pub macs: u64,
}

pub fn prune_stats(arch: &Arch, mask: Option<&PruneMaskSet>) -> Result<PruneStats> {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = PruneMaskSet::full(arch);
            &full
        }
    };
    let wm = mask.expand(arch)?;
    let mut stats = PruneStats::default();
    for (pos, l) in arch.layers().iter().enumerate() {
        let kept = wm.weights[pos].iter().filter(|&&b| b).count();
        let biases = wm.biases[pos].iter().filter(|&&b| b).count();
        stats.params += kept + biases;
        stats.macs += match l.kind {
            LayerKind::Conv { .. } => (kept * l.out_h * l.out_w) as u64,
            LayerKind::Fc => kept as u64,
            _ => 0,
        };
    }
    stats.connections = masked_connections(arch, mask)?.iter().map(|c| c.connections).sum();
    Ok(stats)
}

/// One pattern per source channel: stride drawn from `stride_choices`,
/// offset uniform in `[0, stride)`.
pub fn random_strided_pattern(in_maps: usize, stride_choices: &[u8], rng: &mut Rng) -> Result<Vec<StridedPattern>> {
    if stride_choices.is_empty() {
        return Err(Error::InvalidArgument("no stride choices".into()));
    }
    if stride_choices.contains(&0) {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    (0..in_maps)
        .map(|_| {
            let s = stride_choices[rng.uniform_int(stride_choices.len())?];
            let o = rng.uniform_int(s as usize)? as u8;
            StridedPattern::new(s, o)
        })
        .collect()
}

/// Binary PGM (P5) of a conv layer's kernel bitmap: one row per source map,
/// one column per destination map, black where the kernel is pruned. Every
/// cell is drawn as a `scale × scale` block.
pub fn kernel_heatmap_pgm(mask: &PruneMaskSet, conv: usize, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let m = mask.layer(conv);
    let (rows, cols) = (m.in_maps(), m.out_maps());
    let (h, w) = (rows * scale, cols * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let alive = mask.kernel_alive(conv, x / scale, y / scale);
            out.push(if alive { 255 } else { 0 });
        }
    }
    out
}

/// Per conv layer: kept maps, kept kernels and lowered column counts.
pub fn mask_summary_csv(arch: &Arch, mask: &PruneMaskSet) -> Result<String> {
    let conns = masked_connections(arch, mask)?;
    let mut s = String::from("layer,in_maps,out_maps,kept_out_maps,kept_kernels,total_kernels,lowered_q,dense_q\n");
    for (ci, &pos) in arch.conv_positions().iter().enumerate() {
        let l = &arch.layers()[pos];
        let LayerKind::Conv { kernel } = l.kind else { unreachable!() };
        let m = mask.layer(ci);
        let kept_out = m.out_keep.iter().filter(|&&b| b).count();
        let in_keep = mask.in_keep(ci);
        let q: usize = (0..l.in_maps)
            .filter(|&i| in_keep[i])
            .map(|i| m.strided[i].kept_count(kernel * kernel))
            .sum();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            arch.layer_name(pos),
            l.in_maps,
            l.out_maps,
            kept_out,
            conns[ci].connections,
            l.in_maps * l.out_maps,
            q,
            l.in_maps * kernel * kernel
        ));
    }
    Ok(s)
}
