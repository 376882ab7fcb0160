#![allow(dead_code)]

use strider_core::lowering::StridedPattern;
use strider_core::network::{Arch, Layer, LayerKind, Network};
use strider_core::pruning::PruneMaskSet;
use strider_core::search::Evaluator;
use strider_core::tensor::Tensor4;
use strider_core::Result;

/// Nested-loop valid convolution of one `(c, h, w)` image in f64. Weights at
/// flattened kernel positions a pattern drops are treated as zero.
pub fn direct_conv(input: &Tensor4, kernels: &Tensor4, pattern: Option<&[StridedPattern]>) -> Vec<f64> {
    let [_, c, h, w] = input.dims();
    let [m, _, k, _] = kernels.dims();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; m * oh * ow];
    for j in 0..m {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f64;
                for ch in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let pos = dy * k + dx;
                            let alive = match pattern {
                                Some(p) => {
                                    let (s, o) = (p[ch].stride as usize, p[ch].offset as usize);
                                    pos >= o && (pos - o) % s == 0
                                }
                                None => true,
                            };
                            if alive {
                                acc += input.get(0, ch, y + dy, x + dx) as f64 * kernels.get(j, ch, dy, dx) as f64;
                            }
                        }
                    }
                }
                out[(j * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// f64 copy of every weighted layer: `(weights, bias)` per arch position,
/// empty for pooling and input.
pub fn params_f64(net: &Network) -> Vec<(Vec<f64>, Vec<f64>)> {
    std::iter::once(&Layer::Pool)
        .chain(net.layers())
        .map(|l| match (l.weights(), l.bias()) {
            (Some(w), Some(b)) => (w.iter().map(|&v| v as f64).collect(), b.iter().map(|&v| v as f64).collect()),
            _ => (Vec::new(), Vec::new()),
        })
        .collect()
}

/// Reference forward pass in f64: valid conv + ReLU, 2×2 max pool, FC with
/// ReLU except on the last layer. Returns logits.
pub fn reference_logits(arch: &Arch, params: &[(Vec<f64>, Vec<f64>)], image: &[f32]) -> Vec<f64> {
    let mut cur: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let specs = arch.layers();
    for (pos, spec) in specs.iter().enumerate().skip(1) {
        let (w, b) = &params[pos];
        let last = pos + 1 == specs.len();
        cur = match spec.kind {
            LayerKind::Conv { kernel: k } => {
                let (c, h, wd) = (spec.in_maps, spec.in_h, spec.in_w);
                let (oh, ow) = (spec.out_h, spec.out_w);
                let mut out = vec![0.0; spec.out_maps * oh * ow];
                for j in 0..spec.out_maps {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = b[j];
                            for ch in 0..c {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        acc += cur[(ch * h + y + dy) * wd + x + dx] * w[((j * c + ch) * k + dy) * k + dx];
                                    }
                                }
                            }
                            out[(j * oh + y) * ow + x] = acc.max(0.0);
                        }
                    }
                }
                out
            }
            LayerKind::Pool => {
                let (h, wd) = (spec.in_h, spec.in_w);
                let (oh, ow) = (spec.out_h, spec.out_w);
                let mut out = vec![0.0; spec.out_maps * oh * ow];
                for ch in 0..spec.out_maps {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    best = best.max(cur[(ch * h + 2 * y + dy) * wd + 2 * x + dx]);
                                }
                            }
                            out[(ch * oh + y) * ow + x] = best;
                        }
                    }
                }
                out
            }
            LayerKind::Fc => {
                let n = cur.len();
                (0..spec.out_maps)
                    .map(|o| {
                        let z = b[o] + (0..n).map(|i| w[o * n + i] * cur[i]).sum::<f64>();
                        if last {
                            z
                        } else {
                            z.max(0.0)
                        }
                    })
                    .collect()
            }
            LayerKind::Input => cur,
        };
    }
    cur
}

pub fn cross_entropy_f64(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Ties toward zero, saturating at `±(levels − 1) / 2` steps.
pub fn oracle_quantize(w: f64, step: f64, levels: u32) -> f64 {
    let l = ((levels - 1) / 2) as f64;
    let a = (w / step).abs();
    let k = (a - 0.5).ceil().max(0.0).min(l);
    k * step * w.signum()
}

pub fn oracle_error(weights: &[f32], step: f64, levels: u32) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let d = w as f64 - oracle_quantize(w as f64, step, levels);
            d * d
        })
        .sum()
}

/// Best error over `points` evenly spaced steps in `(0, 2·max|w|]`.
pub fn grid_min_error(weights: &[f32], levels: u32, points: usize) -> (f64, f64) {
    let top = 2.0 * weights.iter().fold(0.0f64, |m, &w| m.max(w.abs() as f64));
    let mut best = (f64::INFINITY, 0.0);
    for i in 1..=points {
        let step = top * i as f64 / points as f64;
        let e = oracle_error(weights, step, levels);
        if e < best.0 {
            best = (e, step);
        }
    }
    best
}

/// Closed-form "network": accuracy 0.95 minus 0.05 per planted-critical
/// output map the mask removes.
pub struct PlantedOracle {
    /// `(conv layer, output map)`
    pub critical: Vec<(usize, usize)>,
    pub samples: usize,
}

impl PlantedOracle {
    pub fn pruned_critical(&self, mask: &PruneMaskSet) -> usize {
        self.critical.iter().filter(|&&(l, m)| !mask.layer(l).out_keep[m]).count()
    }
}

impl Evaluator for PlantedOracle {
    fn len(&self) -> usize {
        self.samples
    }

    fn mcr(&self, mask: &PruneMaskSet, _samples: &[usize]) -> Result<f64> {
        Ok(0.05 + 0.05 * self.pruned_critical(mask) as f64)
    }
}

/// Four conv layers of eight maps each.
pub fn planted_arch() -> Arch {
    let kinds = LayerKind::parse_list("i-c3-c3-c3-c3-f").unwrap();
    Arch::parse("1-8-8-8-8-10", &kinds, 12).unwrap()
}

/// Two critical maps per conv layer, placed by `seed`.
pub fn planted_oracle(seed: u64) -> PlantedOracle {
    let mut rng = strider_core::tensor::Rng::new(seed).substream(99);
    let mut critical = Vec::new();
    for l in 0..4 {
        let picks = rng.sample_indices(8, 2);
        critical.extend(picks.into_iter().map(|m| (l, m)));
    }
    PlantedOracle { critical, samples: 100 }
}

pub fn conv_layer(net: &Network, pos: usize) -> &strider_core::network::ConvLayer {
    match net.layer_at(pos) {
        Layer::Conv(c) => c,
        _ => panic!("layer {pos} is not a convolution"),
    }
}
