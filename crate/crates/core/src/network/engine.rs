//! Per-sample forward and backward passes. Convolutions run through the
//! lowering module: each conv layer is an im2col followed by one GEMM, with
//! strided-pruned columns physically removed.

use rayon::prelude::*;

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::lowering::{col2im, column_map, im2col, ColumnEntry, ConvGeometry};
use crate::pruning::PruneMaskSet;
use crate::quantization::quantize_value;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Matrix, Tensor4};

/// Uniform symmetric quantizer applied to a layer's post-activation outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalQuantizer {
    pub levels: u32,
    pub step: f32,
}

impl SignalQuantizer {
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        quantize_value(v, self.step, self.levels)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `n × classes`
    pub logits: Matrix,
    /// Post-activation outputs of every parameter layer, all samples
    /// concatenated; index `i` matches `Network::layers()[i]`.
    pub activations: Vec<Vec<f32>>,
}

pub(crate) enum PLayer {
    Conv {
        geom: ConvGeometry,
        cols: Vec<ColumnEntry>,
        /// `m × Q`, masked.
        w: Vec<f32>,
        bias: Vec<f32>,
        /// Full-size weight keep bits, `None` when nothing is masked.
        keep: Option<Vec<bool>>,
        bias_keep: Option<Vec<bool>>,
        first: bool,
    },
    Pool {
        maps: usize,
        h: usize,
        w: usize,
    },
    Fc {
        w: Vec<f32>,
        bias: Vec<f32>,
        inputs: usize,
        outputs: usize,
        relu: bool,
        keep: Option<Vec<bool>>,
        bias_keep: Option<Vec<bool>>,
    },
}

/// A network with its mask folded in, ready for repeated passes.
pub(crate) struct Prepared<'a> {
    net: &'a Network,
    layers: Vec<PLayer>,
    signals: Vec<Option<SignalQuantizer>>,
}

/// Scratch buffers for one sample.
pub(crate) struct Workspace {
    acts: Vec<Vec<f32>>,
    cols: Vec<Vec<f32>>,
    argmax: Vec<Vec<u32>>,
    delta: Vec<f32>,
    next_delta: Vec<f32>,
    dcols: Vec<f32>,
}

/// Gradient of one parameter layer in full (unmasked) shape.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LayerGrad {
    Weighted { dw: Vec<f32>, db: Vec<f32> },
    None,
}

/// Packed gradient accumulators matching a [`Prepared`] network.
pub(crate) struct Gradients {
    packed: Vec<LayerGrad>,
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(net: &'a Network, mask: Option<&PruneMaskSet>) -> Result<Self> {
        let arch = net.arch();
        let wmask = match mask {
            Some(m) if !m.is_full() => Some(m.expand(arch)?),
            Some(m) => {
                m.validate(arch)?;
                None
            }
            None => None,
        };
        let mut layers = Vec::with_capacity(net.layers().len());
        let mut conv_idx = 0;
        for (i, layer) in net.layers().iter().enumerate() {
            let pos = i + 1;
            let spec = &arch.layers()[pos];
            let keep = wmask.as_ref().map(|wm| wm.weights[pos].clone());
            let bias_keep = wmask.as_ref().map(|wm| wm.biases[pos].clone());
            let p = match layer {
                Layer::Conv(c) => {
                    let geom = net.conv_geometry(pos);
                    let pattern = mask.map(|m| m.layer(conv_idx).strided.as_slice());
                    let pattern = pattern.filter(|p| p.iter().any(|s| !s.is_dense()));
                    let cols = column_map(geom.in_channels, geom.kernel, pattern)?;
                    let q = cols.len();
                    let dq = geom.dense_q();
                    let src = c.kernels.as_slice();
                    let mut w = vec![0.0; geom.out_maps * q];
                    for j in 0..geom.out_maps {
                        for (qi, e) in cols.iter().enumerate() {
                            let off = j * dq + e.kernel_offset(geom.kernel);
                            let kept = keep.as_ref().is_none_or(|k| k[off]);
                            w[j * q + qi] = if kept { src[off] } else { 0.0 };
                        }
                    }
                    let bias = masked(&c.bias, bias_keep.as_deref());
                    conv_idx += 1;
                    PLayer::Conv { geom, cols, w, bias, keep, bias_keep, first: pos == 1 }
                }
                Layer::Pool => PLayer::Pool { maps: spec.in_maps, h: spec.in_h, w: spec.in_w },
                Layer::Fc(f) => PLayer::Fc {
                    w: masked(f.weights.as_slice(), keep.as_deref()),
                    bias: masked(&f.bias, bias_keep.as_deref()),
                    inputs: f.weights.cols(),
                    outputs: f.weights.rows(),
                    relu: pos + 1 != arch.layers().len(),
                    keep,
                    bias_keep,
                },
            };
            layers.push(p);
        }
        let signals = vec![None; layers.len()];
        Ok(Self { net, layers, signals })
    }

    pub(crate) fn with_signals(mut self, signals: Option<&[Option<SignalQuantizer>]>) -> Result<Self> {
        if let Some(s) = signals {
            if s.len() != self.layers.len() {
                return Err(Error::Shape(format!(
                    "{} signal quantizers for {} layers",
                    s.len(),
                    self.layers.len()
                )));
            }
            self.signals = s.to_vec();
        }
        Ok(self)
    }

    pub(crate) fn workspace(&self) -> Workspace {
        let arch = self.net.arch();
        let acts = arch.layers().iter().map(|l| vec![0.0; l.out_maps * l.out_h * l.out_w]).collect();
        let cols = self
            .layers
            .iter()
            .map(|l| match l {
                PLayer::Conv { geom, cols, .. } => vec![0.0; cols.len() * geom.positions()],
                _ => Vec::new(),
            })
            .collect();
        let argmax = self
            .layers
            .iter()
            .map(|l| match l {
                PLayer::Pool { maps, h, w } => vec![0; maps * (h / 2) * (w / 2)],
                _ => Vec::new(),
            })
            .collect();
        Workspace { acts, cols, argmax, delta: Vec::new(), next_delta: Vec::new(), dcols: Vec::new() }
    }

    pub(crate) fn gradients(&self) -> Gradients {
        let packed = self
            .layers
            .iter()
            .map(|l| match l {
                PLayer::Conv { w, bias, .. } | PLayer::Fc { w, bias, .. } => {
                    LayerGrad::Weighted { dw: vec![0.0; w.len()], db: vec![0.0; bias.len()] }
                }
                PLayer::Pool { .. } => LayerGrad::None,
            })
            .collect();
        Gradients { packed }
    }

    fn input_len(&self) -> usize {
        let l = &self.net.arch().layers()[0];
        l.out_maps * l.out_h * l.out_w
    }

    fn check_batch(&self, batch: &Tensor4) -> Result<()> {
        let l = &self.net.arch().layers()[0];
        if batch.c() != l.out_maps || batch.h() != l.out_h || batch.w() != l.out_w {
            return Err(Error::Shape(format!(
                "batch items are {}x{}x{}, network expects {}x{}x{}",
                batch.c(),
                batch.h(),
                batch.w(),
                l.out_maps,
                l.out_h,
                l.out_w
            )));
        }
        Ok(())
    }

    /// Runs one sample; the logits end up in the last activation buffer.
    pub(crate) fn forward_sample<'w>(&self, x: &[f32], ws: &'w mut Workspace) -> &'w [f32] {
        debug_assert_eq!(x.len(), self.input_len());
        ws.acts[0].copy_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(i + 1);
            let input = &before[i];
            let out = &mut after[0];
            match layer {
                PLayer::Conv { geom, cols, w, bias, .. } => {
                    let p = geom.positions();
                    let q = cols.len();
                    let buf = &mut ws.cols[i];
                    im2col(input, geom.in_h, geom.in_w, geom.kernel, cols, buf);
                    for (j, b) in bias.iter().enumerate() {
                        out[j * p..(j + 1) * p].fill(*b);
                    }
                    matmul(w, buf, out, geom.out_maps, q, p);
                    relu_in_place(out);
                }
                PLayer::Pool { maps, h, w } => {
                    max_pool(input, *maps, *h, *w, out, &mut ws.argmax[i]);
                }
                PLayer::Fc { w, bias, inputs, outputs, relu, .. } => {
                    for o in 0..*outputs {
                        out[o] = bias[o] + crate::tensor::dot(&w[o * inputs..(o + 1) * inputs], input);
                    }
                    if *relu {
                        relu_in_place(out);
                    }
                }
            }
            if let Some(sq) = &self.signals[i] {
                for v in out.iter_mut() {
                    *v = sq.apply(*v);
                }
            }
        }
        ws.acts.last().unwrap()
    }

    /// Accumulates parameter gradients for the sample last run through
    /// [`Prepared::forward_sample`] on `ws`. Signal quantizers are treated as
    /// identity (straight-through).
    pub(crate) fn backward_sample(&self, ws: &mut Workspace, dlogits: &[f32], grads: &mut Gradients) {
        ws.delta.clear();
        ws.delta.extend_from_slice(dlogits);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &ws.acts[i];
            let output = &ws.acts[i + 1];
            let need_input_grad = i > 0;
            match (layer, &mut grads.packed[i]) {
                (PLayer::Fc { w, inputs, outputs, relu, .. }, LayerGrad::Weighted { dw, db }) => {
                    if *relu {
                        relu_backward(&mut ws.delta, output);
                    }
                    for o in 0..*outputs {
                        let d = ws.delta[o];
                        db[o] += d;
                        if d != 0.0 {
                            for (g, x) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                                *g += d * x;
                            }
                        }
                    }
                    if need_input_grad {
                        ws.next_delta.clear();
                        ws.next_delta.resize(*inputs, 0.0);
                        matmul_at_b(w, &ws.delta, &mut ws.next_delta, *inputs, *outputs, 1);
                    }
                }
                (PLayer::Pool { maps, h, w }, _) => {
                    ws.next_delta.clear();
                    ws.next_delta.resize(maps * h * w, 0.0);
                    for (d, &src) in ws.delta.iter().zip(&ws.argmax[i]) {
                        ws.next_delta[src as usize] += *d;
                    }
                }
                (PLayer::Conv { geom, cols, w, first, .. }, LayerGrad::Weighted { dw, db }) => {
                    relu_backward(&mut ws.delta, output);
                    let p = geom.positions();
                    let q = cols.len();
                    let m = geom.out_maps;
                    for j in 0..m {
                        db[j] += ws.delta[j * p..(j + 1) * p].iter().sum::<f32>();
                    }
                    matmul_a_bt(&ws.delta, &ws.cols[i], dw, m, p, q);
                    if need_input_grad && !*first {
                        ws.dcols.clear();
                        ws.dcols.resize(q * p, 0.0);
                        matmul_at_b(w, &ws.delta, &mut ws.dcols, q, m, p);
                        ws.next_delta.clear();
                        ws.next_delta.resize(geom.in_channels * geom.in_h * geom.in_w, 0.0);
                        col2im(&ws.dcols, geom.in_h, geom.in_w, geom.kernel, cols, &mut ws.next_delta);
                    }
                }
                _ => unreachable!("gradient layout matches prepared layers"),
            }
            std::mem::swap(&mut ws.delta, &mut ws.next_delta);
        }
    }

    /// Scatters packed gradients back to full parameter shapes, zero at
    /// masked positions.
    pub(crate) fn unpack(&self, grads: &Gradients) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .zip(&grads.packed)
            .zip(self.net.layers())
            .map(|((pl, g), layer)| match (pl, g) {
                (PLayer::Conv { geom, cols, keep, bias_keep, .. }, LayerGrad::Weighted { dw, db }) => {
                    let dq = geom.dense_q();
                    let q = cols.len();
                    let mut full = vec![0.0; layer.weights().unwrap().len()];
                    for j in 0..geom.out_maps {
                        for (qi, e) in cols.iter().enumerate() {
                            let off = j * dq + e.kernel_offset(geom.kernel);
                            if keep.as_ref().is_none_or(|k| k[off]) {
                                full[off] = dw[j * q + qi];
                            }
                        }
                    }
                    let db = masked(db, bias_keep.as_deref());
                    LayerGrad::Weighted { dw: full, db }
                }
                (PLayer::Fc { keep, bias_keep, .. }, LayerGrad::Weighted { dw, db }) => {
                    LayerGrad::Weighted { dw: masked(dw, keep.as_deref()), db: masked(db, bias_keep.as_deref()) }
                }
                _ => LayerGrad::None,
            })
            .collect()
    }

    pub(crate) fn forward_batch(&self, batch: &Tensor4) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let classes = self.net.arch().classes();
        let n = batch.n();
        let per_sample: Vec<(Vec<f32>, Vec<Vec<f32>>)> = (0..n)
            .into_par_iter()
            .map_init(
                || self.workspace(),
                |ws, s| {
                    let logits = self.forward_sample(batch.item(s), ws).to_vec();
                    (logits, ws.acts[1..].to_vec())
                },
            )
            .collect();
        let mut logits = Vec::with_capacity(n * classes);
        let mut activations: Vec<Vec<f32>> = vec![Vec::new(); self.layers.len()];
        for (l, acts) in per_sample {
            logits.extend_from_slice(&l);
            for (dst, a) in activations.iter_mut().zip(acts) {
                dst.extend_from_slice(&a);
            }
        }
        Ok(ForwardOutput { logits: Matrix::from_vec(n, classes, logits)?, activations })
    }

    /// Predicted class of every listed sample (ties → lowest index).
    pub(crate) fn predict_indices(&self, images: &Tensor4, indices: &[usize]) -> Result<Vec<usize>> {
        self.check_batch(images)?;
        const CHUNK: usize = 64;
        let chunks: Vec<Vec<usize>> = indices
            .par_chunks(CHUNK)
            .map_init(
                || self.workspace(),
                |ws, chunk| chunk.iter().map(|&s| argmax(self.forward_sample(images.item(s), ws))).collect(),
            )
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }
}

fn masked(vals: &[f32], keep: Option<&[bool]>) -> Vec<f32> {
    match keep {
        Some(k) => vals.iter().zip(k).map(|(v, &b)| if b { *v } else { 0.0 }).collect(),
        None => vals.to_vec(),
    }
}

#[inline]
fn relu_in_place(v: &mut [f32]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[inline]
fn relu_backward(delta: &mut [f32], output: &[f32]) {
    for (d, o) in delta.iter_mut().zip(output) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

fn max_pool(input: &[f32], maps: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..maps {
        let plane = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = plane + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = plane + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + y) * ow + x;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Arch, LayerKind};
    use crate::tensor::Rng;

    fn random_batch(rng: &mut Rng, arch: &Arch, n: usize) -> Tensor4 {
        let l = &arch.layers()[0];
        let len = n * l.out_maps * l.out_h * l.out_w;
        Tensor4::from_vec([n, l.out_maps, l.out_h, l.out_w], (0..len).map(|_| rng.uniform() as f32).collect())
            .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let arch = Arch::mnist_desk();
        let net = Network::zeros(&arch);
        let x = random_batch(&mut Rng::new(1), &arch, 3);
        let logits = net.forward(&x, None).unwrap();
        for r in 0..3 {
            for p in softmax(logits.row(r)) {
                assert!((p - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_mask_is_identity() {
        let arch = Arch::cifar_desk();
        let mut rng = Rng::new(2);
        let net = Network::init(&arch, &mut rng);
        let x = random_batch(&mut rng, &arch, 2);
        let a = net.forward(&x, None).unwrap();
        let b = net.forward(&x, Some(&PruneMaskSet::full(&arch))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_conv_matches_direct_convolution() {
        // 1×7×7 input, one 3×3 conv with 2 maps, then a linear readout of
        // the ReLU'd maps through a 2·5·5 → 2 identity-like FC.
        let kinds = LayerKind::parse_list("i-c3-f").unwrap();
        let arch = Arch::parse("1-2-50", &kinds, 7).unwrap();
        let mut rng = Rng::new(3);
        let mut net = Network::init(&arch, &mut rng);
        if let Layer::Conv(c) = &mut net.layers_mut()[0] {
            c.bias = vec![0.3, -0.2];
        }
        let x = random_batch(&mut rng, &arch, 1);
        let out = net.forward_full(&x, None, None).unwrap();
        let conv_out = &out.activations[0];
        let c = net.conv(0);
        for j in 0..2 {
            for y in 0..5 {
                for xx in 0..5 {
                    let mut s = c.bias[j] as f64;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += x.get(0, 0, y + dy, xx + dx) as f64 * c.kernels.get(j, 0, dy, dx) as f64;
                        }
                    }
                    let want = s.max(0.0) as f32;
                    assert!((conv_out[(j * 5 + y) * 5 + xx] - want).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let l: Vec<f32> = (0..10).map(|_| rng.normal() * 20.0).collect();
            let s: f32 = softmax(&l).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn max_pool_routes_each_gradient_to_one_input() {
        let input: Vec<f32> = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 7.0, 0.0, 0.0, 1.0, 1.0, 9.0, 0.0, 1.0, 2.0];
        let mut out = vec![0.0; 4];
        let mut am = vec![0u32; 4];
        max_pool(&input, 1, 4, 4, &mut out, &mut am);
        assert_eq!(out, vec![5.0, 7.0, 9.0, 2.0]);
        // tie between 7.0 at (1,2) and (1,3): first wins
        assert_eq!(am, vec![1, 6, 12, 15]);
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.0; 10]), 0);
    }
}
