//! Uniform symmetric fixed-point quantization of weights and signals, with
//! L2-optimal step sizes and quantized-forward retraining.

use rayon::prelude::*;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::network::{evaluate_mcr, train_with, Layer, Network, SignalQuantizer, TrainConfig, TrainReport};
use crate::pruning::PruneMaskSet;

fn check_levels(levels: u32) -> Result<()> {
    if levels < 3 || levels % 2 == 0 {
        return Err(Error::InvalidArgument(format!("level count {levels} must be odd and at least 3")));
    }
    Ok(())
}

/// Nearest level of `{-L..L}·step` with `L = (levels-1)/2`; ties go toward
/// zero, values beyond the range saturate. A zero step passes `w` through.
#[inline]
pub fn quantize_value(w: f32, step: f32, levels: u32) -> f32 {
    if step == 0.0 {
        return w;
    }
    let l = ((levels - 1) / 2) as f32;
    let a = w.abs() / step;
    let idx = (a - 0.5).ceil().clamp(0.0, l);
    (idx * step).copysign(w)
}

pub fn quantize_group(weights: &[f32], step: f32, levels: u32) -> Vec<f32> {
    weights.iter().map(|&w| quantize_value(w, step, levels)).collect()
}

/// `Σ (w − q(w))²` in double precision.
pub fn quantization_error(weights: &[f32], step: f32, levels: u32) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let d = w as f64 - quantize_value(w, step, levels) as f64;
            d * d
        })
        .sum()
}

/// Step size minimizing the L2 quantization error of `weights`.
///
/// As `Δ` shrinks, each `|w|` moves from level `j` to `j+1` at
/// `Δ = |w| / (j + ½)`. Between consecutive breakpoints the assignment is
/// fixed and the error `Σw² − 2ΔS₁ + Δ²S₂` is a parabola, so the global
/// minimum is found by sweeping the sorted breakpoints once.
pub fn optimal_step(weights: &[f32], levels: u32) -> Result<f32> {
    check_levels(levels)?;
    if weights.is_empty() {
        return Err(Error::Empty("weight group"));
    }
    let l = (levels - 1) / 2;
    let mags: Vec<f64> = weights.iter().map(|w| (w.abs()) as f64).filter(|&a| a > 0.0).collect();
    if mags.is_empty() {
        return Ok(0.0);
    }
    let sum_sq: f64 = mags.iter().map(|a| a * a).sum();
    let mut bps: Vec<(f64, f64, u32)> = Vec::with_capacity(mags.len() * l as usize);
    for &a in &mags {
        for j in 0..l {
            bps.push((a / (j as f64 + 0.5), a, j + 1));
        }
    }
    bps.sort_unstable_by(|x, y| y.0.total_cmp(&x.0));
    let err = |d: f64, s1: f64, s2: f64| sum_sq - 2.0 * d * s1 + d * d * s2;
    // Above the largest breakpoint every weight maps to zero.
    let mut best_d = bps[0].0;
    let mut best_e = sum_sq;
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    let mut t = 0;
    while t < bps.len() {
        let hi = bps[t].0;
        while t < bps.len() && bps[t].0 == hi {
            let (_, a, i) = bps[t];
            let i = i as f64;
            s1 += a;
            s2 += i * i - (i - 1.0) * (i - 1.0);
            t += 1;
        }
        let lo = if t < bps.len() { bps[t].0 } else { 0.0 };
        let mut d = if s2 > 0.0 { s1 / s2 } else { hi };
        d = d.clamp(lo, hi);
        if d > 0.0 {
            let e = err(d, s1, s2);
            if e < best_e {
                best_e = e;
                best_d = d;
            }
        }
    }
    Ok(best_d as f32)
}

/// Quantization groups of one parameter layer: one per conv kernel, one per
/// FC layer.
fn groups(layer: &Layer) -> Vec<std::ops::Range<usize>> {
    match layer {
        Layer::Conv(c) => {
            let k2 = c.kernel() * c.kernel();
            (0..c.out_maps() * c.in_maps()).map(|g| g * k2..(g + 1) * k2).collect()
        }
        Layer::Fc(f) => vec![0..f.weights.as_slice().len()],
        Layer::Pool => Vec::new(),
    }
}

/// Per-layer level counts, aligned with `Network::layers()`; `None` keeps a
/// layer in float.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub levels: Vec<Option<u32>>,
    /// Fitted step per group, per layer (empty for float layers).
    pub steps: Vec<Vec<f32>>,
    pub signals: Vec<Option<SignalQuantizer>>,
}

impl QuantScheme {
    /// Levels for the weighted layers in order (e.g. C1, C3, C5, F6).
    pub fn from_weighted_levels(net: &Network, weighted: &[u32]) -> Result<Self> {
        let n_weighted = net.layers().iter().filter(|l| l.weights().is_some()).count();
        if weighted.len() != n_weighted {
            return Err(Error::InvalidArgument(format!(
                "{} level counts for {n_weighted} weighted layers",
                weighted.len()
            )));
        }
        let mut it = weighted.iter();
        let levels = net.layers().iter().map(|l| l.weights().map(|_| *it.next().unwrap())).collect();
        Self::new(net, levels)
    }

    pub fn new(net: &Network, levels: Vec<Option<u32>>) -> Result<Self> {
        if levels.len() != net.layers().len() {
            return Err(Error::Shape(format!("{} level entries for {} layers", levels.len(), net.layers().len())));
        }
        for (l, layer) in levels.iter().zip(net.layers()) {
            if let Some(m) = l {
                check_levels(*m)?;
                if layer.weights().is_none() {
                    return Err(Error::InvalidArgument("pooling layers have no weights to quantize".into()));
                }
            }
        }
        let n = levels.len();
        Ok(Self { levels, steps: vec![Vec::new(); n], signals: vec![None; n] })
    }

    /// Refits every group's step on the current weights of `net`.
    pub fn fit(&mut self, net: &Network) -> Result<()> {
        let fitted: Result<Vec<Vec<f32>>> = net
            .layers()
            .iter()
            .zip(&self.levels)
            .map(|(layer, lv)| match (layer.weights(), lv) {
                (Some(w), Some(m)) => groups(layer).into_par_iter().map(|r| optimal_step(&w[r], *m)).collect(),
                _ => Ok(Vec::new()),
            })
            .collect();
        self.steps = fitted?;
        Ok(())
    }

    /// Copy of `net` with every quantized layer's weights snapped to its
    /// level set using the fitted steps. Biases stay float.
    pub fn apply(&self, net: &Network) -> Result<Network> {
        let mut out = net.clone();
        for ((layer, lv), steps) in out.layers_mut().iter_mut().zip(&self.levels).zip(&self.steps) {
            let Some(m) = lv else { continue };
            let gs = groups(layer);
            if gs.len() != steps.len() {
                return Err(Error::InvalidArgument("quantization steps not fitted".into()));
            }
            let w = layer.weights_mut().unwrap();
            for (r, &d) in gs.into_iter().zip(steps) {
                for v in &mut w[r] {
                    *v = quantize_value(*v, d, *m);
                }
            }
        }
        Ok(out)
    }
}

/// Direct quantization: fit steps on `net` and snap its weights.
pub fn quantize_network(net: &Network, scheme: &mut QuantScheme) -> Result<Network> {
    scheme.fit(net)?;
    scheme.apply(net)
}

/// Fixed-point retraining: the forward (and error back-propagation) pass
/// uses quantized weights, updates go to the float copy. Steps are refitted
/// at the start of every epoch. Returns the final quantized network; `net`
/// keeps the float weights.
pub fn retrain_quantized(
    net: &mut Network,
    scheme: &mut QuantScheme,
    data: &LabeledSet,
    validation: Option<&LabeledSet>,
    cfg: &TrainConfig,
    mask: Option<&PruneMaskSet>,
) -> Result<(Network, TrainReport)> {
    let mut fitted_epoch: Option<usize> = None;
    let mut view = |n: &Network, epoch: usize| -> Result<Network> {
        if fitted_epoch != Some(epoch) {
            scheme.fit(n)?;
            fitted_epoch = Some(epoch);
        }
        scheme.apply(n)
    };
    let report = train_with(net, data, validation, cfg, mask, Some(&mut view))?;
    let q = quantize_network(net, scheme)?;
    Ok((q, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub layer: String,
    pub levels: u32,
    pub mcr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub float_mcr: f64,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,levels,mcr,delta_mcr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.layer, r.levels, r.mcr, r.mcr - self.float_mcr));
        }
        s
    }
}

/// Quantizes one weighted layer at a time (no retraining) and records MCR.
pub fn sensitivity_scan(
    net: &Network,
    data: &LabeledSet,
    level_list: &[u32],
    mask: Option<&PruneMaskSet>,
) -> Result<SensitivityReport> {
    let float_mcr = evaluate_mcr(net, data, mask)?;
    let mut rows = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        if layer.weights().is_none() {
            continue;
        }
        for &m in level_list {
            let mut levels = vec![None; net.layers().len()];
            levels[i] = Some(m);
            let mut scheme = QuantScheme::new(net, levels)?;
            let q = quantize_network(net, &mut scheme)?;
            rows.push(SensitivityRow {
                layer: net.arch().layer_name(i + 1),
                levels: m,
                mcr: evaluate_mcr(&q, data, mask)?,
            });
        }
    }
    Ok(SensitivityReport { float_mcr, rows })
}

const CALIBRATION_VALUES: usize = 1 << 16;

/// Fits one signal quantizer per requested layer on post-activation values
/// seen over `calibration`.
pub fn quantize_signals(
    net: &Network,
    signal_levels: &[Option<u32>],
    calibration: &LabeledSet,
    mask: Option<&PruneMaskSet>,
) -> Result<Vec<Option<SignalQuantizer>>> {
    if calibration.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if signal_levels.len() != net.layers().len() {
        return Err(Error::Shape(format!(
            "{} signal level entries for {} layers",
            signal_levels.len(),
            net.layers().len()
        )));
    }
    let out = net.forward_full(calibration.images(), mask, None)?;
    signal_levels
        .iter()
        .zip(&out.activations)
        .map(|(lv, acts)| match lv {
            None => Ok(None),
            Some(m) => {
                check_levels(*m)?;
                let nz: Vec<f32> = acts.iter().copied().filter(|&v| v != 0.0).collect();
                let step = if nz.is_empty() {
                    0.0
                } else {
                    let stride = nz.len().div_ceil(CALIBRATION_VALUES);
                    let sample: Vec<f32> = nz.iter().step_by(stride).copied().collect();
                    optimal_step(&sample, *m)?
                };
                Ok(Some(SignalQuantizer { levels: *m, step }))
            }
        })
        .collect()
}

/// Table-1 style CSV: one `<layer>_M` column per weighted layer, then MCR.
pub fn table_csv(net: &Network, rows: &[(Vec<u32>, f64)]) -> String {
    let names: Vec<String> = net.arch().weighted_positions().iter().map(|&p| net.arch().layer_name(p)).collect();
    let mut s = names.iter().map(|n| format!("{n}_M")).collect::<Vec<_>>().join(",");
    s.push_str(",test_MCR\n");
    for (levels, mcr) in rows {
        let cells: Vec<String> = levels.iter().map(u32::to_string).collect();
        s.push_str(&format!("{},{:.4}\n", cells.join(","), mcr * 100.0));
    }
    s
}
