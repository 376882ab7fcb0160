//! Small CNNs: definition, initialization, forward/backward, RMSProp
//! training, evaluation and checkpoints.

mod arch;
mod checkpoint;
mod engine;
mod train;

pub use arch::{Activation, Arch, LayerKind, LayerSpec};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use engine::{softmax, ForwardOutput, SignalQuantizer};
pub(crate) use engine::Prepared;
pub use train::{
    evaluate_mcr, evaluate_subset, loss_and_gradients, predict, train, EpochStats, ParamGrad, TrainConfig, TrainReport,
};
pub(crate) use train::{mcr_prepared, train_with};

use crate::error::{Error, Result};
use crate::lowering::ConvGeometry;
use crate::pruning::PruneMaskSet;
use crate::tensor::{Matrix, Rng, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(out_maps, in_maps, k, k)`
    pub kernels: Tensor4,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn out_maps(&self) -> usize {
        self.kernels.n()
    }
    pub fn in_maps(&self) -> usize {
        self.kernels.c()
    }
    pub fn kernel(&self) -> usize {
        self.kernels.h()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    /// `outputs × inputs`
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Pool,
    Fc(FcLayer),
}

impl Layer {
    /// Weight values (not biases) of a conv or FC layer.
    pub fn weights(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv(c) => Some(c.kernels.as_slice()),
            Layer::Fc(f) => Some(f.weights.as_slice()),
            Layer::Pool => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut [f32]> {
        match self {
            Layer::Conv(c) => Some(c.kernels.as_mut_slice()),
            Layer::Fc(f) => Some(f.weights.as_mut_slice()),
            Layer::Pool => None,
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv(c) => Some(&c.bias),
            Layer::Fc(f) => Some(&f.bias),
            Layer::Pool => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f32>> {
        match self {
            Layer::Conv(c) => Some(&mut c.bias),
            Layer::Fc(f) => Some(&mut f.bias),
            Layer::Pool => None,
        }
    }
}

/// Parameters of an [`Arch`]. `layers[i]` belongs to `arch.layers()[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Arch,
    layers: Vec<Layer>,
}

impl Network {
    /// He-normal weights (`σ = √(2 / fan_in)`), zero biases.
    pub fn init(arch: &Arch, rng: &mut Rng) -> Network {
        let mut net = Network::zeros(arch);
        for (layer, spec) in net.layers.iter_mut().zip(&arch.layers()[1..]) {
            let std = (2.0 / spec.fan_in().max(1) as f32).sqrt();
            if let Some(w) = layer.weights_mut() {
                for v in w {
                    *v = rng.normal() * std;
                }
            }
        }
        net
    }

    pub fn zeros(arch: &Arch) -> Network {
        let layers = arch.layers()[1..]
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { kernel } => Layer::Conv(ConvLayer {
                    kernels: Tensor4::zeros(l.out_maps, l.in_maps, kernel, kernel).expect("dims >= 1"),
                    bias: vec![0.0; l.out_maps],
                }),
                LayerKind::Pool => Layer::Pool,
                LayerKind::Fc => Layer::Fc(FcLayer {
                    weights: Matrix::zeros(l.out_maps, l.fan_in()),
                    bias: vec![0.0; l.out_maps],
                }),
                LayerKind::Input => unreachable!("input only at position 0"),
            })
            .collect();
        Network { arch: arch.clone(), layers }
    }

    pub(crate) fn from_parts(arch: Arch, layers: Vec<Layer>) -> Result<Network> {
        let expected = Network::zeros(&arch);
        if expected.layers.len() != layers.len() {
            return Err(Error::Shape(format!(
                "arch {arch} has {} layers, got {}",
                expected.layers.len(),
                layers.len()
            )));
        }
        for (i, (a, b)) in expected.layers.iter().zip(&layers).enumerate() {
            let same = match (a, b) {
                (Layer::Conv(x), Layer::Conv(y)) => x.kernels.dims() == y.kernels.dims() && x.bias.len() == y.bias.len(),
                (Layer::Fc(x), Layer::Fc(y)) => {
                    x.weights.rows() == y.weights.rows()
                        && x.weights.cols() == y.weights.cols()
                        && x.bias.len() == y.bias.len()
                }
                (Layer::Pool, Layer::Pool) => true,
                _ => false,
            };
            if !same {
                return Err(Error::Shape(format!("layer {} does not match arch {arch}", i + 1)));
            }
        }
        Ok(Network { arch, layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    /// Parameter layers; index `i` corresponds to arch position `i + 1`.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Layer at arch position `pos` (≥ 1).
    pub fn layer_at(&self, pos: usize) -> &Layer {
        &self.layers[pos - 1]
    }

    pub fn layer_at_mut(&mut self, pos: usize) -> &mut Layer {
        &mut self.layers[pos - 1]
    }

    /// Conv layer by conv ordinal.
    pub fn conv(&self, conv: usize) -> &ConvLayer {
        let pos = self.arch.conv_positions()[conv];
        match self.layer_at(pos) {
            Layer::Conv(c) => c,
            _ => unreachable!(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights().map_or(0, <[f32]>::len) + l.bias().map_or(0, <[f32]>::len))
            .sum()
    }

    /// Geometry of the conv layer at arch position `pos`.
    pub fn conv_geometry(&self, pos: usize) -> ConvGeometry {
        let spec = &self.arch.layers()[pos];
        let LayerKind::Conv { kernel } = spec.kind else {
            panic!("position {pos} is not a convolution")
        };
        ConvGeometry {
            in_channels: spec.in_maps,
            in_h: spec.in_h,
            in_w: spec.in_w,
            kernel,
            out_maps: spec.out_maps,
        }
    }

    /// Logits for a batch (`n × classes`).
    pub fn forward(&self, batch: &Tensor4, mask: Option<&PruneMaskSet>) -> Result<Matrix> {
        Ok(self.forward_full(batch, mask, None)?.logits)
    }

    /// Logits plus per-layer activations of every sample.
    pub fn forward_full(
        &self,
        batch: &Tensor4,
        mask: Option<&PruneMaskSet>,
        signals: Option<&[Option<SignalQuantizer>]>,
    ) -> Result<ForwardOutput> {
        let prepared = Prepared::new(self, mask)?.with_signals(signals)?;
        prepared.forward_batch(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_closed_form() {
        let mut rng = Rng::new(1);
        for arch in [Arch::mnist(), Arch::cifar(), Arch::mnist_desk(), Arch::cifar_desk()] {
            let net = Network::init(&arch, &mut rng);
            assert_eq!(net.param_count(), arch.param_count());
        }
        assert_eq!(Network::zeros(&Arch::cifar()).param_count(), 79_978);
        assert_eq!(Network::zeros(&Arch::mnist()).param_count(), 431_080);
    }

    #[test]
    fn init_uses_fan_in_scale() {
        let arch = Arch::mnist();
        let net = Network::init(&arch, &mut Rng::new(2));
        let w = net.layer_at(5).weights().unwrap();
        let var = w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / 800.0;
        assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
        assert!(net.layer_at(5).bias().unwrap().iter().all(|&b| b == 0.0));
    }
}
