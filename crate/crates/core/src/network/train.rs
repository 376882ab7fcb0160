//! Mini-batch training with RMSProp and softmax cross-entropy.

use super::engine::{argmax, LayerGrad, Prepared};
use super::Network;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::pruning::{apply_mask, PruneMaskSet};
use crate::tensor::{Rng, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub rmsprop_decay: f32,
    pub rmsprop_epsilon: f32,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before the rate is halved.
    pub lr_patience: usize,
    /// Epochs without validation improvement before training stops
    /// (0 disables early stopping).
    pub early_stop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            epochs: 10,
            seed: 1,
            lr_patience: 3,
            early_stop: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::InvalidArgument(format!("rmsprop_decay {} not in (0, 1)", self.rmsprop_decay)));
        }
        if !(self.learning_rate > 0.0) || !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::InvalidArgument("learning_rate and rmsprop_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_mcr: f64,
    pub val_mcr: Option<f64>,
    pub learning_rate: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept (the best on validation, else the last).
    pub best_epoch: usize,
    pub best_val_mcr: Option<f64>,
}

/// Supplies the weights used in the forward pass, given the float weights
/// and the current epoch.
pub(crate) type WeightView<'a> = Option<&'a mut dyn FnMut(&Network, usize) -> Result<Network>>;

/// Trains `net` in place. With a validation set, the best-scoring epoch's
/// weights are restored at the end.
pub fn train(
    net: &mut Network,
    data: &LabeledSet,
    validation: Option<&LabeledSet>,
    cfg: &TrainConfig,
    mask: Option<&PruneMaskSet>,
) -> Result<TrainReport> {
    train_with(net, data, validation, cfg, mask, None)
}

struct RmsProp {
    cache: Vec<(Vec<f32>, Vec<f32>)>,
}

impl RmsProp {
    fn new(net: &Network) -> Self {
        let cache = net
            .layers()
            .iter()
            .map(|l| {
                (vec![0.0; l.weights().map_or(0, <[f32]>::len)], vec![0.0; l.bias().map_or(0, <[f32]>::len)])
            })
            .collect();
        Self { cache }
    }

    fn step(&mut self, net: &mut Network, grads: &[LayerGrad], lr: f32, decay: f32, eps: f32) {
        for ((layer, g), (cw, cb)) in net.layers_mut().iter_mut().zip(grads).zip(&mut self.cache) {
            let LayerGrad::Weighted { dw, db } = g else { continue };
            update(layer.weights_mut().unwrap(), dw, cw, lr, decay, eps);
            update(layer.bias_mut().unwrap(), db, cb, lr, decay, eps);
        }
    }
}

fn update(w: &mut [f32], g: &[f32], cache: &mut [f32], lr: f32, decay: f32, eps: f32) {
    for ((w, &g), c) in w.iter_mut().zip(g).zip(cache) {
        *c = decay * *c + (1.0 - decay) * g * g;
        if g != 0.0 {
            *w -= lr * g / (c.sqrt() + eps);
        }
    }
}

/// Cross-entropy of `logits` against `label`, and `softmax - onehot` written
/// to `grad`.
fn cross_entropy(logits: &[f32], label: usize, grad: &mut [f32]) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    let log_z = max + sum.ln();
    for (i, (g, &l)) in grad.iter_mut().zip(logits).enumerate() {
        let p = (l as f64 - log_z).exp();
        *g = (p - if i == label { 1.0 } else { 0.0 }) as f32;
    }
    log_z - logits[label] as f64
}

pub(crate) fn train_with(
    net: &mut Network,
    data: &LabeledSet,
    validation: Option<&LabeledSet>,
    cfg: &TrainConfig,
    mask: Option<&PruneMaskSet>,
    mut view: WeightView,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(m) = mask {
        *net = apply_mask(net, m)?;
    }
    let classes = net.arch().classes();
    let rng = Rng::new(cfg.seed).substream(0x7261_696e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = RmsProp::new(net);
    let mut lr = cfg.learning_rate;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut stalled = 0;
    let mut grad_buf = vec![0.0f32; classes];

    for epoch in 0..cfg.epochs {
        let mut erng = rng.substream(epoch as u64);
        erng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut wrong = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let viewed;
            let fwd_net: &Network = match view.as_mut() {
                Some(f) => {
                    viewed = f(net, epoch)?;
                    &viewed
                }
                None => net,
            };
            let prepared = Prepared::new(fwd_net, mask)?;
            let mut ws = prepared.workspace();
            let mut grads = prepared.gradients();
            let mut batch_loss = 0.0f64;
            let scale = 1.0 / batch.len() as f32;
            for &s in batch {
                let label = data.labels()[s] as usize;
                let logits = prepared.forward_sample(data.images().item(s), &mut ws);
                if argmax(logits) != label {
                    wrong += 1;
                }
                batch_loss += cross_entropy(logits, label, &mut grad_buf);
                for g in &mut grad_buf {
                    *g *= scale;
                }
                prepared.backward_sample(&mut ws, &grad_buf, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { loss: batch_loss as f32, epoch, batch: b });
            }
            loss_sum += batch_loss;
            let full = prepared.unpack(&grads);
            drop(prepared);
            opt.step(net, &full, lr, cfg.rmsprop_decay, cfg.rmsprop_epsilon);
        }
        let val_mcr = match validation {
            Some(v) => {
                let eval_net;
                let n: &Network = match view.as_mut() {
                    Some(f) => {
                        eval_net = f(net, epoch)?;
                        &eval_net
                    }
                    None => net,
                };
                Some(evaluate_mcr(n, v, mask)?)
            }
            None => None,
        };
        history.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_mcr: wrong as f64 / data.len() as f64,
            val_mcr,
            learning_rate: lr,
        });
        if let Some(v) = val_mcr {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, net.clone()));
                stalled = 0;
            } else {
                stalled += 1;
                if cfg.lr_patience > 0 && stalled % cfg.lr_patience == 0 {
                    lr *= 0.5;
                }
                if cfg.early_stop > 0 && stalled >= cfg.early_stop {
                    break;
                }
            }
        }
    }
    let (best_epoch, best_val_mcr) = match best {
        Some((v, e, w)) => {
            *net = w;
            (e, Some(v))
        }
        None => (history.len().saturating_sub(1), None),
    };
    Ok(TrainReport { epochs: history, best_epoch, best_val_mcr })
}

/// Misclassification rate over the whole set.
pub fn evaluate_mcr(net: &Network, data: &LabeledSet, mask: Option<&PruneMaskSet>) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_subset(net, data, &all, mask)
}

/// Misclassification rate over `indices` of `data`.
pub fn evaluate_subset(
    net: &Network,
    data: &LabeledSet,
    indices: &[usize],
    mask: Option<&PruneMaskSet>,
) -> Result<f64> {
    let prepared = Prepared::new(net, mask)?;
    mcr_prepared(&prepared, data, indices)
}

pub(crate) fn mcr_prepared(prepared: &Prepared, data: &LabeledSet, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = prepared.predict_indices(data.images(), indices)?;
    let wrong = preds.iter().zip(indices).filter(|(p, &i)| **p != data.labels()[i] as usize).count();
    Ok(wrong as f64 / indices.len() as f64)
}

/// Gradient of one parameter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Mean cross-entropy over `indices` and its gradient per parameter layer
/// (`None` for pooling layers), with masked entries zeroed.
pub fn loss_and_gradients(
    net: &Network,
    data: &LabeledSet,
    indices: &[usize],
    mask: Option<&PruneMaskSet>,
) -> Result<(f64, Vec<Option<ParamGrad>>)> {
    if indices.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let prepared = Prepared::new(net, mask)?;
    let mut ws = prepared.workspace();
    let mut grads = prepared.gradients();
    let mut gbuf = vec![0.0f32; net.arch().classes()];
    let scale = 1.0 / indices.len() as f32;
    let mut loss = 0.0;
    for &s in indices {
        let logits = prepared.forward_sample(data.images().item(s), &mut ws);
        loss += cross_entropy(logits, data.labels()[s] as usize, &mut gbuf);
        for g in &mut gbuf {
            *g *= scale;
        }
        prepared.backward_sample(&mut ws, &gbuf, &mut grads);
    }
    let out = prepared
        .unpack(&grads)
        .into_iter()
        .map(|g| match g {
            LayerGrad::Weighted { dw, db } => Some(ParamGrad { weights: dw, bias: db }),
            LayerGrad::None => None,
        })
        .collect();
    Ok((loss / indices.len() as f64, out))
}

/// Predicted class per image (ties go to the lowest class index).
pub fn predict(net: &Network, images: &Tensor4, mask: Option<&PruneMaskSet>) -> Result<Vec<usize>> {
    let prepared = Prepared::new(net, mask)?;
    prepared.predict_indices(images, &(0..images.n()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledSet, Split};
    use crate::network::{Arch, LayerKind};

    fn toy_arch() -> Arch {
        let kinds = LayerKind::parse_list("i-c3-p-f").unwrap();
        Arch::parse("1-2-2-2", &kinds, 6).unwrap()
    }

    #[test]
    fn loss_decreases_on_separable_pair() {
        let arch = toy_arch();
        let mut rng = Rng::new(5);
        let mut net = Network::init(&arch, &mut rng);
        let mut data = vec![0.0; 72];
        for v in &mut data[..18] {
            *v = 1.0;
        }
        for v in &mut data[54..] {
            *v = 1.0;
        }
        let set = LabeledSet::new(Tensor4::from_vec([2, 1, 6, 6], data).unwrap(), vec![0, 1], 2, Split::Train).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let mut losses = Vec::new();
        for _ in 0..5 {
            let r = train(&mut net, &set, None, &cfg, None).unwrap();
            losses.push(r.epochs[0].loss);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = vec![0.0; 3];
        let l = cross_entropy(&[0.0, 0.0, 0.0], 1, &mut g);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-6 && (g[1] + 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainConfig { rmsprop_decay: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hand_counted_mcr() {
        // FC-only net on 1×1×1 "images": logit0 = x, logit1 = 0.5, so the
        // prediction is class 0 iff x > 0.5 (tie at 0.5 → class 0).
        let kinds = LayerKind::parse_list("i-f").unwrap();
        let arch = Arch::parse("1-2", &kinds, 1).unwrap();
        let mut net = Network::zeros(&arch);
        if let crate::network::Layer::Fc(f) = &mut net.layers_mut()[0] {
            f.weights.set(0, 0, 1.0);
            f.bias = vec![0.0, 0.5];
        }
        let xs = [0.1, 0.9, 0.5, 0.7, 0.2, 0.6, 0.4, 1.0, 0.0, 0.55];
        let labels = [1u8, 0, 1, 0, 0, 1, 1, 0, 0, 0];
        let set = LabeledSet::new(Tensor4::from_vec([10, 1, 1, 1], xs.to_vec()).unwrap(), labels.to_vec(), 2, Split::Test)
            .unwrap();
        // predictions: 1,0,0,0,1,0,1,0,1,0 → wrong at 2, 4, 5, 8
        assert_eq!(predict(&net, set.images(), None).unwrap(), vec![1, 0, 0, 0, 1, 0, 1, 0, 1, 0]);
        assert!((evaluate_mcr(&net, &set, None).unwrap() - 0.4).abs() < 1e-12);
    }
}
