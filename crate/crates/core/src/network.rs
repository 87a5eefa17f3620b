use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::ChannelAdapter;
use crate::error::{Error, Result};
use crate::layers::{
    AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, Mode, Relu, ResidualBlock,
};
use crate::loss::cross_entropy;
use crate::optim::Sgd;
use crate::params::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One network operation. Networks are flat op sequences; structural
/// grouping (cells, module boundaries, head start) is kept by the callers
/// as index ranges into this sequence.
#[derive(Debug, Clone)]
pub enum Op<S: Scalar = f32> {
    Conv(Conv2d<S>),
    Bn(BatchNorm2d<S>),
    Relu(Relu<S>),
    MaxPool(MaxPool2d<S>),
    AvgPool(AvgPool2d<S>),
    Linear(Linear<S>),
    Flatten(Flatten<S>),
    Residual(ResidualBlock<S>),
    Adapter(ChannelAdapter<S>),
}

impl<S: Scalar> Op<S> {
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        match self {
            Op::Conv(l) => l.forward(x, mode),
            Op::Bn(l) => l.forward(x, mode),
            Op::Relu(l) => l.forward(x, mode),
            Op::MaxPool(l) => l.forward(x, mode),
            Op::AvgPool(l) => l.forward(x, mode),
            Op::Linear(l) => l.forward(x, mode),
            Op::Flatten(l) => l.forward(x, mode),
            Op::Residual(l) => l.forward(x, mode),
            Op::Adapter(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Op::Conv(l) => l.backward(g),
            Op::Bn(l) => l.backward(g),
            Op::Relu(l) => l.backward(g),
            Op::MaxPool(l) => l.backward(g),
            Op::AvgPool(l) => l.backward(g),
            Op::Linear(l) => l.backward(g),
            Op::Flatten(l) => l.backward(g),
            Op::Residual(l) => l.backward(g),
            Op::Adapter(l) => l.backward(g),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            Op::Conv(l) => l.params_mut(),
            Op::Bn(l) => l.params_mut(),
            Op::Linear(l) => l.params_mut(),
            Op::Residual(l) => l.params_mut(),
            Op::Adapter(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        match self {
            Op::Conv(l) => l.set_frozen(frozen),
            Op::Bn(l) => l.set_frozen(frozen),
            Op::Linear(l) => l.set_frozen(frozen),
            Op::Residual(l) => l.set_frozen(frozen),
            Op::Adapter(l) => l.set_frozen(frozen),
            _ => {}
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        match self {
            Op::Conv(l) => l.tensors(),
            Op::Bn(l) => l.tensors(),
            Op::Linear(l) => l.tensors(),
            Op::Residual(l) => l.tensors(),
            Op::Adapter(l) => l.tensors(),
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        match self {
            Op::Conv(l) => l.tensors_mut(),
            Op::Bn(l) => l.tensors_mut(),
            Op::Linear(l) => l.tensors_mut(),
            Op::Residual(l) => l.tensors_mut(),
            Op::Adapter(l) => l.tensors_mut(),
            _ => Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Op::Conv(l) => {
                format!("conv{k}x{k} {}->{}", l.in_channels(), l.out_channels(), k = l.kernel())
            }
            Op::Bn(l) => format!("batchnorm {}", l.channels()),
            Op::Relu(_) => "relu".to_string(),
            Op::MaxPool(l) => format!("maxpool {}x{}/{}", l.kernel, l.kernel, l.stride),
            Op::AvgPool(l) => format!("avgpool {}x{}/{}", l.kernel, l.kernel, l.stride),
            Op::Linear(l) => format!("linear {}->{}", l.in_features(), l.out_features()),
            Op::Flatten(_) => "flatten".to_string(),
            Op::Residual(l) => format!("residual {}->{}", l.in_channels(), l.out_channels()),
            Op::Adapter(l) => {
                format!("adapter {} {}->{}", l.plan.kind.label(), l.plan.in_ch, l.plan.out_ch)
            }
        }
    }
}

/// Flat sequence of ops executed in order.
#[derive(Debug, Clone, Default)]
pub struct Network<S: Scalar = f32> {
    pub ops: Vec<Op<S>>,
}

impl<S: Scalar> Network<S> {
    pub fn new(ops: Vec<Op<S>>) -> Self {
        Self { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        self.forward_slice(x, mode, 0..self.ops.len())
    }

    pub fn forward_slice(&mut self, x: &Tensor<S>, mode: Mode, range: Range<usize>) -> Result<Tensor<S>> {
        let mut cur = x.clone();
        for op in &mut self.ops[range] {
            cur = op.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        self.backward_slice(g, 0..self.ops.len())
    }

    pub fn backward_slice(&mut self, g: &Tensor<S>, range: Range<usize>) -> Result<Tensor<S>> {
        let mut cur = g.clone();
        for op in self.ops[range].iter_mut().rev() {
            cur = op.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.ops.iter_mut().flat_map(|op| op.params_mut()).collect()
    }

    pub fn params_mut_slice(&mut self, range: Range<usize>) -> Vec<&mut Param<S>> {
        self.ops[range].iter_mut().flat_map(|op| op.params_mut()).collect()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for op in &mut self.ops {
            op.set_frozen(frozen);
        }
    }

    pub fn set_frozen_slice(&mut self, frozen: bool, range: Range<usize>) {
        for op in &mut self.ops[range] {
            op.set_frozen(frozen);
        }
    }

    /// Flat name -> tensor map, ops prefixed as `op000.`, `op001.`, ...
    pub fn state_dict(&self) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            for (name, t) in op.tensors() {
                out.insert(format!("op{i:03}.{name}"), t.clone());
            }
        }
        out
    }

    /// Strict load: every entry must land on an existing tensor of the same
    /// shape, and every network tensor must be covered.
    pub fn load_state_dict(&mut self, mut state: BTreeMap<String, Tensor<S>>) -> Result<()> {
        for (i, op) in self.ops.iter_mut().enumerate() {
            for (name, t) in op.tensors_mut() {
                let key = format!("op{i:03}.{name}");
                let src = state
                    .remove(&key)
                    .ok_or_else(|| Error::Format(format!("missing tensor {key:?} in state")))?;
                if src.dims() != t.dims() {
                    return Err(Error::Format(format!(
                        "tensor {key:?}: stored dims {:?} but layer wants {:?}",
                        src.dims(),
                        t.dims()
                    )));
                }
                *t = src;
            }
        }
        if let Some((k, _)) = state.into_iter().next() {
            return Err(Error::Format(format!("state has unknown tensor {k:?}")));
        }
        Ok(())
    }

    pub fn describe(&self) -> Vec<String> {
        self.ops.iter().map(|op| op.label()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Seeds the per-epoch shuffling stream (augmentation draws from a
    /// stream derived from it).
    pub shuffle_seed: u64,
    /// Cutout side length applied to each training batch; 0 disables.
    pub cutout_len: usize,
    /// Random horizontal flip per training sample.
    pub flip: bool,
}

impl FitConfig {
    pub fn plain(epochs: usize, batch_size: usize, lr: f64, momentum: f64, shuffle_seed: u64) -> Self {
        Self { epochs, batch_size, lr, momentum, shuffle_seed, cutout_len: 0, flip: false }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mini-batch SGD over the full op sequence. Returns mean training loss and
/// accuracy per epoch, in epoch order.
pub fn fit<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    cfg: &FitConfig,
) -> Result<Vec<EpochStats>> {
    fit_slice(net, images, labels, cfg, 0..net.ops.len(), Mode::TRAIN)
}

/// Like `fit`, but restricted to a sub-range of ops (the rest of the
/// network is not executed; `images` must already be the input expected at
/// `range.start`). `mode` controls batch-norm statistics inside the range.
pub fn fit_slice<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    cfg: &FitConfig,
    range: Range<usize>,
    mode: Mode,
) -> Result<Vec<EpochStats>> {
    if images.size(0) != labels.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.size(0),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Invalid("fit needs positive epochs and batch size".into()));
    }
    let n = images.size(0);
    let opt = Sgd::new(S::from_f64_lossy(cfg.lr), S::from_f64_lossy(cfg.momentum));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(crate::seeds::mix(cfg.shuffle_seed, &[0xA06]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut bx = images.select_rows(chunk)?;
            if cfg.flip {
                crate::data::flip_horizontal(&mut bx, &mut aug_rng);
            }
            if cfg.cutout_len > 0 {
                crate::data::cutout(&mut bx, cfg.cutout_len, &mut aug_rng);
            }
            let bx = bx;
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = net.forward_slice(&bx, mode, range.clone())?;
            let out = cross_entropy(&logits, &by)?;
            loss_sum += out.loss;
            correct += out.correct;
            batches += 1;
            let mut params = net.params_mut_slice(range.clone());
            opt.zero_grad(&mut params);
            drop(params);
            net.backward_slice(&out.grad, range.clone())?;
            let mut params = net.params_mut_slice(range.clone());
            opt.step(&mut params);
        }
        stats.push(EpochStats {
            loss: loss_sum / batches.max(1) as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok(stats)
}

/// Loss and accuracy without weight updates, batch-norm in eval mode.
pub fn evaluate<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    batch_size: usize,
) -> Result<EpochStats> {
    evaluate_slice(net, images, labels, batch_size, 0..net.ops.len())
}

pub fn evaluate_slice<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    batch_size: usize,
    range: Range<usize>,
) -> Result<EpochStats> {
    let n = images.size(0);
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut batches = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let bx = images.select_rows(chunk)?;
        let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let logits = net.forward_slice(&bx, Mode::EVAL, range.clone())?;
        let out = cross_entropy(&logits, &by)?;
        loss_sum += out.loss;
        correct += out.correct;
        batches += 1;
    }
    Ok(EpochStats { loss: loss_sum / batches.max(1) as f64, accuracy: correct as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(rng: &mut ChaCha8Rng) -> Network<f32> {
        Network::new(vec![
            Op::Conv(Conv2d::new(1, 2, 3, 1, Padding::Same, true, rng).unwrap()),
            Op::Relu(Relu::new()),
            Op::MaxPool(MaxPool2d::new(2, 2)),
            Op::Flatten(Flatten::new()),
            Op::Linear(Linear::new(2 * 2 * 2, 2, rng).unwrap()),
        ])
    }

    #[test]
    fn state_dict_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = tiny_net(&mut rng);
        let b = tiny_net(&mut rng);
        let state = b.state_dict();
        a.load_state_dict(state.clone()).unwrap();
        let back = a.state_dict();
        assert_eq!(back.len(), state.len());
        for (k, t) in &state {
            assert_eq!(back[k].data(), t.data(), "{k}");
        }
    }

    #[test]
    fn load_rejects_missing_and_unknown_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = tiny_net(&mut rng);
        let mut state = a.state_dict();
        state.insert("op099.weight".into(), Tensor::zeros(&[1]).unwrap());
        assert!(a.load_state_dict(state).is_err());
        let mut state = a.state_dict();
        state.remove("op000.weight");
        assert!(a.load_state_dict(state).is_err());
    }

    #[test]
    fn fit_reduces_loss_on_separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = tiny_net(&mut rng);
        // class 0: negative plane, class 1: positive plane
        let n = 32;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let sign = if i % 2 == 0 { -1.0f32 } else { 1.0 };
            data.extend(std::iter::repeat(sign).take(16));
            labels.push(if i % 2 == 0 { 0usize } else { 1 });
        }
        let images = Tensor::new(&[n, 1, 4, 4], data).unwrap();
        let cfg = FitConfig::plain(8, 8, 0.05, 0.9, 1);
        let stats = fit(&mut net, &images, &labels, &cfg).unwrap();
        assert!(stats.last().unwrap().loss < stats[0].loss);
        assert!(stats.last().unwrap().accuracy > 0.9);
    }
}
