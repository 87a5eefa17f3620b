//! The seed-architecture zoo: small trained CNNs that get decomposed into
//! the module bank. Four built-in families (two plain VGG-style, two
//! residual) whose widths intentionally disagree, so junctions between
//! their modules exercise every adapter kind.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, Padding, Relu, ResidualBlock};
use crate::network::{evaluate, fit, FitConfig, Network, Op};
use crate::scalar::Scalar;
use crate::seeds::mix;

pub const HEAD_HIDDEN: (usize, usize) = (128, 128);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellKind {
    /// `convs` conv-bn-relu stacks, then a 2x2/2 max pool.
    Plain { convs: usize },
    /// `blocks` residual blocks; the last one carries stride 2.
    Residual { blocks: usize },
}

#[derive(Debug, Clone)]
pub struct SeedSpec {
    pub name: String,
    pub kind: CellKind,
    /// Output channels per cell, length c.
    pub widths: Vec<usize>,
}

/// The default four-family zoo at depth c. Widths are chosen so that
/// junction pairs across families cover identity, chp, chdp, ext-chp and
/// ext-chdp adapters (e.g. at depth 1: 16->8 pools, 8->16 duplicates,
/// 12->8 needs the gcd rotation, 8->12 the truncated cycle).
pub fn default_seed_specs(c: usize) -> Vec<SeedSpec> {
    let widths = |f: &dyn Fn(usize) -> usize| (0..c).map(f).collect::<Vec<_>>();
    vec![
        SeedSpec {
            name: "plain-a".into(),
            kind: CellKind::Plain { convs: 1 },
            widths: widths(&|d| 8 * (d + 1)),
        },
        SeedSpec {
            name: "plain-b".into(),
            kind: CellKind::Plain { convs: 2 },
            widths: widths(&|d| 12 + 10 * d),
        },
        SeedSpec {
            name: "res-c".into(),
            kind: CellKind::Residual { blocks: 1 },
            widths: widths(&|d| 16 + 8 * d),
        },
        SeedSpec {
            name: "res-d".into(),
            kind: CellKind::Residual { blocks: 1 },
            widths: widths(&|d| 10 << d),
        },
    ]
}

/// Ops for one cell: the conv stack plus the single reduction that halves
/// the spatial extent — a trailing max-pool for the plain family, a
/// stride-2 final block for the residual family.
pub fn build_cell<S: Scalar>(
    kind: &CellKind,
    in_ch: usize,
    out_ch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Op<S>>> {
    let mut ops = Vec::new();
    match kind {
        CellKind::Plain { convs } => {
            if *convs == 0 {
                return Err(Error::Invalid("plain cell needs at least one conv".into()));
            }
            for i in 0..*convs {
                let ci = if i == 0 { in_ch } else { out_ch };
                ops.push(Op::Conv(Conv2d::new(ci, out_ch, 3, 1, Padding::Same, false, rng)?));
                ops.push(Op::Bn(BatchNorm2d::new(out_ch)?));
                ops.push(Op::Relu(Relu::new()));
            }
            ops.push(Op::MaxPool(MaxPool2d::new(2, 2)));
        }
        CellKind::Residual { blocks } => {
            if *blocks == 0 {
                return Err(Error::Invalid("residual cell needs at least one block".into()));
            }
            for i in 0..*blocks {
                let ci = if i == 0 { in_ch } else { out_ch };
                let stride = if i + 1 == *blocks { 2 } else { 1 };
                ops.push(Op::Residual(ResidualBlock::new(ci, out_ch, stride, rng)?));
            }
        }
    }
    Ok(ops)
}

/// The classifier head: flatten then three fully connected layers.
pub fn build_head<S: Scalar>(
    in_ch: usize,
    in_hw: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Op<S>>> {
    let features = in_ch * in_hw * in_hw;
    Ok(vec![
        Op::Flatten(Flatten::new()),
        Op::Linear(Linear::new(features, HEAD_HIDDEN.0, rng)?),
        Op::Relu(Relu::new()),
        Op::Linear(Linear::new(HEAD_HIDDEN.0, HEAD_HIDDEN.1, rng)?),
        Op::Relu(Relu::new()),
        Op::Linear(Linear::new(HEAD_HIDDEN.1, num_classes, rng)?),
    ])
}

/// A built seed network with its cell/head boundaries.
#[derive(Debug, Clone)]
pub struct SeedNetwork<S: Scalar = f32> {
    pub spec: SeedSpec,
    pub net: Network<S>,
    pub cells: Vec<Range<usize>>,
    pub head: Range<usize>,
    pub in_ch: usize,
    pub image_hw: usize,
    pub num_classes: usize,
}

pub fn build_seed<S: Scalar>(
    spec: &SeedSpec,
    in_ch: usize,
    image_hw: usize,
    num_classes: usize,
    init_seed: u64,
) -> Result<SeedNetwork<S>> {
    let c = spec.widths.len();
    if c == 0 {
        return Err(Error::Invalid("seed needs at least one cell".into()));
    }
    if image_hw % (1 << c) != 0 || image_hw >> c == 0 {
        return Err(Error::Invalid(format!(
            "image size {image_hw} cannot be halved {c} times"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut ops = Vec::new();
    let mut cells = Vec::with_capacity(c);
    let mut cur_ch = in_ch;
    for &out_ch in &spec.widths {
        let start = ops.len();
        ops.extend(build_cell(&spec.kind, cur_ch, out_ch, &mut rng)?);
        cells.push(start..ops.len());
        cur_ch = out_ch;
    }
    let head_start = ops.len();
    ops.extend(build_head(cur_ch, image_hw >> c, num_classes, &mut rng)?);
    let head = head_start..ops.len();
    Ok(SeedNetwork {
        spec: spec.clone(),
        net: Network::new(ops),
        cells,
        head,
        in_ch,
        image_hw,
        num_classes,
    })
}

#[derive(Debug, Clone)]
pub struct SeedTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cutout_len: usize,
    pub flip: bool,
}

/// One training epoch of a seed as recorded in its history.
#[derive(Debug, Clone, Copy)]
pub struct SeedEpoch {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct SeedMetrics {
    pub name: String,
    pub val_acc: f64,
    pub val_err: f64,
    pub test_acc: f64,
    pub test_err: f64,
    pub history: Vec<SeedEpoch>,
}

/// Trains one seed end to end, recording (train loss, val accuracy) per
/// epoch, then measures both held-out splits. Zero epochs leaves the
/// network untouched and the history empty.
pub fn train_seed<S: Scalar>(
    seed_net: &mut SeedNetwork<S>,
    data: &Dataset<S>,
    cfg: &SeedTrainConfig,
    run_seed: u64,
    arch_index: usize,
) -> Result<SeedMetrics> {
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let fit_cfg = FitConfig {
            epochs: 1,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            shuffle_seed: mix(run_seed, &[0x5EED, arch_index as u64, epoch as u64]),
            cutout_len: cfg.cutout_len,
            flip: cfg.flip,
        };
        let stats = fit(&mut seed_net.net, &data.train_images, &data.train_labels, &fit_cfg)?;
        let val = evaluate(&mut seed_net.net, &data.val_images, &data.val_labels, cfg.batch_size)?;
        history.push(SeedEpoch {
            train_loss: stats[0].loss,
            train_acc: stats[0].accuracy,
            val_acc: val.accuracy,
        });
    }
    let val = evaluate(&mut seed_net.net, &data.val_images, &data.val_labels, cfg.batch_size)?;
    let test = evaluate(&mut seed_net.net, &data.test_images, &data.test_labels, cfg.batch_size)?;
    Ok(SeedMetrics {
        name: seed_net.spec.name.clone(),
        val_acc: val.accuracy,
        val_err: 1.0 - val.accuracy,
        test_acc: test.accuracy,
        test_err: 1.0 - test.accuracy,
        history,
    })
}
