//! Datasets: the deterministic synthetic benchmark, CIFAR-10/100 binary
//! loaders, and train-time augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::Tensor;

/// Materialized train/val/test splits, already normalized per channel to
/// the train split's statistics.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar = f32> {
    pub train_images: Tensor<S>,
    pub train_labels: Vec<usize>,
    pub val_images: Tensor<S>,
    pub val_labels: Vec<usize>,
    pub test_images: Tensor<S>,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
    /// Raw-value per-channel statistics of the train split, the affine map
    /// every split was normalized with.
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl<S: Scalar> Dataset<S> {
    pub fn image_hw(&self) -> usize {
        self.train_images.size(2)
    }

    pub fn in_channels(&self) -> usize {
        self.train_images.size(1)
    }
}

// Synthetic generator constants. Classes are oriented gratings with a
// class-dependent DC offset; uniform noise keeps the task non-trivial.
pub const SYNTH_HW: usize = 32;
/// Half-width of the uniform pixel noise; sigma = half-width / sqrt(3).
pub const SYNTH_NOISE_HALF_WIDTH: f64 = 2.2;
pub const SYNTH_NOISE_SIGMA: f64 = SYNTH_NOISE_HALF_WIDTH * 0.577_350_269_189_625_8;
const SYNTH_AMPLITUDE: f64 = 0.65;
const SYNTH_CHANNEL_AMP: [f64; 3] = [0.9, 0.7, 0.5];
/// Spacing of per-class DC offsets; must stay above 5 * sigma of the
/// image-mean noise (sigma_noise / sqrt(pixel count), ~0.0902 * sigma_noise
/// at 32x32x3) so class-conditional means separate cleanly.
const SYNTH_DC_STEP: f64 = 0.14;
const SYNTH_THETA_JITTER: f64 = 0.15;

fn synth_theta(class: usize, num_classes: usize) -> f64 {
    std::f64::consts::PI * (class as f64 + 0.35) / num_classes as f64
}

fn synth_freq(class: usize) -> f64 {
    2.0 + (class % 3) as f64
}

fn synth_dc(class: usize, channel: usize, num_classes: usize) -> f64 {
    let base = SYNTH_DC_STEP * (class as f64 - (num_classes as f64 - 1.0) / 2.0);
    // per-channel ripple that sums to zero across the three channels, so
    // the image mean stays at `base`
    base + 0.05 * (std::f64::consts::TAU * (channel as f64 + class as f64) / 3.0).sin()
}

/// Deterministic class-patterned dataset: same seed, same bits. Split
/// sizes per class: `samples_per_class` train, 1/4 of that for val, 1/2
/// for test (each at least one sample).
pub fn synth_dataset<S: Scalar>(
    seed: u64,
    num_classes: usize,
    samples_per_class: usize,
) -> Result<Dataset<S>> {
    if num_classes < 2 {
        return Err(Error::Invalid(format!("synthetic dataset needs >= 2 classes, got {num_classes}")));
    }
    if samples_per_class == 0 {
        return Err(Error::Invalid("samples_per_class must be >= 1".into()));
    }
    let val_per_class = (samples_per_class / 4).max(1);
    let test_per_class = (samples_per_class / 2).max(1);

    let mut splits: Vec<(Vec<f64>, Vec<usize>)> = Vec::with_capacity(3);
    for (split_id, per_class) in
        [(0u64, samples_per_class), (1, val_per_class), (2, test_per_class)]
    {
        let mut pixels = Vec::with_capacity(num_classes * per_class * 3 * SYNTH_HW * SYNTH_HW);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for class in 0..num_classes {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[split_id, class as u64]));
            for _ in 0..per_class {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let theta = synth_theta(class, num_classes)
                    + rng.gen_range(-SYNTH_THETA_JITTER..SYNTH_THETA_JITTER);
                let (sin_t, cos_t) = theta.sin_cos();
                let freq = synth_freq(class);
                for ch in 0..3 {
                    let dc = synth_dc(class, ch, num_classes);
                    let amp = SYNTH_CHANNEL_AMP[ch] * SYNTH_AMPLITUDE;
                    for y in 0..SYNTH_HW {
                        for x in 0..SYNTH_HW {
                            let proj = x as f64 * cos_t + y as f64 * sin_t;
                            let wave =
                                (std::f64::consts::TAU * freq * proj / SYNTH_HW as f64 + phase)
                                    .sin();
                            let noise = rng
                                .gen_range(-SYNTH_NOISE_HALF_WIDTH..SYNTH_NOISE_HALF_WIDTH);
                            pixels.push(dc + amp * wave + noise);
                        }
                    }
                }
                labels.push(class);
            }
        }
        // interleave classes deterministically
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, &[split_id, u64::MAX])));
        let plane = 3 * SYNTH_HW * SYNTH_HW;
        let mut shuffled = Vec::with_capacity(pixels.len());
        let mut shuffled_labels = Vec::with_capacity(n);
        for &i in &order {
            shuffled.extend_from_slice(&pixels[i * plane..(i + 1) * plane]);
            shuffled_labels.push(labels[i]);
        }
        splits.push((shuffled, shuffled_labels));
    }

    let (test_raw, test_labels) = splits.pop().expect("three splits built");
    let (val_raw, val_labels) = splits.pop().expect("three splits built");
    let (train_raw, train_labels) = splits.pop().expect("three splits built");
    build_dataset(
        train_raw,
        train_labels,
        val_raw,
        val_labels,
        test_raw,
        test_labels,
        num_classes,
        SYNTH_HW,
    )
}

/// Normalizes raw per-pixel values with train-split per-channel statistics
/// and materializes the three split tensors.
#[allow(clippy::too_many_arguments)]
fn build_dataset<S: Scalar>(
    train_raw: Vec<f64>,
    train_labels: Vec<usize>,
    val_raw: Vec<f64>,
    val_labels: Vec<usize>,
    test_raw: Vec<f64>,
    test_labels: Vec<usize>,
    num_classes: usize,
    hw: usize,
) -> Result<Dataset<S>> {
    let plane = hw * hw;
    let sample = 3 * plane;
    let n_train = train_raw.len() / sample;
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    for ch in 0..3 {
        let mut sum = 0.0;
        for s in 0..n_train {
            let base = s * sample + ch * plane;
            sum += train_raw[base..base + plane].iter().sum::<f64>();
        }
        mean[ch] = sum / (n_train * plane) as f64;
        let mut sq = 0.0;
        for s in 0..n_train {
            let base = s * sample + ch * plane;
            sq += train_raw[base..base + plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
        var[ch] = sq / (n_train * plane) as f64;
    }
    let std = [var[0].sqrt().max(1e-12), var[1].sqrt().max(1e-12), var[2].sqrt().max(1e-12)];

    let normalize = |raw: Vec<f64>, labels: &[usize]| -> Result<Tensor<S>> {
        let n = raw.len() / sample;
        if n != labels.len() {
            return Err(Error::Invalid(format!("{n} images but {} labels", labels.len())));
        }
        let mut data = Vec::with_capacity(raw.len());
        for s in 0..n {
            for ch in 0..3 {
                let base = s * sample + ch * plane;
                for &v in &raw[base..base + plane] {
                    data.push(S::from_f64_lossy((v - mean[ch]) / std[ch]));
                }
            }
        }
        Tensor::new(&[n, 3, hw, hw], data)
    };

    Ok(Dataset {
        train_images: normalize(train_raw, &train_labels)?,
        train_labels,
        val_images: normalize(val_raw, &val_labels)?,
        val_labels,
        test_images: normalize(test_raw, &test_labels)?,
        test_labels,
        num_classes,
        channel_mean: mean,
        channel_std: std,
    })
}

/// Zeroes a length x length square at a uniform random center per sample,
/// clipped at the image borders. Length 0 is the identity.
pub fn cutout<S: Scalar>(images: &mut Tensor<S>, length: usize, rng: &mut impl Rng) {
    if length == 0 {
        return;
    }
    let (n, c, h, w) = (images.size(0), images.size(1), images.size(2), images.size(3));
    let d = images.data_mut();
    for s in 0..n {
        let cy = rng.gen_range(0..h) as isize;
        let cx = rng.gen_range(0..w) as isize;
        let half = (length / 2) as isize;
        let y0 = (cy - half).max(0) as usize;
        let y1 = ((cy - half + length as isize).max(0) as usize).min(h);
        let x0 = (cx - half).max(0) as usize;
        let x1 = ((cx - half + length as isize).max(0) as usize).min(w);
        for ch in 0..c {
            for y in y0..y1 {
                let row = ((s * c + ch) * h + y) * w;
                for v in &mut d[row + x0..row + x1] {
                    *v = S::zero();
                }
            }
        }
    }
}

/// Mirrors each sample left-right with probability 1/2.
pub fn flip_horizontal<S: Scalar>(images: &mut Tensor<S>, rng: &mut impl Rng) {
    let (n, c, h, w) = (images.size(0), images.size(1), images.size(2), images.size(3));
    let d = images.data_mut();
    for s in 0..n {
        if !rng.gen::<bool>() {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let row = ((s * c + ch) * h + y) * w;
                d[row..row + w].reverse();
            }
        }
    }
}

const CIFAR_PIXELS: usize = 3072;
const CIFAR100_RECORD: usize = 3074;
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR100_TRAIN_FILE: &str = "train.bin";
pub const CIFAR100_TEST_FILE: &str = "test.bin";

/// Parses fixed-size CIFAR binary records: `label_bytes` label bytes (the
/// last one is the label used) then 3072 pixel bytes (1024 R, 1024 G,
/// 1024 B, row-major 32x32). Errors carry the byte offset of the problem.
pub fn parse_cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    num_classes: usize,
) -> Result<(Vec<usize>, Vec<u8>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        let tail_start = bytes.len() - bytes.len() % record;
        return Err(Error::Format(format!(
            "file length {} is not a multiple of the {record}-byte record: truncated record at byte offset {tail_start}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for i in 0..n {
        let base = i * record;
        let label = bytes[base + label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(Error::Format(format!(
                "label {label} out of range at byte offset {}",
                base + label_bytes - 1
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&bytes[base + label_bytes..base + record]);
    }
    Ok((labels, pixels))
}

/// Loads the CIFAR-10 binary batches from `dir`: 50000 train records split
/// 40000/10000 into train/val by a seeded shuffle, plus the 10000-record
/// test batch. `per_class` caps every class in every split for desk-scale
/// runs (train/val keep their 4:1 ratio).
pub fn load_cifar10(dir: &Path, split_seed: u64, per_class: Option<usize>) -> Result<Dataset<f32>> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in CIFAR10_TRAIN_FILES {
        let bytes = fs::read(dir.join(name))
            .map_err(|e| Error::Format(format!("reading {name}: {e}")))?;
        let (l, p) = parse_cifar_records(&bytes, 1, 10)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        labels.extend(l);
        pixels.extend(p);
    }
    if labels.len() != 50000 {
        return Err(Error::Format(format!("expected 50000 train records, found {}", labels.len())));
    }
    let test_bytes = fs::read(dir.join(CIFAR10_TEST_FILE))
        .map_err(|e| Error::Format(format!("reading {CIFAR10_TEST_FILE}: {e}")))?;
    let (test_labels, test_pixels) = parse_cifar_records(&test_bytes, 1, 10)
        .map_err(|e| Error::Format(format!("{CIFAR10_TEST_FILE}: {e}")))?;
    if test_labels.len() != 10000 {
        return Err(Error::Format(format!(
            "expected 10000 test records, found {}",
            test_labels.len()
        )));
    }
    assemble_cifar(labels, pixels, test_labels, test_pixels, 10, split_seed, per_class, 10000)
}

/// CIFAR-100 twin of `load_cifar10`: 2 label bytes (coarse then fine; fine
/// is used), single train/test files.
pub fn load_cifar100(dir: &Path, split_seed: u64, per_class: Option<usize>) -> Result<Dataset<f32>> {
    let bytes = fs::read(dir.join(CIFAR100_TRAIN_FILE))
        .map_err(|e| Error::Format(format!("reading {CIFAR100_TRAIN_FILE}: {e}")))?;
    if bytes.len() % CIFAR100_RECORD != 0 {
        return Err(Error::Format(format!(
            "{CIFAR100_TRAIN_FILE}: length {} not a multiple of {CIFAR100_RECORD}",
            bytes.len()
        )));
    }
    let (labels, pixels) = parse_cifar_records(&bytes, 2, 100)
        .map_err(|e| Error::Format(format!("{CIFAR100_TRAIN_FILE}: {e}")))?;
    let test_bytes = fs::read(dir.join(CIFAR100_TEST_FILE))
        .map_err(|e| Error::Format(format!("reading {CIFAR100_TEST_FILE}: {e}")))?;
    let (test_labels, test_pixels) = parse_cifar_records(&test_bytes, 2, 100)
        .map_err(|e| Error::Format(format!("{CIFAR100_TEST_FILE}: {e}")))?;
    let val_total = labels.len() / 5;
    assemble_cifar(labels, pixels, test_labels, test_pixels, 100, split_seed, per_class, val_total)
}

#[allow(clippy::too_many_arguments)]
fn assemble_cifar(
    labels: Vec<usize>,
    pixels: Vec<u8>,
    test_labels: Vec<usize>,
    test_pixels: Vec<u8>,
    num_classes: usize,
    split_seed: u64,
    per_class: Option<usize>,
    val_total: usize,
) -> Result<Dataset<f32>> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));

    let to_raw = |idx: &[usize], labels: &[usize], pixels: &[u8]| -> (Vec<f64>, Vec<usize>) {
        let mut raw = Vec::with_capacity(idx.len() * CIFAR_PIXELS);
        let mut lab = Vec::with_capacity(idx.len());
        for &i in idx {
            let base = i * CIFAR_PIXELS;
            raw.extend(pixels[base..base + CIFAR_PIXELS].iter().map(|&b| b as f64));
            lab.push(labels[i]);
        }
        (raw, lab)
    };

    let cap = |indices: Vec<usize>, labels: &[usize], limit: usize| -> Vec<usize> {
        let mut taken = vec![0usize; num_classes];
        indices
            .into_iter()
            .filter(|&i| {
                let c = labels[i];
                if taken[c] < limit {
                    taken[c] += 1;
                    true
                } else {
                    false
                }
            })
            .collect()
    };

    let mut train_idx: Vec<usize> = order[..n - val_total].to_vec();
    let mut val_idx: Vec<usize> = order[n - val_total..].to_vec();
    let mut test_idx: Vec<usize> = (0..test_labels.len()).collect();
    if let Some(q) = per_class {
        train_idx = cap(train_idx, &labels, q.max(1));
        val_idx = cap(val_idx, &labels, (q / 4).max(1));
        test_idx = cap(test_idx, &test_labels, (q / 2).max(1));
    }

    let (train_raw, train_lab) = to_raw(&train_idx, &labels, &pixels);
    let (val_raw, val_lab) = to_raw(&val_idx, &labels, &pixels);
    let (test_raw, test_lab) = to_raw(&test_idx, &test_labels, &test_pixels);
    build_dataset(train_raw, train_lab, val_raw, val_lab, test_raw, test_lab, num_classes, 32)
}
