//! Candidate evaluation: assemble a network from frozen modules, train a
//! fresh head on it, score the result, and (for finalists) fine-tune the
//! whole thing end to end.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterKind, ChannelAdapter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::{decode, Genotype};
use crate::kb::KnowledgeBase;
use crate::layers::Mode;
use crate::network::{evaluate_slice, fit_slice, EpochStats, FitConfig, Network, Op};
use crate::nsga2::{EvalOutcome, SearchEvaluator};
use crate::scalar::Scalar;
use crate::score::ScoreReport;
use crate::seeds::{hash_str, mix};
use crate::tensor::Tensor;
use crate::zoo::build_head;

// Stream tags keeping the per-candidate RNG draws independent.
const HEAD_INIT_STREAM: u64 = 0x4EAD;
const HEAD_FIT_STREAM: u64 = 0x3A71;
const FINETUNE_STREAM: u64 = 0xF17E;
const ADAPTER_INIT_STREAM: u64 = 0xADA0;
const ADAPTER_FIT_STREAM: u64 = 0xADF1;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Weight on the convergence-rate reward.
    pub alpha: f64,
    /// Weight on the single-ancestor similarity penalty.
    pub beta: f64,
    /// Head-only training epochs during search-stage evaluation (>= 2 so a
    /// convergence rate exists).
    pub head_epochs: usize,
    /// Whole-network epochs when fine-tuning finalists.
    pub finetune_epochs: usize,
    pub lr_head: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Swap every junction adapter for the trainable 1x1-conv variant.
    pub baseline_adapters: bool,
    /// Memoize score reports by genotype.
    pub use_cache: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 25.0,
            beta: 25.0,
            head_epochs: 5,
            finetune_epochs: 15,
            lr_head: 0.05,
            lr_finetune: 0.01,
            momentum: 0.9,
            batch_size: 32,
            baseline_adapters: false,
            use_cache: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_epochs < 2 {
            return Err(Error::Invalid(format!(
                "head_epochs must be >= 2 to measure a convergence rate, got {}",
                self.head_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr_head", self.lr_head),
            ("lr_finetune", self.lr_finetune),
            ("momentum", self.momentum),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lr_head == 0.0 {
            return Err(Error::Invalid("lr_head must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics before and after whole-network fine-tuning of one candidate.
#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub genotype: Genotype,
    /// Validation error right after head-only training, before any
    /// fine-tuning.
    pub pre_val_err: f64,
    pub val_err: f64,
    pub val_acc: f64,
    pub test_err: f64,
    pub test_acc: f64,
    pub epochs_run: usize,
}

pub struct Evaluator<'a, S: Scalar = f32> {
    kb: &'a KnowledgeBase<S>,
    data: &'a Dataset<S>,
    cfg: EvalConfig,
    run_seed: u64,
}

impl<'a, S: Scalar> Evaluator<'a, S> {
    pub fn new(
        kb: &'a KnowledgeBase<S>,
        data: &'a Dataset<S>,
        cfg: EvalConfig,
        run_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if kb.num_classes != data.num_classes
            || kb.in_ch != data.in_channels()
            || kb.image_hw != data.image_hw()
        {
            return Err(Error::Invalid(format!(
                "module bank built for {} classes / {} channels / {}px, dataset has {} / {} / {}px",
                kb.num_classes,
                kb.in_ch,
                kb.image_hw,
                data.num_classes,
                data.in_channels(),
                data.image_hw()
            )));
        }
        Ok(Self { kb, data, cfg, run_seed })
    }

    pub fn cfg(&self) -> &EvalConfig {
        &self.cfg
    }

    pub fn run_seed(&self) -> u64 {
        self.run_seed
    }

    /// Builds the candidate network: frozen picked modules, junction
    /// adapters where channel counts change, and a freshly initialized
    /// head. Returns the network and the index of its first head op. Head
    /// initialization is deterministic per (run seed, genotype).
    pub fn assemble(&self, g: &Genotype) -> Result<(Network<S>, usize)> {
        let spec = decode(g, self.kb, self.cfg.baseline_adapters)?;
        let mut ops: Vec<Op<S>> = Vec::new();
        // Adapters and head draw from separate streams so the head starts
        // from the same weights whether or not the junctions carry
        // parameters (the baseline rerun must differ from the standard one
        // only in its connections).
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(mix(
            self.run_seed,
            &[ADAPTER_INIT_STREAM, hash_str(&g.text())],
        ));
        let mut head_rng =
            ChaCha8Rng::seed_from_u64(mix(self.run_seed, &[HEAD_INIT_STREAM, hash_str(&g.text())]));
        for (d, &(_, gene)) in spec.picks.iter().enumerate() {
            ops.extend(self.kb.module(d, gene)?.cloned_ops());
            if d < spec.adapters.len() {
                let plan = spec.adapters[d].clone();
                if !matches!(plan.kind, AdapterKind::Identity) {
                    ops.push(Op::Adapter(ChannelAdapter::new(plan, &mut adapter_rng)?));
                }
            }
        }
        let head_start = ops.len();
        ops.extend(build_head(
            spec.head_in_channels,
            spec.head_in_hw,
            self.kb.num_classes,
            &mut head_rng,
        )?);
        Ok((Network::new(ops), head_start))
    }

    /// Index of the first op holding a trainable parameter. Everything
    /// before it is deterministic in inference mode, so its output can be
    /// computed once per image and reused across epochs.
    fn trainable_cut(net: &mut Network<S>) -> usize {
        let len = net.len();
        net.ops
            .iter_mut()
            .position(|op| op.params_mut().iter().any(|p| !p.frozen))
            .unwrap_or(len)
    }

    /// Search-stage evaluation: head-only training on cached trunk
    /// features, then validation accuracy. Non-finite losses yield the
    /// failure report rather than an error.
    pub fn evaluate(&self, g: &Genotype) -> Result<ScoreReport> {
        let (_net, _, history, val) = self.train_head(g)?;
        if history.iter().any(|e| !e.loss.is_finite()) || !val.loss.is_finite() {
            return Ok(ScoreReport::failed(g.clone(), self.cfg.beta));
        }
        let losses: Vec<f64> = history.iter().map(|e| e.loss).collect();
        ScoreReport::new(g.clone(), val.accuracy, losses, self.cfg.alpha, self.cfg.beta)
    }

    /// Assembles and head-trains a candidate; returns the network (trunk
    /// weights untouched, head trained), the trainable cut index, the
    /// training history, and validation stats.
    ///
    /// The head always trains alone first, on features cached below it —
    /// for the standard assembly that is the entire evaluation. Trainable
    /// baseline adapters get a second pass: joint refinement of adapters
    /// plus head at the whole-network rate (the head rate diverges when
    /// backpropagated through the frozen trunk). The two-pass order keeps
    /// the rerun comparable to the standard one: identical head training
    /// first, then the marginal effect of the trainable connections.
    fn train_head(
        &self,
        g: &Genotype,
    ) -> Result<(Network<S>, usize, Vec<EpochStats>, EpochStats)> {
        let (mut net, head_start) = self.assemble(g)?;
        let cut = Self::trainable_cut(&mut net);
        let len = net.len();
        let head_feats =
            forward_features(&mut net, 0..head_start, &self.data.train_images, self.cfg.batch_size)?;
        let fit_cfg = FitConfig::plain(
            self.cfg.head_epochs,
            self.cfg.batch_size,
            self.cfg.lr_head,
            self.cfg.momentum,
            mix(self.run_seed, &[HEAD_FIT_STREAM, hash_str(&g.text())]),
        );
        let mut history = fit_slice(
            &mut net,
            &head_feats,
            &self.data.train_labels,
            &fit_cfg,
            head_start..len,
            Mode::FROZEN_BACKPROP,
        )?;
        if cut < head_start {
            let feats =
                forward_features(&mut net, 0..cut, &self.data.train_images, self.cfg.batch_size)?;
            let refit_cfg = FitConfig::plain(
                self.cfg.head_epochs,
                self.cfg.batch_size,
                self.cfg.lr_finetune,
                self.cfg.momentum,
                mix(self.run_seed, &[ADAPTER_FIT_STREAM, hash_str(&g.text())]),
            );
            history.extend(fit_slice(
                &mut net,
                &feats,
                &self.data.train_labels,
                &refit_cfg,
                cut..len,
                Mode::FROZEN_BACKPROP,
            )?);
        }
        let val_feats =
            forward_features(&mut net, 0..cut, &self.data.val_images, self.cfg.batch_size)?;
        let val = evaluate_slice(
            &mut net,
            &val_feats,
            &self.data.val_labels,
            self.cfg.batch_size,
            cut..len,
        )?;
        Ok((net, cut, history, val))
    }

    /// Whole-network fine-tuning of one candidate, continuing from the
    /// head-trained state `evaluate` measures. A zero fine-tune learning
    /// rate (or zero epochs) skips training and just re-measures.
    pub fn fine_tune(&self, g: &Genotype) -> Result<FinetuneReport> {
        let (mut net, _, _, pre_val) = self.train_head(g)?;
        let skip = self.cfg.lr_finetune == 0.0 || self.cfg.finetune_epochs == 0;
        let epochs_run = if skip { 0 } else { self.cfg.finetune_epochs };
        if !skip {
            net.set_frozen(false);
            let fit_cfg = FitConfig::plain(
                self.cfg.finetune_epochs,
                self.cfg.batch_size,
                self.cfg.lr_finetune,
                self.cfg.momentum,
                mix(self.run_seed, &[FINETUNE_STREAM, hash_str(&g.text())]),
            );
            crate::network::fit(&mut net, &self.data.train_images, &self.data.train_labels, &fit_cfg)?;
        }
        let val = crate::network::evaluate(
            &mut net,
            &self.data.val_images,
            &self.data.val_labels,
            self.cfg.batch_size,
        )?;
        let test = crate::network::evaluate(
            &mut net,
            &self.data.test_images,
            &self.data.test_labels,
            self.cfg.batch_size,
        )?;
        Ok(FinetuneReport {
            genotype: g.clone(),
            pre_val_err: 1.0 - pre_val.accuracy,
            val_err: 1.0 - val.accuracy,
            val_acc: val.accuracy,
            test_err: 1.0 - test.accuracy,
            test_acc: test.accuracy,
            epochs_run,
        })
    }
}

/// Runs `range` of the network in inference mode over `images` in batches
/// and stacks the outputs along axis 0.
fn forward_features<S: Scalar>(
    net: &mut Network<S>,
    range: Range<usize>,
    images: &Tensor<S>,
    batch_size: usize,
) -> Result<Tensor<S>> {
    if range.is_empty() {
        return Ok(images.clone());
    }
    let n = images.size(0);
    let mut parts: Vec<Tensor<S>> = Vec::new();
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let xb = images.select_rows(&idx)?;
        parts.push(net.forward_slice(&xb, Mode::EVAL, range.clone())?);
        at = hi;
    }
    stack_rows(parts)
}

fn stack_rows<S: Scalar>(parts: Vec<Tensor<S>>) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| Error::Invalid("nothing to stack".into()))?;
    let mut dims = first.dims().to_vec();
    let tail: Vec<usize> = dims[1..].to_vec();
    let mut total = 0;
    for p in &parts {
        if p.dims()[1..] != tail[..] {
            return Err(Error::Shape(format!(
                "cannot stack {:?} with {:?}",
                p.dims(),
                tail
            )));
        }
        total += p.size(0);
    }
    dims[0] = total;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(&dims, data)
}

/// Memoizing adapter between `Evaluator` and the search loop. `evaluate`
/// never errors outward: assembly or numeric failures become the
/// worst-finite-score report so selection can still rank them.
pub struct CachedEvaluator<'a, S: Scalar = f32> {
    eval: Evaluator<'a, S>,
    memo: Mutex<BTreeMap<Genotype, EvalOutcome>>,
}

impl<'a, S: Scalar> CachedEvaluator<'a, S> {
    pub fn new(eval: Evaluator<'a, S>) -> Self {
        Self { eval, memo: Mutex::new(BTreeMap::new()) }
    }

    pub fn inner(&self) -> &Evaluator<'a, S> {
        &self.eval
    }

    pub fn memo_len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }
}

impl<S: Scalar> SearchEvaluator for CachedEvaluator<'_, S> {
    fn lookup(&self, g: &Genotype) -> Option<EvalOutcome> {
        if !self.eval.cfg.use_cache {
            return None;
        }
        self.memo.lock().expect("memo lock").get(g).cloned()
    }

    fn evaluate(&self, g: &Genotype) -> EvalOutcome {
        let t0 = Instant::now();
        let report = self
            .eval
            .evaluate(g)
            .unwrap_or_else(|_| ScoreReport::failed(g.clone(), self.eval.cfg.beta));
        let outcome = EvalOutcome {
            objectives: vec![report.score],
            report: Some(report),
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if self.eval.cfg.use_cache {
            self.memo.lock().expect("memo lock").insert(g.clone(), outcome.clone());
        }
        outcome
    }
}
