//! Run configuration: UTF-8 `key = value` lines, `#` starts a comment.
//! Unknown keys are rejected (all of them listed at once); a key given
//! twice takes its last value, which is also how CLI overrides work.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DatasetKind::Synth),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            other => bail!("dataset must be synth, cifar10 or cifar100, got {other:?}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Directory with the CIFAR binary batches; required for cifar10/100.
    pub data_path: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    /// Per-class cap on the CIFAR train split (0 keeps the full split).
    pub cifar_per_class: usize,
    /// Number of seed architectures.
    pub n: usize,
    /// Cells per architecture.
    pub c: usize,
    pub gen: usize,
    pub p_size: usize,
    pub p_mut: f64,
    pub alpha: f64,
    pub beta: f64,
    pub head_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_head: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed_epochs: usize,
    pub seed_lr: f64,
    /// Cutout augmentation for seed training (search-stage evaluation is
    /// always unaugmented).
    pub cutout: bool,
    pub cutout_len: usize,
    pub flip: bool,
    /// Use trainable 1x1-conv junction adapters instead of the
    /// parameter-free family.
    pub baseline_adapters: bool,
    /// Minimum number of genotypes the finetune stage processes (final
    /// population and the n single-source genotypes are always included).
    pub finetune_top: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::Synth,
            data_path: None,
            synth_classes: 4,
            synth_per_class: 64,
            cifar_per_class: 0,
            n: 4,
            c: 3,
            gen: 10,
            p_size: 12,
            p_mut: 0.1,
            alpha: 25.0,
            beta: 25.0,
            head_epochs: 5,
            finetune_epochs: 15,
            lr_head: 0.05,
            lr_finetune: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed_epochs: 10,
            seed_lr: 0.03,
            cutout: false,
            cutout_len: 16,
            flip: false,
            baseline_adapters: false,
            finetune_top: 24,
            seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`, got {raw:?}", path.display(), lineno + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            if let Err(e) = cfg.set(key, value) {
                if e.to_string().starts_with("unknown config key") {
                    unknown.push(key.to_string());
                } else {
                    return Err(e.context(format!("{}:{}", path.display(), lineno + 1)));
                }
            }
        }
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment (file lines and CLI overrides
    /// share this path).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| anyhow::anyhow!("bad value for {key}: {value:?}"))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => bail!("bad value for {key}: {value:?} (use true or false)"),
            }
        }
        match key {
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "data_path" => {
                self.data_path = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "synth_classes" => self.synth_classes = num(key, value)?,
            "synth_per_class" => self.synth_per_class = num(key, value)?,
            "cifar_per_class" => self.cifar_per_class = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "c" => self.c = num(key, value)?,
            "gen" => self.gen = num(key, value)?,
            "p_size" => self.p_size = num(key, value)?,
            "p_mut" => self.p_mut = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "head_epochs" => self.head_epochs = num(key, value)?,
            "finetune_epochs" => self.finetune_epochs = num(key, value)?,
            "lr_head" => self.lr_head = num(key, value)?,
            "lr_finetune" => self.lr_finetune = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed_epochs" => self.seed_epochs = num(key, value)?,
            "seed_lr" => self.seed_lr = num(key, value)?,
            "cutout" => self.cutout = flag(key, value)?,
            "cutout_len" => self.cutout_len = num(key, value)?,
            "flip" => self.flip = flag(key, value)?,
            "baseline_adapters" => self.baseline_adapters = flag(key, value)?,
            "finetune_top" => self.finetune_top = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => bail!("unknown config key: {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset != DatasetKind::Synth && self.data_path.is_none() {
            bail!("dataset {} needs data_path", self.dataset.as_str());
        }
        if self.synth_classes < 2 {
            bail!("synth_classes must be >= 2");
        }
        let counts = [
            ("synth_per_class", self.synth_per_class),
            ("n", self.n),
            ("c", self.c),
            ("gen", self.gen),
            ("p_size", self.p_size),
            ("head_epochs", self.head_epochs),
            ("finetune_epochs", self.finetune_epochs),
            ("batch_size", self.batch_size),
            ("seed_epochs", self.seed_epochs),
            ("finetune_top", self.finetune_top),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!("{name} must be >= 1");
            }
        }
        if !(0.0..=1.0).contains(&self.p_mut) {
            bail!("p_mut must be in [0, 1], got {}", self.p_mut);
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                bail!("{name} must be finite and >= 0, got {v}");
            }
        }
        for (name, v) in
            [("lr_head", self.lr_head), ("seed_lr", self.seed_lr)]
        {
            if !v.is_finite() || v <= 0.0 {
                bail!("{name} must be finite and > 0, got {v}");
            }
        }
        if !self.lr_finetune.is_finite() || self.lr_finetune < 0.0 {
            bail!("lr_finetune must be finite and >= 0, got {}", self.lr_finetune);
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            bail!("momentum must be in [0, 1), got {}", self.momentum);
        }
        Ok(())
    }

    /// Canonical text form: every result-affecting key in declaration
    /// order, one per line. This is what gets hashed into manifests;
    /// out_dir is deliberately absent — it decides where outputs land,
    /// not what they contain.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("dataset", self.dataset.as_str().to_string());
        kv(
            "data_path",
            self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("synth_classes", self.synth_classes.to_string());
        kv("synth_per_class", self.synth_per_class.to_string());
        kv("cifar_per_class", self.cifar_per_class.to_string());
        kv("n", self.n.to_string());
        kv("c", self.c.to_string());
        kv("gen", self.gen.to_string());
        kv("p_size", self.p_size.to_string());
        kv("p_mut", self.p_mut.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("head_epochs", self.head_epochs.to_string());
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("lr_head", self.lr_head.to_string());
        kv("lr_finetune", self.lr_finetune.to_string());
        kv("momentum", self.momentum.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed_epochs", self.seed_epochs.to_string());
        kv("seed_lr", self.seed_lr.to_string());
        kv("cutout", self.cutout.to_string());
        kv("cutout_len", self.cutout_len.to_string());
        kv("flip", self.flip.to_string());
        kv("baseline_adapters", self.baseline_adapters.to_string());
        kv("finetune_top", self.finetune_top.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// FNV-1a over the canonical form, as fixed-width hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1_0000_0000_01b3);
        }
        format!("{h:016x}")
    }
}
