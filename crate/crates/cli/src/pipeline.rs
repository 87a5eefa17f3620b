//! The six workflow commands. Each writes its artifacts under the
//! configured output directory plus a manifest recording the effective
//! config hash and rng seed, so reruns are attributable and identical
//! inputs provably produce identical outputs.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use modnas_core::data::{load_cifar10, load_cifar100, synth_dataset, Dataset};
use modnas_core::evaluator::{CachedEvaluator, EvalConfig, Evaluator, FinetuneReport};
use modnas_core::genotype::Genotype;
use modnas_core::io::{load_tensors, save_tensors};
use modnas_core::kb::KnowledgeBase;
use modnas_core::nsga2::{run_search, SearchConfig};
use modnas_core::score::ScoreReport;
use modnas_core::seeds::mix;
use modnas_core::zoo::{
    build_seed, default_seed_specs, train_seed, CellKind, SeedSpec, SeedTrainConfig,
};

use crate::artifacts::{self, Manifest, SeedBundle};
use crate::config::{DatasetKind, RunConfig};

// Stream tags for rng derivation, disjoint from the ones the core
// training/evaluation paths use.
const DATA_STREAM: u64 = 0xDA7A;
const SEED_INIT_STREAM: u64 = 0xB11D;
const SEARCH_STREAM: u64 = 0x5EAC;

pub struct Ctx {
    pub cfg: RunConfig,
    pub workers: usize,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .context("building worker pool")
    }

    fn manifest(&self, command: &'static str, data: Option<&Dataset<f32>>) -> Result<()> {
        artifacts::write_manifest(
            self.out(),
            &Manifest {
                command,
                config_hash: self.cfg.hash(),
                rng_seed: self.cfg.seed,
                workers: self.workers,
                dataset: self.cfg.dataset.as_str().to_string(),
                normalization: data.map(|d| (d.channel_mean, d.channel_std)),
            },
        )
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset<f32>> {
    let data_seed = mix(cfg.seed, &[DATA_STREAM]);
    let per_class = (cfg.cifar_per_class > 0).then_some(cfg.cifar_per_class);
    match cfg.dataset {
        DatasetKind::Synth => {
            Ok(synth_dataset(data_seed, cfg.synth_classes, cfg.synth_per_class)?)
        }
        DatasetKind::Cifar10 => {
            let path = cfg.data_path.as_ref().expect("validated");
            Ok(load_cifar10(path, data_seed, per_class)?)
        }
        DatasetKind::Cifar100 => {
            let path = cfg.data_path.as_ref().expect("validated");
            Ok(load_cifar100(path, data_seed, per_class)?)
        }
    }
}

/// The first four specs are the fixed families; past those, alternating
/// plain/residual variants with growing widths, so any n is serviceable.
pub fn seed_specs(n: usize, c: usize) -> Vec<SeedSpec> {
    let mut specs = default_seed_specs(c);
    specs.truncate(n);
    for j in specs.len()..n {
        let extra = j - 4;
        let kind = if extra % 2 == 0 {
            CellKind::Plain { convs: 1 + (extra / 2) % 3 }
        } else {
            CellKind::Residual { blocks: 1 + (extra / 2) % 2 }
        };
        specs.push(SeedSpec {
            name: format!("auto-{j}"),
            kind,
            widths: (0..c).map(|d| (8 + 2 * extra) * (d + 1)).collect(),
        });
    }
    specs
}

fn eval_config(cfg: &RunConfig, baseline_adapters: bool) -> EvalConfig {
    EvalConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        head_epochs: cfg.head_epochs,
        finetune_epochs: cfg.finetune_epochs,
        lr_head: cfg.lr_head,
        lr_finetune: cfg.lr_finetune,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        baseline_adapters,
        use_cache: true,
    }
}

fn load_kb(ctx: &Ctx) -> Result<KnowledgeBase<f32>> {
    let dir = ctx.out().join(artifacts::KB_DIR);
    artifacts::require(&dir.join(modnas_core::kb::KB_MANIFEST), "build-kb")?;
    let kb = KnowledgeBase::load(&dir)?;
    if kb.n != ctx.cfg.n || kb.c != ctx.cfg.c {
        bail!(
            "config says n={} c={}, knowledge base holds n={} c={}",
            ctx.cfg.n,
            ctx.cfg.c,
            kb.n,
            kb.c
        );
    }
    Ok(kb)
}

fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn cmd_train_seeds(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = load_dataset(cfg)?;
    std::fs::create_dir_all(ctx.out().join(artifacts::SEEDS_DIR))?;
    let specs = seed_specs(cfg.n, cfg.c);
    let train_cfg = SeedTrainConfig {
        epochs: cfg.seed_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.seed_lr,
        momentum: cfg.momentum,
        cutout_len: if cfg.cutout { cfg.cutout_len } else { 0 },
        flip: cfg.flip,
    };
    let mut metric_rows = Vec::with_capacity(specs.len());
    let mut epoch_rows = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let mut seed_net = build_seed::<f32>(
            spec,
            data.in_channels(),
            data.image_hw(),
            data.num_classes,
            mix(cfg.seed, &[SEED_INIT_STREAM, i as u64]),
        )?;
        let m = train_seed(&mut seed_net, &data, &train_cfg, cfg.seed, i)?;
        save_tensors(
            &artifacts::seed_weights_file(ctx.out(), i, &spec.name),
            &seed_net.net.state_dict(),
        )?;
        println!(
            "seed {i} {}: val_acc {:.4} test_acc {:.4} ({} epochs)",
            spec.name,
            m.val_acc,
            m.test_acc,
            cfg.seed_epochs
        );
        metric_rows.push(vec![
            i.to_string(),
            spec.name.clone(),
            fmt(m.val_acc),
            fmt(m.val_err),
            fmt(m.test_acc),
            fmt(m.test_err),
        ]);
        for (e, h) in m.history.iter().enumerate() {
            epoch_rows.push(vec![
                i.to_string(),
                spec.name.clone(),
                (e + 1).to_string(),
                fmt(h.train_loss),
                fmt(h.train_acc),
                fmt(h.val_acc),
            ]);
        }
    }
    artifacts::write_seed_bundle(
        ctx.out(),
        &SeedBundle {
            in_ch: data.in_channels(),
            image_hw: data.image_hw(),
            num_classes: data.num_classes,
            c: cfg.c,
            specs,
        },
    )?;
    artifacts::write_csv(
        &ctx.out().join(artifacts::SEED_METRICS_CSV),
        &["seed", "name", "val_acc", "val_err", "test_acc", "test_err"],
        &metric_rows,
    )?;
    artifacts::write_csv(
        &ctx.out().join(artifacts::SEED_EPOCHS_CSV),
        &["seed", "name", "epoch", "train_loss", "train_acc", "val_acc"],
        &epoch_rows,
    )?;
    ctx.manifest("train-seeds", Some(&data))
}

/// Rebuilds each saved seed and loads its weights back, erroring on any
/// structural mismatch.
fn load_trained_seeds(
    out: &Path,
    bundle: &SeedBundle,
) -> Result<Vec<modnas_core::zoo::SeedNetwork<f32>>> {
    let mut seeds = Vec::with_capacity(bundle.specs.len());
    for (i, spec) in bundle.specs.iter().enumerate() {
        let mut sn =
            build_seed::<f32>(spec, bundle.in_ch, bundle.image_hw, bundle.num_classes, 0)?;
        let file = artifacts::seed_weights_file(out, i, &spec.name);
        artifacts::require(&file, "train-seeds")?;
        sn.net
            .load_state_dict(load_tensors(&file)?)
            .with_context(|| format!("loading {}", file.display()))?;
        seeds.push(sn);
    }
    Ok(seeds)
}

pub fn cmd_build_kb(ctx: &Ctx) -> Result<()> {
    let out = ctx.out();
    artifacts::require(&out.join(artifacts::SEEDS_MANIFEST), "train-seeds")?;
    let bundle = artifacts::read_seed_bundle(out)?;
    if bundle.specs.len() != ctx.cfg.n || bundle.c != ctx.cfg.c {
        bail!(
            "config says n={} c={}, trained seeds hold n={} c={}",
            ctx.cfg.n,
            ctx.cfg.c,
            bundle.specs.len(),
            bundle.c
        );
    }
    let seeds = load_trained_seeds(out, &bundle)?;
    let kb = KnowledgeBase::decompose(&seeds)?;
    let dir = out.join(artifacts::KB_DIR);
    std::fs::create_dir_all(&dir)?;
    kb.save(&dir)?;
    println!(
        "knowledge base: {} cells x {} seeds, weight fingerprint {:016x}",
        kb.c,
        kb.n,
        kb.weight_fingerprint()
    );
    ctx.manifest("build-kb", None)
}

pub fn cmd_search(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let kb = load_kb(ctx)?;
    let data = load_dataset(cfg)?;
    let evaluator =
        CachedEvaluator::new(Evaluator::new(&kb, &data, eval_config(cfg, cfg.baseline_adapters), cfg.seed)?);
    let scfg = SearchConfig {
        n: cfg.n,
        c: cfg.c,
        generations: cfg.gen,
        p_size: cfg.p_size,
        p_mut: cfg.p_mut,
        seed: mix(cfg.seed, &[SEARCH_STREAM]),
        use_cache: true,
    };
    let result = ctx.pool()?.install(|| run_search(&scfg, &evaluator))?;

    let gen_rows: Vec<Vec<String>> = result
        .stats
        .iter()
        .map(|s| {
            vec![
                s.generation.to_string(),
                fmt(s.best_score),
                fmt(s.mean_score),
                s.new_survival.to_string(),
                s.evaluations_performed.to_string(),
                s.cache_hits.to_string(),
            ]
        })
        .collect();
    artifacts::write_csv(
        &ctx.out().join(artifacts::GENERATIONS_CSV),
        &["generation", "best_score", "mean_score", "new_survival", "evaluations_performed", "cache_hits"],
        &gen_rows,
    )?;

    let eval_rows: Vec<Vec<String>> = result
        .evaluations
        .iter()
        .map(|r| {
            vec![
                r.generation.to_string(),
                r.report.genotype.text(),
                fmt(r.report.err_val),
                fmt(r.report.l_rate),
                fmt(r.report.sim),
                fmt(r.report.score),
                fmt(r.wall_time_s),
            ]
        })
        .collect();
    artifacts::write_csv(
        &ctx.out().join(artifacts::EVALUATIONS_CSV),
        &["generation", "genotype", "err_val", "l_rate", "sim", "score", "wall_time_s"],
        &eval_rows,
    )?;

    let pop: Vec<String> = result.population.iter().map(|i| i.genotype.text()).collect();
    artifacts::write_population(ctx.out(), &pop)?;

    let last = result.stats.last().expect("gen >= 1");
    println!(
        "search: {} generations, {} evaluations performed, best score {:.4}",
        last.generation,
        result.evaluations.len(),
        last.best_score
    );
    ctx.manifest("search", Some(&data))
}

/// Rows of the evaluations CSV as (genotype text, score), deduplicated,
/// keeping first occurrences.
fn evaluated_scores(out: &Path) -> Result<Vec<(String, f64)>> {
    let path = out.join(artifacts::EVALUATIONS_CSV);
    artifacts::require(&path, "search")?;
    let rows = artifacts::read_csv(
        &path,
        &["generation", "genotype", "err_val", "l_rate", "sim", "score", "wall_time_s"],
    )?;
    let mut seen = BTreeSet::new();
    let mut out_rows = Vec::new();
    for row in &rows {
        if seen.insert(row[1].clone()) {
            out_rows.push((row[1].clone(), artifacts::parse_f64(&row[5], "score")?));
        }
    }
    Ok(out_rows)
}

fn by_score_then_text(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    a.1.partial_cmp(&b.1).expect("finite scores").then_with(|| a.0.cmp(&b.0))
}

pub fn cmd_finetune(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let kb = load_kb(ctx)?;
    let data = load_dataset(cfg)?;
    let evaluator = Evaluator::new(&kb, &data, eval_config(cfg, cfg.baseline_adapters), cfg.seed)?;

    artifacts::require(&ctx.out().join(artifacts::POPULATION_TXT), "search")?;
    let population = artifacts::read_population(ctx.out())?;
    let mut ranked = evaluated_scores(ctx.out())?;
    ranked.sort_by(by_score_then_text);

    // Final population, then every single-source genotype, then the best
    // of the remaining evaluated genotypes up to finetune_top.
    let mut picked = Vec::new();
    let mut seen = BTreeSet::new();
    for text in &population {
        if seen.insert(text.clone()) {
            picked.push(text.clone());
        }
    }
    for i in 1..=cfg.n {
        let text = Genotype::new(vec![i; cfg.c]).text();
        if seen.insert(text.clone()) {
            picked.push(text);
        }
    }
    for (text, _) in &ranked {
        if picked.len() >= cfg.finetune_top {
            break;
        }
        if seen.insert(text.clone()) {
            picked.push(text.clone());
        }
    }

    let genotypes: Vec<Genotype> = picked
        .iter()
        .map(|t| {
            let g = Genotype::parse(t)?;
            g.validate(cfg.n, cfg.c)?;
            Ok(g)
        })
        .collect::<modnas_core::Result<_>>()?;

    let results: Vec<(ScoreReport, Option<FinetuneReport>)> = ctx.pool()?.install(|| {
        use rayon::prelude::*;
        genotypes
            .par_iter()
            .map(|g| {
                let report = evaluator.evaluate(g)?;
                let ft = if report.valid { Some(evaluator.fine_tune(g)?) } else { None };
                Ok((report, ft))
            })
            .collect::<Result<_>>()
    })?;

    let mut rows: Vec<Vec<String>> = Vec::with_capacity(results.len());
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&results[a].0, &results[b].0);
        ra.score
            .partial_cmp(&rb.score)
            .expect("finite scores")
            .then_with(|| ra.genotype.text().cmp(&rb.genotype.text()))
    });
    for (rank, &i) in order.iter().enumerate() {
        let (report, ft) = &results[i];
        let (pre, val_err, val_acc, test_err, test_acc, epochs) = match ft {
            Some(f) => {
                (f.pre_val_err, f.val_err, f.val_acc, f.test_err, f.test_acc, f.epochs_run)
            }
            None => (1.0, 1.0, 0.0, 1.0, 0.0, 0),
        };
        rows.push(vec![
            (rank + 1).to_string(),
            report.genotype.text(),
            fmt(report.score),
            fmt(report.err_val),
            fmt(report.l_rate),
            fmt(report.sim),
            fmt(pre),
            fmt(val_err),
            fmt(val_acc),
            fmt(test_err),
            fmt(test_acc),
            epochs.to_string(),
        ]);
    }
    artifacts::write_csv(
        &ctx.out().join(artifacts::FINETUNE_CSV),
        &[
            "rank", "genotype", "score", "err_val", "l_rate", "sim", "pre_val_err", "val_err",
            "val_acc", "test_err", "test_acc", "epochs_run",
        ],
        &rows,
    )?;

    let best = &rows[0];
    println!(
        "finetune: {} genotypes; best by score: {} (score {}, val_err {}, test_err {})",
        rows.len(),
        best[1],
        best[2],
        best[7],
        best[9]
    );
    ctx.manifest("finetune", Some(&data))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite").then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

const FINETUNE_HEADER: [&str; 12] = [
    "rank", "genotype", "score", "err_val", "l_rate", "sim", "pre_val_err", "val_err", "val_acc",
    "test_err", "test_acc", "epochs_run",
];

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let out = ctx.out();
    let path = out.join(artifacts::FINETUNE_CSV);
    artifacts::require(&path, "finetune")?;
    let rows = artifacts::read_csv(&path, &FINETUNE_HEADER)?;

    // (genotype, score, test_error), worst score first
    let mut table: Vec<(String, String, String, f64)> = rows
        .iter()
        .map(|r| {
            Ok((r[1].clone(), r[2].clone(), r[9].clone(), artifacts::parse_f64(&r[2], "score")?))
        })
        .collect::<Result<_>>()?;
    table.sort_by(|a, b| {
        b.3.partial_cmp(&a.3).expect("finite scores").then_with(|| a.0.cmp(&b.0))
    });
    let report_rows: Vec<Vec<String>> =
        table.iter().map(|(g, s, t, _)| vec![g.clone(), s.clone(), t.clone()]).collect();
    artifacts::write_csv(
        &out.join(artifacts::REPORT_CSV),
        &["genotype", "score", "test_error"],
        &report_rows,
    )?;

    let scores: Vec<f64> = rows
        .iter()
        .map(|r| artifacts::parse_f64(&r[2], "score"))
        .collect::<Result<_>>()?;
    let test_errs: Vec<f64> = rows
        .iter()
        .map(|r| artifacts::parse_f64(&r[9], "test_err"))
        .collect::<Result<_>>()?;
    let rho = spearman(&scores, &test_errs);
    std::fs::write(
        out.join(artifacts::CORRELATION_TXT),
        format!("spearman {rho}\ncount {}\n", scores.len()),
    )?;

    println!("report: {} genotypes, spearman(score, test_error) = {rho:.4}", scores.len());
    if let Ok(seed_rows) = artifacts::read_csv(
        &out.join(artifacts::SEED_METRICS_CSV),
        &["seed", "name", "val_acc", "val_err", "test_acc", "test_err"],
    ) {
        let best_seed = seed_rows
            .iter()
            .map(|r| artifacts::parse_f64(&r[3], "val_err"))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let best_ft = rows
            .iter()
            .map(|r| artifacts::parse_f64(&r[7], "val_err"))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        println!("best seed val_err {best_seed}, best fine-tuned val_err {best_ft}");
    }
    ctx.manifest("report", None)
}

pub fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let kb = load_kb(ctx)?;
    let data = load_dataset(cfg)?;
    let baseline = Evaluator::new(&kb, &data, eval_config(cfg, true), cfg.seed)?;

    let mut standard = evaluated_scores(ctx.out())?;
    standard.sort_by(by_score_then_text);
    let genotypes: Vec<Genotype> = standard
        .iter()
        .map(|(t, _)| {
            let g = Genotype::parse(t)?;
            g.validate(cfg.n, cfg.c)?;
            Ok(g)
        })
        .collect::<modnas_core::Result<_>>()?;

    let reports: Vec<ScoreReport> = ctx.pool()?.install(|| {
        use rayon::prelude::*;
        genotypes.par_iter().map(|g| baseline.evaluate(g)).collect::<modnas_core::Result<_>>()
    })?;

    let rows: Vec<Vec<String>> = standard
        .iter()
        .zip(&reports)
        .map(|((text, score_std), rep)| {
            vec![text.clone(), fmt(*score_std), fmt(rep.score), fmt(rep.err_val)]
        })
        .collect();
    artifacts::write_csv(
        &ctx.out().join(artifacts::ABLATION_CSV),
        &["genotype", "score_standard", "score_baseline", "err_baseline"],
        &rows,
    )?;

    fn sgn(x: f64) -> i8 {
        if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        }
    }
    let mut agree = 0usize;
    let mut pairs = 0usize;
    for (reps, stds) in reports.windows(2).zip(standard.windows(2)) {
        pairs += 1;
        if sgn(stds[1].1 - stds[0].1) == sgn(reps[1].score - reps[0].score) {
            agree += 1;
        }
    }
    let frac = if pairs == 0 { 1.0 } else { agree as f64 / pairs as f64 };
    println!(
        "ablation: {} genotypes re-scored with trainable 1x1 adapters; adjacent-pair order agreement {:.3}",
        reports.len(),
        frac
    );
    ctx.manifest("ablate-adapters", Some(&data))
}
