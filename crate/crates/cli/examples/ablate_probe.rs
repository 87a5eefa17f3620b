// Scratch diagnostic for the baseline-adapter rerun; not part of the suite.
use modnas::config::RunConfig;
use modnas_core::evaluator::{EvalConfig, Evaluator};
use modnas_core::genotype::Genotype;
use modnas_core::kb::KnowledgeBase;
use modnas_core::layers::Mode;
use modnas_core::network::{evaluate_slice, fit_slice, FitConfig};
use modnas_core::seeds::mix;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.synth_classes = 4;
    cfg.synth_per_class = 64;
    cfg.n = 4;
    cfg.c = 3;
    cfg.alpha = 0.25;
    cfg.beta = 0.25;
    cfg.head_epochs = 5;
    cfg.seed = 1;
    let data = modnas::pipeline::load_dataset(&cfg).unwrap();
    let kb = KnowledgeBase::<f32>::load(std::path::Path::new("/tmp/ablate_probe/kb")).unwrap();

    let ecfg = EvalConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        head_epochs: cfg.head_epochs,
        finetune_epochs: cfg.finetune_epochs,
        lr_head: cfg.lr_head,
        lr_finetune: cfg.lr_finetune,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        baseline_adapters: true,
        use_cache: true,
    };
    println!("lr_head {} momentum {} batch {}", ecfg.lr_head, ecfg.momentum, ecfg.batch_size);
    let ev = Evaluator::new(&kb, &data, ecfg, cfg.seed).unwrap();

    for text in ["4-2-3", "1-2-2", "1-2-3", "2-2-2"] {
        let g = Genotype::parse(text).unwrap();
        let (mut net, head_start) = ev.assemble(&g).unwrap();
        let cut = net
            .ops
            .iter_mut()
            .position(|op| op.params_mut().iter().any(|p| !p.frozen))
            .unwrap_or(net.len());
        let len = net.len();
        println!("{text}: {len} ops, trainable cut {cut}, head starts {head_start}");

        let feats = net.forward_slice(&data.train_images, Mode::EVAL, 0..cut).unwrap();
        let vfeats = net.forward_slice(&data.val_images, Mode::EVAL, 0..cut).unwrap();
        let fit_cfg = FitConfig::plain(5, 32, 0.05, 0.9, mix(1, &[0x3A71, 0xCAFE]));
        let hist = fit_slice(
            &mut net,
            &feats,
            &data.train_labels,
            &fit_cfg,
            cut..len,
            Mode::FROZEN_BACKPROP,
        )
        .unwrap();
        for (i, e) in hist.iter().enumerate() {
            println!("  epoch {i}: loss {:.4} acc {:.3}", e.loss, e.accuracy);
        }
        let val = evaluate_slice(&mut net, &vfeats, &data.val_labels, 32, cut..len).unwrap();
        println!("  val: loss {:.4} acc {:.3}", val.loss, val.accuracy);
    }
}
