// Scratch calibration driver; not part of the test suite.
use std::time::Instant;

use modnas_core::data::synth_dataset;
use modnas_core::zoo::{build_seed, train_seed, CellKind, SeedSpec, SeedTrainConfig};

fn main() {
    let data = synth_dataset::<f32>(1, 4, 64).unwrap();
    let vgg = SeedSpec {
        name: "reference".into(),
        kind: CellKind::Plain { convs: 2 },
        widths: vec![16, 32, 64],
    };
    for (lr, batch, init) in [
        (0.03, 32, 5),
        (0.05, 32, 5),
        (0.05, 16, 5),
        (0.08, 32, 5),
        (0.05, 32, 11),
        (0.05, 32, 21),
    ] {
        let cfg = SeedTrainConfig {
            epochs: 10,
            batch_size: batch,
            lr,
            momentum: 0.9,
            cutout_len: 0,
            flip: false,
        };
        let t0 = Instant::now();
        let mut net = build_seed::<f32>(&vgg, 3, 32, 4, init).unwrap();
        let m = train_seed(&mut net, &data, &cfg, 1, 0).unwrap();
        let best = m.history.iter().map(|e| e.val_acc).fold(0.0, f64::max);
        println!(
            "lr {lr} batch {batch} init {init}: best {best:.3} per-epoch {:?} ({:.0}s)",
            m.history.iter().map(|e| (e.val_acc * 100.0).round() / 100.0).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
}
