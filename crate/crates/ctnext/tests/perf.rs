// Scratch timing probe; removed before release.

use ctnext::dataio::{SliceDataset, SliceRecord};
use ctnext::imaging::ImageGray;
use ctnext::model::{build_model, set_phase_trainability, Model, ModelConfig};
use ctnext::train::{run_epoch, OptimizerState, PhaseConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn dataset(n: usize) -> SliceDataset {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let records = (0..n)
        .map(|i| SliceRecord {
            id: format!("x{i}"),
            label: (i % 2) as u8,
            image: ImageGray::new(
                250,
                250,
                (0..250 * 250).map(|_| r.random::<f32>()).collect(),
            ),
        })
        .collect();
    SliceDataset::new(records)
}

#[test]
fn timing_probe() {
    let cfg = ModelConfig::default();
    let data = dataset(64);
    let phase_cfg = PhaseConfig {
        phase: 1,
        epochs: 1,
        learning_rate: 1e-3,
        batch_size: 32,
    };

    let mut model: Model<f32> = build_model(&cfg, 0).unwrap();
    for round in 0..2 {
        for phase in [1u8, 2u8] {
            set_phase_trainability(&mut model, phase);
            let mut opt = OptimizerState::new();
            let t = Instant::now();
            run_epoch(&mut model, &data, &phase_cfg, &mut opt, 1e-6, 0, 0).unwrap();
            println!(
                "round {round} phase{phase} epoch (64 imgs): {:.2}s -> {:.0} ms/img",
                t.elapsed().as_secs_f64(),
                t.elapsed().as_secs_f64() / 64.0 * 1000.0
            );
        }
    }

    // Eval-mode forward only.
    let t = Instant::now();
    ctnext::train::evaluate(&model, &data, 32).unwrap();
    println!(
        "eval (64 imgs): {:.2}s -> {:.0} ms/img",
        t.elapsed().as_secs_f64(),
        t.elapsed().as_secs_f64() / 64.0 * 1000.0
    );
}
