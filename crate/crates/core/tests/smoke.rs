//! Default-configuration smoke run: 50 steps on synthetic data, mean over
//! three seeds, loss at step 50 below loss at step 1.

use concl_core::image::{synth_dataset, SynthConfig};
use concl_core::trainer::{epoch_batches, train_step, TrainConfig, TrainState};

const STEPS: usize = 50;
const SEEDS: [u64; 3] = [0, 1, 2];

fn losses(seed: u64, data: &[concl_core::image::LabeledPatch]) -> Vec<f64> {
    let mut s = TrainState::new(TrainConfig { seed, ..TrainConfig::default() }).unwrap();
    let mut out = Vec::with_capacity(STEPS);
    let mut epoch = 0;
    while out.len() < STEPS {
        s.epoch = epoch;
        for b in epoch_batches(&s.config, epoch, data.len()).unwrap() {
            let items: Vec<_> = b.iter().map(|&i| (i, &data[i])).collect();
            out.push(train_step(&mut s, &items).unwrap().total);
            if out.len() == STEPS {
                break;
            }
        }
        epoch += 1;
    }
    out
}

#[test]
fn default_run_loss_decreases_over_fifty_steps() {
    let data = synth_dataset(&SynthConfig::default()).unwrap();
    let (mut first, mut last) = (0.0, 0.0);
    for seed in SEEDS {
        let l = losses(seed, &data);
        eprintln!("seed {seed}: step 1 {:.4} step {STEPS} {:.4}", l[0], l[STEPS - 1]);
        first += l[0] / SEEDS.len() as f64;
        last += l[STEPS - 1] / SEEDS.len() as f64;
    }
    assert!(last < first, "mean loss step 1 {first:.4}, step {STEPS} {last:.4}");
}
