//! Teacher hyperparameter probe: accuracy per epoch across lr/batch
//! variants.
//!
//!   cargo run --release -p maskdistill-core --example teacher_probe -- [n]

use std::time::Instant;

use maskdistill_core::analysis::answer_accuracy;
use maskdistill_core::corpus::{gen_sample, layout_of, CorpusParams, Split, TaskSample};
use maskdistill_core::distill::{train_teacher, TeacherTrainConfig};
use maskdistill_core::model::ModelConfig;
use maskdistill_core::rng::CounterRng;
use maskdistill_core::seq::Sequence;

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4000);
    let params = CorpusParams::default();
    let root = CounterRng::new(1, 0x636f7270);
    let samples: Vec<TaskSample> = (0..n)
        .map(|i| {
            let mut r = root.derive(i as u64);
            let mut s = gen_sample(&mut r, &params).unwrap();
            s.split = if (i + 1) % 10 == 0 { Split::Eval } else { Split::Train };
            s
        })
        .collect();
    let train: Vec<Sequence> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| layout_of(s, 128).unwrap())
        .collect();
    let eval: Vec<TaskSample> = samples
        .iter()
        .filter(|s| s.split == Split::Eval)
        .take(200)
        .cloned()
        .collect();

    for (name, lr, batch) in [
        ("b4_lr1e-3", 1e-3, 4),
        ("b2_lr1e-3", 1e-3, 2),
    ] {
        println!("== variant {name} ==");
        for epochs in [2usize] {
            let cfg = TeacherTrainConfig {
                model: ModelConfig::desk_teacher(64, 1),
                lr,
                epochs,
                batch_size: batch,
                seed: 1,
                log_every: 100,
            };
            let t0 = Instant::now();
            let (teacher, losses) = train_teacher(&cfg, &train).unwrap();
            let train_t = t0.elapsed().as_secs_f64();
            let acc = answer_accuracy(&teacher, &eval, 40).unwrap();
            println!(
                "epochs {epochs}: {train_t:.0}s loss last {:.3} acc {:.3}",
                losses.last().unwrap(),
                acc.fraction()
            );
        }
    }
}
