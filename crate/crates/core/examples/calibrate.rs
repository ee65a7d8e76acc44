//! Desk-scale pipeline smoke run with timings. Useful when porting to a new
//! machine to see where the CPU budget goes.
//!
//!   cargo run --release -p maskdistill-core --example calibrate -- [n]

use std::time::Instant;

use maskdistill_core::analysis::{answer_accuracy, interval_kl_decay, visual_attention_curve};
use maskdistill_core::corpus::{gen_sample, layout_of, CorpusParams, Split, TaskSample};
use maskdistill_core::distill::{
    build_distill_set, run_training, DistillConfig, MaskSetting, RunMode, TeacherTrainConfig,
};
use maskdistill_core::model::{Model, ModelConfig};
use maskdistill_core::rng::CounterRng;
use maskdistill_core::seq::Sequence;
use maskdistill_core::tensor::{matmul, Tensor};

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10_000);
    let seed = 1u64;

    // matmul throughput probe
    let mut rng = CounterRng::new(0, 0);
    let a = Tensor::<f64>::randn(vec![64, 64], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(vec![64, 64], 1.0, &mut rng);
    let t0 = Instant::now();
    let reps = 20_000;
    let mut sink = 0.0;
    for _ in 0..reps {
        let c = matmul(&a, &b).unwrap();
        sink += c.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (reps as f64 * 2.0 * 64.0 * 64.0 * 64.0) / dt / 1e9;
    println!("matmul 64x64: {gflops:.2} GFLOP/s (sink {sink:.3e})");

    // corpus
    let params = CorpusParams::default();
    let t0 = Instant::now();
    let root = CounterRng::new(seed, 0x636f7270);
    let samples: Vec<TaskSample> = (0..n)
        .map(|i| {
            let mut r = root.derive(i as u64);
            let mut s = gen_sample(&mut r, &params).unwrap();
            s.split = if (i + 1) % 10 == 0 { Split::Eval } else { Split::Train };
            s
        })
        .collect();
    println!("corpus {} samples in {:.2}s", n, t0.elapsed().as_secs_f64());
    let train: Vec<Sequence> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| layout_of(s, 128).unwrap())
        .collect();
    let eval: Vec<TaskSample> = samples
        .iter()
        .filter(|s| s.split == Split::Eval)
        .cloned()
        .collect();
    println!("train {} eval {}", train.len(), eval.len());

    // teacher
    let tcfg = TeacherTrainConfig::desk(ModelConfig::desk_teacher(64, seed), seed);
    let t0 = Instant::now();
    let (teacher, losses) = maskdistill_core::distill::train_teacher(&tcfg, &train).unwrap();
    println!(
        "teacher trained in {:.1}s; first intervals {:?} last {:?}",
        t0.elapsed().as_secs_f64(),
        &losses[..losses.len().min(5)],
        losses.last()
    );

    let t0 = Instant::now();
    let acc = answer_accuracy(&teacher, &eval, 40).unwrap();
    println!(
        "teacher eval accuracy {:.4} ({} of {}) in {:.1}s",
        acc.fraction(),
        acc.correct,
        acc.n,
        t0.elapsed().as_secs_f64()
    );

    // distill set
    let train_samples: Vec<TaskSample> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .cloned()
        .collect();
    let t0 = Instant::now();
    let set = build_distill_set(&teacher, &train_samples, 40).unwrap();
    println!(
        "distill set kept {}/{} ({:.3}) in {:.1}s",
        set.kept,
        set.total,
        set.kept_ratio(),
        t0.elapsed().as_secs_f64()
    );

    // naive KD vs salient masking
    for (name, mask_kind) in [
        ("naive", MaskSetting::CausalOnly),
        ("salient", MaskSetting::Salient),
    ] {
        let cfg = DistillConfig {
            mask_kind,
            seed,
            ..DistillConfig::default()
        };
        let student = Model::<f64>::build(ModelConfig::desk_student(64, seed + 100)).unwrap();
        let t0 = Instant::now();
        let out = run_training(&cfg, RunMode::Distill, Some(&teacher), student, &set, 100).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let acc = answer_accuracy(&out.student, &eval, 40).unwrap();
        let curve = visual_attention_curve(
            &out.student,
            &eval.iter().map(|s| layout_of(s, 128).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let profile = interval_kl_decay(
            &teacher,
            &out.student,
            &set.sequences[..500.min(set.sequences.len())],
            8,
            2.0,
        )
        .unwrap();
        println!(
            "{name}: train {:.1}s acc {:.4} visual-attn mean {:.4} kl-profile {:?} last-metrics {:?}",
            train_time,
            acc.fraction(),
            curve.mean(),
            profile
                .mean_kl
                .iter()
                .map(|v| (v * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            out.metrics.last()
        );
    }
}
