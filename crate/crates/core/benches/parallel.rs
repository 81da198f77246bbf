//! Parallel versus sequential execution of corpus evaluation and batched
//! gradient steps.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use winrec::corpus::{gen_synthetic, SyntheticSpec};
use winrec::model::{CarryMask, Model, ModelConfig};
use winrec::training::{TrainConfig, Trainer};
use winrec::windowing::{evaluate_corpus, EvalDoc, PlanMode};
use winrec::Parallelism;

fn corpus(n_docs: usize) -> Vec<Vec<u32>> {
    gen_synthetic(&SyntheticSpec::standard(512, n_docs, 1))
        .unwrap()
        .into_iter()
        .map(|d| d.tokens)
        .collect()
}

fn model() -> Model {
    let mut c = ModelConfig::default();
    c.vocab = 56;
    Model::init(c, 0).unwrap()
}

const MODES: [(&str, Parallelism); 2] = [("parallel", Parallelism::Parallel), ("sequential", Parallelism::Sequential)];

fn bench_eval(c: &mut Criterion) {
    let m = model();
    let docs = corpus(8);
    let ed: Vec<EvalDoc> = docs.iter().map(|d| EvalDoc { tokens: d, word_weights: None }).collect();
    let mut g = c.benchmark_group("evaluate_corpus");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, "8x512"), |b| {
            b.iter(|| evaluate_corpus(&m, &ed, 64, 16, PlanMode::Recurrent, CarryMask::Visible, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let docs = corpus(16);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            window: 64,
            windows_per_sequence: 4,
            batch_size: 4,
            parallelism: exec,
            record_wallclock: false,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model(), &docs, cfg.clone()).unwrap();
        g.bench_function(BenchmarkId::new(name, "batch4"), |b| {
            b.iter(|| {
                if trainer.step().unwrap().is_none() {
                    trainer = Trainer::new(model(), &docs, cfg.clone()).unwrap();
                }
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_eval, bench_train_step);
criterion_main!(benches);
