use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vsd_bench::fixture;
use vsd_core::decoding::{decode_two_round, DecodeConfig};
use vsd_core::model::{Heads, ModelConfig, ModelMode};
use vsd_core::transformer::Dropout;
use vsd_core::Tape;

fn forward_backward(c: &mut Criterion) {
    let (model, examples) = fixture(ModelConfig::small(), Heads::JOINT, 4);
    let ex = &examples[0];
    let prefix: Vec<usize> = ex.target.clone();
    c.bench_function("end2end_forward_backward_small", |bench| {
        bench.iter(|| {
            let mut tape = Tape::with_params(&model.params);
            let out = model
                .forward_vsd(&mut tape, ex, ModelMode::End2end, None, &prefix, &mut Dropout::off())
                .unwrap();
            let loss = tape.mean(out.logits.unwrap());
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn decode(c: &mut Criterion) {
    let (model, examples) = fixture(ModelConfig::small(), Heads::JOINT, 4);
    let mut g = c.benchmark_group("two_round_decode_small");
    g.sample_size(20);
    for (name, cfg) in [("greedy", DecodeConfig::greedy()), ("beam4", DecodeConfig::beam(4))] {
        g.bench_function(name, |bench| {
            bench.iter(|| black_box(decode_two_round(&model, &examples[0], &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, forward_backward, decode);
criterion_main!(benches);
