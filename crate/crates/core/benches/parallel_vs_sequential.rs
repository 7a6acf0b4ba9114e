use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use igcap::corpus::{generate_synthetic, MultimodalExample, SyntheticCorpus, SyntheticSpec};
use igcap::model::{CaptionerModel, ModelConfig};
use igcap::par::Parallelism;
use igcap::scoring::{score_mle, CandidateSet};
use igcap::training::{loss_and_grads, LossWeights};

fn setup() -> (SyntheticCorpus, CaptionerModel) {
    let corpus = generate_synthetic(&SyntheticSpec {
        image_size: 16,
        train_size: 64,
        eval_per_class: 4,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let model = CaptionerModel::new(ModelConfig {
        image_size: 16,
        patch_size: 4,
        d_model: 32,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_mult: 2,
        vocab_size: corpus.vocab.len(),
        max_len: 10,
        ..ModelConfig::default()
    })
    .unwrap();
    (corpus, model)
}

fn pools() -> Vec<(&'static str, Parallelism)> {
    vec![("sequential", Parallelism::sequential()), ("parallel", Parallelism::new(0))]
}

fn bench_gradients(c: &mut Criterion) {
    let (corpus, model) = setup();
    let batch: Vec<&MultimodalExample> = corpus.train.examples().iter().take(32).collect();
    let weights = LossWeights::new(1.5, 0.5).unwrap();
    let mut group = c.benchmark_group("loss_and_grads_b32");
    group.sample_size(10);
    for (name, par) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, par| {
            b.iter(|| black_box(loss_and_grads(&model, &batch, weights, par, 0).unwrap()))
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let (corpus, model) = setup();
    let candidates = CandidateSet::from_prompts(&corpus.prompts, &corpus.vocab).unwrap();
    let images = corpus.eval.images();
    let mut group = c.benchmark_group("score_mle_40x80");
    group.sample_size(10);
    for (name, par) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, par| {
            b.iter(|| black_box(score_mle(&model, &images, &candidates, false, par).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradients, bench_scoring);
criterion_main!(benches);
