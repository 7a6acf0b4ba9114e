use igcap::corpus::{generate_synthetic, SyntheticSpec};
use igcap::model::{CaptionerModel, ModelConfig};
use igcap::par::Parallelism;
use igcap::training::{train, TrainConfig};

#[test]
fn three_hundred_steps_halve_the_combined_loss() {
    let spec = SyntheticSpec {
        num_classes: 10,
        image_size: 8,
        train_size: 2000,
        eval_per_class: 1,
        seed: 2,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let mut model = CaptionerModel::new(ModelConfig {
        image_size: 8,
        patch_size: 4,
        d_model: 16,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_mult: 2,
        vocab_size: corpus.vocab.len(),
        max_len: 10,
        ..ModelConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        batch_size: 16,
        steps: 300,
        peak_lr: 3e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &corpus.train, &config, &Parallelism::sequential(), |_, _| Ok(())).unwrap();
    let (first, last) = (log[0].combined, log[log.len() - 1].combined);
    assert!(last <= 0.5 * first, "{first} -> {last}");
}
