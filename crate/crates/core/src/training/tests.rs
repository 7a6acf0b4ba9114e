use super::*;
use crate::corpus::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use crate::model::{Memory, ModelConfig};

fn corpus() -> SyntheticCorpus {
    generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        prompts_per_class: 3,
        image_size: 8,
        noise_sigma: 0.05,
        signal_contrast: 0.3,
        train_size: 48,
        eval_per_class: 2,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn model_for(c: &SyntheticCorpus) -> CaptionerModel {
    CaptionerModel::new(ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        d_model: 16,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_mult: 2,
        vocab_size: c.vocab.len(),
        max_len: 10,
        dropout: 0.0,
        seed: 1,
    })
    .unwrap()
}

fn first(c: &SyntheticCorpus, n: usize) -> Vec<&MultimodalExample> {
    c.train.examples().iter().take(n).collect()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        steps,
        peak_lr: 3e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn no_op(_: &TrainLogRecord, _: &CaptionerModel) -> Result<()> {
    Ok(())
}

#[test]
fn batch_loss_is_mean_of_singletons() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 2);
    for f in [multimodal_loss, unimodal_loss] {
        let pair = f(&m, &b).unwrap();
        let a = f(&m, &b[..1]).unwrap();
        let z = f(&m, &b[1..]).unwrap();
        assert!((pair - (a + z) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn single_objective_weights_reduce_to_one_loss() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 3);
    let mm = multimodal_loss(&m, &b).unwrap();
    let um = unimodal_loss(&m, &b).unwrap();
    let only_mm = combined_loss(&m, &b, LossWeights::new(1.0, 0.0).unwrap()).unwrap();
    let only_um = combined_loss(&m, &b, LossWeights::new(0.0, 1.0).unwrap()).unwrap();
    assert!((only_mm - mm).abs() < 1e-12);
    assert!((only_um - um).abs() < 1e-12);
    let mixed = combined_loss(&m, &b, LossWeights::new(1.5, 0.5).unwrap()).unwrap();
    assert!((mixed - (1.5 * mm + 0.5 * um)).abs() < 1e-12);
}

#[test]
fn fresh_model_losses_are_close() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 8);
    let gap = (multimodal_loss(&m, &b).unwrap() - unimodal_loss(&m, &b).unwrap()).abs();
    assert!(gap < 0.5, "{gap}");
}

#[test]
fn invalid_weights_and_empty_batch() {
    assert!(matches!(LossWeights::new(0.0, 0.0), Err(Error::Contract(_))));
    assert!(LossWeights::new(-1.0, 1.0).is_err());
    assert!(LossWeights::new(f64::NAN, 1.0).is_err());
    let c = corpus();
    let m = model_for(&c);
    assert!(matches!(multimodal_loss(&m, &[]), Err(Error::Contract(_))));
    let w = LossWeights::new(1.0, 1.0).unwrap();
    assert!(loss_and_grads(&m, &[], w, &Parallelism::sequential(), 0).is_err());
}

#[test]
fn per_example_grads_match_single_graph() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 4);
    let w = LossWeights::new(1.5, 0.5).unwrap();
    let (parts, grads) = loss_and_grads(&m, &b, w, &Parallelism::sequential(), 0).unwrap();

    let mut g = Graph::new();
    let vars = combined_loss_in(&mut g, &m, &b, w).unwrap();
    let reference = g.backward(vars.combined).unwrap().param_grads(&g, m.params());
    assert!((parts.multimodal - g.value(vars.multimodal).item()).abs() < 1e-12);
    assert!((parts.unimodal - g.value(vars.unimodal).item()).abs() < 1e-12);
    assert!((parts.combined - g.value(vars.combined).item()).abs() < 1e-12);
    assert_eq!(parts.combined, 1.5 * parts.multimodal + 0.5 * parts.unimodal);
    for ((_, a), (_, r)) in grads.iter().zip(reference.iter()) {
        for (x, y) in a.iter().zip(r) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn gradient_flow_follows_weights() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 3);
    let seq = Parallelism::sequential();
    let grads_for = |beta, gamma| loss_and_grads(&m, &b, LossWeights::new(beta, gamma).unwrap(), &seq, 0).unwrap().1;
    let nonzero = |s: &[f64]| s.iter().any(|&v| v != 0.0);

    let g = grads_for(1.0, 0.0);
    assert!(g.get(m.null_image_id()).iter().all(|&v| v == 0.0));
    assert!(m.encoder_param_ids().iter().any(|&id| nonzero(g.get(id))));

    let g = grads_for(0.0, 1.0);
    for id in m.encoder_param_ids() {
        assert!(g.get(id).iter().all(|&v| v == 0.0), "{}", m.params().name(id));
    }
    assert!(nonzero(g.get(m.null_image_id())));

    let g = grads_for(1.5, 0.5);
    assert!(nonzero(g.get(m.null_image_id())));
    assert!(m.encoder_param_ids().iter().any(|&id| nonzero(g.get(id))));
}

#[test]
fn zero_steps_leave_model_untouched() {
    let c = corpus();
    let mut m = model_for(&c);
    let before = m.fingerprint();
    let log = train(&mut m, &c.train, &quick(0), &Parallelism::sequential(), no_op).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.fingerprint(), before);
}

#[test]
fn training_is_deterministic_across_runs_and_workers() {
    let c = corpus();
    let run = |par: Parallelism| {
        let mut m = model_for(&c);
        let log = train(&mut m, &c.train, &quick(6), &par, no_op).unwrap();
        let losses: Vec<(f64, f64, f64)> = log.iter().map(|r| (r.l_multimodal, r.l_unimodal, r.grad_norm)).collect();
        (losses, m.fingerprint())
    };
    let a = run(Parallelism::sequential());
    assert_eq!(a, run(Parallelism::sequential()));
    assert_eq!(a, run(Parallelism::new(3)));
}

#[test]
fn dropout_training_is_deterministic() {
    let c = corpus();
    let run = || {
        let mut cfg = model_for(&c).config().clone();
        cfg.dropout = 0.2;
        let mut m = CaptionerModel::new(cfg).unwrap();
        train(&mut m, &c.train, &quick(3), &Parallelism::new(2), no_op).unwrap();
        m.fingerprint()
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_on_small_corpus() {
    let c = corpus();
    let mut m = model_for(&c);
    let log = train(&mut m, &c.train, &quick(60), &Parallelism::sequential(), no_op).unwrap();
    let head: f64 = log[..5].iter().map(|r| r.combined).sum::<f64>() / 5.0;
    let tail: f64 = log[55..].iter().map(|r| r.combined).sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
    for r in &log {
        assert!((r.combined - (1.5 * r.l_multimodal + 0.5 * r.l_unimodal)).abs() < 1e-12);
    }

    // the two conditioning paths have diverged
    let ex = &c.train.examples()[0];
    let mem = m.encode_image(&ex.image).unwrap();
    let a = m.decode_logits(&ex.tokens, Memory::Image(&mem)).unwrap();
    let b = m.decode_logits(&ex.tokens, Memory::Null).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3, "{diff}");
}

#[test]
fn callback_sees_every_step() {
    let c = corpus();
    let mut m = model_for(&c);
    let mut seen = Vec::new();
    train(&mut m, &c.train, &quick(4), &Parallelism::sequential(), |r, _| {
        seen.push(r.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [1, 2, 3, 4]);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let c = corpus();
    let mut m = model_for(&c);
    let id = m.null_image_id();
    m.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    match train(&mut m, &c.train, &quick(3), &Parallelism::sequential(), no_op) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step 1"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = TrainConfig {
        steps: 200,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.warmup_steps(), 10);
    assert!((cfg.lr_at(5) - 5e-4).abs() < 1e-15);
    assert!((cfg.lr_at(10) - 1e-3).abs() < 1e-15);
    assert!((cfg.lr_at(105) - 5e-4).abs() < 1e-12);
    assert!(cfg.lr_at(200).abs() < 1e-15);
    for s in 11..200 {
        assert!(cfg.lr_at(s + 1) <= cfg.lr_at(s));
    }
    let flat = TrainConfig { decay: Decay::Constant, ..cfg.clone() };
    assert_eq!(flat.lr_at(150), 1e-3);
    let lin = TrainConfig { decay: Decay::Linear, ..cfg };
    assert!((lin.lr_at(105) - 5e-4).abs() < 1e-12);
}

#[test]
fn csv_row_has_header_arity() {
    let r = TrainLogRecord {
        step: 3,
        l_multimodal: 1.25,
        l_unimodal: 2.5,
        combined: 3.125,
        grad_norm: 0.5,
        seconds: 1.0,
    };
    assert_eq!(r.csv_row(), "3,1.25,2.5,3.125,0.5,1.000");
    assert_eq!(r.csv_row().split(',').count(), TRAIN_LOG_HEADER.split(',').count());
}

#[test]
fn fresh_model_losses_near_ln_vocab() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 6);
    let ln_v = (c.vocab.len() as f64).ln();
    for f in [multimodal_loss, unimodal_loss] {
        let l = f(&m, &b).unwrap();
        assert!((l - ln_v).abs() <= 0.05 * ln_v, "{l} vs {ln_v}");
    }
}

#[test]
fn unimodal_loss_ignores_images() {
    let c = corpus();
    let m = model_for(&c);
    let b = first(&c, 3);
    let blank: Vec<MultimodalExample> = b
        .iter()
        .map(|ex| MultimodalExample {
            image: crate::corpus::Image::zeros(8, 8, 3),
            ..(*ex).clone()
        })
        .collect();
    let blank: Vec<&MultimodalExample> = blank.iter().collect();
    assert_eq!(unimodal_loss(&m, &b).unwrap().to_bits(), unimodal_loss(&m, &blank).unwrap().to_bits());
}
