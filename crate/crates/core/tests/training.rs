use glacnet_core::corpus::{build_vocab, synth_corpus, CorpusSplit, StoryRecord, SynthSpec, Vocabulary};
use glacnet_core::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use glacnet_core::special::{END, START};
use glacnet_core::train::{evaluate_perplexity, train, TrainConfig};
use glacnet_core::{GlacNet, ModelConfig, Tensor};

fn small_config() -> TrainConfig {
    let tiny = ModelConfig::tiny();
    let mut c = TrainConfig {
        learning_rate: 0.01,
        batch_size: 8,
        epochs: 3,
        seed: 4,
        encoder: tiny.encoder,
        decoder: tiny.decoder,
        ..TrainConfig::default()
    };
    c.encoder.feature_dim = 8;
    c.decoder.vocab_size = 0;
    c.decoder.max_len = 10;
    c
}

fn small_corpus(seed: u64, n: usize) -> Vec<glacnet_core::corpus::StoryText> {
    let spec = SynthSpec {
        feature_dim: 8,
        images_per_story: 3,
        n_nouns: 6,
        n_verbs: 4,
        n_adjectives: 4,
        ..SynthSpec::default()
    };
    synth_corpus(seed, n, &spec).unwrap()
}

fn encoded(vocab: &Vocabulary, seed: u64, n: usize) -> Vec<StoryRecord> {
    small_corpus(seed, n)
        .iter()
        .map(|s| vocab.encode_story(s).unwrap())
        .collect()
}

fn small_split(n_train: usize, n_val: usize) -> (CorpusSplit, Vocabulary) {
    let texts = small_corpus(1, n_train);
    let vocab = build_vocab(&texts, 1).unwrap();
    let train_records = texts.iter().map(|s| vocab.encode_story(s).unwrap()).collect();
    let validation = if n_val == 0 { Vec::new() } else { encoded(&vocab, 2, n_val) };
    (CorpusSplit::new(train_records, validation, Vec::new()).unwrap(), vocab)
}

#[test]
fn adam_matches_the_moment_recurrence() {
    let config = AdamConfig {
        learning_rate: 0.05,
        weight_decay: 0.01,
        ..AdamConfig::default()
    };
    let start = [0.7, -0.2, 1.3];
    let grads = [[0.4, -1.1, 0.0], [-0.3, 2.5, 1e-4]];
    let mut params = vec![Tensor::vector(start.to_vec())];
    let mut state = AdamState::new(&params);
    for g in &grads {
        adam_step(&mut params, &[g.to_vec()], &mut state, &config).unwrap();
    }
    for j in 0..3 {
        let (mut w, mut m, mut v) = (start[j], 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let g = g[j] + 0.01 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((params[0].data()[j] - w).abs() < 1e-12, "{j}: {} vs {w}", params[0].data()[j]);
    }
    assert_eq!(state.t, 2);
}

#[test]
fn weight_decay_alone_shrinks_parameters() {
    let config = AdamConfig {
        learning_rate: 0.01,
        weight_decay: 0.1,
        ..AdamConfig::default()
    };
    let mut params = vec![Tensor::vector(vec![2.0, -3.0, 0.5])];
    let mut state = AdamState::new(&params);
    for _ in 0..20 {
        let before: Vec<f64> = params[0].data().to_vec();
        adam_step(&mut params, &[vec![0.0; 3]], &mut state, &config).unwrap();
        for (a, b) in params[0].data().iter().zip(&before) {
            assert!(a.abs() < b.abs());
        }
    }
}

#[test]
fn clipping_preserves_direction() {
    let mut g = vec![vec![30.0, -40.0], vec![120.0]];
    let norm = clip_global_norm(&mut g, 5.0);
    assert_eq!(norm, 130.0);
    let after: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    assert!((after - 5.0).abs() < 1e-12);
    assert!((g[0][0] / g[0][1] + 0.75).abs() < 1e-12);
}

#[test]
fn one_step_changes_parameters_with_gradient() {
    let texts = vec![glacnet_core::corpus::StoryText {
        story_id: "one".into(),
        features: vec![vec![0.3; 8], vec![-0.1; 8]],
        sentences: vec![vec!["hello".into()], vec!["world".into()]],
    }];
    let vocab = build_vocab(&texts, 1).unwrap();
    let records: Vec<StoryRecord> = texts.iter().map(|s| vocab.encode_story(s).unwrap()).collect();
    let split = CorpusSplit::new(records.clone(), Vec::new(), Vec::new()).unwrap();
    let config = TrainConfig {
        epochs: 1,
        encoder: glacnet_core::glocal::EncoderConfig {
            dropout: 0.0,
            ..small_config().encoder
        },
        ..small_config()
    };
    let outcome = train(&split, &vocab, &config, |_| {}).unwrap();
    assert_eq!(outcome.metrics.len(), 1);
    assert!(outcome.metrics[0].train_loss.is_finite());

    let mut initial = GlacNet::new(config.model_config(vocab.len()), config.seed).unwrap();
    let refs: Vec<&StoryRecord> = records.iter().collect();
    let mut rng = dropout_rng(config.seed);
    let (_, grads) = initial.loss_and_grads(&refs, &mut rng).unwrap();
    let trained = outcome.checkpoint.model.params().tensors();
    for ((before, after), g) in initial.params().tensors().iter().zip(trained).zip(&grads) {
        for ((b, a), gi) in before.data().iter().zip(after.data()).zip(g) {
            if gi.abs() > 1e-9 {
                assert_ne!(a, b);
            }
        }
    }
}

fn dropout_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    rng
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (split, vocab) = small_split(12, 0);
    let config = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..small_config()
    };
    let outcome = train(&split, &vocab, &config, |_| {}).unwrap();
    let fresh = GlacNet::new(config.model_config(vocab.len()), config.seed).unwrap();
    assert_eq!(outcome.checkpoint.model.params(), fresh.params());
    assert_ne!(outcome.checkpoint.model.bn_stats(), fresh.bn_stats());
}

#[test]
fn training_is_deterministic() {
    let (split, vocab) = small_split(20, 6);
    let config = small_config();
    let a = train(&split, &vocab, &config, |_| {}).unwrap();
    let b = train(&split, &vocab, &config, |_| {}).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.metrics, b.metrics);
    let c = train(&split, &vocab, &TrainConfig { seed: 5, ..config }, |_| {}).unwrap();
    assert_ne!(a.checkpoint.model, c.checkpoint.model);
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let (split, vocab) = small_split(20, 6);
    let config = TrainConfig {
        learning_rate: 0.2,
        epochs: 25,
        patience: 2,
        ..small_config()
    };
    let outcome = train(&split, &vocab, &config, |_| {}).unwrap();
    let ppls: Vec<f64> = outcome.metrics.iter().map(|m| m.val_perplexity.unwrap()).collect();
    let best = ppls.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_epoch = outcome.metrics.iter().find(|m| m.val_perplexity == Some(best)).unwrap().epoch;
    assert_eq!(outcome.checkpoint.epoch, best_epoch);
    let kept = evaluate_perplexity(&outcome.checkpoint.model, &split.validation).unwrap();
    assert_eq!(kept, best);
    if outcome.metrics.len() < 25 {
        assert_eq!(outcome.metrics.len() as u64, best_epoch + 2);
    }
}

fn zero_model(vocab_size: usize) -> GlacNet {
    let mut config = ModelConfig::tiny();
    config.decoder.vocab_size = vocab_size;
    let mut model = GlacNet::new(config, 1).unwrap();
    model.params_mut().zero_all();
    model
}

fn tiny_record(id: &str, sentences: Vec<Vec<usize>>) -> StoryRecord {
    StoryRecord {
        story_id: id.into(),
        features: vec![vec![0.25; 6]; sentences.len()],
        sentences,
    }
}

#[test]
fn zero_model_perplexity_is_the_vocabulary_size() {
    let model = zero_model(10);
    let records = vec![
        tiny_record("a", vec![vec![START, 4, 9, END], vec![START, END]]),
        tiny_record("b", vec![vec![START, 5, END], vec![START, 7, 7, 8, END]]),
    ];
    let ppl = evaluate_perplexity(&model, &records).unwrap();
    assert!((ppl - 10.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn perplexity_hand_example() {
    let mut model = zero_model(5);
    let bias = model.decoder().out_bias();
    let logits = [0.0, -1.0, 0.5, 2.0, 1.0];
    *model.params_mut().get_mut(bias) = Tensor::vector(logits.to_vec());
    let records = vec![tiny_record("h", vec![vec![START, 4, END]])];
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    let nll = -(logits[4].exp() / z).ln() - (logits[END].exp() / z).ln();
    let expected = (nll / 2.0).exp();
    let ppl = evaluate_perplexity(&model, &records).unwrap();
    assert!((ppl - expected).abs() < 1e-10, "{ppl} vs {expected}");
    assert!(evaluate_perplexity(&model, &[]).is_err());
}

#[test]
fn training_lowers_validation_perplexity() {
    let (split, vocab) = small_split(48, 16);
    let config = TrainConfig {
        learning_rate: 0.02,
        epochs: 40,
        patience: 0,
        ..small_config()
    };
    let untrained = GlacNet::new(config.model_config(vocab.len()), config.seed).unwrap();
    let before = evaluate_perplexity(&untrained, &split.validation).unwrap();
    let outcome = train(&split, &vocab, &config, |_| {}).unwrap();
    let after = evaluate_perplexity(&outcome.checkpoint.model, &split.validation).unwrap();
    assert!(after * 10.0 < before, "before {before}, after {after}");
}

#[test]
fn training_rejects_bad_input() {
    let (split, vocab) = small_split(4, 0);
    let empty = CorpusSplit::default();
    assert!(train(&empty, &vocab, &small_config(), |_| {}).is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..small_config()
    };
    assert!(train(&split, &vocab, &bad, |_| {}).is_err());
}
