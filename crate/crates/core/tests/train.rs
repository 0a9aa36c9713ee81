use aim_core::bench::nll_eval;
use aim_core::model::{ModelConfig, TokenSequence};
use aim_core::sampler::{generate, GuidanceConfig};
use aim_core::tensor::{Rng, Stream};
use aim_core::tokenizer::{Dataset, Split, SyntheticSpec};
use aim_core::train::{
    loss_and_grads, parse_metrics, Checkpoint, TrainConfig, Trainer, FINAL_CHECKPOINT, METRICS_FILE,
};
use aim_core::{Error, Model};

fn small_model() -> ModelConfig {
    ModelConfig { d_model: 16, state_dim: 4, ..ModelConfig::micro() }
}

fn small_data() -> Dataset {
    Dataset::generate(&SyntheticSpec::default(), 64, 1, 0.25).unwrap()
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig { batch_size: 4, steps, lr: Some(3e-3), warmup: 2, seed: 5, ..Default::default() }
}

#[test]
fn same_seed_same_curve() {
    let data = small_data();
    let run = || Trainer::new(small_model(), short_run(5)).unwrap().run(data.split(Split::Train), None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let other = Trainer::new(small_model(), TrainConfig { seed: 6, ..short_run(5) })
        .unwrap()
        .run(data.split(Split::Train), None)
        .unwrap();
    assert_ne!(a, other);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = small_data();
    let mut t = Trainer::new(small_model(), short_run(3)).unwrap();
    t.run(data.split(Split::Train), None).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    for ((_, a), (_, b)) in back.weights.named().iter().zip(ck.weights.named()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let m0 = Model::new(ck.model.clone(), ck.weights.clone()).unwrap();
    let m1 = back.into_model().unwrap();
    assert_eq!(m0.forward(2, &[1, 2, 3]).unwrap(), m1.forward(2, &[1, 2, 3]).unwrap());
    assert_eq!(&bytes[..4], b"AIMC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn corrupt_checkpoints_fail() {
    let bytes = Trainer::new(small_model(), short_run(0)).unwrap().checkpoint().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
}

#[test]
fn resume_matches_uninterrupted() {
    let data = small_data();
    let train = data.split(Split::Train);
    let mut full = Trainer::new(small_model(), short_run(6)).unwrap();
    let full_log = full.run(train, None).unwrap();

    let mut first = Trainer::new(small_model(), short_run(3)).unwrap();
    let mut log = first.run(train, None).unwrap();
    let mut ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes().unwrap()).unwrap();
    ck.train.steps = 6;
    let mut resumed = Trainer::from_checkpoint(ck).unwrap();
    log.extend(resumed.run(train, None).unwrap());
    assert_eq!(log, full_log);
    assert_eq!(resumed.model.weights, full.model.weights);
    assert_eq!(resumed.optim, full.optim);
}

#[test]
fn run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data();
    let cfg = TrainConfig { checkpoint_every: 2, ..short_run(5) };
    let recs = Trainer::new(small_model(), cfg).unwrap().run(data.split(Split::Train), Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(parse_metrics(&text).unwrap(), recs);
    assert!(text.lines().all(|l| l.split('\t').count() == 3));
    assert!(dir.path().join("step_000002.aimc").exists());
    assert!(dir.path().join("step_000004.aimc").exists());
    let last = Checkpoint::load(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.step, 5);
}

#[test]
fn dropout_rate_is_realized() {
    let cfg = ModelConfig::micro();
    let seq = TokenSequence { class_id: Some(1), tokens: vec![0; 64] };
    let mut nulls = 0;
    for i in 0..10_000u64 {
        let mut rng = Rng::derive(3, Stream::ClassDropout, &[i / 32, i % 32]);
        nulls += usize::from(aim_core::model::class_row_with_dropout(&seq, &cfg, 0.1, &mut rng) == cfg.null_class());
    }
    let rate = nulls as f64 / 10_000.0;
    assert!((0.08..=0.12).contains(&rate), "{rate}");
}

#[test]
fn one_step_lowers_that_sample_loss() {
    let data = small_data();
    let sample = vec![data.samples[0].clone()];
    let cfg = TrainConfig { batch_size: 1, steps: 1, lr: Some(1e-3), warmup: 0, class_dropout: 0.0, ..Default::default() };
    let mut t = Trainer::new(small_model(), cfg).unwrap();
    let before = t.model.nll(&sample).unwrap();
    let rec = t.train_step(&sample).unwrap();
    assert!((rec.loss - before).abs() < 1e-5);
    assert!(t.model.nll(&sample).unwrap() < before);
}

#[test]
fn shards_agree_with_a_single_pass() {
    let data = small_data();
    let model = Model::<f64>::init(small_model(), 2).unwrap();
    let seqs = &data.samples[..6];
    let classes: Vec<usize> = seqs.iter().map(|s| s.class_id.unwrap()).collect();
    let tokens: Vec<usize> = seqs.iter().flat_map(|s| s.tokens.clone()).collect();
    let (l1, g1) = loss_and_grads(&model, &classes, &tokens, 1).unwrap();
    let (l3, g3) = loss_and_grads(&model, &classes, &tokens, 3).unwrap();
    assert!((l1 - l3).abs() < 1e-12);
    for ((n, a), (_, b)) in g1.named().iter().zip(g3.named()) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{n}");
    }
    assert_eq!(loss_and_grads(&model, &classes, &tokens, 3).unwrap().1, g3);
}

#[test]
fn diverging_run_reports_the_step() {
    let data = small_data();
    let cfg = TrainConfig { lr: Some(1e30), warmup: 0, ..short_run(20) };
    let err = Trainer::new(small_model(), cfg).unwrap().run(data.split(Split::Train), None).unwrap_err();
    assert!(matches!(err, Error::Diverged { step } if step >= 2), "{err}");
}

#[test]
fn memorized_sequence_is_reproduced() {
    let cfg = ModelConfig { vocab_size: 4, n_classes: 1, seq_len: 12, d_model: 16, state_dim: 4, ..ModelConfig::micro() };
    let seq = TokenSequence { class_id: Some(0), tokens: vec![0, 1, 2, 3, 3, 2, 1, 0, 2, 2, 0, 1] };
    let train = TrainConfig {
        batch_size: 1,
        steps: 300,
        lr: Some(1e-2),
        warmup: 10,
        class_dropout: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, train).unwrap();
    t.run(std::slice::from_ref(&seq), None).unwrap();
    let nll = nll_eval(&t.model, std::slice::from_ref(&seq)).unwrap().nll;
    assert!(nll < 0.05, "{nll}");
    let greedy = GuidanceConfig { w: 1.0, argmax: true, ..Default::default() };
    let out = generate(&t.model, 0, 2, &greedy, 0).unwrap();
    assert!(out.iter().all(|s| *s == seq.tokens), "{out:?}");
}

#[test]
fn moving_average_falls_over_two_hundred_steps() {
    let data = Dataset::generate(&SyntheticSpec::default(), 2000, 0, 0.1).unwrap();
    let cfg = TrainConfig { lr: Some(3e-3), ..Default::default() };
    let recs = Trainer::new(ModelConfig::micro(), cfg).unwrap().run(data.split(Split::Train), None).unwrap();
    let losses: Vec<f64> = recs.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 200);
    let ma: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] < w[0], "moving average rose at step {}: {} -> {}", i + 21, w[0], w[1]);
    }
}
