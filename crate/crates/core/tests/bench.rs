use aim_core::bench::{
    ablation_suite, class_consistency, decode_run, decode_scaling_bench, nll_eval, ramp_classes, scaling_gnuplot,
    scaling_miniature, step_latencies, AblationConfig, AttentionBaseline, AttentionConfig, BenchConfig, BenchKind,
};
use aim_core::conditioning::cond_param_count;
use aim_core::model::ModelConfig;
use aim_core::sampler::GuidanceConfig;
use aim_core::tokenizer::{Dataset, HistogramClassifier, Split, SyntheticSpec};
use aim_core::train::TrainConfig;
use aim_core::{Error, Model};
use proptest::prelude::*;

fn attention(d: usize, heads: usize, seed: u64) -> AttentionBaseline<f64> {
    let cfg = AttentionConfig { n_layers: 2, d_model: d, n_heads: heads, vocab_size: 16, n_classes: 3, max_len: 40 };
    AttentionBaseline::init(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_cache_matches_full_recompute(seed in any::<u64>(), heads in 1usize..3, class in 0usize..4) {
        let m = attention(8, heads, seed);
        let tokens: Vec<usize> = (0..39).map(|i| (i * 7 + seed as usize) % 16).collect();
        let full = m.forward(class, &tokens).unwrap();
        let mut cache = m.start(class).unwrap();
        for t in 0..40 {
            let prev = if t == 0 { 0 } else { tokens[t - 1] };
            let step = m.step_batch(std::slice::from_mut(&mut cache), &[prev]).unwrap();
            let row = &full.data()[t * 16..(t + 1) * 16];
            let err = step.iter().zip(row).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
            prop_assert!(err < 1e-10, "t {t}: {err}");
        }
    }
}

#[test]
fn attention_memory_grows_and_mamba_memory_does_not() {
    let m = attention(8, 1, 0);
    let mut cache = m.start(0).unwrap();
    for t in 1..=10 {
        m.step_batch(std::slice::from_mut(&mut cache), &[1]).unwrap();
        assert_eq!(cache.footprint(), 2 * 2 * 8 * t);
    }
    let micro = Model::<f32>::init(ModelConfig::micro(), 0).unwrap();
    let short = decode_run(&micro, 4, 3).unwrap();
    let long = decode_run(&micro, 64, 3).unwrap();
    assert_eq!(short, long);
    let att = AttentionBaseline::<f32>::init(AttentionConfig::matching(&ModelConfig::micro()), 0).unwrap();
    assert_eq!(decode_run(&att, 64, 3).unwrap(), 16 * decode_run(&att, 4, 3).unwrap());
}

#[test]
fn decode_past_the_end_fails() {
    let m = attention(8, 1, 0);
    let mut cache = m.start(0).unwrap();
    for _ in 0..40 {
        m.step_batch(std::slice::from_mut(&mut cache), &[0]).unwrap();
    }
    assert!(m.step_batch(std::slice::from_mut(&mut cache), &[0]).is_err());
    assert!(m.start(4).is_err());
}

#[test]
fn tiny_lengths_hit_timer_resolution() {
    let cfg = BenchConfig { kind: BenchKind::Attention, lengths: vec![1, 2, 4, 16], batch: 1, d_model: 8, ..Default::default() };
    let err = decode_scaling_bench(&cfg).unwrap_err();
    assert!(err.to_string().contains("timer resolution"), "{err}");
}

#[test]
fn bench_report_formats() {
    let cfg = BenchConfig { lengths: vec![16, 32, 64, 256], batch: 4, ..Default::default() };
    let r = decode_scaling_bench(&cfg).unwrap();
    assert_eq!(r.points.len(), 4);
    assert!(r.points.iter().all(|p| p.median_secs > 0.0 && p.trial_secs.len() == 5 && p.step_secs > 0.0));
    assert!(r.points.windows(2).all(|w| w[0].state_bytes == w[1].state_bytes));
    assert!(r.config.iter().any(|(k, v)| k == "threads" && v.parse::<usize>().unwrap() >= 1));
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,metric,value"));
    assert!(lines.all(|l| l.starts_with("mamba,") && l.split(',').count() == 3));
    assert!(csv.contains("mamba,slope,"));
    assert_eq!(r.to_gnuplot().lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(r.to_table().contains("slope"));
}

#[test]
fn step_latencies_cover_every_length() {
    let micro = Model::<f32>::init(ModelConfig { seq_len: 64, ..ModelConfig::micro() }, 0).unwrap();
    let lat = step_latencies(&micro, &[1, 8, 64], 2).unwrap();
    assert_eq!(lat.len(), 3);
    assert!(lat.iter().all(|&s| s > 0.0));
    assert!(step_latencies(&micro, &[8, 8], 2).is_err());
}

#[test]
fn untrained_nll_is_near_uniform() {
    let data = Dataset::generate(&SyntheticSpec::default(), 100, 0, 0.5).unwrap();
    let model = Model::<f32>::init(ModelConfig::micro(), 0).unwrap();
    let a = nll_eval(&model, data.split(Split::Eval)).unwrap();
    assert!((a.nll - 64f64.ln()).abs() < 0.05, "{}", a.nll);
    assert_eq!(a.tokens, 50 * 64);
    assert_eq!(nll_eval(&model, data.split(Split::Eval)).unwrap(), a);
    assert!(matches!(nll_eval(&model, &[]), Err(Error::Invalid(_))));
}

#[test]
fn consistency_needs_classes() {
    let data = Dataset::generate(&SyntheticSpec::default(), 20, 0, 0.0).unwrap();
    let clf = HistogramClassifier::fit(&data.samples, 10, 64).unwrap();
    let model = Model::<f32>::init(ModelConfig::micro(), 0).unwrap();
    assert!(class_consistency(&model, &clf, &[], 4, &GuidanceConfig::default(), 0).is_err());
    let c = class_consistency(&model, &clf, &[0, 1], 4, &GuidanceConfig::default(), 0).unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert_eq!(ramp_classes(&data.spec), vec![0, 1]);
}

#[test]
fn ablation_grid_and_params() {
    let data = Dataset::generate(&SyntheticSpec::default(), 80, 0, 0.25).unwrap();
    let train = TrainConfig { steps: 2, batch_size: 4, warmup: 1, lr: Some(1e-3), ..Default::default() };
    let mut cfg = AblationConfig::standard(train);
    cfg.base = ModelConfig { d_model: 16, state_dim: 4, ..cfg.base };
    cfg.seeds = vec![0];
    cfg.n_samples = 2;
    assert_eq!(cfg.groups, vec![1, 2, 4]);
    let table = ablation_suite(&cfg, &data).unwrap();
    assert_eq!(table.rows.len(), 6);
    for pe in [false, true] {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.use_pe == pe).collect();
        assert!(rows.windows(2).all(|w| w[0].params < w[1].params && w[0].cond_params < w[1].cond_params));
        assert!(rows.iter().all(|r| r.consistency.len() == 4));
    }
    let pe_rows = table.rows.iter().filter(|r| r.use_pe);
    for (a, b) in pe_rows.zip(table.rows.iter().filter(|r| !r.use_pe)) {
        assert_eq!(a.params, b.params + 65 * 16);
    }
    let csv = table.to_csv();
    assert!(csv.starts_with("variant,metric,value\n"));
    assert!(csv.contains("pe-g4-s0,consistency.w1.5,"));
    assert_eq!(table.to_table().lines().count(), 8);
    assert!(table.median_of(true, 2, |r| r.eval_nll).is_finite());

    let bad = AblationConfig { groups: vec![8], ..cfg.clone() };
    assert!(ablation_suite(&bad, &data).is_err());
}

#[test]
fn cond_params_strictly_increase_with_groups() {
    let counts: Vec<usize> = [1, 2, 4, 8]
        .iter()
        .map(|&g| cond_param_count(&ModelConfig { n_layers: 8, n_groups: g, ..ModelConfig::micro() }.group_spec().unwrap()))
        .collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}

#[test]
fn scaling_rows_and_plot() {
    let data = Dataset::generate(&SyntheticSpec::default(), 40, 0, 0.25).unwrap();
    let train = TrainConfig { steps: 1, batch_size: 4, warmup: 1, ..Default::default() };
    let base = ModelConfig { state_dim: 4, ..ModelConfig::micro() };
    let rows = scaling_miniature(&base, &[8, 16], &train, &data, &[0, 1]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].params < rows[2].params);
    let plot = scaling_gnuplot(&rows);
    assert_eq!(plot.lines().count(), 3);
    assert!(scaling_miniature(&base, &[], &train, &data, &[0]).is_err());
}
