use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use aim_core::bench::{
    ablation_suite, class_consistency, decode_scaling_bench, nll_eval, ramp_classes, sampled_column_accuracy,
    scaling_gnuplot, scaling_miniature, AblationConfig, BenchConfig, BenchKind,
};
use aim_core::conditioning::cond_param_count;
use aim_core::config::RunConfig;
use aim_core::model::{ModelConfig, ModelWeights};
use aim_core::sampler::{generate, to_grids, GuidanceConfig};
use aim_core::tokenizer::{decode, Codebook, Dataset, HistogramClassifier, Split};
use aim_core::train::{parse_metrics, Checkpoint, Trainer, FINAL_CHECKPOINT, METRICS_FILE};
use anyhow::{bail, Context, Result};
use clap::ArgMatches;

use crate::keys::{self, Namespaces};
use crate::{AblateArgs, BenchArgs, DatasetArgs, EvalArgs, InspectArgs, SampleArgs, ScaleArgs, TrainArgs};

pub const RUN_CONFIG_FILE: &str = "config.txt";
const DESK_LR: f64 = 3e-3;

pub fn ablate_defaults() -> RunConfig {
    let standard = AblationConfig::standard(Default::default());
    let mut cfg = RunConfig { model: standard.base, ..RunConfig::default() };
    cfg.train.lr = Some(DESK_LR);
    cfg
}

pub fn scale_defaults() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 100;
    cfg.train.batch_size = 16;
    cfg.train.lr = Some(DESK_LR);
    cfg
}

fn load_dataset(path: &str) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("dataset {path}"))
}

fn load_checkpoint(path: &str) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("checkpoint {path}"))
}

/// Dataset and model must agree on vocabulary, length and classes.
fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let s = &data.spec;
    if model.vocab_size != s.vocab_size() || model.seq_len != s.seq_len() || model.n_classes != s.n_classes {
        bail!(aim_core::Error::Invalid(format!(
            "checkpoint/config mismatch: model has vocab {} length {} classes {}, dataset has {} {} {}",
            model.vocab_size,
            model.seq_len,
            model.n_classes,
            s.vocab_size(),
            s.seq_len(),
            s.n_classes
        )));
    }
    Ok(())
}

fn differing_keys(a: &RunConfig, b: &RunConfig, prefix: &str) -> Vec<&'static str> {
    aim_core::config::KEYS
        .iter()
        .map(|(k, _)| *k)
        .filter(|k| k.starts_with(prefix) && a.get(k).ok() != b.get(k).ok())
        .collect()
}

pub fn dataset(a: &DatasetArgs, m: &ArgMatches, out: &mut impl Write) -> Result<()> {
    let cfg = keys::DATASET.resolve(RunConfig::default(), a.spec.as_deref(), m)?;
    let d = &cfg.data;
    d.spec.validate()?;
    let data = Dataset::generate(&d.spec, d.n_samples, d.seed, d.eval_fraction)?;
    data.save(&a.out).with_context(|| format!("writing {}", a.out))?;
    writeln!(out, "wrote {} samples ({} eval) to {}", data.samples.len(), data.n_eval(), a.out)?;
    Ok(())
}

/// Keeps metrics lines up to `step` so a resumed log continues without gaps.
fn truncate_metrics(dir: &Path, step: usize) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(());
    }
    let kept: String = parse_metrics(&std::fs::read_to_string(&path)?)?
        .iter()
        .filter(|r| r.step <= step)
        .map(|r| format!("{}\n", r.log_line()))
        .collect();
    std::fs::write(&path, kept)?;
    Ok(())
}

pub fn train(a: &TrainArgs, m: &ArgMatches, out: &mut impl Write) -> Result<()> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = match &resume {
        Some(ck) => RunConfig { model: ck.model.clone(), train: ck.train.clone(), ..RunConfig::default() },
        None => RunConfig::default(),
    };
    let cfg = keys::TRAIN.resolve(base.clone(), a.config.as_deref(), m)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data = load_dataset(&a.data)?;
    check_compatible(&cfg.model, &data)?;
    let dir = PathBuf::from(&a.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut trainer = match resume {
        Some(mut ck) => {
            let changed = differing_keys(&cfg, &base, "model.");
            if !changed.is_empty() {
                bail!(aim_core::Error::Invalid(format!("checkpoint/config mismatch: cannot change {changed:?} on resume")));
            }
            truncate_metrics(&dir, ck.step)?;
            ck.train = cfg.train.clone();
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let metrics = dir.join(METRICS_FILE);
            if metrics.exists() {
                std::fs::remove_file(&metrics)?;
            }
            Trainer::new(cfg.model.clone(), cfg.train.clone())?
        }
    };
    std::fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_text(&["model.", "train."]))?;
    let records = trainer.run(data.split(Split::Train), Some(&dir))?;
    match records.last() {
        Some(r) => writeln!(out, "step {} loss {:.6} lr {:.6e}", r.step, r.loss, r.lr)?,
        None => writeln!(out, "step {} (nothing to do)", trainer.checkpoint().step)?,
    }
    writeln!(out, "checkpoint {}", dir.join(FINAL_CHECKPOINT).display())?;
    Ok(())
}

/// Rows and columns of the square grid holding `seq_len` tokens.
fn grid_shape(seq_len: usize) -> Result<(usize, usize)> {
    let side = (seq_len as f64).sqrt().round() as usize;
    if side * side != seq_len {
        bail!(aim_core::Error::Invalid(format!("sequence length {seq_len} is not a square grid")));
    }
    Ok((side, side))
}

pub fn sample(a: &SampleArgs, m: &ArgMatches, out: &mut impl Write) -> Result<()> {
    let cfg = keys::SAMPLE.resolve(RunConfig::default(), a.config.as_deref(), m)?;
    let s = &cfg.sample;
    s.guidance.validate()?;
    if s.n == 0 {
        bail!(aim_core::Error::Invalid("sample count must be at least 1".into()));
    }
    let model = load_checkpoint(&a.ckpt)?.into_model()?;
    let mc = &model.config;
    if s.class >= mc.n_classes {
        bail!(aim_core::Error::Invalid(format!("class {} out of range for {} classes", s.class, mc.n_classes)));
    }
    let codebook = Codebook::palette();
    if mc.vocab_size > codebook.len() {
        bail!(aim_core::Error::Invalid(format!("image output needs vocab ≤ {}, model has {}", codebook.len(), mc.vocab_size)));
    }
    let (h, w) = grid_shape(mc.seq_len)?;
    let dir = PathBuf::from(&a.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let seqs = generate(&model, s.class, s.n, &s.guidance, s.seed)?;
    for (i, grid) in to_grids(&seqs, h, w)?.iter().enumerate() {
        let stem = format!("class{}_{i:04}", s.class);
        let text: String = grid
            .tokens
            .chunks_exact(w)
            .map(|row| row.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        std::fs::write(dir.join(format!("{stem}.tokens")), text)?;
        decode(grid, &codebook)?.write_ppm(dir.join(format!("{stem}.ppm")))?;
    }
    std::fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_text(&["sample."]))?;
    writeln!(out, "wrote {} samples of class {} to {}", seqs.len(), s.class, dir.display())?;
    Ok(())
}

pub fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let split = Split::parse(&a.split)?;
    let guidance = GuidanceConfig { w: a.w, ..GuidanceConfig::default() };
    guidance.validate()?;
    if a.samples == 0 {
        bail!(aim_core::Error::Invalid("sample count must be at least 1".into()));
    }
    let model = load_checkpoint(&a.ckpt)?.into_model()?;
    let data = load_dataset(&a.data)?;
    check_compatible(&model.config, &data)?;
    let seqs = data.split(split);
    let nll = nll_eval(&model, seqs)?;
    let classifier = HistogramClassifier::fit(data.split(Split::Train), data.spec.n_classes, data.spec.vocab_size())?;
    let classes: Vec<usize> = (0..data.spec.n_classes).collect();
    let consistency = class_consistency(&model, &classifier, &classes, a.samples, &guidance, a.seed)?;
    writeln!(out, "{:<20} {}", "split", a.split)?;
    writeln!(out, "{:<20} {}", "sequences", seqs.len())?;
    writeln!(out, "{:<20} {}", "tokens", nll.tokens)?;
    writeln!(out, "{:<20} {:.6}", "nll", nll.nll)?;
    writeln!(out, "{:<20} {:.6}", "uniform_nll", (model.config.vocab_size as f64).ln())?;
    writeln!(out, "{:<20} {:.6}", format!("consistency.w{}", a.w), consistency)?;
    if !ramp_classes(&data.spec).is_empty() {
        let acc = sampled_column_accuracy(&model, &data.spec, a.samples, &guidance, a.seed)?;
        writeln!(out, "{:<20} {:.6}", format!("column_accuracy.w{}", a.w), acc)?;
    }
    Ok(())
}

pub fn bench(a: &BenchArgs, out: &mut impl Write) -> Result<()> {
    let kinds = match a.kind.as_str() {
        "both" => vec![BenchKind::Mamba, BenchKind::Attention],
        other => vec![BenchKind::parse(other)?],
    };
    let base = BenchConfig {
        kind: kinds[0],
        lengths: a.lengths.clone(),
        batch: a.batch,
        d_model: a.d_model,
        n_layers: a.n_layers,
        state_dim: a.state_dim,
        trials: a.trials,
        warmup: a.warmup,
        seed: a.seed,
        ..BenchConfig::default()
    };
    base.validate()?;
    let (mut table, mut csv) = (String::new(), String::from("variant,metric,value\n"));
    let mut plots = Vec::new();
    for kind in kinds {
        let report = decode_scaling_bench(&BenchConfig { kind, ..base.clone() })?;
        table.push_str(&report.to_table());
        table.push('\n');
        csv.extend(report.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
        plots.push((kind, report.to_gnuplot()));
    }
    out.write_all(table.as_bytes())?;
    if let Some(dir) = &a.out {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("bench.txt"), &table)?;
        std::fs::write(dir.join("bench.csv"), &csv)?;
        for (kind, plot) in plots {
            std::fs::write(dir.join(format!("bench_{}.dat", kind.as_str())), plot)?;
        }
    }
    Ok(())
}

fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "micro" => ModelConfig::micro(),
        "aim-b" => ModelConfig::aim_b(),
        "aim-l" => ModelConfig::aim_l(),
        "aim-xl" => ModelConfig::aim_xl(),
        other => bail!(aim_core::Error::Invalid(format!("unknown preset {other:?} (micro, aim-b, aim-l, aim-xl)"))),
    })
}

pub fn inspect(a: &InspectArgs, out: &mut impl Write) -> Result<()> {
    let mut text = String::new();
    let (cfg, census, stored) = match (&a.ckpt, &a.preset) {
        (Some(path), _) => {
            let ck = load_checkpoint(path)?;
            let run = RunConfig { model: ck.model.clone(), train: ck.train.clone(), ..RunConfig::default() };
            text.push_str(&run.to_text(&["model.", "train."]));
            let _ = writeln!(text, "checkpoint.step = {}", ck.step);
            let census: Vec<(String, Vec<usize>)> =
                ck.weights.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
            let stored: usize = census.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            (ck.model, census, Some(stored))
        }
        (None, Some(name)) => {
            let cfg = preset(name)?;
            let run = RunConfig { model: cfg.clone(), ..RunConfig::default() };
            text.push_str(&run.to_text(&["model."]));
            let census = ModelWeights::<f32>::shapes(&cfg)?;
            (cfg, census, None)
        }
        (None, None) => bail!(aim_core::Error::Invalid("inspect needs --ckpt or --preset".into())),
    };
    text.push('\n');
    let width = census.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, shape) in &census {
        let dims: Vec<String> = shape.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(text, "{name:<width$}  [{}]  {}", dims.join(", "), shape.iter().product::<usize>());
    }
    text.push('\n');
    let _ = writeln!(text, "tensors = {}", census.len());
    let _ = writeln!(text, "cond_param_count = {}", cond_param_count(&cfg.group_spec()?));
    let _ = writeln!(text, "param_count = {}", cfg.param_count()?);
    if let Some(n) = stored {
        let _ = writeln!(text, "stored_params = {n}");
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn write_outputs(dir: Option<&String>, files: &[(&str, &str)]) -> Result<()> {
    if let Some(dir) = dir {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir)?;
        for (name, body) in files {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(())
}

fn resolve_training(ns: Namespaces, defaults: RunConfig, file: Option<&str>, m: &ArgMatches) -> Result<RunConfig> {
    let cfg = ns.resolve(defaults, file, m)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn ablate(a: &AblateArgs, m: &ArgMatches, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_training(keys::TRAIN, ablate_defaults(), a.config.as_deref(), m)?;
    let abl = AblationConfig {
        base: cfg.model.clone(),
        seeds: a.seeds.clone(),
        groups: a.groups.clone(),
        cfg_weights: a.cfg_weights.clone(),
        n_samples: a.samples,
        ..AblationConfig::standard(cfg.train.clone())
    };
    abl.validate()?;
    let data = load_dataset(&a.data)?;
    check_compatible(&cfg.model, &data)?;
    let table = ablation_suite(&abl, &data)?;
    let (text, csv) = (table.to_table(), table.to_csv());
    out.write_all(text.as_bytes())?;
    write_outputs(a.out.as_ref(), &[("ablation.txt", &text), ("ablation.csv", &csv)])
}

pub fn scale(a: &ScaleArgs, m: &ArgMatches, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_training(keys::TRAIN, scale_defaults(), a.config.as_deref(), m)?;
    if a.widths.is_empty() || a.seeds.is_empty() {
        bail!(aim_core::Error::Invalid("scale needs at least one width and seed".into()));
    }
    for &d in &a.widths {
        ModelConfig { d_model: d, ..cfg.model.clone() }.validate()?;
    }
    let data = load_dataset(&a.data)?;
    check_compatible(&cfg.model, &data)?;
    let rows = scaling_miniature(&cfg.model, &a.widths, &cfg.train, &data, &a.seeds)?;
    let mut text = format!("# scaling: {} steps at batch {}\n", cfg.train.steps, cfg.train.batch_size);
    let _ = writeln!(text, "{:<8} {:>6} {:>10} {:>10}", "d_model", "seed", "params", "eval_nll");
    for r in &rows {
        let _ = writeln!(text, "{:<8} {:>6} {:>10} {:>10.4}", r.d_model, r.seed, r.params, r.eval_nll);
    }
    let plot = scaling_gnuplot(&rows);
    out.write_all(text.as_bytes())?;
    write_outputs(a.out.as_ref(), &[("scaling.txt", &text), ("scaling.dat", &plot)])
}
