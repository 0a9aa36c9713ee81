//! `key = value` run configuration files.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

use crate::model::{ModelConfig, PeKind};
use crate::sampler::{GuidanceConfig, GuidanceSpace};
use crate::ssm::Discretization;
use crate::tokenizer::SyntheticSpec;
use crate::train::TrainConfig;

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub spec: SyntheticSpec,
    pub n_samples: usize,
    pub seed: u64,
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { spec: SyntheticSpec::default(), n_samples: 2000, seed: 0, eval_fraction: 0.1 }
    }
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub guidance: GuidanceConfig,
    pub class: usize,
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { guidance: GuidanceConfig::default(), class: 0, n: 8, seed: 0 }
    }
}

/// Every configurable value of a run, addressed by namespaced keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sample: SampleConfig,
}

/// Key name and one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.n_layers", "number of Mamba blocks"),
    ("model.d_model", "embedding width"),
    ("model.n_groups", "conditioning groups (1 = single, n_layers = per-layer)"),
    ("model.vocab_size", "codebook size"),
    ("model.n_classes", "number of classes, excluding the null class"),
    ("model.seq_len", "image tokens per sequence"),
    ("model.state_dim", "SSM state size per channel"),
    ("model.expand", "inner width multiplier"),
    ("model.conv_k", "causal convolution width"),
    ("model.dt_rank", "step-size projection rank, or auto"),
    ("model.use_pe", "add positional encoding"),
    ("model.pe_kind", "learned or sinusoidal"),
    ("model.tie_head", "reuse the token table as output head"),
    ("model.discretization", "zoh or euler"),
    ("train.batch_size", "sequences per step"),
    ("train.steps", "optimizer steps"),
    ("train.base_lr_per_256", "learning rate per 256 sequences"),
    ("train.lr", "peak learning rate, or auto for the scaling rule"),
    ("train.warmup", "linear warmup steps"),
    ("train.beta1", "AdamW first-moment decay"),
    ("train.beta2", "AdamW second-moment decay"),
    ("train.eps", "AdamW denominator epsilon"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.class_dropout", "probability of replacing the class with the null class"),
    ("train.grad_clip", "global gradient-norm clip, or none"),
    ("train.seed", "initialization, shuffling and dropout seed"),
    ("train.checkpoint_every", "checkpoint interval in steps (0 = final only)"),
    ("train.shards", "data-parallel shards per step"),
    ("data.n_samples", "samples to generate"),
    ("data.n_classes", "pattern classes"),
    ("data.grid_height", "token rows per image"),
    ("data.grid_width", "token columns per image"),
    ("data.noise", "maximum per-channel pixel noise (< 32)"),
    ("data.seed", "generation seed"),
    ("data.eval_fraction", "held-out tail fraction"),
    ("sample.class", "class to generate"),
    ("sample.n", "samples to generate"),
    ("sample.w", "guidance scale"),
    ("sample.temperature", "sampling temperature"),
    ("sample.top_k", "keep the k most likely tokens, or none"),
    ("sample.top_p", "nucleus mass, or none"),
    ("sample.argmax", "greedy decoding"),
    ("sample.space", "guidance space: logit or probability"),
    ("sample.seed", "sampling seed"),
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

fn opt<T: std::str::FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>> {
    if v == none {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show<T: std::fmt::Display>(v: Option<T>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t, d, s) = (&self.model, &self.train, &self.data, &self.sample);
        let g = &s.guidance;
        Ok(match key {
            "model.n_layers" => m.n_layers.to_string(),
            "model.d_model" => m.d_model.to_string(),
            "model.n_groups" => m.n_groups.to_string(),
            "model.vocab_size" => m.vocab_size.to_string(),
            "model.n_classes" => m.n_classes.to_string(),
            "model.seq_len" => m.seq_len.to_string(),
            "model.state_dim" => m.state_dim.to_string(),
            "model.expand" => m.expand.to_string(),
            "model.conv_k" => m.conv_k.to_string(),
            "model.dt_rank" => show(m.dt_rank, "auto"),
            "model.use_pe" => m.use_pe.to_string(),
            "model.pe_kind" => m.pe_kind.as_str().into(),
            "model.tie_head" => m.tie_head.to_string(),
            "model.discretization" => m.discretization.as_str().into(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.base_lr_per_256" => t.base_lr_per_256.to_string(),
            "train.lr" => show(t.lr, "auto"),
            "train.warmup" => t.warmup.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.class_dropout" => t.class_dropout.to_string(),
            "train.grad_clip" => show(t.grad_clip, "none"),
            "train.seed" => t.seed.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.shards" => t.shards.to_string(),
            "data.n_samples" => d.n_samples.to_string(),
            "data.n_classes" => d.spec.n_classes.to_string(),
            "data.grid_height" => d.spec.grid_height.to_string(),
            "data.grid_width" => d.spec.grid_width.to_string(),
            "data.noise" => d.spec.noise.to_string(),
            "data.seed" => d.seed.to_string(),
            "data.eval_fraction" => d.eval_fraction.to_string(),
            "sample.class" => s.class.to_string(),
            "sample.n" => s.n.to_string(),
            "sample.w" => g.w.to_string(),
            "sample.temperature" => g.temperature.to_string(),
            "sample.top_k" => show(g.top_k, "none"),
            "sample.top_p" => show(g.top_p, "none"),
            "sample.argmax" => g.argmax.to_string(),
            "sample.space" => g.space.as_str().into(),
            "sample.seed" => s.seed.to_string(),
            other => return Err(Error::invalid(format!("unknown config key {other}"))),
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        let (m, t, d, s) = (&mut self.model, &mut self.train, &mut self.data, &mut self.sample);
        match key {
            "model.n_layers" => m.n_layers = num(k, v)?,
            "model.d_model" => m.d_model = num(k, v)?,
            "model.n_groups" => m.n_groups = num(k, v)?,
            "model.vocab_size" => m.vocab_size = num(k, v)?,
            "model.n_classes" => m.n_classes = num(k, v)?,
            "model.seq_len" => m.seq_len = num(k, v)?,
            "model.state_dim" => m.state_dim = num(k, v)?,
            "model.expand" => m.expand = num(k, v)?,
            "model.conv_k" => m.conv_k = num(k, v)?,
            "model.dt_rank" => m.dt_rank = opt(k, v, "auto")?,
            "model.use_pe" => m.use_pe = num(k, v)?,
            "model.pe_kind" => m.pe_kind = PeKind::parse(v)?,
            "model.tie_head" => m.tie_head = num(k, v)?,
            "model.discretization" => m.discretization = Discretization::parse(v)?,
            "train.batch_size" => t.batch_size = num(k, v)?,
            "train.steps" => t.steps = num(k, v)?,
            "train.base_lr_per_256" => t.base_lr_per_256 = num(k, v)?,
            "train.lr" => t.lr = opt(k, v, "auto")?,
            "train.warmup" => t.warmup = num(k, v)?,
            "train.beta1" => t.beta1 = num(k, v)?,
            "train.beta2" => t.beta2 = num(k, v)?,
            "train.eps" => t.eps = num(k, v)?,
            "train.weight_decay" => t.weight_decay = num(k, v)?,
            "train.class_dropout" => t.class_dropout = num(k, v)?,
            "train.grad_clip" => t.grad_clip = opt(k, v, "none")?,
            "train.seed" => t.seed = num(k, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(k, v)?,
            "train.shards" => t.shards = num(k, v)?,
            "data.n_samples" => d.n_samples = num(k, v)?,
            "data.n_classes" => d.spec.n_classes = num(k, v)?,
            "data.grid_height" => d.spec.grid_height = num(k, v)?,
            "data.grid_width" => d.spec.grid_width = num(k, v)?,
            "data.noise" => d.spec.noise = num(k, v)?,
            "data.seed" => d.seed = num(k, v)?,
            "data.eval_fraction" => d.eval_fraction = num(k, v)?,
            "sample.class" => s.class = num(k, v)?,
            "sample.n" => s.n = num(k, v)?,
            "sample.w" => s.guidance.w = num(k, v)?,
            "sample.temperature" => s.guidance.temperature = num(k, v)?,
            "sample.top_k" => s.guidance.top_k = opt(k, v, "none")?,
            "sample.top_p" => s.guidance.top_p = opt(k, v, "none")?,
            "sample.argmax" => s.guidance.argmax = num(k, v)?,
            "sample.space" => s.guidance.space = GuidanceSpace::parse(v)?,
            "sample.seed" => s.seed = num(k, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Defaults overlaid with a config file's contents.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `key = value` lines for every key under one of `prefixes`.
    pub fn to_text(&self, prefixes: &[&str]) -> String {
        let mut out = String::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))) {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("registered key")));
        }
        out
    }
}
