//! AdamW training loop, checkpoints and metrics log.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::model::{class_row_with_dropout, nll_taped, ModelConfig, ModelWeights, TokenSequence};
use crate::tensor::{Element, Rng, Stream, Tape, Tensor};
use crate::tokenizer::{read_exact, read_u32};
use crate::Model;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr_per_256: f64,
    /// Peak rate overriding the linear scaling rule.
    pub lr: Option<f64>,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub class_dropout: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Data-parallel shards per step, reduced in fixed order.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 200,
            base_lr_per_256: 1e-4,
            lr: None,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            class_dropout: 0.1,
            grad_clip: None,
            seed: 0,
            checkpoint_every: 0,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return Err(Error::invalid(format!("class_dropout {} outside [0, 1]", self.class_dropout)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.shards == 0 {
            return Err(Error::invalid("shards must be ≥ 1"));
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) || self.base_lr_per_256 <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Peak learning rate: `base · batch / 256` unless overridden.
pub fn effective_lr(cfg: &TrainConfig) -> Result<f64> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be ≥ 1"));
    }
    Ok(cfg.lr.unwrap_or(cfg.base_lr_per_256 * cfg.batch_size as f64 / 256.0))
}

/// Rate at zero-based `step`: linear warmup, then constant.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> Result<f64> {
    let peak = effective_lr(cfg)?;
    if step < cfg.warmup {
        Ok(peak * (step + 1) as f64 / cfg.warmup as f64)
    } else {
        Ok(peak)
    }
}

/// Whether a parameter receives weight decay; biases, norms, embeddings,
/// the state matrix and the skip gain do not.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let exempt = name.ends_with("_embed")
        || name == "norm_f"
        || name.starts_with("cond.b.")
        || matches!(leaf, "conv_b" | "dt_bias" | "a_log" | "d_skip");
    !exempt
}

/// First and second moments mirroring the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Element> {
    pub m: ModelWeights<T>,
    pub v: ModelWeights<T>,
    pub step: u64,
}

impl<T: Element> OptimState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let zeros = weights.try_map(|_, t| Ok(Tensor::zeros(t.shape().to_vec()))).expect("infallible");
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One decoupled-decay AdamW update of a flat buffer; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Element>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    let (b1t, b2t, lrt, wdt) = (T::of(b1), T::of(b2), T::of(lr), T::of(lr * wd));
    let (c1t, c2t, epst) = (T::of(c1), T::of(c2), T::of(cfg.eps));
    for i in 0..w.len() {
        m[i] = b1t * m[i] + (T::one() - b1t) * g[i];
        v[i] = b2t * v[i] + (T::one() - b2t) * g[i] * g[i];
        let mh = m[i] / c1t;
        let vh = v[i] / c2t;
        w[i] = w[i] - wdt * w[i] - lrt * mh / (vh.sqrt() + epst);
    }
}

/// AdamW over every named parameter.
pub fn adamw_step<T: Element>(
    weights: &mut ModelWeights<T>,
    grads: &ModelWeights<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = grads.named();
    let mut w = weights.named_mut();
    if g.len() != w.len() {
        return Err(Error::shape("adamw_step", format!("{} gradients for {} weights", g.len(), w.len())));
    }
    for ((wn, wt), (gn, gt)) in w.iter().zip(&g) {
        if wn != gn || wt.shape() != gt.shape() {
            return Err(Error::shape("adamw_step", format!("{wn} {:?} vs gradient {gn} {:?}", wt.shape(), gt.shape())));
        }
    }
    state.step += 1;
    let mut m = state.m.named_mut();
    let mut v = state.v.named_mut();
    for (i, (name, wt)) in w.iter_mut().enumerate() {
        adamw_update(wt.data_mut(), g[i].1.data(), m[i].1.data_mut(), v[i].1.data_mut(), state.step, lr, cfg, decays(name));
    }
    Ok(())
}

/// Mean loss and its gradient over a batch of `(class_row, tokens)` pairs,
/// split into `shards` contiguous pieces evaluated in parallel and summed in
/// shard order.
pub fn loss_and_grads<T: Element>(
    model: &Model<T>,
    classes: &[usize],
    tokens: &[usize],
    shards: usize,
) -> Result<(f64, ModelWeights<T>)> {
    let batch = classes.len();
    let l = model.config.seq_len;
    if batch == 0 || tokens.len() != batch * l {
        return Err(Error::shape("loss_and_grads", format!("{} tokens for {batch} sequences", tokens.len())));
    }
    let per = batch.div_ceil(shards.max(1));
    let parts: Vec<(usize, usize)> = (0..batch).step_by(per).map(|s| (s, (s + per).min(batch))).collect();
    let results = parts
        .par_iter()
        .map(|&(s, e)| {
            let tape = Tape::new();
            let p = model.weights.try_map(|_, t| Ok(tape.var(t)))?;
            let loss = nll_taped(&tape, &p, &model.config, &classes[s..e], &tokens[s * l..e * l])?;
            let value = loss.value().item()?.as_f64();
            let grads = tape.backward(loss)?;
            let g = p.try_map(|_, v| grads.wrt(*v))?;
            Ok((value, e - s, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = results.into_iter();
    let (first_loss, n0, mut total) = iter.next().expect("non-empty batch");
    let scale_tree = |g: &mut ModelWeights<T>, c: f64| {
        for (_, t) in g.named_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= T::of(c));
        }
    };
    scale_tree(&mut total, n0 as f64 / batch as f64);
    let mut loss = first_loss * n0 as f64;
    for (value, n, g) in iter {
        loss += value * n as f64;
        let w = T::of(n as f64 / batch as f64);
        for ((_, acc), (_, t)) in total.named_mut().into_iter().zip(g.named()) {
            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * b;
            }
        }
    }
    Ok((loss / batch as f64, total))
}

fn clip_grads<T: Element>(grads: &mut ModelWeights<T>, max_norm: f64) {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for (_, t) in grads.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// One logged optimizer step; `step` counts completed updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.loss, self.lr)
    }
}

/// Parses a metrics log back into records.
pub fn parse_metrics(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(format!("malformed metrics line {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Model, optimizer and position in the deterministic data order.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub cfg: TrainConfig,
    pub step: usize,
    perms: HashMap<usize, Vec<usize>>,
}

impl Trainer {
    /// Fresh weights seeded from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(model_cfg, cfg.seed)?;
        let optim = OptimState::new(&model.weights);
        Ok(Self::from_parts(model, optim, cfg, 0))
    }

    pub fn from_parts(model: Model<f32>, optim: OptimState<f32>, cfg: TrainConfig, step: usize) -> Self {
        Self { model, optim, cfg, step, perms: HashMap::new() }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        let model = Model::new(ck.model, ck.weights)?;
        ck.optim.m.check(&model.config)?;
        ck.optim.v.check(&model.config)?;
        Ok(Self::from_parts(model, ck.optim, ck.train, ck.step))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            train: self.cfg.clone(),
            step: self.step,
            weights: self.model.weights.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Dataset indices of the batch at zero-based `step`: consecutive slots
    /// of per-epoch seeded permutations.
    pub fn batch_indices(&mut self, step: usize, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        (step * b..(step + 1) * b)
            .map(|slot| {
                let (epoch, pos) = (slot / n, slot % n);
                let seed = self.cfg.seed;
                let perm = self
                    .perms
                    .entry(epoch)
                    .or_insert_with(|| Rng::derive(seed, Stream::Shuffle, &[epoch as u64]).permutation(n));
                perm[pos]
            })
            .collect()
    }

    /// One update on the next batch of `data`.
    pub fn train_step(&mut self, data: &[TokenSequence]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let step = self.step;
        if self.perms.len() > 4 {
            let keep = step * self.cfg.batch_size / data.len();
            self.perms.retain(|&e, _| e + 1 >= keep);
        }
        let idx = self.batch_indices(step, data.len());
        let cfg = &self.model.config;
        let mut classes = Vec::with_capacity(idx.len());
        let mut tokens = Vec::with_capacity(idx.len() * cfg.seq_len);
        for (j, &i) in idx.iter().enumerate() {
            let seq = &data[i];
            seq.validate(cfg)?;
            let mut rng = Rng::derive(self.cfg.seed, Stream::ClassDropout, &[step as u64, j as u64]);
            classes.push(class_row_with_dropout(seq, cfg, self.cfg.class_dropout, &mut rng));
            tokens.extend_from_slice(&seq.tokens);
        }
        let (loss, mut grads) = match loss_and_grads(&self.model, &classes, &tokens, self.cfg.shards) {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step: step + 1 }),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step + 1 });
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_grads(&mut grads, c);
        }
        let lr = lr_at(&self.cfg, step)?;
        adamw_step(&mut self.model.weights, &grads, &mut self.optim, lr, &self.cfg)?;
        self.step += 1;
        Ok(StepRecord { step: self.step, loss, lr })
    }

    /// Trains until `cfg.steps`, appending to the metrics log and writing
    /// checkpoints into `out_dir` when given.
    pub fn run(&mut self, data: &[TokenSequence], out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?)
            }
            None => None,
        };
        let mut records = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let rec = self.train_step(data)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", rec.log_line())?;
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && rec.step % every == 0 && rec.step < self.cfg.steps {
                    self.checkpoint().save(checkpoint_path(dir, rec.step))?;
                }
            }
            records.push(rec);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "final.aimc";

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.aimc"))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AIMC";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or sample: configs, step, weights, moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub weights: ModelWeights<f32>,
    pub optim: OptimState<f32>,
}

fn write_table(out: &mut Vec<u8>, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let n = u16::try_from(name.len()).map_err(|_| Error::format(format!("tensor name {name} too long")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::format(format!("tensor {name} rank too large")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::format(format!("tensor {name} extent too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_table(r: &mut &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = read_u32(r, "tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(r, &mut b2, "tensor name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, "tensor rank")?;
        let shape = (0..rank[0]).map(|_| read_u32(r, "tensor extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if r.len() < len * 4 {
            return Err(Error::format(format!("truncated file while reading tensor {name}")));
        }
        let (payload, rest) = r.split_at(len * 4);
        *r = rest;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

impl Checkpoint {
    fn header(&self) -> String {
        let run = RunConfig { model: self.model.clone(), train: self.train.clone(), ..RunConfig::default() };
        let mut text = run.to_text(&["model.", "train."]);
        text.push_str(&format!("{STEP_KEY} = {}\n", self.step));
        text
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        write_table(&mut out, &self.weights.named())?;
        let mut moments: Vec<(String, &Tensor<f32>)> =
            self.optim.m.named().into_iter().map(|(n, t)| (format!("m.{n}"), t)).collect();
        moments.extend(self.optim.v.named().into_iter().map(|(n, t)| (format!("v.{n}"), t)));
        write_table(&mut out, &moments)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r, "checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(&mut r, "config block length")? as usize;
        let mut hb = vec![0u8; hlen];
        read_exact(&mut r, &mut hb, "config block")?;
        let text = String::from_utf8(hb).map_err(|_| Error::format("config block is not UTF-8"))?;
        let mut kv = config::parse_kv(&text)?;
        let step: usize = kv
            .remove(STEP_KEY)
            .ok_or_else(|| Error::format(format!("config block lacks {STEP_KEY}")))?
            .parse()
            .map_err(|_| Error::format(format!("bad {STEP_KEY}")))?;
        let mut run = RunConfig::default();
        for (k, v) in &kv {
            if !(k.starts_with("model.") || k.starts_with("train.")) {
                return Err(Error::format(format!("unexpected key {k} in checkpoint")));
            }
            run.set(k, v)?;
        }
        let weights = ModelWeights::from_named(&run.model, read_table(&mut r)?)?;
        let moments = read_table(&mut r)?;
        if !r.is_empty() {
            return Err(Error::format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        let n = moments.len() / 2;
        if moments.len() % 2 != 0 {
            return Err(Error::format("optimizer table has an odd tensor count"));
        }
        let strip = |part: &[(String, Tensor<f32>)], prefix: &str| -> Result<Vec<(String, Tensor<f32>)>> {
            part.iter()
                .map(|(name, t)| {
                    name.strip_prefix(prefix)
                        .map(|s| (s.to_string(), t.clone()))
                        .ok_or_else(|| Error::format(format!("optimizer tensor {name} lacks prefix {prefix}")))
                })
                .collect()
        };
        let m = ModelWeights::from_named(&run.model, strip(&moments[..n], "m.")?)?;
        let v = ModelWeights::from_named(&run.model, strip(&moments[n..], "v.")?)?;
        Ok(Self { model: run.model, train: run.train, step, weights, optim: OptimState { m, v, step: step as u64 } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::new(self.model, self.weights)
    }
}

const STEP_KEY: &str = "checkpoint.step";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_rule() {
        let at = |b| effective_lr(&TrainConfig { batch_size: b, ..Default::default() });
        assert!((at(256).unwrap() - 1e-4).abs() < 1e-18);
        assert!((at(64).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(at(0).is_err());
        let over = TrainConfig { lr: Some(3e-3), ..Default::default() };
        assert_eq!(effective_lr(&over).unwrap(), 3e-3);
    }

    #[test]
    fn warmup_then_constant() {
        let cfg = TrainConfig { batch_size: 256, warmup: 4, ..Default::default() };
        let lrs: Vec<f64> = (0..6).map(|s| lr_at(&cfg, s).unwrap()).collect();
        assert_eq!(lrs[0], 1e-4 / 4.0);
        assert_eq!(lrs[3], 1e-4);
        assert_eq!(lrs[5], 1e-4);
    }

    #[test]
    fn adamw_hand_examples() {
        let nodecay = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let run = |w0: f64, g: f64, cfg: &TrainConfig| {
            let (mut w, mut m, mut v) = ([w0], [0.0], [0.0]);
            adamw_update(&mut w, &[g], &mut m, &mut v, 1, 0.1, cfg, true);
            w[0]
        };
        assert!((run(1.0, 1.0, &nodecay) - 0.9).abs() < 1e-8);
        assert_eq!(run(1.0, 0.0, &nodecay), 1.0);
        let wd = TrainConfig { weight_decay: 0.05, ..Default::default() };
        assert!((run(2.0, 0.0, &wd) - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn decay_exemptions() {
        for name in ["layers.0.in_proj", "layers.3.conv_w", "cond.w.1", "head", "layers.1.out_proj"] {
            assert!(decays(name), "{name}");
        }
        for name in ["token_embed", "class_embed", "pos_embed", "norm_f", "cond.b.0", "layers.0.a_log", "layers.0.d_skip"] {
            assert!(!decays(name), "{name}");
        }
    }

    #[test]
    fn metrics_lines_round_trip() {
        let r = StepRecord { step: 3, loss: 4.1588830833596715, lr: 2.5e-5 };
        assert_eq!(r.log_line(), "3\t4.1588830833596715\t0.000025");
        assert_eq!(parse_metrics(&r.log_line()).unwrap(), vec![r]);
        assert!(parse_metrics("1\t2").is_err());
    }
}
