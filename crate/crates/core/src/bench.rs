//! Decode-scaling benchmarks and desk-scale evaluation.
//!
//! Timing compares the constant-state Mamba decode path against a causal
//! attention stack whose key/value memory grows with every token. The
//! evaluation half trains small variants under one budget and reports NLL,
//! ramp column accuracy and class consistency.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{DecodeState, ModelConfig, TokenSequence};
use crate::sampler::{generate, to_grids, GuidanceConfig};
use crate::tensor::{kernels, Element, Rng, Stream, Tensor};
use crate::tokenizer::{column_accuracy, Dataset, HistogramClassifier, Split, SyntheticSpec};
use crate::train::{TrainConfig, Trainer};
use crate::Model;

/// Shape of the attention contrast model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub max_len: usize,
}

impl AttentionConfig {
    /// Same depth, width, vocabulary and length as `cfg`, `max(1, d/64)` heads.
    pub fn matching(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            n_heads: (cfg.d_model / 64).max(1),
            vocab_size: cfg.vocab_size,
            n_classes: cfg.n_classes,
            max_len: cfg.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "attention needs layers ≥ 1 and heads dividing the width; got {} layers, {} heads, width {}",
                self.n_layers, self.n_heads, self.d_model
            )));
        }
        if self.max_len == 0 || self.vocab_size < 2 || self.n_classes == 0 {
            return Err(Error::invalid("attention needs a positive length, vocab ≥ 2 and a class"));
        }
        Ok(())
    }
}

/// Pre-norm attention layer: `x + Wo·attn(rms(x)·g)`.
#[derive(Clone, Debug)]
pub struct AttentionLayer<T> {
    pub norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// Causal self-attention stack with learned positions and a class head token.
#[derive(Clone, Debug)]
pub struct AttentionBaseline<T> {
    pub config: AttentionConfig,
    pub token_embed: Tensor<T>,
    pub class_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<AttentionLayer<T>>,
    pub norm_f: Tensor<T>,
    pub head: Tensor<T>,
}

/// Per-stream key/value memory, one buffer pair per layer.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub class_row: usize,
    pub pos: usize,
}

impl<T> KvCache<T> {
    /// Scalars held; grows by `2·N·d` per token.
    pub fn footprint(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Vec::len).sum()
    }
}

/// Softmax attention of one query row over `n` cached rows, per head.
fn attend<T: Element>(q: &[T], keys: &[T], values: &[T], n_heads: usize, out: &mut [T]) {
    let d = q.len();
    let dh = d / n_heads;
    let n = keys.len() / d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut scores = vec![T::zero(); n];
    for h in 0..n_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|o| *o = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let p = p / total;
            for (o, &v) in oh.iter_mut().zip(&values[j * d + h * dh..j * d + (h + 1) * dh]) {
                *o += p * v;
            }
        }
    }
}

fn scaled_rms<T: Element>(x: &[T], gain: &[T]) -> Vec<T> {
    let d = gain.len();
    let mut h = vec![T::zero(); x.len()];
    kernels::rms_norm_rows(x, d, &mut h);
    for row in h.chunks_exact_mut(d) {
        row.iter_mut().zip(gain).for_each(|(a, &g)| *a *= g);
    }
    h
}

impl<T: Element> AttentionBaseline<T> {
    pub fn init(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let mut rng = Rng::derive(seed, Stream::Init, &[7]);
        let proj = 1.0 / (d as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| AttentionLayer {
                norm: Tensor::full(vec![d], T::one()),
                wq: Tensor::randn(vec![d, d], proj, &mut rng),
                wk: Tensor::randn(vec![d, d], proj, &mut rng),
                wv: Tensor::randn(vec![d, d], proj, &mut rng),
                wo: Tensor::randn(vec![d, d], proj / (2.0 * config.n_layers as f64).sqrt(), &mut rng),
            })
            .collect();
        Ok(Self {
            token_embed: Tensor::randn(vec![v, d], 0.02, &mut rng),
            class_embed: Tensor::randn(vec![config.n_classes + 1, d], 0.02, &mut rng),
            pos_embed: Tensor::randn(vec![config.max_len, d], 0.02, &mut rng),
            layers,
            norm_f: Tensor::full(vec![d], T::one()),
            head: Tensor::randn(vec![d, v], proj, &mut rng),
            config,
        })
    }

    pub fn start(&self, class_row: usize) -> Result<KvCache<T>> {
        if class_row > self.config.n_classes {
            return Err(Error::invalid(format!("class row {class_row} out of range")));
        }
        let n = self.config.n_layers;
        Ok(KvCache { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], class_row, pos: 0 })
    }

    fn input_row(&self, class_row: usize, pos: usize, prev: usize) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let src = if pos == 0 {
            &self.class_embed.data()[class_row * d..(class_row + 1) * d]
        } else {
            if prev >= self.config.vocab_size {
                return Err(Error::invalid(format!("token {prev} out of range for vocabulary {}", self.config.vocab_size)));
            }
            &self.token_embed.data()[prev * d..(prev + 1) * d]
        };
        let pe = &self.pos_embed.data()[pos * d..(pos + 1) * d];
        Ok(src.iter().zip(pe).map(|(&a, &b)| a + b).collect())
    }

    fn logits(&self, x: &[T], rows: usize) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let h = scaled_rms(x, self.norm_f.data());
        let mut out = vec![T::zero(); rows * v];
        kernels::gemm(&h, false, self.head.data(), false, &mut out, rows, d, v, false);
        out
    }

    /// Advances every stream one position; logits `[B, V]`.
    pub fn step_batch(&self, caches: &mut [KvCache<T>], prev: &[usize]) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let batch = caches.len();
        if batch == 0 || prev.len() != batch {
            return Err(Error::shape("attention_step", format!("{} tokens for {batch} streams", prev.len())));
        }
        let pos = caches[0].pos;
        if caches.iter().any(|c| c.pos != pos) {
            return Err(Error::invalid("decode streams must advance in lockstep"));
        }
        if pos >= self.config.max_len {
            return Err(Error::invalid(format!("decode position {pos} reached the sequence length")));
        }
        let mut x = Vec::with_capacity(batch * d);
        for (c, &tok) in caches.iter().zip(prev) {
            x.extend(self.input_row(c.class_row, pos, tok)?);
        }
        let mut q = vec![T::zero(); batch * d];
        let mut k = vec![T::zero(); batch * d];
        let mut v = vec![T::zero(); batch * d];
        let mut o = vec![T::zero(); batch * d];
        for (i, layer) in self.layers.iter().enumerate() {
            let h = scaled_rms(&x, layer.norm.data());
            kernels::gemm(&h, false, layer.wq.data(), false, &mut q, batch, d, d, false);
            kernels::gemm(&h, false, layer.wk.data(), false, &mut k, batch, d, d, false);
            kernels::gemm(&h, false, layer.wv.data(), false, &mut v, batch, d, d, false);
            for (s, cache) in caches.iter_mut().enumerate() {
                cache.keys[i].extend_from_slice(&k[s * d..(s + 1) * d]);
                cache.values[i].extend_from_slice(&v[s * d..(s + 1) * d]);
                attend(&q[s * d..(s + 1) * d], &cache.keys[i], &cache.values[i], self.config.n_heads, &mut o[s * d..(s + 1) * d]);
            }
            kernels::gemm(&o, false, layer.wo.data(), false, &mut x, batch, d, d, true);
        }
        let logits = self.logits(&x, batch);
        if !kernels::all_finite(&logits) {
            return Err(Error::NonFinite { op: "attention_step" });
        }
        caches.iter_mut().for_each(|c| c.pos += 1);
        Ok(logits)
    }

    /// Full-prefix logits `[T, V]`, recomputed without any cache.
    pub fn forward(&self, class_row: usize, context: &[usize]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let time = context.len() + 1;
        if time > self.config.max_len || class_row > self.config.n_classes {
            return Err(Error::shape("attention_forward", format!("{time} positions, class row {class_row}")));
        }
        let mut x = Vec::with_capacity(time * d);
        for t in 0..time {
            x.extend(self.input_row(class_row, t, if t == 0 { 0 } else { context[t - 1] })?);
        }
        let mut q = vec![T::zero(); time * d];
        let mut k = vec![T::zero(); time * d];
        let mut v = vec![T::zero(); time * d];
        let mut o = vec![T::zero(); time * d];
        for layer in &self.layers {
            let h = scaled_rms(&x, layer.norm.data());
            kernels::gemm(&h, false, layer.wq.data(), false, &mut q, time, d, d, false);
            kernels::gemm(&h, false, layer.wk.data(), false, &mut k, time, d, d, false);
            kernels::gemm(&h, false, layer.wv.data(), false, &mut v, time, d, d, false);
            for t in 0..time {
                let end = (t + 1) * d;
                attend(&q[t * d..end], &k[..end], &v[..end], self.config.n_heads, &mut o[t * d..end]);
            }
            kernels::gemm(&o, false, layer.wo.data(), false, &mut x, time, d, d, true);
        }
        Tensor::new(vec![time, self.config.vocab_size], self.logits(&x, time))
    }
}

/// Which decoder a benchmark drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Mamba,
    Attention,
}

impl BenchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchKind::Mamba => "mamba",
            BenchKind::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mamba" => Ok(BenchKind::Mamba),
            "attention" => Ok(BenchKind::Attention),
            other => Err(Error::invalid(format!("unknown bench kind {other:?}; expected mamba or attention"))),
        }
    }
}

/// Incremental decoders the timer can drive.
pub trait Decoder {
    type State: Clone;
    fn begin(&self, class_row: usize) -> Result<Self::State>;
    fn advance(&self, states: &mut [Self::State], prev: &[usize]) -> Result<Vec<f32>>;
    fn state_scalars(state: &Self::State) -> usize;
    fn vocab(&self) -> usize;
    fn n_classes(&self) -> usize;
}

impl Decoder for Model<f32> {
    type State = DecodeState<f32>;
    fn begin(&self, class_row: usize) -> Result<Self::State> {
        self.start(class_row)
    }
    fn advance(&self, states: &mut [Self::State], prev: &[usize]) -> Result<Vec<f32>> {
        self.step_batch(states, prev)
    }
    fn state_scalars(state: &Self::State) -> usize {
        state.footprint()
    }
    fn vocab(&self) -> usize {
        self.config.vocab_size
    }
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }
}

impl Decoder for AttentionBaseline<f32> {
    type State = KvCache<f32>;
    fn begin(&self, class_row: usize) -> Result<Self::State> {
        self.start(class_row)
    }
    fn advance(&self, states: &mut [Self::State], prev: &[usize]) -> Result<Vec<f32>> {
        self.step_batch(states, prev)
    }
    fn state_scalars(state: &Self::State) -> usize {
        state.footprint()
    }
    fn vocab(&self) -> usize {
        self.config.vocab_size
    }
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }
}

/// Lowest index of the largest entry.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Streams mid-decode with the tokens they feed next.
#[derive(Clone)]
struct Streams<S> {
    states: Vec<S>,
    prev: Vec<usize>,
}

fn begin_streams<D: Decoder>(dec: &D, batch: usize) -> Result<Streams<D::State>> {
    let states = (0..batch).map(|s| dec.begin(s % dec.n_classes())).collect::<Result<Vec<_>>>()?;
    Ok(Streams { states, prev: vec![0; batch] })
}

fn advance_greedy<D: Decoder>(dec: &D, s: &mut Streams<D::State>) -> Result<()> {
    let logits = dec.advance(&mut s.states, &s.prev)?;
    for (p, row) in s.prev.iter_mut().zip(logits.chunks_exact(dec.vocab())) {
        *p = argmax(row);
    }
    Ok(())
}

/// Greedy decode of `length` positions on `batch` streams; returns the
/// state scalars held at the end.
pub fn decode_run<D: Decoder>(dec: &D, length: usize, batch: usize) -> Result<usize> {
    let mut s = begin_streams(dec, batch)?;
    for _ in 0..length {
        advance_greedy(dec, &mut s)?;
    }
    Ok(s.states.iter().map(D::state_scalars).sum())
}

/// Timed single steps per length when measuring step latency.
pub const STEP_ROUNDS: usize = 64;

/// Median latency of the step at position `length − 1`, for every length.
///
/// Snapshots taken on one greedy run are stepped from fresh clones in
/// rotating order, so slow drift in machine speed hits all lengths alike.
pub fn step_latencies<D: Decoder>(dec: &D, lengths: &[usize], batch: usize) -> Result<Vec<f64>> {
    let mut live = begin_streams(dec, batch)?;
    let mut snaps = Vec::with_capacity(lengths.len());
    if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("lengths must be positive and strictly increasing, got {lengths:?}")));
    }
    let mut pos = 0;
    for &l in lengths {
        while pos + 1 < l {
            advance_greedy(dec, &mut live)?;
            pos += 1;
        }
        snaps.push(live.clone());
    }
    let mut times = vec![Vec::with_capacity(STEP_ROUNDS); lengths.len()];
    for round in 0..STEP_ROUNDS {
        for k in 0..lengths.len() {
            let i = (k + round) % lengths.len();
            let mut s = snaps[i].clone();
            let t0 = Instant::now();
            advance_greedy(dec, &mut s)?;
            times[i].push(t0.elapsed().as_secs_f64());
        }
    }
    Ok(times.iter().map(|t| median(t)).collect())
}

/// Decode benchmark settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub kind: BenchKind,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub state_dim: usize,
    pub vocab_size: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kind: BenchKind::Mamba,
            lengths: vec![64, 128, 256, 512, 1024, 2048],
            batch: 16,
            d_model: 32,
            n_layers: 2,
            state_dim: 16,
            vocab_size: 64,
            trials: 5,
            warmup: 2,
            seed: 0,
        }
    }
}

/// Shortest measurable trial.
pub const MIN_TRIAL_SECS: f64 = 1e-4;

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.lengths;
        if ls.len() < 4 || ls.windows(2).any(|w| w[0] >= w[1]) || ls[0] == 0 {
            return Err(Error::invalid(format!("need at least 4 strictly increasing positive lengths, got {ls:?}")));
        }
        if ls[ls.len() - 1] < 16 * ls[0] {
            return Err(Error::invalid(format!("lengths must span at least 16x, got {ls:?}")));
        }
        if self.batch == 0 || self.trials < 5 {
            return Err(Error::invalid(format!("need batch ≥ 1 and at least 5 trials, got {} and {}", self.batch, self.trials)));
        }
        Ok(())
    }

    /// The Mamba model shape the benchmark uses for either kind.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_groups: 1,
            state_dim: self.state_dim,
            vocab_size: self.vocab_size,
            seq_len: *self.lengths.last().unwrap_or(&1),
            ..ModelConfig::micro()
        }
    }
}

/// Timing at one decode length.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub length: usize,
    /// Median total decode time over the timed trials.
    pub median_secs: f64,
    pub trial_secs: Vec<f64>,
    /// Median latency of the single step at position `length − 1`.
    pub step_secs: f64,
    pub tokens_per_sec: f64,
    pub state_bytes: usize,
}

/// Report of one decode-scaling benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub config: Vec<(String, String)>,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of log time against log length.
    pub slope: f64,
    /// Per-step latency at the longest length over that at the shortest.
    pub step_ratio: f64,
    pub peak_state_bytes: usize,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Times greedy decoding at every length; `warmup` untimed trials precede
/// the timed ones.
pub fn decode_scaling_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let (report, heads) = match cfg.kind {
        BenchKind::Mamba => (time_decoder(&Model::<f32>::init(mcfg.clone(), cfg.seed)?, cfg)?, 0),
        BenchKind::Attention => {
            let acfg = AttentionConfig::matching(&mcfg);
            let heads = acfg.n_heads;
            (time_decoder(&AttentionBaseline::<f32>::init(acfg, cfg.seed)?, cfg)?, heads)
        }
    };
    let mut config = vec![
        ("kind".to_string(), cfg.kind.as_str().to_string()),
        ("n_layers".into(), cfg.n_layers.to_string()),
        ("d_model".into(), cfg.d_model.to_string()),
        ("vocab_size".into(), cfg.vocab_size.to_string()),
        ("batch".into(), cfg.batch.to_string()),
        ("trials".into(), cfg.trials.to_string()),
        ("warmup".into(), cfg.warmup.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("threads".into(), rayon::current_num_threads().to_string()),
        ("element".into(), f32::NAME.to_string()),
    ];
    match cfg.kind {
        BenchKind::Mamba => {
            config.push(("state_dim".into(), cfg.state_dim.to_string()));
            config.push(("expand".into(), mcfg.expand.to_string()));
        }
        BenchKind::Attention => config.push(("n_heads".into(), heads.to_string())),
    }
    Ok(BenchReport { config, ..report })
}

fn time_decoder<D: Decoder>(dec: &D, cfg: &BenchConfig) -> Result<BenchReport> {
    let mut points = Vec::with_capacity(cfg.lengths.len());
    for &length in &cfg.lengths {
        for _ in 0..cfg.warmup {
            decode_run(dec, length, cfg.batch)?;
        }
        let mut trial_secs = Vec::with_capacity(cfg.trials);
        let mut scalars = 0;
        for _ in 0..cfg.trials {
            let t0 = Instant::now();
            scalars = decode_run(dec, length, cfg.batch)?;
            trial_secs.push(t0.elapsed().as_secs_f64());
        }
        let median_secs = median(&trial_secs);
        if median_secs < MIN_TRIAL_SECS {
            return Err(Error::invalid(format!(
                "timer resolution insufficient: length {length} decodes in {median_secs:.2e} s; use longer lengths"
            )));
        }
        points.push(BenchPoint {
            length,
            median_secs,
            trial_secs,
            step_secs: 0.0,
            tokens_per_sec: (cfg.batch * length) as f64 / median_secs,
            state_bytes: scalars * std::mem::size_of::<f32>(),
        });
    }
    for (p, secs) in points.iter_mut().zip(step_latencies(dec, &cfg.lengths, cfg.batch)?) {
        p.step_secs = secs;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.length as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_secs).collect();
    Ok(BenchReport {
        kind: cfg.kind,
        config: Vec::new(),
        slope: loglog_slope(&xs, &ys),
        step_ratio: points[points.len() - 1].step_secs / points[0].step_secs,
        peak_state_bytes: points.iter().map(|p| p.state_bytes).max().unwrap_or(0),
        points,
    })
}

impl BenchReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("# decode scaling: {}\n", self.kind.as_str());
        for (k, v) in &self.config {
            let _ = writeln!(s, "#   {k} = {v}");
        }
        let _ = writeln!(s, "{:>8} {:>12} {:>12} {:>14} {:>12}", "length", "total_s", "step_us", "tokens_per_s", "state_bytes");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:>8} {:>12.6} {:>12.3} {:>14.1} {:>12}",
                p.length,
                p.median_secs,
                p.step_secs * 1e6,
                p.tokens_per_sec,
                p.state_bytes
            );
        }
        let _ = writeln!(s, "slope {:.4}  step_ratio {:.4}  peak_state_bytes {}", self.slope, self.step_ratio, self.peak_state_bytes);
        s
    }

    /// `variant,metric,value` rows, header included.
    pub fn to_csv(&self) -> String {
        let k = self.kind.as_str();
        let mut s = String::from("variant,metric,value\n");
        for (key, v) in &self.config {
            let _ = writeln!(s, "{k},config.{key},{v}");
        }
        for p in &self.points {
            let l = p.length;
            let _ = writeln!(s, "{k},total_s.{l},{}", p.median_secs);
            let _ = writeln!(s, "{k},step_s.{l},{}", p.step_secs);
            let _ = writeln!(s, "{k},tokens_per_s.{l},{}", p.tokens_per_sec);
            let _ = writeln!(s, "{k},state_bytes.{l},{}", p.state_bytes);
        }
        let _ = writeln!(s, "{k},slope,{}", self.slope);
        let _ = writeln!(s, "{k},step_ratio,{}", self.step_ratio);
        let _ = writeln!(s, "{k},peak_state_bytes,{}", self.peak_state_bytes);
        s
    }

    /// Whitespace-separated columns for gnuplot.
    pub fn to_gnuplot(&self) -> String {
        let mut s = format!("# {}: length total_s step_s tokens_per_s state_bytes\n", self.kind.as_str());
        for p in &self.points {
            let _ = writeln!(s, "{} {} {} {} {}", p.length, p.median_secs, p.step_secs, p.tokens_per_sec, p.state_bytes);
        }
        s
    }
}

/// Mean NLL over a split with the token count it covers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllReport {
    pub nll: f64,
    pub tokens: usize,
}

const EVAL_CHUNK: usize = 64;

/// Mean next-token NLL in nats per token.
pub fn nll_eval<T: Element>(model: &Model<T>, seqs: &[TokenSequence]) -> Result<NllReport> {
    if seqs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut total = 0.0;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        total += model.nll(chunk)? * chunk.len() as f64;
    }
    Ok(NllReport { nll: total / seqs.len() as f64, tokens: seqs.len() * model.config.seq_len })
}

/// Mean agreement between the requested class and the histogram classifier
/// over `n` samples per class.
pub fn class_consistency<T: Element>(
    model: &Model<T>,
    classifier: &HistogramClassifier,
    classes: &[usize],
    n: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<f64> {
    if classes.is_empty() || n == 0 {
        return Err(Error::invalid("class consistency needs at least one class and sample"));
    }
    let mut total = 0.0;
    for &c in classes {
        total += classifier.agreement(&generate(model, c, n, guidance, seed)?, c);
    }
    Ok(total / classes.len() as f64)
}

/// Classes whose pattern is a column ramp.
pub fn ramp_classes(spec: &SyntheticSpec) -> Vec<usize> {
    (0..spec.n_classes).filter(|&c| spec.pattern(c).is_ok_and(|p| p.is_column_ramp())).collect()
}

/// Column accuracy of sampled grids, averaged over the ramp classes.
pub fn sampled_column_accuracy<T: Element>(
    model: &Model<T>,
    spec: &SyntheticSpec,
    n: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<f64> {
    let ramps = ramp_classes(spec);
    if ramps.is_empty() {
        return Err(Error::invalid("dataset has no column-ramp class"));
    }
    let mut total = 0.0;
    for &c in &ramps {
        let grids = to_grids(&generate(model, c, n, guidance, seed)?, spec.grid_height, spec.grid_width)?;
        total += column_accuracy(&grids, spec, c)?;
    }
    Ok(total / ramps.len() as f64)
}

/// Trains `model_cfg` on the train split under `train`.
pub fn train_model(model_cfg: &ModelConfig, train: &TrainConfig, data: &Dataset) -> Result<Model<f32>> {
    let mut t = Trainer::new(model_cfg.clone(), train.clone())?;
    t.run(data.split(Split::Train), None)?;
    Ok(t.model)
}

/// Variant grid trained under one shared budget.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub pe: Vec<bool>,
    pub groups: Vec<usize>,
    pub cfg_weights: Vec<f64>,
    /// Samples per class for the sampled metrics.
    pub n_samples: usize,
    /// Sampling settings for column accuracy; `w` is replaced for the CFG sweep.
    pub sampling: GuidanceConfig,
}

impl AblationConfig {
    /// `{no-PE, PE} × {1, 2, 4, N}` over three seeds on a four-layer base.
    pub fn standard(train: TrainConfig) -> Self {
        let base = ModelConfig { n_layers: 4, ..ModelConfig::micro() };
        let mut groups = vec![1, 2, 4, base.n_layers];
        groups.dedup();
        Self {
            base,
            train,
            seeds: vec![0, 1, 2],
            pe: vec![false, true],
            groups,
            cfg_weights: vec![0.0, 1.0, 1.5, 2.0],
            n_samples: 16,
            sampling: GuidanceConfig { w: 1.0, ..GuidanceConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.pe.is_empty() || self.groups.is_empty() || self.n_samples == 0 {
            return Err(Error::invalid("ablation needs seeds, PE settings, group counts and samples"));
        }
        self.train.validate()?;
        for &g in &self.groups {
            ModelConfig { n_groups: g, ..self.base.clone() }.validate()?;
        }
        for &w in &self.cfg_weights {
            GuidanceConfig { w, ..self.sampling.clone() }.validate()?;
        }
        Ok(())
    }
}

/// One trained variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub use_pe: bool,
    pub n_groups: usize,
    pub seed: u64,
    pub params: usize,
    pub cond_params: usize,
    pub eval_nll: f64,
    pub column_accuracy: f64,
    /// `(w, class consistency)` per guidance weight.
    pub consistency: Vec<(f64, f64)>,
}

impl AblationRow {
    pub fn variant(&self) -> String {
        format!("{}-g{}-s{}", if self.use_pe { "pe" } else { "nope" }, self.n_groups, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub steps: usize,
    pub batch_size: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains every `(pe, groups, seed)` variant with the same budget and
/// evaluates NLL, ramp column accuracy and class consistency per `w`.
pub fn ablation_suite(cfg: &AblationConfig, data: &Dataset) -> Result<AblationTable> {
    cfg.validate()?;
    let classifier = HistogramClassifier::fit(data.split(Split::Train), data.spec.n_classes, data.spec.vocab_size())?;
    let classes: Vec<usize> = (0..data.spec.n_classes).collect();
    let mut rows = Vec::new();
    for &use_pe in &cfg.pe {
        for &n_groups in &cfg.groups {
            for &seed in &cfg.seeds {
                let mcfg = ModelConfig { use_pe, n_groups, ..cfg.base.clone() };
                let model = train_model(&mcfg, &TrainConfig { seed, ..cfg.train.clone() }, data)?;
                let eval_nll = nll_eval(&model, data.split(Split::Eval))?.nll;
                let column_accuracy = sampled_column_accuracy(&model, &data.spec, cfg.n_samples, &cfg.sampling, seed)?;
                let consistency = cfg
                    .cfg_weights
                    .iter()
                    .map(|&w| {
                        let g = GuidanceConfig { w, ..cfg.sampling.clone() };
                        Ok((w, class_consistency(&model, &classifier, &classes, cfg.n_samples, &g, seed)?))
                    })
                    .collect::<Result<_>>()?;
                rows.push(AblationRow {
                    use_pe,
                    n_groups,
                    seed,
                    params: mcfg.param_count()?,
                    cond_params: crate::conditioning::cond_param_count(&mcfg.group_spec()?),
                    eval_nll,
                    column_accuracy,
                    consistency,
                });
            }
        }
    }
    Ok(AblationTable { steps: cfg.train.steps, batch_size: cfg.train.batch_size, rows })
}

impl AblationTable {
    /// Median over seeds of `metric` for one `(pe, groups)` variant.
    pub fn median_of(&self, use_pe: bool, n_groups: usize, metric: impl Fn(&AblationRow) -> f64) -> f64 {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.use_pe == use_pe && r.n_groups == n_groups).map(metric).collect();
        median(&xs)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("# ablation: {} steps at batch {}\n", self.steps, self.batch_size);
        let ws: Vec<f64> = self.rows.first().map(|r| r.consistency.iter().map(|c| c.0).collect()).unwrap_or_default();
        let _ = write!(s, "{:<14} {:>8} {:>8} {:>10} {:>10}", "variant", "params", "cond", "eval_nll", "col_acc");
        for w in &ws {
            let _ = write!(s, " {:>9}", format!("cons@{w}"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<14} {:>8} {:>8} {:>10.4} {:>10.4}",
                r.variant(),
                r.params,
                r.cond_params,
                r.eval_nll,
                r.column_accuracy
            );
            for (_, c) in &r.consistency {
                let _ = write!(s, " {c:>9.4}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,value\n");
        for r in &self.rows {
            let v = r.variant();
            let _ = writeln!(s, "{v},params,{}", r.params);
            let _ = writeln!(s, "{v},cond_params,{}", r.cond_params);
            let _ = writeln!(s, "{v},eval_nll,{}", r.eval_nll);
            let _ = writeln!(s, "{v},column_accuracy,{}", r.column_accuracy);
            for (w, c) in &r.consistency {
                let _ = writeln!(s, "{v},consistency.w{w},{c}");
            }
        }
        s
    }
}

/// Eval NLL of one width and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub d_model: usize,
    pub seed: u64,
    pub params: usize,
    pub eval_nll: f64,
}

/// Trains each width under the same budget and seeds.
pub fn scaling_miniature(
    base: &ModelConfig,
    widths: &[usize],
    train: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
) -> Result<Vec<ScalingRow>> {
    if widths.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("scaling needs at least one width and seed"));
    }
    let mut rows = Vec::new();
    for &d_model in widths {
        let mcfg = ModelConfig { d_model, ..base.clone() };
        for &seed in seeds {
            let model = train_model(&mcfg, &TrainConfig { seed, ..train.clone() }, data)?;
            rows.push(ScalingRow { d_model, seed, params: mcfg.param_count()?, eval_nll: nll_eval(&model, data.split(Split::Eval))?.nll });
        }
    }
    Ok(rows)
}

/// `d_model params median_eval_nll` per width.
pub fn scaling_gnuplot(rows: &[ScalingRow]) -> String {
    let mut s = String::from("# d_model params median_eval_nll\n");
    let mut widths: Vec<usize> = rows.iter().map(|r| r.d_model).collect();
    widths.dedup();
    for d in widths {
        let xs: Vec<f64> = rows.iter().filter(|r| r.d_model == d).map(|r| r.eval_nll).collect();
        let params = rows.iter().find(|r| r.d_model == d).map_or(0, |r| r.params);
        let _ = writeln!(s, "{d} {params} {}", median(&xs));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let xs = [64.0, 128.0, 256.0, 512.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        assert!((loglog_slope(&xs, &lin) - 1.0).abs() < 1e-12);
        assert!((loglog_slope(&xs, &quad) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn bench_lengths_are_validated() {
        let short = BenchConfig { lengths: vec![64, 128, 256], ..BenchConfig::default() };
        assert!(short.validate().is_err());
        let narrow = BenchConfig { lengths: vec![64, 96, 128, 256], ..BenchConfig::default() };
        assert!(narrow.validate().is_err());
        let unordered = BenchConfig { lengths: vec![64, 32, 512, 2048], ..BenchConfig::default() };
        assert!(unordered.validate().is_err());
        assert!(BenchConfig { trials: 4, ..BenchConfig::default() }.validate().is_err());
        assert!(BenchConfig::default().validate().is_ok());
    }

    #[test]
    fn attention_heads_follow_width() {
        let a = AttentionConfig::matching(&ModelConfig { d_model: 256, ..ModelConfig::micro() });
        assert_eq!(a.n_heads, 4);
        assert_eq!(AttentionConfig::matching(&ModelConfig::micro()).n_heads, 1);
    }
}
