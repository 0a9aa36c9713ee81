//! Class-conditional autoregressive token model.
//!
//! The input sequence is `[c, q_1, …, q_{L−1}]`: the class embedding at the
//! head followed by image-token embeddings, each row `t` plus positional row
//! `t`. Row `t` predicts `q_{t+1}`. Every block is modulated by parameters
//! regressed once per pass from the class embedding.

use crate::block::{
    block_forward_taped, block_step_batch, init_state, BlockParams, BlockState, BlockWeights, MambaDims,
};
use crate::conditioning::{
    cond_param_count, regress_modulation, regress_modulation_taped, CondParams, CondWeights, GroupSpec, Modulation,
};
use crate::error::{Error, Result};
use crate::ssm::Discretization;
use crate::tensor::{kernels, Element, Rng, Stream, Tape, Tensor, Var};

/// How positions are encoded when positional encoding is on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PeKind {
    #[default]
    Learned,
    Sinusoidal,
}

impl PeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PeKind::Learned => "learned",
            PeKind::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PeKind::Learned),
            "sinusoidal" => Ok(PeKind::Sinusoidal),
            other => Err(Error::invalid(format!("unknown positional encoding {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_groups: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_k: usize,
    /// `None` means `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub use_pe: bool,
    pub pe_kind: PeKind,
    pub tie_head: bool,
    pub discretization: Discretization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ModelConfig {
    /// Two layers of width 32 over the 8×8 synthetic grids.
    pub fn micro() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_groups: 2,
            vocab_size: 64,
            n_classes: 10,
            seq_len: 64,
            state_dim: 16,
            expand: 2,
            conv_k: 4,
            dt_rank: None,
            use_pe: true,
            pe_kind: PeKind::Learned,
            tie_head: false,
            discretization: Discretization::Zoh,
        }
    }

    fn imagenet(n_layers: usize, d_model: usize, n_groups: usize) -> Self {
        Self { n_layers, d_model, n_groups, vocab_size: 16384, n_classes: 1000, seq_len: 256, ..Self::micro() }
    }

    /// 24 layers, width 768, 24 groups.
    pub fn aim_b() -> Self {
        Self::imagenet(24, 768, 24)
    }

    /// 48 layers, width 1024, 4 groups.
    pub fn aim_l() -> Self {
        Self::imagenet(48, 1024, 4)
    }

    /// 48 layers, width 1536, 4 groups.
    pub fn aim_xl() -> Self {
        Self::imagenet(48, 1536, 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.group_spec()?;
        self.mamba_dims()?;
        if self.seq_len == 0 || self.vocab_size < 2 || self.n_classes == 0 {
            return Err(Error::invalid(format!(
                "need seq_len ≥ 1, vocab ≥ 2 and at least one class; got {}, {}, {}",
                self.seq_len, self.vocab_size, self.n_classes
            )));
        }
        Ok(())
    }

    pub fn group_spec(&self) -> Result<GroupSpec> {
        GroupSpec::new(self.n_layers, self.n_groups, self.d_model)
    }

    pub fn mamba_dims(&self) -> Result<MambaDims> {
        MambaDims::new(self.d_model, self.expand, self.state_dim, self.conv_k, self.dt_rank)
    }

    /// Row of the class table holding the unconditional embedding.
    pub fn null_class(&self) -> usize {
        self.n_classes
    }

    fn learned_pe(&self) -> bool {
        self.use_pe && self.pe_kind == PeKind::Learned
    }

    /// Closed-form trainable parameter count:
    ///
    /// ```text
    /// V·d + (K+1)·d + [(L+1)·d] + N·block + G·d·3d + N·3d + d + [d·V]
    /// ```
    ///
    /// with the positional table present only for learned encodings and the
    /// head only when untied.
    pub fn param_count(&self) -> Result<usize> {
        let d = self.d_model;
        let block = self.mamba_dims()?.param_count();
        let mut total = self.vocab_size * d + (self.n_classes + 1) * d;
        if self.learned_pe() {
            total += (self.seq_len + 1) * d;
        }
        total += self.n_layers * block + cond_param_count(&self.group_spec()?) + d;
        if !self.tie_head {
            total += d * self.vocab_size;
        }
        Ok(total)
    }
}

/// All learned parameters; `P` is a tensor or a tape variable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    /// `[V, d]`
    pub token_embed: P,
    /// `[K + 1, d]`; row `K` is the null class.
    pub class_embed: P,
    /// `[L + 1, d]`, present for learned positional encoding.
    pub pos_embed: Option<P>,
    pub layers: Vec<BlockParams<P>>,
    pub cond: CondParams<P>,
    /// Final RMS-norm gain `[d]`.
    pub norm_f: P,
    /// `[d, V]`, absent when tied to the token table.
    pub head: Option<P>,
}

pub type ModelWeights<T> = ModelParams<Tensor<T>>;

impl<P> ModelParams<P> {
    /// Every parameter with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("token_embed".to_string(), &self.token_embed), ("class_embed".to_string(), &self.class_embed)];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("layers.{i}"), &mut out);
        }
        self.cond.named("cond", &mut out);
        out.push(("norm_f".into(), &self.norm_f));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out: Vec<(String, &mut P)> =
            vec![("token_embed".to_string(), &mut self.token_embed), ("class_embed".to_string(), &mut self.class_embed)];
        if let Some(p) = &mut self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.named_mut(&format!("layers.{i}"), &mut out);
        }
        self.cond.named_mut("cond", &mut out);
        out.push(("norm_f".into(), &mut self.norm_f));
        if let Some(h) = &mut self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&str, &P) -> Result<Q>) -> Result<ModelParams<Q>> {
        let f = &mut f;
        Ok(ModelParams {
            token_embed: f("token_embed", &self.token_embed)?,
            class_embed: f("class_embed", &self.class_embed)?,
            pos_embed: self.pos_embed.as_ref().map(|p| f("pos_embed", p)).transpose()?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("layers.{i}"), f))
                .collect::<Result<_>>()?,
            cond: self.cond.try_map("cond", f)?,
            norm_f: f("norm_f", &self.norm_f)?,
            head: self.head.as_ref().map(|h| f("head", h)).transpose()?,
        })
    }
}

/// Rows `[p, 2i] = sin(p / 10000^{2i/d})`, `[p, 2i+1] = cos(…)`.
pub fn sinusoidal_table<T: Element>(rows: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![rows, d], |idx| sinusoidal_value(idx / d, idx % d, d)).expect("positive extents")
}

fn sinusoidal_value<T: Element>(pos: usize, j: usize, d: usize) -> T {
    let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
    let p = pos as f64;
    T::of(if j.is_multiple_of(2) { (p * freq).sin() } else { (p * freq).cos() })
}

impl ModelParams<()> {
    /// The tree structure `cfg` implies, without storage.
    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let block = BlockParams {
            in_proj: (),
            conv_w: (),
            conv_b: (),
            x_proj: (),
            dt_proj: (),
            dt_bias: (),
            a_log: (),
            d_skip: (),
            out_proj: (),
        };
        Ok(ModelParams {
            token_embed: (),
            class_embed: (),
            pos_embed: cfg.learned_pe().then_some(()),
            layers: vec![block; cfg.n_layers],
            cond: CondParams { w: vec![(); cfg.n_groups], b: vec![(); cfg.n_layers] },
            norm_f: (),
            head: (!cfg.tie_head).then_some(()),
        })
    }
}

impl<T: Element> ModelWeights<T> {
    /// Gaussian tables (std 0.02), native block init, zero conditioning
    /// matrices with identity biases, unit norm gain.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dims = cfg.mamba_dims()?;
        let mut rng = Rng::derive(seed, Stream::Init, &[0]);
        let token_embed = Tensor::randn(vec![cfg.vocab_size, d], 0.02, &mut rng);
        let class_embed = Tensor::randn(vec![cfg.n_classes + 1, d], 0.02, &mut rng);
        let pos_embed = cfg.learned_pe().then(|| Tensor::randn(vec![cfg.seq_len + 1, d], 0.02, &mut rng));
        let layers = (0..cfg.n_layers)
            .map(|i| BlockWeights::init(&dims, &mut Rng::derive(seed, Stream::Init, &[1, i as u64])))
            .collect();
        let head = (!cfg.tie_head).then(|| Tensor::randn(vec![d, cfg.vocab_size], 0.02, &mut rng));
        Ok(Self {
            token_embed,
            class_embed,
            pos_embed,
            layers,
            cond: CondWeights::init(&cfg.group_spec()?),
            norm_f: Tensor::full(vec![d], T::one()),
            head,
        })
    }

    /// Checks every tensor against `cfg` and returns the expected census.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelWeights::<T>::shapes(cfg)?;
        let ours = self.named();
        if ours.len() != reference.len() {
            return Err(Error::invalid(format!("{} tensors, config expects {}", ours.len(), reference.len())));
        }
        for ((name, t), (rname, shape)) in ours.iter().zip(&reference) {
            if name != rname || t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "tensor {name} {:?} does not match config ({rname} {shape:?})",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Names and shapes the config implies, in [`ModelParams::named`] order.
    pub fn shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        cfg.validate()?;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let dims = cfg.mamba_dims()?;
        let MambaDims { d_inner: di, state: n, conv_k: k, dt_rank: r, .. } = dims;
        let block = [
            ("in_proj", vec![d, 2 * di]),
            ("conv_w", vec![di, k]),
            ("conv_b", vec![di]),
            ("x_proj", vec![di, r + 2 * n]),
            ("dt_proj", vec![r, di]),
            ("dt_bias", vec![di]),
            ("a_log", vec![di, n]),
            ("d_skip", vec![di]),
            ("out_proj", vec![di, d]),
        ];
        let mut out = vec![("token_embed".to_string(), vec![v, d]), ("class_embed".into(), vec![cfg.n_classes + 1, d])];
        if cfg.learned_pe() {
            out.push(("pos_embed".into(), vec![cfg.seq_len + 1, d]));
        }
        for i in 0..cfg.n_layers {
            for (name, s) in &block {
                out.push((format!("layers.{i}.{name}"), s.clone()));
            }
        }
        for j in 0..cfg.n_groups {
            out.push((format!("cond.w.{j}"), vec![d, 3 * d]));
        }
        for i in 0..cfg.n_layers {
            out.push((format!("cond.b.{i}"), vec![3 * d]));
        }
        out.push(("norm_f".into(), vec![d]));
        if !cfg.tie_head {
            out.push(("head".into(), vec![d, v]));
        }
        Ok(out)
    }

    /// Rebuilds a tree from `(name, tensor)` pairs in [`ModelParams::named`]
    /// order, checking names and shapes against `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let shapes = ModelWeights::<T>::shapes(cfg)?;
        if tensors.len() != shapes.len() {
            return Err(Error::invalid(format!("{} tensors, config expects {}", tensors.len(), shapes.len())));
        }
        let mut it = tensors.into_iter().zip(shapes);
        ModelParams::skeleton(cfg)?.try_map(|_, _| {
            let ((name, t), (want, shape)) = it.next().expect("lengths checked");
            if name != want || t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!("tensor {name} {:?} does not match config ({want} {shape:?})", t.shape())));
            }
            Ok(t)
        })
    }

    pub fn cast<U: Element>(&self) -> ModelWeights<U> {
        self.try_map(|_, t| Ok(t.cast::<U>())).expect("cast is infallible")
    }
}

/// One training or evaluation example: a class (or the null class) and
/// exactly `L` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub class_id: Option<usize>,
    pub tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.len() != cfg.seq_len {
            return Err(Error::invalid(format!("sequence has {} tokens, expected {}", self.tokens.len(), cfg.seq_len)));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token {bad} out of range for vocabulary {}", cfg.vocab_size)));
        }
        if let Some(c) = self.class_id.filter(|&c| c >= cfg.n_classes) {
            return Err(Error::invalid(format!("class {c} out of range for {} classes", cfg.n_classes)));
        }
        Ok(())
    }

    /// Class-table row: the class, or the null row when absent.
    pub fn class_row(&self, cfg: &ModelConfig) -> usize {
        self.class_id.unwrap_or(cfg.null_class())
    }
}

/// Class-table row after dropout: the null row with probability `p`.
pub fn class_row_with_dropout(seq: &TokenSequence, cfg: &ModelConfig, p: f64, rng: &mut Rng) -> usize {
    if rng.bernoulli(p) {
        cfg.null_class()
    } else {
        seq.class_row(cfg)
    }
}

/// A bound model: configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
}

/// Taped inputs `[B, T, d]` and class embeddings `[B, d]`.
pub fn embed_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    p: &ModelParams<Var<'t, T>>,
    cfg: &ModelConfig,
    classes: &[usize],
    context: &[usize],
    time: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (batch, d) = (classes.len(), cfg.d_model);
    if batch == 0 || time == 0 || time > cfg.seq_len || context.len() != batch * (time - 1) {
        return Err(Error::shape(
            "embed_inputs",
            format!("{batch} classes, {} context tokens, time {time} (max {})", context.len(), cfg.seq_len),
        ));
    }
    let c = tape.embedding(p.class_embed, classes)?;
    let head = c.reshape(&[batch, 1, d])?;
    let mut x = if time > 1 {
        let toks = tape.embedding(p.token_embed, context)?.reshape(&[batch, time - 1, d])?;
        tape.concat(&[head, toks], 1)?
    } else {
        head
    };
    if cfg.use_pe {
        let pe = match (cfg.pe_kind, p.pos_embed) {
            (PeKind::Learned, Some(table)) => table.slice(0, 0, time)?,
            (PeKind::Learned, None) => return Err(Error::invalid("learned positional table missing")),
            (PeKind::Sinusoidal, _) => tape.constant(&sinusoidal_table(time, d)),
        };
        x = x.add(pe)?;
    }
    Ok((x, c))
}

/// Taped logits `[B, time, V]`; `context` holds the `time − 1` preceding
/// tokens of every sequence, row-major.
pub fn forward_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    p: &ModelParams<Var<'t, T>>,
    cfg: &ModelConfig,
    classes: &[usize],
    context: &[usize],
    time: usize,
) -> Result<Var<'t, T>> {
    let dims = cfg.mamba_dims()?;
    let spec = cfg.group_spec()?;
    let (mut x, c) = embed_taped(tape, p, cfg, classes, context, time)?;
    for (i, layer) in p.layers.iter().enumerate() {
        let m = regress_modulation_taped(tape, c, &p.cond, &spec, i)?;
        x = block_forward_taped(tape, x, layer, m, &dims, cfg.discretization)?;
    }
    let h = x.rms_norm()?.mul(p.norm_f)?;
    match p.head {
        Some(head) => h.matmul(head),
        None => h.matmul(tape.transpose(p.token_embed)?),
    }
}

/// Mean next-token NLL (nats) of a batch of full sequences on the tape.
pub fn nll_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    p: &ModelParams<Var<'t, T>>,
    cfg: &ModelConfig,
    classes: &[usize],
    tokens: &[usize],
) -> Result<Var<'t, T>> {
    let l = cfg.seq_len;
    if tokens.len() != classes.len() * l {
        return Err(Error::shape("nll_loss", format!("{} tokens for {} sequences of {l}", tokens.len(), classes.len())));
    }
    let context: Vec<usize> = tokens.chunks_exact(l).flat_map(|s| s[..l - 1].iter().copied()).collect();
    let logits = forward_taped(tape, p, cfg, classes, &context, l)?;
    tape.cross_entropy(logits, tokens)
}

/// Mean over rows of `−log softmax(logits)[target]`; `logits: [.., V]`.
pub fn nll_loss<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let v = *logits.shape().last().ok_or_else(|| Error::shape("nll_loss", "rank 0"))?;
    if logits.len() / v != targets.len() {
        return Err(Error::shape("nll_loss", format!("logits {:?}, {} targets", logits.shape(), targets.len())));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks_exact(v).zip(targets) {
        if t >= v {
            return Err(Error::invalid(format!("target {t} out of range for vocabulary {v}")));
        }
        total += (kernels::logsumexp(row) - row[t]).as_f64();
    }
    Ok(total / targets.len() as f64)
}

/// Incremental decode state of one stream.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    pub blocks: Vec<BlockState<T>>,
    pub mods: Vec<Modulation<T>>,
    pub class_row: usize,
    pub pos: usize,
}

impl<T: Element> DecodeState<T> {
    /// Scalars held by the per-layer caches.
    pub fn footprint(&self) -> usize {
        self.blocks.iter().map(|b| b.footprint()).sum()
    }
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Input rows `[L, d]` of the teacher-forcing layout for one sequence.
    pub fn embed_inputs(&self, seq: &TokenSequence, rng: &mut Rng, class_dropout: f64) -> Result<Tensor<T>> {
        seq.validate(&self.config)?;
        let row = class_row_with_dropout(seq, &self.config, class_dropout, rng);
        let l = self.config.seq_len;
        let tape = Tape::new();
        let p = self.weights.try_map(|_, t| Ok(tape.constant(t)))?;
        let (x, _) = embed_taped(&tape, &p, &self.config, &[row], &seq.tokens[..l - 1], l)?;
        x.value().reshape(vec![l, self.config.d_model])
    }

    /// Logits `[B, time, V]` for `B` prefixes of equal length `time − 1`.
    pub fn forward_batch(&self, classes: &[usize], context: &[usize], time: usize) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.weights.try_map(|_, t| Ok(tape.constant(t)))?;
        Ok(forward_taped(&tape, &p, &self.config, classes, context, time)?.value())
    }

    /// Logits `[T, V]` given a class row and the `T − 1` preceding tokens.
    pub fn forward(&self, class_row: usize, context: &[usize]) -> Result<Tensor<T>> {
        let time = context.len() + 1;
        let out = self.forward_batch(&[class_row], context, time)?;
        out.reshape(vec![time, self.config.vocab_size])
    }

    /// Mean NLL of full sequences.
    pub fn nll(&self, seqs: &[TokenSequence]) -> Result<f64> {
        let classes: Vec<usize> = seqs.iter().map(|s| s.class_row(&self.config)).collect();
        let mut tokens = Vec::with_capacity(seqs.len() * self.config.seq_len);
        for s in seqs {
            s.validate(&self.config)?;
            tokens.extend_from_slice(&s.tokens);
        }
        let tape = Tape::new();
        let p = self.weights.try_map(|_, t| Ok(tape.constant(t)))?;
        nll_taped(&tape, &p, &self.config, &classes, &tokens)?.value().item().map(|v| v.as_f64())
    }

    pub fn param_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Fresh decode state for one stream.
    pub fn start(&self, class_row: usize) -> Result<DecodeState<T>> {
        if class_row > self.config.n_classes {
            return Err(Error::invalid(format!("class row {class_row} out of range")));
        }
        let dims = self.config.mamba_dims()?;
        let d = self.config.d_model;
        let c = &self.weights.class_embed.data()[class_row * d..(class_row + 1) * d];
        let mods = (0..self.config.n_layers)
            .map(|i| regress_modulation(c, &self.weights.cond, i))
            .collect::<Result<_>>()?;
        Ok(DecodeState { blocks: (0..self.config.n_layers).map(|_| init_state(&dims)).collect(), mods, class_row, pos: 0 })
    }

    /// Advances every stream by one position and returns logits `[B, V]`,
    /// row `s` predicting token `pos + 1` of stream `s`.
    ///
    /// `prev` supplies the token each stream emitted last; it is ignored at
    /// position 0, where the class embedding is fed.
    pub fn step_batch(&self, states: &mut [DecodeState<T>], prev: &[usize]) -> Result<Vec<T>> {
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let batch = states.len();
        if batch == 0 || prev.len() != batch {
            return Err(Error::shape("decode_step", format!("{} tokens for {batch} streams", prev.len())));
        }
        let pos = states[0].pos;
        if states.iter().any(|s| s.pos != pos) {
            return Err(Error::invalid("decode streams must advance in lockstep"));
        }
        if pos >= cfg.seq_len {
            return Err(Error::invalid(format!("decode position {pos} reached the sequence length")));
        }
        let mut x = Vec::with_capacity(batch * d);
        for (s, &tok) in states.iter().zip(prev) {
            if pos == 0 {
                x.extend_from_slice(&self.weights.class_embed.data()[s.class_row * d..(s.class_row + 1) * d]);
            } else {
                if tok >= v {
                    return Err(Error::invalid(format!("token {tok} out of range for vocabulary {v}")));
                }
                x.extend_from_slice(&self.weights.token_embed.data()[tok * d..(tok + 1) * d]);
            }
        }
        if cfg.use_pe {
            let row: Vec<T> = match (&self.weights.pos_embed, cfg.pe_kind) {
                (Some(t), PeKind::Learned) => t.data()[pos * d..(pos + 1) * d].to_vec(),
                (_, PeKind::Sinusoidal) => (0..d).map(|j| sinusoidal_value(pos, j, d)).collect(),
                (None, PeKind::Learned) => return Err(Error::invalid("learned positional table missing")),
            };
            for xr in x.chunks_exact_mut(d) {
                for (a, &b) in xr.iter_mut().zip(&row) {
                    *a += b;
                }
            }
        }
        let dims = cfg.mamba_dims()?;
        for (i, w) in self.weights.layers.iter().enumerate() {
            let mut layer_states: Vec<BlockState<T>> =
                states.iter_mut().map(|s| std::mem::replace(&mut s.blocks[i], init_state(&dims))).collect();
            let mods: Vec<&Modulation<T>> = states.iter().map(|s| &s.mods[i]).collect();
            let out = block_step_batch(&x, &mut layer_states, w, &mods, &dims, cfg.discretization);
            for (s, ls) in states.iter_mut().zip(layer_states) {
                s.blocks[i] = ls;
            }
            x = out?;
        }
        let mut h = vec![T::zero(); x.len()];
        kernels::rms_norm_rows(&x, d, &mut h);
        for row in h.chunks_exact_mut(d) {
            for (a, &g) in row.iter_mut().zip(self.weights.norm_f.data()) {
                *a *= g;
            }
        }
        let mut logits = vec![T::zero(); batch * v];
        match &self.weights.head {
            Some(head) => kernels::gemm(&h, false, head.data(), false, &mut logits, batch, d, v, false),
            None => kernels::gemm(&h, false, self.weights.token_embed.data(), true, &mut logits, batch, d, v, false),
        }
        if !kernels::all_finite(&logits) {
            return Err(Error::NonFinite { op: "decode_step" });
        }
        for s in states.iter_mut() {
            s.pos += 1;
        }
        Ok(logits)
    }

    /// Single-stream convenience over [`Model::step_batch`].
    pub fn step(&self, state: &mut DecodeState<T>, prev: usize) -> Result<Vec<T>> {
        self.step_batch(std::slice::from_mut(state), &[prev])
    }

    /// Replaces conditioning with random matrices; for tests needing it active.
    pub fn randomize_conditioning(&mut self, std: f64, seed: u64) -> Result<()> {
        let spec = self.config.group_spec()?;
        self.weights.cond = CondWeights::random(&spec, std, &mut Rng::derive(seed, Stream::Init, &[2]));
        Ok(())
    }
}

impl<T: Element> Model<T> {
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { config: self.config.clone(), weights: self.weights.cast() }
    }
}
