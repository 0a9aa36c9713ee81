//! Autoregressive generation with classifier-free guidance.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DecodeState, Model};
use crate::tensor::{kernels, Element, Rng, Stream};
use crate::tokenizer::TokenGrid;

/// Where the guidance interpolation is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GuidanceSpace {
    /// `(1 − w)·ℓ_u + w·ℓ_c` on logits.
    #[default]
    Logit,
    /// `(1 − w)·p_u + w·p_c` on probabilities; only meaningful for `w ∈ [0, 1]`.
    Probability,
}

impl GuidanceSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceSpace::Logit => "logit",
            GuidanceSpace::Probability => "probability",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(GuidanceSpace::Logit),
            "probability" => Ok(GuidanceSpace::Probability),
            other => Err(Error::invalid(format!("unknown guidance space {other:?} (logit, probability)"))),
        }
    }
}

/// Guidance scale and sampling filters.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    /// Zero-temperature limit: argmax, lowest index on ties.
    pub argmax: bool,
    pub space: GuidanceSpace,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 2.0, temperature: 1.0, top_k: None, top_p: None, argmax: false, space: GuidanceSpace::Logit }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::invalid(format!("guidance scale must be finite and ≥ 0, got {}", self.w)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be finite and > 0, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::invalid("top_k must be ≥ 1"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("top_p must be in (0, 1], got {p}")));
            }
        }
        if self.space == GuidanceSpace::Probability && self.w > 1.0 {
            return Err(Error::invalid(format!("probability-space guidance needs w ≤ 1, got {}", self.w)));
        }
        Ok(())
    }

    /// Whether a second, unconditional stream is needed.
    pub fn guided(&self) -> bool {
        self.w != 1.0
    }
}

fn check_pair(uncond: &[f64], cond: &[f64]) -> Result<()> {
    if uncond.len() != cond.len() || cond.is_empty() {
        return Err(Error::shape("cfg_combine", format!("{} vs {} logits", uncond.len(), cond.len())));
    }
    if !kernels::all_finite(uncond) || !kernels::all_finite(cond) {
        return Err(Error::NonFinite { op: "cfg_combine" });
    }
    Ok(())
}

/// Logit-space guidance `(1 − w)·ℓ_u + w·ℓ_c`.
pub fn cfg_combine(uncond: &[f64], cond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_pair(uncond, cond)?;
    Ok(uncond.iter().zip(cond).map(|(&u, &c)| (1.0 - w) * u + w * c).collect())
}

/// Probability-space guidance, returned as log-probabilities.
pub fn cfg_combine_probability(uncond: &[f64], cond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_pair(uncond, cond)?;
    let (mut pu, mut pc) = (vec![0.0; uncond.len()], vec![0.0; cond.len()]);
    kernels::softmax_rows(uncond, uncond.len(), &mut pu);
    kernels::softmax_rows(cond, cond.len(), &mut pc);
    pu.iter()
        .zip(&pc)
        .map(|(&u, &c)| {
            let p = (1.0 - w) * u + w * c;
            if p < 0.0 {
                Err(Error::invalid(format!("probability-space guidance at w={w} produced a negative probability")))
            } else {
                Ok(p.ln())
            }
        })
        .collect()
}

/// Guidance in the configured space.
pub fn guide(uncond: &[f64], cond: &[f64], cfg: &GuidanceConfig) -> Result<Vec<f64>> {
    match cfg.space {
        GuidanceSpace::Logit => cfg_combine(uncond, cond, cfg.w),
        GuidanceSpace::Probability => cfg_combine_probability(uncond, cond, cfg.w),
    }
}

fn argmax(logits: &[f64]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v > f64::NEG_INFINITY && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Indices ordered by descending logit, lowest index first on ties.
fn ranked(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

/// Filtered, renormalized distribution after temperature, top-k and top-p.
pub fn sampling_distribution(logits: &[f64], cfg: &GuidanceConfig) -> Result<Vec<f64>> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite { op: "sample_token" });
    }
    let mut z: Vec<f64> = logits.iter().map(|&l| l / cfg.temperature).collect();
    if let Some(k) = cfg.top_k {
        for &i in ranked(&z).iter().skip(k) {
            z[i] = f64::NEG_INFINITY;
        }
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("every token is masked"));
    }
    let mut p: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    if let Some(top) = cfg.top_p {
        let mut cum = 0.0;
        let mut keep = vec![false; p.len()];
        for i in ranked(&p) {
            if p[i] == 0.0 {
                break;
            }
            keep[i] = true;
            cum += p[i];
            if cum >= top {
                break;
            }
        }
        p.iter_mut().zip(&keep).for_each(|(v, &k)| {
            if !k {
                *v = 0.0
            }
        });
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
    }
    Ok(p)
}

/// Draws one token index.
pub fn sample_token(logits: &[f64], cfg: &GuidanceConfig, rng: &mut Rng) -> Result<usize> {
    if cfg.argmax {
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "sample_token" });
        }
        return argmax(logits).ok_or_else(|| Error::invalid("every token is masked"));
    }
    let p = sampling_distribution(logits, cfg)?;
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        cum += pi;
        last = i;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(last)
}

/// One sample being decoded: a conditional stream and, when guided, a null stream.
#[derive(Debug)]
pub struct DecodeSession<T: Element> {
    streams: Vec<DecodeState<T>>,
    class_id: usize,
    cfg: GuidanceConfig,
    rng: Rng,
    tokens: Vec<usize>,
}

impl<T: Element> DecodeSession<T> {
    pub fn new(model: &Model<T>, class_id: usize, cfg: GuidanceConfig, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        if class_id >= model.config.n_classes {
            return Err(Error::invalid(format!("class {class_id} out of range for {} classes", model.config.n_classes)));
        }
        let mut streams = vec![model.start(class_id)?];
        if cfg.guided() {
            streams.push(model.start(model.config.null_class())?);
        }
        Ok(Self { streams, class_id, cfg, rng, tokens: Vec::with_capacity(model.config.seq_len) })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn cursor(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn n_streams(&self) -> usize {
        self.streams.len()
    }

    /// Scalars held across all streams; constant over the session.
    pub fn footprint(&self) -> usize {
        self.streams.iter().map(|s| s.footprint()).sum()
    }

    /// Guided logits for the next position.
    pub fn next_logits(&mut self, model: &Model<T>) -> Result<Vec<f64>> {
        if self.cursor() >= model.config.seq_len {
            return Err(Error::invalid("session already produced a full sequence"));
        }
        let prev = self.tokens.last().copied().unwrap_or(0);
        let prev = vec![prev; self.streams.len()];
        let logits: Vec<f64> = model.step_batch(&mut self.streams, &prev)?.iter().map(|v| v.as_f64()).collect();
        let v = model.config.vocab_size;
        if self.cfg.guided() {
            guide(&logits[v..], &logits[..v], &self.cfg)
        } else {
            Ok(logits)
        }
    }

    /// Samples and records the next token, feeding it to every stream.
    pub fn step(&mut self, model: &Model<T>) -> Result<usize> {
        let logits = self.next_logits(model)?;
        let tok = sample_token(&logits, &self.cfg, &mut self.rng)?;
        self.tokens.push(tok);
        Ok(tok)
    }

    pub fn run(mut self, model: &Model<T>) -> Result<Vec<usize>> {
        while self.cursor() < model.config.seq_len {
            self.step(model)?;
        }
        Ok(self.tokens)
    }
}

/// `n` sequences of class `class_id`; sample `i` draws from its own stream
/// derived from `(seed, i)`, so output is independent of worker count.
pub fn generate<T: Element>(
    model: &Model<T>,
    class_id: usize,
    n: usize,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let rng = Rng::derive(seed, Stream::Sampling, &[class_id as u64, i as u64]);
            DecodeSession::new(model, class_id, cfg.clone(), rng)?.run(model)
        })
        .collect()
}

/// Reshapes generated sequences into grids.
pub fn to_grids(seqs: &[Vec<usize>], height: usize, width: usize) -> Result<Vec<TokenGrid>> {
    seqs.iter().map(|s| TokenGrid::new(height, width, s.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_examples() {
        assert_eq!(cfg_combine(&[0.1], &[0.3], 2.0).unwrap(), vec![2.0 * 0.3 - 0.1]);
        assert!((cfg_combine(&[0.1], &[0.3], 2.0).unwrap()[0] - 0.5).abs() < 1e-15);
        let (u, c) = ([0.4, -1.0, 2.5], [1.5, 0.25, -3.0]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.to_vec());
        assert!(cfg_combine(&[f64::NAN], &[0.0], 1.0).is_err());
        assert!(cfg_combine(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn probability_space_endpoints() {
        let (u, c) = ([0.0, 1.0], [2.0, -1.0]);
        let g = cfg_combine_probability(&u, &c, 1.0).unwrap();
        let mut p = [0.0; 2];
        kernels::softmax_rows(&c, 2, &mut p);
        assert!((g[0] - p[0].ln()).abs() < 1e-12);
        assert!(cfg_combine_probability(&[0.0, 10.0], &[10.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn argmax_mode() {
        let cfg = GuidanceConfig { argmax: true, ..Default::default() };
        let mut rng = Rng::new(0, 0);
        assert_eq!(sample_token(&[0.0, 5.0, 1.0], &cfg, &mut rng).unwrap(), 1);
        assert_eq!(sample_token(&[2.0, 5.0, 5.0], &cfg, &mut rng).unwrap(), 1);
        assert!(sample_token(&[f64::NEG_INFINITY; 3], &cfg, &mut rng).is_err());
    }

    #[test]
    fn all_masked_is_an_error() {
        let cfg = GuidanceConfig::default();
        assert!(sample_token(&[f64::NEG_INFINITY; 4], &cfg, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn top_k_and_top_p_truncate() {
        let logits = [1.0, 3.0, 2.0, 0.0];
        let p = sampling_distribution(&logits, &GuidanceConfig { top_k: Some(2), ..Default::default() }).unwrap();
        assert_eq!((p[0], p[3]), (0.0, 0.0));
        assert!((p[1] + p[2] - 1.0).abs() < 1e-12);
        let p = sampling_distribution(&logits, &GuidanceConfig { top_p: Some(0.5), ..Default::default() }).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig { w: -0.1, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { top_p: Some(1.5), ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { top_k: Some(0), ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }
}
