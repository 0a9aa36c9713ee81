//! Group-shared adaptive layer norm.
//!
//! Each layer `i` regresses `[α, β, γ] = Swish(c)·W_{g(i)} + b_i` from the
//! class embedding `c`, where the `G` matrices are shared by contiguous
//! groups of layers and every layer keeps its own bias. `G = 1` is the
//! single shared regressor and `G = N` gives every layer its own.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Rng, Tape, Tensor, Var};

/// Layer count, group count and embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub n_layers: usize,
    pub n_groups: usize,
    pub embed_dim: usize,
}

impl GroupSpec {
    pub fn new(n_layers: usize, n_groups: usize, embed_dim: usize) -> Result<Self> {
        if n_layers == 0 || embed_dim == 0 || n_groups == 0 || n_groups > n_layers {
            return Err(Error::invalid(format!(
                "need 1 ≤ groups ≤ layers and a positive width, got {n_groups} groups, {n_layers} layers, width {embed_dim}"
            )));
        }
        Ok(Self { n_layers, n_groups, embed_dim })
    }

    /// Contiguous balanced assignment `floor(i·G/N)`.
    pub fn assign_group(&self, layer: usize) -> usize {
        debug_assert!(layer < self.n_layers);
        layer * self.n_groups / self.n_layers
    }
}

/// `G·d·3d + N·3d`.
pub fn cond_param_count(spec: &GroupSpec) -> usize {
    let d3 = 3 * spec.embed_dim;
    spec.n_groups * spec.embed_dim * d3 + spec.n_layers * d3
}

/// Group matrices `w[j]: [d, 3d]` and layer biases `b[i]: [3d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondParams<P> {
    pub w: Vec<P>,
    pub b: Vec<P>,
}

pub type CondWeights<T> = CondParams<Tensor<T>>;

impl<P> CondParams<P> {
    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (j, w) in self.w.iter().enumerate() {
            out.push((format!("{prefix}.w.{j}"), w));
        }
        for (i, b) in self.b.iter().enumerate() {
            out.push((format!("{prefix}.b.{i}"), b));
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        for (j, w) in self.w.iter_mut().enumerate() {
            out.push((format!("{prefix}.w.{j}"), w));
        }
        for (i, b) in self.b.iter_mut().enumerate() {
            out.push((format!("{prefix}.b.{i}"), b));
        }
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<CondParams<Q>> {
        let w = self.w.iter().enumerate().map(|(j, w)| f(&format!("{prefix}.w.{j}"), w)).collect::<Result<_>>()?;
        let b = self.b.iter().enumerate().map(|(i, b)| f(&format!("{prefix}.b.{i}"), b)).collect::<Result<_>>()?;
        Ok(CondParams { w, b })
    }
}

/// Bias row giving `α = 1, β = 0, γ = 0`.
pub fn identity_bias<T: Element>(d: usize) -> Tensor<T> {
    let mut b = vec![T::zero(); 3 * d];
    b[..d].fill(T::one());
    Tensor::from_parts(vec![3 * d], b.into())
}

impl<T: Element> CondWeights<T> {
    /// `W = 0` and identity biases: every layer starts as an identity residual.
    pub fn init(spec: &GroupSpec) -> Self {
        let d = spec.embed_dim;
        Self {
            w: (0..spec.n_groups).map(|_| Tensor::zeros(vec![d, 3 * d])).collect(),
            b: (0..spec.n_layers).map(|_| identity_bias(d)).collect(),
        }
    }

    /// Gaussian matrices and perturbed biases, for tests that need the
    /// conditioning path to be non-trivial.
    pub fn random(spec: &GroupSpec, std: f64, rng: &mut Rng) -> Self {
        let d = spec.embed_dim;
        Self {
            w: (0..spec.n_groups).map(|_| Tensor::randn(vec![d, 3 * d], std, rng)).collect(),
            b: (0..spec.n_layers)
                .map(|_| {
                    let noise = Tensor::<T>::randn(vec![3 * d], std, rng);
                    let base = identity_bias::<T>(d);
                    let v = base.data().iter().zip(noise.data()).map(|(&a, &n)| a + n).collect();
                    Tensor::from_parts(vec![3 * d], std::sync::Arc::new(v))
                })
                .collect(),
        }
    }

    pub fn spec(&self) -> Result<GroupSpec> {
        let d = self.w.first().map(|w| w.shape()[0]).ok_or_else(|| Error::invalid("no group matrices"))?;
        GroupSpec::new(self.b.len(), self.w.len(), d)
    }
}

/// Scale, shift and gate for one layer, each of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation<T> {
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Element> Modulation<T> {
    pub fn identity(d: usize) -> Self {
        Self { alpha: vec![T::one(); d], beta: vec![T::zero(); d], gamma: vec![T::zero(); d] }
    }

    fn from_row(row: &[T]) -> Self {
        let d = row.len() / 3;
        Self { alpha: row[..d].to_vec(), beta: row[d..2 * d].to_vec(), gamma: row[2 * d..].to_vec() }
    }
}

fn regress<T: Element>(c: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Result<Modulation<T>> {
    let d = c.len();
    if w.shape() != [d, 3 * d] || b.shape() != [3 * d] {
        return Err(Error::shape(
            "regress_modulation",
            format!("embedding [{d}] with w {:?} b {:?}", w.shape(), b.shape()),
        ));
    }
    if !kernels::all_finite(c) {
        return Err(Error::NonFinite { op: "regress_modulation" });
    }
    let s: Vec<T> = c.iter().map(|&v| kernels::silu(v)).collect();
    let mut row = b.data().to_vec();
    kernels::gemm(&s, false, w.data(), false, &mut row, 1, d, 3 * d, true);
    Ok(Modulation::from_row(&row))
}

/// `split₃(Swish(c)·W_{g(layer)} + b_layer)` for one embedding `c: [d]`.
pub fn regress_modulation<T: Element>(c: &[T], weights: &CondWeights<T>, layer: usize) -> Result<Modulation<T>> {
    let spec = weights.spec()?;
    if layer >= spec.n_layers {
        return Err(Error::invalid(format!("layer {layer} out of range for {} layers", spec.n_layers)));
    }
    regress(c, &weights.w[spec.assign_group(layer)], &weights.b[layer])
}

/// Taped modulation for a batch of embeddings `c: [B, d]`; returns
/// `(α, β, γ)` each `[B, 1, d]`, ready to broadcast over time.
pub fn regress_modulation_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    c: Var<'t, T>,
    weights: &CondParams<Var<'t, T>>,
    spec: &GroupSpec,
    layer: usize,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let shape = c.shape();
    let (batch, d) = match shape.as_slice() {
        [b, d] if *d == spec.embed_dim => (*b, *d),
        s => return Err(Error::shape("regress_modulation", format!("embedding {s:?} for width {}", spec.embed_dim))),
    };
    let j = spec.assign_group(layer);
    let row = tape.add(tape.matmul(tape.silu(c)?, weights.w[j])?, weights.b[layer])?;
    let part = |k: usize| row.slice(1, k * d, d)?.reshape(&[batch, 1, d]);
    Ok((part(0)?, part(1)?, part(2)?))
}

/// Normalization applied before the modulated branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreNorm {
    LayerNorm,
    /// Skip normalization; used to probe the modulation arithmetic alone.
    Bypass,
}

/// `x + γ ⊙ F(α ⊙ norm(x) + β)` over rows of `x: [time, d]`.
pub fn modulate<T: Element>(
    x: &Tensor<T>,
    m: &Modulation<T>,
    f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    norm: PreNorm,
) -> Result<Tensor<T>> {
    let d = m.alpha.len();
    if x.shape().last() != Some(&d) || m.beta.len() != d || m.gamma.len() != d {
        return Err(Error::shape("modulate", format!("x {:?} with modulation width {d}", x.shape())));
    }
    let mut h = x.data().to_vec();
    if norm == PreNorm::LayerNorm {
        kernels::layer_norm_rows(x.data(), d, &mut h);
    }
    for row in h.chunks_exact_mut(d) {
        for ((v, &a), &b) in row.iter_mut().zip(&m.alpha).zip(&m.beta) {
            *v = a * *v + b;
        }
    }
    let fx = f(&Tensor::new(x.shape().to_vec(), h)?)?;
    if fx.shape() != x.shape() {
        return Err(Error::shape("modulate", format!("branch returned {:?} for {:?}", fx.shape(), x.shape())));
    }
    let mut out = x.data().to_vec();
    for (orow, frow) in out.chunks_exact_mut(d).zip(fx.data().chunks_exact(d)) {
        for ((o, &fv), &g) in orow.iter_mut().zip(frow).zip(&m.gamma) {
            *o += g * fv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Taped form of [`modulate`] with layer norm; `x: [B, T, d]`, modulation
/// `[B, 1, d]`.
pub fn modulate_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    (alpha, beta, gamma): (Var<'t, T>, Var<'t, T>, Var<'t, T>),
    f: impl FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let h = tape.add(tape.mul(alpha, x.layer_norm()?)?, beta)?;
    tape.add(x, tape.mul(gamma, f(h)?)?)
}

/// One regressor shared by every layer, with per-layer biases.
#[derive(Clone, Debug)]
pub struct AdaLnSingle<T> {
    pub w: Tensor<T>,
    pub b: Vec<Tensor<T>>,
}

impl<T: Element> AdaLnSingle<T> {
    pub fn modulation(&self, c: &[T], layer: usize) -> Result<Modulation<T>> {
        regress(c, &self.w, &self.b[layer])
    }
}

/// A separate regressor per layer.
#[derive(Clone, Debug)]
pub struct AdaLnVanilla<T> {
    pub w: Vec<Tensor<T>>,
    pub b: Vec<Tensor<T>>,
}

impl<T: Element> AdaLnVanilla<T> {
    pub fn modulation(&self, c: &[T], layer: usize) -> Result<Modulation<T>> {
        regress(c, &self.w[layer], &self.b[layer])
    }
}
