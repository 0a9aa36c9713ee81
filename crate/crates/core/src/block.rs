//! Native Mamba mixer wrapped by group-adaptive layer norm.
//!
//! ```text
//! (main, gate) = in_proj(x)
//! u            = SiLU(conv_causal(main))
//! (dt, B, C)   = x_proj(u)
//! Δ            = softplus(dt_proj(dt) + dt_bias)
//! y            = (scan(u; Δ, −exp(A_log), B, C) + D⊙u) ⊙ SiLU(gate)
//! F(x)         = out_proj(y)
//! ```

use crate::conditioning::{modulate_taped, Modulation};
use crate::error::{Error, Result};
use crate::ssm::{selective_step, Discretization, ScanState};
use crate::tensor::{kernels, Element, Rng, Tape, Tensor, Var};

/// Mixer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub state: usize,
    pub conv_k: usize,
    pub dt_rank: usize,
}

impl MambaDims {
    /// `dt_rank` defaults to `ceil(d_model / 16)`.
    pub fn new(d_model: usize, expand: usize, state: usize, conv_k: usize, dt_rank: Option<usize>) -> Result<Self> {
        let dims = Self {
            d_model,
            d_inner: expand * d_model,
            state,
            conv_k,
            dt_rank: dt_rank.unwrap_or_else(|| d_model.div_ceil(16)),
        };
        if [dims.d_model, dims.d_inner, dims.state, dims.conv_k, dims.dt_rank].contains(&0) {
            return Err(Error::invalid(format!("mixer widths must be positive: {dims:?}")));
        }
        Ok(dims)
    }

    /// Matches the tensor census of [`BlockWeights`].
    pub fn param_count(&self) -> usize {
        let (d, di, n, k, r) = (self.d_model, self.d_inner, self.state, self.conv_k, self.dt_rank);
        d * 2 * di + di * k + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d
    }
}

/// One block's parameters; `P` is a tensor or a tape variable.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    /// `[d, 2·d_inner]`
    pub in_proj: P,
    /// `[d_inner, k]`
    pub conv_w: P,
    /// `[d_inner]`
    pub conv_b: P,
    /// `[d_inner, dt_rank + 2·state]`
    pub x_proj: P,
    /// `[dt_rank, d_inner]`
    pub dt_proj: P,
    /// `[d_inner]`
    pub dt_bias: P,
    /// `[d_inner, state]`
    pub a_log: P,
    /// `[d_inner]`
    pub d_skip: P,
    /// `[d_inner, d]`
    pub out_proj: P,
}

pub type BlockWeights<T> = BlockParams<Tensor<T>>;

const BLOCK_FIELDS: [&str; 9] =
    ["in_proj", "conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "a_log", "d_skip", "out_proj"];

impl<P> BlockParams<P> {
    fn fields(&self) -> [&P; 9] {
        [
            &self.in_proj,
            &self.conv_w,
            &self.conv_b,
            &self.x_proj,
            &self.dt_proj,
            &self.dt_bias,
            &self.a_log,
            &self.d_skip,
            &self.out_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut P; 9] {
        [
            &mut self.in_proj,
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.x_proj,
            &mut self.dt_proj,
            &mut self.dt_bias,
            &mut self.a_log,
            &mut self.d_skip,
            &mut self.out_proj,
        ]
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (name, p) in BLOCK_FIELDS.iter().zip(self.fields()) {
            out.push((format!("{prefix}.{name}"), p));
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        for (name, p) in BLOCK_FIELDS.iter().zip(self.fields_mut()) {
            out.push((format!("{prefix}.{name}"), p));
        }
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<BlockParams<Q>> {
        let mut g = |name: &str, p: &P| f(&format!("{prefix}.{name}"), p);
        Ok(BlockParams {
            in_proj: g("in_proj", &self.in_proj)?,
            conv_w: g("conv_w", &self.conv_w)?,
            conv_b: g("conv_b", &self.conv_b)?,
            x_proj: g("x_proj", &self.x_proj)?,
            dt_proj: g("dt_proj", &self.dt_proj)?,
            dt_bias: g("dt_bias", &self.dt_bias)?,
            a_log: g("a_log", &self.a_log)?,
            d_skip: g("d_skip", &self.d_skip)?,
            out_proj: g("out_proj", &self.out_proj)?,
        })
    }
}

fn linear_init<T: Element>(fan_in: usize, shape: Vec<usize>, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl<T: Element> BlockWeights<T> {
    /// Native Mamba initialization: `A_log[c, n] = ln(n + 1)`, `D = 1`,
    /// and `dt_bias` chosen so `softplus(dt_bias)` is log-uniform on
    /// `[1e-3, 1e-1]`.
    pub fn init(dims: &MambaDims, rng: &mut Rng) -> Self {
        let MambaDims { d_model: d, d_inner: di, state: n, conv_k: k, dt_rank: r } = *dims;
        let dt_std = 1.0 / (r as f64).sqrt();
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias = (0..di).map(|_| T::of(kernels::softplus_inv((lo + (hi - lo) * rng.uniform()).exp()))).collect();
        Self {
            in_proj: linear_init(d, vec![d, 2 * di], rng),
            conv_w: linear_init(k, vec![di, k], rng),
            conv_b: linear_init(k, vec![di], rng),
            x_proj: linear_init(di, vec![di, r + 2 * n], rng),
            dt_proj: Tensor::uniform(vec![r, di], -dt_std, dt_std, rng),
            dt_bias: Tensor::from_parts(vec![di], std::sync::Arc::new(dt_bias)),
            a_log: Tensor::from_fn(vec![di, n], |i| T::of(((i % n) + 1) as f64).ln()).expect("positive extents"),
            d_skip: Tensor::full(vec![di], T::one()),
            out_proj: linear_init(di, vec![di, d], rng),
        }
    }

    pub fn dims(&self) -> Result<MambaDims> {
        let (d, two_di) = match self.in_proj.shape() {
            [d, e] => (*d, *e),
            s => return Err(Error::shape("block", format!("in_proj {s:?}"))),
        };
        let di = two_di / 2;
        let k = self.conv_w.shape().get(1).copied().unwrap_or(0);
        let n = self.a_log.shape().get(1).copied().unwrap_or(0);
        let r = self.dt_proj.shape().first().copied().unwrap_or(0);
        let dims = MambaDims { d_model: d, d_inner: di, state: n, conv_k: k, dt_rank: r };
        let want: [&[usize]; 9] = [
            &[d, 2 * di],
            &[di, k],
            &[di],
            &[di, r + 2 * n],
            &[r, di],
            &[di],
            &[di, n],
            &[di],
            &[di, d],
        ];
        for ((name, t), w) in BLOCK_FIELDS.iter().zip(self.fields()).zip(want) {
            if t.shape() != w {
                return Err(Error::shape("block", format!("{name} {:?}, expected {w:?}", t.shape())));
            }
        }
        Ok(dims)
    }

    /// `A = −exp(A_log)`.
    pub fn a_matrix(&self) -> Vec<T> {
        self.a_log.data().iter().map(|&v| -v.exp()).collect()
    }
}

/// The mixer `F` on `x: [B, T, d]`.
pub fn mixer_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    w: &BlockParams<Var<'t, T>>,
    dims: &MambaDims,
    mode: Discretization,
) -> Result<Var<'t, T>> {
    let MambaDims { d_inner: di, state: n, dt_rank: r, .. } = *dims;
    let proj = x.matmul(w.in_proj)?;
    let main = proj.slice(2, 0, di)?;
    let gate = proj.slice(2, di, di)?;
    let u = tape.conv1d_causal(main, w.conv_w, Some(w.conv_b))?.silu()?;
    let dbc = u.matmul(w.x_proj)?;
    let dt = dbc.slice(2, 0, r)?;
    let b = dbc.slice(2, r, n)?;
    let c = dbc.slice(2, r + n, n)?;
    let delta = dt.matmul(w.dt_proj)?.add(w.dt_bias)?.softplus()?;
    let a = w.a_log.exp()?.neg()?;
    let y = tape.selective_scan(u, delta, a, b, c, mode)?;
    let y = y.add(u.mul(w.d_skip)?)?.mul(gate.silu()?)?;
    y.matmul(w.out_proj)
}

/// `x + γ ⊙ F(α ⊙ LN(x) + β)` on `x: [B, T, d]` with modulation `[B, 1, d]`.
pub fn block_forward_taped<'t, T: Element>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    w: &BlockParams<Var<'t, T>>,
    modulation: (Var<'t, T>, Var<'t, T>, Var<'t, T>),
    dims: &MambaDims,
    mode: Discretization,
) -> Result<Var<'t, T>> {
    modulate_taped(tape, x, modulation, |h| mixer_taped(tape, h, w, dims, mode))
}

fn modulation_vars<'t, T: Element>(
    tape: &'t Tape<T>,
    m: &Modulation<T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let d = m.alpha.len();
    let v = |x: &Vec<T>| Tensor::new(vec![1, 1, d], x.clone()).map(|t| tape.constant(&t));
    Ok((v(&m.alpha)?, v(&m.beta)?, v(&m.gamma)?))
}

/// Full-sequence block on `x: [time, d]`.
pub fn block_forward<T: Element>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    m: &Modulation<T>,
    mode: Discretization,
) -> Result<Tensor<T>> {
    let dims = w.dims()?;
    let (time, d) = match x.shape() {
        [t, d] if *d == dims.d_model => (*t, *d),
        s => return Err(Error::shape("block_forward", format!("x {s:?} for width {}", dims.d_model))),
    };
    let tape = Tape::new();
    let wv = w.try_map("", &mut |_, t| Ok(tape.constant(t)))?;
    let xv = tape.constant(&x.reshape(vec![1, time, d])?);
    let y = block_forward_taped(&tape, xv, &wv, modulation_vars(&tape, m)?, &dims, mode)?;
    y.value().reshape(vec![time, d])
}

/// Decode cache of one block for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    /// Last `k − 1` pre-convolution inputs, `[d_inner, k − 1]`, oldest first.
    pub conv_ring: Vec<T>,
    pub ssm: ScanState<T>,
    d_inner: usize,
    conv_k: usize,
}

impl<T: Element> BlockState<T> {
    pub fn d_inner(&self) -> usize {
        self.d_inner
    }

    /// Scalars held, independent of how many steps have run.
    pub fn footprint(&self) -> usize {
        self.conv_ring.len() + self.ssm.h.len()
    }
}

/// Zero ring buffer and zero hidden state.
pub fn init_state<T: Element>(dims: &MambaDims) -> BlockState<T> {
    BlockState {
        conv_ring: vec![T::zero(); dims.d_inner * (dims.conv_k - 1)],
        ssm: ScanState::zeros(dims.d_inner, dims.state),
        d_inner: dims.d_inner,
        conv_k: dims.conv_k,
    }
}

/// Single-token block step for one stream.
pub fn block_step<T: Element>(
    x: &[T],
    state: &mut BlockState<T>,
    w: &BlockWeights<T>,
    m: &Modulation<T>,
    mode: Discretization,
) -> Result<Vec<T>> {
    let dims = w.dims()?;
    block_step_batch(x, std::slice::from_mut(state), w, &[m], &dims, mode)
}

/// One step for `B` independent streams; `xs: [B, d]` row-major.
pub fn block_step_batch<T: Element>(
    xs: &[T],
    states: &mut [BlockState<T>],
    w: &BlockWeights<T>,
    mods: &[&Modulation<T>],
    dims: &MambaDims,
    mode: Discretization,
) -> Result<Vec<T>> {
    let MambaDims { d_model: d, d_inner: di, state: n, conv_k: k, dt_rank: r } = *dims;
    let batch = states.len();
    if xs.len() != batch * d || mods.len() != batch {
        return Err(Error::shape(
            "block_step",
            format!("{} inputs, {} modulations for {batch} streams of width {d}", xs.len(), mods.len()),
        ));
    }
    for s in states.iter() {
        if s.d_inner != di || s.conv_k != k || s.conv_ring.len() != di * (k - 1) || s.ssm.h.len() != di * n {
            return Err(Error::invalid("block state does not match the block; build it with init_state"));
        }
    }
    let mut h = vec![T::zero(); batch * d];
    kernels::layer_norm_rows(xs, d, &mut h);
    for (row, m) in h.chunks_exact_mut(d).zip(mods) {
        for ((v, &a), &b) in row.iter_mut().zip(&m.alpha).zip(&m.beta) {
            *v = a * *v + b;
        }
    }
    let proj = kernels::matmul(&h, w.in_proj.data(), batch, d, 2 * di);

    let (cw, cb) = (w.conv_w.data(), w.conv_b.data());
    let mut u = vec![T::zero(); batch * di];
    for (s, st) in states.iter_mut().enumerate() {
        let main = &proj[s * 2 * di..s * 2 * di + di];
        for c in 0..di {
            let ring = &mut st.conv_ring[c * (k - 1)..(c + 1) * (k - 1)];
            let mut acc = cb[c];
            for (j, &v) in ring.iter().enumerate() {
                acc += cw[c * k + j] * v;
            }
            acc += cw[c * k + k - 1] * main[c];
            if k > 1 {
                ring.rotate_left(1);
                ring[k - 2] = main[c];
            }
            u[s * di + c] = kernels::silu(acc);
        }
    }

    let dbc = kernels::matmul(&u, w.x_proj.data(), batch, di, r + 2 * n);
    let dt: Vec<T> = dbc.chunks_exact(r + 2 * n).flat_map(|row| row[..r].iter().copied()).collect();
    let mut delta = vec![T::zero(); batch * di];
    for row in delta.chunks_exact_mut(di) {
        row.copy_from_slice(w.dt_bias.data());
    }
    kernels::gemm(&dt, false, w.dt_proj.data(), false, &mut delta, batch, r, di, true);
    for v in &mut delta {
        *v = kernels::softplus(*v);
    }

    let a = w.a_matrix();
    let dskip = w.d_skip.data();
    let mut y = vec![T::zero(); batch * di];
    for (s, st) in states.iter_mut().enumerate() {
        let row = &dbc[s * (r + 2 * n)..(s + 1) * (r + 2 * n)];
        let us = &u[s * di..(s + 1) * di];
        let ys = &mut y[s * di..(s + 1) * di];
        selective_step(&delta[s * di..(s + 1) * di], &a, &row[r..r + n], &row[r + n..], us, &mut st.ssm.h, mode, ys);
        let gate = &proj[s * 2 * di + di..(s + 1) * 2 * di];
        for c in 0..di {
            ys[c] = (ys[c] + us[c] * dskip[c]) * kernels::silu(gate[c]);
        }
        if !kernels::all_finite(&st.ssm.h) {
            return Err(Error::NonFinite { op: "block_step" });
        }
    }

    let f = kernels::matmul(&y, w.out_proj.data(), batch, di, d);
    let mut out = xs.to_vec();
    for ((orow, frow), m) in out.chunks_exact_mut(d).zip(f.chunks_exact(d)).zip(mods) {
        for ((o, &fv), &g) in orow.iter_mut().zip(frow).zip(&m.gamma) {
            *o += g * fv;
        }
    }
    if !kernels::all_finite(&out) {
        return Err(Error::NonFinite { op: "block_step" });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Stream;

    fn setup(seed: u64) -> (MambaDims, BlockWeights<f64>, Modulation<f64>) {
        let dims = MambaDims::new(8, 2, 4, 4, None).unwrap();
        let mut rng = Rng::derive(seed, Stream::Test, &[]);
        let w = BlockWeights::init(&dims, &mut rng);
        let m = Modulation {
            alpha: (0..8).map(|_| 1.0 + 0.3 * rng.normal()).collect(),
            beta: (0..8).map(|_| 0.3 * rng.normal()).collect(),
            gamma: (0..8).map(|_| 1.0 + 0.3 * rng.normal()).collect(),
        };
        (dims, w, m)
    }

    #[test]
    fn dims_defaults() {
        let dims = MambaDims::new(768, 2, 16, 4, None).unwrap();
        assert_eq!((dims.d_inner, dims.dt_rank), (1536, 48));
        assert_eq!(MambaDims::new(17, 2, 16, 4, None).unwrap().dt_rank, 2);
    }

    #[test]
    fn param_count_matches_census() {
        let (dims, w, _) = setup(0);
        let mut named = Vec::new();
        w.named("b", &mut named);
        assert_eq!(named.iter().map(|(_, t)| t.len()).sum::<usize>(), dims.param_count());
    }

    #[test]
    fn init_invariants() {
        let (dims, w, _) = setup(1);
        assert!(w.a_matrix().iter().all(|&a| a < 0.0));
        for &b in w.dt_bias.data() {
            let dt = kernels::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert_eq!(w.dims().unwrap(), dims);
    }

    #[test]
    fn zero_gate_is_identity() {
        let (_, w, mut m) = setup(2);
        m.gamma.fill(0.0);
        let mut rng = Rng::derive(9, Stream::Test, &[]);
        let x = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        assert_eq!(block_forward(&x, &w, &m, Discretization::Zoh).unwrap(), x);
    }

    #[test]
    fn first_step_matches_length_one_forward() {
        let (dims, w, m) = setup(3);
        let x = Tensor::from_fn(vec![1, 8], |i| (i as f64 * 0.37).sin()).unwrap();
        let full = block_forward(&x, &w, &m, Discretization::Zoh).unwrap();
        let mut st = init_state(&dims);
        let y = block_step(x.data(), &mut st, &w, &m, Discretization::Zoh).unwrap();
        assert!(kernels::max_abs_diff(&y, full.data()) < 1e-13);
    }

    #[test]
    fn states_are_independent_and_fixed_size() {
        let (dims, w, m) = setup(4);
        let mut a = init_state::<f64>(&dims);
        let b = init_state::<f64>(&dims);
        assert!(a.conv_ring.iter().chain(&a.ssm.h).all(|&v| v == 0.0));
        let size = a.footprint();
        for t in 0..5 {
            block_step(&[t as f64; 8], &mut a, &w, &m, Discretization::Zoh).unwrap();
            assert_eq!(a.footprint(), size);
        }
        assert_ne!(a, b);
        assert!(b.conv_ring.iter().chain(&b.ssm.h).all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let (_, w, m) = setup(5);
        let other = MambaDims::new(4, 2, 4, 4, None).unwrap();
        let mut st = init_state::<f64>(&other);
        assert!(block_step(&[0.0; 8], &mut st, &w, &m, Discretization::Zoh).is_err());
    }
}
