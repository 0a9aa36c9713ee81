//! Zero-order-hold discretization and the selective-scan recurrence
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) · ΔB
//! h_t = Ā h_{t−1} + B̄ x_t,   y_t = C h_t
//! ```
//!
//! with diagonal `A`, in three interchangeable forms: a sequential loop, a
//! work-efficient blocked prefix scan over the affine combine monoid, and a
//! single-step update for incremental decoding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// How `B̄` is formed from `Δ`, `A` and `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// Exact zero-order hold: `B̄ = φ(ΔA)·ΔB` with `φ(z) = (e^z − 1)/z`.
    #[default]
    Zoh,
    /// First-order shortcut `B̄ = ΔB`.
    Euler,
}

impl Discretization {
    pub fn as_str(self) -> &'static str {
        match self {
            Discretization::Zoh => "zoh",
            Discretization::Euler => "euler",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Discretization::Zoh),
            "euler" => Ok(Discretization::Euler),
            other => Err(Error::invalid(format!("unknown discretization {other:?}"))),
        }
    }
}

/// Discretizes one `(Δ, a, b)` triple; returns `(Ā, B̄)`.
#[inline]
pub fn discretize_scalar<T: Element>(delta: T, a: T, b: T, mode: Discretization) -> (T, T) {
    let (_, abar, bbar) = discretize_parts(delta, a, b, mode);
    (abar, bbar)
}

/// `(expm1(Δa), Ābar, B̄bar)`.
#[inline]
fn discretize_parts<T: Element>(delta: T, a: T, b: T, mode: Discretization) -> (T, T, T) {
    let z = delta * a;
    let em1 = kernels::expm1_fast(z);
    match mode {
        Discretization::Zoh => (em1, em1 + T::one(), kernels::phi_with(z, em1) * delta * b),
        Discretization::Euler => (em1, em1 + T::one(), delta * b),
    }
}

/// Continuous parameters of one sequence.
///
/// `a: [channels, state]` (entries ≤ 0), `b, c: [time, state]` shared by
/// all channels, `delta: [time, channels]` (entries > 0).
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub delta: Tensor<T>,
}

impl<T: Element> SsmParams<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>, c: Tensor<T>, delta: Tensor<T>) -> Result<Self> {
        let (channels, state) = match a.shape() {
            [ch, n] => (*ch, *n),
            s => return Err(Error::shape("ssm_params", format!("a {s:?}"))),
        };
        let time = delta.shape().first().copied().unwrap_or(0);
        if delta.shape() != [time, channels] || b.shape() != [time, state] || c.shape() != [time, state] {
            return Err(Error::shape(
                "ssm_params",
                format!("a {:?} b {:?} c {:?} delta {:?}", a.shape(), b.shape(), c.shape(), delta.shape()),
            ));
        }
        if a.data().iter().any(|&v| v > T::zero()) {
            return Err(Error::invalid("state matrix entries must be ≤ 0"));
        }
        Ok(Self { a, b, c, delta })
    }

    pub fn time(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn discretize(&self, mode: Discretization) -> Result<Discretized<T>> {
        zoh_discretize(&self.delta, &self.a, &self.b, mode)
    }
}

/// `Ā` and `B̄` laid out `[time, channels, state]`.
#[derive(Clone, Debug)]
pub struct Discretized<T> {
    pub abar: Vec<T>,
    pub bbar: Vec<T>,
    pub time: usize,
    pub channels: usize,
    pub state: usize,
}

impl<T: Element> Discretized<T> {
    /// Slices `(Ā_t, B̄_t)`, each `[channels, state]`.
    pub fn at(&self, t: usize) -> (&[T], &[T]) {
        let w = self.channels * self.state;
        (&self.abar[t * w..(t + 1) * w], &self.bbar[t * w..(t + 1) * w])
    }
}

/// Hidden state `h: [channels, state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T> {
    pub h: Vec<T>,
    pub channels: usize,
    pub state: usize,
}

impl<T: Element> ScanState<T> {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self { h: vec![T::zero(); channels * state], channels, state }
    }

    fn check(&self, channels: usize, state: usize) -> Result<()> {
        if self.channels != channels || self.state != state || self.h.len() != channels * state {
            return Err(Error::shape(
                "scan_state",
                format!("state [{}, {}] for [{channels}, {state}]", self.channels, self.state),
            ));
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if kernels::all_finite(&self.h) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

/// Elementwise ZOH for diagonal `A`: `delta: [time, channels]`,
/// `a: [channels, state]`, `b: [time, state]`.
pub fn zoh_discretize<T: Element>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: Discretization,
) -> Result<Discretized<T>> {
    let (time, channels) = match delta.shape() {
        [t, c] => (*t, *c),
        s => return Err(Error::shape("zoh_discretize", format!("delta {s:?}"))),
    };
    let state = match a.shape() {
        [c, n] if *c == channels => *n,
        s => return Err(Error::shape("zoh_discretize", format!("a {s:?} for {channels} channels"))),
    };
    if b.shape() != [time, state] {
        return Err(Error::shape("zoh_discretize", format!("b {:?}, expected [{time}, {state}]", b.shape())));
    }
    if delta.data().iter().any(|&d| d <= T::zero()) {
        return Err(Error::invalid("step sizes Δ must be strictly positive"));
    }
    let (dl, av, bv) = (delta.data(), a.data(), b.data());
    let mut abar = Vec::with_capacity(time * channels * state);
    let mut bbar = Vec::with_capacity(time * channels * state);
    for t in 0..time {
        for c in 0..channels {
            let d = dl[t * channels + c];
            for n in 0..state {
                let (ab, bb) = discretize_scalar(d, av[c * state + n], bv[t * state + n], mode);
                abar.push(ab);
                bbar.push(bb);
            }
        }
    }
    Ok(Discretized { abar, bbar, time, channels, state })
}

fn check_scan_inputs<T: Element>(
    op: &'static str,
    disc: &Discretized<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    h0: &ScanState<T>,
) -> Result<()> {
    if c.shape() != [disc.time, disc.state] || x.shape() != [disc.time, disc.channels] {
        return Err(Error::shape(
            op,
            format!(
                "c {:?} x {:?} for time {} channels {} state {}",
                c.shape(),
                x.shape(),
                disc.time,
                disc.channels,
                disc.state
            ),
        ));
    }
    h0.check(disc.channels, disc.state)
}

/// Direct loop over the recurrence. `c: [time, state]`, `x: [time, channels]`.
pub fn scan_sequential<T: Element>(
    disc: &Discretized<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    h0: &ScanState<T>,
) -> Result<(Tensor<T>, ScanState<T>)> {
    check_scan_inputs("scan_sequential", disc, c, x, h0)?;
    let (ch, n) = (disc.channels, disc.state);
    let mut h = h0.clone();
    let mut y = Vec::with_capacity(disc.time * ch);
    for t in 0..disc.time {
        let (abar, bbar) = disc.at(t);
        let ct = &c.data()[t * n..(t + 1) * n];
        let xt = &x.data()[t * ch..(t + 1) * ch];
        y.extend(step_discretized(abar, bbar, ct, xt, &mut h.h, ch, n));
    }
    h.check_finite("scan_sequential")?;
    Ok((Tensor::new(vec![disc.time, ch], y)?, h))
}

#[allow(clippy::needless_range_loop)]
fn step_discretized<T: Element>(
    abar: &[T],
    bbar: &[T],
    ct: &[T],
    xt: &[T],
    h: &mut [T],
    channels: usize,
    state: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut acc = T::zero();
        for n in 0..state {
            let i = c * state + n;
            h[i] = abar[i] * h[i] + bbar[i] * xt[c];
            acc += ct[n] * h[i];
        }
        y.push(acc);
    }
    y
}

/// One recurrence step: `h ← Ā⊙h + B̄⊙x_t`, returns `y_t = ⟨C_t, h⟩`.
/// `abar, bbar: [channels, state]`, `c: [state]`, `x: [channels]`.
pub fn scan_step<T: Element>(
    abar: &[T],
    bbar: &[T],
    c: &[T],
    x: &[T],
    state: &ScanState<T>,
) -> Result<(Vec<T>, ScanState<T>)> {
    let (ch, n) = (state.channels, state.state);
    if abar.len() != ch * n || bbar.len() != ch * n || c.len() != n || x.len() != ch {
        return Err(Error::shape(
            "scan_step",
            format!("abar {} bbar {} c {} x {} for [{ch}, {n}]", abar.len(), bbar.len(), c.len(), x.len()),
        ));
    }
    let mut next = state.clone();
    let y = step_discretized(abar, bbar, c, x, &mut next.h, ch, n);
    next.check_finite("scan_step")?;
    Ok((y, next))
}

/// Fused discretize-and-step used by decoding: `delta, x: [channels]`,
/// `a: [channels, state]`, `b, c: [state]`. Updates `h` in place.
#[allow(clippy::too_many_arguments)]
pub fn selective_step<T: Element>(
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    x: &[T],
    h: &mut [T],
    mode: Discretization,
    y: &mut [T],
) {
    let state = b.len();
    for ch in 0..delta.len() {
        let d = delta[ch];
        let mut acc = T::zero();
        for n in 0..state {
            let i = ch * state + n;
            let (ab, bb) = discretize_scalar(d, a[i], b[n], mode);
            h[i] = ab * h[i] + bb * x[ch];
            acc += c[n] * h[i];
        }
        y[ch] = acc;
    }
}

/// Affine map `h ↦ a·h + b`; composition is the scan's monoid.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine<T> {
    a: T,
    b: T,
}

impl<T: Element> Affine<T> {
    fn identity() -> Self {
        Self { a: T::one(), b: T::zero() }
    }

    /// Apply `self` first, then `next`.
    #[inline]
    fn then(self, next: Self) -> Self {
        Self { a: next.a * self.a, b: next.a * self.b + next.b }
    }
}

/// Work-efficient exclusive scan (up-sweep / down-sweep) in place.
fn blelloch_exclusive<T: Element>(xs: &mut [Affine<T>]) {
    let n = xs.len();
    debug_assert!(n.is_power_of_two());
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            xs[i] = xs[i - stride].then(xs[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    xs[n - 1] = Affine::identity();
    while stride > 1 {
        stride /= 2;
        let mut i = 2 * stride - 1;
        while i < n {
            let left = xs[i - stride];
            xs[i - stride] = xs[i];
            xs[i] = xs[i].then(left);
            i += 2 * stride;
        }
    }
}

/// Prefix-scan form of [`scan_sequential`].
///
/// Time is cut into blocks of `block` steps; block aggregates are combined
/// by a Blelloch tree and each block is then finished locally from its
/// carry-in. Lanes run in parallel; the reduction tree depends only on
/// `time` and `block`, never on the worker count.
pub fn scan_parallel<T: Element>(
    disc: &Discretized<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    h0: &ScanState<T>,
    block: usize,
) -> Result<(Tensor<T>, ScanState<T>)> {
    check_scan_inputs("scan_parallel", disc, c, x, h0)?;
    if block == 0 {
        return Err(Error::invalid("scan block size must be positive"));
    }
    let (time, ch, n) = (disc.time, disc.channels, disc.state);
    let width = ch * n;
    let n_blocks = time.div_ceil(block);
    let padded = n_blocks.next_power_of_two();
    let (cd, xd) = (c.data(), x.data());

    // Per channel: y column [time] and final h row [state].
    let per_channel: Vec<(Vec<T>, Vec<T>)> = (0..ch)
        .into_par_iter()
        .map(|chan| {
            let mut y = vec![T::zero(); time];
            let mut h_final = vec![T::zero(); n];
            let mut elems: Vec<Affine<T>> = Vec::with_capacity(time);
            let mut aggs = vec![Affine::identity(); padded];
            for lane in 0..n {
                let i = chan * n + lane;
                elems.clear();
                elems.extend((0..time).map(|t| Affine {
                    a: disc.abar[t * width + i],
                    b: disc.bbar[t * width + i] * xd[t * ch + chan],
                }));
                for (j, chunk) in elems.chunks(block).enumerate() {
                    aggs[j] = chunk.iter().fold(Affine::identity(), |acc, &e| acc.then(e));
                }
                aggs[n_blocks..].fill(Affine::identity());
                blelloch_exclusive(&mut aggs);
                for (j, chunk) in elems.chunks(block).enumerate() {
                    let carry = aggs[j];
                    let mut h = carry.a * h0.h[i] + carry.b;
                    for (k, e) in chunk.iter().enumerate() {
                        h = e.a * h + e.b;
                        let t = j * block + k;
                        y[t] += cd[t * n + lane] * h;
                    }
                    h_final[lane] = h;
                }
            }
            (y, h_final)
        })
        .collect();

    let mut y = vec![T::zero(); time * ch];
    let mut h = ScanState::zeros(ch, n);
    for (chan, (col, hf)) in per_channel.into_iter().enumerate() {
        for t in 0..time {
            y[t * ch + chan] = col[t];
        }
        h.h[chan * n..(chan + 1) * n].copy_from_slice(&hf);
    }
    h.check_finite("scan_parallel")?;
    Ok((Tensor::new(vec![time, ch], y)?, h))
}

// ---- batched kernels behind the tape primitive ------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
    pub state: usize,
}

/// Node ids of `[u, delta, a, b, c]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanInputs([usize; 5]);

impl ScanInputs {
    pub fn new(u: usize, delta: usize, a: usize, b: usize, c: usize) -> Self {
        Self([u, delta, a, b, c])
    }

    pub fn ids(&self) -> &[usize; 5] {
        &self.0
    }
}

pub(crate) struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// Saved forward quantities: every `h_t` and `expm1(Δa)`, both
/// `[batch, time, channels, state]`.
#[derive(Clone, Debug, Default)]
pub(crate) struct ScanTrace<T> {
    pub states: Vec<T>,
    pub em1: Vec<T>,
}

/// Forward over `[batch, time, channels]`; with `keep` also records the
/// trace the reverse pass needs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_scan_forward<T: Element>(
    dims: &ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    mode: Discretization,
    keep: bool,
) -> Result<(Vec<T>, ScanTrace<T>)> {
    let ScanDims { batch, time, channels, state } = *dims;
    let width = channels * state;
    let mut y = vec![T::zero(); batch * time * channels];
    let mut trace = ScanTrace::default();
    if keep {
        trace.states = vec![T::zero(); batch * time * width];
        trace.em1 = vec![T::zero(); batch * time * width];
    }
    let mut h = vec![T::zero(); width];
    for s in 0..batch {
        h.fill(T::zero());
        for t in 0..time {
            let row = (s * time + t) * channels;
            let srow = (s * time + t) * state;
            let off = (s * time + t) * width;
            for ch in 0..channels {
                let d = delta[row + ch];
                let x = u[row + ch];
                let mut acc = T::zero();
                for n in 0..state {
                    let i = ch * state + n;
                    let (em1, ab, bb) = discretize_parts(d, a[i], b[srow + n], mode);
                    h[i] = ab * h[i] + bb * x;
                    acc += c[srow + n] * h[i];
                    if keep {
                        trace.em1[off + i] = em1;
                    }
                }
                y[row + ch] = acc;
            }
            if keep {
                trace.states[off..off + width].copy_from_slice(&h);
            }
        }
        if !kernels::all_finite(&h) {
            return Err(Error::NonFinite { op: "selective_scan" });
        }
    }
    if !kernels::all_finite(&y) {
        return Err(Error::NonFinite { op: "selective_scan" });
    }
    Ok((y, trace))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_scan_backward<T: Element>(
    dims: &ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    trace: &ScanTrace<T>,
    gy: &[T],
    mode: Discretization,
) -> ScanGrads<T> {
    let states = &trace.states;
    let ScanDims { batch, time, channels, state } = *dims;
    let width = channels * state;
    let mut g = ScanGrads {
        u: vec![T::zero(); u.len()],
        delta: vec![T::zero(); delta.len()],
        a: vec![T::zero(); a.len()],
        b: vec![T::zero(); b.len()],
        c: vec![T::zero(); c.len()],
    };
    let zero_h = vec![T::zero(); width];
    for s in 0..batch {
        let mut gh = vec![T::zero(); width];
        for t in (0..time).rev() {
            let row = (s * time + t) * channels;
            let srow = (s * time + t) * state;
            let off = (s * time + t) * width;
            let h_t = &states[off..off + width];
            let h_prev = if t == 0 { &zero_h[..] } else { &states[off - width..off] };
            for ch in 0..channels {
                let d = delta[row + ch];
                let x = u[row + ch];
                let gyc = gy[row + ch];
                let mut gx = T::zero();
                let mut gd = T::zero();
                for n in 0..state {
                    let i = ch * state + n;
                    let bn = b[srow + n];
                    let z = d * a[i];
                    let em1 = trace.em1[off + i];
                    let abar = em1 + T::one();
                    let ght = gh[i] + c[srow + n] * gyc;
                    g.c[srow + n] += gyc * h_t[i];
                    let g_abar = ght * h_prev[i];
                    let g_bbar = ght * x;
                    let (bbar, gz) = match mode {
                        Discretization::Zoh => {
                            let f = kernels::phi_with(z, em1);
                            gd += g_bbar * f * bn;
                            g.b[srow + n] += g_bbar * f * d;
                            (f * d * bn, g_abar * abar + g_bbar * d * bn * kernels::phi_grad_with(z, em1))
                        }
                        Discretization::Euler => {
                            gd += g_bbar * bn;
                            g.b[srow + n] += g_bbar * d;
                            (d * bn, g_abar * abar)
                        }
                    };
                    gx += ght * bbar;
                    gd += gz * a[i];
                    g.a[i] += gz * d;
                    gh[i] = ght * abar;
                }
                g.u[row + ch] += gx;
                g.delta[row + ch] += gd;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Stream};

    fn t1(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn half_instance() -> (Discretized<f64>, Tensor<f64>, Tensor<f64>) {
        let ln2 = 2f64.ln();
        let disc = zoh_discretize(
            &t1(&[3, 1], &[ln2, ln2, ln2]),
            &t1(&[1, 1], &[-1.0]),
            &t1(&[3, 1], &[1.0, 1.0, 1.0]),
            Discretization::Zoh,
        )
        .unwrap();
        (disc, t1(&[3, 1], &[1.0, 1.0, 1.0]), t1(&[3, 1], &[1.0, 1.0, 1.0]))
    }

    #[test]
    fn zoh_closed_form() {
        let (disc, _, _) = half_instance();
        assert!((disc.abar[0] - 0.5).abs() < 1e-12);
        assert!((disc.bbar[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoh_limits() {
        let (ab, bb) = discretize_scalar(1e-12f64, -1.0, 1.0, Discretization::Zoh);
        assert!((ab - 1.0).abs() < 1e-11 && bb.abs() < 1e-11);
        let (ab, bb) = discretize_scalar(0.1f64, 0.0, 2.0, Discretization::Zoh);
        assert_eq!(ab, 1.0);
        assert!((bb - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zoh_rejects_nonpositive_delta() {
        let r = zoh_discretize(
            &t1(&[1, 1], &[0.0]),
            &t1(&[1, 1], &[-1.0]),
            &t1(&[1, 1], &[1.0]),
            Discretization::Zoh,
        );
        assert!(r.is_err());
    }

    #[test]
    fn hand_unrolled_recurrence() {
        let (disc, c, x) = half_instance();
        let h0 = ScanState::zeros(1, 1);
        let (y, _) = scan_sequential(&disc, &c, &x, &h0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.75, 0.875]);
        let (yp, _) = scan_parallel(&disc, &c, &x, &h0, 2).unwrap();
        assert!(yp.max_abs_diff(&y).unwrap() < 1e-15);
        let mut st = h0;
        let mut ys = vec![];
        for t in 0..3 {
            let (ab, bb) = disc.at(t);
            let (yt, next) = scan_step(ab, bb, &[1.0], &[1.0], &st).unwrap();
            ys.push(yt[0]);
            st = next;
        }
        assert_eq!(ys, vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn zero_input_zero_output() {
        let (disc, c, _) = half_instance();
        let x = Tensor::zeros(vec![3, 1]);
        let (y, h) = scan_sequential(&disc, &c, &x, &ScanState::zeros(1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(h.h, vec![0.0]);
    }

    #[test]
    fn single_step_closed_form() {
        let mut rng = Rng::derive(3, Stream::Test, &[]);
        let a = Tensor::<f64>::uniform(vec![2, 3], -2.0, -0.1, &mut rng);
        let b = Tensor::randn(vec![1, 3], 1.0, &mut rng);
        let c = Tensor::randn(vec![1, 3], 1.0, &mut rng);
        let d = Tensor::uniform(vec![1, 2], 0.01, 0.5, &mut rng);
        let x = Tensor::randn(vec![1, 2], 1.0, &mut rng);
        let disc = zoh_discretize(&d, &a, &b, Discretization::Zoh).unwrap();
        let (y, _) = scan_sequential(&disc, &c, &x, &ScanState::zeros(2, 3)).unwrap();
        for ch in 0..2 {
            let want: f64 = (0..3).map(|n| c.data()[n] * disc.bbar[ch * 3 + n] * x.data()[ch]).sum();
            assert!((y.data()[ch] - want).abs() < 1e-15);
        }
        let (yp, _) = scan_parallel(&disc, &c, &x, &ScanState::zeros(2, 3), 64).unwrap();
        assert_eq!(yp, y);
    }

    #[test]
    fn blelloch_matches_serial_prefix() {
        let mut rng = Rng::derive(5, Stream::Test, &[]);
        let elems: Vec<Affine<f64>> =
            (0..16).map(|_| Affine { a: rng.uniform(), b: rng.normal() }).collect();
        let mut scanned = elems.clone();
        blelloch_exclusive(&mut scanned);
        let mut acc = Affine::<f64>::identity();
        for (e, s) in elems.iter().zip(&scanned) {
            assert!((acc.a - s.a).abs() < 1e-14 && (acc.b - s.b).abs() < 1e-14);
            acc = acc.then(*e);
        }
    }

    #[test]
    fn state_shape_mismatch_is_reported() {
        let (disc, c, x) = half_instance();
        assert!(scan_sequential(&disc, &c, &x, &ScanState::zeros(2, 1)).is_err());
        assert!(scan_parallel(&disc, &c, &x, &ScanState::zeros(1, 1), 0).is_err());
    }
}
