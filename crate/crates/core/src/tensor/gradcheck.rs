use super::{Rng, Stream, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::Discretization;

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)` where
/// `numeric_i = (f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    gradient_check_all(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`gradient_check`] over several inputs at once; the error is the maximum
/// over every coordinate of every input.
pub fn gradient_check_all<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = f(&tape, &vars)?.value();
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "gradient_check" });
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.var(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Step used by [`primitive_suite`].
pub const SUITE_EPS: f64 = 1e-5;

fn weighted_sum<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = Tensor::from_fn(y.shape(), |i| (1.3 * i as f64 + 0.5).cos())?;
    y.mul(y.tape().constant(&w))?.sum()
}

/// Gradient check of every differentiable primitive at shapes drawn with
/// extents in `1..=max_extent`; returns `(primitive, error)` pairs.
///
/// Each loss is the dot product of the primitive's output with a fixed
/// cosine weighting, so no output coordinate is left out.
pub fn primitive_suite(seed: u64, max_extent: usize) -> Result<Vec<(&'static str, f64)>> {
    if max_extent == 0 {
        return Err(Error::invalid("primitive suite needs a positive extent"));
    }
    let mut rng = Rng::derive(seed, Stream::Test, &[max_extent as u64]);
    let e = |rng: &mut Rng| rng.below(max_extent) + 1;
    let (p, q, r) = (e(&mut rng), e(&mut rng), e(&mut rng));
    let randn = |shape: Vec<usize>, rng: &mut Rng| Tensor::randn(shape, 1.0, rng);
    let x3 = randn(vec![p, q, r], &mut rng);
    let mut out = Vec::new();

    let k = e(&mut rng);
    let n = e(&mut rng);
    let xs = [randn(vec![p, q, k], &mut rng), randn(vec![k, n], &mut rng)];
    out.push(("matmul", gradient_check_all(|_, v| weighted_sum(v[0].matmul(v[1])?), &xs, SUITE_EPS)?));
    let m = randn(vec![p, q], &mut rng);
    out.push(("transpose", gradient_check(|t, v| weighted_sum(t.transpose(v)?), &m, SUITE_EPS)?));
    let rows = [x3.clone(), randn(vec![1, q, r], &mut rng)];
    out.push(("add", gradient_check_all(|_, v| weighted_sum(v[0].add(v[1])?), &rows, SUITE_EPS)?));
    let cols = [x3.clone(), randn(vec![r], &mut rng)];
    out.push(("mul", gradient_check_all(|_, v| weighted_sum(v[0].mul(v[1])?), &cols, SUITE_EPS)?));
    out.push(("neg", gradient_check(|_, v| weighted_sum(v.neg()?), &x3, SUITE_EPS)?));
    out.push(("scale", gradient_check(|_, v| weighted_sum(v.scale(-1.7)?), &x3, SUITE_EPS)?));
    out.push(("exp", gradient_check(|_, v| weighted_sum(v.exp()?), &x3, SUITE_EPS)?));
    let pos = Tensor::uniform(vec![p, q, r], 0.5, 2.0, &mut rng);
    out.push(("log", gradient_check(|_, v| weighted_sum(v.log()?), &pos, SUITE_EPS)?));
    out.push(("silu", gradient_check(|_, v| weighted_sum(v.silu()?), &x3, SUITE_EPS)?));
    out.push(("swish", gradient_check(|t, v| weighted_sum(t.swish(v)?), &x3, SUITE_EPS)?));
    out.push(("softplus", gradient_check(|_, v| weighted_sum(v.softplus()?), &x3, SUITE_EPS)?));
    out.push(("softmax", gradient_check(|_, v| weighted_sum(v.softmax()?), &x3, SUITE_EPS)?));
    out.push(("layer_norm", gradient_check(|_, v| weighted_sum(v.layer_norm()?), &x3, SUITE_EPS)?));
    out.push(("rms_norm", gradient_check(|_, v| weighted_sum(v.rms_norm()?), &x3, SUITE_EPS)?));

    let kw = e(&mut rng);
    let conv = [x3.clone(), randn(vec![r, kw], &mut rng), randn(vec![r], &mut rng)];
    out.push((
        "conv1d_causal",
        gradient_check_all(|t, v| weighted_sum(t.conv1d_causal(v[0], v[1], Some(v[2]))?), &conv, SUITE_EPS)?,
    ));
    let table = randn(vec![p, r], &mut rng);
    let idx: Vec<usize> = (0..q + 1).map(|_| rng.below(p)).collect();
    out.push(("embedding", gradient_check(|t, v| weighted_sum(t.embedding(v, &idx)?), &table, SUITE_EPS)?));
    let axis = rng.below(3);
    let mut other = vec![p, q, r];
    other[axis] = e(&mut rng);
    let parts = [x3.clone(), randn(other, &mut rng)];
    out.push(("concat", gradient_check_all(|t, v| weighted_sum(t.concat(&[v[0], v[1]], axis)?), &parts, SUITE_EPS)?));
    let extent = [p, q, r][axis];
    let start = rng.below(extent);
    let len = rng.below(extent - start) + 1;
    out.push(("slice", gradient_check(|_, v| weighted_sum(v.slice(axis, start, len)?), &x3, SUITE_EPS)?));
    out.push(("reshape", gradient_check(|_, v| weighted_sum(v.reshape(&[r, p * q])?), &x3, SUITE_EPS)?));
    out.push(("sum", gradient_check(|_, v| v.exp()?.sum(), &x3, SUITE_EPS)?));
    out.push(("mean", gradient_check(|_, v| v.exp()?.mean(), &x3, SUITE_EPS)?));
    let targets: Vec<usize> = (0..p * q).map(|_| rng.below(r)).collect();
    out.push(("cross_entropy", gradient_check(|t, v| t.cross_entropy(v, &targets), &x3, SUITE_EPS)?));

    let (b, time, ch, st) = (p.min(2), q, r.min(4), e(&mut rng).min(4));
    let scan = [
        randn(vec![b, time, ch], &mut rng),
        Tensor::uniform(vec![b, time, ch], 0.05, 0.8, &mut rng),
        Tensor::uniform(vec![ch, st], -2.0, -0.2, &mut rng),
        randn(vec![b, time, st], &mut rng),
        randn(vec![b, time, st], &mut rng),
    ];
    for (name, mode) in [("selective_scan_zoh", Discretization::Zoh), ("selective_scan_euler", Discretization::Euler)] {
        let err = gradient_check_all(
            |t, v| weighted_sum(t.selective_scan(v[0], v[1], v[2], v[3], v[4], mode)?),
            &scan,
            SUITE_EPS,
        )?;
        out.push((name, err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_functions() {
        let mut rng = Rng::derive(0, Stream::Test, &[1]);
        let x = Tensor::randn(vec![5], 1.0, &mut rng);
        let err = gradient_check(|_, v| v.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn exp_at_zero() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = gradient_check(|_, v| v.exp()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(gradient_check(|_, v| v.sum(), &x, 1e-2).is_err());
    }
}
