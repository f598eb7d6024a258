use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// Like [`finite_diff_check`] for a function of several tensors; returns the
/// relative error per input.
///
/// The error of one input is `max|a - c| / (max(|a|, |c|) + 1e-12)` over its
/// elements, with `a` the analytic and `c` the central-difference derivative.
/// Scaling by the tensor's largest entry rather than per element keeps
/// entries whose true value is zero from turning roundoff into a unit error.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::config(format!("finite difference step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = xs.to_vec();
    let mut errors = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t].data()[i];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        errors.push(diff / (scale + 1e-12));
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        // dyadic inputs and step keep every difference exact
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 / 4.0 - 1.5).collect()).unwrap();
        let err = finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, 0.125).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[5], 2);
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = random(&[2], 3);
        assert!(finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, 0.0).is_err());
    }
}
