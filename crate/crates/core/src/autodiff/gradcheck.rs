//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Compares the analytic gradient of a scalar function with respect to
/// input `which` against central differences of size `step`.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// scalar. The return value is the maximum over entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    build: F,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(AutodiffError::Contract(format!("step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite(format!("forward value {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(AutodiffError::NonFinite(format!("forward value {}", g.value(out).item())));
        }
        g.backward(out)?.wrt(vars[which])
    };

    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..inputs[which].len() {
        let orig = xs[which].data()[i];
        xs[which].data_mut()[i] = orig + step;
        let plus = eval(&xs)?;
        xs[which].data_mut()[i] = orig - step;
        let minus = eval(&xs)?;
        xs[which].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.0, 2.5]);
        let w = Tensor::vector(vec![1.5, 2.0, -0.5]);
        for step in [1e-3, 1e-5, 0.1] {
            let err = finite_difference_check(&[x.clone(), w.clone()], 0, step, |g, v| {
                let p = g.mul(v[0], v[1])?;
                Ok(g.reduce_sum(p))
            })
            .unwrap();
            assert!(err < 1e-10, "step {step}: {err}");
        }
    }

    #[test]
    fn sigmoid_composition_passes() {
        let x = Tensor::vector(vec![0.3, -1.0, 2.5, 0.01]);
        let err = finite_difference_check(&[x], 0, 1e-5, |g, v| {
            let s = g.sigmoid(v[0]);
            let s2 = g.scale(s, 3.0);
            let s3 = g.sigmoid(s2);
            Ok(g.reduce_mean(s3))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(&[x], 0, 0.0, |g, v| Ok(g.reduce_sum(v[0]))).is_err());
    }
}
