//! Central-difference gradient checking.

use super::{Graph, Tensor, TensorError, Var};

/// Compares the analytic gradient of scalar `f` at `x` with central
/// differences of step `eps`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64, E> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Checks `f` with respect to each of `args` in turn, holding the others
/// constant, and returns the worst relative error.
pub fn grad_check_args<F, E>(f: F, args: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut worst: f64 = 0.0;
    for which in 0..args.len() {
        let err = grad_check::<_, E>(
            |g, x| {
                let vars: Vec<Var> = args
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { g.input(t.clone()) })
                    .collect();
                f(g, &vars)
            },
            &args[which],
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0);
        let err = grad_check::<_, TensorError>(|g, v| Ok(g.sum(v)), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sine_matches_cosine() {
        let x = Tensor::from_fn(&[10], |i| (i as f64 * 1.7).sin() * 3.0);
        let err = grad_check::<_, TensorError>(
            |g, v| {
                let s = g.sin(v);
                Ok(g.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn broken_derivative_is_caught() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.25 + 0.1);
        let err = grad_check::<_, TensorError>(
            |g, v| {
                let y = g.custom_unary(v, |t| t * t, |t| t);
                Ok(g.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
