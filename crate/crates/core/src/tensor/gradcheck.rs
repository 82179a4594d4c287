use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, returning the largest relative error over all
/// coordinates of `input`.
pub fn grad_check<F>(f: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(input), step)
}

/// [`grad_check`] over several inputs at once; the maximum is taken across
/// every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| if grads { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
        }
        let y = g.value(out).item();
        let mut collected = Vec::new();
        if grads {
            g.backward(out)?;
            collected = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        }
        Ok((y, collected))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe[which].data_mut()[i] = orig + step;
            let (plus, _) = eval(&probe, false)?;
            probe[which].data_mut()[i] = orig - step;
            let (minus, _) = eval(&probe, false)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
        }
    }
    Ok(worst)
}
