use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest relative error over the coordinates of each input.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub eps: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding error a central difference can carry when the function values
/// are of magnitude `scale`. Disagreements below it are not measurable.
fn roundoff_floor(scale: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * scale.max(1.0) / eps
}

fn evaluate<F>(
    f: &F,
    inputs: &[Tensor],
    with_grad: bool,
) -> Result<(Graph, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if with_grad {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        return Err(TensorError::NonFinite(format!(
            "checked function returned {}",
            value.item()
        )));
    }
    Ok((g, vars, out))
}

/// Checks the gradient of the scalar function `f` at `inputs` coordinate by
/// coordinate with `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// A coordinate whose analytic and numeric values differ by less than the
/// rounding error of the difference quotient counts as agreeing; this keeps
/// structurally zero gradients from reporting pure noise.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    threshold: f64,
) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!(
            "grad_check eps {eps} outside (0, 1e-2]"
        )));
    }
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    drop(g);

    let mut probe = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, grads) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (c, &a) in grads.iter().enumerate() {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let plus = evaluate(&f, &probe, false)?;
            let fp = plus.0.item(plus.2);
            probe[i].data_mut()[c] = orig - eps;
            let minus = evaluate(&f, &probe, false)?;
            let fm = minus.0.item(minus.2);
            probe[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if (a - numeric).abs() > roundoff_floor(fp.abs().max(fm.abs()), eps) {
                worst = worst.max(relative_error(a, numeric));
            }
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        per_input,
        max_rel_error,
        eps,
        threshold,
        passed: max_rel_error < threshold,
    })
}
