// Central finite differences against the tape's gradients, in f64.

use super::{Graph, Tensor, TensorError, Var};

/// Largest disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Builds `f` on fresh graphs with `inputs` as parameters and compares the
/// backward pass with `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
/// `f` must return a scalar. Errors below `floor` in magnitude count as
/// absolute rather than relative.
pub fn gradient_check<F, E>(
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    f: F,
) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            xs[i].data_mut()[e] = x0 + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[e] = x0 - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = rel;
                out.worst = Some((i, e, a, numeric));
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
