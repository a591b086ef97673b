use super::{EngineError, Graph, Tensor, Var};

/// Largest relative disagreement between reverse-mode gradients and
/// five-point central differences, over every coordinate of every input.
///
/// `f` builds a scalar from the leaves it is handed. The relative error per
/// coordinate is `|a - n| / max(1e-12, |a| + |n|)`. Non-differentiable points
/// (a rectified-linear unit exactly at 0, for instance) are the caller's
/// responsibility.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, EngineError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, EngineError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.scalar_value(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..inputs.len() {
        for j in 0..inputs[t].len() {
            let orig = inputs[t].data()[j];
            let mut at = |h: f64| -> Result<f64, EngineError> {
                work[t].data_mut()[j] = orig + h;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work[t].data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[t].data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
