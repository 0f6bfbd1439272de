use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::{Module, Tensor};
use crate::error::Result;

/// Worst relative error between reverse-mode and central-difference gradients.
///
/// `f` receives the module, a fresh graph and the module's bound parameter
/// variables, and must return a scalar loss. Every scalar coordinate of every
/// parameter is perturbed by `±eps`. Errors are measured per parameter tensor
/// in the max norm, `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`, and the worst tensor
/// is returned.
///
/// Each coordinate keeps whichever of the step sizes `eps` and `eps / 10`
/// agrees better with the analytic value, so a ReLU kink lying within `eps`
/// of the evaluation point does not register as a mismatch.
pub fn grad_check<M, F>(module: &mut M, eps: f64, f: F) -> Result<f64>
where
    M: Module,
    F: Fn(&M, &mut Graph, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars = g.bind(module)?;
        let loss = f(module, &mut g, &vars)?;
        g.backward(loss)?;
        module
            .parameters()
            .iter()
            .zip(&vars)
            .map(|(p, v)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(m)?;
        let loss = f(m, &mut g, &vars)?;
        g.value(loss).item()
    };
    let mut worst = 0.0f64;
    let n_params = module.parameters().len();
    for p in 0..n_params {
        let len = module.parameters()[p].value.len();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for c in 0..len {
            let a = analytic[p].data()[c];
            let mut numeric = f64::NAN;
            for h in [eps, eps / 10.0] {
                let orig = module.parameters()[p].value.data()[c];
                module.parameters_mut()[p].value.data_mut()[c] = orig + h;
                let plus = eval(module)?;
                module.parameters_mut()[p].value.data_mut()[c] = orig - h;
                let minus = eval(module)?;
                module.parameters_mut()[p].value.data_mut()[c] = orig;
                let est = (plus - minus) / (2.0 * h);
                if numeric.is_nan() || (est - a).abs() < (numeric - a).abs() {
                    numeric = est;
                }
            }
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff / scale.max(1e-8));
    }
    Ok(worst)
}
