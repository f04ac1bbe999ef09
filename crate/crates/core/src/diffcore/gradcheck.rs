use super::graph::{Graph, Mode, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest element-wise relative disagreement between the reverse-mode
/// gradient of `f` at `point` and central finite differences.
///
/// `f` receives a fresh double-precision graph (training mode) and the
/// differentiable leaf holding `point`, and must return a scalar node.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let x = g.leaf(p.clone());
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if v.len() != 1 {
            return Err(Error::NonScalar(v.len()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new(Mode::Train);
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let scale = analytic
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-7 * (1.0 + scale);
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
