use super::{Bindings, Graph, NodeId};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

const INPUT: &str = "__check_x";

/// Largest relative disagreement between the reverse-mode gradient of a
/// scalar function and its central finite difference, over every coordinate.
///
/// The relative error at a coordinate is `|analytic - fd| / (|fd| + 1e-12)`.
pub fn check_gradients<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    check_gradients_at(f, point, eps, &coords)
}

/// [`check_gradients`] restricted to the flat coordinates in `coords`.
pub fn check_gradients_at<F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let x = g.input(INPUT, point.shape());
    let y = f(&mut g, x)?;
    if !g.shape(y).is_empty() {
        return Err(invalid("gradient check needs a scalar-valued function"));
    }
    let mut bindings = Bindings::new();
    bindings.insert(INPUT.to_string(), point.clone());
    g.forward(&bindings)?;
    let analytic = g
        .backward(y, &Tensor::scalar(1.0))?
        .remove(INPUT)
        .expect("input adjoint");

    let mut worst: f64 = 0.0;
    for &c in coords {
        if c >= point.len() {
            return Err(invalid(format!(
                "coordinate {c} outside point of {} values",
                point.len()
            )));
        }
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = point.clone();
            p.data_mut()[c] += delta;
            bindings.insert(INPUT.to_string(), p);
            g.forward(&bindings)?;
            Ok(g.value(y).item())
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let err = (analytic.data()[c] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
