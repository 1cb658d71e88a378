//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use thiserror::Error;

use super::graph::{Gradients, Graph, GraphError, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
    #[error("gradient for `{0}` is missing")]
    Missing(String),
}

/// Maximum over all trainable leaves of
/// `|autodiff - central difference| / max(1, |central difference|)`.
pub fn gradient_check(
    graph: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
    output: NodeId,
    eps: f64,
) -> Result<f64, GradCheckError> {
    let numeric = numerical_gradients(graph, inputs, output, eps)?;
    graph.evaluate(inputs.iter().map(|(k, v)| (k.as_str(), v)))?;
    let seed = Tensor::full(graph.value(output)?.shape(), 1.0);
    let analytic = graph.backward(output, &seed)?;
    max_relative_error(&analytic, &numeric)
}

/// Central differences of a scalar output with respect to every trainable leaf.
pub fn numerical_gradients(
    graph: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
    output: NodeId,
    eps: f64,
) -> Result<Gradients, GradCheckError> {
    if !(eps > 0.0) {
        return Err(GradCheckError::Step(eps));
    }
    let names = graph.param_names();
    let mut bound = inputs.clone();
    let mut eval = |bound: &BTreeMap<String, Tensor>| -> Result<f64, GradCheckError> {
        graph.evaluate(bound.iter().map(|(k, v)| (k.as_str(), v)))?;
        let out = graph.value(output)?;
        if out.len() != 1 {
            return Err(GraphError::NonScalar(out.shape().to_vec()).into());
        }
        Ok(out.data()[0])
    };
    eval(&bound)?;
    let mut grads = Gradients::new();
    for name in names {
        let len = bound
            .get(&name)
            .ok_or_else(|| GraphError::Unbound(name.clone()))?
            .len();
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = bound[&name].data()[i];
            bound.get_mut(&name).expect("bound").data_mut()[i] = orig + eps;
            let plus = eval(&bound)?;
            bound.get_mut(&name).expect("bound").data_mut()[i] = orig - eps;
            let minus = eval(&bound)?;
            bound.get_mut(&name).expect("bound").data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * eps);
        }
        let shape = bound[&name].shape().to_vec();
        grads.insert(name, Tensor::new(&shape, g).expect("grad shape"));
    }
    Ok(grads)
}

/// Largest relative discrepancy between two gradient sets over the keys of
/// `numeric`.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> Result<f64, GradCheckError> {
    let mut worst: f64 = 0.0;
    for (name, num) in numeric {
        let ana = analytic
            .get(name)
            .ok_or_else(|| GradCheckError::Missing(name.clone()))?;
        for (a, n) in ana.data().iter().zip(num.data()) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Central differences of an arbitrary scalar objective over a list of
/// parameter tensors.
pub fn finite_difference<F>(params: &[Tensor], eps: f64, mut objective: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..work.len() {
        let mut g = vec![0.0; work[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = objective(&work);
            work[p].data_mut()[i] = orig - eps;
            let minus = objective(&work);
            work[p].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::new(work[p].shape(), g).expect("grad shape"));
    }
    out
}
