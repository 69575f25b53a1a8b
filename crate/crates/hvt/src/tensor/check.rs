//! Finite-difference verification of recorded backward rules.

use super::{Graph, NodeId, Tensor, TensorError, TensorResult};

/// Compare analytic gradients of a scalar-valued builder against central
/// differences, over every coordinate of every input. Returns the maximum
/// relative error |analytic − numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check_multi<F>(build: F, inputs: &[Tensor], h: f64) -> TensorResult<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> TensorResult<NodeId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(TensorError::StepOutOfRange { h });
    }

    let eval = |tensors: &[Tensor], with_grad: bool| -> TensorResult<(f64, Option<Vec<Vec<f64>>>)> {
        let mut graph = Graph::new();
        let mut ids = Vec::with_capacity(tensors.len());
        for t in tensors {
            ids.push(graph.leaf(t.clone().with_requires_grad(with_grad))?);
        }
        let loss = build(&mut graph, &ids)?;
        if graph.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: graph.value(loss).shape().to_vec() });
        }
        let value = graph.data(loss)[0];
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        if with_grad {
            graph.backward(loss)?;
            let gs = ids
                .iter()
                .map(|&id| graph.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; graph.value(id).numel()]))
                .collect();
            Ok((value, Some(gs)))
        } else {
            Ok((value, None))
        }
    };

    let (_, analytic) = eval(inputs, true)?;
    let analytic = analytic.expect("gradients requested");

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let original = input.data()[j];
            work[pi].data_mut()[j] = original + h;
            let (f_plus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = original - h;
            let (f_minus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = original;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(build: F, x: &Tensor, h: f64) -> TensorResult<f64>
where
    F: Fn(&mut Graph, NodeId) -> TensorResult<NodeId>,
{
    grad_check_multi(|g, ids| build(g, ids[0]), std::slice::from_ref(x), h)
}
