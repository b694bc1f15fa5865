use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Coordinates sampled per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum was attained.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences.
///
/// `build` constructs the loss graph from `params`; it is called once. Each
/// sampled coordinate is then perturbed by ±`epsilon` and the graph is
/// re-evaluated in place. The error for one coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<F>(build: F, params: &ParameterSet, epsilon: f64, seed: u64) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Graph, &ParameterSet) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::usage(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let mut graph = Graph::new();
    let loss = build(&mut graph, params)?;
    let base = graph.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    let analytic = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    let mut bindings = HashMap::new();
    for (name, tensor) in params.iter() {
        if graph.param_id(name).is_none() {
            continue;
        }
        let grad = analytic.get(name).expect("every registered param has a gradient");
        let coords: Vec<usize> = if tensor.len() <= MAX_COORDS_PER_TENSOR {
            (0..tensor.len()).collect()
        } else {
            let mut c = sample(&mut rng, tensor.len(), MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let mut probe = tensor.clone();
            probe.data_mut()[idx] = tensor.data()[idx] + epsilon;
            bindings.insert(name.clone(), probe.clone());
            let plus = eval(&mut graph, &bindings, loss)?;
            probe.data_mut()[idx] = tensor.data()[idx] - epsilon;
            bindings.insert(name.clone(), probe);
            let minus = eval(&mut graph, &bindings, loss)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
        bindings.insert(name.clone(), tensor.clone());
    }
    Ok(report)
}

fn eval(graph: &mut Graph, bindings: &HashMap<String, super::Tensor>, loss: NodeId) -> Result<f64> {
    graph.forward(bindings)?;
    let v = graph.value(loss).data()[0];
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric("non-finite loss during gradient check"))
    }
}
