//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::Result;
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero are compared on an absolute scale instead.
    pub magnitude_floor: f64,
    /// Upper bound on the total number of perturbed coordinates.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            magnitude_floor: 1e-3,
            max_coords: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Evenly spaced coordinates, all of them when `cap >= len`.
fn coordinates(len: usize, cap: usize) -> Vec<usize> {
    if cap >= len {
        return (0..len).collect();
    }
    (0..cap).map(|i| i * len / cap).collect()
}

/// Compares backward gradients of `root` against central differences for every
/// input listed in `names` (all bound inputs when `names` is empty).
pub fn check_gradients(
    graph: &mut Graph,
    root: NodeId,
    inputs: &BTreeMap<String, Array>,
    names: &[&str],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let selected: Vec<String> = if names.is_empty() {
        graph
            .input_names()
            .filter(|n| inputs.contains_key(*n))
            .map(str::to_string)
            .collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };

    graph.forward(root, inputs)?;
    let analytic = graph.backward(root)?;

    let total: usize = selected.iter().map(|n| inputs[n].len()).sum();
    let mut work = inputs.clone();
    let mut params = Vec::with_capacity(selected.len());
    let mut overall = 0.0f64;

    for name in &selected {
        let len = inputs[name].len();
        let cap = if total <= opts.max_coords {
            len
        } else {
            ((opts.max_coords as f64 * len as f64 / total as f64).floor() as usize).max(1)
        };
        let mut report = ParamReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in coordinates(len, cap) {
            let orig = inputs[name].data()[idx];
            work.get_mut(name).expect("bound").data_mut()[idx] = orig + opts.step;
            let plus = graph.forward(root, &work)?.item();
            work.get_mut(name).expect("bound").data_mut()[idx] = orig - opts.step;
            let minus = graph.forward(root, &work)?.item();
            work.get_mut(name).expect("bound").data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[name].data()[idx];
            let err = relative_error(a, numeric, opts.magnitude_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        overall = overall.max(report.max_rel_error);
        params.push(report);
    }

    // Leave the graph evaluated at the original point.
    graph.forward(root, inputs)?;

    Ok(GradCheckReport {
        params,
        max_rel_error: overall,
        tolerance: opts.tolerance,
        passed: overall <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_has_zero_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        let inputs: BTreeMap<_, _> = [("x".to_string(), Array::scalar(0.0))].into();
        let report = check_gradients(&mut g, x, &inputs, &[], &GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked(), 1);
    }

    #[test]
    fn coordinate_cap_is_respected() {
        assert_eq!(coordinates(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(coordinates(3, 10), vec![0, 1, 2]);
    }
}
