//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Graphs are built define-by-run: a closure receives a fresh [`Graph`] bound
//! to a set of named values and returns its root. Forward values exist as soon
//! as a node is created, so evaluation is the act of building the graph.

mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use graph::{Adjoints, Axis, Bindings, CustomOp, Graph, NodeId, NodeKind};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("no value bound for `{0}`")]
    Unbound(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` does not occur in the graph")]
    UnknownParameter(String),
}

/// Builds the graph described by `build` against `bindings` and returns the
/// root's forward value.
pub fn evaluate<F>(bindings: &Bindings, build: F) -> Result<Tensor, AutodiffError>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new(bindings);
    let root = build(&mut g)?;
    Ok(g.value(root).clone())
}

/// Forward value and `d root / d p` for each requested parameter.
pub fn gradients<F>(
    bindings: &Bindings,
    wrt: &[&str],
    build: F,
) -> Result<(f64, BTreeMap<String, Tensor>), AutodiffError>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new(bindings);
    let root = build(&mut g)?;
    let value = g
        .value(root)
        .item()
        .ok_or_else(|| AutodiffError::NonScalarRoot(g.value(root).shape().to_vec()))?;
    Ok((value, g.gradients(root, wrt)?))
}

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub type GradCheckReport = BTreeMap<String, GradCheckEntry>;

/// Denominator floor of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, RELATIVE_FLOOR)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smallest gradient magnitude a central difference with step `eps` can
/// resolve when the function value is about `value`: one rounding unit of
/// each evaluation, divided by `2 eps`.
pub fn central_difference_resolution(value: f64, eps: f64) -> f64 {
    2.0 * f64::EPSILON * value.abs().max(1.0) / (2.0 * eps)
}

/// Compares analytic gradients against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every element of every parameter
/// in `wrt`.
pub fn check_gradients<F>(
    bindings: &Bindings,
    wrt: &[&str],
    eps: f64,
    build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, AutodiffError>,
{
    check_gradients_with(bindings, wrt, eps, build, |_, _| {})
}

/// [`check_gradients`] with a hook that may alter each analytic gradient
/// before comparison. Used to confirm the checker actually catches errors.
pub fn check_gradients_with<F, H>(
    bindings: &Bindings,
    wrt: &[&str],
    eps: f64,
    build: F,
    tamper: H,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, AutodiffError>,
    H: Fn(&str, &mut Tensor),
{
    check_gradients_floored(bindings, wrt, eps, RELATIVE_FLOOR, build, tamper)
}

/// [`check_gradients_with`] with a custom relative-error floor.
pub fn check_gradients_floored<F, H>(
    bindings: &Bindings,
    wrt: &[&str],
    eps: f64,
    floor: f64,
    build: F,
    tamper: H,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, AutodiffError>,
    H: Fn(&str, &mut Tensor),
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (_, mut analytic) = gradients(bindings, wrt, &build)?;
    let mut scratch = bindings.clone();
    let mut report = BTreeMap::new();
    for &name in wrt {
        let grad = analytic.get_mut(name).expect("requested");
        tamper(name, grad);
        let n = scratch[name].numel();
        let mut entry = GradCheckEntry {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = scratch[name].data()[i];
            scratch.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = scalar_value(&scratch, &build)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = scalar_value(&scratch, &build)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error_floored(a, numeric, floor);
            if err > entry.max_rel_error || i == 0 {
                entry = GradCheckEntry {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.insert(name.to_string(), entry);
    }
    Ok(report)
}

fn scalar_value<F>(bindings: &Bindings, build: &F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId, AutodiffError>,
{
    let v = evaluate(bindings, build)?;
    v.item().ok_or_else(|| AutodiffError::NonScalarRoot(v.shape().to_vec()))
}

/// Largest relative error across a report.
pub fn worst_error(report: &GradCheckReport) -> f64 {
    report.values().map(|e| e.max_rel_error).fold(0.0, f64::max)
}
