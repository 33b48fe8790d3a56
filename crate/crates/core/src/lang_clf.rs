//! Sentence-level language classifier over the attention output:
//! `[h0, maxpool(H), meanpool(H)]` followed by one linear layer.

use rand::Rng;

use crate::autodiff::{AutodiffError, Axis, Bindings, Graph, NodeId, Tensor};

/// Parameter names with shapes for a `width`-dimensional input and
/// `classes` languages.
pub fn parameter_shapes(width: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("lang.w".into(), vec![3 * width, classes]),
        ("lang.b".into(), vec![1, classes]),
    ]
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn init_params(width: usize, classes: usize, rng: &mut impl Rng, store: &mut Bindings) {
    let bound = 1.0 / ((3 * width) as f64).sqrt();
    for (name, shape) in parameter_shapes(width, classes) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(name, Tensor::new(shape, data).expect("shape"));
    }
}

/// `1 x 3W` concatenation of row 0, the masked column-wise max and the
/// masked column-wise mean of `H`.
pub fn concat_pool(g: &mut Graph<'_>, h: NodeId, mask: &[bool]) -> Result<NodeId, AutodiffError> {
    if !mask.first().copied().unwrap_or(false) {
        return Err(AutodiffError::Shape {
            node: h.index(),
            op: "concat_pool",
            detail: "position 0 must be unmasked".into(),
        });
    }
    let first = g.select_row(h, 0)?;
    let max = g.masked_max_rows(h, mask)?;
    let mean = g.masked_mean_rows(h, mask)?;
    g.concat_cols(&[first, max, mean])
}

/// `1 x C` language logits.
pub fn classify(g: &mut Graph<'_>, h: NodeId, mask: &[bool]) -> Result<NodeId, AutodiffError> {
    let pooled = concat_pool(g, h, mask)?;
    let w = g.param("lang.w")?;
    let b = g.param("lang.b")?;
    let z = g.matmul(pooled, w)?;
    g.bias_add(z, b)
}

/// Softmax cross-entropy of a `1 x C` logit row against class `gold`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: NodeId, gold: usize) -> Result<NodeId, AutodiffError> {
    let lse = g.logsumexp(logits, Axis::Cols)?;
    let lse = g.reshape(lse, &[])?;
    let target = g.element(logits, 0, gold)?;
    g.sub(lse, target)
}

/// Softmax of a logit vector.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}
