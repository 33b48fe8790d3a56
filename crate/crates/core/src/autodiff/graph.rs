use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{AutodiffError, Tensor};

/// Named values bound to the leaves of a graph.
pub type Bindings = BTreeMap<String, Tensor>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written adjoint, for fused kernels that would be
/// wasteful to spell out in primitives.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, String>;

    /// Returns one adjoint per input, in input order. `None` marks an input
    /// that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScalarMul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    BiasAdd(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId, Axis),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MaxRows(NodeId, Vec<usize>),
    MeanRows(NodeId, Option<Vec<bool>>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize),
    Element(NodeId, usize, usize),
    Reshape(NodeId),
    Sum(NodeId),
    Custom(Box<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScalarMul(..) => "scalar_mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::BiasAdd(..) => "bias_add",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::MaxRows(..) => "max_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Element(..) => "element",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Custom(op, _) => op.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Input(String),
    Parameter(String),
    Constant,
    Operation,
}

enum Stored<'a> {
    Owned(Tensor),
    Bound(&'a Tensor),
}

struct Node<'a> {
    op: Op,
    kind: NodeKind,
    value: Stored<'a>,
}

impl Node<'_> {
    fn value(&self) -> &Tensor {
        match &self.value {
            Stored::Owned(t) => t,
            Stored::Bound(t) => t,
        }
    }
}

/// Define-by-run expression graph. Every node's forward value is computed as
/// the node is added; [`Graph::backward`] then sweeps the tape in reverse.
pub struct Graph<'a> {
    bindings: &'a Bindings,
    nodes: Vec<Node<'a>>,
    leaves: HashMap<String, NodeId>,
}

/// Adjoints of every node reached from a scalar root.
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if keep(j) {
            *o = (x[j] - max).exp();
            total += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new(bindings: &'a Bindings) -> Self {
        Graph {
            bindings,
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value()
    }

    pub fn kind(&self, id: NodeId) -> &NodeKind {
        &self.nodes[id.0].kind
    }

    /// Id of the parameter leaf `name`, if the graph uses it.
    pub fn parameter_id(&self, name: &str) -> Option<NodeId> {
        self.leaves
            .get(name)
            .copied()
            .filter(|id| matches!(self.nodes[id.0].kind, NodeKind::Parameter(_)))
    }

    fn bound_leaf(&mut self, name: &str, kind: NodeKind) -> Result<NodeId, AutodiffError> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let value = self
            .bindings
            .get(name)
            .ok_or_else(|| AutodiffError::Unbound(name.to_string()))?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: self.nodes.len(),
                op: "leaf",
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            kind,
            value: Stored::Bound(value),
        });
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// A bound input that never receives gradients of interest.
    pub fn input(&mut self, name: &str) -> Result<NodeId, AutodiffError> {
        self.bound_leaf(name, NodeKind::Input(name.to_string()))
    }

    /// A bound trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId, AutodiffError> {
        self.bound_leaf(name, NodeKind::Parameter(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: self.nodes.len(),
                op: "constant",
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            kind: NodeKind::Constant,
            value: Stored::Owned(value),
        });
        Ok(id)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            kind: NodeKind::Operation,
            value: Stored::Owned(value),
        });
        Ok(id)
    }

    fn matrix(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        self.value(id).dims2().ok_or_else(|| {
            self.shape_err(
                op,
                format!("operand #{} must be a matrix, got {:?}", id.0, self.value(id).shape()),
            )
        })
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(
                op,
                format!("operands #{} {:?} and #{} {:?} differ", a.0, sa, b.0, sb),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    /// `s * a` where `s` is a one-element node.
    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId, AutodiffError> {
        let k = self.value(s).item().ok_or_else(|| {
            self.shape_err("scalar_mul", format!("operand #{} is not a single value", s.0))
        })?;
        let v = self.value(a).map(|x| x * k);
        self.push(Op::ScalarMul(s, a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err(
                "matmul",
                format!("#{} is {m}x{k} but #{} is {k2}x{n}", a.0, b.0),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.matrix(a, "transpose")?;
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Adds a `1 x C` bias row to every row of an `R x C` matrix. The only
    /// broadcasting operation.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(x, "bias_add")?;
        let vb = self.value(bias);
        if vb.numel() != c || vb.rows() != 1 {
            return Err(self.shape_err(
                "bias_add",
                format!("bias #{} {:?} does not fit {r}x{c}", bias.0, vb.shape()),
            ));
        }
        let b = vb.data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(Op::BiasAdd(x, bias), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.softmax_impl(a, None)
    }

    /// Softmax over columns where `mask[j] == false` columns are absent: they
    /// get exactly zero weight and do not enter the normalizer.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, AutodiffError> {
        self.softmax_impl(a, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "softmax")?;
        if let Some(m) = &mask {
            if m.len() != c {
                return Err(self.shape_err("softmax", format!("mask length {} vs {c} columns", m.len())));
            }
            if !m.iter().any(|&k| k) {
                return Err(self.shape_err("softmax", "every column is masked".into()));
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&x.data()[i * c..(i + 1) * c], mask.as_deref(), &mut out[i * c..(i + 1) * c]);
        }
        self.push(Op::Softmax(a), Tensor::matrix(r, c, out)?)
    }

    /// Overflow-safe `log(sum(exp))` reducing `axis`: `Rows` gives `1 x C`,
    /// `Cols` gives `R x 1`.
    pub fn logsumexp(&mut self, a: NodeId, axis: Axis) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "logsumexp")?;
        let x = self.value(a);
        let v = match axis {
            Axis::Cols => Tensor::matrix(
                r,
                1,
                (0..r).map(|i| logsumexp(x.row_slice(i).iter().copied())).collect(),
            )?,
            Axis::Rows => Tensor::matrix(
                1,
                c,
                (0..c)
                    .map(|j| logsumexp((0..r).map(|i| x.at(i, j))))
                    .collect(),
            )?,
        };
        self.push(Op::LogSumExp(a, axis), v)
    }

    /// Concatenation along the last axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no operands".into()));
        }
        let rows = self.matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != rows {
                return Err(self.shape_err("concat_cols", format!("#{} has {r} rows, expected {rows}", p.0)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(rows, total, out)?)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "no operands".into()));
        }
        let cols = self.matrix(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != cols {
                return Err(self.shape_err("concat_rows", format!("#{} has {c} columns, expected {cols}", p.0)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, cols, out)?)
    }

    fn row_mask(&self, mask: Option<&[bool]>, rows: usize, op: &'static str) -> Result<(), AutodiffError> {
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(self.shape_err(op, format!("mask length {} vs {rows} rows", m.len())));
            }
            if !m.iter().any(|&k| k) {
                return Err(self.shape_err(op, "every row is masked".into()));
            }
        }
        Ok(())
    }

    /// Element-wise max over the time (row) axis: `T x C -> 1 x C`.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.max_rows_impl(a, None)
    }

    /// Max over rows where masked rows behave as negative infinity.
    pub fn masked_max_rows(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, AutodiffError> {
        self.max_rows_impl(a, Some(mask.to_vec()))
    }

    fn max_rows_impl(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "max_rows")?;
        self.row_mask(mask.as_deref(), r, "max_rows")?;
        let x = self.value(a);
        let mut best = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for i in 0..r {
            if mask.as_ref().map_or(false, |m| !m[i]) {
                continue;
            }
            for j in 0..c {
                let v = x.at(i, j);
                if v > best[j] {
                    best[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(Op::MaxRows(a, arg), Tensor::row(best))
    }

    /// Mean over the time (row) axis: `T x C -> 1 x C`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.mean_rows_impl(a, None)
    }

    /// Mean over unmasked rows only; masked rows are absent, not zeros.
    pub fn masked_mean_rows(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, AutodiffError> {
        self.mean_rows_impl(a, Some(mask.to_vec()))
    }

    fn mean_rows_impl(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "mean_rows")?;
        self.row_mask(mask.as_deref(), r, "mean_rows")?;
        let x = self.value(a);
        let mut acc = vec![0.0; c];
        let mut count = 0usize;
        for i in 0..r {
            if mask.as_ref().map_or(false, |m| !m[i]) {
                continue;
            }
            count += 1;
            for (o, v) in acc.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut acc {
            *o /= count as f64;
        }
        self.push(Op::MeanRows(a, mask), Tensor::row(acc))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(self.shape_err("slice_cols", format!("range {start}..{end} of {c} columns")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        self.push(Op::SliceCols(a, start, end), Tensor::matrix(r, end - start, out)?)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "slice_rows")?;
        if start >= end || end > r {
            return Err(self.shape_err("slice_rows", format!("range {start}..{end} of {r} rows")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        self.push(Op::SliceRows(a, start), Tensor::matrix(end - start, c, data)?)
    }

    /// A single row as a `1 x C` matrix.
    pub fn select_row(&mut self, a: NodeId, row: usize) -> Result<NodeId, AutodiffError> {
        self.slice_rows(a, row, row + 1)
    }

    /// A single element as a scalar.
    pub fn element(&mut self, a: NodeId, row: usize, col: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.matrix(a, "element")?;
        if row >= r || col >= c {
            return Err(self.shape_err("element", format!("({row},{col}) outside {r}x{c}")));
        }
        let v = self.value(a).at(row, col);
        self.push(Op::Element(a, row, col), Tensor::scalar(v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.numel() {
            return Err(self.shape_err(
                "reshape",
                format!("#{} {:?} cannot become {:?}", a.0, x.shape(), shape),
            ));
        }
        let v = x.reshaped(shape.to_vec())?;
        self.push(Op::Reshape(a), v)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = op
            .forward(&values)
            .map_err(|detail| self.shape_err(op.name(), detail))?;
        self.push(Op::Custom(op, inputs.to_vec()), v)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Adjoints, AutodiffError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = node.value();
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their adjoint for the caller.
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip(&g, vb, |x, y| x * y);
                    let gb = zip(&g, va, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|v| v * k)),
                Op::ScalarMul(s, a) => {
                    let k = self.value(*s).item().unwrap_or(0.0);
                    let va = self.value(*a);
                    let ds: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                    let sshape = self.value(*s).shape().to_vec();
                    acc(&mut grads, *s, Tensor::new(sshape, vec![ds]).expect("one element"));
                    acc(&mut grads, *a, g.map(|v| v * k));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims2().expect("matrix");
                    let n = vb.cols();
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_acc(g.data(), vb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_at_acc(va.data(), g.data(), &mut gb, m, k, n);
                    acc(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    acc(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::BiasAdd(x, b) => {
                    let c = out.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    acc(&mut grads, *b, Tensor::new(bshape, gb)?);
                    acc(&mut grads, *x, g);
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip(&g, out, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, out, |d, y| d * y * (1.0 - y))),
                Op::Exp(a) => acc(&mut grads, *a, zip(&g, out, |d, y| d * y)),
                Op::Log(a) => acc(&mut grads, *a, zip(&g, self.value(*a), |d, x| d / x)),
                Op::Softmax(a) => {
                    let (r, c) = out.dims2().expect("matrix");
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let y = out.row_slice(i);
                        let gy = g.row_slice(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::LogSumExp(a, axis) => {
                    let x = self.value(*a);
                    let (r, c) = x.dims2().expect("matrix");
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let (lse, gv) = match axis {
                                Axis::Cols => (out.data()[i], g.data()[i]),
                                Axis::Rows => (out.data()[j], g.data()[j]),
                            };
                            ga[i * c + j] = gv * (x.at(i, j) - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::ConcatCols(parts) => {
                    let rows = out.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, Tensor::matrix(rows, w, gp)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        let gp = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        acc(&mut grads, p, Tensor::matrix(n / cols.max(1), cols, gp)?);
                    }
                }
                Op::MaxRows(a, arg) => {
                    let (r, c) = self.value(*a).dims2().expect("matrix");
                    let mut ga = vec![0.0; r * c];
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * c + j] = g.data()[j];
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::MeanRows(a, mask) => {
                    let (r, c) = self.value(*a).dims2().expect("matrix");
                    let count = mask.as_ref().map_or(r, |m| m.iter().filter(|&&k| k).count());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        if mask.as_ref().map_or(false, |m| !m[i]) {
                            continue;
                        }
                        for j in 0..c {
                            ga[i * c + j] = g.data()[j] / count as f64;
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.value(*a).dims2().expect("matrix");
                    let w = end - start;
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).dims2().expect("matrix");
                    let mut ga = vec![0.0; r * c];
                    ga[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::Element(a, row, col) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    ga.set(*row, *col, g.data()[0]);
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::new(shape, g.into_data())?);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::filled(&shape, g.data()[0]));
                }
                Op::Custom(op, inputs) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    for (i, gi) in inputs.iter().zip(op.backward(&values, out, &g)) {
                        if let Some(gi) = gi {
                            acc(&mut grads, *i, gi);
                        }
                    }
                }
            }
        }
        Ok(Adjoints { grads })
    }

    /// Gradient of a scalar root with respect to named parameters.
    pub fn gradients(
        &self,
        root: NodeId,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
        let ids = wrt
            .iter()
            .map(|&name| {
                self.parameter_id(name)
                    .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let adj = self.backward(root)?;
        Ok(wrt
            .iter()
            .zip(ids)
            .map(|(&name, id)| {
                let g = adj
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (name.to_string(), g)
            })
            .collect())
    }

    /// Gradients for every parameter leaf in the graph.
    pub fn all_parameter_gradients(&self, root: NodeId) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
        let adj = self.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.leaves {
            if let NodeKind::Parameter(_) = self.nodes[id.0].kind {
                let g = adj
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
