//! Reverse-mode differentiation over a fixed matrix op set.
//!
//! A [`Tape`] is a static graph: named parameters and constants are baked in
//! at build time, per-evaluation data is bound to input nodes, and every op
//! records enough to run the backward pass. The op set is exactly what the
//! token encoder and the training losses need; there is no broadcasting and
//! no dynamic control flow.
//!
//! Parameters carry a trainable flag. Frozen parameters never appear in the
//! returned [`GradSet`]. Stop-gradient is an explicit node: the value passes
//! through forward, nothing propagates backward.

pub mod check;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{CholFactor, Mat};

pub type NodeId = usize;

/// Per-evaluation bindings for input nodes.
pub type Bindings = BTreeMap<String, Mat>;

/// What the row-normalization op does when it meets an exactly zero row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroNormPolicy {
    /// Undefined cosine: fail the evaluation.
    Fail,
    /// Map the row to zero (similarity 0) and log a warning.
    ZeroWithWarning,
}

#[derive(Debug, Clone)]
enum Node {
    Param(String),
    Input(String),
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    RowsSlice {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ColsSlice {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LayerNormRows {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    L2NormalizeRows {
        input: NodeId,
        on_zero: ZeroNormPolicy,
    },
    StopGrad(NodeId),
    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Mahalanobis distance between two row vectors under a fixed factor.
    /// The factor comes from the frozen old network and is a constant of the
    /// graph: gradients flow only through the row endpoints.
    Mahalanobis {
        a: NodeId,
        b: NodeId,
        chol: Arc<CholFactor>,
    },
}

struct ParamSlot {
    node: NodeId,
    value: Mat,
    trainable: bool,
}

/// Gradients keyed by parameter name; trainable parameters only.
pub type GradSet = BTreeMap<String, Mat>;

/// The recorded computation. Build once, evaluate many times.
pub struct Tape {
    nodes: Vec<Node>,
    shapes: Vec<(usize, usize)>,
    consts: BTreeMap<NodeId, Mat>,
    params: BTreeMap<String, ParamSlot>,
    inputs: BTreeMap<String, NodeId>,
    values: Vec<Mat>,
    evaluated: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            shapes: Vec::new(),
            consts: BTreeMap::new(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            values: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.shapes[id]
    }

    fn push(&mut self, node: Node, shape: (usize, usize)) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.shapes.push(shape);
        self.evaluated = false;
        id
    }

    fn mismatch(&self, op: &str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op: op.to_string(),
            detail,
        }
    }

    // ---- leaves ----

    /// Registers a named parameter. Re-registering the same name is an error.
    pub fn param(&mut self, name: &str, value: Mat, trainable: bool) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidInput(format!(
                "parameter {name} registered twice"
            )));
        }
        let shape = (value.rows, value.cols);
        let id = self.push(Node::Param(name.to_string()), shape);
        self.params.insert(
            name.to_string(),
            ParamSlot {
                node: id,
                value,
                trainable,
            },
        );
        Ok(id)
    }

    /// Declares a per-evaluation input of fixed shape.
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidInput(format!("input {name} declared twice")));
        }
        let id = self.push(Node::Input(name.to_string()), (rows, cols));
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        let shape = (value.rows, value.cols);
        let id = self.push(Node::Const, shape);
        self.consts.insert(id, value);
        id
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Mat::from_vec(1, 1, vec![v]))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shapes[a];
        let (br, bc) = self.shapes[b];
        if ac != br {
            return Err(self.mismatch("matmul", format!("{ar}x{ac} by {br}x{bc}")));
        }
        Ok(self.push(Node::MatMul(a, b), (ar, bc)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shapes[a];
        if sa != self.shapes[b] {
            return Err(self.mismatch("add", format!("{:?} vs {:?}", sa, self.shapes[b])));
        }
        Ok(self.push(Node::Add(a, b), sa))
    }

    pub fn add_n(&mut self, terms: Vec<NodeId>) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(self.mismatch("add_n", "no terms".into()));
        }
        let s = self.shapes[terms[0]];
        for &t in &terms {
            if self.shapes[t] != s {
                return Err(self.mismatch("add_n", format!("{:?} vs {:?}", s, self.shapes[t])));
            }
        }
        Ok(self.push(Node::AddN(terms), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shapes[a];
        if sa != self.shapes[b] {
            return Err(self.mismatch("sub", format!("{:?} vs {:?}", sa, self.shapes[b])));
        }
        Ok(self.push(Node::Sub(a, b), sa))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shapes[a];
        self.push(Node::Scale(a, c), s)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shapes[a];
        self.push(Node::Transpose(a), (c, r))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a];
        self.push(Node::Relu(a), s)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a];
        self.push(Node::Abs(a), s)
    }

    pub fn rows_slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shapes[input];
        if start + len > r {
            return Err(self.mismatch("rows_slice", format!("[{start}..{}] of {r} rows", start + len)));
        }
        Ok(self.push(Node::RowsSlice { input, start, len }, (len, c)))
    }

    pub fn cols_slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shapes[input];
        if start + len > c {
            return Err(self.mismatch("cols_slice", format!("[{start}..{}] of {c} cols", start + len)));
        }
        Ok(self.push(Node::ColsSlice { input, start, len }, (r, len)))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_rows", "no parts".into()));
        }
        let cols = self.shapes[parts[0]].1;
        let mut rows = 0;
        for &p in &parts {
            let (r, c) = self.shapes[p];
            if c != cols {
                return Err(self.mismatch("concat_rows", format!("cols {c} vs {cols}")));
            }
            rows += r;
        }
        Ok(self.push(Node::ConcatRows(parts), (rows, cols)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a];
        self.push(Node::SoftmaxRows(a), s)
    }

    pub fn layer_norm_rows(
        &mut self,
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.shapes[input];
        if self.shapes[gain] != (1, c) || self.shapes[bias] != (1, c) {
            return Err(self.mismatch(
                "layer_norm_rows",
                format!(
                    "input {r}x{c}, gain {:?}, bias {:?}",
                    self.shapes[gain], self.shapes[bias]
                ),
            ));
        }
        Ok(self.push(
            Node::LayerNormRows {
                input,
                gain,
                bias,
                eps,
            },
            (r, c),
        ))
    }

    pub fn l2_normalize_rows(&mut self, input: NodeId, on_zero: ZeroNormPolicy) -> NodeId {
        let s = self.shapes[input];
        self.push(Node::L2NormalizeRows { input, on_zero }, s)
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a];
        self.push(Node::StopGrad(a), s)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.shapes[logits];
        if labels.len() != r {
            return Err(self.mismatch(
                "softmax_cross_entropy",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(self.mismatch(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        Ok(self.push(Node::SoftmaxCrossEntropy { logits, labels }, (1, 1)))
    }

    pub fn mahalanobis(&mut self, a: NodeId, b: NodeId, chol: Arc<CholFactor>) -> Result<NodeId> {
        let sa = self.shapes[a];
        let sb = self.shapes[b];
        let d = chol.dim();
        if sa != (1, d) || sb != (1, d) {
            return Err(self.mismatch(
                "mahalanobis",
                format!("rows {sa:?}, {sb:?} against factor dim {d}"),
            ));
        }
        Ok(self.push(Node::Mahalanobis { a, b, chol }, (1, 1)))
    }

    // ---- parameter access ----

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).map(|s| s.node)
    }

    pub fn param_value(&self, name: &str) -> Option<&Mat> {
        self.params.get(name).map(|s| &s.value)
    }

    pub fn set_param(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if (value.rows, value.cols) != (slot.value.rows, slot.value.cols) {
            return Err(Error::DimMismatch(format!(
                "set_param {name}: {}x{} vs registered {}x{}",
                value.rows, value.cols, slot.value.rows, slot.value.cols
            )));
        }
        slot.value = value;
        self.evaluated = false;
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, s)| s.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    // ---- evaluation ----

    /// Runs the forward pass, recording every intermediate for backward.
    /// Deterministic: the same tape, parameters, and inputs always produce
    /// bitwise-identical values.
    pub fn forward(&mut self, inputs: &Bindings) -> Result<()> {
        let n = self.nodes.len();
        let mut values: Vec<Mat> = Vec::with_capacity(n);
        for id in 0..n {
            let value = match &self.nodes[id] {
                Node::Param(name) => self.params[name].value.clone(),
                Node::Input(name) => {
                    let m = inputs.get(name).ok_or_else(|| {
                        Error::InvalidInput(format!("input {name} not bound"))
                    })?;
                    if (m.rows, m.cols) != self.shapes[id] {
                        return Err(Error::ShapeMismatch {
                            node: id,
                            op: "input".into(),
                            detail: format!(
                                "bound {}x{}, declared {:?}",
                                m.rows, m.cols, self.shapes[id]
                            ),
                        });
                    }
                    m.clone()
                }
                Node::Const => self.consts[&id].clone(),
                Node::MatMul(a, b) => values[*a].matmul(&values[*b]),
                Node::Add(a, b) => values[*a].add(&values[*b]),
                Node::AddN(terms) => {
                    let mut acc = values[terms[0]].clone();
                    for &t in &terms[1..] {
                        acc = acc.add(&values[t]);
                    }
                    acc
                }
                Node::Sub(a, b) => values[*a].sub(&values[*b]),
                Node::Scale(a, c) => values[*a].scale(*c),
                Node::Transpose(a) => values[*a].transpose(),
                Node::Relu(a) => {
                    let mut m = values[*a].clone();
                    for v in &mut m.data {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    m
                }
                Node::Abs(a) => {
                    let mut m = values[*a].clone();
                    for v in &mut m.data {
                        *v = v.abs();
                    }
                    m
                }
                Node::RowsSlice { input, start, len } => {
                    let src = &values[*input];
                    let c = src.cols;
                    Mat::from_vec(
                        *len,
                        c,
                        src.data[start * c..(start + len) * c].to_vec(),
                    )
                }
                Node::ColsSlice { input, start, len } => {
                    let src = &values[*input];
                    let mut out = Mat::zeros(src.rows, *len);
                    for i in 0..src.rows {
                        for j in 0..*len {
                            out.set(i, j, src.at(i, start + j));
                        }
                    }
                    out
                }
                Node::ConcatRows(parts) => {
                    let cols = values[parts[0]].cols;
                    let mut data = Vec::new();
                    for &p in parts {
                        data.extend_from_slice(&values[p].data);
                    }
                    Mat::from_vec(data.len() / cols, cols, data)
                }
                Node::SoftmaxRows(a) => softmax_rows(&values[*a]),
                Node::LayerNormRows {
                    input,
                    gain,
                    bias,
                    eps,
                } => layer_norm_rows(&values[*input], &values[*gain], &values[*bias], *eps),
                Node::L2NormalizeRows { input, on_zero } => {
                    l2_normalize_rows(&values[*input], *on_zero, id)?
                }
                Node::StopGrad(a) => values[*a].clone(),
                Node::SoftmaxCrossEntropy { logits, labels } => {
                    softmax_cross_entropy(&values[*logits], labels)
                }
                Node::Mahalanobis { a, b, chol } => {
                    let diff: Vec<f64> = values[*a]
                        .data
                        .iter()
                        .zip(&values[*b].data)
                        .map(|(x, y)| x - y)
                        .collect();
                    let z = chol.forward_solve(&diff);
                    let d = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    Mat::from_vec(1, 1, vec![d])
                }
            };
            values.push(value);
        }
        self.values = values;
        self.evaluated = true;
        Ok(())
    }

    /// Value of a node after [`Tape::forward`].
    pub fn value(&self, id: NodeId) -> &Mat {
        assert!(self.evaluated, "tape not evaluated");
        &self.values[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows, v.cols), (1, 1), "node {id} is not scalar");
        v.data[0]
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// trainable parameter (zero when the parameter does not reach the loss);
    /// frozen parameters are absent.
    pub fn backward(&self, loss: NodeId) -> Result<GradSet> {
        if !self.evaluated {
            return Err(Error::InvalidInput("backward before forward".into()));
        }
        let (r, c) = self.shapes[loss];
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss {
                node: loss,
                rows: r,
                cols: c,
            });
        }
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Mat>> = vec![None; n];
        adjoints[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            match &self.nodes[id] {
                Node::Param(_) | Node::Input(_) | Node::Const => {
                    adjoints[id] = Some(g); // restore leaf adjoint for collection
                    continue;
                }
                Node::MatMul(a, b) => {
                    let da = g.matmul(&self.values[*b].transpose());
                    let db = self.values[*a].transpose().matmul(&g);
                    acc(&mut adjoints, *a, da);
                    acc(&mut adjoints, *b, db);
                }
                Node::Add(a, b) => {
                    acc(&mut adjoints, *a, g.clone());
                    acc(&mut adjoints, *b, g);
                }
                Node::AddN(terms) => {
                    for &t in terms {
                        acc(&mut adjoints, t, g.clone());
                    }
                }
                Node::Sub(a, b) => {
                    acc(&mut adjoints, *a, g.clone());
                    acc(&mut adjoints, *b, g.scale(-1.0));
                }
                Node::Scale(a, cst) => acc(&mut adjoints, *a, g.scale(*cst)),
                Node::Transpose(a) => acc(&mut adjoints, *a, g.transpose()),
                Node::Relu(a) => {
                    let x = &self.values[*a];
                    let mut dx = g;
                    for (dv, xv) in dx.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(&mut adjoints, *a, dx);
                }
                Node::Abs(a) => {
                    let x = &self.values[*a];
                    let mut dx = g;
                    for (dv, xv) in dx.data.iter_mut().zip(&x.data) {
                        *dv *= if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    acc(&mut adjoints, *a, dx);
                }
                Node::RowsSlice { input, start, len } => {
                    let (r, c) = self.shapes[*input];
                    let mut dx = Mat::zeros(r, c);
                    dx.data[start * c..(start + len) * c].copy_from_slice(&g.data);
                    acc(&mut adjoints, *input, dx);
                }
                Node::ColsSlice { input, start, .. } => {
                    let (r, c) = self.shapes[*input];
                    let mut dx = Mat::zeros(r, c);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            dx.set(i, start + j, g.at(i, j));
                        }
                    }
                    acc(&mut adjoints, *input, dx);
                }
                Node::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.shapes[p];
                        let dx = Mat::from_vec(
                            pr,
                            pc,
                            g.data[offset * pc..(offset + pr) * pc].to_vec(),
                        );
                        acc(&mut adjoints, p, dx);
                        offset += pr;
                    }
                }
                Node::SoftmaxRows(a) => {
                    let y = &self.values[id];
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let gy: f64 = (0..y.cols).map(|j| g.at(i, j) * y.at(i, j)).sum();
                        for j in 0..y.cols {
                            dx.set(i, j, y.at(i, j) * (g.at(i, j) - gy));
                        }
                    }
                    acc(&mut adjoints, *a, dx);
                }
                Node::LayerNormRows {
                    input,
                    gain,
                    bias,
                    eps,
                } => {
                    let x = &self.values[*input];
                    let gamma = &self.values[*gain];
                    let d = x.cols as f64;
                    let mut dx = Mat::zeros(x.rows, x.cols);
                    let mut dgamma = Mat::zeros(1, x.cols);
                    let mut dbeta = Mat::zeros(1, x.cols);
                    for i in 0..x.rows {
                        let row = x.row(i);
                        let mean = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let sigma = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sigma).collect();
                        let gh: Vec<f64> = (0..x.cols)
                            .map(|j| g.at(i, j) * gamma.data[j])
                            .collect();
                        let mean_gh = gh.iter().sum::<f64>() / d;
                        let mean_ghx = gh
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d;
                        for j in 0..x.cols {
                            dx.set(i, j, (gh[j] - mean_gh - xhat[j] * mean_ghx) / sigma);
                            dgamma.data[j] += g.at(i, j) * xhat[j];
                            dbeta.data[j] += g.at(i, j);
                        }
                    }
                    acc(&mut adjoints, *input, dx);
                    acc(&mut adjoints, *gain, dgamma);
                    acc(&mut adjoints, *bias, dbeta);
                }
                Node::L2NormalizeRows { input, .. } => {
                    let x = &self.values[*input];
                    let y = &self.values[id];
                    let mut dx = Mat::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let r = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if r == 0.0 {
                            continue; // zero row mapped to zero, zero gradient
                        }
                        let gy: f64 = (0..x.cols).map(|j| g.at(i, j) * y.at(i, j)).sum();
                        for j in 0..x.cols {
                            dx.set(i, j, (g.at(i, j) - gy * y.at(i, j)) / r);
                        }
                    }
                    acc(&mut adjoints, *input, dx);
                }
                Node::StopGrad(_) => {
                    // value passes forward, nothing flows back
                }
                Node::SoftmaxCrossEntropy { logits, labels } => {
                    let l = &self.values[*logits];
                    let scale = g.data[0] / l.rows as f64;
                    let probs = softmax_rows(l);
                    let mut dx = probs;
                    for (i, &label) in labels.iter().enumerate() {
                        let v = dx.at(i, label);
                        dx.set(i, label, v - 1.0);
                    }
                    for v in &mut dx.data {
                        *v *= scale;
                    }
                    acc(&mut adjoints, *logits, dx);
                }
                Node::Mahalanobis { a, b, chol } => {
                    let dist = self.values[id].data[0];
                    if dist != 0.0 {
                        let diff: Vec<f64> = self.values[*a]
                            .data
                            .iter()
                            .zip(&self.values[*b].data)
                            .map(|(x, y)| x - y)
                            .collect();
                        let z = chol.forward_solve(&diff);
                        let v = chol.backward_solve(&z); // Sigma^{-1} (a - b)
                        let s = g.data[0] / dist;
                        let da = Mat::from_vec(1, v.len(), v.iter().map(|x| x * s).collect());
                        let db = da.scale(-1.0);
                        acc(&mut adjoints, *a, da);
                        acc(&mut adjoints, *b, db);
                    }
                    // at zero distance the subgradient 0 is used
                }
            }
        }

        let mut grads = GradSet::new();
        for (name, slot) in &self.params {
            if !slot.trainable {
                continue;
            }
            let g = adjoints[slot.node]
                .take()
                .unwrap_or_else(|| Mat::zeros(slot.value.rows, slot.value.cols));
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }
}

fn acc(adjoints: &mut [Option<Mat>], id: NodeId, delta: Mat) {
    match &mut adjoints[id] {
        Some(existing) => *existing = existing.add(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..x.cols {
            out.set(i, j, exps[j] / sum);
        }
    }
    out
}

fn layer_norm_rows(x: &Mat, gain: &Mat, bias: &Mat, eps: f64) -> Mat {
    let d = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let sigma = (var + eps).sqrt();
        for j in 0..x.cols {
            out.set(i, j, gain.data[j] * (row[j] - mean) / sigma + bias.data[j]);
        }
    }
    out
}

fn l2_normalize_rows(x: &Mat, on_zero: ZeroNormPolicy, node: NodeId) -> Result<Mat> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let r = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if r == 0.0 {
            match on_zero {
                ZeroNormPolicy::Fail => {
                    return Err(Error::InvalidInput(format!(
                        "zero-norm row {i} at node {node}: cosine undefined"
                    )));
                }
                ZeroNormPolicy::ZeroWithWarning => {
                    log::warn!("zero-norm row {i} at node {node}: similarity treated as 0");
                    continue;
                }
            }
        }
        for j in 0..x.cols {
            out.set(i, j, x.at(i, j) / r);
        }
    }
    Ok(out)
}

fn softmax_cross_entropy(logits: &Mat, labels: &[usize]) -> Mat {
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Mat::from_vec(1, 1, vec![total / labels.len() as f64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky_decompose, SymMatrix};

    #[test]
    fn identity_graph_passes_value_and_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Mat::from_vec(1, 1, vec![3.0]), true).unwrap();
        let y = tape.scale(x, 1.0);
        tape.forward(&Bindings::new()).unwrap();
        assert_eq!(tape.scalar_value(y), 3.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["x"].data[0], 1.0);
    }

    #[test]
    fn matmul_with_identity_is_identity() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]), true)
            .unwrap();
        let w = tape.constant(Mat::identity(3));
        let y = tape.matmul(x, w).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", Mat::from_vec(1, 4, vec![0.3, -1.7, 2.9, 0.01]), true)
            .unwrap();
        let n = tape.l2_normalize_rows(x, ZeroNormPolicy::Fail);
        let s = tape.softmax_rows(n);
        tape.forward(&Bindings::new()).unwrap();
        let first: Vec<u64> = tape.value(s).data.iter().map(|v| v.to_bits()).collect();
        tape.forward(&Bindings::new()).unwrap();
        let second: Vec<u64> = tape.value(s).data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        // y = x x^T at x = (1, 2) has gradient 2x = (2, 4)
        let mut tape = Tape::new();
        let x = tape
            .param("x", Mat::from_vec(1, 2, vec![1.0, 2.0]), true)
            .unwrap();
        let xt = tape.transpose(x);
        let y = tape.matmul(x, xt).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        assert_eq!(tape.scalar_value(y), 5.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["x"].data, vec![2.0, 4.0]);
    }

    #[test]
    fn stop_grad_blocks_one_branch() {
        // y = stopgrad(x) * x at x = 3 has gradient 3, not 6
        let mut tape = Tape::new();
        let x = tape.param("x", Mat::from_vec(1, 1, vec![3.0]), true).unwrap();
        let frozen = tape.stop_grad(x);
        let y = tape.matmul(frozen, x).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        assert_eq!(tape.scalar_value(y), 9.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["x"].data[0], 3.0);
    }

    #[test]
    fn frozen_params_absent_from_gradset() {
        let mut tape = Tape::new();
        let x = tape.param("x", Mat::from_vec(1, 1, vec![2.0]), true).unwrap();
        let w = tape
            .param("w", Mat::from_vec(1, 1, vec![5.0]), false)
            .unwrap();
        let y = tape.matmul(x, w).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("w"));
    }

    #[test]
    fn unreachable_trainable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Mat::from_vec(1, 1, vec![2.0]), true).unwrap();
        tape.param("unused", Mat::from_vec(1, 2, vec![1.0, 1.0]), true)
            .unwrap();
        let y = tape.scale(x, 2.0);
        tape.forward(&Bindings::new()).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["unused"].data, vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", Mat::from_vec(1, 2, vec![1.0, 2.0]), true)
            .unwrap();
        tape.forward(&Bindings::new()).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let build = |combine: bool| -> (Mat, Mat) {
            let mut tape = Tape::new();
            let x = tape
                .param("x", Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]), true)
                .unwrap();
            let xt = tape.transpose(x);
            let quad = tape.matmul(x, xt).unwrap();
            let w = tape.constant(Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
            let lin = tape.matmul(x, w).unwrap();
            tape.forward(&Bindings::new()).unwrap();
            if combine {
                let mut tape2 = Tape::new();
                let x2 = tape2
                    .param("x", Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]), true)
                    .unwrap();
                let xt2 = tape2.transpose(x2);
                let quad2 = tape2.matmul(x2, xt2).unwrap();
                let w2 = tape2.constant(Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
                let lin2 = tape2.matmul(x2, w2).unwrap();
                let sum = tape2.add(quad2, lin2).unwrap();
                tape2.forward(&Bindings::new()).unwrap();
                let g = tape2.backward(sum).unwrap();
                (g["x"].clone(), g["x"].clone())
            } else {
                let g1 = tape.backward(quad).unwrap();
                let g2 = tape.backward(lin).unwrap();
                (g1["x"].clone(), g2["x"].clone())
            }
        };
        let (combined, _) = build(true);
        let (gq, gl) = build(false);
        let summed = gq.add(&gl);
        assert_eq!(combined.data, summed.data);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Mat::zeros(2, 4));
        let loss = tape.softmax_cross_entropy(logits, vec![0, 3]).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        let v = tape.scalar_value(loss);
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_node_matches_linalg() {
        let sigma = SymMatrix::from_diag(&[4.0, 1.0]);
        let chol = Arc::new(cholesky_decompose(&sigma).unwrap());
        let mut tape = Tape::new();
        let a = tape
            .param("a", Mat::from_vec(1, 2, vec![2.0, 1.0]), true)
            .unwrap();
        let b = tape.constant(Mat::zeros(1, 2));
        let d = tape.mahalanobis(a, b, chol).unwrap();
        tape.forward(&Bindings::new()).unwrap();
        assert!((tape.scalar_value(d) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn input_rebinding_changes_output() {
        let mut tape = Tape::new();
        let x = tape.input("x", 1, 2).unwrap();
        let w = tape.constant(Mat::from_vec(2, 1, vec![1.0, 10.0]));
        let y = tape.matmul(x, w).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), Mat::from_vec(1, 2, vec![1.0, 1.0]));
        tape.forward(&b).unwrap();
        assert_eq!(tape.scalar_value(y), 11.0);
        b.insert("x".into(), Mat::from_vec(1, 2, vec![2.0, 0.0]));
        tape.forward(&b).unwrap();
        assert_eq!(tape.scalar_value(y), 2.0);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Mat::zeros(2, 3));
        let b = tape.constant(Mat::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
