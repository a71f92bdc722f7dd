//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape of primitive operations. Leaves are
//! named slots bound to tensors at evaluation time; everything else is either
//! a baked-in constant or derived. Graphs are immutable once built and safe
//! to share across threads; evaluation and differentiation hold only local
//! state, so identical graph + bindings always produce bit-identical results.
//!
//! The primitive set is exactly what the loss terms in this crate need:
//! affine (`W·x + b`), relu, softmax with temperature, elementwise
//! log/exp/add/sub/mul, scalar scale, l2-normalize, concat, prefix slice,
//! flatten, sum, mean and squared norm.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Leaf bindings for evaluation: leaf name -> tensor value.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradients of a scalar output with respect to a set of leaves.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    map: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: &str) -> Option<&Tensor> {
        self.map.get(leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, leaf: String, grad: Tensor) {
        self.map.insert(leaf, grad);
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String },
    Constant,
    Affine { weight: NodeId, input: NodeId, bias: Option<NodeId> },
    Relu(NodeId),
    /// softmax(x / tau) over a vector.
    Softmax { input: NodeId, tau: f64 },
    Log(NodeId),
    Exp(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale { input: NodeId, factor: f64 },
    L2Normalize(NodeId),
    Concat(Vec<NodeId>),
    Flatten(NodeId),
    /// First `len` entries of a vector starting at `start`.
    Slice { input: NodeId, start: usize, len: usize },
    Sum(NodeId),
    Mean(NodeId),
    /// sum(x_i^2), a scalar.
    SquaredNorm(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// Present only for `Op::Constant`.
    value: Option<Tensor>,
}

/// Append-only computation tape. Node construction validates shapes, so an
/// ill-formed graph cannot be built.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, shape, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Named parameter/input slot. Re-declaring an existing name returns the
    /// original node; the shape must agree.
    pub fn leaf(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(Error::ShapeMismatch {
                    node: format!("leaf '{name}'"),
                    detail: format!(
                        "declared {:?}, previously {:?}",
                        shape, self.nodes[id.0].shape
                    ),
                });
            }
            return Ok(id);
        }
        let id = self.push(Op::Leaf { name: name.to_string() }, shape, None);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    /// `W·x + b` with `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, weight: NodeId, input: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let w = self.shape_of(weight).to_vec();
        let x = self.shape_of(input).to_vec();
        if w.len() != 2 || x.len() != 1 || w[1] != x[0] {
            return Err(Error::ShapeMismatch {
                node: format!("affine#{}", self.nodes.len()),
                detail: format!("weight {:?} x input {:?}", w, x),
            });
        }
        if let Some(b) = bias {
            let bs = self.shape_of(b);
            if bs != [w[0]] {
                return Err(Error::ShapeMismatch {
                    node: format!("affine#{}", self.nodes.len()),
                    detail: format!("bias {:?} vs output [{}]", bs, w[0]),
                });
            }
        }
        Ok(self.push(Op::Affine { weight, input, bias }, vec![w[0]], None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Relu(x), shape, None)
    }

    pub fn softmax(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                node: format!("softmax#{}", self.nodes.len()),
                detail: format!("expected vector, got {:?}", shape),
            });
        }
        if tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        Ok(self.push(Op::Softmax { input: x, tau }, shape, None))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Log(x), shape, None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Exp(x), shape, None)
    }

    fn binary(&mut self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                node: format!("{kind}#{}", self.nodes.len()),
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Scale { input: x, factor }, shape, None)
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                node: format!("l2_normalize#{}", self.nodes.len()),
                detail: format!("expected vector, got {:?}", shape),
            });
        }
        Ok(self.push(Op::L2Normalize(x), shape, None))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != 1 {
                return Err(Error::ShapeMismatch {
                    node: format!("concat#{}", self.nodes.len()),
                    detail: format!("expected vectors, got {:?}", s),
                });
            }
            total += s[0];
        }
        Ok(self.push(Op::Concat(parts.to_vec()), vec![total], None))
    }

    /// Row-major view of any tensor as a vector.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let n: usize = self.shape_of(x).iter().product();
        self.push(Op::Flatten(x), vec![n], None)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape_of(x);
        if s.len() != 1 || start + len > s[0] {
            return Err(Error::ShapeMismatch {
                node: format!("slice#{}", self.nodes.len()),
                detail: format!("slice {start}..{} of {:?}", start + len, s),
            });
        }
        Ok(self.push(Op::Slice { input: x, start, len }, vec![len], None))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![], None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![], None)
    }

    pub fn squared_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SquaredNorm(x), vec![], None)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn node_label(&self, id: NodeId) -> String {
        let kind = match &self.nodes[id.0].op {
            Op::Leaf { name } => return format!("leaf '{name}'"),
            Op::Constant => "const",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Concat(_) => "concat",
            Op::Flatten(_) => "flatten",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredNorm(_) => "squared_norm",
        };
        format!("{kind}#{}", id.0)
    }

    /// Forward pass over the whole tape. Checks bindings and intermediate
    /// finiteness; does not mutate `bindings`.
    fn forward(&self, bindings: &Bindings) -> Result<Vec<Vec<f64>>> {
        for name in self.leaves.keys() {
            if !bindings.contains_key(name) {
                return Err(Error::UnboundLeaf(name.clone()));
            }
        }
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let out: Vec<f64> = match &node.op {
                Op::Leaf { name } => {
                    let t = bindings.get(name).expect("presence checked above");
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            node: self.node_label(id),
                            detail: format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    t.data().to_vec()
                }
                Op::Constant => node.value.as_ref().expect("constant value").data().to_vec(),
                Op::Affine { weight, input, bias } => {
                    let w = &values[weight.0];
                    let x = &values[input.0];
                    let (m, n) = (self.nodes[weight.0].shape[0], self.nodes[weight.0].shape[1]);
                    let mut y = vec![0.0; m];
                    for r in 0..m {
                        let mut acc = 0.0;
                        let row = &w[r * n..(r + 1) * n];
                        for c in 0..n {
                            acc += row[c] * x[c];
                        }
                        y[r] = acc;
                    }
                    if let Some(b) = bias {
                        let bv = &values[b.0];
                        for r in 0..m {
                            y[r] += bv[r];
                        }
                    }
                    y
                }
                Op::Relu(x) => values[x.0].iter().map(|&v| v.max(0.0)).collect(),
                Op::Softmax { input, tau } => {
                    let x = &values[input.0];
                    let inv = 1.0 / tau;
                    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv));
                    let e: Vec<f64> = x.iter().map(|&v| (v * inv - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|&v| v / z).collect()
                }
                Op::Log(x) => values[x.0].iter().map(|&v| v.ln()).collect(),
                Op::Exp(x) => values[x.0].iter().map(|&v| v.exp()).collect(),
                Op::Add(a, b) => values[a.0]
                    .iter()
                    .zip(&values[b.0])
                    .map(|(&u, &v)| u + v)
                    .collect(),
                Op::Sub(a, b) => values[a.0]
                    .iter()
                    .zip(&values[b.0])
                    .map(|(&u, &v)| u - v)
                    .collect(),
                Op::Mul(a, b) => values[a.0]
                    .iter()
                    .zip(&values[b.0])
                    .map(|(&u, &v)| u * v)
                    .collect(),
                Op::Scale { input, factor } => {
                    values[input.0].iter().map(|&v| v * factor).collect()
                }
                Op::L2Normalize(x) => {
                    let v = &values[x.0];
                    let norm = v.iter().map(|&u| u * u).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Err(Error::ZeroNorm {
                            node: self.node_label(id),
                        });
                    }
                    v.iter().map(|&u| u / norm).collect()
                }
                Op::Concat(parts) => {
                    let mut out = Vec::with_capacity(node.shape[0]);
                    for p in parts {
                        out.extend_from_slice(&values[p.0]);
                    }
                    out
                }
                Op::Flatten(x) => values[x.0].clone(),
                Op::Slice { input, start, len } => values[input.0][*start..start + len].to_vec(),
                Op::Sum(x) => vec![values[x.0].iter().sum()],
                Op::Mean(x) => {
                    let v = &values[x.0];
                    vec![v.iter().sum::<f64>() / v.len() as f64]
                }
                Op::SquaredNorm(x) => vec![values[x.0].iter().map(|&v| v * v).sum()],
            };
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    node: self.node_label(id),
                });
            }
            values.push(out);
        }
        Ok(values)
    }

    /// Deterministic forward value of the designated output node.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Tensor> {
        let out = self
            .output
            .ok_or_else(|| Error::InvalidArgument("graph has no output node".into()))?;
        let values = self.forward(bindings)?;
        Tensor::new(self.nodes[out.0].shape.clone(), values[out.0].clone())
    }

    /// Reverse-mode gradients of the scalar output for each leaf in `wrt`.
    pub fn gradient(&self, bindings: &Bindings, wrt: &[String]) -> Result<GradientMap> {
        let out = self
            .output
            .ok_or_else(|| Error::InvalidArgument("graph has no output node".into()))?;
        if !self.nodes[out.0].shape.is_empty() {
            return Err(Error::NonScalarOutput(self.nodes[out.0].shape.clone()));
        }
        for name in wrt {
            if !self.leaves.contains_key(name) {
                return Err(Error::UnboundLeaf(name.clone()));
            }
        }
        let values = self.forward(bindings)?;

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[out.0] = Some(vec![1.0]);

        // Helper: mutable access to an operand's adjoint buffer, zero-filled
        // on first touch. Indexing is split to satisfy the borrow checker.
        fn adj<'a>(
            adjoints: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            id: NodeId,
        ) -> &'a mut Vec<f64> {
            let n: usize = nodes[id.0].shape.iter().product();
            adjoints[id.0].get_or_insert_with(|| vec![0.0; n.max(1)])
        }

        for i in (0..self.nodes.len()).rev() {
            let g = match adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } | Op::Constant => {
                    // Terminal; restore the adjoint for collection below.
                    adjoints[i] = Some(g);
                    continue;
                }
                Op::Affine { weight, input, bias } => {
                    let (m, n) = (self.nodes[weight.0].shape[0], self.nodes[weight.0].shape[1]);
                    let x = values[input.0].clone();
                    let w = values[weight.0].clone();
                    {
                        let dw = adj(&mut adjoints, &self.nodes, *weight);
                        for r in 0..m {
                            for c in 0..n {
                                dw[r * n + c] += g[r] * x[c];
                            }
                        }
                    }
                    {
                        let dx = adj(&mut adjoints, &self.nodes, *input);
                        for c in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += w[r * n + c] * g[r];
                            }
                            dx[c] += acc;
                        }
                    }
                    if let Some(b) = bias {
                        let db = adj(&mut adjoints, &self.nodes, *b);
                        for r in 0..m {
                            db[r] += g[r];
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = values[x.0].clone();
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for (k, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
                Op::Softmax { input, tau } => {
                    let y = values[i].clone();
                    let dot: f64 = g.iter().zip(&y).map(|(&a, &b)| a * b).sum();
                    let inv = 1.0 / tau;
                    let dx = adj(&mut adjoints, &self.nodes, *input);
                    for k in 0..y.len() {
                        dx[k] += inv * y[k] * (g[k] - dot);
                    }
                }
                Op::Log(x) => {
                    let xv = values[x.0].clone();
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for k in 0..xv.len() {
                        dx[k] += g[k] / xv[k];
                    }
                }
                Op::Exp(x) => {
                    let y = values[i].clone();
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for k in 0..y.len() {
                        dx[k] += g[k] * y[k];
                    }
                }
                Op::Add(a, b) => {
                    {
                        let da = adj(&mut adjoints, &self.nodes, *a);
                        for k in 0..g.len() {
                            da[k] += g[k];
                        }
                    }
                    let db = adj(&mut adjoints, &self.nodes, *b);
                    for k in 0..g.len() {
                        db[k] += g[k];
                    }
                }
                Op::Sub(a, b) => {
                    {
                        let da = adj(&mut adjoints, &self.nodes, *a);
                        for k in 0..g.len() {
                            da[k] += g[k];
                        }
                    }
                    let db = adj(&mut adjoints, &self.nodes, *b);
                    for k in 0..g.len() {
                        db[k] -= g[k];
                    }
                }
                Op::Mul(a, b) => {
                    let av = values[a.0].clone();
                    let bv = values[b.0].clone();
                    {
                        let da = adj(&mut adjoints, &self.nodes, *a);
                        for k in 0..g.len() {
                            da[k] += g[k] * bv[k];
                        }
                    }
                    let db = adj(&mut adjoints, &self.nodes, *b);
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                }
                Op::Scale { input, factor } => {
                    let dx = adj(&mut adjoints, &self.nodes, *input);
                    for k in 0..g.len() {
                        dx[k] += factor * g[k];
                    }
                }
                Op::L2Normalize(x) => {
                    let y = values[i].clone();
                    let xv = values[x.0].clone();
                    let norm = xv.iter().map(|&u| u * u).sum::<f64>().sqrt();
                    let dot: f64 = g.iter().zip(&y).map(|(&a, &b)| a * b).sum();
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for k in 0..y.len() {
                        dx[k] += (g[k] - y[k] * dot) / norm;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let n = self.nodes[p.0].shape[0];
                        let dp = adj(&mut adjoints, &self.nodes, p);
                        for k in 0..n {
                            dp[k] += g[offset + k];
                        }
                        offset += n;
                    }
                }
                Op::Flatten(x) => {
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for k in 0..g.len() {
                        dx[k] += g[k];
                    }
                }
                Op::Slice { input, start, len } => {
                    let dx = adj(&mut adjoints, &self.nodes, *input);
                    for k in 0..*len {
                        dx[start + k] += g[k];
                    }
                }
                Op::Sum(x) => {
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for v in dx.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = values[x.0].len() as f64;
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for v in dx.iter_mut() {
                        *v += g[0] / n;
                    }
                }
                Op::SquaredNorm(x) => {
                    let xv = values[x.0].clone();
                    let dx = adj(&mut adjoints, &self.nodes, *x);
                    for k in 0..xv.len() {
                        dx[k] += 2.0 * xv[k] * g[0];
                    }
                }
            }
        }

        let mut out_map = GradientMap::default();
        for name in wrt {
            let id = self.leaves[name];
            let shape = self.nodes[id.0].shape.clone();
            let data = match adjoints[id.0].take() {
                Some(g) => g,
                None => vec![0.0; shape.iter().product::<usize>().max(1)],
            };
            let data = if shape.is_empty() { data } else { data };
            out_map.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(out_map)
    }
}

/// Central-difference gradient estimate `(f(x+h) - f(x-h)) / 2h` for every
/// coordinate of every tensor in `point`. The oracle for all gradient tests.
pub fn finite_diff_gradient<F>(f: F, point: &Bindings, h: f64) -> Result<GradientMap>
where
    F: Fn(&Bindings) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut out = GradientMap::default();
    for (name, tensor) in point.iter() {
        let mut grad = vec![0.0; tensor.len()];
        for k in 0..tensor.len() {
            let mut probe = point.clone();
            let eval_at = |bindings: &mut Bindings, v: f64| -> Result<f64> {
                let t = bindings.get_mut(name).expect("key exists");
                t.data_mut()[k] = v;
                f(bindings)
            };
            let base = tensor.data()[k];
            let up = eval_at(&mut probe, base + h)?;
            let down = eval_at(&mut probe, base - h)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("finite_diff at leaf '{name}'[{k}]"),
                });
            }
            grad[k] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), grad)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(entries: &[(&str, Tensor)]) -> Bindings {
        entries
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// 0.5 * ||x - c||^2 with c baked in as a constant.
    fn half_sq_dist(c: Vec<f64>) -> Graph {
        let n = c.len();
        let mut g = Graph::new();
        let x = g.leaf("x", vec![n]).unwrap();
        let c = g.constant(Tensor::vector(c));
        let d = g.sub(x, c).unwrap();
        let sq = g.squared_norm(d);
        let out = g.scale(sq, 0.5);
        g.set_output(out);
        g
    }

    #[test]
    fn evaluate_half_squared_distance() {
        let g = half_sq_dist(vec![0.0, 0.0]);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        assert_eq!(g.evaluate(&b).unwrap().as_scalar(), Some(2.5));
    }

    #[test]
    fn evaluate_softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.leaf("o", vec![2]).unwrap();
        let s = g.softmax(x, 1.0).unwrap();
        g.set_output(s);
        let b = bind(&[("o", Tensor::vector(vec![0.0, 0.0]))]);
        assert_eq!(g.evaluate(&b).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn gradient_of_half_squared_distance_is_residual() {
        let g = half_sq_dist(vec![0.0, 0.0]);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let grad = g.gradient(&b, &["x".into()]).unwrap();
        assert_eq!(grad.get("x").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_target() {
        // L = -t^T log softmax(o), t = onehot(0).
        let mut g = Graph::new();
        let o = g.leaf("o", vec![2]).unwrap();
        let sm = g.softmax(o, 1.0).unwrap();
        let lg = g.log(sm);
        let t = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let picked = g.mul(lg, t).unwrap();
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0);
        g.set_output(loss);
        let b = bind(&[("o", Tensor::vector(vec![0.0, 0.0]))]);
        let grad = g.gradient(&b, &["o".into()]).unwrap();
        assert_eq!(grad.get("o").unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn tempered_cross_entropy_gradient_matches_closed_form() {
        // L = -t^T log softmax(o/tau); dL/do = (softmax(o/tau) - t) / tau.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for tau in [1.0, 2.0, 5.0] {
            let o: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut t: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = t.iter().sum();
            t.iter_mut().for_each(|v| *v /= z);

            let mut g = Graph::new();
            let on = g.leaf("o", vec![5]).unwrap();
            let sm = g.softmax(on, tau).unwrap();
            let lg = g.log(sm);
            let tn = g.constant(Tensor::vector(t.clone()));
            let picked = g.mul(lg, tn).unwrap();
            let total = g.sum(picked);
            let loss = g.scale(total, -1.0);
            g.set_output(loss);

            let b = bind(&[("o", Tensor::vector(o.clone()))]);
            let grad = g.gradient(&b, &["o".into()]).unwrap();

            // Closed form via an independent softmax.
            let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
            let e: Vec<f64> = o.iter().map(|&v| (v / tau - m).exp()).collect();
            let zsum: f64 = e.iter().sum();
            for (k, &gv) in grad.get("o").unwrap().data().iter().enumerate() {
                let expect = (e[k] / zsum - t[k]) / tau;
                assert!((gv - expect).abs() < 1e-10, "tau={tau} k={k}");
            }
        }
    }

    #[test]
    fn finite_diff_on_square() {
        let g = {
            let mut g = Graph::new();
            let x = g.leaf("x", vec![1]).unwrap();
            let sq = g.squared_norm(x);
            g.set_output(sq);
            g
        };
        let b = bind(&[("x", Tensor::vector(vec![3.0]))]);
        let fd = finite_diff_gradient(
            |p| Ok(g.evaluate(p)?.as_scalar().unwrap()),
            &b,
            1e-6,
        )
        .unwrap();
        assert!((fd.get("x").unwrap().data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let b = bind(&[("x", Tensor::vector(vec![1.0, -2.0, 0.5]))]);
        let fd = finite_diff_gradient(|_| Ok(42.0), &b, 1e-6).unwrap();
        assert!(fd.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    /// Random MLP graph over the full primitive set, for oracle tests.
    fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize], tau: f64) -> (Graph, Bindings) {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cur = g.constant(Tensor::vector(x));
        for (l, win) in dims.windows(2).enumerate() {
            let (n, m) = (win[0], win[1]);
            let wdata: Vec<f64> = (0..m * n).map(|_| rng.random_range(-0.8..0.8)).collect();
            let bdata: Vec<f64> = (0..m).map(|_| rng.random_range(-0.3..0.3)).collect();
            let w = g.leaf(&format!("w{l}"), vec![m, n]).unwrap();
            let bias = g.leaf(&format!("b{l}"), vec![m]).unwrap();
            b.insert(format!("w{l}"), Tensor::matrix(m, n, wdata).unwrap());
            b.insert(format!("b{l}"), Tensor::vector(bdata));
            cur = g.affine(w, cur, Some(bias)).unwrap();
            if l + 2 < dims.len() {
                cur = g.relu(cur);
            }
        }
        let sm = g.softmax(cur, tau).unwrap();
        let lg = g.log(sm);
        let c = dims[dims.len() - 1];
        let mut t: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = t.iter().sum();
        t.iter_mut().for_each(|v| *v /= z);
        let tn = g.constant(Tensor::vector(t));
        let picked = g.mul(lg, tn).unwrap();
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0);
        g.set_output(loss);
        (g, b)
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_mlps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let (g, b) = random_mlp(&mut rng, &[4, 6, 3], 1.0 + (case % 3) as f64);
            let names: Vec<String> = g.leaf_names().cloned().collect();
            let grad = g.gradient(&b, &names).unwrap();
            let fd = finite_diff_gradient(
                |p| Ok(g.evaluate(p)?.as_scalar().unwrap()),
                &b,
                1e-6,
            )
            .unwrap();
            for name in &names {
                let a = grad.get(name).unwrap().data();
                let e = fd.get(name).unwrap().data();
                for k in 0..a.len() {
                    let denom = e[k].abs().max(1.0);
                    assert!(
                        (a[k] - e[k]).abs() / denom < 1e-5,
                        "case {case} leaf {name}[{k}]: {} vs {}",
                        a[k],
                        e[k]
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, b) = random_mlp(&mut rng, &[5, 8, 4], 2.0);
        let names: Vec<String> = g.leaf_names().cloned().collect();
        let v1 = g.evaluate(&b).unwrap();
        let v2 = g.evaluate(&b).unwrap();
        assert_eq!(v1.data(), v2.data());
        let g1 = g.gradient(&b, &names).unwrap();
        let g2 = g.gradient(&b, &names).unwrap();
        for n in &names {
            assert_eq!(g1.get(n).unwrap().data(), g2.get(n).unwrap().data());
        }
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        // Each loss is its own subgraph over shared leaves, so the combined
        // tape accumulates the two contributions in the same order as the
        // separate runs. Power-of-two coefficients keep the scaling exact in
        // f64 and the comparison can be bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [3, 5, 2];
        let (a, b) = (2.0, 0.25);

        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut bi = Bindings::new();
        for (l, win) in dims.windows(2).enumerate() {
            let (n, m) = (win[0], win[1]);
            let wd: Vec<f64> = (0..m * n).map(|_| rng.random_range(-0.5..0.5)).collect();
            bi.insert(format!("w{l}"), Tensor::matrix(m, n, wd).unwrap());
        }

        // Forward chain rebuilt per loss head; leaves shared by name.
        let chain = |g: &mut Graph| -> NodeId {
            let mut cur = g.constant(Tensor::vector(x.clone()));
            for (l, win) in dims.windows(2).enumerate() {
                let (n, m) = (win[0], win[1]);
                let w = g.leaf(&format!("w{l}"), vec![m, n]).unwrap();
                cur = g.affine(w, cur, None).unwrap();
                if l + 2 < dims.len() {
                    cur = g.relu(cur);
                }
            }
            cur
        };
        let head1 = |g: &mut Graph| -> NodeId {
            let cur = chain(g);
            g.squared_norm(cur)
        };
        let head2 = |g: &mut Graph| -> NodeId {
            let cur = chain(g);
            let sm = g.softmax(cur, 1.0).unwrap();
            let lgn = g.log(sm);
            let t = g.constant(Tensor::vector(vec![1.0, 0.0]));
            let picked = g.mul(lgn, t).unwrap();
            let tot = g.sum(picked);
            g.scale(tot, -1.0)
        };

        let mut g1 = Graph::new();
        let o1 = head1(&mut g1);
        g1.set_output(o1);
        let mut g2 = Graph::new();
        let o2 = head2(&mut g2);
        g2.set_output(o2);
        let mut gc = Graph::new();
        let c1 = head1(&mut gc);
        let c2 = head2(&mut gc);
        let s1 = gc.scale(c1, a);
        let s2 = gc.scale(c2, b);
        let combined = gc.add(s1, s2).unwrap();
        gc.set_output(combined);

        let names: Vec<String> = g1.leaf_names().cloned().collect();
        let d1 = g1.gradient(&bi, &names).unwrap();
        let d2 = g2.gradient(&bi, &names).unwrap();
        let dc = gc.gradient(&bi, &names).unwrap();
        for n in &names {
            let combo: Vec<f64> = d1
                .get(n)
                .unwrap()
                .data()
                .iter()
                .zip(d2.get(n).unwrap().data())
                .map(|(&u, &v)| a * u + b * v)
                .collect();
            assert_eq!(dc.get(n).unwrap().data(), combo.as_slice(), "leaf {n}");
        }
    }

    #[test]
    fn non_scalar_output_rejected_for_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![2]).unwrap();
        let r = g.relu(x);
        g.set_output(r);
        let b = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        assert!(matches!(
            g.gradient(&b, &["x".into()]),
            Err(Error::NonScalarOutput(_))
        ));
    }

    #[test]
    fn unbound_leaf_rejected() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let s = g.squared_norm(x);
        g.set_output(s);
        assert!(matches!(
            g.evaluate(&Bindings::new()),
            Err(Error::UnboundLeaf(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let w = g.leaf("w", vec![2, 3]).unwrap();
        let x = g.leaf("x", vec![2]).unwrap();
        let err = g.affine(w, x, None).unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert!(node.starts_with("affine")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_zero_vector_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", vec![2]).unwrap();
        let n = g.l2_normalize(x).unwrap();
        let s = g.sum(n);
        g.set_output(s);
        let b = bind(&[("x", Tensor::vector(vec![0.0, 0.0]))]);
        assert!(matches!(g.evaluate(&b), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        // log(0) = -inf must be caught and attributed.
        let mut g = Graph::new();
        let x = g.leaf("x", vec![1]).unwrap();
        let l = g.log(x);
        let s = g.sum(l);
        g.set_output(s);
        let b = bind(&[("x", Tensor::vector(vec![0.0]))]);
        assert!(matches!(g.evaluate(&b), Err(Error::NonFinite { .. })));
    }
}
