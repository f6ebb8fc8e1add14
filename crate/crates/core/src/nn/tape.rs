//! Reverse-mode automatic differentiation on a linear tape of rank-2 values.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! tape in reverse and accumulates gradients into a name-keyed map for the
//! parameter leaves.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::nn::params::ParamStore;

pub type NodeId = usize;

/// Gradients keyed by parameter name, produced by one backward pass.
pub type GradMap = HashMap<String, Array2<f64>>;

enum Op {
    Constant,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x (n×d) plus a (1×d) row broadcast over all rows.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    /// Mean negative log-likelihood over (row, class) targets; value is 1×1.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
    },
    /// Terminal scalar with precomputed gradients for each input node.
    ScalarLoss {
        inputs: Vec<NodeId>,
        grads: Vec<Array2<f64>>,
    },
    // Holds the source node to keep it alive on the tape; never propagated to.
    StopGrad(#[allow(dead_code)] NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf node whose gradient is routed to the named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let value = store.get(name).clone();
        self.push(value, Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = &self.nodes[x].value + &self.nodes[bias].value;
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Adds a fixed array (mask, positional encoding) with no gradient of its own.
    pub fn add_const(&mut self, x: NodeId, c: &Array2<f64>) -> NodeId {
        let v = &self.nodes[x].value + c;
        self.push(v, Op::AddConst(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[x].value);
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[[i, j] ] = (v - mean) * inv * self.nodes[gain].value[[0, j]]
                    + self.nodes[bias].value[[0, j]];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = concatenate![Axis(1), self.nodes[a].value, self.nodes[b].value];
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start, end })
    }

    /// Mean softmax cross-entropy over the given (row, class) targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        assert!(!targets.is_empty(), "cross_entropy needs targets");
        let probs = softmax_rows(&self.nodes[logits].value);
        let mut loss = 0.0;
        for &(row, class) in targets {
            loss -= probs[[row, class]].max(1e-300).ln();
        }
        loss /= targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Terminal scalar loss whose gradients were computed out-of-graph.
    pub fn scalar_loss(&mut self, value: f64, inputs: Vec<NodeId>, grads: Vec<Array2<f64>>) -> NodeId {
        assert_eq!(inputs.len(), grads.len());
        for (&i, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.nodes[i].value.raw_dim(), g.raw_dim());
        }
        self.push(Array2::from_elem((1, 1), value), Op::ScalarLoss { inputs, grads })
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.push(v, Op::StopGrad(x))
    }

    /// Backpropagates from `root` (seeded with ones) and returns parameter gradients.
    pub fn backward(&self, root: NodeId) -> GradMap {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::ones(self.nodes[root].value.raw_dim()));
        let mut out: GradMap = HashMap::new();

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let send = |target: NodeId, delta: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                match &mut grads[target] {
                    Some(acc) => *acc += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Constant => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddBias(x, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*x, g, &mut grads);
                    send(*bias, gb, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => send(*a, &g * *c, &mut grads),
                Op::AddConst(x) => send(*x, g, &mut grads),
                Op::Sigmoid(x) => {
                    let y = &self.nodes[id].value;
                    send(*x, &g * &(y * &(1.0 - y)), &mut grads);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[id].value;
                    send(*x, &g * &(1.0 - y * y), &mut grads);
                }
                Op::Relu(x) => {
                    let mask = self.nodes[*x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    send(*x, &g * &mask, &mut grads);
                }
                Op::Transpose(x) => send(*x, g.t().to_owned(), &mut grads),
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[id].value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..y.ncols() {
                            gx[[i, j]] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[*x].value;
                    let gainv = &self.nodes[*gain].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggain = Array2::zeros(gainv.raw_dim());
                    let mut gbias = Array2::zeros(gainv.raw_dim());
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let d = row.len() as f64;
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let norm: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        // gy = upstream * gain, then the standard layer-norm input grad.
                        let gy: Vec<f64> =
                            (0..row.len()).map(|j| g[[i, j]] * gainv[[0, j]]).collect();
                        let mean_gy = gy.iter().sum::<f64>() / d;
                        let mean_gy_norm =
                            gy.iter().zip(&norm).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..row.len() {
                            gx[[i, j]] = inv * (gy[j] - mean_gy - norm[j] * mean_gy_norm);
                            ggain[[0, j]] += g[[i, j]] * norm[j];
                            gbias[[0, j]] += g[[i, j]];
                        }
                    }
                    send(*x, gx, &mut grads);
                    send(*gain, ggain, &mut grads);
                    send(*bias, gbias, &mut grads);
                }
                Op::Embed { table, ids } => {
                    let t = &self.nodes[*table].value;
                    let mut gt = Array2::zeros(t.raw_dim());
                    for (i, &id_) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id_);
                        row += &g.row(i);
                    }
                    send(*table, gt, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[*a].value.ncols();
                    let ga = g.slice(s![.., ..na]).to_owned();
                    let gb = g.slice(s![.., na..]).to_owned();
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::SliceCols { x, start, end } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    send(*x, gx, &mut grads);
                }
                Op::SliceRows { x, start, end } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    gx.slice_mut(s![*start..*end, ..]).assign(&g);
                    send(*x, gx, &mut grads);
                }
                Op::CrossEntropy { logits, targets } => {
                    let probs = softmax_rows(&self.nodes[*logits].value);
                    let mut gl = Array2::zeros(probs.raw_dim());
                    let scale = g[[0, 0]] / targets.len() as f64;
                    for &(row, class) in targets {
                        for j in 0..probs.ncols() {
                            gl[[row, j]] += probs[[row, j]] * scale;
                        }
                        gl[[row, class]] -= scale;
                    }
                    send(*logits, gl, &mut grads);
                }
                Op::ScalarLoss { inputs, grads: igrads } => {
                    let scale = g[[0, 0]];
                    for (&input, ig) in inputs.iter().zip(igrads) {
                        send(input, ig * scale, &mut grads);
                    }
                }
                Op::StopGrad(_) => {}
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
