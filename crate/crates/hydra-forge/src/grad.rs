//! Minimal reverse-mode tape over `Vec<f64>` values.
//!
//! Nodes are appended in topological order, so the backward sweep is a single
//! reverse pass with a fixed accumulation order; gradients are bit-stable
//! across runs. The op set is exactly what the surrogate losses need, nothing
//! more.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Row `row` of a flat row-major table node.
    Row { table: NodeId, row: usize, dim: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise mean of equally sized vectors.
    MeanVecs(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    /// `w` is a flat row-major `rows x cols` node, result is `w * x`.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Dot(NodeId, NodeId),
    Normalize(NodeId),
    Concat(Vec<NodeId>),
    Tanh(NodeId),
    /// Squared euclidean distance, scalar.
    SqDist(NodeId, NodeId),
    /// Cross-entropy of softmax(logits) against a one-hot target, scalar.
    /// Softmax subtracts the max logit before exponentiation.
    SoftmaxCe { logits: NodeId, target: usize },
    MeanScalars(Vec<NodeId>),
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node, indexed by
/// [`NodeId`]. Nodes the output does not depend on yield `None`.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.by_node[id.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Leaf node; constants and parameters are identical on the tape, the
    /// caller just keeps the ids of the ones it wants gradients for.
    pub fn leaf(&mut self, v: Vec<f64>) -> NodeId {
        self.push(v, Op::Leaf)
    }

    pub fn row(&mut self, table: NodeId, row: usize, dim: usize) -> NodeId {
        let v = self.nodes[table.0].value[row * dim..(row + 1) * dim].to_vec();
        self.push(v, Op::Row { table, row, dim })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_with(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_with(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|x| c * x).collect();
        self.push(v, Op::Scale(a, c))
    }

    pub fn mean_vecs(&mut self, parts: Vec<NodeId>) -> NodeId {
        let n = parts.len();
        assert!(n > 0);
        let dim = self.nodes[parts[0].0].value.len();
        let mut v = vec![0.0; dim];
        for p in &parts {
            for (acc, x) in v.iter_mut().zip(&self.nodes[p.0].value) {
                *acc += x;
            }
        }
        for acc in &mut v {
            *acc /= n as f64;
        }
        self.push(v, Op::MeanVecs(parts))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (xh, _sigma) = ln_forward(&self.nodes[x.0].value, eps);
        let v = xh
            .iter()
            .zip(&self.nodes[gain.0].value)
            .zip(&self.nodes[bias.0].value)
            .map(|((h, g), b)| g * h + b)
            .collect();
        self.push(v, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn mat_vec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(wv.len(), rows * cols);
        debug_assert_eq!(xv.len(), cols);
        let mut v = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += wv[r * cols + c] * xv[c];
            }
            v[r] = acc;
        }
        self.push(v, Op::MatVec { w, x, rows, cols })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![v], Op::Dot(a, b))
    }

    pub fn normalize(&mut self, a: NodeId) -> NodeId {
        let n = norm(&self.nodes[a.0].value);
        assert!(n > 0.0, "normalize of a zero vector");
        let v = self.nodes[a.0].value.iter().map(|x| x / n).collect();
        self.push(v, Op::Normalize(a))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        let mut v = Vec::new();
        for p in &parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(v, Op::Concat(parts))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(vec![v], Op::SqDist(a, b))
    }

    pub fn softmax_ce(&mut self, logits: NodeId, target: usize) -> NodeId {
        let p = softmax(&self.nodes[logits.0].value);
        let v = -p[target].ln();
        self.push(vec![v], Op::SoftmaxCe { logits, target })
    }

    pub fn mean_scalars(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let v = parts.iter().map(|p| self.nodes[p.0].value[0]).sum::<f64>() / parts.len() as f64;
        self.push(vec![v], Op::MeanScalars(parts))
    }

    pub fn weighted_sum(&mut self, parts: Vec<(NodeId, f64)>) -> NodeId {
        let v = parts.iter().map(|(p, w)| w * self.nodes[p.0].value[0]).sum();
        self.push(vec![v], Op::WeightedSum(parts))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.accumulate(i, &dy, &mut g);
            g[i] = Some(dy);
        }
        Gradients { by_node: g }
    }

    fn accumulate(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let mut bump = |id: NodeId, add: &dyn Fn(&mut [f64])| {
            let slot = g[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            add(slot);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Row { table, row, dim } => {
                let (row, dim) = (*row, *dim);
                bump(*table, &|gt| {
                    for (k, d) in dy.iter().enumerate() {
                        gt[row * dim + k] += d;
                    }
                });
            }
            Op::Add(a, b) => {
                bump(*a, &|ga| axpy(ga, dy, 1.0));
                bump(*b, &|gb| axpy(gb, dy, 1.0));
            }
            Op::Sub(a, b) => {
                bump(*a, &|ga| axpy(ga, dy, 1.0));
                bump(*b, &|gb| axpy(gb, dy, -1.0));
            }
            Op::Scale(a, c) => {
                let c = *c;
                bump(*a, &|ga| axpy(ga, dy, c));
            }
            Op::MeanVecs(parts) => {
                let c = 1.0 / parts.len() as f64;
                for p in parts {
                    bump(*p, &|gp| axpy(gp, dy, c));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (xh, sigma) = ln_forward(xv, *eps);
                let n = xv.len() as f64;
                // dxh_i = dy_i * g_i; dx = (dxh - mean(dxh) - xh * mean(dxh .* xh)) / sigma
                let dxh: Vec<f64> = dy.iter().zip(gv).map(|(d, g)| d * g).collect();
                let m1 = dxh.iter().sum::<f64>() / n;
                let m2 = dxh.iter().zip(&xh).map(|(d, h)| d * h).sum::<f64>() / n;
                bump(*x, &|gx| {
                    for k in 0..gx.len() {
                        gx[k] += (dxh[k] - m1 - xh[k] * m2) / sigma;
                    }
                });
                bump(*gain, &|gg| {
                    for k in 0..gg.len() {
                        gg[k] += dy[k] * xh[k];
                    }
                });
                bump(*bias, &|gb| axpy(gb, dy, 1.0));
            }
            Op::MatVec { w, x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let wv = &self.nodes[w.0].value;
                let xv = &self.nodes[x.0].value;
                bump(*w, &|gw| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gw[r * cols + c] += dy[r] * xv[c];
                        }
                    }
                });
                bump(*x, &|gx| {
                    for c in 0..cols {
                        let mut acc = 0.0;
                        for r in 0..rows {
                            acc += wv[r * cols + c] * dy[r];
                        }
                        gx[c] += acc;
                    }
                });
            }
            Op::Dot(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let d = dy[0];
                bump(*a, &|ga| axpy(ga, &bv, d));
                bump(*b, &|gb| axpy(gb, &av, d));
            }
            Op::Normalize(a) => {
                let av = &self.nodes[a.0].value;
                let n = norm(av);
                let yv = &self.nodes[i].value;
                let proj: f64 = yv.iter().zip(dy).map(|(y, d)| y * d).sum();
                bump(*a, &|ga| {
                    for k in 0..ga.len() {
                        ga[k] += (dy[k] - yv[k] * proj) / n;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let piece = &dy[at..at + len];
                    bump(*p, &|gp| axpy(gp, piece, 1.0));
                    at += len;
                }
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.clone();
                bump(*a, &|ga| {
                    for k in 0..ga.len() {
                        ga[k] += dy[k] * (1.0 - yv[k] * yv[k]);
                    }
                });
            }
            Op::SqDist(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let d = dy[0];
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x - y).collect();
                bump(*a, &|ga| axpy(ga, &diff, 2.0 * d));
                bump(*b, &|gb| axpy(gb, &diff, -2.0 * d));
            }
            Op::SoftmaxCe { logits, target } => {
                let p = softmax(&self.nodes[logits.0].value);
                let (t, d) = (*target, dy[0]);
                bump(*logits, &|gl| {
                    for k in 0..gl.len() {
                        let ind = if k == t { 1.0 } else { 0.0 };
                        gl[k] += d * (p[k] - ind);
                    }
                });
            }
            Op::MeanScalars(parts) => {
                let c = dy[0] / parts.len() as f64;
                for p in parts {
                    bump(*p, &|gp| gp[0] += c);
                }
            }
            Op::WeightedSum(parts) => {
                for (p, w) in parts {
                    let c = dy[0] * w;
                    bump(*p, &|gp| gp[0] += c);
                }
            }
        }
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (s, v) in acc.iter_mut().zip(x) {
        *s += a * v;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalized activations and the denominator sigma = sqrt(var + eps).
fn ln_forward(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = (var + eps).sqrt();
    (x.iter().map(|v| (v - mu) / sigma).collect(), sigma)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central finite differences over every input coordinate.
    fn fd_check(inputs: &[Vec<f64>], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eval = |xs: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|v| t.leaf(v.clone())).collect();
            let out = build(&mut t, &ids);
            t.scalar(out)
        };
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out);

        let h = 1e-5;
        for (vi, v) in inputs.iter().enumerate() {
            let g = grads.wrt(ids[vi]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
            for k in 0..v.len() {
                let mut plus = inputs.to_vec();
                plus[vi][k] += h;
                let mut minus = inputs.to_vec();
                minus[vi][k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = g[k];
                let tol = 1e-6 + 1e-5 * a.abs().max(fd.abs());
                assert!(
                    (a - fd).abs() <= tol,
                    "input {vi} coord {k}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, &[0xf0]);
        rng::normal_vec(&mut r, n)
    }

    #[test]
    fn layer_norm_matvec_chain_matches_fd() {
        let x = rand_vec(1, 6);
        let gain = vec![1.1, 0.9, 1.0, 1.2, 0.8, 1.0];
        let bias = rand_vec(2, 6);
        let w = rand_vec(3, 4 * 6);
        fd_check(&[x, gain, bias, w], |t, ids| {
            let ln = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let y = t.mat_vec(ids[3], ln, 4, 6);
            let y2 = t.tanh(y);
            let target = t.leaf(vec![0.3, -0.2, 0.1, 0.4]);
            t.sq_dist(y2, target)
        });
    }

    #[test]
    fn softmax_ce_and_means_match_fd() {
        let logits = rand_vec(4, 5);
        fd_check(&[logits], |t, ids| t.softmax_ce(ids[0], 2));

        let a = rand_vec(5, 3);
        let b = rand_vec(6, 3);
        fd_check(&[a, b], |t, ids| {
            let m = t.mean_vecs(vec![ids[0], ids[1]]);
            let d0 = t.dot(m, ids[0]);
            let d1 = t.dot(m, ids[1]);
            let ms = t.mean_scalars(vec![d0, d1]);
            let ws = t.weighted_sum(vec![(ms, 0.7), (d0, -0.25)]);
            ws
        });
    }

    #[test]
    fn normalize_and_cosine_match_fd() {
        let a = rand_vec(7, 4);
        let b = rand_vec(8, 4);
        fd_check(&[a, b], |t, ids| {
            let na = t.normalize(ids[0]);
            let nb = t.normalize(ids[1]);
            t.dot(na, nb)
        });
    }

    #[test]
    fn row_gather_and_concat_match_fd() {
        let table = rand_vec(9, 3 * 4);
        let extra = rand_vec(10, 2);
        fd_check(&[table, extra], |t, ids| {
            let r0 = t.row(ids[0], 0, 4);
            let r2 = t.row(ids[0], 2, 4);
            let s = t.add(r0, r2);
            let cat = t.concat(vec![s, ids[1]]);
            let sm = t.scale(cat, 0.5);
            let z = t.leaf(vec![0.0; 6]);
            let d = t.sub(sm, z);
            let sq = t.sq_dist(d, z);
            sq
        });
    }

    #[test]
    fn shared_subgraph_accumulates_both_paths() {
        // loss = dot(x, x) has gradient 2x; x is used twice.
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 3.0]);
        let d = t.dot(x, x);
        let g = t.backward(d);
        assert_eq!(g.wrt(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn softmax_is_max_subtracted_and_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        let q = softmax(&[0.0, f64::NEG_INFINITY]);
        assert!((q[0] - 1.0).abs() < 1e-12);
    }
}
