//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a leaf created with [`Graph::param`]. Leaves
//! created with [`Graph::constant`] (frozen weights, data) never receive a
//! gradient, and nothing downstream of [`Var::detach`] propagates into its
//! source.
//!
//! Most operations use a 2D view: the trailing dimension is the row length
//! and every leading dimension is folded into the row count.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{gemm, Tensor};

/// Index sentinel for [`Var::gather`] that yields an exact zero.
pub const GATHER_ZERO: usize = usize::MAX;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Silu(usize),
    Gelu(usize),
    Exp(usize),
    Clamp01(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    Gather { x: usize, index: Arc<Vec<usize>> },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    SumSquares(usize),
    SumAbs(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation tape. Not `Sync`; build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.id], g.clone()))
    }

    /// Gradient of `var`, or zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1. `loss` must hold one element.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].tracked {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if nodes[*a].tracked {
                accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if nodes[*b].tracked {
                accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|x| x * c).collect()),
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if nodes[*b].tracked {
                let cols = nodes[*b].value.len();
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MulRow(a, b) => {
            let bv = nodes[*b].value.data();
            let cols = bv.len();
            if nodes[*a].tracked {
                let ga = g
                    .chunks(cols)
                    .flat_map(|row| row.iter().zip(bv).map(|(g, b)| g * b))
                    .collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].tracked {
                let av = nodes[*a].value.data();
                let mut gb = vec![0.0; cols];
                for (grow, arow) in g.chunks(cols).zip(av.chunks(cols)) {
                    for j in 0..cols {
                        gb[j] += grow[j] * arow[j];
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatMul(a, b) => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let (m, k) = (at.rows(), at.cols());
            let n = bt.cols();
            if nodes[*a].tracked {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bt.data(), true, &mut ga, false);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].tracked {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, at.data(), true, g, false, &mut gb, false);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Silu(a) => {
            let av = nodes[*a].value.data();
            let ga = g
                .iter()
                .zip(av)
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            let ga = g.iter().zip(av).map(|(g, &x)| g * gelu_grad(x)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Exp(a) => {
            let out = node.value.data();
            accumulate(grads, nodes, *a, g.iter().zip(out).map(|(g, y)| g * y).collect());
        }
        Op::Clamp01(a) => {
            let av = nodes[*a].value.data();
            let ga = g
                .iter()
                .zip(av)
                .map(|(g, &x)| if (0.0..=1.0).contains(&x) { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNorm { x, rstd } => {
            let y = node.value.data();
            let cols = node.value.cols();
            let mut gx = vec![0.0; y.len()];
            for (r, ((grow, yrow), out)) in g
                .chunks(cols)
                .zip(y.chunks(cols))
                .zip(gx.chunks_mut(cols))
                .enumerate()
            {
                let mean_g = grow.iter().sum::<f64>() / cols as f64;
                let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for j in 0..cols {
                    out[j] = rstd[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (gq, gk, gv) = attention_backward(
                &nodes[*q].value,
                &nodes[*k].value,
                &nodes[*v].value,
                *heads,
                probs,
                g,
            );
            accumulate(grads, nodes, *q, gq);
            accumulate(grads, nodes, *k, gk);
            accumulate(grads, nodes, *v, gv);
        }
        Op::Gather { x, index } => {
            let mut gx = vec![0.0; nodes[*x].value.len()];
            for (gi, &src) in g.iter().zip(index.iter()) {
                if src != GATHER_ZERO {
                    gx[src] += gi;
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if nodes[p].tracked {
                    let gp = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    accumulate(grads, nodes, p, gp);
                }
                offset += w;
            }
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::SumSquares(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, av.iter().map(|x| 2.0 * x * g[0]).collect());
        }
        Op::SumAbs(a) => {
            let av = nodes[*a].value.data();
            let ga = av
                .iter()
                .map(|&x| {
                    if x > 0.0 {
                        g[0]
                    } else if x < 0.0 {
                        -g[0]
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Copies head `h` (columns `h*d..(h+1)*d`) of an `n×w` matrix.
fn head_slice(x: &[f64], n: usize, w: usize, d: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        out.extend_from_slice(&x[r * w + h * d..r * w + (h + 1) * d]);
    }
    out
}

fn head_scatter(dst: &mut [f64], src: &[f64], n: usize, w: usize, d: usize, h: usize) {
    for r in 0..n {
        dst[r * w + h * d..r * w + (h + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, w) = (q.rows(), q.cols());
    let m = k.rows();
    let d = w / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * w];
    let mut probs = vec![0.0; heads * n * m];
    for h in 0..heads {
        let qh = head_slice(q.data(), n, w, d, h);
        let kh = head_slice(k.data(), m, w, d, h);
        let vh = head_slice(v.data(), m, w, d, h);
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        gemm(n, d, m, &qh, false, &kh, true, p, false);
        for row in p.chunks_mut(m) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let mut oh = vec![0.0; n * d];
        gemm(n, m, d, p, false, &vh, false, &mut oh, false);
        head_scatter(&mut out, &oh, n, w, d, h);
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, w) = (q.rows(), q.cols());
    let m = k.rows();
    let d = w / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut gq = vec![0.0; n * w];
    let mut gk = vec![0.0; m * w];
    let mut gv = vec![0.0; m * w];
    for h in 0..heads {
        let qh = head_slice(q.data(), n, w, d, h);
        let kh = head_slice(k.data(), m, w, d, h);
        let vh = head_slice(v.data(), m, w, d, h);
        let goh = head_slice(g, n, w, d, h);
        let p = &probs[h * n * m..(h + 1) * n * m];

        let mut gvh = vec![0.0; m * d];
        gemm(m, n, d, p, true, &goh, false, &mut gvh, false);

        let mut gp = vec![0.0; n * m];
        gemm(n, d, m, &goh, false, &vh, true, &mut gp, false);
        // Softmax backward, folding in the logit scale.
        for (grow, prow) in gp.chunks_mut(m).zip(p.chunks(m)) {
            let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (gx, &px) in grow.iter_mut().zip(prow) {
                *gx = px * (*gx - dot) * scale;
            }
        }
        let mut gqh = vec![0.0; n * d];
        gemm(n, m, d, &gp, false, &kh, false, &mut gqh, false);
        let mut gkh = vec![0.0; m * d];
        gemm(m, n, d, &gp, true, &qh, false, &mut gkh, false);

        head_scatter(&mut gq, &gqh, n, w, d, h);
        head_scatter(&mut gk, &gkh, m, w, d, h);
        head_scatter(&mut gv, &gvh, m, w, d, h);
    }
    (gq, gk, gv)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1);
        v.data()[0]
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let tracked = self.is_tracked();
        self.graph.push(value, op, tracked)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let tracked = self.is_tracked() || other.is_tracked();
        self.graph.push(value, op, tracked)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Adds the vector `row` (length = trailing dim) to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = row.value();
        assert_eq!(a.cols(), b.len(), "row length mismatch");
        let bd = b.data();
        let data = a
            .data()
            .chunks(bd.len())
            .flat_map(|r| r.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        self.binary(row, Tensor::new(a.shape(), data), Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by the vector `row`.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = row.value();
        assert_eq!(a.cols(), b.len(), "row length mismatch");
        let bd = b.data();
        let data = a
            .data()
            .chunks(bd.len())
            .flat_map(|r| r.iter().zip(bd).map(|(x, y)| x * y))
            .collect();
        self.binary(row, Tensor::new(a.shape(), data), Op::MulRow(self.id, row.id))
    }

    /// `(…×k) · (k×n)`; leading dims of `self` are folded into rows.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = w.value();
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2D");
        let (m, k) = (a.rows(), a.cols());
        assert_eq!(k, b.shape()[0], "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.binary(w, Tensor::new(&shape, out), Op::MatMul(self.id, w.id))
    }

    pub fn silu(self) -> Var<'g> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Clamps into `[0, 1]`; the gradient is zero where clamping was active.
    pub fn clamp01(self) -> Var<'g> {
        let v = self.value().map(|x| x.clamp(0.0, 1.0));
        self.unary(v, Op::Clamp01(self.id))
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Var<'g> {
        let a = self.value();
        let cols = a.cols();
        let mut out = Vec::with_capacity(a.len());
        let mut rstd = Vec::with_capacity(a.rows());
        for row in a.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|x| (x - mean) * r));
        }
        self.unary(Tensor::new(a.shape(), out), Op::LayerNorm { x: self.id, rstd })
    }

    /// Multi-head softmax attention of `self` (queries) over `keys`/`values`.
    pub fn attention(self, keys: Var<'g>, values: Var<'g>, heads: usize) -> Var<'g> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        assert_eq!(q.cols() % heads, 0, "width not divisible by heads");
        assert_eq!(q.cols(), k.cols());
        assert_eq!(k.shape(), v.shape());
        let (out, probs) = attention_forward(&q, &k, &v, heads);
        let tracked = self.is_tracked() || keys.is_tracked() || values.is_tracked();
        self.graph.push(
            Tensor::new(q.shape(), out),
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                probs,
            },
            tracked,
        )
    }

    /// `out[i] = self[index[i]]` over flat storage; [`GATHER_ZERO`] yields 0.
    /// Covers permutes, slices, tiling and zero padding.
    pub fn gather(self, index: Arc<Vec<usize>>, shape: &[usize]) -> Var<'g> {
        assert_eq!(index.len(), shape.iter().product::<usize>());
        let a = self.value();
        let src = a.data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        self.unary(Tensor::new(shape, data), Op::Gather { x: self.id, index })
    }

    /// Concatenates along the trailing dimension.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "row counts differ");
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = values[0].shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let tracked = parts.iter().any(|p| p.is_tracked());
        graph.push(
            Tensor::new(&shape, data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            tracked,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self.value().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Σ x².
    pub fn sum_squares(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().data().iter().map(|x| x * x).sum());
        self.unary(v, Op::SumSquares(self.id))
    }

    /// Σ |x|.
    pub fn sum_abs(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().data().iter().map(|x| x.abs()).sum());
        self.unary(v, Op::SumAbs(self.id))
    }

    /// Same value, cut from the gradient tape.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant(&self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(f)/d(input) for a scalar-valued builder.
    fn check_grad(input: Tensor, f: impl for<'a> Fn(&'a Graph, Var<'a>) -> Var<'a>) {
        let g = Graph::new();
        let x = g.param(&input);
        let loss = f(&g, x);
        let grads = g.backward(loss);
        let analytic = grads.get_or_zeros(x);
        let eps = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let gp = Graph::new();
            let lp = f(&gp, gp.constant(&plus)).item();
            let gm = Graph::new();
            let lm = f(&gm, gm.constant(&minus)).item();
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: fd {fd} vs analytic {a}");
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let w = rand_tensor(&[4, 3], 1);
        let b = rand_tensor(&[3], 2);
        check_grad(rand_tensor(&[5, 4], 3), |g, x| {
            let w = g.constant(&w);
            let b = g.constant(&b);
            x.matmul(w).add_row(b).gelu().mul(x.matmul(w).silu()).sum()
        });
    }

    #[test]
    fn matmul_rhs_grad() {
        let a = rand_tensor(&[5, 4], 4);
        check_grad(rand_tensor(&[4, 3], 5), |g, w| {
            g.constant(&a).matmul(w).sum_squares()
        });
    }

    #[test]
    fn layer_norm_grad() {
        let target = rand_tensor(&[3, 6], 6);
        check_grad(rand_tensor(&[3, 6], 7), |g, x| {
            x.layer_norm().mul(g.constant(&target)).sum()
        });
    }

    #[test]
    fn attention_grads_all_inputs() {
        let k = rand_tensor(&[5, 8], 8);
        let v = rand_tensor(&[5, 8], 9);
        let probe = rand_tensor(&[5, 8], 10);
        check_grad(rand_tensor(&[5, 8], 11), |g, q| {
            q.attention(g.constant(&k), g.constant(&v), 2)
                .mul(g.constant(&probe))
                .sum()
        });
        let q = rand_tensor(&[5, 8], 12);
        check_grad(k.clone(), |g, kk| {
            g.constant(&q)
                .attention(kk, g.constant(&v), 2)
                .mul(g.constant(&probe))
                .sum()
        });
        check_grad(v.clone(), |g, vv| {
            g.constant(&q)
                .attention(g.constant(&k), vv, 2)
                .mul(g.constant(&probe))
                .sum()
        });
    }

    #[test]
    fn gather_concat_rows_and_reductions() {
        let row = rand_tensor(&[3], 13);
        let index = Arc::new(vec![5, 0, GATHER_ZERO, 2, 2, 1]);
        check_grad(rand_tensor(&[2, 3], 14), |g, x| {
            let gathered = x.gather(index.clone(), &[2, 3]);
            let cat = Var::concat_cols(&[gathered, x.mul_row(g.constant(&row))]);
            cat.exp().sum().add(cat.sum_abs()).add(x.scale(0.3).sub(x.exp()).sum_squares())
        });
    }

    #[test]
    fn row_vector_grads() {
        let a = rand_tensor(&[4, 3], 15);
        check_grad(rand_tensor(&[3], 16), |g, r| {
            let a = g.constant(&a);
            a.mul_row(r).add_row(r).sum_squares()
        });
    }

    #[test]
    fn detach_and_constants_block_gradients() {
        let g = Graph::new();
        let p = g.param(&Tensor::full(&[2], 3.0));
        let c = g.constant(&Tensor::full(&[2], 2.0));
        let loss = p.mul(c).add(p.detach().mul(p.detach())).sum();
        let grads = g.backward(loss);
        assert_eq!(grads.get_or_zeros(p).data(), &[2.0, 2.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let g = Graph::new();
        let p = g.param(&Tensor::new(&[3], vec![-0.5, 0.5, 1.5]));
        let grads = g.backward(p.clamp01().sum());
        assert_eq!(grads.get_or_zeros(p).data(), &[0.0, 1.0, 0.0]);
    }
}
