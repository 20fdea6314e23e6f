//! Minimal reverse-mode autodiff over `ndarray` f64 matrices.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. Everything is sequential and
//! allocation-order deterministic, which is what makes whole training runs
//! bit-reproducible. Scalars are 1x1 matrices.
//!
//! The op set is exactly what the models here need: dense matmuls, row
//! broadcasts, softmax/log-softmax/LSE rows, layer norm, row L2
//! normalization, sparse neighbor-mean aggregation, gathers/concats, block
//! multi-head self-attention, and a few pointwise maps.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse symmetric adjacency in neighbor-list form for mean aggregation.
#[derive(Debug, Clone)]
pub struct MeanAggGraph {
    pub neighbors: Vec<Vec<u32>>,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulConst { a: usize, c: Array2<f64> },
    MulCol { a: usize, col: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    LogSumExpRows { a: usize },
    LayerNormRows { a: usize, gamma: usize, beta: usize, eps: f64 },
    RowL2Normalize { a: usize, eps: f64 },
    NeighborMean { a: usize, graph: Rc<MeanAggGraph> },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    GatherCols { a: usize, idx: Rc<Vec<usize>> },
    ConcatCols { a: usize, b: usize },
    MeanRows { a: usize },
    GroupMeanRows { a: usize, group: usize },
    RowSum { a: usize },
    SumAll { a: usize },
    ClampMin { a: usize, min: f64 },
    Ln { a: usize },
    BlockAttention { q: usize, k: usize, v: usize, heads: usize, block: usize, probs: Vec<Array2<f64>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    param_slot: Option<usize>,
}

/// Gradient accumulator produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn of(&self, var: Var) -> Option<&Array2<f64>> {
        self.by_node[var.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows_value(a: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn softmax_backward_into(p: &ArrayView2<f64>, g: &ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
    for i in 0..p.nrows() {
        let dot: f64 = (0..p.ncols()).map(|j| p[[i, j]] * g[[i, j]]).sum();
        for j in 0..p.ncols() {
            out[[i, j]] += p[[i, j]] * (g[[i, j]] - dot);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar convenience accessor; panics unless the node is 1x1.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param_slot: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf bound to an external parameter slot.
    pub fn param(&mut self, value: Array2<f64>, slot: usize) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param_slot: Some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input; gradients do not flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf without a parameter slot (used by gradient checks).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a: a.0, b: b.0 }, needs)
    }

    /// `a @ b.T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dims");
        let value = av.dot(&bv.t());
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT { a: a.0, b: b.0 }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim(), "add shapes");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a: a.0, b: b.0 }, needs)
    }

    /// Broadcast-add a 1 x n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = &self.nodes[row.0].value;
        assert_eq!(rv.nrows(), 1, "add_row expects a 1-row rhs");
        assert_eq!(self.nodes[a.0].value.ncols(), rv.ncols(), "add_row widths");
        let value = &self.nodes[a.0].value + &rv.row(0);
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow { a: a.0, row: row.0 }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim(), "sub shapes");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a: a.0, b: b.0 }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim(), "mul shapes");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a: a.0, b: b.0 }, needs)
    }

    /// Elementwise product with a constant matrix (masks, one-hots, weights).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), c.dim(), "mul_const shapes");
        let value = &self.nodes[a.0].value * &c;
        let needs = self.needs(a);
        self.push(value, Op::MulConst { a: a.0, c }, needs)
    }

    /// Broadcast-multiply each row of `a` by the matching entry of `col` (m x 1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let cv = &self.nodes[col.0].value;
        assert_eq!(cv.ncols(), 1, "mul_col expects an m x 1 rhs");
        assert_eq!(self.nodes[a.0].value.nrows(), cv.nrows(), "mul_col heights");
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for (i, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            let c = cv[[i, 0]];
            row.mapv_inplace(|x| x * c);
        }
        let needs = self.needs(a) || self.needs(col);
        self.push(value, Op::MulCol { a: a.0, col: col.0 }, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let needs = self.needs(a);
        self.push(value, Op::Scale { a: a.0, c }, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        let needs = self.needs(a);
        self.push(value, Op::AddScalar { a: a.0 }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu { a: a.0 }, needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_value(&self.nodes[a.0].value.view());
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows { a: a.0 }, needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let needs = self.needs(a);
        self.push(value, Op::LogSoftmaxRows { a: a.0 }, needs)
    }

    /// Row-wise log-sum-exp, producing an m x 1 column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = Array2::zeros((av.nrows(), 1));
        for (i, row) in av.axis_iter(Axis(0)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            value[[i, 0]] = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        }
        let needs = self.needs(a);
        self.push(value, Op::LogSumExpRows { a: a.0 }, needs)
    }

    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.nrows(), 1, "gamma is 1 x n");
        assert_eq!(bv.nrows(), 1, "beta is 1 x n");
        assert_eq!(gv.ncols(), av.ncols(), "gamma width");
        assert_eq!(bv.ncols(), av.ncols(), "beta width");
        let n = av.ncols() as f64;
        let mut value = av.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv * gv[[0, j]] + bv[[0, j]];
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::LayerNormRows { a: a.0, gamma: gamma.0, beta: beta.0, eps }, needs)
    }

    /// Rows scaled to unit L2 norm, smoothed as x / sqrt(|x|^2 + eps^2).
    pub fn row_l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        let needs = self.needs(a);
        self.push(value, Op::RowL2Normalize { a: a.0, eps }, needs)
    }

    /// Row v of the output is the mean of `a`'s rows over v's neighbors
    /// (zero for isolated nodes).
    pub fn neighbor_mean(&mut self, a: Var, graph: Rc<MeanAggGraph>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.nrows(), graph.neighbors.len(), "neighbor_mean heights");
        let mut value = Array2::zeros(av.dim());
        for (v, neigh) in graph.neighbors.iter().enumerate() {
            if neigh.is_empty() {
                continue;
            }
            let inv = 1.0 / neigh.len() as f64;
            for &u in neigh {
                for j in 0..av.ncols() {
                    value[[v, j]] += av[[u as usize, j]] * inv;
                }
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::NeighborMean { a: a.0, graph }, needs)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = Array2::zeros((idx.len(), av.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).assign(&av.row(r));
        }
        let needs = self.needs(a);
        self.push(value, Op::GatherRows { a: a.0, idx }, needs)
    }

    pub fn gather_cols(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        let mut value = Array2::zeros((av.nrows(), idx.len()));
        for (j, &c) in idx.iter().enumerate() {
            value.column_mut(j).assign(&av.column(c));
        }
        let needs = self.needs(a);
        self.push(value, Op::GatherCols { a: a.0, idx }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols heights");
        let mut value = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        value.slice_mut(s![.., ..av.ncols()]).assign(av);
        value.slice_mut(s![.., av.ncols()..]).assign(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols { a: a.0, b: b.0 }, needs)
    }

    /// Column means as a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let m = av.nrows() as f64;
        let value = av.sum_axis(Axis(0)).insert_axis(Axis(0)) / m;
        let needs = self.needs(a);
        self.push(value, Op::MeanRows { a: a.0 }, needs)
    }

    /// Means of consecutive `group`-row blocks: (g*k) x n -> g x n.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(group > 0 && av.nrows() % group == 0, "group_mean_rows divisibility");
        let g = av.nrows() / group;
        let mut value = Array2::zeros((g, av.ncols()));
        for i in 0..g {
            for r in 0..group {
                for j in 0..av.ncols() {
                    value[[i, j]] += av[[i * group + r, j]];
                }
            }
        }
        value /= group as f64;
        let needs = self.needs(a);
        self.push(value, Op::GroupMeanRows { a: a.0, group }, needs)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a);
        self.push(value, Op::RowSum { a: a.0 }, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(value, Op::SumAll { a: a.0 }, needs)
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(min));
        let needs = self.needs(a);
        self.push(value, Op::ClampMin { a: a.0, min }, needs)
    }

    /// Natural log; inputs must be positive (clamp first if not guaranteed).
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let needs = self.needs(a);
        self.push(value, Op::Ln { a: a.0 }, needs)
    }

    /// Multi-head self-attention over independent `block`-row blocks of q/k/v.
    /// Heads split the feature columns evenly; no masking inside a block.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, block: usize) -> Var {
        let (qv, kv, vv) =
            (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let dim = qv.dim();
        assert_eq!(dim, kv.dim(), "attention q/k shapes");
        assert_eq!(dim, vv.dim(), "attention q/v shapes");
        assert!(block > 0 && dim.0 % block == 0, "rows must split into blocks");
        assert!(heads > 0 && dim.1 % heads == 0, "cols must split into heads");
        let n_blocks = dim.0 / block;
        let dh = dim.1 / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut value = Array2::zeros(dim);
        let mut probs = Vec::with_capacity(n_blocks * heads);
        for b in 0..n_blocks {
            let rows = b * block..(b + 1) * block;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let scores = qh.dot(&kh.t()) * scale;
                let p = softmax_rows_value(&scores.view());
                let out = p.dot(&vh);
                value.slice_mut(s![rows.clone(), cols.clone()]).assign(&out);
                probs.push(p);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(value, Op::BlockAttention { q: q.0, k: k.0, v: v.0, heads, block, probs }, needs)
    }

    /// Inverted dropout as a constant mask; `rng` draws one Bernoulli per entry.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl rand::Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate in [0,1)");
        if p == 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let dim = self.nodes[a.0].value.dim();
        let mut mask = Array2::zeros(dim);
        for x in mask.iter_mut() {
            if rng.random::<f64>() >= p {
                *x = 1.0 / keep;
            }
        }
        self.mul_const(a, mask)
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        macro_rules! accum {
            ($idx:expr, $grad:expr) => {{
                let idx = $idx;
                if self.nodes[idx].needs_grad {
                    match &mut grads[idx] {
                        Some(g) => *g = &*g + &$grad,
                        slot @ None => *slot = Some($grad.to_owned()),
                    }
                }
            }};
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accum!(*a, g.dot(&bv.t()));
                    accum!(*b, av.t().dot(&g));
                }
                Op::MatMulNT { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accum!(*a, g.dot(bv));
                    accum!(*b, g.t().dot(av));
                }
                Op::Add { a, b } => {
                    accum!(*a, g);
                    accum!(*b, g);
                }
                Op::AddRow { a, row } => {
                    accum!(*a, g);
                    accum!(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Sub { a, b } => {
                    accum!(*a, g);
                    accum!(*b, -&g);
                }
                Op::Mul { a, b } => {
                    accum!(*a, &g * &self.nodes[*b].value);
                    accum!(*b, &g * &self.nodes[*a].value);
                }
                Op::MulConst { a, c } => {
                    accum!(*a, &g * c);
                }
                Op::MulCol { a, col } => {
                    let av = &self.nodes[*a].value;
                    let cv = &self.nodes[*col].value;
                    let mut ga = g.clone();
                    for (r, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                        let c = cv[[r, 0]];
                        row.mapv_inplace(|x| x * c);
                    }
                    accum!(*a, ga);
                    let mut gc = Array2::zeros((av.nrows(), 1));
                    for r in 0..av.nrows() {
                        gc[[r, 0]] = (0..av.ncols()).map(|j| g[[r, j]] * av[[r, j]]).sum();
                    }
                    accum!(*col, gc);
                }
                Op::Scale { a, c } => {
                    accum!(*a, &g * *c);
                }
                Op::AddScalar { a } => {
                    accum!(*a, g);
                }
                Op::Relu { a } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(av, |gx, &x| {
                        if x <= 0.0 {
                            *gx = 0.0;
                        }
                    });
                    accum!(*a, ga);
                }
                Op::SoftmaxRows { a } => {
                    let p = &self.nodes[i].value;
                    let mut ga = Array2::zeros(p.dim());
                    softmax_backward_into(&p.view(), &g.view(), ga.view_mut());
                    accum!(*a, ga);
                }
                Op::LogSoftmaxRows { a } => {
                    let ls = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for (r, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                        let gsum: f64 = (0..ls.ncols()).map(|j| g[[r, j]]).sum();
                        for (j, x) in row.iter_mut().enumerate() {
                            *x -= ls[[r, j]].exp() * gsum;
                        }
                    }
                    accum!(*a, ga);
                }
                Op::LogSumExpRows { a } => {
                    let av = &self.nodes[*a].value;
                    let lse = &self.nodes[i].value;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[[r, j]] = (av[[r, j]] - lse[[r, 0]]).exp() * g[[r, 0]];
                        }
                    }
                    accum!(*a, ga);
                }
                Op::LayerNormRows { a, gamma, beta, eps } => {
                    let av = &self.nodes[*a].value;
                    let gv = &self.nodes[*gamma].value;
                    let n = av.ncols() as f64;
                    let mut ga = Array2::zeros(av.dim());
                    let mut ggamma = Array2::zeros((1, av.ncols()));
                    let mut gbeta = Array2::zeros((1, av.ncols()));
                    for r in 0..av.nrows() {
                        let row = av.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let mut dxhat = vec![0.0; av.ncols()];
                        for j in 0..av.ncols() {
                            ggamma[[0, j]] += g[[r, j]] * xhat[j];
                            gbeta[[0, j]] += g[[r, j]];
                            dxhat[j] = g[[r, j]] * gv[[0, j]];
                        }
                        let m1: f64 = dxhat.iter().sum::<f64>() / n;
                        let m2: f64 = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / n;
                        for j in 0..av.ncols() {
                            ga[[r, j]] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    accum!(*a, ga);
                    accum!(*gamma, ggamma);
                    accum!(*beta, gbeta);
                }
                Op::RowL2Normalize { a, eps } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let row = av.row(r);
                        let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
                        let dot: f64 = (0..av.ncols()).map(|j| g[[r, j]] * row[j]).sum();
                        for j in 0..av.ncols() {
                            ga[[r, j]] = g[[r, j]] / norm - row[j] * dot / norm.powi(3);
                        }
                    }
                    accum!(*a, ga);
                }
                Op::NeighborMean { a, graph } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for (v, neigh) in graph.neighbors.iter().enumerate() {
                        if neigh.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / neigh.len() as f64;
                        for &u in neigh {
                            for j in 0..av.ncols() {
                                ga[[u as usize, j]] += g[[v, j]] * inv;
                            }
                        }
                    }
                    accum!(*a, ga);
                }
                Op::GatherRows { a, idx } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for (i_out, &r) in idx.iter().enumerate() {
                        for j in 0..av.ncols() {
                            ga[[r, j]] += g[[i_out, j]];
                        }
                    }
                    accum!(*a, ga);
                }
                Op::GatherCols { a, idx } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for (j_out, &c) in idx.iter().enumerate() {
                        for r in 0..av.nrows() {
                            ga[[r, c]] += g[[r, j_out]];
                        }
                    }
                    accum!(*a, ga);
                }
                Op::ConcatCols { a, b } => {
                    let p = self.nodes[*a].value.ncols();
                    accum!(*a, g.slice(s![.., ..p]));
                    accum!(*b, g.slice(s![.., p..]));
                }
                Op::MeanRows { a } => {
                    let av = &self.nodes[*a].value;
                    let inv = 1.0 / av.nrows() as f64;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[[r, j]] = g[[0, j]] * inv;
                        }
                    }
                    accum!(*a, ga);
                }
                Op::GroupMeanRows { a, group } => {
                    let av = &self.nodes[*a].value;
                    let inv = 1.0 / *group as f64;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[[r, j]] = g[[r / group, j]] * inv;
                        }
                    }
                    accum!(*a, ga);
                }
                Op::RowSum { a } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[[r, j]] = g[[r, 0]];
                        }
                    }
                    accum!(*a, ga);
                }
                Op::SumAll { a } => {
                    let av = &self.nodes[*a].value;
                    accum!(*a, Array2::from_elem(av.dim(), g[[0, 0]]));
                }
                Op::ClampMin { a, min } => {
                    let av = &self.nodes[*a].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(av, |gx, &x| {
                        if x <= *min {
                            *gx = 0.0;
                        }
                    });
                    accum!(*a, ga);
                }
                Op::Ln { a } => {
                    let av = &self.nodes[*a].value;
                    accum!(*a, &g / av);
                }
                Op::BlockAttention { q, k, v, heads, block, probs } => {
                    let (qv, kv, vv) =
                        (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let n_blocks = qv.nrows() / block;
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(qv.dim());
                    let mut gv = Array2::zeros(qv.dim());
                    for b in 0..n_blocks {
                        let rows = b * block..(b + 1) * block;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows.clone(), cols.clone()]);
                            let gvh = p.t().dot(&go);
                            let gp = go.dot(&vh.t());
                            let mut gs = Array2::zeros(p.dim());
                            softmax_backward_into(&p.view(), &gp.view(), gs.view_mut());
                            gs *= scale;
                            let gqh = gs.dot(&kh);
                            let gkh = gs.t().dot(&qh);
                            gq.slice_mut(s![rows.clone(), cols.clone()])
                                .zip_mut_with(&gqh, |a, &b| *a += b);
                            gk.slice_mut(s![rows.clone(), cols.clone()])
                                .zip_mut_with(&gkh, |a, &b| *a += b);
                            gv.slice_mut(s![rows.clone(), cols.clone()])
                                .zip_mut_with(&gvh, |a, &b| *a += b);
                        }
                    }
                    accum!(*q, gq);
                    accum!(*k, gk);
                    accum!(*v, gv);
                }
            }
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Collect gradients for parameter slots `0..n_slots`, summing over
    /// multiple reads of the same slot.
    pub fn param_grads(&self, grads: &Grads, n_slots: usize) -> Vec<Option<Array2<f64>>> {
        let mut out: Vec<Option<Array2<f64>>> = vec![None; n_slots];
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(slot) = node.param_slot else { continue };
            let Some(g) = &grads.by_node[i] else { continue };
            match &mut out[slot] {
                Some(acc) => *acc = &*acc + g,
                slot_ref @ None => *slot_ref = Some(g.clone()),
            }
        }
        out
    }
}

/// Compare analytic gradients against central finite differences for a loss
/// built by `build` over the given leaf inputs. Returns the max elementwise
/// relative error, with denominators floored at 1.
pub fn gradient_check(
    inputs: &[Array2<f64>],
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Var,
    step: f64,
) -> f64 {
    fn eval(points: &[Array2<f64>], build: &mut dyn FnMut(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.input(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.scalar(loss)
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|p| tape.input(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut max_rel = 0.0f64;
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (t, input) in inputs.iter().enumerate() {
        let analytic = grads
            .of(vars[t])
            .cloned()
            .unwrap_or_else(|| Array2::zeros(input.dim()));
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let orig = work[t][[r, c]];
                work[t][[r, c]] = orig + step;
                let up = eval(&work, build);
                work[t][[r, c]] = orig - step;
                let down = eval(&work, build);
                work[t][[r, c]] = orig;
                let fd = (up - down) / (2.0 * step);
                let a = analytic[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.input(randn(&mut rng, 5, 7) * 10.0);
        let p = tape.softmax_rows(x);
        for row in tape.value(p).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let graph = Rc::new(MeanAggGraph {
            neighbors: vec![vec![1, 2], vec![0], vec![0], vec![]],
        });
        let idx = Rc::new(vec![2usize, 0, 2]);
        let cidx = Rc::new(vec![1usize, 1, 0]);
        let mask = randn(&mut rng, 4, 3);

        type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
        let cases: Vec<(&str, Vec<Array2<f64>>, BuildFn)> = vec![
            (
                "matmul+relu",
                vec![randn(&mut rng, 3, 4), randn(&mut rng, 4, 2)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let m = t.matmul(v[0], v[1]);
                    let r = t.relu(m);
                    t.sum_all(r)
                }),
            ),
            (
                "matmul_nt+scale",
                vec![randn(&mut rng, 3, 4), randn(&mut rng, 5, 4)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let m = t.matmul_nt(v[0], v[1]);
                    let s = t.scale(m, 0.37);
                    t.sum_all(s)
                }),
            ),
            (
                "add_row+mul",
                vec![randn(&mut rng, 4, 3), randn(&mut rng, 1, 3), randn(&mut rng, 4, 3)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.add_row(v[0], v[1]);
                    let m = t.mul(a, v[2]);
                    t.sum_all(m)
                }),
            ),
            (
                "softmax+ln",
                vec![randn(&mut rng, 3, 5)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let p = t.softmax_rows(v[0]);
                    let c = t.clamp_min(p, 1e-12);
                    let l = t.ln(c);
                    let w = t.mul_const(l, Array2::from_elem((3, 5), 0.2));
                    t.sum_all(w)
                }),
            ),
            (
                "log_softmax",
                vec![randn(&mut rng, 4, 3)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let ls = t.log_softmax_rows(v[0]);
                    let w = t.mul_const(ls, Array2::from_elem((4, 3), -0.5));
                    t.sum_all(w)
                }),
            ),
            (
                "logsumexp",
                vec![randn(&mut rng, 4, 6)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let l = t.logsumexp_rows(v[0]);
                    t.sum_all(l)
                }),
            ),
            (
                "layer_norm",
                vec![randn(&mut rng, 4, 5), randn(&mut rng, 1, 5), randn(&mut rng, 1, 5)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
                    let w = t.mul_const(y, Array2::from_elem((4, 5), 0.3));
                    t.sum_all(w)
                }),
            ),
            (
                "row_l2_normalize",
                vec![randn(&mut rng, 4, 3)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let y = t.row_l2_normalize(v[0], 1e-12);
                    let m = t.matmul_nt(y, y);
                    t.sum_all(m)
                }),
            ),
            (
                "neighbor_mean",
                vec![randn(&mut rng, 4, 3)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.neighbor_mean(v[0], graph.clone());
                    let r = t.relu(y);
                    t.sum_all(r)
                }),
            ),
            (
                "gather_rows+concat",
                vec![randn(&mut rng, 4, 3), randn(&mut rng, 3, 2)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let gr = t.gather_rows(v[0], idx.clone());
                    let cc = t.concat_cols(gr, v[1]);
                    let m = t.mul_const(cc, Array2::from_elem((3, 5), 0.7));
                    t.sum_all(m)
                }),
            ),
            (
                "gather_cols+mul_col",
                vec![randn(&mut rng, 4, 3), randn(&mut rng, 4, 1)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let gc = t.gather_cols(v[0], cidx.clone());
                    let mc = t.mul_col(gc, v[1]);
                    t.sum_all(mc)
                }),
            ),
            (
                "means+rowsum",
                vec![randn(&mut rng, 6, 3)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let m = t.mean_rows(v[0]);
                    let gm = t.group_mean_rows(v[0], 2);
                    let rs = t.row_sum(gm);
                    let s1 = t.sum_all(m);
                    let s2 = t.sum_all(rs);
                    t.add(s1, s2)
                }),
            ),
            (
                "sub+add_scalar+mul_const",
                vec![randn(&mut rng, 4, 3), randn(&mut rng, 4, 3)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let d = t.sub(v[0], v[1]);
                    let e = t.add_scalar(d, 0.4);
                    let m = t.mul_const(e, mask.clone());
                    t.sum_all(m)
                }),
            ),
            (
                "block_attention",
                vec![randn(&mut rng, 6, 4), randn(&mut rng, 6, 4), randn(&mut rng, 6, 4)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let o = t.block_attention(v[0], v[1], v[2], 2, 3);
                    let w = t.mul_const(o, Array2::from_elem((6, 4), 0.25));
                    t.sum_all(w)
                }),
            ),
        ];

        for (name, inputs, build) in cases {
            let err = gradient_check(&inputs, &mut |t, v| build(t, v), 1e-5);
            assert!(err < 1e-6, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn attention_is_permutation_equivariant_within_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 5, 4);
        let mut perm: Vec<usize> = vec![3, 0, 4, 1, 2];
        let mut xp = Array2::zeros((5, 4));
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).assign(&x.row(p));
        }
        let run = |m: &Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.input(m.clone());
            let o = tape.block_attention(v, v, v, 2, 5);
            tape.value(o).clone()
        };
        let a = run(&x);
        let b = run(&xp);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((b[[i, j]] - a[[p, j]]).abs() < 1e-12);
            }
        }
        perm.clear();
    }

    #[test]
    fn param_grads_sum_over_repeated_reads() {
        let w = Array2::from_elem((2, 2), 1.5);
        let mut tape = Tape::new();
        let a = tape.param(w.clone(), 0);
        let b = tape.param(w.clone(), 0);
        let s = tape.add(a, b);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss);
        let pg = tape.param_grads(&grads, 1);
        let g = pg[0].as_ref().unwrap();
        assert_eq!(g, &Array2::from_elem((2, 2), 2.0));
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Array2::from_elem((2, 2), 3.0));
        let x = tape.input(Array2::from_elem((2, 2), 2.0));
        let m = tape.mul(c, x);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss);
        assert!(grads.of(c).is_none());
        assert_eq!(grads.of(x).unwrap(), &Array2::from_elem((2, 2), 3.0));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.input(Array2::from_elem((3, 3), 2.0));
        let y = tape.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }
}
