//! Reverse-mode tape over [`Tensor`] values.
//!
//! Ops append nodes that remember their inputs; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients. Node indices are
//! monotone, so reverse index order is a valid topological order.

use std::collections::HashSet;

use super::{KernelError, Tensor};

const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Forward copy of another node; gradient does not flow through. The
    /// parent index is kept for graph debugging only.
    Detach(#[allow(dead_code)] usize),
    Matmul(usize, usize),
    /// a x b^T without materializing the transpose.
    MatmulTransB(usize, usize),
    Add(usize, usize),
    /// Matrix plus a broadcast 1 x c row.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    MaxPoolRows(usize),
    Log1p(usize),
    Log(usize),
    Sum(usize),
    MeanRows(usize),
    Select { x: usize, row: usize, col: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    /// Rows of `table` selected by token id.
    Gather { table: usize, ids: Vec<usize> },
    /// Row-wise KL(softmax(a) || softmax(b)) of two logit matrices.
    KlDivRows(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations and replays them backward for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    used_roots: HashSet<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Accumulated gradient for a node, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Clears accumulated gradients and allows backward to run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.used_roots.clear();
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, needs_grad: bool) -> Result<Var, KernelError> {
        if !value.all_finite() {
            return Err(KernelError::NonFinite { op });
        }
        self.nodes.push(Node { value, op: kind, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, KernelError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, KernelError> {
        self.leaf(value, false)
    }

    /// Copies a value onto the tape as a gradient barrier.
    pub fn detach(&mut self, a: Var) -> Result<Var, KernelError> {
        let value = self.value(a).clone();
        self.push("detach", value, Op::Detach(a.0), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(KernelError::ShapeMismatch { op: "matmul", left: av.shape(), right: bv.shape() });
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(n, m);
        matmul_into(av, bv, &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::Matmul(a.0, b.0), needs)
    }

    /// a x b^T; `a` is n x k, `b` is m x k, result n x m.
    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(KernelError::ShapeMismatch { op: "matmul_trans_b", left: av.shape(), right: bv.shape() });
        }
        let (n, m) = (av.rows(), bv.rows());
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let arow = av.row_slice(i);
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot_slices(arow, bv.row_slice(j));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_trans_b", out, Op::MatmulTransB(a.0, b.0), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(KernelError::ShapeMismatch { op: "add", left: av.shape(), right: bv.shape() });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a.0, b.0), needs)
    }

    /// Adds a 1 x c row to every row of an n x c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, KernelError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(KernelError::ShapeMismatch { op: "add_row", left: av.shape(), right: rv.shape() });
        }
        let mut out = av.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += rv.data()[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push("add_row", out, Op::AddRow(a.0, row.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(KernelError::ShapeMismatch { op: "mul", left: av.shape(), right: bv.shape() });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, KernelError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a);
        self.push("scale", out, Op::Scale(a.0, c), needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a);
        self.push("relu", out, Op::Relu(a.0), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_forward(x)).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a);
        self.push("gelu", out, Op::Gelu(a.0), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            softmax_row(av.row_slice(i), &mut out.data[i * av.cols()..(i + 1) * av.cols()]);
        }
        let needs = self.needs(a);
        self.push("softmax_rows", out, Op::SoftmaxRows(a.0), needs)
    }

    /// Row-wise layer normalization with affine parameters (1 x c each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, KernelError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if gv.shape() != (1, xv.cols()) {
            return Err(KernelError::ShapeMismatch { op: "layer_norm", left: xv.shape(), right: gv.shape() });
        }
        if bv.shape() != (1, xv.cols()) {
            return Err(KernelError::ShapeMismatch { op: "layer_norm", left: xv.shape(), right: bv.shape() });
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), c);
        for i in 0..xv.rows() {
            let row = xv.row_slice(i);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mean) * inv;
                out.data[i * c + j] = gv.data()[j] * xhat + bv.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }, needs)
    }

    /// Column maxima over rows: n x c -> 1 x c. Gradient routes to the
    /// first (lowest row index) maximum of each column.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(KernelError::Invalid { op: "max_pool_rows", msg: "empty input".into() });
        }
        let c = av.cols();
        let mut out = Tensor::zeros(1, c);
        for j in 0..c {
            let mut best = av.get(0, j);
            for i in 1..av.rows() {
                let v = av.get(i, j);
                if v > best {
                    best = v;
                }
            }
            out.data[j] = best;
        }
        let needs = self.needs(a);
        self.push("max_pool_rows", out, Op::MaxPoolRows(a.0), needs)
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.ln_1p()).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a);
        self.push("log1p", out, Op::Log1p(a.0), needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor { rows: av.rows(), cols: av.cols(), data };
        let needs = self.needs(a);
        self.push("log", out, Op::Log(a.0), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, KernelError> {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(total), Op::Sum(a.0), needs)
    }

    /// Column means: n x c -> 1 x c.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(KernelError::Invalid { op: "mean_rows", msg: "empty input".into() });
        }
        let (n, c) = av.shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..n {
            for j in 0..c {
                out.data[j] += av.get(i, j);
            }
        }
        for j in 0..c {
            out.data[j] /= n as f64;
        }
        let needs = self.needs(a);
        self.push("mean_rows", out, Op::MeanRows(a.0), needs)
    }

    /// Extracts a single entry as a scalar.
    pub fn select(&mut self, a: Var, row: usize, col: usize) -> Result<Var, KernelError> {
        let av = self.value(a);
        if row >= av.rows() || col >= av.cols() {
            return Err(KernelError::Invalid {
                op: "select",
                msg: format!("index ({row},{col}) out of bounds for {:?}", av.shape()),
            });
        }
        let v = av.get(row, col);
        let needs = self.needs(a);
        self.push("select", Tensor::scalar(v), Op::Select { x: a.0, row, col }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        if parts.is_empty() {
            return Err(KernelError::Invalid { op: "concat_rows", msg: "no parts".into() });
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(KernelError::ShapeMismatch { op: "concat_rows", left: (rows, c), right: pv.shape() });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", Tensor { rows, cols: c, data }, Op::ConcatRows(idx), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        if parts.is_empty() {
            return Err(KernelError::Invalid { op: "concat_cols", msg: "no parts".into() });
        }
        let n = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != n {
                return Err(KernelError::ShapeMismatch { op: "concat_cols", left: (n, cols), right: pv.shape() });
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(n, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p).clone();
            for i in 0..n {
                for j in 0..pv.cols() {
                    out.set(i, offset + j, pv.get(i, j));
                }
            }
            offset += pv.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", out, Op::ConcatCols(idx), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(KernelError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of bounds for {:?}", start + len, av.shape()),
            });
        }
        let c = av.cols();
        let data = av.data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(a);
        self.push("slice_rows", Tensor { rows: len, cols: c, data }, Op::SliceRows { x: a.0, start, len }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(KernelError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of bounds for {:?}", start + len, av.shape()),
            });
        }
        let mut out = Tensor::zeros(av.rows(), len);
        for i in 0..av.rows() {
            for j in 0..len {
                out.set(i, j, av.get(i, start + j));
            }
        }
        let needs = self.needs(a);
        self.push("slice_cols", out, Op::SliceCols { x: a.0, start, len }, needs)
    }

    /// Embedding lookup: selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var, KernelError> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            let id = id as usize;
            if id >= tv.rows() {
                return Err(KernelError::Invalid {
                    op: "gather",
                    msg: format!("row {id} out of bounds for {:?}", tv.shape()),
                });
            }
            data.extend_from_slice(tv.row_slice(id));
        }
        let needs = self.needs(table);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.push(
            "gather",
            Tensor { rows: ids.len(), cols: c, data },
            Op::Gather { table: table.0, ids: idx },
            needs,
        )
    }

    /// Row-wise KL(softmax(a_row) || softmax(b_row)) over two logit
    /// matrices of equal shape; result is n x 1.
    pub fn kl_div_rows(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(KernelError::ShapeMismatch { op: "kl_div_rows", left: av.shape(), right: bv.shape() });
        }
        let (n, c) = av.shape();
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let lp = log_softmax(av.row_slice(i));
            let lq = log_softmax(bv.row_slice(i));
            let mut kl = 0.0;
            for j in 0..c {
                kl += lp[j].exp() * (lp[j] - lq[j]);
            }
            out.data[i] = kl;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("kl_div_rows", out, Op::KlDivRows(a.0, b.0), needs)
    }

    /// Runs reverse-mode accumulation from a scalar root. Each root may be
    /// used once; gradients from successive roots accumulate until
    /// [`Tape::reset_grads`].
    pub fn backward(&mut self, root: Var) -> Result<(), KernelError> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(KernelError::NotScalar { shape });
        }
        if !self.used_roots.insert(root.0) {
            return Err(KernelError::BackwardTwice);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }

        let mut pass: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        pass[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = pass[i].take() else { continue };
            self.propagate(i, &grad, &mut pass);
            accumulate(&mut self.grads[i], &grad);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, pass: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut send = |target: usize, contribution: Tensor| {
            if self.nodes[target].needs_grad {
                accumulate(&mut pass[target], &contribution);
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // ga = g x b^T: rows of g dotted with rows of b.
                let (n, m) = g.shape();
                let k = av.cols();
                let mut ga = Tensor::zeros(n, k);
                for r in 0..n {
                    let grow = g.row_slice(r);
                    let garow = &mut ga.data[r * k..(r + 1) * k];
                    for (t, out) in garow.iter_mut().enumerate() {
                        *out = dot_slices(grow, bv.row_slice(t));
                    }
                }
                // gb = a^T x g: axpy of g rows scaled by a entries.
                let mut gb = Tensor::zeros(k, m);
                for r in 0..n {
                    let arow = av.row_slice(r);
                    let grow = g.row_slice(r);
                    for (t, &coef) in arow.iter().enumerate() {
                        if coef == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb.data[t * m..(t + 1) * m];
                        for (o, &gv) in gbrow.iter_mut().zip(grow) {
                            *o += coef * gv;
                        }
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::MatmulTransB(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // out = a x b^T with a: n x k, b: m x k, g: n x m.
                let (n, m) = g.shape();
                let k = av.cols();
                // ga = g x b
                let mut ga = Tensor::zeros(n, k);
                matmul_into(g, bv, &mut ga, n, m, k);
                // gb = g^T x a: axpy of a rows scaled by g entries.
                let mut gb = Tensor::zeros(m, k);
                for r in 0..n {
                    let grow = g.row_slice(r);
                    let arow = av.row_slice(r);
                    for (c, &coef) in grow.iter().enumerate() {
                        if coef == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb.data[c * k..(c + 1) * k];
                        for (o, &a_v) in gbrow.iter_mut().zip(arow) {
                            *o += coef * a_v;
                        }
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gr.data[c] += g.get(r, c);
                    }
                }
                send(*row, gr);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = Tensor {
                    rows: g.rows(),
                    cols: g.cols(),
                    data: g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                };
                let gb = Tensor {
                    rows: g.rows(),
                    cols: g.cols(),
                    data: g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                };
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor {
                    rows: g.rows(),
                    cols: g.cols(),
                    data: g.data().iter().map(|x| x * c).collect(),
                };
                send(*a, ga);
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                send(*a, Tensor { rows: g.rows(), cols: g.cols(), data });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv * gelu_grad(x))
                    .collect();
                send(*a, Tensor { rows: g.rows(), cols: g.cols(), data });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut ga = Tensor::zeros(n, c);
                for i in 0..n {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        ga.set(i, j, yr[j] * (gr[j] - dot));
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let (n, c) = xv.shape();
                let mut gx = Tensor::zeros(n, c);
                let mut ggamma = Tensor::zeros(1, c);
                let mut gbeta = Tensor::zeros(1, c);
                for i in 0..n {
                    let row = xv.row_slice(i);
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gr = g.row_slice(i);
                    let mut dxhat = vec![0.0; c];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        ggamma.data[j] += gr[j] * xhat;
                        gbeta.data[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    let m = c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        gx.set(i, j, inv * (dxhat[j] - sum_dxhat / m - xhat * sum_dxhat_xhat / m));
                    }
                }
                send(*x, gx);
                send(*gamma, ggamma);
                send(*beta, gbeta);
            }
            Op::MaxPoolRows(a) => {
                let av = &self.nodes[*a].value;
                let (n, c) = av.shape();
                let mut ga = Tensor::zeros(n, c);
                for j in 0..c {
                    let mut best_i = 0;
                    let mut best = av.get(0, j);
                    for i in 1..n {
                        let v = av.get(i, j);
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                    ga.set(best_i, j, g.get(0, j));
                }
                send(*a, ga);
            }
            Op::Log1p(a) => {
                let av = &self.nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv / (1.0 + x))
                    .collect();
                send(*a, Tensor { rows: g.rows(), cols: g.cols(), data });
            }
            Op::Log(a) => {
                let av = &self.nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                send(*a, Tensor { rows: g.rows(), cols: g.cols(), data });
            }
            Op::Sum(a) => {
                let av = &self.nodes[*a].value;
                let gs = g.data()[0];
                send(*a, Tensor { rows: av.rows(), cols: av.cols(), data: vec![gs; av.len()] });
            }
            Op::MeanRows(a) => {
                let av = &self.nodes[*a].value;
                let (n, c) = av.shape();
                let mut ga = Tensor::zeros(n, c);
                for i in 0..n {
                    for j in 0..c {
                        ga.set(i, j, g.data()[j] / n as f64);
                    }
                }
                send(*a, ga);
            }
            Op::Select { x, row, col } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                gx.set(*row, *col, g.data()[0]);
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let rows = pv.rows();
                    let c = pv.cols();
                    let data = g.data()[offset * c..(offset + rows) * c].to_vec();
                    offset += rows;
                    send(p, Tensor { rows, cols: c, data });
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let (n, c) = pv.shape();
                    let mut gp = Tensor::zeros(n, c);
                    for i in 0..n {
                        for j in 0..c {
                            gp.set(i, j, g.get(i, offset + j));
                        }
                    }
                    offset += c;
                    send(p, gp);
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                gx.data[start * c..(start + len) * c].copy_from_slice(g.data());
                send(*x, gx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    for j in 0..*len {
                        gx.set(i, start + j, g.get(i, j));
                    }
                }
                send(*x, gx);
            }
            Op::Gather { table, ids } => {
                let tv = &self.nodes[*table].value;
                let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                let c = tv.cols();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt.data[id * c + j] += g.get(r, j);
                    }
                }
                send(*table, gt);
            }
            Op::KlDivRows(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, c) = av.shape();
                let mut ga = Tensor::zeros(n, c);
                let mut gb = Tensor::zeros(n, c);
                for i in 0..n {
                    let lp = log_softmax(av.row_slice(i));
                    let lq = log_softmax(bv.row_slice(i));
                    let kl = node.value.get(i, 0);
                    let gr = g.get(i, 0);
                    for j in 0..c {
                        let p = lp[j].exp();
                        let q = lq[j].exp();
                        ga.set(i, j, gr * p * (lp[j] - lq[j] - kl));
                        gb.set(i, j, gr * (q - p));
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: &Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data.iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contribution.clone()),
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four lanes keep the dependency chain short enough to vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor, n: usize, k: usize, m: usize) {
    // ikj order keeps the inner loop contiguous over b and out rows.
    for i in 0..n {
        let arow = a.row_slice(i);
        for (t, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = b.row_slice(t);
            let orow = &mut out.data[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (mean, var)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    let logz = z.ln() + max;
    row.iter().map(|&x| x - logz).collect()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
