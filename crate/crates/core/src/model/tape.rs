//! A small eager reverse-mode autodiff tape over `f64` matrices.
//!
//! Every value is a 2-D matrix. Sequences of a batch are laid out
//! batch-major: row `b * time + t` holds step `t` of item `b`.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Array2<f64>>),
    RowMask(Var, Rc<Array1<f64>>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Rc<Vec<usize>>),
    Im2Col {
        x: Var,
        time: usize,
        kernel: usize,
    },
    TimeStep {
        x: Var,
        time: usize,
        t: usize,
    },
    StackTime(Vec<Var>),
    Repeat(Var, usize),
    Reshape(Var),
    MaskedSoftmax(Var),
    Attend {
        weights: Var,
        values: Var,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    MaskedMse {
        pred: Var,
        target: Rc<Array2<f64>>,
        mask: Rc<Array1<f64>>,
        denom: f64,
    },
    WeightedBce {
        logits: Var,
        target: Rc<Array2<f64>>,
        weight: Rc<Array1<f64>>,
        denom: f64,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    /// Depends on a parameter, so gradients must flow into it.
    grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::RowMask(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SliceCols(a, _, _)
            | Op::Gather(a, _)
            | Op::Repeat(a, _)
            | Op::Reshape(a)
            | Op::MaskedSoftmax(a) => vec![*a],
            Op::Im2Col { x, .. } | Op::TimeStep { x, .. } => vec![*x],
            Op::Concat(v) | Op::StackTime(v) | Op::Sum(v) => v.clone(),
            Op::Attend { weights, values } => vec![*weights, *values],
            Op::LstmCell { gates, c_prev } => vec![*gates, *c_prev],
            Op::MaskedMse { pred, .. } => vec![*pred],
            Op::WeightedBce { logits, .. } => vec![*logits],
        }
    }
}

/// `out += aᵀ · g` without a temporary.
fn mm_tn_acc(out: &mut Array2<f64>, a: &Array2<f64>, g: &Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &a.t(), g, 1.0, out);
}

/// Eager computation graph; values are computed as nodes are added.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, Rc::new(c)))
    }

    /// Multiplies row `r` by `mask[r]`.
    pub fn row_mask(&mut self, a: Var, mask: Rc<Array1<f64>>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, &m) in v.rows_mut().into_iter().zip(mask.iter()) {
            if m != 1.0 {
                row *= m;
            }
        }
        self.push(v, Op::RowMask(a, mask))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let v = self.value(table).select(Axis(0), &ids);
        self.push(v, Op::Gather(table, Rc::new(ids)))
    }

    /// Unfolds a batch-major sequence `[B*time × C]` into `[B*time × kernel*C]`
    /// windows centered on each step, zero outside `[0, time)`.
    pub fn im2col(&mut self, x: Var, time: usize, kernel: usize) -> Var {
        let xv = self.value(x);
        let (rows, c) = xv.dim();
        let half = (kernel / 2) as isize;
        let mut out = Array2::zeros((rows, kernel * c));
        for r in 0..rows {
            let t = (r % time) as isize;
            let base = r as isize - t;
            for k in 0..kernel {
                let src = t + k as isize - half;
                if src >= 0 && src < time as isize {
                    out.slice_mut(s![r, k * c..(k + 1) * c])
                        .assign(&xv.row((base + src) as usize));
                }
            }
        }
        self.push(out, Op::Im2Col { x, time, kernel })
    }

    /// Step `t` of every batch item: `[B × C]` from `[B*time × C]`.
    pub fn time_step(&mut self, x: Var, time: usize, t: usize) -> Var {
        let xv = self.value(x);
        let batch = xv.nrows() / time;
        let idx: Vec<usize> = (0..batch).map(|b| b * time + t).collect();
        let v = xv.select(Axis(0), &idx);
        self.push(v, Op::TimeStep { x, time, t })
    }

    /// Inverse of [`Tape::time_step`]: `steps[t]` is `[B × C]`, output `[B*T × C]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        let time = steps.len();
        let (batch, c) = self.value(steps[0]).dim();
        let mut out = Array2::zeros((batch * time, c));
        for (t, s) in steps.iter().enumerate() {
            let sv = self.value(*s);
            for b in 0..batch {
                out.row_mut(b * time + t).assign(&sv.row(b));
            }
        }
        self.push(out, Op::StackTime(steps.to_vec()))
    }

    /// `[B × C]` → `[B*times × C]` with each row repeated `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let idx: Vec<usize> = (0..av.nrows() * times).map(|r| r / times).collect();
        let v = av.select(Axis(0), &idx);
        self.push(v, Op::Repeat(a, times))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = av.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("element count preserved");
        self.push(v, Op::Reshape(a))
    }

    /// Row softmax where entries with `mask == 0` get zero weight.
    pub fn masked_softmax(&mut self, a: Var, mask: &Array2<f64>) -> Var {
        let av = self.value(a);
        let mut v = Array2::zeros(av.dim());
        for ((mut out, row), m) in v.rows_mut().into_iter().zip(av.rows()).zip(mask.rows()) {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &m)| m > 0.0)
                .fold(f64::NEG_INFINITY, |acc, (&x, _)| acc.max(x));
            let mut total = 0.0;
            for ((o, &x), &mk) in out.iter_mut().zip(row).zip(m) {
                if mk > 0.0 {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            out /= total;
        }
        self.push(v, Op::MaskedSoftmax(a))
    }

    /// `out[b] = Σ_t weights[b, t] · values[b*T + t]`.
    pub fn attend(&mut self, weights: Var, values: Var) -> Var {
        let w = self.value(weights);
        let h = self.value(values);
        let (batch, time) = w.dim();
        let mut out = Array2::zeros((batch, h.ncols()));
        for b in 0..batch {
            let block = h.slice(s![b * time..(b + 1) * time, ..]);
            out.row_mut(b).assign(&w.row(b).dot(&block));
        }
        self.push(out, Op::Attend { weights, values })
    }

    /// LSTM cell nonlinearity. `gates` is `[B × 4H]` in `i, f, g, o` order;
    /// output is `[B × 2H]` holding `h | c`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let g = self.value(gates);
        let cp = self.value(c_prev);
        let (batch, four_h) = g.dim();
        let h = four_h / 4;
        let mut out = Array2::zeros((batch, 2 * h));
        for b in 0..batch {
            for j in 0..h {
                let i = sigmoid(g[[b, j]]);
                let f = sigmoid(g[[b, h + j]]);
                let gg = g[[b, 2 * h + j]].tanh();
                let o = sigmoid(g[[b, 3 * h + j]]);
                let c = f * cp[[b, j]] + i * gg;
                out[[b, j]] = o * c.tanh();
                out[[b, h + j]] = c;
            }
        }
        self.push(out, Op::LstmCell { gates, c_prev })
    }

    /// `Σ_r mask[r] · ‖pred[r] − target[r]‖² / denom` as a `1 × 1` value.
    pub fn masked_mse(
        &mut self,
        pred: Var,
        target: Rc<Array2<f64>>,
        mask: Rc<Array1<f64>>,
        denom: f64,
    ) -> Var {
        let p = self.value(pred);
        let mut total = 0.0;
        for ((pr, tr), &m) in p.rows().into_iter().zip(target.rows()).zip(mask.iter()) {
            if m != 0.0 {
                total += m * pr.iter().zip(tr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            },
        )
    }

    /// Binary cross-entropy on logits `[N × 1]` with per-row weights, summed over
    /// rows and divided by `denom`.
    pub fn weighted_bce(
        &mut self,
        logits: Var,
        target: Rc<Array2<f64>>,
        weight: Rc<Array1<f64>>,
        denom: f64,
    ) -> Var {
        let z = self.value(logits);
        let mut total = 0.0;
        for ((&x, &y), &w) in z.iter().zip(target.iter()).zip(weight.iter()) {
            if w != 0.0 {
                // y·softplus(−x) + (1−y)·softplus(x)
                total += w * (y * softplus(-x) + (1.0 - y) * softplus(x));
            }
        }
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Op::WeightedBce {
                logits,
                target,
                weight,
                denom,
            },
        )
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for p in &parts[1..] {
            v += self.value(*p);
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Back-propagates from the scalar `root` and returns parameter gradients,
    /// summed over every use of each parameter.
    pub fn backward(&self, root: Var, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));
        let mut param_grads: Vec<Array2<f64>> = store
            .values()
            .iter()
            .map(|v| Array2::zeros(v.dim()))
            .collect();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }
        fn acc_with(
            grads: &mut [Option<Array2<f64>>],
            v: Var,
            dim: (usize, usize),
            f: impl FnOnce(&mut Array2<f64>),
        ) {
            let slot = grads[v.0].get_or_insert_with(|| Array2::zeros(dim));
            f(slot);
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let dim_of = |v: Var| self.nodes[v.0].value.dim();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => param_grads[id.index()] += &g,
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].grad {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].grad {
                        let av = self.value(*a);
                        acc_with(&mut grads, *b, dim_of(*b), |slot| mm_tn_acc(slot, av, &g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::MulConst(a, c) => acc(&mut grads, *a, g * &**c),
                Op::RowMask(a, mask) => {
                    let mut g = g;
                    for (mut row, &m) in g.rows_mut().into_iter().zip(mask.iter()) {
                        if m != 1.0 {
                            row *= m;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = g;
                    Zip::from(&mut g)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = dim_of(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    acc_with(&mut grads, *a, dim_of(*a), |buf| {
                        let mut view = buf.slice_mut(s![.., *start..*end]);
                        view += &g;
                    });
                }
                Op::Gather(table, ids) => {
                    acc_with(&mut grads, *table, dim_of(*table), |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            let mut row = buf.row_mut(id);
                            row += &g.row(r);
                        }
                    });
                }
                Op::Im2Col { x, time, kernel } => {
                    let (rows, c) = dim_of(*x);
                    let half = (*kernel / 2) as isize;
                    acc_with(&mut grads, *x, (rows, c), |buf| {
                        for r in 0..rows {
                            let t = (r % time) as isize;
                            let base = r as isize - t;
                            for k in 0..*kernel {
                                let src = t + k as isize - half;
                                if src >= 0 && src < *time as isize {
                                    let mut dst = buf.row_mut((base + src) as usize);
                                    dst += &g.slice(s![r, k * c..(k + 1) * c]);
                                }
                            }
                        }
                    });
                }
                Op::TimeStep { x, time, t } => {
                    acc_with(&mut grads, *x, dim_of(*x), |buf| {
                        for b in 0..g.nrows() {
                            let mut row = buf.row_mut(b * time + t);
                            row += &g.row(b);
                        }
                    });
                }
                Op::StackTime(steps) => {
                    let time = steps.len();
                    let batch = g.nrows() / time;
                    for (t, s) in steps.iter().enumerate() {
                        let idx: Vec<usize> = (0..batch).map(|b| b * time + t).collect();
                        acc(&mut grads, *s, g.select(Axis(0), &idx));
                    }
                }
                Op::Repeat(a, times) => {
                    let (rows, c) = dim_of(*a);
                    let mut ga = Array2::zeros((rows, c));
                    for (r, row) in g.rows().into_iter().enumerate() {
                        let mut dst = ga.row_mut(r / times);
                        dst += &row;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = dim_of(*a);
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(dim, data).expect("same size"));
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((mut out, yr), gr) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Attend { weights, values } => {
                    let w = self.value(*weights);
                    let h = self.value(*values);
                    let (batch, time) = w.dim();
                    let mut gw = Array2::zeros((batch, time));
                    let mut gh = Array2::zeros(h.dim());
                    for b in 0..batch {
                        let block = h.slice(s![b * time..(b + 1) * time, ..]);
                        gw.row_mut(b).assign(&block.dot(&g.row(b)));
                        for t in 0..time {
                            let mut dst = gh.row_mut(b * time + t);
                            dst.scaled_add(w[[b, t]], &g.row(b));
                        }
                    }
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *values, gh);
                }
                Op::LstmCell { gates, c_prev } => {
                    let gv = self.value(*gates);
                    let cp = self.value(*c_prev);
                    let (batch, four_h) = gv.dim();
                    let h = four_h / 4;
                    let mut g_gates = Array2::zeros((batch, four_h));
                    let mut g_cprev = Array2::zeros((batch, h));
                    for b in 0..batch {
                        for j in 0..h {
                            let i = sigmoid(gv[[b, j]]);
                            let f = sigmoid(gv[[b, h + j]]);
                            let gg = gv[[b, 2 * h + j]].tanh();
                            let o = sigmoid(gv[[b, 3 * h + j]]);
                            let c = node.value[[b, h + j]];
                            let tc = c.tanh();
                            let dh = g[[b, j]];
                            let dc = g[[b, h + j]] + dh * o * (1.0 - tc * tc);
                            g_gates[[b, j]] = dc * gg * i * (1.0 - i);
                            g_gates[[b, h + j]] = dc * cp[[b, j]] * f * (1.0 - f);
                            g_gates[[b, 2 * h + j]] = dc * i * (1.0 - gg * gg);
                            g_gates[[b, 3 * h + j]] = dh * tc * o * (1.0 - o);
                            g_cprev[[b, j]] = dc * f;
                        }
                    }
                    acc(&mut grads, *gates, g_gates);
                    acc(&mut grads, *c_prev, g_cprev);
                }
                Op::MaskedMse {
                    pred,
                    target,
                    mask,
                    denom,
                } => {
                    let scale = g[[0, 0]] * 2.0 / denom;
                    let p = self.value(*pred);
                    let mut gp = p - &**target;
                    for (mut row, &m) in gp.rows_mut().into_iter().zip(mask.iter()) {
                        row *= m * scale;
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::WeightedBce {
                    logits,
                    target,
                    weight,
                    denom,
                } => {
                    let scale = g[[0, 0]] / denom;
                    let z = self.value(*logits);
                    let mut gz = Array2::zeros(z.dim());
                    for (((o, &x), &y), &w) in
                        gz.iter_mut().zip(z.iter()).zip(target.iter()).zip(weight.iter())
                    {
                        *o = scale * w * (sigmoid(x) - y);
                    }
                    acc(&mut grads, *logits, gz);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(&mut grads, *p, g.clone());
                    }
                }
            }
        }
        param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry of `store` for `f`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let root = f(&mut tape, store);
        let grads = tape.backward(root, store);
        let h = 1e-6;
        for id in store.ids() {
            for i in 0..store.value(id).len() {
                let orig = store.value(id).as_slice().unwrap()[i];
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let mut t = Tape::new();
                let r = f(&mut t, store);
                let up = t.scalar(r);
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let mut t = Tape::new();
                let r = f(&mut t, store);
                let down = t.scalar(r);
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[id.index()].as_slice().unwrap()[i];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{i}]: {analytic} vs {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn elementwise_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 3, 4));
        let b = store.add("b", random(&mut rng, 4, 2));
        let r = store.add("r", random(&mut rng, 1, 2));
        check(&mut store, |t, s| {
            let a = t.param(s, a);
            let b = t.param(s, b);
            let r = t.param(s, r);
            let m = t.matmul(a, b);
            let m = t.add_row(m, r);
            let x = t.tanh(m);
            let y = t.sigmoid(m);
            let z = t.mul(x, y);
            let z = t.sub(z, m);
            let z = t.scale(z, 1.7);
            let z = t.relu(z);
            let target = Rc::new(Array2::zeros((3, 2)));
            let mask = Rc::new(array![1.0, 0.0, 1.0]);
            t.masked_mse(z, target, mask, 4.0)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, 6, 3));
        let w = store.add("w", random(&mut rng, 9, 2));
        let table = store.add("table", random(&mut rng, 4, 3));
        check(&mut store, |t, s| {
            let x = t.param(s, x);
            let w = t.param(s, w);
            let table = t.param(s, table);
            let emb = t.gather(table, vec![0, 2, 2, 1, 3, 0]);
            let x = t.add(x, emb);
            // two sequences of length 3
            let cols = t.im2col(x, 3, 3);
            let y = t.matmul(cols, w);
            let steps: Vec<Var> = (0..3).map(|k| t.time_step(y, 3, k)).collect();
            let y2 = t.stack_time(&steps);
            let c = t.concat(&[y2, x]);
            let c = t.slice_cols(c, 1, 4);
            let mask = Rc::new(array![1.0, 1.0, 0.0, 1.0, 0.5, 1.0]);
            let c = t.row_mask(c, mask);
            let r = t.reshape(c, 2, 9);
            let r = t.mul_const(r, Array2::from_elem((2, 9), 0.5));
            let target = Rc::new(Array2::ones((2, 9)));
            let l1 = t.masked_mse(r, target, Rc::new(array![1.0, 1.0]), 3.0);
            let l2 = t.scale(l1, 0.5);
            t.sum(&[l1, l2])
        });
    }

    #[test]
    fn attention_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let q = store.add("q", random(&mut rng, 2, 3));
        let keys = store.add("keys", random(&mut rng, 8, 3));
        let v = store.add("v", random(&mut rng, 3, 1));
        check(&mut store, |t, s| {
            let q = t.param(s, q);
            let keys = t.param(s, keys);
            let v = t.param(s, v);
            let qr = t.repeat_rows(q, 4);
            let e = t.add(qr, keys);
            let e = t.tanh(e);
            let e = t.matmul(e, v);
            let e = t.reshape(e, 2, 4);
            let mask = array![[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]];
            let a = t.masked_softmax(e, &mask);
            let ctx = t.attend(a, keys);
            let target = Rc::new(Array2::from_elem((2, 3), 0.3));
            t.masked_mse(ctx, target, Rc::new(array![1.0, 1.0]), 1.0)
        });
    }

    #[test]
    fn lstm_and_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let gates = store.add("gates", random(&mut rng, 2, 8));
        let c0 = store.add("c0", random(&mut rng, 2, 2));
        let w = store.add("w", random(&mut rng, 4, 1));
        check(&mut store, |t, s| {
            let gates = t.param(s, gates);
            let c0 = t.param(s, c0);
            let w = t.param(s, w);
            let hc = t.lstm_cell(gates, c0);
            let z = t.matmul(hc, w);
            let z = t.scale(z, 3.0);
            let target = Rc::new(array![[1.0], [0.0]]);
            t.weighted_bce(z, target, Rc::new(array![6.0, 1.0]), 2.0)
        });
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0, 3.0], [1000.0, -5.0, 2.0]]);
        let mask = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        let y = t.masked_softmax(x, &mask);
        let v = t.value(y);
        assert_eq!(v[[0, 2]], 0.0);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let z = t.constant(array![[40.0], [-40.0]]);
        let target = Rc::new(array![[1.0], [0.0]]);
        let l = t.weighted_bce(z, target, Rc::new(array![6.0, 1.0]), 2.0);
        assert!(t.scalar(l) < 1e-15);
    }
}
