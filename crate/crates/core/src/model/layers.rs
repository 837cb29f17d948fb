//! Parameterized layers. Each layer holds [`ParamId`]s into a [`ParamStore`]
//! and builds its computation on a [`Graph`].

use std::ops::{Deref, DerefMut};
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::Rng;

use super::params::{he, xavier, ParamId, ParamStore};
use super::tape::{Tape, Var};

/// A tape bound to a parameter store; each parameter enters the tape once.
pub struct Graph<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn backward(&self, root: Var) -> Vec<Array2<f64>> {
        self.tape.backward(root, self.store)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Xavier,
    He,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::Xavier => xavier(rng, fan_in, fan_out),
            Init::He => he(rng, fan_in, fan_out),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.p(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Same-padded 1-D convolution over batch-major sequences.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub linear: Linear,
    pub kernel: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        Conv1d {
            linear: Linear::new(store, rng, name, kernel * in_channels, out_channels, bias, init),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, time: usize) -> Var {
        let cols = g.im2col(x, time, self.kernel);
        self.linear.forward(g, cols)
    }
}

/// LSTM with separate input and recurrent weights, gates ordered `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub units: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        units: usize,
    ) -> Self {
        let w_input = store.add(format!("{name}.w_input"), xavier(rng, input, 4 * units));
        let w_hidden = store.add(format!("{name}.w_hidden"), xavier(rng, units, 4 * units));
        let mut b = Array2::zeros((1, 4 * units));
        // forget-gate bias of 1
        b.slice_mut(ndarray::s![0, units..2 * units]).fill(1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Lstm {
            w_input,
            w_hidden,
            bias,
            units,
        }
    }

    /// Input projection (with bias) for any number of rows.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.w_input);
        let b = g.p(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// One step from a precomputed input projection; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, x_proj: Var, h: Var, c: Var) -> (Var, Var) {
        let wh = g.p(self.w_hidden);
        let rec = g.matmul(h, wh);
        let gates = g.add(x_proj, rec);
        let hc = g.lstm_cell(gates, c);
        let h = g.slice_cols(hc, 0, self.units);
        let c = g.slice_cols(hc, self.units, 2 * self.units);
        (h, c)
    }
}

/// Bidirectional LSTM over padded batch-major sequences.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        units: usize,
    ) -> Self {
        BiLstm {
            forward: Lstm::new(store, rng, &format!("{name}.fwd"), input, units),
            backward: Lstm::new(store, rng, &format!("{name}.bwd"), input, units),
        }
    }

    /// `x` is `[B*time × C]`; `step_masks[t]` marks which items have step `t`.
    /// Returns `[B*time × 2·units]`, zero on padded rows.
    pub fn run(
        &self,
        g: &mut Graph,
        x: Var,
        time: usize,
        step_masks: &[Rc<Array1<f64>>],
        row_mask: &Rc<Array1<f64>>,
    ) -> Var {
        let batch = step_masks.first().map_or(0, |m| m.len());
        let units = self.forward.units;
        let zeros = g.constant(Array2::zeros((batch, units)));

        let xf = self.forward.project_input(g, x);
        let (mut h, mut c) = (zeros, zeros);
        let mut fwd = Vec::with_capacity(time);
        for t in 0..time {
            let xt = g.time_step(xf, time, t);
            (h, c) = self.forward.step(g, xt, h, c);
            fwd.push(h);
        }

        // Padded steps come first in reverse order; masking them keeps the
        // state at zero until each item's last real step.
        let xb = self.backward.project_input(g, x);
        let (mut h, mut c) = (zeros, zeros);
        let mut bwd = vec![zeros; time];
        for t in (0..time).rev() {
            let xt = g.time_step(xb, time, t);
            let (hn, cn) = self.backward.step(g, xt, h, c);
            h = g.row_mask(hn, step_masks[t].clone());
            c = g.row_mask(cn, step_masks[t].clone());
            bwd[t] = h;
        }
        let f = g.stack_time(&fwd);
        let b = g.stack_time(&bwd);
        let out = g.concat(&[f, b]);
        g.row_mask(out, row_mask.clone())
    }
}
