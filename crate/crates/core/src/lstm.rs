//! LSTM cells and the stacked sequence predictor: two LSTM layers (hidden
//! size half the input) followed by a linear readout back to input size.
//!
//! Weight convention throughout: inputs are row vectors, so input weights
//! are `[d_in, d_h]`, recurrent weights `[d_h, d_h]`, and a step computes
//! `x W_x + h W_h + b`. Batched variants stack rows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

/// Weights of one gate: input map, recurrent map, bias.
#[derive(Debug, Clone)]
pub struct GateParams<T: Element> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> GateParams<T> {
    fn zeros(d_in: usize, d_h: usize) -> Self {
        GateParams {
            w_x: Tensor::zeros(&[d_in, d_h]),
            w_h: Tensor::zeros(&[d_h, d_h]),
            b: Tensor::zeros(&[d_h]),
        }
    }

    fn validate(&self, d_in: usize, d_h: usize, gate: &str) -> Result<()> {
        if self.w_x.shape() != [d_in, d_h] {
            return Err(Error::shape("gate w_x", self.w_x.shape(), &[d_in, d_h]));
        }
        if self.w_h.shape() != [d_h, d_h] {
            return Err(Error::shape("gate w_h", self.w_h.shape(), &[d_h, d_h]));
        }
        if self.b.shape() != [d_h] {
            return Err(Error::shape("gate b", self.b.shape(), &[d_h]));
        }
        if !self.w_x.is_all_finite() || !self.w_h.is_all_finite() || !self.b.is_all_finite() {
            return Err(Error::NonFinite {
                context: format!("{gate} gate weights"),
                index: 0,
                value: f64::NAN,
            });
        }
        Ok(())
    }
}

/// All four gates of one LSTM layer.
#[derive(Debug, Clone)]
pub struct LstmParams<T: Element> {
    pub input_gate: GateParams<T>,
    pub forget_gate: GateParams<T>,
    pub output_gate: GateParams<T>,
    pub candidate: GateParams<T>,
}

impl<T: Element> LstmParams<T> {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmParams {
            input_gate: GateParams::zeros(d_in, d_h),
            forget_gate: GateParams::zeros(d_in, d_h),
            output_gate: GateParams::zeros(d_in, d_h),
            candidate: GateParams::zeros(d_in, d_h),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_h) = (self.input_dim(), self.hidden_dim());
        if d_h == 0 {
            return Err(Error::InvalidArgument("lstm hidden dimension must be >= 1".into()));
        }
        self.input_gate.validate(d_in, d_h, "input")?;
        self.forget_gate.validate(d_in, d_h, "forget")?;
        self.output_gate.validate(d_in, d_h, "output")?;
        self.candidate.validate(d_in, d_h, "candidate")
    }

    pub fn input_dim(&self) -> usize {
        self.input_gate.w_x.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_gate.w_x.shape()[1]
    }

    pub fn gates(&self) -> [(&'static str, &GateParams<T>); 4] {
        [
            ("input_gate", &self.input_gate),
            ("forget_gate", &self.forget_gate),
            ("output_gate", &self.output_gate),
            ("candidate", &self.candidate),
        ]
    }

    pub fn gates_mut(&mut self) -> [(&'static str, &mut GateParams<T>); 4] {
        [
            ("input_gate", &mut self.input_gate),
            ("forget_gate", &mut self.forget_gate),
            ("output_gate", &mut self.output_gate),
            ("candidate", &mut self.candidate),
        ]
    }
}

/// Basic recurrent cell, kept as an ablation alternative to the LSTM:
/// `h = tanh(x W_x + h_prev W_h + b)` for row vectors.
pub fn rnn_step<T: Element>(
    w_x: &Tensor<T>,
    w_h: &Tensor<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d_in = w_x.shape()[0];
    let d_h = w_x.shape()[1];
    if x.shape() != [d_in] || h_prev.shape() != [d_h] {
        return Err(Error::shape("rnn_step state", x.shape(), h_prev.shape()));
    }
    let xm = x.reshape(&[1, d_in])?.matmul(w_x)?;
    let hm = h_prev.reshape(&[1, d_h])?.matmul(w_h)?;
    xm.add(&hm)?.add_row(b)?.tanh().reshape(&[d_h])
}

/// One LSTM step for a batch of row states: `x [B, d_in]`, `h`/`c [B, d_h]`.
///
/// Gates: `i = sigma(x W_xi + h W_hi + b_i)` and likewise for `f`, `o`;
/// candidate `c~ = tanh(x W_xc + h W_hc + b_c)`; then `c = i*c~ + f*c_prev`
/// and `h = o * tanh(c)` elementwise.
pub fn lstm_step_batch<T: Element>(
    params: &LstmParams<T>,
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d_in, d_h) = (params.input_dim(), params.hidden_dim());
    if x.rank() != 2 || x.shape()[1] != d_in {
        return Err(Error::shape("lstm_step x", x.shape(), &[x.shape()[0], d_in]));
    }
    let batch = x.shape()[0];
    if h_prev.shape() != [batch, d_h] || c_prev.shape() != [batch, d_h] {
        return Err(Error::shape("lstm_step state", h_prev.shape(), c_prev.shape()));
    }
    if !h_prev.is_all_finite() || !c_prev.is_all_finite() {
        return Err(Error::NonFinite {
            context: "lstm_step previous state".into(),
            index: 0,
            value: f64::NAN,
        });
    }
    let pre = |g: &GateParams<T>| -> Result<Tensor<T>> {
        x.matmul(&g.w_x)?.add(&h_prev.matmul(&g.w_h)?)?.add_row(&g.b)
    };
    let i = pre(&params.input_gate)?.sigmoid();
    let f = pre(&params.forget_gate)?.sigmoid();
    let o = pre(&params.output_gate)?.sigmoid();
    let c_tilde = pre(&params.candidate)?.tanh();
    let c = i.mul(&c_tilde)?.add(&f.mul(c_prev)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}

/// Single-vector LSTM step: `x [d_in]`, `h`/`c [d_h]`.
pub fn lstm_step<T: Element>(
    params: &LstmParams<T>,
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d_in, d_h) = (params.input_dim(), params.hidden_dim());
    if x.shape() != [d_in] || h_prev.shape() != [d_h] || c_prev.shape() != [d_h] {
        return Err(Error::shape("lstm_step vector", x.shape(), h_prev.shape()));
    }
    let (h, c) = lstm_step_batch(
        params,
        &x.reshape(&[1, d_in])?,
        &h_prev.reshape(&[1, d_h])?,
        &c_prev.reshape(&[1, d_h])?,
    )?;
    Ok((h.reshape(&[d_h])?, c.reshape(&[d_h])?))
}

/// Stacked predictor: two LSTM layers plus a linear readout with bias.
/// Hidden size is `max(floor(d_in/2), 1)`.
#[derive(Debug, Clone)]
pub struct PredictorStack<T: Element> {
    pub lstm1: LstmParams<T>,
    pub lstm2: LstmParams<T>,
    /// Readout `[d_h, d_in]`.
    pub out_w: Tensor<T>,
    /// Readout bias `[d_in]`.
    pub out_b: Tensor<T>,
}

pub fn hidden_dim_for(d_in: usize) -> usize {
    (d_in / 2).max(1)
}

impl<T: Element> PredictorStack<T> {
    pub fn zeros(d_in: usize) -> Self {
        let d_h = hidden_dim_for(d_in);
        PredictorStack {
            lstm1: LstmParams::zeros(d_in, d_h),
            lstm2: LstmParams::zeros(d_h, d_h),
            out_w: Tensor::zeros(&[d_h, d_in]),
            out_b: Tensor::zeros(&[d_in]),
        }
    }

    /// Seeded uniform(-r, r) init with r = 1/sqrt(fan_in); forget-gate
    /// biases start at 1.
    pub fn init_random(d_in: usize, rng: &mut impl Rng) -> Self {
        let d_h = hidden_dim_for(d_in);
        let mut stack = Self::zeros(d_in);
        for lstm in [&mut stack.lstm1, &mut stack.lstm2] {
            for (name, gate) in lstm.gates_mut() {
                fill_uniform(&mut gate.w_x, rng);
                fill_uniform(&mut gate.w_h, rng);
                if name == "forget_gate" {
                    gate.b = Tensor::filled(&[d_h], T::one());
                }
            }
        }
        fill_uniform(&mut stack.out_w, rng);
        stack
    }

    pub fn validate(&self) -> Result<()> {
        self.lstm1.validate()?;
        self.lstm2.validate()?;
        let d_in = self.input_dim();
        let d_h = hidden_dim_for(d_in);
        if self.lstm1.hidden_dim() != d_h || self.lstm2.input_dim() != d_h || self.lstm2.hidden_dim() != d_h {
            return Err(Error::InvalidArgument(format!(
                "stack hidden dims must be {d_h} for input dim {d_in}"
            )));
        }
        if self.out_w.shape() != [d_h, d_in] {
            return Err(Error::shape("stack out_w", self.out_w.shape(), &[d_h, d_in]));
        }
        if self.out_b.shape() != [d_in] {
            return Err(Error::shape("stack out_b", self.out_b.shape(), &[d_in]));
        }
        if !self.out_w.is_all_finite() || !self.out_b.is_all_finite() {
            return Err(Error::NonFinite {
                context: "stack readout weights".into(),
                index: 0,
                value: f64::NAN,
            });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lstm1.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm1.hidden_dim()
    }

    /// Predictions for a batch of sequences advanced one step at a time.
    /// See [`predict_sequence`] for the single-sequence form.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(26);
        for (layer_name, lstm) in [("lstm1", &self.lstm1), ("lstm2", &self.lstm2)] {
            for (gate_name, gate) in lstm.gates() {
                out.push((format!("{layer_name}.{gate_name}.w_x"), &gate.w_x));
                out.push((format!("{layer_name}.{gate_name}.w_h"), &gate.w_h));
                out.push((format!("{layer_name}.{gate_name}.b"), &gate.b));
            }
        }
        out.push(("out.w".to_string(), &self.out_w));
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(26);
        for (layer_name, lstm) in [("lstm1", &mut self.lstm1), ("lstm2", &mut self.lstm2)] {
            for (gate_name, gate) in lstm.gates_mut() {
                out.push((format!("{layer_name}.{gate_name}.w_x"), &mut gate.w_x));
                out.push((format!("{layer_name}.{gate_name}.w_h"), &mut gate.w_h));
                out.push((format!("{layer_name}.{gate_name}.b"), &mut gate.b));
            }
        }
        out.push(("out.w".to_string(), &mut self.out_w));
        out.push(("out.b".to_string(), &mut self.out_b));
        out
    }
}

fn fill_uniform<T: Element>(t: &mut Tensor<T>, rng: &mut impl Rng) {
    let fan_in = t.shape()[0];
    let r = 1.0 / (fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-r..r));
    }
}

/// Run the stack over a sequence `s_1..s_T` (rows of a `[T, d_in]` tensor),
/// returning predictions `mu_2..mu_T` as a `[T-1, d_in]` tensor.
///
/// `mu_t` depends only on `s_1..s_{t-1}` (strict causality); the initial
/// hidden and cell states are zero.
pub fn predict_sequence<T: Element>(
    stack: &PredictorStack<T>,
    s: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d_in = stack.input_dim();
    if s.rank() != 2 || s.shape()[1] != d_in {
        return Err(Error::shape("predict_sequence", s.shape(), &[2, d_in]));
    }
    let steps = s.shape()[0];
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "predict_sequence needs length >= 2, got {steps}"
        )));
    }
    let d_h = stack.hidden_dim();
    let mut h1 = Tensor::zeros(&[1, d_h]);
    let mut c1 = Tensor::zeros(&[1, d_h]);
    let mut h2 = Tensor::zeros(&[1, d_h]);
    let mut c2 = Tensor::zeros(&[1, d_h]);
    let mut out = Vec::with_capacity((steps - 1) * d_in);
    for t in 0..steps - 1 {
        let x = s.row(t)?.reshape(&[1, d_in])?;
        let (nh1, nc1) = lstm_step_batch(&stack.lstm1, &x, &h1, &c1)?;
        h1 = nh1;
        c1 = nc1;
        let (nh2, nc2) = lstm_step_batch(&stack.lstm2, &h1, &h2, &c2)?;
        h2 = nh2;
        c2 = nc2;
        let mu = h2.matmul(&stack.out_w)?.add_row(&stack.out_b)?;
        out.extend_from_slice(mu.data());
    }
    Tensor::from_vec(&[steps - 1, d_in], out)
}

/// Node handles for one gate's tensors on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

/// Node handles for one LSTM layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub input_gate: GateNodes,
    pub forget_gate: GateNodes,
    pub output_gate: GateNodes,
    pub candidate: GateNodes,
}

/// Node handles for a whole predictor stack on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StackNodes {
    pub lstm1: LstmNodes,
    pub lstm2: LstmNodes,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// Put a stack's tensors on the tape, as gradient inputs (training) or
/// constants (inference). Node order matches [`PredictorStack::named_tensors`].
pub fn stack_to_nodes<T: Element>(
    tape: &mut Tape<T>,
    stack: &PredictorStack<T>,
    trainable: bool,
) -> StackNodes {
    let mut ids = Vec::with_capacity(26);
    for (_, tensor) in stack.named_tensors() {
        let id = if trainable {
            tape.input(tensor.clone())
        } else {
            tape.constant(tensor.clone())
        };
        ids.push(id);
    }
    let gate = |base: usize| GateNodes {
        w_x: ids[base],
        w_h: ids[base + 1],
        b: ids[base + 2],
    };
    let lstm = |base: usize| LstmNodes {
        input_gate: gate(base),
        forget_gate: gate(base + 3),
        output_gate: gate(base + 6),
        candidate: gate(base + 9),
    };
    StackNodes {
        lstm1: lstm(0),
        lstm2: lstm(12),
        out_w: ids[24],
        out_b: ids[25],
    }
}

/// Build one batched LSTM step on the tape.
pub fn build_lstm_step<T: Element>(
    tape: &mut Tape<T>,
    nodes: &LstmNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let mut pre = |gate: &GateNodes| -> Result<NodeId> {
        let xm = tape.matmul(x, gate.w_x)?;
        let hm = tape.matmul(h_prev, gate.w_h)?;
        let s = tape.add(xm, hm)?;
        tape.add_row(s, gate.b)
    };
    let pre_i = pre(&nodes.input_gate)?;
    let pre_f = pre(&nodes.forget_gate)?;
    let pre_o = pre(&nodes.output_gate)?;
    let pre_c = pre(&nodes.candidate)?;
    let i = tape.sigmoid(pre_i)?;
    let f = tape.sigmoid(pre_f)?;
    let o = tape.sigmoid(pre_o)?;
    let c_tilde = tape.tanh(pre_c)?;
    let ic = tape.mul(i, c_tilde)?;
    let fc = tape.mul(f, c_prev)?;
    let c = tape.add(ic, fc)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Build one stacked prediction step on the tape: advances both LSTM
/// layers with input `x` and returns (mu, new states).
#[allow(clippy::too_many_arguments)]
pub fn build_stack_step<T: Element>(
    tape: &mut Tape<T>,
    nodes: &StackNodes,
    x: NodeId,
    state: &mut StackState,
) -> Result<NodeId> {
    let (h1, c1) = build_lstm_step(tape, &nodes.lstm1, x, state.h1, state.c1)?;
    let (h2, c2) = build_lstm_step(tape, &nodes.lstm2, h1, state.h2, state.c2)?;
    state.h1 = h1;
    state.c1 = c1;
    state.h2 = h2;
    state.c2 = c2;
    let proj = tape.matmul(h2, nodes.out_w)?;
    tape.add_row(proj, nodes.out_b)
}

/// Mutable node handles for the running states of a stack on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StackState {
    pub h1: NodeId,
    pub c1: NodeId,
    pub h2: NodeId,
    pub c2: NodeId,
}

impl StackState {
    /// Zero initial state for a batch of `rows` sequences.
    pub fn zeros<T: Element>(tape: &mut Tape<T>, rows: usize, d_h: usize) -> Self {
        StackState {
            h1: tape.constant(Tensor::zeros(&[rows, d_h])),
            c1: tape.constant(Tensor::zeros(&[rows, d_h])),
            h2: tape.constant(Tensor::zeros(&[rows, d_h])),
            c2: tape.constant(Tensor::zeros(&[rows, d_h])),
        }
    }
}
