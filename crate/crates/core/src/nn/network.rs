use std::fmt::Write as _;

use rand::Rng;

use super::{
    check_len, matvec_t_add, outer_add, Activation, DenseLayer, LstmLayer, LstmStep, NnError,
};

pub const CHECKPOINT_MAGIC: &str = "bessco-qnetwork";
const CHECKPOINT_VERSION: u32 = 1;

const TENSOR_NAMES: [&str; 7] = [
    "encoder.weight",
    "encoder.bias",
    "lstm.w_input",
    "lstm.w_recurrent",
    "lstm.bias",
    "head.weight",
    "head.bias",
];

/// LSTM hidden and cell state carried between time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Cached activations of one time step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub input: Vec<f64>,
    pub encoder_pre: Vec<f64>,
    pub encoder_out: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub lstm: LstmStep,
    pub output: Vec<f64>,
}

/// Forward pass over a whole sequence, retained for backpropagation through time.
#[derive(Debug, Clone, Default)]
pub struct SequenceTrace {
    pub steps: Vec<StepCache>,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.output.as_slice())
    }

    pub fn final_state(&self) -> Option<RecurrentState> {
        self.steps.last().map(|s| RecurrentState {
            h: s.lstm.hidden.clone(),
            c: s.lstm.cell.clone(),
        })
    }
}

/// Parameter gradients laid out like [`QNetwork::tensors`], plus input gradients
/// per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            tensors: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            inputs: Vec::new(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            for g in self.tensors.iter_mut().flat_map(|t| t.iter_mut()) {
                *g *= s;
            }
        }
        norm
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.tensors.iter_mut().flat_map(|t| t.iter_mut()) {
            *g *= factor;
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| t.iter()).all(|g| g.is_finite())
    }
}

/// Dense(ReLU) → LSTM → Dense(linear) action-value approximator.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub encoder: DenseLayer,
    pub lstm: LstmLayer,
    pub head: DenseLayer,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            encoder: DenseLayer::init_uniform(input_dim, hidden, Activation::Relu, rng),
            lstm: LstmLayer::init_uniform(hidden, hidden, rng),
            head: DenseLayer::init_uniform(hidden, outputs, Activation::Linear, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    pub fn outputs(&self) -> usize {
        self.head.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_state(&self) -> RecurrentState {
        RecurrentState::zeros(self.hidden())
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.encoder.weights,
            &self.encoder.bias,
            &self.lstm.w_input,
            &self.lstm.w_recurrent,
            &self.lstm.bias,
            &self.head.weights,
            &self.head.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.encoder.weights,
            &mut self.encoder.bias,
            &mut self.lstm.w_input,
            &mut self.lstm.w_recurrent,
            &mut self.lstm.bias,
            &mut self.head.weights,
            &mut self.head.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Copies every parameter from `other` (shapes must agree).
    pub fn copy_from(&mut self, other: &QNetwork) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.copy_from_slice(src);
        }
    }

    fn step_cached(&self, input: &[f64], state: &RecurrentState) -> Result<StepCache, NnError> {
        let encoder_pre = self.encoder.preactivation(input)?;
        let encoder_out: Vec<f64> = encoder_pre.iter().map(|&z| self.encoder.activation.apply(z)).collect();
        let lstm = self.lstm.forward(&encoder_out, &state.h, &state.c)?;
        let mut output = self.head.preactivation(&lstm.hidden)?;
        for v in &mut output {
            *v = self.head.activation.apply(*v);
        }
        if output.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("network output"));
        }
        Ok(StepCache {
            input: input.to_vec(),
            encoder_pre,
            encoder_out,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            lstm,
            output,
        })
    }

    /// One inference step; returns outputs and the advanced recurrent state.
    pub fn step(&self, input: &[f64], state: &RecurrentState) -> Result<(Vec<f64>, RecurrentState), NnError> {
        let cache = self.step_cached(input, state)?;
        let next = RecurrentState {
            h: cache.lstm.hidden,
            c: cache.lstm.cell,
        };
        Ok((cache.output, next))
    }

    pub fn forward_sequence(&self, inputs: &[Vec<f64>], init: &RecurrentState) -> Result<SequenceTrace, NnError> {
        let mut steps = Vec::with_capacity(inputs.len());
        let mut state = init.clone();
        for x in inputs {
            let cache = self.step_cached(x, &state)?;
            state = RecurrentState {
                h: cache.lstm.hidden.clone(),
                c: cache.lstm.cell.clone(),
            };
            steps.push(cache);
        }
        Ok(SequenceTrace { steps })
    }

    /// Backpropagation through time.
    ///
    /// `output_grads[t]` is `∂L/∂output_t`. Gradients are accumulated over every
    /// step; the initial recurrent state is treated as a constant.
    pub fn backward(&self, trace: &SequenceTrace, output_grads: &[Vec<f64>]) -> Result<Gradients, NnError> {
        if trace.len() != output_grads.len() {
            return Err(NnError::MissingCache(format!(
                "{} cached steps for {} upstream gradients",
                trace.len(),
                output_grads.len()
            )));
        }
        let n = self.hidden();
        let n_in = self.input_dim();
        let mut grads = Gradients::zeros_like(self);
        grads.inputs = vec![Vec::new(); trace.len()];
        let [g_w1, g_b1, g_wx, g_wh, g_bl, g_w2, g_b2] = match grads.tensors.as_mut_slice() {
            [a, b, c, d, e, f, g] => [a, b, c, d, e, f, g],
            _ => unreachable!("seven tensors"),
        };

        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        let mut dpre = vec![0.0; 4 * n];

        for (t, cache) in trace.steps.iter().enumerate().rev() {
            let dq_raw = &output_grads[t];
            check_len("upstream gradient", self.outputs(), dq_raw.len())?;
            if cache.input.len() != n_in {
                return Err(NnError::MissingCache("cached input has wrong width".into()));
            }
            // relu'(z) == relu'(relu(z)), so the output is enough here
            let dq: Vec<f64> = dq_raw
                .iter()
                .zip(&cache.output)
                .map(|(d, &y)| d * self.head.activation.derivative(y))
                .collect();

            outer_add(g_w2, &dq, &cache.lstm.hidden);
            for (b, d) in g_b2.iter_mut().zip(&dq) {
                *b += d;
            }
            let mut dh = dh_next.clone();
            matvec_t_add(&self.head.weights, self.outputs(), n, &dq, &mut dh);

            let s = &cache.lstm;
            for k in 0..n {
                let d_out = dh[k] * s.cell_tanh[k];
                let dc = dh[k] * s.output_gate[k] * (1.0 - s.cell_tanh[k] * s.cell_tanh[k]) + dc_next[k];
                let d_in = dc * s.candidate[k];
                let d_cand = dc * s.input_gate[k];
                let d_forget = dc * cache.c_prev[k];
                dc_next[k] = dc * s.forget_gate[k];

                dpre[k] = d_in * s.input_gate[k] * (1.0 - s.input_gate[k]);
                dpre[n + k] = d_forget * s.forget_gate[k] * (1.0 - s.forget_gate[k]);
                dpre[2 * n + k] = d_cand * (1.0 - s.candidate[k] * s.candidate[k]);
                dpre[3 * n + k] = d_out * s.output_gate[k] * (1.0 - s.output_gate[k]);
            }

            outer_add(g_wx, &dpre, &cache.encoder_out);
            outer_add(g_wh, &dpre, &cache.h_prev);
            for (b, d) in g_bl.iter_mut().zip(&dpre) {
                *b += d;
            }
            let mut d_enc = vec![0.0; n];
            matvec_t_add(&self.lstm.w_input, 4 * n, n, &dpre, &mut d_enc);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&self.lstm.w_recurrent, 4 * n, n, &dpre, &mut dh_next);

            let dz1: Vec<f64> = d_enc
                .iter()
                .zip(&cache.encoder_pre)
                .map(|(d, &z)| d * self.encoder.activation.derivative(z))
                .collect();
            outer_add(g_w1, &dz1, &cache.input);
            for (b, d) in g_b1.iter_mut().zip(&dz1) {
                *b += d;
            }
            let mut dx = vec![0.0; n_in];
            matvec_t_add(&self.encoder.weights, n, n_in, &dz1, &mut dx);
            grads.inputs[t] = dx;
        }
        Ok(grads)
    }

    /// Writes the versioned text checkpoint. Values use the shortest
    /// round-tripping decimal form, so reading back is bitwise exact.
    pub fn write_checkpoint(&self, out: &mut String) {
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(
            out,
            "shape {} {} {} {} {}",
            self.input_dim(),
            self.hidden(),
            self.outputs(),
            self.encoder.activation.name(),
            self.head.activation.name()
        );
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            let _ = write!(out, "{name} {}", t.len());
            for v in t {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
    }

    /// Reads a checkpoint from a line iterator positioned at the magic line.
    pub fn read_checkpoint<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self, NnError> {
        let err = |m: String| NnError::Checkpoint(m);
        let magic = lines.next().ok_or_else(|| err("missing header".into()))?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(err(format!("bad magic line `{magic}`")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }

        let shape = lines.next().ok_or_else(|| err("missing shape line".into()))?;
        let fields: Vec<&str> = shape.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "shape" {
            return Err(err(format!("bad shape line `{shape}`")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad dimension `{s}`: {e}")));
        let (input_dim, hidden, outputs) = (dim(fields[1])?, dim(fields[2])?, dim(fields[3])?);
        let act = |s: &str| Activation::from_name(s).ok_or_else(|| err(format!("unknown activation `{s}`")));
        let mut net = QNetwork {
            encoder: DenseLayer::zeros(input_dim, hidden, act(fields[4])?),
            lstm: LstmLayer::zeros(hidden, hidden),
            head: DenseLayer::zeros(hidden, outputs, act(fields[5])?),
        };

        for (name, dst) in TENSOR_NAMES.iter().zip(net.tensors_mut()) {
            let line = lines.next().ok_or_else(|| err(format!("missing tensor `{name}`")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(*name) {
                return Err(err(format!("expected tensor `{name}`")));
            }
            let len = it.next().map(dim).transpose()?.ok_or_else(|| err(format!("`{name}` missing length")))?;
            if len != dst.len() {
                return Err(err(format!("`{name}` has {len} values, expected {}", dst.len())));
            }
            for (i, slot) in dst.iter_mut().enumerate() {
                let tok = it.next().ok_or_else(|| err(format!("`{name}` truncated at {i}")))?;
                *slot = tok.parse().map_err(|e| err(format!("`{name}`[{i}] = `{tok}`: {e}")))?;
            }
            if it.next().is_some() {
                return Err(err(format!("`{name}` has trailing values")));
            }
        }
        Ok(net)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        self.write_checkpoint(&mut s);
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, NnError> {
        Self::read_checkpoint(&mut text.lines())
    }
}
