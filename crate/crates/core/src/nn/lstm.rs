use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{check_len, matvec_add, sigmoid, NnError};

/// Single LSTM layer. Gate rows are stacked as `[input, forget, candidate, output]`,
/// each block `hidden` rows tall.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub in_dim: usize,
    pub hidden: usize,
    /// `4·hidden × in_dim`
    pub w_input: Vec<f64>,
    /// `4·hidden × hidden`
    pub w_recurrent: Vec<f64>,
    /// `4·hidden`
    pub bias: Vec<f64>,
}

/// Gate activations of one time step, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub cell: Vec<f64>,
    pub cell_tanh: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            in_dim,
            hidden,
            w_input: vec![0.0; 4 * hidden * in_dim],
            w_recurrent: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except the forget gate at +1.
    pub fn init_uniform<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, hidden);
        let bx = 1.0 / (in_dim.max(1) as f64).sqrt();
        let bh = 1.0 / (hidden.max(1) as f64).sqrt();
        let dx = Uniform::new_inclusive(-bx, bx).expect("finite bound");
        let dh = Uniform::new_inclusive(-bh, bh).expect("finite bound");
        for w in &mut layer.w_input {
            *w = dx.sample(rng);
        }
        for w in &mut layer.w_recurrent {
            *w = dh.sample(rng);
        }
        for b in &mut layer.bias[hidden..2 * hidden] {
            *b = 1.0;
        }
        layer
    }

    pub fn forward(&self, input: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStep, NnError> {
        let n = self.hidden;
        check_len("lstm input", self.in_dim, input.len())?;
        check_len("lstm hidden state", n, h_prev.len())?;
        check_len("lstm cell state", n, c_prev.len())?;

        let mut pre = self.bias.clone();
        matvec_add(&self.w_input, 4 * n, self.in_dim, input, &mut pre);
        matvec_add(&self.w_recurrent, 4 * n, n, h_prev, &mut pre);

        let input_gate: Vec<f64> = pre[..n].iter().map(|&z| sigmoid(z)).collect();
        let forget_gate: Vec<f64> = pre[n..2 * n].iter().map(|&z| sigmoid(z)).collect();
        let candidate: Vec<f64> = pre[2 * n..3 * n].iter().map(|&z| z.tanh()).collect();
        let output_gate: Vec<f64> = pre[3 * n..].iter().map(|&z| sigmoid(z)).collect();

        let cell: Vec<f64> = (0..n)
            .map(|k| forget_gate[k] * c_prev[k] + input_gate[k] * candidate[k])
            .collect();
        let cell_tanh: Vec<f64> = cell.iter().map(|c| c.tanh()).collect();
        let hidden: Vec<f64> = (0..n).map(|k| output_gate[k] * cell_tanh[k]).collect();

        Ok(LstmStep {
            input_gate,
            forget_gate,
            candidate,
            output_gate,
            cell,
            cell_tanh,
            hidden,
        })
    }
}
