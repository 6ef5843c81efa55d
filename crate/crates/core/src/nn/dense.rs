use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{check_len, matvec_add, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected layer, `weights` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Weights uniform in `±1/√in_dim`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        for w in &mut layer.weights {
            *w = dist.sample(rng);
        }
        layer
    }

    pub(crate) fn preactivation(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        check_len("dense input", self.in_dim, input.len())?;
        let mut z = self.bias.clone();
        matvec_add(&self.weights, self.out_dim, self.in_dim, input, &mut z);
        Ok(z)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut z = self.preactivation(input)?;
        for v in &mut z {
            *v = self.activation.apply(*v);
        }
        Ok(z)
    }
}
