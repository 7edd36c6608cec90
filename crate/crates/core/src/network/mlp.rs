use serde::{Deserialize, Serialize};

use crate::diffmath::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Added to the softplus output of the variance head.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    /// `M` samples of dimension `d` per input.
    Samples { m: usize, d: usize },
    /// Factored Gaussian: `d` means and `d` variance logits.
    Gaussian { d: usize },
}

impl Head {
    pub fn width(&self) -> usize {
        match *self {
            Head::Samples { m, d } => m * d,
            Head::Gaussian { d } => 2 * d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Head::Samples { d, .. } | Head::Gaussian { d } => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let head_ok = match self.head {
            Head::Samples { m, d } => m > 0 && d > 0,
            Head::Gaussian { d } => d > 0,
        };
        if self.input_dim == 0 || self.hidden_sizes.contains(&0) || !head_ok {
            return Err(Error::Config(format!("all network dims must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(self.head.width());
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Multilayer perceptron with either a sample head or a Gaussian head.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNetModel {
    config: MlpConfig,
    layers: Vec<Layer>,
}

impl SampleNetModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_in(-bound, bound))
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], w).unwrap().with_grad(),
                    bias: Tensor::zeros(&[fan_out]).with_grad(),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Tensor::zeros(&[i, o]).with_grad(),
                bias: Tensor::zeros(&[o]).with_grad(),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Assembles a model from explicit layers, checking that shapes chain.
    pub fn from_layers(config: MlpConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for ((i, o), layer) in dims.iter().zip(&layers) {
            if layer.weight.shape() != [*i, *o] || layer.bias.shape() != [*o] {
                return Err(Error::Shape(format!(
                    "layer shapes {:?}/{:?} do not match {i}×{o}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                weight: l.weight.with_grad(),
                bias: l.bias.with_grad(),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, …`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects [N, {}] inputs, got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass; returns the raw `[N, width]` head output and
    /// the parameter leaves in [`Self::params`] order.
    pub fn forward_raw<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        self.check_input(x)?;
        let mut h = tape.leaf(x);
        let mut leaves = Vec::with_capacity(2 * self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(&layer.weight);
            let b = tape.leaf(&layer.bias);
            leaves.extend([w, b]);
            h = h.matmul(w).add_row(b);
            if i < last {
                h = match self.config.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Elu => h.elu(),
                };
            }
        }
        Ok((h, leaves))
    }

    /// Taped `[N, M, d]` samples.
    pub fn forward_samples_var<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let Head::Samples { m, d } = self.config.head else {
            return Err(Error::Config("model does not have a sample head".into()));
        };
        let (raw, leaves) = self.forward_raw(tape, x)?;
        Ok((raw.reshape(vec![x.rows(), m, d]), leaves))
    }

    /// Taped `(mean, var)`, each `[N, d]`.
    pub fn forward_gaussian_var<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
    ) -> Result<(Var<'t>, Var<'t>, Vec<Var<'t>>)> {
        let Head::Gaussian { d } = self.config.head else {
            return Err(Error::Config("model does not have a Gaussian head".into()));
        };
        let (raw, leaves) = self.forward_raw(tape, x)?;
        let mean = raw.slice_cols(0, d);
        let var = raw.slice_cols(d, d).softplus().add_scalar(VAR_FLOOR);
        Ok((mean, var, leaves))
    }

    pub fn forward_samples(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward_samples_var(&tape, x)?.0.to_tensor())
    }

    pub fn forward_gaussian(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let (mean, var, _) = self.forward_gaussian_var(&tape, x)?;
        Ok((mean.to_tensor(), var.to_tensor()))
    }
}
