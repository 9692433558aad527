//! Small multilayer perceptrons standing in for the image and text towers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.embed_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

/// Affine map `x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    layers: Vec<Linear<T>>,
}

/// Encoder parameters registered on a tape, in layer order `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub params: Vec<Var>,
}

impl<T: Real> Encoder<T> {
    /// LeCun-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let std = (1.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::lit(z * std)
                    })
                    .collect();
                Linear {
                    weight: Tensor::new(fan_in, fan_out, w).expect("shape"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Single affine layer mapping `x ↦ x`.
    pub fn identity(dim: usize) -> Result<Self> {
        let config = EncoderConfig {
            input_dim: dim,
            hidden_dims: vec![],
            embed_dim: dim,
            activation: Activation::Identity,
        };
        config.validate()?;
        let mut w = Tensor::zeros(dim, dim);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = T::one();
        }
        Ok(Self {
            config,
            layers: vec![Linear {
                weight: w,
                bias: Tensor::zeros(1, dim),
            }],
        })
    }

    /// Rebuilds an encoder from raw parameter tensors in `(weight, bias)` order.
    pub fn from_params(config: EncoderConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(dims.len());
        for (fan_in, fan_out) in dims {
            let (weight, bias) = (it.next().expect("len checked"), it.next().expect("len checked"));
            if weight.shape() != (fan_in, fan_out) || bias.shape() != (1, fan_out) {
                return Err(Error::contract("encoder parameter shape mismatch"));
            }
            layers.push(Linear { weight, bias });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Registers the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundEncoder {
        let params = self.params().into_iter().map(|p| tape.leaf(p.clone(), trainable)).collect();
        BoundEncoder { params }
    }

    /// Differentiable forward pass of a batch `x: B×input_dim`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundEncoder, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: cols,
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, pair) in bound.params.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_row(h, pair[1])?;
            if i < last && self.config.activation == Activation::Tanh {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Raw embeddings of a batch of feature vectors.
    pub fn forward_batch(&self, inputs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(inputs)?);
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).to_rows())
    }
}

/// Raw embedding of one feature vector.
pub fn forward_encoder<T: Real>(encoder: &Encoder<T>, x: &[T]) -> Result<Vec<T>> {
    let mut out = encoder.forward_batch(&[x.to_vec()])?;
    Ok(out.pop().expect("one row"))
}
