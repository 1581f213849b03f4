use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, validate_shape, LayerParams, LayerSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Input shape plus an ordered list of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }

    /// Shapes flowing between layers: `shapes[0]` is the input and
    /// `shapes[i + 1]` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "invalid network input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = validate_shape(i, layer, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }
}

/// A network's layer specs together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams>>,
}

impl NetworkState {
    /// He-style uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, in_shape)| {
                layer.param_shapes(in_shape).map(|(ws, bs)| {
                    let limit = (6.0 / layer.fan_in(in_shape) as f64).sqrt();
                    let n: usize = ws.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    LayerParams {
                        weight: Tensor::new(ws, data).unwrap(),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        Ok(Self {
            spec,
            shapes,
            params,
        })
    }

    /// Builds a network from explicit parameters, checking every shape.
    pub fn from_params(spec: NetworkSpec, params: Vec<Option<LayerParams>>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter slots for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, ((layer, in_shape), p)) in spec.layers.iter().zip(&shapes).zip(&params).enumerate()
        {
            let ok = match (layer.param_shapes(in_shape), p) {
                (None, None) => true,
                (Some((ws, bs)), Some(p)) => p.weight.shape() == ws && p.bias.shape() == bs,
                _ => false,
            };
            if !ok {
                return Err(Error::Layer {
                    index: i,
                    kind: layer.name(),
                    message: "parameters inconsistent with layer spec".into(),
                });
            }
        }
        Ok(Self {
            spec,
            shapes,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter storage in a fixed order: weight then bias, layer by layer.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weight.data(), p.bias.data()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weight.data_mut(), p.bias.data_mut()])
            .collect()
    }

    /// Accepts either the declared input shape or a flat tensor with the
    /// same element count.
    pub fn coerce_input(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() == self.input_shape() {
            Ok(x.clone())
        } else if x.len() == self.input_len() {
            x.reshaped(self.input_shape())
        } else {
            Err(Error::Shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape(),
                x.shape()
            )))
        }
    }

    /// Runs every layer, returning the input followed by each layer's output.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.shape() != self.input_shape() {
            return Err(Error::Layer {
                index: 0,
                kind: self.spec.layers.first().map_or("input", |l| l.name()),
                message: format!(
                    "expected input shape {:?}, got {:?}",
                    self.input_shape(),
                    x.shape()
                ),
            });
        }
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let y = layers::forward(
                layer,
                &self.shapes[i],
                &self.shapes[i + 1],
                self.params[i].as_ref(),
                &acts[i],
            );
            acts.push(y);
        }
        Ok(acts)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.coerce_input(x)?;
        Ok(self.forward(&x)?.pop().unwrap())
    }

    /// Backpropagates `grad_output` through activations recorded by [`forward`].
    ///
    /// [`forward`]: NetworkState::forward
    pub fn backward(&self, activations: &[Tensor], grad_output: &Tensor) -> Result<Gradients> {
        let n = self.spec.layers.len();
        if activations.len() != n + 1 {
            return Err(Error::Shape(format!(
                "expected {} activations, got {}",
                n + 1,
                activations.len()
            )));
        }
        for (i, (a, s)) in activations.iter().zip(&self.shapes).enumerate() {
            if a.shape() != s.as_slice() {
                return Err(Error::Shape(format!(
                    "activation {i} has shape {:?}, network expects {s:?}",
                    a.shape()
                )));
            }
        }
        if grad_output.len() != self.output_len() {
            return Err(Error::Shape(format!(
                "output gradient has {} values, network output has {}",
                grad_output.len(),
                self.output_len()
            )));
        }
        let mut g = grad_output.reshaped(self.output_shape())?;
        let mut params = vec![None; n];
        for i in (0..n).rev() {
            let (gx, gp) = layers::backward(
                &self.spec.layers[i],
                &self.shapes[i],
                &self.shapes[i + 1],
                self.params[i].as_ref(),
                &activations[i],
                &activations[i + 1],
                &g,
            );
            params[i] = gp;
            g = gx;
        }
        Ok(Gradients { params, input: g })
    }

    /// Sum of squared weight entries (biases excluded) and its gradient.
    pub fn l2_regularizer(&self) -> (f64, Gradients) {
        let mut value = 0.0;
        let params = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    value += p.weight.sum_squares();
                    LayerParams {
                        weight: p.weight.map(|w| 2.0 * w),
                        bias: Tensor::zeros(p.bias.shape()),
                    }
                })
            })
            .collect();
        (
            value,
            Gradients {
                params,
                input: Tensor::zeros(self.input_shape()),
            },
        )
    }
}

/// Per-layer parameter gradients plus the gradient w.r.t. the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<Option<LayerParams>>,
    pub input: Tensor,
}

impl Gradients {
    pub fn zeros_like(net: &NetworkState) -> Self {
        Self {
            params: net
                .params
                .iter()
                .map(|p| p.as_ref().map(LayerParams::zeros_like))
                .collect(),
            input: Tensor::zeros(net.input_shape()),
        }
    }

    /// Adds `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    axpy(a.weight.data_mut(), b.weight.data(), scale)?;
                    axpy(a.bias.data_mut(), b.bias.data(), scale)?;
                }
                (None, None) => {}
                _ => return Err(Error::Shape("gradient layer layout mismatch".into())),
            }
        }
        axpy(self.input.data_mut(), other.input.data(), scale)
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.params.iter_mut().flatten() {
            p.weight.scale(factor);
            p.bias.scale(factor);
        }
        self.input.scale(factor);
    }

    /// Parameter gradients in the order of [`NetworkState::param_slices`].
    pub fn flatten_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.input.is_finite()
            && self
                .params
                .iter()
                .flatten()
                .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!(
            "gradient length mismatch: {} vs {}",
            dst.len(),
            src.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
    Ok(())
}
