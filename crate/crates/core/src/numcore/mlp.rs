//! Multilayer perceptron with hand-derived backward passes.
//!
//! Each layer computes `y = act(x · W + b)` with `W` stored row-major as
//! `in_dim × out_dim`. The backward pass returns vector–Jacobian products:
//! parameter gradients summed over the batch, and per-sample input
//! gradients. Callers that want a mean divide the upstream by the batch size.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in_dim × out_dim`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations cached by [`Mlp::forward`]; enough to run any backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: DenseMatrix,
    /// Post-activation output of every layer.
    activations: Vec<DenseMatrix>,
}

impl ForwardPass {
    pub fn input(&self) -> &DenseMatrix {
        &self.input
    }

    pub fn output(&self) -> &DenseMatrix {
        self.activations
            .last()
            .expect("an Mlp has at least one layer")
    }

    /// Output of layer `i` (0-based).
    pub fn activation(&self, i: usize) -> &DenseMatrix {
        &self.activations[i]
    }

    pub fn into_output(mut self) -> DenseMatrix {
        self.activations
            .pop()
            .expect("an Mlp has at least one layer")
    }

    fn layer_input(&self, i: usize) -> &DenseMatrix {
        if i == 0 {
            &self.input
        } else {
            &self.activations[i - 1]
        }
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// Flat views in the order used by [`Mlp::params_mut`].
    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *a += b;
            }
        }
        for (w, o) in self.biases.iter_mut().zip(&other.biases) {
            for (a, b) in w.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl Mlp {
    /// Validates that layer dimensions chain and that the last layer is linear.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParam(
                "an Mlp needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != output dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) || !l.weight.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::InvalidParam(
                "final layer activation must be identity".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Random initialization: He-uniform for relu layers, Glorot-uniform
    /// otherwise, zero biases. `dims` lists every width including input and
    /// output; `hidden` is used for all but the last layer.
    pub fn init(dims: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParam(format!("bad layer widths {dims:?}")));
        }
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let activation = if i + 1 == n_layers {
                    Activation::Identity
                } else {
                    hidden
                };
                let limit = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weight =
                    DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-limit, limit));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Widths of every layer boundary, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<ForwardPass> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut activations: Vec<DenseMatrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = activations.last().unwrap_or(x);
            let mut z = input.matmul(&layer.weight)?;
            let width = layer.out_dim();
            for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
                *v = layer.activation.apply(*v + layer.bias[i % width]);
            }
            activations.push(z);
        }
        Ok(ForwardPass {
            input: x.clone(),
            activations,
        })
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(x)?.into_output())
    }

    /// Gradient of `Σ upstream ⊙ output` with respect to every parameter,
    /// summed over the batch.
    pub fn param_grad(&self, pass: &ForwardPass, upstream: &DenseMatrix) -> Result<MlpGrads> {
        let mut grads = MlpGrads::zeros_like(self);
        self.backprop(
            pass,
            self.layers.len() - 1,
            upstream,
            Some(&mut grads),
            false,
        )?;
        Ok(grads)
    }

    /// Gradient of `Σ upstream ⊙ output` with respect to the input, per sample.
    pub fn input_grad(&self, pass: &ForwardPass, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        self.input_grad_from(pass, self.layers.len() - 1, upstream)
    }

    /// Input gradient for an upstream attached to the output of layer
    /// `layer` instead of the network output.
    pub fn input_grad_from(
        &self,
        pass: &ForwardPass,
        layer: usize,
        upstream: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        Ok(self
            .backprop(pass, layer, upstream, None, true)?
            .expect("input gradient requested"))
    }

    /// Parameter and input gradients in one sweep.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        upstream: &DenseMatrix,
    ) -> Result<(MlpGrads, DenseMatrix)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dx = self
            .backprop(
                pass,
                self.layers.len() - 1,
                upstream,
                Some(&mut grads),
                true,
            )?
            .expect("input gradient requested");
        Ok((grads, dx))
    }

    fn backprop(
        &self,
        pass: &ForwardPass,
        top: usize,
        upstream: &DenseMatrix,
        mut sink: Option<&mut MlpGrads>,
        want_input: bool,
    ) -> Result<Option<DenseMatrix>> {
        if pass.activations.len() != self.layers.len() || top >= self.layers.len() {
            return Err(Error::Shape("forward cache does not match network".into()));
        }
        if upstream.shape() != pass.activations[top].shape() {
            return Err(Error::Shape(format!(
                "upstream {:?} does not match layer {top} output {:?}",
                upstream.shape(),
                pass.activations[top].shape()
            )));
        }
        let mut delta = upstream.clone();
        for i in (0..=top).rev() {
            let layer = &self.layers[i];
            if layer.activation != Activation::Identity {
                for (d, &y) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(pass.activations[i].as_slice())
                {
                    *d *= layer.activation.derivative_from_output(y);
                }
            }
            if let Some(g) = sink.as_deref_mut() {
                pass.layer_input(i)
                    .accumulate_transposed_matmul(&delta, &mut g.weights[i])?;
                for row in delta.iter_rows() {
                    for (b, d) in g.biases[i].iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            if i == 0 && !want_input {
                return Ok(None);
            }
            delta = delta.matmul_transposed(&layer.weight)?;
        }
        Ok(Some(delta))
    }

    /// Mutable flat views of all parameters: weight then bias, per layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn to_document(&self) -> MlpDocument {
        MlpDocument {
            dims: self.dims(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weight.as_slice().to_vec())
                .collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
        }
    }

    pub fn from_document(doc: MlpDocument) -> Result<Self> {
        let n = doc.activations.len();
        if doc.dims.len() != n + 1 || doc.weights.len() != n || doc.biases.len() != n {
            return Err(Error::Shape(format!(
                "model document lists {} dims, {} activations, {} weight and {} bias arrays",
                doc.dims.len(),
                n,
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let layers = doc
            .activations
            .into_iter()
            .zip(doc.weights)
            .zip(doc.biases)
            .enumerate()
            .map(|(i, ((activation, w), bias))| {
                Ok(Layer {
                    weight: DenseMatrix::new(doc.dims[i], doc.dims[i + 1], w)?,
                    bias,
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

/// JSON model format:
/// `{"dims": [...], "activations": [...], "weights": [[...]], "biases": [[...]]}`.
///
/// `weights[i]` is the row-major `dims[i] × dims[i+1]` matrix of layer `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDocument {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MlpDocument::deserialize(d)?;
        Mlp::from_document(doc).map_err(serde::de::Error::custom)
    }
}
