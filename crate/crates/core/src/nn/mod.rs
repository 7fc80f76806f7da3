//! Feed-forward classifier with interposable dropout slots.
//!
//! A network is a stack of dense layers (`x W + b`, ReLU on every layer but
//! the last). A dropout slot placed after layer `l` masks that layer's
//! activations before they feed layer `l + 1`. In training mode the slot asks
//! a [`DropoutDriver`] for a mask; in evaluation mode slots are the identity
//! and no driver is consulted.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod loss;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::softmax_cross_entropy;

use crate::dropout::{apply_mask, DropMask};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `fan_in x fan_out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSlot {
    /// Index of the dense layer whose output this slot masks.
    pub after_layer: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    /// Ordered by `after_layer`.
    pub dropout: Vec<DropoutSlot>,
}

impl ModelSpec {
    /// Dense stack with a dropout slot of the same rate after every hidden layer.
    pub fn mlp(widths: &[usize], rate: f64) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        let spec = Self {
            widths: widths.to_vec(),
            dropout: (0..hidden)
                .map(|l| DropoutSlot {
                    after_layer: l,
                    rate,
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn input_width(&self) -> usize {
        self.widths.first().copied().unwrap_or(0)
    }

    /// Width of the activations the slot masks.
    pub fn slot_width(&self, slot: usize) -> Option<usize> {
        self.dropout.get(slot).map(|s| self.widths[s.after_layer + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("model.widths", "need an input width and at least one layer"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("model.widths", "zero-width layer"));
        }
        let mut last = None;
        for s in &self.dropout {
            if s.after_layer + 1 >= self.layers() {
                return Err(Error::config(
                    "model.dropout",
                    format!("slot after layer {} does not feed a dense layer", s.after_layer),
                ));
            }
            if last.is_some_and(|l| s.after_layer <= l) {
                return Err(Error::config("model.dropout", "slots must be strictly ordered"));
            }
            if !(0.0..1.0).contains(&s.rate) {
                return Err(Error::config("model.dropout", format!("rate {} outside [0, 1)", s.rate)));
            }
            last = Some(s.after_layer);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Source of dropout masks during a training-mode forward pass.
pub trait DropoutDriver {
    /// Mask for dropout slot `slot`, given the activations it is about to mask.
    fn mask(&mut self, slot: usize, rate: f64, input: &Matrix) -> Result<DropMask>;
}

/// Driver for evaluation-only callers; it is never asked for a mask.
pub struct NoDropout;

impl DropoutDriver for NoDropout {
    fn mask(&mut self, slot: usize, _rate: f64, _input: &Matrix) -> Result<DropMask> {
        Err(Error::Contract(format!(
            "dropout slot {slot} requested a mask from NoDropout"
        )))
    }
}

/// Replays fixed masks, one per slot.
pub struct FixedMasks(pub Vec<DropMask>);

impl DropoutDriver for FixedMasks {
    fn mask(&mut self, slot: usize, _rate: f64, input: &Matrix) -> Result<DropMask> {
        let m = self
            .0
            .get(slot)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no fixed mask for slot {slot}")))?;
        if m.shape() != input.shape() {
            return Err(Error::shape("FixedMasks", format!("{:?} vs {:?}", m.shape(), input.shape())));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct AppliedMask {
    pub mask: DropMask,
    pub rate: f64,
}

/// Everything a backward pass needs from the forward pass that produced it.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    version: u64,
    pub mode: Mode,
    /// Input to each dense layer (after dropout, if any).
    pub inputs: Vec<Matrix>,
    /// Post-activation output of each dense layer; the last entry holds the logits.
    pub outputs: Vec<Matrix>,
    /// Mask applied to `outputs[l]`, indexed by layer.
    pub masks: Vec<Option<AppliedMask>>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.outputs.last().expect("at least one layer")
    }

    /// Activations a dropout slot saw before masking.
    pub fn slot_input(&self, after_layer: usize) -> &Matrix {
        &self.outputs[after_layer]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    /// `[dW0, db0, dW1, db1, ...]`, matching [`Network::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<DenseLayer>,
    /// Bumped on every parameter update; ties a ForwardPass to the weights it used.
    version: u64,
}

impl Network {
    /// Kaiming-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let n = spec.layers();
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                    .collect();
                DenseLayer {
                    weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }

    pub fn from_parts(spec: ModelSpec, layers: Vec<DenseLayer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers() {
            return Err(Error::shape("Network::from_parts", format!("{} layers for spec with {}", layers.len(), spec.layers())));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.shape() != (spec.widths[l], spec.widths[l + 1])
                || layer.bias.len() != spec.widths[l + 1]
            {
                return Err(Error::shape("Network::from_parts", format!("layer {l} does not match widths")));
            }
        }
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    /// `[W0, b0, W1, b1, ...]`.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(
        &self,
        batch: &Matrix,
        mode: Mode,
        driver: &mut dyn DropoutDriver,
    ) -> Result<ForwardPass> {
        if batch.cols() != self.spec.input_width() {
            return Err(Error::shape(
                "forward",
                format!("batch width {} vs input width {}", batch.cols(), self.spec.input_width()),
            ));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut masks = vec![None; n];
        let mut x = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Matrix::zeros(x.rows(), layer.fan_out());
            gemm(x.data(), layer.weights.data(), z.data_mut(), x.rows(), layer.fan_in(), layer.fan_out());
            z.add_row_vector(&layer.bias)?;
            if layer.activation == Activation::Relu {
                z.map_inplace(|v| v.max(0.0));
            }
            let slot = self.spec.dropout.iter().position(|s| s.after_layer == l);
            let next = match (slot, mode) {
                (Some(slot), Mode::Train) => {
                    let rate = self.spec.dropout[slot].rate;
                    let mask = driver.mask(slot, rate, &z)?;
                    let masked = apply_mask(&z, &mask, rate)?;
                    masks[l] = Some(AppliedMask { mask, rate });
                    Some(masked)
                }
                _ => None,
            };
            inputs.push(x);
            x = match next {
                Some(masked) => {
                    outputs.push(z);
                    masked
                }
                None => {
                    outputs.push(z.clone());
                    z
                }
            };
        }
        Ok(ForwardPass {
            version: self.version,
            mode,
            inputs,
            outputs,
            masks,
        })
    }

    /// Logits with every dropout slot disabled.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        let pass = self.forward(batch, Mode::Eval, &mut NoDropout)?;
        Ok(pass.outputs.into_iter().last().expect("at least one layer"))
    }

    pub fn backward(&self, pass: &ForwardPass, dlogits: &Matrix) -> Result<Gradients> {
        if pass.version != self.version || pass.inputs.len() != self.layers.len() {
            return Err(Error::Contract(
                "backward called with a forward pass from different parameters".into(),
            ));
        }
        if dlogits.shape() != pass.logits().shape() {
            return Err(Error::shape(
                "backward",
                format!("logit gradient {:?} vs logits {:?}", dlogits.shape(), pass.logits().shape()),
            ));
        }
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut delta = dlogits.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let x = &pass.inputs[l];
            let xt = x.transpose();
            let mut dw = Matrix::zeros(layer.fan_in(), layer.fan_out());
            gemm(xt.data(), delta.data(), dw.data_mut(), layer.fan_in(), x.rows(), layer.fan_out());
            let db = delta.column_sums();
            grads.push(LayerGradients {
                weights: dw,
                bias: db,
            });
            if l == 0 {
                break;
            }
            let wt = layer.weights.transpose();
            let mut dx = Matrix::zeros(delta.rows(), layer.fan_in());
            gemm(delta.data(), wt.data(), dx.data_mut(), delta.rows(), layer.fan_out(), layer.fan_in());
            if let Some(applied) = &pass.masks[l - 1] {
                let keep = 1.0 - applied.rate;
                for (g, &m) in dx.data_mut().iter_mut().zip(applied.mask.matrix().data()) {
                    *g = if m == 0.0 { 0.0 } else { *g / keep };
                }
            }
            if self.layers[l - 1].activation == Activation::Relu {
                for (g, &a) in dx.data_mut().iter_mut().zip(pass.outputs[l - 1].data()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn apply_adam(&mut self, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        let g = grads.slices();
        let mut p = self.parameters_mut();
        adam_step(&mut p, &g, state, cfg)
    }
}

#[cfg(test)]
mod tests;
