use rand::Rng;
use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Tape, Tensor, Unary, Var};

use super::blob::{self, BlobSpec};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::Silu => Unary::Silu,
            Activation::Tanh => Unary::Tanh,
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Softplus => Unary::Softplus,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Activation {
        kind: Activation,
    },
    Flatten,
    /// Per-sample standardisation over all features, without learned gain or shift.
    LayerNorm,
    BlobRender {
        spec: BlobSpec,
    },
}

impl Layer {
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_ch, in_ch, kernel, kernel]),
                ("bias", vec![out_ch]),
            ],
            Layer::Linear {
                inputs,
                outputs,
                bias,
            } => {
                let mut v = vec![("weight", vec![outputs, inputs])];
                if bias {
                    v.push(("bias", vec![outputs]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Per-sample output shape, or an error if the input does not fit.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(Error::shape("conv2d input", &[in_ch, 0, 0], input));
                }
                if input[1] + 2 * padding < kernel || input[2] + 2 * padding < kernel || stride == 0 {
                    return Err(Error::config(format!(
                        "conv2d kernel {kernel} does not fit input {input:?}"
                    )));
                }
                let oh = (input[1] + 2 * padding - kernel) / stride + 1;
                let ow = (input[2] + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_ch, oh, ow])
            }
            Layer::Linear { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(Error::shape("linear input", &[inputs], input));
                }
                Ok(vec![outputs])
            }
            Layer::Activation { .. } => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::LayerNorm => {
                if input.iter().product::<usize>() < 2 {
                    return Err(Error::shape("layer norm input", &[2], input));
                }
                Ok(input.to_vec())
            }
            Layer::BlobRender { spec } => {
                if input != [spec.latent_dim()] {
                    return Err(Error::shape("blob renderer latent", &[spec.latent_dim()], input));
                }
                Ok(spec.image_shape().to_vec())
            }
        }
    }
}

/// Serializable description of a network: enough to rebuild it from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Number of leading layers that form the feature backbone (used by the linear probe).
    #[serde(default)]
    pub backbone_layers: Option<usize>,
}

impl Architecture {
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.shape_after(self.layers.len())
    }

    pub fn shape_after(&self, n_layers: usize) -> Result<Vec<usize>> {
        self.layers[..n_layers]
            .iter()
            .try_fold(self.input_shape.clone(), |shape, layer| layer.output_shape(&shape))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub learnable: bool,
}

/// A feed-forward stack of layers with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    params: Vec<Param>,
    seed: u64,
    output_shape: Vec<usize>,
}

impl Network {
    /// Builds the network with freshly initialized parameters
    /// (weights uniform with variance `1/fan_in`, zero biases).
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let output_shape = arch.output_shape()?;
        let mut r = rng::stream(&[seed, purpose::INIT]);
        let mut params = Vec::new();
        for (li, layer) in arch.layers.iter().enumerate() {
            for (name, shape) in layer.param_shapes() {
                let numel: usize = shape.iter().product();
                let data = if name == "bias" {
                    vec![0.0; numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (3.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| r.random_range(-bound..bound)).collect()
                };
                params.push(Param {
                    name: format!("{li}.{name}"),
                    tensor: Tensor::new(shape, data),
                    learnable: true,
                });
            }
        }
        Ok(Network {
            arch,
            params,
            seed,
            output_shape,
        })
    }

    /// Rebuilds a network from stored parameter tensors.
    pub fn from_parts(arch: Architecture, params: Vec<Param>, seed: u64) -> Result<Self> {
        let fresh = Network::new(arch, seed)?;
        if fresh.params.len() != params.len() {
            return Err(Error::config(format!(
                "architecture {} expects {} parameter blocks, got {}",
                fresh.arch.id,
                fresh.params.len(),
                params.len()
            )));
        }
        for (f, p) in fresh.params.iter().zip(&params) {
            if f.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    format!("parameter {}", f.name),
                    f.tensor.shape(),
                    p.tensor.shape(),
                ));
            }
        }
        Ok(Network { params, ..fresh })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Marks every parameter block as fixed.
    pub fn freeze(mut self) -> Self {
        for p in &mut self.params {
            p.learnable = false;
        }
        self
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Concatenated parameter values in block order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// Runs the first `n_layers` layers.
    pub fn forward_prefix<'t>(&self, x: Var<'t>, params: &[Var<'t>], n_layers: usize) -> Var<'t> {
        let mut h = x;
        let mut p = 0;
        for layer in &self.arch.layers[..n_layers] {
            h = match layer {
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let out = h.conv2d(params[p], Some(params[p + 1]), *stride, *padding);
                    p += 2;
                    out
                }
                Layer::Linear { bias, .. } => {
                    let mut out = h.matmul_t(params[p]);
                    p += 1;
                    if *bias {
                        out = out.add_row_broadcast(params[p]);
                        p += 1;
                    }
                    out
                }
                Layer::Activation { kind } => h.unary(kind.unary()),
                Layer::Flatten => h.flatten(),
                Layer::LayerNorm => {
                    let d = h.value().row_len() as f64;
                    h.center_rows().normalize_rows().scale(d.sqrt())
                }
                Layer::BlobRender { spec } => blob::render(h, spec),
            };
        }
        h
    }

    /// Backbone features (all layers when no backbone split is declared).
    pub fn features<'t>(&self, x: Var<'t>, params: &[Var<'t>]) -> Var<'t> {
        let n = self.arch.backbone_layers.unwrap_or(self.arch.layers.len());
        self.forward_prefix(x, params, n)
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        let n = self.arch.backbone_layers.unwrap_or(self.arch.layers.len());
        self.arch
            .shape_after(n)
            .expect("validated at construction")
    }
}

/// The contract every model in the zoo satisfies: a deterministic map from
/// batched inputs to batched outputs with gradients available through the tape.
pub trait DifferentiableMap {
    /// Per-sample input shape.
    fn input_shape(&self) -> &[usize];

    /// Per-sample output shape.
    fn output_shape(&self) -> &[usize];

    fn params(&self) -> &[Param];

    /// Forward pass on a batch `[B, ..input_shape]` with parameters bound on the same tape.
    fn forward<'t>(&self, x: Var<'t>, params: &[Var<'t>]) -> Var<'t>;

    /// Binds parameters to the tape; learnable blocks become differentiable leaves.
    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params()
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), p.learnable))
            .collect()
    }

    /// Binds every parameter as a constant.
    fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params()
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect()
    }

    /// Forward pass with frozen parameters; gradients still flow to `x`.
    fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        let params = self.bind_frozen(x.tape());
        self.forward(x, &params)
    }

    /// Checks that `x` is a batch of correctly-shaped samples.
    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape().len() + 1 || &x.shape()[1..] != self.input_shape() {
            let mut expected = vec![x.rows()];
            expected.extend_from_slice(self.input_shape());
            return Err(Error::shape("map input batch", &expected, x.shape()));
        }
        Ok(())
    }

    /// Evaluates a batch without recording gradients.
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let tape = Tape::new();
        let out = self.apply(tape.constant(x.clone()));
        Ok((*out.value()).clone())
    }
}

impl DifferentiableMap for Network {
    fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn forward<'t>(&self, x: Var<'t>, params: &[Var<'t>]) -> Var<'t> {
        self.forward_prefix(x, params, self.arch.layers.len())
    }
}
