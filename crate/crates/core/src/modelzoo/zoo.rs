//! Constructors for the toy networks standing in for the full-scale models.

use serde::{Deserialize, Serialize};
use viewlab_autodiff::Tensor;

use super::blob::BlobSpec;
use super::network::{Activation, Architecture, Layer, Network, Param};
use crate::error::{Error, Result};

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    }
}

fn linear(inputs: usize, outputs: usize) -> Layer {
    Layer::Linear {
        inputs,
        outputs,
        bias: true,
    }
}

fn act(kind: Activation) -> Layer {
    Layer::Activation { kind }
}

/// Shared trunk: a patchifying 4x4/stride-4 conv, a stride-2 conv, and a
/// same-resolution conv, each followed by `activation` (after a layer norm
/// when `normalized`), then flattened.
fn conv_trunk(
    image_shape: [usize; 3],
    widths: [usize; 3],
    activation: Activation,
    normalized: bool,
) -> (Vec<Layer>, usize) {
    let [c, h, w] = image_shape;
    let convs = [
        conv(c, widths[0], 4, 4, 0),
        conv(widths[0], widths[1], 3, 2, 1),
        conv(widths[1], widths[2], 3, 1, 1),
    ];
    let mut layers = Vec::new();
    for layer in convs {
        layers.push(layer);
        if normalized {
            layers.push(Layer::LayerNorm);
        }
        layers.push(act(activation));
    }
    layers.push(Layer::Flatten);
    let h1 = (h - 4) / 4 + 1;
    let w1 = (w - 4) / 4 + 1;
    let h2 = (h1 + 2 - 3) / 2 + 1;
    let w2 = (w1 + 2 - 3) / 2 + 1;
    (layers, widths[2] * h2 * w2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub widths: [usize; 3],
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            widths: [8, 16, 16],
            hidden: 64,
            embed_dim: 32,
        }
    }
}

/// Three conv blocks, a hidden layer (the backbone output), and a linear projection head.
pub fn toy_encoder(image_shape: [usize; 3], spec: EncoderSpec, seed: u64) -> Result<Network> {
    let (mut layers, flat) = conv_trunk(image_shape, spec.widths, Activation::Silu, true);
    layers.push(linear(flat, spec.hidden));
    // Keeps the embedding scale stable under SGD; without it training
    // quickly collapses every input to one embedding.
    layers.push(Layer::LayerNorm);
    layers.push(act(Activation::Silu));
    let backbone = layers.len();
    // No bias: a shared offset survives normalisation as a direction every
    // embedding is pulled toward, and SGD grows it into a collapse.
    layers.push(Layer::Linear {
        inputs: spec.hidden,
        outputs: spec.embed_dim,
        bias: false,
    });
    Network::new(
        Architecture {
            id: "toy-conv-encoder".into(),
            input_shape: image_shape.to_vec(),
            layers,
            backbone_layers: Some(backbone),
        },
        seed,
    )
}

/// Fixed analytic generator; it has no parameters.
pub fn blob_generator(spec: BlobSpec) -> Result<Network> {
    Network::new(
        Architecture {
            id: "blob-generator".into(),
            input_shape: vec![spec.latent_dim()],
            layers: vec![Layer::BlobRender { spec }],
            backbone_layers: None,
        },
        0,
    )
}

/// Frozen linear map `w -> A w` with `A` of shape `[outputs, inputs]`.
pub fn linear_generator(a: &Tensor) -> Result<Network> {
    if a.shape().len() != 2 {
        return Err(Error::config("linear generator needs a matrix"));
    }
    let (outputs, inputs) = (a.shape()[0], a.shape()[1]);
    let arch = Architecture {
        id: "linear-generator".into(),
        input_shape: vec![inputs],
        layers: vec![Layer::Linear {
            inputs,
            outputs,
            bias: false,
        }],
        backbone_layers: None,
    };
    let params = vec![Param {
        name: "0.weight".into(),
        tensor: a.clone(),
        learnable: false,
    }];
    Network::from_parts(arch, params, 0)
}

/// Image-to-latent inverter.
pub fn toy_inverter(image_shape: [usize; 3], latent_dim: usize, seed: u64) -> Result<Network> {
    let (mut layers, flat) = conv_trunk(image_shape, [16, 32, 32], Activation::Silu, false);
    layers.push(linear(flat, 128));
    layers.push(act(Activation::Silu));
    layers.push(linear(128, latent_dim));
    Network::new(
        Architecture {
            id: "toy-inverter".into(),
            input_shape: image_shape.to_vec(),
            layers,
            backbone_layers: None,
        },
        seed,
    )
}

/// Linear inverter for flat inputs (pairs with [`linear_generator`]).
pub fn linear_inverter(inputs: usize, latent_dim: usize, seed: u64) -> Result<Network> {
    Network::new(
        Architecture {
            id: "linear-inverter".into(),
            input_shape: vec![inputs],
            layers: vec![Layer::Linear {
                inputs,
                outputs: latent_dim,
                bias: false,
            }],
            backbone_layers: None,
        },
        seed,
    )
}

/// Convnet producing one pre-activation logit per image.
pub fn toy_discriminator(image_shape: [usize; 3], seed: u64) -> Result<Network> {
    let (mut layers, flat) = conv_trunk(image_shape, [8, 16, 16], Activation::Silu, false);
    layers.push(linear(flat, 1));
    Network::new(
        Architecture {
            id: "toy-discriminator".into(),
            input_shape: image_shape.to_vec(),
            layers,
            backbone_layers: None,
        },
        seed,
    )
}

/// Randomly initialized, frozen convolutional feature extractor.
pub fn perceptual_net(image_shape: [usize; 3], seed: u64) -> Result<Network> {
    let [c, _, _] = image_shape;
    let layers = vec![
        conv(c, 8, 3, 2, 1),
        act(Activation::Tanh),
        conv(8, 8, 3, 2, 1),
        act(Activation::Tanh),
        Layer::Flatten,
    ];
    Ok(Network::new(
        Architecture {
            id: "random-perceptual".into(),
            input_shape: image_shape.to_vec(),
            layers,
            backbone_layers: None,
        },
        seed,
    )?
    .freeze())
}

/// Multi-layer perceptron on flat vectors.
pub fn mlp(
    id: &str,
    inputs: usize,
    hidden: &[usize],
    outputs: usize,
    activation: Activation,
    seed: u64,
) -> Result<Network> {
    let mut layers = Vec::new();
    let mut width = inputs;
    for &h in hidden {
        layers.push(linear(width, h));
        layers.push(act(activation));
        width = h;
    }
    layers.push(linear(width, outputs));
    Network::new(
        Architecture {
            id: id.into(),
            input_shape: vec![inputs],
            layers,
            backbone_layers: None,
        },
        seed,
    )
}

/// SimSiam-style predictor: bottleneck MLP mapping embeddings to embeddings.
pub fn predictor(dim: usize, hidden: usize, seed: u64) -> Result<Network> {
    mlp("predictor", dim, &[hidden], dim, Activation::Silu, seed)
}

/// Parameter-free identity on vectors of length `dim`.
pub fn identity(dim: usize) -> Result<Network> {
    Network::new(
        Architecture {
            id: "identity".into(),
            input_shape: vec![dim],
            layers: Vec::new(),
            backbone_layers: None,
        },
        0,
    )
}
