//! Declarative networks built from blocks, and their split into a client
//! bottom, a server top, and an auxiliary head at the cut.

mod split;

pub use split::{aux_head_layers, client_forward, partition, server_forward, ClientForward, CutSpec, PartitionedModel, ServerForward, SplitPlan};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { in_channels: usize, out_channels: usize, stride: usize },
    Relu,
    MaxPool2x2,
    Flatten,
    /// `x + inner(x)`; the inner stack must preserve dims.
    Residual(Vec<LayerSpec>),
}

impl LayerSpec {
    /// Per-sample output dims (batch axis excluded).
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>, ModelError> {
        let bad = |what: &str| Err(ModelError::Config(format!("{what} cannot take input {input:?}")));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return bad(&format!("dense {inputs}x{outputs}"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv3x3 { in_channels, out_channels, stride } => {
                if input.len() != 3 || input[0] != *in_channels || !(*stride == 1 || *stride == 2) {
                    return bad(&format!("conv3x3 {in_channels}->{out_channels}/{stride}"));
                }
                Ok(vec![*out_channels, (input[1] - 1) / stride + 1, (input[2] - 1) / stride + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return bad("maxpool2x2");
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Residual(inner) => {
                let out = stack_output_dims(inner, input)?;
                if out != input {
                    return Err(ModelError::Config(format!(
                        "residual block maps {input:?} to {out:?}"
                    )));
                }
                Ok(out)
            }
        }
    }

    /// Parameter tensor dims in declaration order (weight before bias).
    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![*inputs, *outputs], vec![*outputs]],
            LayerSpec::Conv3x3 { in_channels, out_channels, .. } => {
                vec![vec![*out_channels, *in_channels, 3, 3], vec![*out_channels]]
            }
            LayerSpec::Residual(inner) => inner.iter().flat_map(LayerSpec::param_dims).collect(),
            _ => Vec::new(),
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng, dtype: DType, out: &mut Vec<Tensor>) -> Result<(), TensorError> {
        let fan_in = match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv3x3 { in_channels, .. } => in_channels * 9,
            LayerSpec::Residual(inner) => {
                for layer in inner {
                    layer.init(rng, dtype, out)?;
                }
                return Ok(());
            }
            _ => return Ok(()),
        };
        let dims = self.param_dims();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = dims[0].iter().product();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        out.push(Tensor::from_values(&dims[0], &w, dtype)?);
        out.push(Tensor::zeros(&dims[1], dtype)?);
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &mut std::slice::Iter<'_, Var>) -> Result<Var, TensorError> {
        let mut next = || {
            params
                .next()
                .copied()
                .ok_or_else(|| TensorError::Contract("stack ran out of parameters".into()))
        };
        match self {
            LayerSpec::Dense { .. } => {
                let (w, b) = (next()?, next()?);
                tape.dense(x, w, b)
            }
            LayerSpec::Conv3x3 { stride, .. } => {
                let (k, b) = (next()?, next()?);
                tape.conv2d(x, k, b, *stride)
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::MaxPool2x2 => tape.maxpool2x2(x),
            LayerSpec::Flatten => tape.flatten(x),
            LayerSpec::Residual(inner) => {
                let mut h = x;
                for layer in inner {
                    h = layer.forward(tape, h, params)?;
                }
                tape.add(x, h)
            }
        }
    }
}

fn stack_output_dims(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>, ModelError> {
    layers.iter().try_fold(input.to_vec(), |dims, layer| layer.output_dims(&dims))
}

/// An ordered layer list with its parameters; the unit each party trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    layers: Vec<LayerSpec>,
    input_dims: Vec<usize>,
    params: Vec<Tensor>,
}

impl Stack {
    pub fn new(layers: Vec<LayerSpec>, input_dims: Vec<usize>, params: Vec<Tensor>) -> Result<Self, ModelError> {
        stack_output_dims(&layers, &input_dims)?;
        let expected: Vec<Vec<usize>> = layers.iter().flat_map(LayerSpec::param_dims).collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.dims().to_vec()).collect();
        if expected != got {
            return Err(ModelError::Config(format!(
                "parameter dims {got:?} do not match layers {expected:?}"
            )));
        }
        Ok(Stack {
            layers,
            input_dims,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> Vec<usize> {
        stack_output_dims(&self.layers, &self.input_dims).expect("validated at construction")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replaces all parameters; dims must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ModelError> {
        let ok = params.len() == self.params.len()
            && params
                .iter()
                .zip(&self.params)
                .all(|(a, b)| a.dims() == b.dims() && a.dtype() == b.dtype());
        if !ok {
            return Err(ModelError::Config("replacement parameters do not match the stack".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_bytes(&self) -> usize {
        self.params.iter().map(Tensor::byte_len).sum()
    }

    /// Records the stack on `tape`, registering parameters as leaves.
    /// Returns the output node and the parameter nodes in order.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>), TensorError> {
        let dims = tape.value(x).dims();
        if dims.len() < 2 || dims[1..] != self.input_dims[..] {
            return Err(TensorError::shape(
                "stack input",
                format!("batch {dims:?} does not match per-sample dims {:?}", self.input_dims),
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let mut it = vars.iter();
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h, &mut it)?;
        }
        Ok((h, vars))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    TinyConv,
    TinyResnet,
}

impl std::str::FromStr for Arch {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "tiny-conv" => Ok(Arch::TinyConv),
            "tiny-resnet" => Ok(Arch::TinyResnet),
            other => Err(ModelError::Config(format!("unknown arch '{other}'"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::TinyConv => "tiny-conv",
            Arch::TinyResnet => "tiny-resnet",
        })
    }
}

pub const DEFAULT_RESNET_BLOCKS: usize = 8;
const RESNET_WIDTH: usize = 16;

/// A validated block list. Cuts fall between blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Arch,
    input_dims: Vec<usize>,
    classes: usize,
    blocks: Vec<Vec<LayerSpec>>,
}

fn residual(width: usize) -> LayerSpec {
    LayerSpec::Residual(vec![
        LayerSpec::Conv3x3 { in_channels: width, out_channels: width, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_channels: width, out_channels: width, stride: 1 },
    ])
}

/// Builds the desk-scale architecture for per-sample `input_dims`.
/// `resnet_blocks` is only consulted for [`Arch::TinyResnet`].
pub fn build_network(arch: Arch, input_dims: &[usize], classes: usize, resnet_blocks: usize) -> Result<Network, ModelError> {
    if classes < 2 {
        return Err(ModelError::Config(format!("need at least 2 classes, got {classes}")));
    }
    if input_dims.is_empty() || input_dims.contains(&0) {
        return Err(ModelError::Config(format!("invalid input dims {input_dims:?}")));
    }
    let image = |min: usize| -> Result<(usize, usize, usize), ModelError> {
        match input_dims {
            [c, h, w] if *h >= min && *w >= min => Ok((*c, *h, *w)),
            _ => Err(ModelError::Config(format!(
                "{arch} needs C×H×W input with H, W ≥ {min}, got {input_dims:?}"
            ))),
        }
    };
    let blocks = match arch {
        Arch::Mlp => {
            let flat: usize = input_dims.iter().product();
            let mut first = Vec::new();
            if input_dims.len() > 1 {
                first.push(LayerSpec::Flatten);
            }
            first.extend([LayerSpec::Dense { inputs: flat, outputs: 256 }, LayerSpec::Relu]);
            vec![
                first,
                vec![LayerSpec::Dense { inputs: 256, outputs: 128 }, LayerSpec::Relu],
                vec![LayerSpec::Dense { inputs: 128, outputs: 64 }, LayerSpec::Relu],
                vec![LayerSpec::Dense { inputs: 64, outputs: classes }],
            ]
        }
        Arch::TinyConv => {
            let (c, h, w) = image(4)?;
            vec![
                vec![
                    LayerSpec::Conv3x3 { in_channels: c, out_channels: 8, stride: 1 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                ],
                vec![
                    LayerSpec::Conv3x3 { in_channels: 8, out_channels: 16, stride: 1 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                ],
                vec![LayerSpec::Conv3x3 { in_channels: 16, out_channels: 16, stride: 1 }, LayerSpec::Relu],
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::Dense { inputs: 16 * (h / 4) * (w / 4), outputs: 64 },
                    LayerSpec::Relu,
                ],
                vec![LayerSpec::Dense { inputs: 64, outputs: classes }],
            ]
        }
        Arch::TinyResnet => {
            if resnet_blocks < 2 {
                return Err(ModelError::Config(format!(
                    "tiny-resnet needs at least 2 residual blocks, got {resnet_blocks}"
                )));
            }
            let (c, h, w) = image(4)?;
            let mut blocks: Vec<Vec<LayerSpec>> = (0..resnet_blocks).map(|_| vec![residual(RESNET_WIDTH)]).collect();
            blocks[0].splice(
                0..0,
                [
                    LayerSpec::Conv3x3 { in_channels: c, out_channels: RESNET_WIDTH, stride: 1 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                ],
            );
            blocks[resnet_blocks - 1].extend([
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: RESNET_WIDTH * (h / 4) * (w / 4), outputs: classes },
            ]);
            blocks
        }
    };
    let net = Network {
        arch,
        input_dims: input_dims.to_vec(),
        classes,
        blocks,
    };
    let out = stack_output_dims(&net.layers(0..net.blocks.len()), input_dims)?;
    if out != [classes] {
        return Err(ModelError::Config(format!("network ends in {out:?}, expected [{classes}]")));
    }
    Ok(net)
}

impl Network {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<LayerSpec>] {
        &self.blocks
    }

    pub(crate) fn layers(&self, range: std::ops::Range<usize>) -> Vec<LayerSpec> {
        self.blocks[range].iter().flatten().cloned().collect()
    }

    /// Number of parameter tensors in blocks `range`.
    pub(crate) fn param_count(&self, range: std::ops::Range<usize>) -> usize {
        self.layers(range).iter().map(|l| l.param_dims().len()).sum()
    }

    /// Per-sample dims entering block `index`.
    pub fn dims_before(&self, index: usize) -> Vec<usize> {
        stack_output_dims(&self.layers(0..index), &self.input_dims).expect("validated at build")
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases, drawn in
    /// declaration order from a ChaCha8 stream seeded with `seed`.
    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<Vec<Tensor>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_layers(&self.layers(0..self.blocks.len()), &mut rng, dtype)
    }

    /// The whole, unsplit network as one stack.
    pub fn stack(&self, params: Vec<Tensor>) -> Result<Stack, ModelError> {
        Stack::new(self.layers(0..self.blocks.len()), self.input_dims.clone(), params)
    }
}

pub(crate) fn init_layers(layers: &[LayerSpec], rng: &mut ChaCha8Rng, dtype: DType) -> Result<Vec<Tensor>, ModelError> {
    let mut out = Vec::new();
    for layer in layers {
        layer.init(rng, dtype, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_default_blocks() {
        let net = build_network(Arch::Mlp, &[784], 10, 0).unwrap();
        assert_eq!(
            net.blocks(),
            &[
                vec![LayerSpec::Dense { inputs: 784, outputs: 256 }, LayerSpec::Relu],
                vec![LayerSpec::Dense { inputs: 256, outputs: 128 }, LayerSpec::Relu],
                vec![LayerSpec::Dense { inputs: 128, outputs: 64 }, LayerSpec::Relu],
                vec![LayerSpec::Dense { inputs: 64, outputs: 10 }],
            ]
        );
    }

    #[test]
    fn class_count_sets_head_width() {
        for arch in [Arch::Mlp, Arch::TinyConv, Arch::TinyResnet] {
            let net = build_network(arch, &[3, 8, 8], 100, 4).unwrap();
            let last = net.blocks().last().unwrap().last().unwrap();
            assert!(matches!(last, LayerSpec::Dense { outputs: 100, .. }), "{arch}");
        }
    }

    #[test]
    fn incompatible_inputs_are_config_errors() {
        assert!(build_network(Arch::TinyConv, &[784], 10, 0).is_err());
        assert!(build_network(Arch::TinyResnet, &[1, 2, 2], 10, 8).is_err());
        assert!(build_network(Arch::TinyResnet, &[1, 8, 8], 10, 1).is_err());
        assert!(build_network(Arch::Mlp, &[4], 1, 0).is_err());
    }

    #[test]
    fn resnet_block_count_is_configurable() {
        let net = build_network(Arch::TinyResnet, &[1, 28, 28], 10, 8).unwrap();
        assert_eq!(net.block_count(), 8);
        // every cut between residual blocks carries the same activation dims
        for cut in 1..8 {
            assert_eq!(net.dims_before(cut), vec![16, 14, 14]);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let net = build_network(Arch::Mlp, &[20], 3, 0).unwrap();
        let a = net.init_params(5, DType::F32).unwrap();
        let b = net.init_params(5, DType::F32).unwrap();
        let c = net.init_params(6, DType::F32).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        assert!(!a[0].bit_eq(&c[0]));
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(a[0].to_f64_vec().iter().all(|v| v.abs() <= bound));
        assert!(a[1].to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_preserves_dims_or_fails() {
        let ok = LayerSpec::Residual(vec![LayerSpec::Relu]);
        assert_eq!(ok.output_dims(&[2, 4, 4]).unwrap(), vec![2, 4, 4]);
        let bad = LayerSpec::Residual(vec![LayerSpec::MaxPool2x2]);
        assert!(bad.output_dims(&[2, 4, 4]).is_err());
    }
}
