use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_layers, LayerSpec, ModelError, Network, Stack};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor, TensorError};

/// Where to cut: a named preset or an explicit block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CutSpec {
    Shallow,
    Middle,
    Deep,
    Index(usize),
}

impl std::str::FromStr for CutSpec {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" | "shallow" => Ok(CutSpec::Shallow),
            "m" | "middle" => Ok(CutSpec::Middle),
            "d" | "deep" => Ok(CutSpec::Deep),
            other => other
                .parse::<usize>()
                .map(CutSpec::Index)
                .map_err(|_| ModelError::Config(format!("cut must be s, m, d or a block index, got '{other}'"))),
        }
    }
}

impl TryFrom<String> for CutSpec {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CutSpec> for String {
    fn from(c: CutSpec) -> String {
        c.to_string()
    }
}

impl std::fmt::Display for CutSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CutSpec::Shallow => f.write_str("s"),
            CutSpec::Middle => f.write_str("m"),
            CutSpec::Deep => f.write_str("d"),
            CutSpec::Index(i) => write!(f, "{i}"),
        }
    }
}

/// Resolves cut presets against a block count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    blocks: usize,
}

impl SplitPlan {
    pub fn new(blocks: usize) -> Result<Self, ModelError> {
        if blocks < 2 {
            return Err(ModelError::Config(format!("cannot split a network of {blocks} block(s)")));
        }
        Ok(SplitPlan { blocks })
    }

    /// Preset cuts at 12/54, 17/54 and 26/54 of the depth, rounded, clamped
    /// to `[1, blocks - 1]` and bumped where needed so that s < m < d holds
    /// whenever the depth allows it (four blocks or more).
    pub fn presets(&self) -> (usize, usize, usize) {
        let n = self.blocks;
        let at = |num: f64| ((n as f64 * num / 54.0).round() as usize).clamp(1, n - 1);
        let s = at(12.0);
        let m = at(17.0).max(s + 1).min(n - 1);
        let d = at(26.0).max(m + 1).min(n - 1);
        (s, m, d)
    }

    pub fn resolve(&self, cut: CutSpec) -> Result<usize, ModelError> {
        let (s, m, d) = self.presets();
        match cut {
            CutSpec::Shallow => Ok(s),
            CutSpec::Middle => Ok(m),
            CutSpec::Deep => Ok(d),
            CutSpec::Index(i) if (1..self.blocks).contains(&i) => Ok(i),
            CutSpec::Index(i) => Err(ModelError::Config(format!(
                "cut {i} outside [1, {}] for a {}-block network",
                self.blocks - 1,
                self.blocks
            ))),
        }
    }
}

/// The two halves of a network plus the client's auxiliary head.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedModel {
    pub cut: usize,
    pub bottom: Stack,
    pub top: Stack,
    pub aux: Stack,
}

impl PartitionedModel {
    /// Per-sample dims of the cut-layer activation.
    pub fn cut_dims(&self) -> Vec<usize> {
        self.bottom.output_dims()
    }
}

/// Splits `params` (ordered as [`Network::init_params`] yields them) at block
/// `cut`. Blocks `[0, cut)` go to the client. The auxiliary head maps the cut
/// activation to class logits and is drawn from its own seeded stream.
pub fn partition(net: &Network, params: Vec<Tensor>, cut: usize, aux_seed: u64) -> Result<PartitionedModel, ModelError> {
    let n = net.block_count();
    if !(1..n).contains(&cut) {
        return Err(ModelError::Config(format!("cut {cut} outside [1, {}]", n - 1)));
    }
    let total = net.param_count(0..n);
    if params.len() != total {
        return Err(ModelError::Config(format!("expected {total} parameter tensors, got {}", params.len())));
    }
    let dtype = params.first().map(Tensor::dtype).unwrap_or(DType::F32);
    let split = net.param_count(0..cut);
    let mut bottom_params = params;
    let top_params = bottom_params.split_off(split);
    let bottom = Stack::new(net.layers(0..cut), net.input_dims().to_vec(), bottom_params)?;
    let cut_dims = bottom.output_dims();
    let top = Stack::new(net.layers(cut..n), cut_dims.clone(), top_params)?;

    let aux_layers = aux_head_layers(&cut_dims, net.classes());
    let mut rng = ChaCha8Rng::seed_from_u64(aux_seed);
    let aux_params = init_layers(&aux_layers, &mut rng, dtype)?;
    let aux = Stack::new(aux_layers, cut_dims, aux_params)?;
    Ok(PartitionedModel { cut, bottom, top, aux })
}

/// The auxiliary classifier for a cut activation of per-sample `cut_dims`:
/// flatten when needed, then one dense layer to the class logits.
pub fn aux_head_layers(cut_dims: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    if cut_dims.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    layers.push(LayerSpec::Dense {
        inputs: cut_dims.iter().product(),
        outputs: classes,
    });
    layers
}

/// Nodes recorded by the client half of a step.
#[derive(Debug, Clone)]
pub struct ClientForward {
    pub z: Var,
    pub bottom_params: Vec<Var>,
    /// Auxiliary logits and head parameters when a head was supplied.
    pub aux: Option<(Var, Vec<Var>)>,
}

/// Records the bottom stack on `tape`, followed by `aux` on the cut
/// activation when given.
pub fn client_forward(bottom: &Stack, aux: Option<&Stack>, tape: &mut Tape, x: Tensor) -> Result<ClientForward, TensorError> {
    let xv = tape.input(x);
    let (z, bottom_params) = bottom.forward(tape, xv)?;
    let aux = match aux {
        Some(head) => Some(head.forward(tape, z)?),
        None => None,
    };
    Ok(ClientForward { z, bottom_params, aux })
}

/// Nodes recorded by the server half of a step.
#[derive(Debug, Clone)]
pub struct ServerForward {
    /// The received activation, tracked so its gradient can be returned.
    pub z: Var,
    pub logits: Var,
    pub params: Vec<Var>,
}

pub fn server_forward(top: &Stack, tape: &mut Tape, z: Tensor) -> Result<ServerForward, TensorError> {
    let zv = tape.input_with_grad(z);
    let (logits, params) = top.forward(tape, zv)?;
    Ok(ServerForward { z: zv, logits, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, Arch};

    #[test]
    fn presets_for_default_resnet() {
        assert_eq!(SplitPlan::new(8).unwrap().presets(), (2, 3, 4));
    }

    #[test]
    fn presets_strictly_increase_from_four_blocks() {
        for n in 4..200 {
            let (s, m, d) = SplitPlan::new(n).unwrap().presets();
            assert!(1 <= s && s < m && m < d && d < n, "n={n}: {s} {m} {d}");
        }
    }

    #[test]
    fn explicit_cut_bounds() {
        let plan = SplitPlan::new(5).unwrap();
        assert_eq!(plan.resolve(CutSpec::Index(4)).unwrap(), 4);
        assert!(plan.resolve(CutSpec::Index(0)).is_err());
        assert!(plan.resolve(CutSpec::Index(5)).is_err());
        assert!(SplitPlan::new(1).is_err());
    }

    #[test]
    fn cut_spec_parses() {
        assert_eq!("s".parse::<CutSpec>().unwrap(), CutSpec::Shallow);
        assert_eq!("7".parse::<CutSpec>().unwrap(), CutSpec::Index(7));
        assert!("x".parse::<CutSpec>().is_err());
        assert_eq!(CutSpec::Deep.to_string(), "d");
    }

    #[test]
    fn aux_head_matches_cut_activation() {
        let net = build_network(Arch::TinyConv, &[1, 28, 28], 10, 0).unwrap();
        let params = net.init_params(1, DType::F32).unwrap();
        let part = partition(&net, params, 1, 99).unwrap();
        assert_eq!(part.cut_dims(), vec![8, 14, 14]);
        assert_eq!(part.aux.params()[0].dims(), &[8 * 14 * 14, 10]);
    }

    #[test]
    fn partition_rejects_bad_cut() {
        let net = build_network(Arch::Mlp, &[8], 2, 0).unwrap();
        let p = net.init_params(0, DType::F64).unwrap();
        assert!(partition(&net, p.clone(), 0, 0).is_err());
        assert!(partition(&net, p, 4, 0).is_err());
    }
}
