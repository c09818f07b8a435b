//! End-to-end verification suites. Each returns named checks rather than
//! failing fast, so a report shows every result.

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig};
use super::oracle::{clients_alone, max_relative_difference, monolithic};
use super::run::{prepare, run_prepared};
use super::RunError;
use crate::gradcheck::layer_suite;
use crate::metrics::comm::{Direction, Kind, Phase};
use crate::model::{Arch, CutSpec};
use crate::protocol::{Mode, HEADER_LEN};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Grad,
    SplitEquiv,
    Decoupling,
    Bytes,
    Lambda,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::SplitEquiv, Suite::Decoupling, Suite::Bytes, Suite::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::SplitEquiv => "split-equiv",
            Suite::Decoupling => "decoupling",
            Suite::Bytes => "bytes",
            Suite::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Small MLP on Gaussian blobs: 40 batches of 32 per epoch.
pub fn reference_config() -> ExperimentConfig {
    ExperimentConfig {
        arch: Arch::Mlp,
        cut: CutSpec::Middle,
        epochs: 2,
        batch_size: 32,
        seed: 7,
        dataset: DatasetSpec::Blobs {
            train: 1280,
            test: 256,
            dims: vec![32],
            classes: 10,
            spread: 1.0,
        },
        ..ExperimentConfig::default()
    }
}

pub fn run_suite(suite: Suite, config: &ExperimentConfig) -> Result<VerifyReport, RunError> {
    let checks = match suite {
        Suite::Grad => grad(20, config.seed)?,
        Suite::SplitEquiv => split_equiv(config)?,
        Suite::Decoupling => decoupling(config)?,
        Suite::Bytes => bytes(config)?,
        Suite::Lambda => lambda(config)?,
    };
    Ok(VerifyReport { suite, checks })
}

pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const SPLIT_TOLERANCE: f64 = 1e-6;

/// Central differences for every primitive in f64.
pub fn grad(instances: usize, seed: u64) -> Result<Vec<Check>, RunError> {
    let rows = layer_suite(DType::F64, instances, seed, 1e-6)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            Check::new(
                format!("grad/{}", r.layer),
                r.max_rel_error <= GRAD_TOLERANCE && r.instances >= instances,
                format!("{} instances, max relative error {:.3e}", r.instances, r.max_rel_error),
            )
        })
        .collect())
}

fn with_mode(config: &ExperimentConfig, mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        ..config.clone()
    }
}

fn bits_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

/// CSL training against the unsplit network on the same batches.
pub fn split_equiv(config: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    let prep = prepare(&with_mode(config, Mode::Csl))?;
    let batches: usize = prep.turns().iter().map(|&(e, k)| prep.client_batches(k, e).len()).sum();
    let run = run_prepared(&prep)?;
    let oracle = monolithic(&prep)?;
    let mut expected = oracle.bottom;
    expected.extend(oracle.top);
    let mut actual = run.client_params[..prep.part.bottom.params().len()].to_vec();
    actual.extend(run.server_params);
    let diff = max_relative_difference(&expected, &actual);
    Ok(vec![Check::new(
        "split-equiv/csl-vs-monolithic",
        diff <= SPLIT_TOLERANCE && batches >= 50,
        format!("{batches} batches, max relative difference {diff:.3e}"),
    )])
}

/// DSL client parameters with the server attached, absent, and delayed.
pub fn decoupling(config: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    let base = with_mode(config, Mode::Dsl);
    let prep = prepare(&base)?;
    let attached = run_prepared(&prep)?.client_params;
    let absent = clients_alone(&prep)?;
    let mut delayed = base.clone();
    delayed.window = usize::MAX / 2;
    let delayed = run_prepared(&prepare(&delayed)?)?.client_params;
    Ok(vec![
        Check::new(
            "decoupling/server-absent",
            bits_equal(&attached, &absent),
            format!("{} tensors compared bitwise", attached.len()),
        ),
        Check::new(
            "decoupling/server-delayed",
            bits_equal(&attached, &delayed),
            "server drained only at turn boundaries",
        ),
    ])
}

/// Closed-form per-run byte counts for training activations:
/// (tensor payload, frame bytes without labels, label bytes).
pub fn predicted_activation_bytes(config: &ExperimentConfig) -> Result<(u64, u64, u64), RunError> {
    let prep = prepare(config)?;
    let cut = prep.part.cut_dims();
    let per_sample = cut.iter().product::<usize>() * config.dtype.size_of();
    let (mut tensor, mut frame, mut labels) = (0u64, 0u64, 0u64);
    for (e, k) in prep.turns() {
        for b in prep.client_batches(k, e) {
            let t = (b.len() * per_sample) as u64;
            tensor += t;
            frame += (HEADER_LEN + 2 + 4 * (cut.len() + 1)) as u64 + t;
            labels += 4 + 2 * b.len() as u64;
        }
    }
    Ok((tensor, frame, labels))
}

/// Predicted against measured traffic, and the CSL = 2 x DSL payload law.
pub fn bytes(config: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    let dsl_cfg = with_mode(config, Mode::Dsl);
    let (tensor, fwd, labels) = predicted_activation_bytes(&dsl_cfg)?;
    let dsl = run_prepared(&prepare(&dsl_cfg)?)?;
    let csl = run_prepared(&prepare(&with_mode(config, Mode::Csl))?)?;
    let d = &dsl.client_comm;
    let c = &csl.client_comm;
    let csl_grad = c.get((Direction::Downlink, Phase::Train, Kind::Gradient));
    Ok(vec![
        Check::new(
            "bytes/dsl-predicted",
            d.cut_tensor_bytes() == tensor && d.fwd_bytes() == fwd && d.label_bytes() == labels,
            format!(
                "tensor {} vs {tensor}, forward frames {} vs {fwd}, labels {} vs {labels}",
                d.cut_tensor_bytes(),
                d.fwd_bytes(),
                d.label_bytes()
            ),
        ),
        Check::new("bytes/dsl-no-backward", d.bwd_bytes() == 0, format!("{} backward bytes", d.bwd_bytes())),
        Check::new(
            "bytes/csl-twice-dsl",
            c.cut_tensor_bytes() == 2 * d.cut_tensor_bytes() && csl_grad.tensor_bytes == tensor,
            format!("CSL {} vs DSL {}", c.cut_tensor_bytes(), d.cut_tensor_bytes()),
        ),
        Check::new(
            "bytes/parties-agree",
            dsl.client_comm.cut_tensor_bytes() == dsl.server_comm.cut_tensor_bytes()
                && csl.client_comm.cut_tensor_bytes() == csl.server_comm.cut_tensor_bytes(),
            "client and server ledgers count the same payload",
        ),
    ])
}

/// Hybrid endpoints: λ = 0 against DSL, λ = 1 without L_aux against CSL.
pub fn lambda(config: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    let run = |mode| -> Result<_, RunError> { run_prepared(&prepare(&with_mode(config, mode))?) };
    let dsl = run(Mode::Dsl)?;
    let h0 = run(Mode::hybrid(0.0))?;
    let csl = run(Mode::Csl)?;
    let h1 = run(Mode::Hybrid {
        lambda: 1.0,
        aux_weight: 0.0,
    })?;
    let d1 = max_relative_difference(&csl.client_params, &h1.client_params)
        .max(max_relative_difference(&csl.server_params, &h1.server_params));
    Ok(vec![
        Check::new(
            "lambda/zero-is-dsl",
            bits_equal(&dsl.client_params, &h0.client_params) && bits_equal(&dsl.server_params, &h0.server_params),
            "client and server parameters compared bitwise",
        ),
        Check::new(
            "lambda/one-without-aux-is-csl",
            d1 <= SPLIT_TOLERANCE,
            format!("max relative difference {d1:.3e}"),
        ),
    ])
}
