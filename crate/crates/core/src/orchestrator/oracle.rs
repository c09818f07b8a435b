//! Reference trainers that replay a run's batch schedule without the
//! protocol: the unsplit network, and DSL clients with no server at all.

use super::run::Prepared;
use super::RunError;
use crate::optim::SgdMomentum;
use crate::protocol::ProtocolError;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Final parameters of a reference run, in the same order as the split run
/// reports them.
#[derive(Debug, Clone)]
pub struct OracleParams {
    pub bottom: Vec<Tensor>,
    pub top: Vec<Tensor>,
}

/// Trains the whole network end to end on one tape over the relay schedule.
/// Each relay client keeps its own momentum for the bottom blocks, as the
/// split run does; the top blocks share one optimizer.
pub fn monolithic(prep: &Prepared) -> Result<OracleParams, RunError> {
    let c = &prep.config;
    let split = prep.part.bottom.params().len();
    let mut params: Vec<Tensor> = prep.part.bottom.params().to_vec();
    params.extend(prep.part.top.params().iter().cloned());
    let mut net = prep.net.stack(params)?;
    let mut opt_bottom = (0..c.clients)
        .map(|_| SgdMomentum::new(c.lr, c.momentum))
        .collect::<Result<Vec<_>, _>>()?;
    let mut opt_top = SgdMomentum::new(c.lr, c.momentum)?;
    for (epoch, k) in prep.turns() {
        for idx in prep.client_batches(k, epoch) {
            let (x, y) = prep.shards[k].gather(&idx)?;
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let (logits, vars) = net.forward(&mut tape, xv)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let grads = tape.backward(loss)?.collect(&vars);
            let (gb, gt) = grads.split_at(split);
            let (pb, pt) = net.params_mut().split_at_mut(split);
            opt_top.step(pt, gt)?;
            opt_bottom[k].step(pb, gb)?;
        }
    }
    let mut bottom = net.params().to_vec();
    let top = bottom.split_off(split);
    Ok(OracleParams { bottom, top })
}

/// Runs the DSL client side alone: every step ends in the local update, and
/// activations go nowhere. Returns θ_b followed by θ_a of the last client.
pub fn clients_alone(prep: &Prepared) -> Result<Vec<Tensor>, RunError> {
    if prep.config.mode.sends_gradient() {
        return Err(RunError::Config(format!(
            "clients cannot train alone in {} mode",
            prep.config.mode
        )));
    }
    let mut sessions = (0..prep.config.clients)
        .map(|_| prep.new_client(None))
        .collect::<Result<Vec<_>, _>>()?;
    let mut id = 0u64;
    let mut prev: Option<usize> = None;
    for (epoch, k) in prep.turns() {
        if let Some(p) = prev.filter(|&p| p != k) {
            let (b, a) = sessions[p].export_params();
            sessions[k].import_params(b, a)?;
        }
        for idx in prep.client_batches(k, epoch) {
            let (x, y) = prep.shards[k].gather(&idx)?;
            sessions[k].forward(id, x, y)?;
            id += 1;
            sessions[k].local_update()?;
        }
        // the split run also spends ids on evaluation batches
        if k + 1 == prep.config.clients {
            id += prep.test.len().div_ceil(prep.config.batch_size) as u64;
        }
        prev = Some(k);
    }
    let last = prev.ok_or_else(|| ProtocolError::Violation("empty schedule".into()))?;
    let (mut b, a) = sessions[last].export_params();
    b.extend(a);
    Ok(b)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-12)` across parameter lists.
pub fn max_relative_difference(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len(), "parameter lists differ in length");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.dims(), y.dims(), "parameter dims differ");
            x.to_f64_vec().into_iter().zip(y.to_f64_vec())
        })
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}
