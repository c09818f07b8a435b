use super::{ControlCode, Message, Mode, ProtocolError};
use crate::metrics::memory::MemoryLedger;
use crate::metrics::timer::{PhaseTimer, TimedPhase};
use crate::model::{client_forward, server_forward, ClientForward, Stack};
use crate::optim::SgdMomentum;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

fn argmax_hits(logits: &Tensor, labels: &[u16]) -> usize {
    let classes = logits.dims()[1];
    logits
        .to_f64_vec()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y as usize
        })
        .count()
}

fn fill_missing(grads: Vec<Option<Tensor>>, params: &[Tensor]) -> Vec<Option<Tensor>> {
    grads
        .into_iter()
        .zip(params)
        .map(|(g, p)| Some(g.unwrap_or_else(|| p.zeros_like())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Idle,
    /// DSL: activation handed off, local update pending.
    SentActivation { batch_id: u64 },
    /// CSL/hybrid: tape held until the matching gradient arrives.
    AwaitGradient { batch_id: u64 },
}

/// What one client step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub batch_id: u64,
    pub aux_loss: Option<f64>,
    pub aux_correct: Option<usize>,
}

struct Pending {
    tape: Tape,
    fwd: ClientForward,
    labels: Vec<u16>,
}

/// Owns θ_b and θ_a with their optimizers. Each step is one forward followed
/// by either a local update (DSL) or a gradient-driven update (CSL/hybrid).
pub struct ClientSession {
    mode: Mode,
    bottom: Stack,
    aux: Stack,
    opt_bottom: SgdMomentum,
    opt_aux: SgdMomentum,
    state: ClientState,
    pending: Option<Pending>,
    last_batch_id: Option<u64>,
    ledger: Option<MemoryLedger>,
    timer: PhaseTimer,
}

impl ClientSession {
    pub fn new(mode: Mode, bottom: Stack, aux: Stack, lr: f64, momentum: f64, ledger: Option<MemoryLedger>) -> Result<Self, ProtocolError> {
        Ok(ClientSession {
            mode,
            bottom,
            aux,
            opt_bottom: SgdMomentum::new(lr, momentum)?,
            opt_aux: SgdMomentum::new(lr, momentum)?,
            state: ClientState::Idle,
            pending: None,
            last_batch_id: None,
            ledger,
            timer: PhaseTimer::new(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn bottom(&self) -> &Stack {
        &self.bottom
    }

    pub fn aux(&self) -> &Stack {
        &self.aux
    }

    pub fn timer_mut(&mut self) -> &mut PhaseTimer {
        &mut self.timer
    }

    fn illegal(&self, event: &str) -> ProtocolError {
        ProtocolError::IllegalTransition {
            state: format!("{:?}", self.state),
            event: event.to_string(),
        }
    }

    fn new_tape(&self) -> Tape {
        match &self.ledger {
            Some(l) => Tape::with_ledger(l.clone(), "client"),
            None => Tape::new(),
        }
    }

    /// Runs M_b (and C_a when the mode uses it) and returns the activation
    /// message to send. The tape stays alive until the step completes.
    pub fn forward(&mut self, batch_id: u64, x: Tensor, labels: Vec<u16>) -> Result<Message, ProtocolError> {
        if self.state != ClientState::Idle {
            return Err(self.illegal(&format!("forward of batch {batch_id}")));
        }
        if let Some(last) = self.last_batch_id {
            if batch_id <= last {
                return Err(ProtocolError::BatchOrder { last, got: batch_id });
            }
        }
        if x.dims()[0] != labels.len() {
            return Err(ProtocolError::Violation(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x.dims()[0]
            )));
        }
        let mut tape = self.new_tape();
        let (bottom, aux, mode) = (&self.bottom, &self.aux, self.mode);
        let fwd = self
            .timer
            .time(TimedPhase::ClientFwd, || client_forward(bottom, mode.uses_aux().then_some(aux), &mut tape, x))?;
        let z = tape.value(fwd.z).clone();
        self.pending = Some(Pending {
            tape,
            fwd,
            labels: labels.clone(),
        });
        self.last_batch_id = Some(batch_id);
        self.state = if self.mode.sends_gradient() {
            ClientState::AwaitGradient { batch_id }
        } else {
            ClientState::SentActivation { batch_id }
        };
        Ok(Message::Activation { batch_id, z, labels })
    }

    fn aux_loss(&mut self, p: &mut Pending) -> Result<(Var, f64, usize), TensorError> {
        let (logits, _) = p.fwd.aux.as_ref().expect("aux head recorded for this mode");
        let logits = *logits;
        let labels = &p.labels;
        let tape = &mut p.tape;
        self.timer.time(TimedPhase::ClientFwd, || {
            let loss = tape.softmax_cross_entropy(logits, labels)?;
            let value = tape.value(loss).to_f64_vec()[0];
            Ok((loss, value, argmax_hits(tape.value(logits), labels)))
        })
    }

    /// DSL only: L_aux, local backward, and the θ_b/θ_a update. The tape is
    /// released here, before anything is heard from the server.
    pub fn local_update(&mut self) -> Result<BatchOutcome, ProtocolError> {
        let ClientState::SentActivation { batch_id } = self.state else {
            return Err(self.illegal("local update"));
        };
        let mut p = self.pending.take().expect("pending step in SentActivation");
        let (loss, value, hits) = self.aux_loss(&mut p)?;
        let seeds = vec![(loss, Tensor::full(&[1], 1.0, p.tape.value(loss).dtype())?)];
        self.update(&mut p, seeds)?;
        drop(p);
        self.state = ClientState::Idle;
        Ok(BatchOutcome {
            batch_id,
            aux_loss: Some(value),
            aux_correct: Some(hits),
        })
    }

    /// CSL/hybrid: resumes the held tape from the received ∂L/∂z.
    pub fn apply_gradient(&mut self, msg: Message) -> Result<BatchOutcome, ProtocolError> {
        let Message::Gradient { batch_id, dz } = msg else {
            return Err(ProtocolError::Violation(format!("expected GradientBatch, got {}", msg.describe())));
        };
        if !self.mode.sends_gradient() {
            return Err(ProtocolError::Violation(format!(
                "GradientBatch#{batch_id} delivered to a DSL client"
            )));
        }
        let ClientState::AwaitGradient { batch_id: expected } = self.state else {
            return Err(self.illegal(&format!("GradientBatch#{batch_id}")));
        };
        if batch_id != expected {
            return Err(ProtocolError::Violation(format!(
                "GradientBatch#{batch_id} while awaiting #{expected}"
            )));
        }
        let mut p = self.pending.take().expect("pending step in AwaitGradient");
        let z_value = p.tape.value(p.fwd.z);
        if dz.dims() != z_value.dims() || dz.dtype() != z_value.dtype() {
            let expected = z_value.dims().to_vec();
            self.pending = Some(p);
            return Err(ProtocolError::DimMismatch {
                what: "gradient",
                expected,
                got: dz.dims().to_vec(),
            });
        }
        let mut seeds = Vec::new();
        let mut outcome = BatchOutcome {
            batch_id,
            aux_loss: None,
            aux_correct: None,
        };
        match self.mode {
            Mode::Csl => seeds.push((p.fwd.z, dz)),
            Mode::Hybrid { lambda, aux_weight } => {
                let (loss, value, hits) = self.aux_loss(&mut p)?;
                outcome.aux_loss = Some(value);
                outcome.aux_correct = Some(hits);
                if lambda != 0.0 {
                    let scaled = if lambda == 1.0 { dz } else { scale(&dz, lambda)? };
                    seeds.push((p.fwd.z, scaled));
                }
                if aux_weight != 0.0 {
                    seeds.push((loss, Tensor::full(&[1], aux_weight, dz_dtype(&p))?));
                }
            }
            Mode::Dsl => unreachable!("rejected above"),
        }
        self.update(&mut p, seeds)?;
        drop(p);
        self.state = ClientState::Idle;
        Ok(outcome)
    }

    fn update(&mut self, p: &mut Pending, seeds: Vec<(Var, Tensor)>) -> Result<(), TensorError> {
        let (bottom, aux) = (&mut self.bottom, &mut self.aux);
        let (opt_b, opt_a) = (&mut self.opt_bottom, &mut self.opt_aux);
        let tape = &p.tape;
        let fwd = &p.fwd;
        self.timer.time(TimedPhase::ClientBwd, || {
            let mut grads = if seeds.is_empty() {
                None
            } else {
                Some(tape.backward_seeded(seeds)?)
            };
            let mut collect = |vars: &[Var], params: &[Tensor]| match grads.as_mut() {
                Some(g) => fill_missing(g.collect(vars), params),
                None => params.iter().map(|p| Some(p.zeros_like())).collect(),
            };
            let gb = collect(&fwd.bottom_params, bottom.params());
            let ga = fwd.aux.as_ref().map(|(_, vars)| collect(vars, aux.params()));
            opt_b.step(bottom.params_mut(), &gb)?;
            if let Some(ga) = ga {
                opt_a.step(aux.params_mut(), &ga)?;
            }
            Ok(())
        })
    }

    /// Test-time forward through M_b, plus C_a's hit count when the mode has
    /// a trained head. Nothing is ledgered.
    pub fn eval_forward(&self, x: Tensor, labels: &[u16]) -> Result<(Tensor, Option<usize>), ProtocolError> {
        if self.state != ClientState::Idle {
            return Err(self.illegal("evaluation"));
        }
        let mut tape = Tape::new();
        let fwd = client_forward(&self.bottom, self.mode.uses_aux().then_some(&self.aux), &mut tape, x)?;
        let hits = fwd.aux.as_ref().map(|(logits, _)| argmax_hits(tape.value(*logits), labels));
        Ok((tape.value(fwd.z).clone(), hits))
    }

    /// Parameters to hand to the next client in the relay.
    pub fn export_params(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        (self.bottom.params().to_vec(), self.aux.params().to_vec())
    }

    pub fn import_params(&mut self, bottom: Vec<Tensor>, aux: Vec<Tensor>) -> Result<(), ProtocolError> {
        if self.state != ClientState::Idle {
            return Err(self.illegal("parameter handoff"));
        }
        self.bottom.set_params(bottom)?;
        self.aux.set_params(aux)?;
        Ok(())
    }

    /// Carries the batch counter across relay clients.
    pub fn last_batch_id(&self) -> Option<u64> {
        self.last_batch_id
    }

    pub fn resume_batch_ids_after(&mut self, last: Option<u64>) {
        self.last_batch_id = last;
    }
}

fn dz_dtype(p: &Pending) -> crate::tensor::DType {
    p.tape.value(p.fwd.z).dtype()
}

fn scale(t: &Tensor, k: f64) -> Result<Tensor, TensorError> {
    let v: Vec<f64> = t.to_f64_vec().iter().map(|x| x * k).collect();
    Tensor::from_values(t.dims(), &v, t.dtype())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerState {
    AwaitHello,
    Ready,
    Training,
    Evaluating,
}

/// What the driver should do after a message was handled.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerAction {
    pub reply: Option<Message>,
    /// The peer asked to end the run.
    pub shutdown: bool,
    /// The handshake failed; the reply carries the rejection.
    pub rejected: bool,
}

impl ServerAction {
    fn reply(msg: Option<Message>) -> Self {
        ServerAction {
            reply: msg,
            shutdown: false,
            rejected: false,
        }
    }
}

/// Per-epoch training tallies on the server.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ServerStats {
    pub batches: u64,
    pub samples: u64,
    pub loss_sum: f64,
    pub correct: u64,
}

impl ServerStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.batches > 0).then(|| self.loss_sum / self.batches as f64)
    }
}

/// Result of one evaluation pass as seen by the server.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOutcome {
    pub samples: u64,
    pub correct: u64,
}

/// Owns θ_t and its optimizer. Driven one incoming message at a time.
pub struct ServerSession {
    mode: Mode,
    top: Stack,
    opt: SgdMomentum,
    arch_hash: u64,
    state: ServerState,
    last_batch_id: Option<u64>,
    ledger: Option<MemoryLedger>,
    timer: PhaseTimer,
    stats: ServerStats,
    eval: EvalOutcome,
}

impl ServerSession {
    pub fn new(mode: Mode, top: Stack, lr: f64, momentum: f64, arch_hash: u64, ledger: Option<MemoryLedger>) -> Result<Self, ProtocolError> {
        Ok(ServerSession {
            mode,
            top,
            opt: SgdMomentum::new(lr, momentum)?,
            arch_hash,
            state: ServerState::AwaitHello,
            last_batch_id: None,
            ledger,
            timer: PhaseTimer::new(),
            stats: ServerStats::default(),
            eval: EvalOutcome::default(),
        })
    }

    pub fn state(&self) -> ServerState {
        self.state
    }

    pub fn top(&self) -> &Stack {
        &self.top
    }

    pub fn timer_mut(&mut self) -> &mut PhaseTimer {
        &mut self.timer
    }

    pub fn take_stats(&mut self) -> ServerStats {
        std::mem::take(&mut self.stats)
    }

    pub fn last_eval(&self) -> EvalOutcome {
        self.eval
    }

    /// A new connection must handshake again.
    pub fn reset_connection(&mut self) {
        self.state = ServerState::AwaitHello;
    }

    fn illegal(&self, msg: &Message) -> ProtocolError {
        ProtocolError::IllegalTransition {
            state: format!("{:?}", self.state),
            event: msg.describe(),
        }
    }

    pub fn handle(&mut self, msg: Message) -> Result<ServerAction, ProtocolError> {
        use ControlCode::*;
        match (self.state, &msg) {
            (ServerState::AwaitHello, Message::Control { code: Hello, batch_id }) => {
                if *batch_id == self.arch_hash {
                    self.state = ServerState::Ready;
                    Ok(ServerAction::reply(Some(Message::control(Ack, 0))))
                } else {
                    Ok(ServerAction {
                        reply: Some(Message::control(Reject, self.arch_hash)),
                        shutdown: false,
                        rejected: true,
                    })
                }
            }
            (ServerState::AwaitHello, _) => Err(self.illegal(&msg)),
            (_, Message::Control { code: Shutdown, .. }) => Ok(ServerAction {
                reply: None,
                shutdown: true,
                rejected: false,
            }),
            (ServerState::Ready, Message::Control { code: StartEpoch, .. }) => {
                self.state = ServerState::Training;
                Ok(ServerAction::reply(None))
            }
            (ServerState::Training, Message::Control { code: EndEpoch, .. }) => {
                self.state = ServerState::Ready;
                Ok(ServerAction::reply(None))
            }
            (ServerState::Ready, Message::Control { code: EvalBegin, .. }) => {
                self.state = ServerState::Evaluating;
                self.eval = EvalOutcome::default();
                Ok(ServerAction::reply(None))
            }
            (ServerState::Evaluating, Message::Control { code: EvalEnd, .. }) => {
                self.state = ServerState::Ready;
                Ok(ServerAction::reply(Some(Message::control(EvalResult, self.eval.correct))))
            }
            (ServerState::Training, Message::Activation { .. }) => {
                let Message::Activation { batch_id, z, labels } = msg else { unreachable!() };
                self.check_activation(batch_id, &z)?;
                let reply = self.train_step(batch_id, z, &labels)?;
                Ok(ServerAction::reply(reply))
            }
            (ServerState::Evaluating, Message::Activation { .. }) => {
                let Message::Activation { batch_id, z, labels } = msg else { unreachable!() };
                self.check_activation(batch_id, &z)?;
                let mut tape = Tape::new();
                let fwd = server_forward(&self.top, &mut tape, z)?;
                self.eval.correct += argmax_hits(tape.value(fwd.logits), &labels) as u64;
                self.eval.samples += labels.len() as u64;
                Ok(ServerAction::reply(None))
            }
            (_, Message::Gradient { .. }) | (_, Message::Handoff { .. }) => Err(ProtocolError::Violation(format!(
                "server cannot accept {}",
                msg.describe()
            ))),
            _ => Err(self.illegal(&msg)),
        }
    }

    fn check_activation(&mut self, batch_id: u64, z: &Tensor) -> Result<(), ProtocolError> {
        if let Some(last) = self.last_batch_id {
            if batch_id <= last {
                return Err(ProtocolError::BatchOrder { last, got: batch_id });
            }
        }
        let dims = z.dims();
        if dims.len() < 2 || dims[1..] != *self.top.input_dims() {
            let mut expected = vec![dims[0]];
            expected.extend_from_slice(self.top.input_dims());
            return Err(ProtocolError::DimMismatch {
                what: "activation",
                expected,
                got: dims.to_vec(),
            });
        }
        self.last_batch_id = Some(batch_id);
        Ok(())
    }

    fn train_step(&mut self, batch_id: u64, z: Tensor, labels: &[u16]) -> Result<Option<Message>, ProtocolError> {
        let mut tape = match &self.ledger {
            Some(l) => Tape::with_ledger(l.clone(), "server"),
            None => Tape::new(),
        };
        let top = &self.top;
        let (fwd, loss, value, hits) = self.timer.time(TimedPhase::ServerFwd, || -> Result<_, TensorError> {
            let fwd = server_forward(top, &mut tape, z)?;
            let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
            let value = tape.value(loss).to_f64_vec()[0];
            let hits = argmax_hits(tape.value(fwd.logits), labels);
            Ok((fwd, loss, value, hits))
        })?;
        let (top, opt) = (&mut self.top, &mut self.opt);
        let dz = self.timer.time(TimedPhase::ServerBwd, || -> Result<_, TensorError> {
            let mut grads = tape.backward(loss)?;
            let g = fill_missing(grads.collect(&fwd.params), top.params());
            opt.step(top.params_mut(), &g)?;
            Ok(grads.take(fwd.z))
        })?;
        drop(tape);
        self.stats.batches += 1;
        self.stats.samples += labels.len() as u64;
        self.stats.loss_sum += value;
        self.stats.correct += hits as u64;
        if self.mode.sends_gradient() {
            let dz = dz.ok_or_else(|| TensorError::Contract("no gradient reached the cut activation".into()))?;
            Ok(Some(Message::Gradient { batch_id, dz }))
        } else {
            Ok(None)
        }
    }
}
