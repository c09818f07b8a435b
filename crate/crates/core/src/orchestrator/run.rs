//! Relay scheduling and the party drivers. The same client and server code
//! runs co-located over a loopback link and across processes over TCP.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use sha2::{Digest, Sha256};

use super::config::{derive_seed, ExperimentConfig};
use super::RunError;
use crate::data::{shards, Batcher, Dataset};
use crate::metrics::comm::{CommLedger, CommSnapshot, Direction, Phase};
use crate::metrics::memory::{MemoryLedger, MemorySnapshot};
use crate::metrics::report::{comm_entries, EpochRow, Party, Report, SCHEMA_VERSION};
use crate::model::{build_network, partition, Network, PartitionedModel, SplitPlan};
use crate::protocol::{ClientSession, ControlCode, Link, Message, Mode, ProtocolError, ServerSession, ServerState};
use crate::tensor::Tensor;
use crate::transport::{loopback_pair, tcp_connect, LinkSimulation, TcpServer, Transport, TransportError};

/// How long a client waits for any single reply.
const REPLY_TIMEOUT: Duration = Duration::from_secs(600);
/// How long a client keeps retrying a refused connection.
const CONNECT_PATIENCE: Duration = Duration::from_secs(20);

/// Everything derived from a config before any party starts.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub net: Network,
    pub cut: usize,
    pub part: PartitionedModel,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    pub arch_hash: u64,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, RunError> {
    config.validate()?;
    let (train, test) = config.dataset.load(derive_seed(config.seed, "data"), config.dtype)?;
    if train.sample_dims() != test.sample_dims() {
        return Err(RunError::Config(format!(
            "train samples {:?} and test samples {:?} differ",
            train.sample_dims(),
            test.sample_dims()
        )));
    }
    if let Some(&bad) = test.labels().iter().find(|&&l| l as usize >= train.classes()) {
        return Err(RunError::Config(format!("test label {bad} unseen among {} classes", train.classes())));
    }
    let net = build_network(config.arch, train.sample_dims(), train.classes(), config.resnet_blocks)?;
    let cut = SplitPlan::new(net.block_count())?.resolve(config.cut)?;
    let params = net.init_params(derive_seed(config.seed, "init"), config.dtype)?;
    let part = partition(&net, params, cut, derive_seed(config.seed, "aux"))?;
    let shards = shards(&train, config.clients, derive_seed(config.seed, "shards"))?;
    let arch_hash = arch_hash(config, &net, cut);
    Ok(Prepared {
        config: config.clone(),
        net,
        cut,
        part,
        shards,
        test,
        arch_hash,
    })
}

/// Identifies everything both parties must agree on: layers, cut, mode, dtype.
pub fn arch_hash(config: &ExperimentConfig, net: &Network, cut: usize) -> u64 {
    let text = format!(
        "{}|{:?}|{:?}|{}|{}|{}|{}",
        net.arch(),
        net.blocks(),
        net.input_dims(),
        net.classes(),
        cut,
        config.mode,
        config.dtype
    );
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn params_sha256(params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for p in params {
        buf.clear();
        buf.push(p.dtype().code());
        for &d in p.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        p.write_le(&mut buf);
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

impl Prepared {
    /// Training batches for client `k` in `epoch`, as shard indices.
    pub fn client_batches(&self, k: usize, epoch: usize) -> Vec<Vec<usize>> {
        let b = Batcher::new(self.config.batch_size, derive_seed(self.config.seed, &format!("batches/{k}")))
            .expect("validated batch size");
        b.epoch_batches(self.shards[k].len(), epoch as u64)
    }

    /// The relay order: every client once per epoch, in index order.
    pub fn turns(&self) -> Vec<(usize, usize)> {
        (0..self.config.epochs)
            .flat_map(|e| (0..self.config.clients).map(move |k| (e, k)))
            .collect()
    }

    pub fn new_client(&self, memory: Option<MemoryLedger>) -> Result<ClientSession, RunError> {
        Ok(ClientSession::new(
            self.config.mode,
            self.part.bottom.clone(),
            self.part.aux.clone(),
            self.config.lr,
            self.config.momentum,
            memory,
        )?)
    }

    pub fn new_server(&self, memory: Option<MemoryLedger>) -> Result<ServerSession, RunError> {
        Ok(ServerSession::new(
            self.config.mode,
            self.part.top.clone(),
            self.config.lr,
            self.config.momentum,
            self.arch_hash,
            memory,
        )?)
    }
}

fn comm_ms(sim: Option<LinkSimulation>, delta: &CommSnapshot, wall: Duration) -> f64 {
    match sim {
        Some(s) => {
            let t = delta.total(|(d, p, _)| *p == Phase::Train && *d != Direction::Relay);
            s.transfer_ms(t.frames, t.frame_bytes)
        }
        None => wall.as_secs_f64() * 1000.0,
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// The server side of a run: handles one message at a time and emits a row
/// whenever an evaluation completes.
pub(crate) struct ServerDriver {
    session: ServerSession,
    memory: MemoryLedger,
    comm: CommLedger,
    sim: Option<LinkSimulation>,
    mode: Mode,
    cut: usize,
    clients: usize,
    arch_hash: u64,
    epoch: u32,
    epoch_peak: u64,
    last_snapshot: CommSnapshot,
    wall: Duration,
    rows: Vec<EpochRow>,
    finished: bool,
}

impl ServerDriver {
    pub(crate) fn new(prep: &Prepared, memory: MemoryLedger) -> Result<Self, RunError> {
        Ok(ServerDriver {
            session: prep.new_server(Some(memory.clone()))?,
            memory,
            comm: CommLedger::new(),
            sim: prep.config.link.simulation(),
            mode: prep.config.mode,
            cut: prep.cut,
            clients: prep.config.clients,
            arch_hash: prep.arch_hash,
            epoch: 0,
            epoch_peak: 0,
            last_snapshot: CommSnapshot::default(),
            wall: Duration::ZERO,
            rows: Vec::new(),
            finished: false,
        })
    }

    fn handle(&mut self, link: &Link, msg: Message) -> Result<(), RunError> {
        let mut hello = None;
        if let Message::Control { code, batch_id } = &msg {
            match code {
                ControlCode::StartEpoch => self.epoch = *batch_id as u32,
                ControlCode::Hello => hello = Some(*batch_id),
                _ => {}
            }
        }
        let window = self.memory.begin_window();
        let action = self.session.handle(msg);
        let peak = self.memory.end_window(window).expect("window opened above");
        self.epoch_peak = self.epoch_peak.max(peak);
        let action = action?;
        if let Some(reply) = &action.reply {
            link.send(reply)?;
        }
        if action.rejected {
            return Err(ProtocolError::Rejected {
                local: self.arch_hash,
                remote: hello.unwrap_or_default(),
            }
            .into());
        }
        if let Some(Message::Control {
            code: ControlCode::EvalResult,
            ..
        }) = &action.reply
        {
            self.emit_row();
        }
        if action.shutdown {
            self.finished = true;
        }
        Ok(())
    }

    fn emit_row(&mut self) {
        let snap = self.comm.snapshot();
        let delta = snap.since(&self.last_snapshot);
        self.last_snapshot = snap;
        let stats = self.session.take_stats();
        let eval = self.session.last_eval();
        let times = self.session.timer_mut().take();
        let wall = std::mem::take(&mut self.wall);
        self.rows.push(EpochRow {
            epoch: self.epoch,
            party: Party::Server,
            mode: self.mode.to_string(),
            cut: self.cut,
            clients: self.clients,
            acc: ratio(eval.correct, eval.samples),
            loss: stats.mean_loss(),
            fwd_bytes: delta.fwd_bytes(),
            bwd_bytes: delta.bwd_bytes(),
            label_bytes: delta.label_bytes(),
            tensor_bytes: delta.cut_tensor_bytes(),
            peak_mem_bytes: std::mem::take(&mut self.epoch_peak),
            t_fwd_ms: times.server_fwd_ms,
            t_bwd_ms: times.server_bwd_ms,
            t_comm_ms: comm_ms(self.sim, &delta, wall),
            train_acc: ratio(stats.correct, stats.samples),
            aux_acc: None,
        });
    }

    /// Handles everything already queued on `link`.
    fn drain(&mut self, link: &Link) -> Result<(), RunError> {
        while let Some(msg) = link.try_recv()? {
            self.handle(link, msg)?;
        }
        Ok(())
    }

    /// Serves one client connection until it closes or asks for shutdown.
    fn serve_connection(&mut self, link: &Link) -> Result<(), RunError> {
        self.session.reset_connection();
        let result = loop {
            match link.recv(None) {
                Ok(msg) => {
                    self.handle(link, msg)?;
                    if self.finished {
                        break Ok(());
                    }
                }
                Err(ProtocolError::Transport(TransportError::Closed)) | Err(ProtocolError::Transport(TransportError::Reset))
                    if matches!(self.session.state(), ServerState::AwaitHello | ServerState::Ready) =>
                {
                    break Ok(())
                }
                Err(e @ ProtocolError::Decode(crate::protocol::DecodeError::Version { .. })) => {
                    let _ = link.send(&Message::control(ControlCode::Reject, self.arch_hash));
                    break Err(e.into());
                }
                Err(e) => break Err(e.into()),
            }
        };
        self.wall += link.take_wall_time();
        result
    }
}

/// Where the client finds its server.
pub(crate) trait ServerPeer {
    fn connect(&mut self, comm: &CommLedger) -> Result<Link, RunError>;
    /// Lets a co-located server catch up on queued messages.
    fn pump(&mut self) -> Result<(), RunError>;
    fn disconnect(&mut self, link: Link) -> Result<(), RunError>;
}

struct CoLocated {
    driver: ServerDriver,
    link: Option<Link>,
}

impl ServerPeer for CoLocated {
    fn connect(&mut self, comm: &CommLedger) -> Result<Link, RunError> {
        let (a, b) = loopback_pair(self.driver.sim);
        self.driver.session.reset_connection();
        self.link = Some(Link::server_side(Box::new(b), self.driver.comm.clone()));
        Ok(Link::client_side(Box::new(a), comm.clone()))
    }

    fn pump(&mut self) -> Result<(), RunError> {
        match &self.link {
            Some(l) => self.driver.drain(l),
            None => Ok(()),
        }
    }

    fn disconnect(&mut self, link: Link) -> Result<(), RunError> {
        self.pump()?;
        drop(link);
        if let Some(l) = self.link.take() {
            self.driver.wall += l.take_wall_time();
        }
        Ok(())
    }
}

struct Remote {
    addr: String,
}

impl ServerPeer for Remote {
    fn connect(&mut self, comm: &CommLedger) -> Result<Link, RunError> {
        let start = Instant::now();
        loop {
            match tcp_connect(&self.addr) {
                Ok(ep) => return Ok(Link::client_side(Box::new(ep), comm.clone())),
                Err(TransportError::ConnectRefused { .. }) if start.elapsed() < CONNECT_PATIENCE => {
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn pump(&mut self) -> Result<(), RunError> {
        Ok(())
    }

    fn disconnect(&mut self, link: Link) -> Result<(), RunError> {
        drop(link);
        Ok(())
    }
}

#[derive(Default)]
struct EpochTally {
    aux_loss_sum: f64,
    aux_batches: u64,
    peak: u64,
}

/// All relay clients of one run, driven in turn.
pub(crate) struct ClientParty<'a> {
    prep: &'a Prepared,
    sessions: Vec<ClientSession>,
    memory: MemoryLedger,
    comm: CommLedger,
    relay_out: Link,
    relay_in: Box<dyn Transport>,
    next_batch_id: u64,
    last_snapshot: CommSnapshot,
    wall: Duration,
    tally: EpochTally,
    rows: Vec<EpochRow>,
    pub(crate) steps_started: u64,
    pub(crate) steps_finished: u64,
    final_client: usize,
}

impl<'a> ClientParty<'a> {
    pub(crate) fn new(prep: &'a Prepared, memory: MemoryLedger) -> Result<Self, RunError> {
        let sessions = (0..prep.config.clients)
            .map(|_| prep.new_client(Some(memory.clone())))
            .collect::<Result<_, _>>()?;
        let comm = CommLedger::new();
        let (out, inn) = loopback_pair(None);
        Ok(ClientParty {
            prep,
            sessions,
            memory,
            relay_out: Link::new(Box::new(out), comm.clone(), Direction::Relay, Direction::Relay),
            relay_in: Box::new(inn),
            comm,
            next_batch_id: 0,
            last_snapshot: CommSnapshot::default(),
            wall: Duration::ZERO,
            tally: EpochTally::default(),
            rows: Vec::new(),
            steps_started: 0,
            steps_finished: 0,
            final_client: 0,
        })
    }

    fn next_id(&mut self) -> u64 {
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        id
    }

    pub(crate) fn run(&mut self, peer: &mut dyn ServerPeer) -> Result<(), RunError> {
        let turns = self.prep.turns();
        for (i, &(epoch, k)) in turns.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| turns[j].1);
            if prev.is_some_and(|p| p != k) {
                let bytes = self.relay_in.recv(Some(REPLY_TIMEOUT))?;
                match crate::protocol::decode(&bytes).map_err(ProtocolError::from)? {
                    Message::Handoff { bottom, aux, .. } => self.sessions[k].import_params(bottom, aux)?,
                    other => {
                        return Err(ProtocolError::Violation(format!("expected ClientModelHandoff, got {}", other.describe())).into())
                    }
                }
            }
            let last_in_epoch = k + 1 == self.prep.config.clients;
            let last_overall = i + 1 == turns.len();
            debug!("epoch {epoch}: client {k} takes its turn");
            let link = peer.connect(&self.comm)?;
            let result = self.turn(peer, &link, epoch, k, last_in_epoch, last_overall);
            self.wall += link.take_wall_time();
            peer.disconnect(link)?;
            result?;
            self.final_client = k;
            if let Some(&(_, next)) = turns.get(i + 1) {
                if next != k {
                    let (bottom, aux) = self.sessions[k].export_params();
                    self.relay_out.send(&Message::Handoff {
                        batch_id: self.next_batch_id.saturating_sub(1),
                        bottom,
                        aux,
                    })?;
                }
            }
        }
        Ok(())
    }

    fn turn(&mut self, peer: &mut dyn ServerPeer, link: &Link, epoch: usize, k: usize, last_in_epoch: bool, last_overall: bool) -> Result<(), RunError> {
        let prep = self.prep;
        link.send(&Message::control(ControlCode::Hello, prep.arch_hash))?;
        peer.pump()?;
        match link.recv(Some(REPLY_TIMEOUT))? {
            Message::Control { code: ControlCode::Ack, .. } => {}
            Message::Control {
                code: ControlCode::Reject,
                batch_id,
            } => {
                return Err(ProtocolError::Rejected {
                    local: prep.arch_hash,
                    remote: batch_id,
                }
                .into())
            }
            other => return Err(ProtocolError::Violation(format!("expected handshake reply, got {}", other.describe())).into()),
        }
        link.send(&Message::control(ControlCode::StartEpoch, epoch as u64))?;
        let mode = prep.config.mode;
        let mut in_flight = 0;
        for idx in prep.client_batches(k, epoch) {
            let (x, y) = prep.shards[k].gather(&idx)?;
            let id = self.next_id();
            let window = self.memory.begin_window();
            let msg = self.sessions[k].forward(id, x, y)?;
            self.steps_started += 1;
            let sent = link.send(&msg);
            drop(msg);
            let outcome = if mode.sends_gradient() {
                sent?;
                peer.pump()?;
                let reply = link.recv(Some(REPLY_TIMEOUT))?;
                self.sessions[k].apply_gradient(reply)?
            } else {
                // the local update never depends on the server, so it runs
                // even when the send failed
                let outcome = self.sessions[k].local_update()?;
                self.steps_finished += 1;
                self.tally.peak = self.tally.peak.max(self.memory.end_window(window).expect("window opened above"));
                sent?;
                in_flight += 1;
                if in_flight >= prep.config.window {
                    peer.pump()?;
                    in_flight = 0;
                }
                if let Some(l) = outcome.aux_loss {
                    self.tally.aux_loss_sum += l;
                    self.tally.aux_batches += 1;
                }
                continue;
            };
            self.steps_finished += 1;
            self.tally.peak = self.tally.peak.max(self.memory.end_window(window).expect("window opened above"));
            if let Some(l) = outcome.aux_loss {
                self.tally.aux_loss_sum += l;
                self.tally.aux_batches += 1;
            }
        }
        link.send(&Message::control(ControlCode::EndEpoch, epoch as u64))?;
        peer.pump()?;
        if last_in_epoch {
            self.evaluate(peer, link, epoch, k)?;
        }
        if last_overall {
            link.send(&Message::control(ControlCode::Shutdown, 0))?;
            peer.pump()?;
        }
        Ok(())
    }

    fn evaluate(&mut self, peer: &mut dyn ServerPeer, link: &Link, epoch: usize, k: usize) -> Result<(), RunError> {
        let prep = self.prep;
        link.send(&Message::control(ControlCode::EvalBegin, epoch as u64))?;
        let n = prep.test.len();
        let mut aux_hits = 0usize;
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + prep.config.batch_size).min(n)).collect();
            start += idx.len();
            let (x, y) = prep.test.gather(&idx)?;
            let (z, hits) = self.sessions[k].eval_forward(x, &y)?;
            aux_hits += hits.unwrap_or(0);
            let id = self.next_id();
            link.send(&Message::Activation { batch_id: id, z, labels: y })?;
            peer.pump()?;
        }
        link.send(&Message::control(ControlCode::EvalEnd, epoch as u64))?;
        peer.pump()?;
        let correct = match link.recv(Some(REPLY_TIMEOUT))? {
            Message::Control {
                code: ControlCode::EvalResult,
                batch_id,
            } => batch_id,
            other => return Err(ProtocolError::Violation(format!("expected evaluation result, got {}", other.describe())).into()),
        };
        let snap = self.comm.snapshot();
        let delta = snap.since(&self.last_snapshot);
        self.last_snapshot = snap;
        let (mut fwd, mut bwd) = (0.0, 0.0);
        for s in &mut self.sessions {
            let t = s.timer_mut().take();
            fwd += t.client_fwd_ms;
            bwd += t.client_bwd_ms;
        }
        self.wall += link.take_wall_time();
        let wall = std::mem::take(&mut self.wall);
        let tally = std::mem::take(&mut self.tally);
        let config = &prep.config;
        info!("epoch {epoch}: test accuracy {correct}/{n}");
        self.rows.push(EpochRow {
            epoch: epoch as u32,
            party: Party::Client,
            mode: config.mode.to_string(),
            cut: prep.cut,
            clients: config.clients,
            acc: ratio(correct, n as u64),
            loss: (tally.aux_batches > 0).then(|| tally.aux_loss_sum / tally.aux_batches as f64),
            fwd_bytes: delta.fwd_bytes(),
            bwd_bytes: delta.bwd_bytes(),
            label_bytes: delta.label_bytes(),
            tensor_bytes: delta.cut_tensor_bytes(),
            peak_mem_bytes: tally.peak,
            t_fwd_ms: fwd,
            t_bwd_ms: bwd,
            t_comm_ms: comm_ms(config.link.simulation(), &delta, wall),
            train_acc: None,
            aux_acc: config.mode.uses_aux().then(|| aux_hits as f64 / n as f64),
        });
        Ok(())
    }

    /// θ_b followed by θ_a of the client holding the latest relay state.
    pub(crate) fn final_params(&self) -> Vec<Tensor> {
        let (mut b, a) = self.sessions[self.final_client].export_params();
        b.extend(a);
        b
    }
}

/// Outputs of an in-process run beyond the report.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: Report,
    /// θ_b then θ_a of the last relay client.
    pub client_params: Vec<Tensor>,
    pub server_params: Vec<Tensor>,
    pub client_comm: CommSnapshot,
    pub server_comm: CommSnapshot,
    pub memory: MemorySnapshot,
    pub steps_started: u64,
    pub steps_finished: u64,
}

fn sorted_rows(mut rows: Vec<EpochRow>) -> Vec<EpochRow> {
    rows.sort_by_key(|r| (r.epoch, r.party == Party::Server));
    rows
}

fn base_report(config: &ExperimentConfig) -> Report {
    Report {
        schema_version: SCHEMA_VERSION,
        config: config.canonical(),
        config_sha256: config.sha256(),
        complete: true,
        failure: None,
        rows: Vec::new(),
        client_comm: Vec::new(),
        server_comm: Vec::new(),
        client_params_sha256: None,
        server_params_sha256: None,
        client_steps_started: 0,
        client_steps_finished: 0,
    }
}

/// Runs the whole experiment in this process over a loopback link, with both
/// parties sharing one memory ledger.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts, RunError> {
    let prep = prepare(config)?;
    run_prepared(&prep)
}

pub fn run_prepared(prep: &Prepared) -> Result<RunArtifacts, RunError> {
    let c = &prep.config;
    info!("{} run: {:?} cut {}, {} clients, {} epochs", c.mode, c.arch, prep.cut, c.clients, c.epochs);
    let memory = MemoryLedger::new();
    let mut party = ClientParty::new(prep, memory.clone())?;
    let mut peer = CoLocated {
        driver: ServerDriver::new(prep, memory.clone())?,
        link: None,
    };
    let result = party.run(&mut peer);
    let client_params = party.final_params();
    let server_params = peer.driver.session.top().params().to_vec();
    let client_comm = party.comm.snapshot();
    let server_comm = peer.driver.comm.snapshot();
    let mut report = base_report(&prep.config);
    let mut rows = std::mem::take(&mut party.rows);
    rows.extend(std::mem::take(&mut peer.driver.rows));
    report.rows = sorted_rows(rows);
    report.client_comm = comm_entries(&client_comm);
    report.server_comm = comm_entries(&server_comm);
    report.client_params_sha256 = Some(params_sha256(&client_params));
    report.server_params_sha256 = Some(params_sha256(&server_params));
    report.client_steps_started = party.steps_started;
    report.client_steps_finished = party.steps_finished;
    let artifacts = RunArtifacts {
        steps_started: party.steps_started,
        steps_finished: party.steps_finished,
        report,
        client_params,
        server_params,
        client_comm,
        server_comm,
        memory: memory.snapshot(),
    };
    match result {
        Ok(()) => Ok(artifacts),
        Err(e) => Err(incomplete(artifacts.report, e)),
    }
}

fn incomplete(mut report: Report, cause: RunError) -> RunError {
    report.complete = false;
    report.failure = Some(cause.to_string());
    RunError::Incomplete {
        report: Box::new(report),
        source: Box::new(cause),
    }
}

/// Client process of a two-process run.
pub fn run_client(config: &ExperimentConfig, addr: &str) -> Result<Report, RunError> {
    let prep = prepare(config)?;
    let mut party = ClientParty::new(&prep, MemoryLedger::new())?;
    let mut peer = Remote { addr: addr.to_string() };
    let result = party.run(&mut peer);
    let mut report = base_report(config);
    report.rows = sorted_rows(std::mem::take(&mut party.rows));
    report.client_comm = comm_entries(&party.comm.snapshot());
    report.client_params_sha256 = Some(params_sha256(&party.final_params()));
    report.client_steps_started = party.steps_started;
    report.client_steps_finished = party.steps_finished;
    match result {
        Ok(()) => Ok(report),
        Err(e) if e.is_rejection() => Err(e),
        Err(e) => Err(incomplete(report, e)),
    }
}

/// Server process of a two-process run. Accepts relay clients one connection
/// at a time until a client sends shutdown. `on_bound` sees the bound address.
pub fn serve(config: &ExperimentConfig, listen: &str, on_bound: impl FnOnce(SocketAddr)) -> Result<Report, RunError> {
    let prep = prepare(config)?;
    let server = TcpServer::bind(listen)?;
    on_bound(server.local_addr()?);
    let mut driver = ServerDriver::new(&prep, MemoryLedger::new())?;
    let result = loop {
        let ep = match server.accept() {
            Ok(ep) => ep,
            Err(e) => break Err(e.into()),
        };
        let link = Link::server_side(Box::new(ep), driver.comm.clone());
        debug!("client connected");
        if let Err(e) = driver.serve_connection(&link) {
            warn!("connection ended with an error: {e}");
            break Err(e);
        }
        if driver.finished {
            break Ok(());
        }
    };
    let mut report = base_report(config);
    report.rows = sorted_rows(std::mem::take(&mut driver.rows));
    report.server_comm = comm_entries(&driver.comm.snapshot());
    report.server_params_sha256 = Some(params_sha256(driver.session.top().params()));
    match result {
        Ok(()) => Ok(report),
        Err(e) if e.is_rejection() => Err(e),
        Err(e) => Err(incomplete(report, e)),
    }
}
