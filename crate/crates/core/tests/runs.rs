use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use splitwire::metrics::comm::{CommLedger, Direction, Kind, Phase};
use splitwire::metrics::report::{Party, Report, TIME_COLUMNS};
use splitwire::orchestrator::compare::{compare, Comparison};
use splitwire::orchestrator::{prepare, run_client, run_experiment, serve, DatasetSpec, ExperimentConfig, RunError};
use splitwire::model::{Arch, CutSpec};
use splitwire::protocol::{ControlCode, Link, Message, Mode};
use splitwire::transport::TcpServer;

fn blobs(mode: Mode, clients: usize, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        arch: Arch::Mlp,
        clients,
        epochs,
        batch_size: 32,
        seed: 3,
        dataset: DatasetSpec::Blobs {
            train: 1000,
            test: 200,
            dims: vec![16],
            classes: 10,
            spread: 0.5,
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn ten_client_relay_hands_off_nine_times_per_epoch() {
    let a = run_experiment(&blobs(Mode::Dsl, 10, 1)).unwrap();
    let h = a.client_comm.get((Direction::Relay, Phase::Train, Kind::Handoff));
    assert_eq!(h.frames, 9);
    let a = run_experiment(&blobs(Mode::Dsl, 1, 2)).unwrap();
    assert_eq!(a.client_comm.get((Direction::Relay, Phase::Train, Kind::Handoff)).frames, 0);
}

#[test]
fn every_sample_is_trained_once_per_epoch_for_any_client_count() {
    for n in [1, 3, 7] {
        let config = blobs(Mode::Csl, n, 2);
        let a = run_experiment(&config).unwrap();
        let up = a.server_comm.get((Direction::Uplink, Phase::Train, Kind::Activation));
        let samples = (up.label_bytes - 4 * up.frames) / 2;
        assert_eq!(samples, 2 * 1000, "N={n}");
        let prep = prepare(&config).unwrap();
        for e in 0..2 {
            let mut seen: Vec<_> = (0..n)
                .flat_map(|k| prep.client_batches(k, e).into_iter().flatten().map(move |i| (k, i)))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 1000);
        }
    }
}

#[test]
fn batch_order_does_not_depend_on_mode() {
    let a = prepare(&blobs(Mode::Csl, 3, 2)).unwrap();
    let b = prepare(&blobs(Mode::Dsl, 3, 2)).unwrap();
    for (e, k) in a.turns() {
        assert_eq!(a.client_batches(k, e), b.client_batches(k, e));
    }
}

fn masked_csv(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            l.split(',')
                .zip(&header)
                .map(|(v, h)| if TIME_COLUMNS.contains(h) { String::new() } else { v.to_string() })
                .collect()
        })
        .collect()
}

#[test]
fn equal_seeds_give_equal_reports_apart_from_time() {
    for mode in [Mode::Csl, Mode::Dsl, Mode::hybrid(0.5)] {
        let config = blobs(mode, 2, 2);
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(masked_csv(&a.report.to_csv()), masked_csv(&b.report.to_csv()));
        assert_eq!(a.report.client_params_sha256, b.report.client_params_sha256);
        assert_eq!(a.report.server_params_sha256, b.report.server_params_sha256);
        assert_eq!(a.report.client_comm, b.report.client_comm);
    }
}

#[test]
fn separable_blobs_are_learned_in_dsl() {
    let mut config = blobs(Mode::Dsl, 1, 5);
    config.lr = 0.01;
    let r = run_experiment(&config).unwrap().report;
    let last = r.final_row(Party::Server).unwrap();
    let train_acc = last.train_acc.unwrap();
    assert!(train_acc >= 0.99, "train accuracy {train_acc}");
}

#[test]
fn csl_and_dsl_curves_stay_close_on_blobs() {
    let mut csl = blobs(Mode::Csl, 1, 5);
    csl.lr = 0.01;
    let dsl = ExperimentConfig { mode: Mode::Dsl, ..csl.clone() };
    let a = run_experiment(&csl).unwrap().report;
    let b = run_experiment(&dsl).unwrap().report;
    for (x, y) in a.rows_for(Party::Client).zip(b.rows_for(Party::Client)) {
        let gap = (x.acc.unwrap() - y.acc.unwrap()).abs();
        assert!(gap <= 0.03, "epoch {}: {} vs {}", x.epoch, x.acc.unwrap(), y.acc.unwrap());
    }
}

#[test]
fn runs_release_every_ledgered_activation() {
    for mode in [Mode::Csl, Mode::Dsl, Mode::hybrid(1.0)] {
        let a = run_experiment(&blobs(mode, 2, 1)).unwrap();
        assert_eq!(a.memory.live, 0, "{mode}");
        assert!(a.memory.peak > 0);
    }
}

#[test]
fn hybrid_traffic_equals_csl_traffic() {
    let c = run_experiment(&blobs(Mode::Csl, 2, 1)).unwrap();
    let h = run_experiment(&blobs(Mode::hybrid(0.3), 2, 1)).unwrap();
    assert_eq!(c.client_comm, h.client_comm);
}

#[test]
fn compare_reports_payload_and_memory_ratios() {
    let base = blobs(Mode::Csl, 1, 1);
    let dsl = ExperimentConfig { mode: Mode::Dsl, ..base.clone() };
    let t = compare(vec!["csl".into(), "dsl".into()], &[base.clone(), dsl.clone()]).unwrap();
    assert_eq!(t.rows[1].comm_ratio, Some(2.0));
    assert!(t.to_csv().starts_with("label,mode,cut,clients,final_acc"));

    let s = ExperimentConfig { cut: CutSpec::Shallow, ..dsl.clone() };
    let d = ExperimentConfig { cut: CutSpec::Deep, ..dsl.clone() };
    let t = compare(vec!["s".into(), "d".into()], &[s, d]).unwrap();
    let r = t.rows[1].peak_mem_ratio.unwrap();
    assert!(r < 1.0, "peak(s)/peak(d) = {r}");

    let err = compare(vec!["one".into()], &[base.clone()]).unwrap_err();
    assert_eq!(err.to_string(), "config error: need ≥2 configs");
    assert!(Comparison::from_reports(vec![], &[]).is_err());

    let other = ExperimentConfig { seed: 99, ..base.clone() };
    assert!(matches!(compare(vec!["a".into(), "b".into()], &[base, other]), Err(RunError::Config(_))));
}

fn spawn_server(config: ExperimentConfig) -> (String, thread::JoinHandle<Result<Report, RunError>>) {
    let (tx, rx) = mpsc::channel();
    let h = thread::spawn(move || serve(&config, "127.0.0.1:0", |a| tx.send(a.to_string()).unwrap()));
    (rx.recv_timeout(Duration::from_secs(30)).unwrap(), h)
}

#[test]
fn tcp_run_matches_loopback_run() {
    for mode in [Mode::Csl, Mode::Dsl] {
        let config = blobs(mode, 3, 2);
        let local = run_experiment(&config).unwrap();
        let (addr, h) = spawn_server(config.clone());
        let client = run_client(&config, &addr).unwrap();
        let server = h.join().unwrap().unwrap();
        assert_eq!(client.client_params_sha256, local.report.client_params_sha256);
        assert_eq!(server.server_params_sha256, local.report.server_params_sha256);
        assert_eq!(client.client_comm, local.report.client_comm);
        assert_eq!(server.server_comm, local.report.server_comm);
        let acc = |r: &Report, p| r.rows_for(p).map(|x| (x.acc, x.fwd_bytes, x.bwd_bytes)).collect::<Vec<_>>();
        assert_eq!(acc(&client, Party::Client), acc(&local.report, Party::Client));
        assert_eq!(acc(&server, Party::Server), acc(&local.report, Party::Server));
    }
}

#[test]
fn mismatched_architectures_are_rejected_by_hash() {
    let server_cfg = blobs(Mode::Dsl, 1, 1);
    let client_cfg = ExperimentConfig { cut: CutSpec::Shallow, ..server_cfg.clone() };
    let (addr, h) = spawn_server(server_cfg);
    let err = run_client(&client_cfg, &addr).unwrap_err();
    assert!(err.is_rejection(), "{err}");
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    let server_err = h.join().unwrap().unwrap_err();
    assert!(server_err.is_rejection());
    let hashes: Vec<&str> = msg.split(|c: char| !c.is_ascii_hexdigit()).filter(|w| w.len() >= 8).collect();
    assert!(hashes.len() >= 2, "{msg}");
}

#[test]
fn dsl_client_finishes_local_updates_when_server_dies() {
    let config = blobs(Mode::Dsl, 1, 3);
    let arch = prepare(&config).unwrap().arch_hash;
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let h = thread::spawn(move || {
        let link = Link::server_side(Box::new(server.accept().unwrap()), CommLedger::new());
        assert_eq!(link.recv(None).unwrap(), Message::control(ControlCode::Hello, arch));
        link.send(&Message::control(ControlCode::Ack, 0)).unwrap();
        for _ in 0..6 {
            link.recv(None).unwrap();
        }
        // dies without a goodbye
    });
    let err = run_client(&config, &addr).unwrap_err();
    h.join().unwrap();
    let report = err.partial_report().expect("partial report");
    assert!(!report.complete);
    assert!(report.failure.is_some());
    assert!(report.client_steps_started >= 5);
    assert_eq!(report.client_steps_started, report.client_steps_finished);
    assert_eq!(err.exit_code(), 1);
}
