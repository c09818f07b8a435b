use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = r#"
mode = "dsl"
arch = "mlp"
epochs = 1
batch_size = 32
[dataset]
kind = "blobs"
train = 128
test = 32
dims = [8]
classes = 4
spread = 0.5
"#;

fn splitwire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitwire")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_writes_a_report_that_inspect_reads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = splitwire(&["train", "--config", &cfg, "--format", "json", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = out.join("report.json");
    let o = splitwire(&["inspect-report", report.to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success());
    assert!(text.contains("complete: true") && text.contains("epoch   0 client"), "{text}");
}

#[test]
fn csv_report_goes_to_stdout_without_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = splitwire(&["train", "--config", &cfg, "--mode", "csl", "--format", "csv"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("epoch,party,mode"), "{text}");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "clients = 0\n").unwrap();
    let o = splitwire(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("clients"));
}

#[test]
fn compare_needs_two_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = splitwire(&["compare", "--config", &cfg, "mode=csl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("need ≥2 configs"));
}

#[test]
fn compare_tabulates_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = splitwire(&["compare", "--config", &cfg, "--format", "csv", "mode=csl", "mode=dsl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("mode=dsl,dsl,") && rows[2].contains(",2.0000,"), "{text}");
}

#[test]
fn unknown_variant_key_is_a_config_error() {
    let o = splitwire(&["compare", "mode=csl", "depth=3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_reports_each_check() {
    let o = splitwire(&["verify", "bytes"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
    assert!(text.contains("bytes/csl-twice-dsl"));
    assert_eq!(splitwire(&["verify", "nonsense"]).status.code(), Some(2));
}

#[test]
fn mismatched_architecture_is_rejected_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut server = Command::new(env!("CARGO_BIN_EXE_splitwire"))
        .args(["serve", "--listen", "127.0.0.1:0", "--config", &cfg])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let client = splitwire(&["client", "--config", &cfg, "--cut", "s", "--connect", &addr]);
    let _ = server.kill();
    let _ = server.wait();
    assert_eq!(client.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&client.stderr).contains("reject"), "{}", String::from_utf8_lossy(&client.stderr));
}
