use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use fairproof::config::RunConfig;
use fairproof::simulator::ResponseScript;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairproof"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
        }
    }
}

fn workspace() -> TempDir {
    let core = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core");
    let dir = TempDir::new().unwrap();
    copy_dir(&core.join("tests/fixtures"), dir.path());
    copy_dir(&core.join("templates"), &dir.path().join("templates"));
    dir
}

/// A `fairproof serve` child process, killed on drop.
struct Server {
    child: Child,
    base_url: String,
}

impl Server {
    fn start(script: &Path) -> Self {
        let mut child = bin()
            .args(["serve", script.to_str().unwrap(), "--bind", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base_url = line.trim().strip_prefix("serving ").expect("serve announces its address").to_owned();
        Server { child, base_url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn pisa_config(ws: &Path, base_url: &str, name: &str) -> PathBuf {
    let mut config = RunConfig::load(&ws.join("pisa.config.json")).unwrap();
    config.endpoint.base_url = base_url.to_owned();
    config.output.ledger = format!("out/{name}.ledger");
    config.output.report = format!("out/{name}.report.json");
    let path = ws.join(format!("{name}.config.json"));
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    path
}

#[test]
fn run_verify_replay_and_report_through_the_binary() {
    let ws = workspace();
    let script = ws.path().join("always-h.json");
    fs::write(&script, serde_json::to_string(&ResponseScript::always("H")).unwrap()).unwrap();
    let server = Server::start(&script);

    let config = pisa_config(ws.path(), &server.base_url, "first");
    let out = run(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("Dataset"));
    let second = pisa_config(ws.path(), &server.base_url, "second");
    assert_eq!(run(&["--sequential", "run", "--config", second.to_str().unwrap()]).status.code(), Some(0));

    let ledger = ws.path().join("out/first.ledger");
    let other = ws.path().join("out/second.ledger");
    let ledger_arg = ledger.to_str().unwrap();
    let out = run(&["verify", ledger_arg]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("CLEAN"));

    let out = run(&["verify", ledger_arg, "--compare", other.to_str().unwrap(), "--normalize-time"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).ends_with("IDENTICAL\n"));

    let out = run(&["replay", ledger_arg]);
    assert_eq!((out.status.code(), stdout(&out)), (Some(0), "PASS\n".to_owned()));

    let report = ws.path().join("out/first.report.json");
    let out = run(&["report", report.to_str().unwrap(), "--format", "document"]);
    assert_eq!(stdout(&out), fs::read_to_string(&report).unwrap());

    // A recorded ledger can itself be served as a script.
    drop(server);
    let replayed = Server::start(&ledger);
    let third = pisa_config(ws.path(), &replayed.base_url, "third");
    assert_eq!(run(&["run", "--config", third.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let ws = workspace();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["verify", ws.path().join("absent.ledger").to_str().unwrap()]).status.code(), Some(1));

    // Nothing listens on the configured endpoint: every prompt exhausts its retries.
    let mut config = RunConfig::load(&ws.path().join("pisa.config.json")).unwrap();
    config.endpoint.base_url = "http://127.0.0.1:9/v1".into();
    config.endpoint.timeout_ms = 200;
    config.endpoint.max_retries = 0;
    let path = ws.path().join("dead.config.json");
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let ledger = ws.path().join("out/pisa.ledger");
    let text = fs::read_to_string(&ledger).unwrap();
    fs::write(&ledger, text.replacen("\"sequence\":3", "\"sequence\":4", 1)).unwrap();
    let out = run(&["verify", ledger.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("at record 3"), "{}", stdout(&out));
    assert_eq!(run(&["replay", ledger.to_str().unwrap()]).status.code(), Some(2));

    let bad = ws.path().join("bad.config.json");
    fs::write(&bad, "{").unwrap();
    assert_eq!(run(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}
