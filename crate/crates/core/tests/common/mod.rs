#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fairproof::client::{ChatRequest, FixedClock, Transport};
use fairproof::config::RunConfig;
use fairproof::exec::Exec;
use fairproof::runner::{prepare, RunOptions};
use fairproof::simulator::{ResponseScript, ScriptTransport, Step};
use tempfile::TempDir;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> PathBuf {
    manifest_dir().join("tests/fixtures").join(name)
}

/// A scratch directory holding copies of the fixtures and templates, laid
/// out the way the fixture configs expect.
pub struct Workspace {
    dir: TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = TempDir::new().expect("tempdir");
        copy_dir(&manifest_dir().join("tests/fixtures"), dir.path());
        copy_dir(&manifest_dir().join("templates"), &dir.path().join("templates"));
        Workspace { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config_path(&self, dataset: &str) -> PathBuf {
        self.path().join(format!("{dataset}.config.json"))
    }

    pub fn config(&self, dataset: &str) -> RunConfig {
        RunConfig::load(&self.config_path(dataset)).expect("fixture config loads")
    }

    /// Writes `config` next to the fixtures and returns its path.
    pub fn write_config(&self, name: &str, config: &RunConfig) -> PathBuf {
        let path = self.path().join(name);
        fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
        path
    }
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

/// Model text per instance id, from `<dataset>.answers.json`.
pub fn answers(dataset: &str) -> BTreeMap<String, String> {
    let text = fs::read_to_string(fixture(&format!("{dataset}.answers.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// A script that answers each prompt of `config` with the fixture answer of
/// its instance.
pub fn answer_script(ws: &Workspace, config: &RunConfig, dataset: &str) -> ResponseScript {
    let plan = prepare(config, ws.path(), Exec::Sequential).expect("fixture plan");
    let answers = answers(dataset);
    let mut script = ResponseScript::default();
    let mut seen = std::collections::BTreeSet::new();
    for prompt in &plan.prompts {
        let text = answers
            .get(&prompt.instance_id)
            .unwrap_or_else(|| panic!("no fixture answer for {}", prompt.instance_id));
        let body = ChatRequest::new(prompt, &config.endpoint).body();
        assert!(seen.insert(body.clone()), "{} renders the same request as another instance", prompt.instance_id);
        script = script.with_entry(&body, vec![Step::content(text)]);
    }
    script
}

/// In-process transport and a frozen clock, so runs are byte-reproducible.
pub fn frozen_options(script: ResponseScript, exec: Exec) -> (RunOptions, Arc<ScriptTransport>) {
    let transport = Arc::new(ScriptTransport::new(script));
    let options = RunOptions {
        exec,
        transport: Some(transport.clone() as Arc<dyn Transport>),
        clock: Arc::new(FixedClock(0)),
    };
    (options, transport)
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}
