use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[data.synth]
k_true = 2
components = [{ mean = -1.0, std = 0.1 }, { mean = 1.0, std = 0.1 }]
locations = 2
sources = 2
steps = 160
amplitude = 1.0
period = 8.0
noise_std = 0.05
seed = 3

[model]
input_len = 6
horizon = 3
layers = 1
components = 2
embed_dim = 2
hidden_dim = 4
memory_slots = 2
memory_dim = 3

[train]
batch_size = 8
learning_rate = 1e-2
max_epochs = 2

[baseline]
seasonal_period = 8
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.config(), SMALL).unwrap();
        ws
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("small.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn gmrl(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gmrl"));
        cmd.args(args).arg("--out").arg(self.out()).env("RUST_LOG", "warn");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn run(&self, args: &[&str]) -> PathBuf {
        let out = self.gmrl(args, &[]);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        run_dir(&out)
    }
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in {stdout}"));
    PathBuf::from(line)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let a = ws.run(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    let b = ws.run(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert_ne!(a, b);
    assert_eq!(files(&a), files(&b));
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 4);
    let c = ws.run(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "10"]);
    assert_ne!(files(&a)["dataset.csv"], files(&c)["dataset.csv"]);
}

#[test]
fn gradcheck_on_the_tiny_config_passes() {
    let ws = Workspace::new();
    let tiny = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let out = ws.gmrl(&["gradcheck", "--config", tiny.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(run_dir(&out).join("gradcheck.json"));
    assert!(report["params"].as_array().unwrap().len() > 20);
}

#[test]
fn gradcheck_failure_exits_with_numeric_code() {
    let ws = Workspace::new();
    let out = ws.gmrl(
        &["gradcheck", "--config", ws.config().to_str().unwrap()],
        &[("GMRL_GRADCHECK__TOL", "1e-30"), ("GMRL_GRADCHECK__MAX_ENTRIES_PER_PARAM", "3")],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn training_is_rerunnable_and_evaluation_reports_every_cell() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let cfg = cfg.to_str().unwrap();
    let a = ws.run(&["train", "--config", cfg, "--threads", "1"]);
    let b = ws.run(&["train", "--config", cfg, "--threads", "1"]);
    let (fa, fb) = (files(&a), files(&b));
    for name in [
        "config.toml",
        "history.jsonl",
        "model.ckpt",
        "model.ckpt.json",
        "report_test.json",
        "report_val.txt",
        "baselines.json",
        "gmre.json",
        "attention.json",
        "cluster_traces.csv",
        "cluster_recovery.json",
        "summary.json",
    ] {
        assert!(fa.contains_key(name), "missing {name}");
    }
    assert_eq!(fa, fb);
    assert_eq!(fs::read_to_string(a.join("history.jsonl")).unwrap().lines().count(), 2);

    let ckpt = a.join("model.ckpt");
    let ev = ws.run(&["evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    let report = json(ev.join("report_test.json"));
    assert_eq!(report["cells"].as_array().unwrap().len(), 2 * 3);
    assert_eq!(report, json(a.join("report_test.json")));

    let fc = ws.run(&["forecast", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    let csv = fs::read_to_string(fc.join("forecast.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 2);
    let fj = json(fc.join("forecast.json"));
    assert_eq!(fj["values"].as_array().unwrap().len(), 3);
}

#[test]
fn checkpoint_mismatch_lists_differing_keys() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let cfg = cfg.to_str().unwrap();
    let a = ws.run(&["train", "--config", cfg]);
    let ckpt = a.join("model.ckpt");
    let out = ws.gmrl(
        &["evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--variant", "w/o HRA"],
        &[("GMRL_MODEL__CLUSTER_EPS", "0.001")],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.hra") && err.contains("model.cluster_eps"), "{err}");
}

#[test]
fn config_and_data_errors_use_their_exit_codes() {
    let ws = Workspace::new();
    let bad = ws.dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nlayerz = 3\n").unwrap();
    let out = ws.gmrl(&["train", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layerz"));

    let out = ws.gmrl(&["train", "--variant", "bogus"], &[]);
    assert_eq!(out.status.code(), Some(2));

    let missing = ws.dir.path().join("nowhere.csv");
    let out = ws.gmrl(&["train"], &[("GMRL_DATA__PATH", missing.to_str().unwrap())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));

    let out = ws.gmrl(&["evaluate", "--checkpoint", missing.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_documents_every_resolved_key() {
    let ws = Workspace::new();
    let dir = ws.run(&["synth", "--config", ws.config().to_str().unwrap()]);
    let resolved: toml::Table = fs::read_to_string(dir.join("config.toml")).unwrap().parse().unwrap();
    let help = ws.gmrl(&["--help"], &[]);
    let help = String::from_utf8_lossy(&help.stdout);
    fn walk(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => walk(&key, inner, out),
                _ => out.push(key),
            }
        }
    }
    let mut keys = Vec::new();
    walk("", &resolved, &mut keys);
    assert!(keys.len() > 40);
    for k in keys {
        assert!(help.contains(&format!("  {k} ")), "--help does not document {k}");
    }
}

#[test]
fn env_overrides_reach_the_resolved_config() {
    let ws = Workspace::new();
    let out = ws.gmrl(
        &["synth", "--config", ws.config().to_str().unwrap()],
        &[("GMRL_TRAIN__LEARNING_RATE", "0.25"), ("GMRL_DATA__SYNTH__STEPS", "90")],
    );
    assert!(out.status.success());
    let resolved: toml::Table = fs::read_to_string(run_dir(&out).join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(resolved["train"]["learning_rate"].as_float(), Some(0.25));
    assert_eq!(resolved["data"]["synth"]["steps"].as_integer(), Some(90));
}

#[test]
fn ablation_matches_across_thread_counts() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let cfg = cfg.to_str().unwrap();
    let a = ws.run(&["ablate", "--config", cfg, "--variant", "full,no_gmre", "--threads", "1"]);
    let b = ws.run(&["ablate", "--config", cfg, "--variant", "full,no_gmre", "--threads", "2"]);
    assert_eq!(files(&a), files(&b));
    let table = fs::read_to_string(a.join("ablation.txt")).unwrap();
    assert!(table.contains("no_gmre") && table.contains("persistence"), "{table}");
}
