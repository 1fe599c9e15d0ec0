// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[corpus]
n_subjects = 30
n_docs = 240
n_heldout = 20

[model]
d_emb = 16
n_layers = 2
n_heads = 2
d_ff = 32

[train]
epochs = 1

[sae]
expansion = 2
k = 4
k_aux = 4
epochs = 1

[eval]
max_new = 4
grid = [
    { method = "none", use_sae = true },
    { method = "none", use_sae = false },
    { method = "ablation", k = 4, use_sae = true },
]
"#;

fn leakguard(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakguard"))
        .args(args)
        .env("LEAKGUARD_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest_hashes(out: &Path, stage: &str) -> Vec<(String, String)> {
    fs::read_to_string(out.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains(&format!("\"stage\":\"{stage}\"")))
        .map(|l| {
            let v: serde_like::Entry = serde_like::parse(l);
            (v.path, v.sha256)
        })
        .collect()
}

/// Minimal field extraction so the test does not need a JSON dependency.
mod serde_like {
    pub struct Entry {
        pub path: String,
        pub sha256: String,
    }

    fn field(line: &str, key: &str) -> String {
        let tag = format!("\"{key}\":\"");
        let start = line.find(&tag).expect("field present") + tag.len();
        line[start..].split('"').next().unwrap().to_string()
    }

    pub fn parse(line: &str) -> Entry {
        Entry {
            path: field(line, "path"),
            sha256: field(line, "sha256"),
        }
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = leakguard(
        &["gen-corpus", "--config", "/nonexistent/run.toml"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("cannot read config"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = leakguard(&["fly"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_config_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = leakguard(&["default-config"], dir.path());
    assert!(o.status.success());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, &o.stdout).unwrap();
    let o = leakguard(
        &["gen-corpus", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("corpus/corpus.tsv").exists());
}

#[test]
fn stages_resume_detect_staleness_and_respect_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();

    assert!(leakguard(&["gen-corpus", "--config", c], &out)
        .status
        .success());
    let first = manifest_hashes(&out, "gen-corpus");
    assert_eq!(first.len(), 9);

    let again = leakguard(&["gen-corpus", "--config", c], &out);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));

    let forced = leakguard(&["gen-corpus", "--config", c, "--force"], &out);
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert_eq!(manifest_hashes(&out, "gen-corpus"), first);

    for stage in ["train-lm", "harvest", "probe"] {
        let o = leakguard(&[stage, "--config", c], &out);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }

    // With-SAE specs need a trained SAE.
    let o = leakguard(&["rank", "--config", c], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = leakguard(&["eval", "--config", c], &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("train-sae"));

    // Changing an upstream section makes downstream stages stale.
    let edited = dir.path().join("edited.toml");
    fs::write(
        &edited,
        TINY.replace("[sae]", "[probe]\nlr = 0.05\n\n[sae]"),
    )
    .unwrap();
    let o = leakguard(&["train-sae", "--config", edited.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("re-run stage `probe`"),
        "{}",
        stderr(&o)
    );

    // Tampering with an artifact is caught too.
    let lm = out.join("lm.bin");
    let mut bytes = fs::read(&lm).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&lm, bytes).unwrap();
    let o = leakguard(&["harvest", "--config", c, "--force"], &out);
    assert!(
        stderr(&o).contains("re-run stage `train-lm`"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn full_run_writes_report_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = leakguard(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--stage-dir",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("[eval]") && stdout.contains("With SAE"));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("selected layer"));
    assert!(out.join("plots/ablation.svg").exists());
    assert_eq!(
        fs::read_to_string(out.join("eval_records.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}
