use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vsd_core::dataspace::{DataConfig, FeatureConfig};
use vsd_core::harness::{Decoding, ExperimentConfig, RelationSource};
use vsd_core::model::{ModelConfig, ModelMode};
use vsd_core::training::TrainConfig;

fn vsd(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vsd"));
    cmd.args(args).env_remove("VSD_OUTPUT_ROOT");
    if let Some(r) = env_root {
        cmd.env("VSD_OUTPUT_ROOT", r);
    }
    cmd.output().expect("spawn vsd")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_tiny(dir: &Path, name: &str, mode: ModelMode, decoding: Decoding, source: RelationSource) -> PathBuf {
    let cfg = ExperimentConfig {
        name: name.into(),
        output_dir: None,
        mode,
        decoding,
        relation_source: source,
        beam_size: 2,
        seeds: vec![0],
        model: ModelConfig::tiny(),
        train: TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
        data: DataConfig {
            n_instances: 50,
            seed: 1,
            features: FeatureConfig {
                grid: 2,
                noun_dim: 2,
                attr_dim: 0,
            },
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let path = dir.join(format!("{name}.toml"));
    cfg.save(&path).unwrap();
    path
}

#[test]
fn init_writes_a_loadable_config_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let p = path.to_str().unwrap();
    ok(&vsd(&["init", "--output", p, "--preset", "tiny"], None));
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.model, ModelConfig::tiny());

    let again = vsd(&["init", "--output", p], None);
    assert_eq!(again.status.code(), Some(3));
    ok(&vsd(&["init", "--output", p, "--preset", "desk", "--force"], None));
    assert_eq!(ExperimentConfig::load(&path).unwrap().model, ModelConfig::desk());
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let base = write_tiny(dir.path(), "base", ModelMode::Base, Decoding::Greedy, RelationSource::None);
    let e2e = write_tiny(dir.path(), "e2e", ModelMode::End2end, Decoding::OneRound, RelationSource::Predicted);
    let (b, e) = (base.to_str().unwrap(), e2e.to_str().unwrap());

    // The output root comes from the environment when the config has none.
    let text = ok(&vsd(&["gen-data", "--config", b], Some(&root)));
    assert!(text.contains("50 instances"), "{text}");
    assert!(root.join("data").join("manifest.json").exists());
    assert_eq!(vsd(&["gen-data", "--config", b], Some(&root)).status.code(), Some(3));

    ok(&vsd(&["train", "--config", b], Some(&root)));
    let report = ok(&vsd(&["eval", "--config", b], Some(&root)));
    assert!(report.contains("BLEU-4"), "{report}");

    ok(&vsd(&["train", "--config", e], Some(&root)));
    ok(&vsd(&["eval", "--config", e], Some(&root)));

    let jsonl = dir.path().join("out.jsonl");
    ok(&vsd(
        &["infer", "--config", e, "--split", "dev", "--limit", "2", "--out", jsonl.to_str().unwrap()],
        Some(&root),
    ));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|v| v["predicted_relation"].is_string()));

    let table = ok(&vsd(&["compare", "--config", b, "--config", e], Some(&root)));
    assert!(table.contains("base") && table.contains("e2e"), "{table}");

    // An explicit flag wins over the environment, where nothing exists yet.
    let elsewhere = dir.path().join("elsewhere");
    let missing = vsd(
        &["eval", "--config", b, "--output-dir", elsewhere.to_str().unwrap()],
        Some(&root),
    );
    assert_ne!(missing.status.code(), Some(0));

    let ghost = write_tiny(dir.path(), "ghost", ModelMode::Base, Decoding::Greedy, RelationSource::None);
    let out = vsd(&["compare", "--config", b, "--config", ghost.to_str().unwrap()], Some(&root));
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn invalid_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_tiny(dir.path(), "base", ModelMode::Base, Decoding::Greedy, RelationSource::None);
    let out = vsd(
        &["train", "--config", base.to_str().unwrap(), "--decoding", "two_round"],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = vsd(&["train", "--config", base.to_str().unwrap(), "--mode", "bogus"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}
