//! Harness behavior on a tiny configuration: idempotence, hash checks,
//! reports and flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use foodcl::pipeline::{self, Grid};
use foodcl::tables::cmd_report;
use foodcl::{CliError, ExperimentConfig};
use foodcl_core::lora::Strategy;

const TINY: &str = r#"
seeds = [1]

[dataset]
num_dishes = 50
seed = 11

[backbone]
model_dim = 16
num_layers = 1
num_heads = 2
mlp_dim = 32
max_seq_len = 128

[corpus]
size = 200

[pretrain]
max_steps = 20
eval_every = 10

[hyper]
rank = 2
epochs = 1
batch_size = 8
learning_rate = 3e-3

[replay]
proportion = 0.1
max_new_tokens = 12

[eval]
max_new_tokens = 12
"#;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(TINY).unwrap();
    c.out_dir = Some(out.to_path_buf());
    c.validate().unwrap();
    c
}

/// Relative path to file bytes for everything under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_idempotent() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path());
    let first = pipeline::cmd_gen_data(&cfg).unwrap();
    assert!(first.created);
    let files = snapshot(&first.dir);
    // Three tasks with train and test splits, the pool and a manifest.
    assert_eq!(files.len(), 8, "{:?}", files.keys().collect::<Vec<_>>());
    let second = pipeline::cmd_gen_data(&cfg).unwrap();
    assert!(!second.created);
    assert_eq!(snapshot(&second.dir), files);

    let elsewhere = tempfile::tempdir().unwrap();
    let again = pipeline::cmd_gen_data(&tiny(elsewhere.path())).unwrap();
    assert_eq!(snapshot(&again.dir), files);
}

#[test]
fn pretrain_requires_data_and_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path());
    match pipeline::cmd_pretrain(&cfg) {
        Err(CliError::Missing { what, .. }) => assert_eq!(what, "dataset"),
        other => panic!("expected a missing-dataset error, got {:?}", other.map(|(_, r)| r.checksum)),
    }
    pipeline::cmd_gen_data(&cfg).unwrap();
    let (w1, r1) = pipeline::cmd_pretrain(&cfg).unwrap();
    assert_eq!(r1.config_hash, cfg.backbone_hash().unwrap());

    let u = tempfile::tempdir().unwrap();
    let other = tiny(u.path());
    pipeline::cmd_gen_data(&other).unwrap();
    let (w2, r2) = pipeline::cmd_pretrain(&other).unwrap();
    assert_eq!(w1.checksum(), w2.checksum());
    assert_eq!(r1.checksum, r2.checksum);
    // A second call reuses the stored checkpoint.
    let (_, r3) = pipeline::cmd_pretrain(&cfg).unwrap();
    assert_eq!(r3.checksum, r1.checksum);
}

#[test]
fn runs_report_and_refuse_foreign_datasets() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path());
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_pretrain(&cfg).unwrap();
    let jobs = pipeline::cmd_run(&cfg, &Strategy::ALL, 1, false).unwrap();
    pipeline::check_jobs(&jobs).unwrap();
    let mut dirs: Vec<PathBuf> = jobs.iter().map(|j| j.dir.clone()).collect();

    for j in &jobs {
        let run = j.dir.as_path();
        assert!(run.join("run.json").exists() && run.join("report.json").exists());
        let mut per_method = cfg.clone();
        per_method.method = j.method;
        let hash = per_method.run_config(j.seed).unwrap().config_hash;
        let stage = std::fs::read_to_string(run.join("predictions").join("stage3.json")).unwrap();
        assert!(stage.contains(&hash), "prediction file lacks the config hash");
        // Report files come from stored predictions and so rescore identically.
        let (_, rescored) = pipeline::rescore_run(run).unwrap();
        assert_eq!(&rescored, &j.outcome.as_ref().unwrap().report);
    }

    let a = cmd_report(&dirs).unwrap();
    let b = cmd_report(&dirs).unwrap();
    assert_eq!(a.text, b.text);
    assert!(a.absent.is_empty());
    for m in Strategy::ALL {
        assert!(a.text.contains(m.name()));
    }

    let missing = t.path().join("runs").join("never-ran");
    dirs.push(missing.clone());
    let with_gap = cmd_report(&dirs).unwrap();
    assert_eq!(with_gap.absent, vec![missing]);
    assert!(with_gap.text.contains("absent"));
    dirs.pop();

    // The same method on a different dataset must not merge.
    let u = tempfile::tempdir().unwrap();
    let mut foreign = tiny(u.path());
    foreign.dataset.seed += 1;
    pipeline::cmd_gen_data(&foreign).unwrap();
    pipeline::cmd_pretrain(&foreign).unwrap();
    let other = pipeline::cmd_run(&foreign, &[Strategy::NaiveLora], 1, false).unwrap();
    dirs.push(other[0].dir.clone());
    assert!(matches!(cmd_report(&dirs), Err(CliError::DatasetMismatch(_))));

    // Completed runs are reused, not recomputed.
    let reused = pipeline::cmd_run(&cfg, &[Strategy::NaiveLora], 1, true).unwrap();
    let first = jobs.iter().find(|j| j.method == Strategy::NaiveLora).unwrap();
    let before = std::fs::read(first.dir.join("run.json")).unwrap();
    assert_eq!(std::fs::read(reused[0].dir.join("run.json")).unwrap(), before);
}

#[test]
fn ablation_cells_differ_only_in_their_knob() {
    let t = tempfile::tempdir().unwrap();
    let base = tiny(t.path());
    for g in Grid::ALL {
        let cells = pipeline::grid_cells(&base, g);
        assert!(cells.len() >= 2);
        for c in &cells {
            assert_eq!(c.config.method, Strategy::DualLora);
            assert_eq!(c.config.dataset, base.dataset);
            assert_eq!(c.config.backbone_hash().unwrap(), base.backbone_hash().unwrap());
        }
    }
    let lambdas: Vec<f64> = pipeline::grid_cells(&base, Grid::Lambda).iter().map(|c| c.config.hyper.lambda_o).collect();
    assert_eq!(lambdas, vec![0.1, 0.5, 1.0, 2.0, 5.0]);
    let props: Vec<f64> = pipeline::grid_cells(&base, Grid::Replay).iter().map(|c| c.config.replay.proportion).collect();
    assert_eq!(props, vec![0.01, 0.05, 0.10]);
}

fn foodcl(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_foodcl")).args(args).env("FOODCL_OUT", out).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn flags_and_overrides_reach_the_config() {
    let t = tempfile::tempdir().unwrap();
    let out = foodcl(
        &["show-config", "--lr", "0.01", "--lambda-o", "2", "--no-qe", "--seeds", "4,5", "--set", "replay.repeat=3", "--method", "ortho-lora"],
        t.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.hyper.learning_rate, 0.01);
    assert_eq!(cfg.hyper.lambda_o, 2.0);
    assert!(!cfg.replay.quality_enhancement);
    assert_eq!(cfg.replay.repeat, 3);
    assert_eq!(cfg.seeds, vec![4, 5]);
    assert_eq!(cfg.method, Strategy::OrthoLora);
    // Everything not overridden keeps its default.
    let mut expect = ExperimentConfig::default();
    expect.hyper.learning_rate = 0.01;
    expect.hyper.lambda_o = 2.0;
    expect.replay.quality_enhancement = false;
    expect.replay.repeat = 3;
    expect.seeds = vec![4, 5];
    expect.method = Strategy::OrthoLora;
    expect.out_dir = Some(t.path().to_path_buf());
    assert_eq!(cfg, expect);

    let desk = foodcl(&["show-config", "--desk"], t.path());
    let d = ExperimentConfig::from_toml(&String::from_utf8(desk.stdout).unwrap()).unwrap();
    assert_eq!(d.hyper.learning_rate, 3e-3);
}

#[test]
fn bad_input_fails_with_a_message() {
    let t = tempfile::tempdir().unwrap();
    let out = foodcl(&["show-config", "--set", "hyper.nonsense=1"], t.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    let out = foodcl(&["pretrain"], t.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen-data"), "{err}");

    let out = foodcl(&["show-config", "--lambda-o=-1"], t.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}
