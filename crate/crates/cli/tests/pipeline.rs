use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phenoscribe::nn::Checkpoint;
use phenoscribe_cli::RunConfig;

const TINY: &str = r#"{
  "synth": {"n_patients": 10, "n_arms": 3},
  "experiment": {
    "lm": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "prompt_len": 4},
    "fusion": {"n_layers": 1, "n_heads": 2, "d_ff": 32, "epochs": 4, "patience": 2},
    "pretrain_epochs": 1, "crossmodal_epochs": 1, "ptune_epochs": 1,
    "seeds": [0, 1]
  }
}"#;

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), TINY).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    run_env(dir, args, &[])
}

fn run_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_phenoscribe"));
    cmd.arg("--workdir").arg(dir).args(["--config", "run.json"]).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(out: &Output, code: i32, needle: &str) {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{err}");
    assert!(err.contains(needle), "expected {needle:?} in {err}");
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn count_files(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix)).count()
}

fn full_pipeline(dir: &Path) {
    ok(dir, &["synth"]);
    ok(dir, &["extract"]);
    ok(dir, &["train", "--stage", "all"]);
    ok(dir, &["eval"]);
    ok(dir, &["ablate", "--lambdas", "0,0.25,0.5,0.75,1.0"]);
}

#[test]
fn reruns_produce_byte_identical_artifacts() {
    let (a, b) = (workdir(), workdir());
    full_pipeline(a.path());
    full_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }

    // the same work directory re-run in place also reproduces every file
    let d = a.path();
    ok(d, &["synth", "--force"]);
    ok(d, &["extract"]);
    ok(d, &["train", "--stage", "all", "--force"]);
    ok(d, &["eval", "--force"]);
    ok(d, &["ablate", "--lambdas", "0,0.25,0.5,0.75,1.0", "--force"]);
    assert_eq!(tree(d), ta);

    let results = fs::read_to_string(d.join("results/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4 * 3 * 2);
    let ablation = fs::read_to_string(d.join("results/ablation.csv")).unwrap();
    let lambdas: Vec<&str> = ablation.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0", "0.25", "0.5", "0.75", "1"]);
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(d.join("results/results.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["experiment"]["seeds"], serde_json::json!([0, 1]));

    for (name, prefix) in [("base", "lm."), ("crossmodal", "lora."), ("ptune-text", "prompt."), ("fusion-longitudinal", "bio_enc.")] {
        let ck = Checkpoint::load(&d.join(format!("checkpoints/seed-1/{name}.phsc"))).unwrap();
        assert!(ck.params.iter().any(|(n, _, _)| n.starts_with(prefix)), "{name}");
        assert_eq!(ck.config["stage"], name);
        assert_eq!(ck.config["seed"], 1);
        assert!(ck.config["run"].is_object());
    }
    let ck = Checkpoint::load(&d.join("checkpoints/seed-0/crossmodal.phsc")).unwrap();
    assert!(ck.params.iter().all(|(n, _, _)| n.starts_with("lora.")));
}

#[test]
fn synth_is_deterministic_and_creates_its_directory() {
    let d = workdir();
    let out = ok(d.path(), &["synth", "--seed", "7", "--patients", "6", "--arms", "4"]);
    assert!(out.contains("24 visits"));
    let first = fs::read(d.path().join("cohort/manifest.json")).unwrap();
    fails(&run(d.path(), &["synth", "--seed", "7", "--patients", "6", "--arms", "4"]), 1, "--force");
    ok(d.path(), &["synth", "--seed", "7", "--patients", "6", "--arms", "4", "--force"]);
    assert_eq!(fs::read(d.path().join("cohort/manifest.json")).unwrap(), first);
    ok(d.path(), &["synth", "--seed", "8", "--patients", "6", "--arms", "4", "--force"]);
    assert_ne!(fs::read(d.path().join("cohort/manifest.json")).unwrap(), first);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let d = workdir();
    assert_eq!(run(d.path(), &["synth", "--patients", "-1"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["train", "--stage", "nope"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["eval", "--architectures", "bimodal"]).status.code(), Some(2));
    fs::write(d.path().join("run.json"), r#"{"synth": {"n_patiens": 3}}"#).unwrap();
    fails(&run(d.path(), &["synth"]), 2, "n_patiens");
    fs::write(d.path().join("run.json"), r#"{"split": {"fractions": [0.5, 0.5, 0.5]}}"#).unwrap();
    fails(&run(d.path(), &["synth"]), 2, "fractions");
    fs::write(d.path().join("run.json"), "{}").unwrap();
    ok(d.path(), &["synth", "--patients", "2", "--arms", "1"]);
    fails(&run_env(d.path(), &["extract"], &[("PHENOSCRIBE_THREADS", "zero")]), 2, "PHENOSCRIBE_THREADS");
}

#[test]
fn extraction_caches_every_visit_and_records_failures() {
    let d = workdir();
    let p = d.path();
    fails(&run(p, &["extract"]), 1, "synth");
    ok(p, &["synth"]);
    let out = run_env(p, &["extract", "--kind", "landmarks"], &[("PHENOSCRIBE_THREADS", "1")]);
    assert!(out.status.success());
    let lm_dir = p.join("cache/landmarks");
    assert_eq!(count_files(&lm_dir, ".json"), 30);
    assert!(!p.join("cache/biomarkers").exists());
    let before = tree(&lm_dir);
    ok(p, &["extract", "--kind", "landmarks"]);
    assert_eq!(tree(&lm_dir), before);

    fs::write(p.join("cohort/wav/P003_arm1.wav"), b"RIFF\x04\x00\x00\x00WAVEjunk").unwrap();
    let out = run(p, &["extract", "--kind", "biomarkers"]);
    fails(&out, 1, "1 of 30 visits failed");
    let bio_dir = p.join("cache/biomarkers");
    assert_eq!(count_files(&bio_dir, ".csv"), 29);
    let log = fs::read_to_string(bio_dir.join("errors.json")).unwrap();
    assert!(log.contains("P003_arm1.wav"));
    let csv = fs::read_to_string(bio_dir.join("P000_arm0.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 33);
}

#[test]
fn stages_check_their_prerequisites() {
    let d = workdir();
    let p = d.path();
    ok(p, &["synth"]);
    ok(p, &["train", "--stage", "base"]);
    fails(&run(p, &["train", "--stage", "ptune", "--architecture", "text+landmarks"]), 1, "missing prerequisite");
    fails(&run(p, &["train", "--stage", "crossmodal"]), 1, "extract --kind landmarks");
    ok(p, &["extract"]);
    ok(p, &["train", "--stage", "ptune", "--architecture", "text"]);
    fails(&run(p, &["train", "--stage", "fusion"]), 1, "missing prerequisite");
    fails(&run(p, &["eval", "--architectures", "text+landmarks"]), 1, "missing checkpoint");
    ok(p, &["train", "--stage", "crossmodal"]);
    ok(p, &["train", "--stage", "ptune"]);
    ok(p, &["train", "--stage", "fusion", "--mode", "cross_sectional"]);
    let ck = Checkpoint::load(&p.join("checkpoints/seed-0/fusion-cross_sectional.phsc")).unwrap();
    assert_eq!(ck.config["model"]["mode"], "cross_sectional");
    assert_eq!(ck.config["run"]["experiment"]["fusion"]["mode"], "cross_sectional");
    fails(&run(p, &["eval", "--architectures", "trimodal+longitudinal"]), 1, "fusion-longitudinal.phsc");
    let out = ok(p, &["eval", "--architectures", "text,trimodal", "--seeds", "0"]);
    assert!(out.contains("trimodal"));
    let results = fs::read_to_string(p.join("results/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 3);
}

#[test]
fn empty_config_is_valid_and_round_trips() {
    let cfg: RunConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(cfg, RunConfig::default());
    cfg.validate().unwrap();
    let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.experiment.lambda_aux, 0.25);
    assert_eq!(cfg.lambdas, [0.0, 0.25, 0.5, 0.75, 1.0]);
    let bad = RunConfig { lambdas: vec![], ..RunConfig::default() };
    assert!(bad.validate().is_err());
}
