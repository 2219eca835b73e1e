use std::fs;
use std::path::{Path, PathBuf};

use editlab::config::ExperimentConfig;
use editlab::harness::{run_experiment, run_experiment_to_dir, sweep, verify, SummaryDocument};
use editlab::Error;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn quickstart() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs().join("experiments/quickstart.toml")).unwrap();
    cfg.n = 300;
    cfg.horizon = 300;
    cfg.seeds = vec![4, 5];
    cfg
}

#[test]
fn shipped_environments_pass_verify() {
    for entry in fs::read_dir(configs().join("envs")).unwrap() {
        let path = entry.unwrap().path();
        let env = editlab::config::EnvSpec::load(&path).unwrap().build().unwrap();
        let report = verify(&env).unwrap();
        assert!(report.passed, "{}: {:#?}", path.display(), report.checks);
    }
}

#[test]
fn experiment_writes_a_complete_output_directory() {
    let cfg = quickstart();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment_to_dir(&cfg, dir.path()).unwrap();

    let doc: SummaryDocument =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(doc.summary, out.summary);
    let labels: Vec<&str> = doc.summary.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(labels, ["base", "sft", "dpo", "early_ensemble", "pessimistic_rl", "epoch_sft", "late_ensemble"]);
    assert!(doc.summary.max_subopt.values().any(|&g| g == 0.0));
    assert!(doc.class.edit_target_in_class && doc.class.optimum_in_class);

    for seed in &cfg.seeds {
        let csv = fs::read_to_string(dir.path().join(format!("seed_{seed}/run.csv"))).unwrap();
        assert!(csv.starts_with("t,method,arm,cost,cum_cost,subopt,cum_regret"));
        assert_eq!(csv.lines().count(), 1 + 7 * cfg.horizon);
        assert!(dir.path().join(format!("seed_{seed}/policies.json")).exists());
    }

    let echoed = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(run_experiment(&echoed).unwrap().summary, out.summary);
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = quickstart();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment_to_dir(&cfg, a.path()).unwrap();
    run_experiment_to_dir(&cfg, b.path()).unwrap();
    for rel in ["summary.json", "config.toml", "seed_4/run.csv", "seed_5/policies.json"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn unbalanced_user_aborts_before_training() {
    let text = r#"
n = 10
horizon = 10
seeds = [1]
methods = [{ method = "sft" }]
[train]
beta = 0.5
responses = 2
metric = { kind = "indicator", delta = 1.0, c_max = 1.0 }
[train.user]
kind = "table"
table = [[[0.9, 0.1], [0.3, 0.7]]]
"#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment_to_dir(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert!(dir.path().join("validation.json").exists());
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn sweep_records_every_cell_and_seed() {
    let path = configs().join("experiments/weakness_sweep.toml");
    let mut doc: toml::Table = toml::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    doc.insert("horizon".into(), toml::Value::Integer(50));
    doc["sweep"]["axes"].as_table_mut().unwrap().insert(
        "methods".into(),
        toml::Value::Array(vec![
            toml::from_str::<toml::Table>("m = [{ method = \"sft\" }]").unwrap()["m"].clone(),
            toml::from_str::<toml::Table>("m = [{ method = \"ppo\" }]").unwrap()["m"].clone(),
        ]),
    );
    let dir = tempfile::tempdir().unwrap();
    let cells = sweep(&doc, path.parent().unwrap(), dir.path()).unwrap();
    assert_eq!(cells.len(), 8);
    assert_eq!(cells.iter().filter(|c| !c.ok).count(), 4);

    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(manifest.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4 * 2 + 4);
    assert!(rows.iter().filter(|r| &r[5] == "ok").all(|r| Path::new(&r[6]).exists()));
    assert!(dir.path().join("sweep_summary.json").exists());
}
