use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mnar_ssl::format::truth_from_json;

const BIN: &str = env!("CARGO_BIN_EXE_mnar-ssl");

const BASE: &str = r#"
seed = 3
[data]
n_classes = 2
dim = 2
separation = 2.0
counts = [300, 300]
test_counts = [200, 200]
[scenario]
kind = "class_bernoulli"
phi = [0.9, 0.2]
[estimate]
method = "mle"
[mle]
epochs = 10
[train]
epochs = 3
[study]
replicates = 2
[paths]
dataset = "gen/dataset.csv"
test = "gen/sealed/test.csv"
truth = "gen/sealed/truth.json"
model = "gen/oracle_model.json"
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn mnar(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path, out: &Path) {
    let o = mnar(args, config, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn generated(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), text);
    ok(&["generate"], &config, &dir.path().join("gen"));
    (dir, config)
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn every_subcommand_is_deterministic() {
    let (dir, config) = generated(BASE);
    for cmd in ["estimate", "train", "test-mcar", "study"] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        ok(&[cmd], &config, &a);
        ok(&[cmd], &config, &b);
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            assert_eq!(read(&a.join(&name)), read(&b.join(&name)), "{cmd}: {name:?}");
        }
    }
    let regen = dir.path().join("regen");
    ok(&["generate"], &config, &regen);
    for f in [
        "dataset.csv",
        "sealed/test.csv",
        "sealed/truth.json",
        "oracle_model.json",
    ] {
        assert_eq!(read(&regen.join(f)), read(&dir.path().join("gen").join(f)), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, config) = generated(BASE);
    let other = dir.path().join("other");
    let o = Command::new(BIN)
        .args(["generate", "--seed", "4", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&other)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(
        read(&other.join("dataset.csv")),
        read(&dir.path().join("gen/dataset.csv"))
    );
}

#[test]
fn estimates_do_not_depend_on_the_sealed_truth() {
    let (dir, config) = generated(BASE);
    let clean = dir.path().join("clean");
    ok(&["estimate"], &config, &clean);
    assert!(clean.join("score.json").exists());

    fs::write(dir.path().join("gen/sealed/truth.json"), "{ not json").unwrap();
    let dirty = dir.path().join("dirty");
    let o = mnar(&["estimate"], &config, &dirty);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(read(&clean.join("phi.json")), read(&dirty.join("phi.json")));
    assert_eq!(read(&clean.join("trace.tsv")), read(&dirty.join("trace.tsv")));
}

#[test]
fn study_with_one_replicate_matches_train() {
    // train starts from the configured initial model, as each replicate does
    let text = BASE
        .replace("replicates = 2", "replicates = 1")
        .replace("model = \"gen/oracle_model.json\"\n", "");
    let (dir, config) = generated(&text);
    let tr = dir.path().join("train");
    let st = dir.path().join("study");
    ok(&["train"], &config, &tr);
    ok(&["study"], &config, &st);
    let report: serde_json::Value = serde_json::from_slice(&read(&tr.join("report.json"))).unwrap();
    let study: serde_json::Value = serde_json::from_slice(&read(&st.join("study.json"))).unwrap();
    assert_eq!(study["replicates"][0]["report"], report);
    assert_eq!(study["replicates"][0]["seed"], 3);
}

#[test]
fn flat_geometric_profile_labels_equal_counts() {
    let text = BASE.replace(
        "kind = \"class_bernoulli\"\nphi = [0.9, 0.2]",
        "kind = \"geometric_imbalance\"\nn1 = 40\ngamma = 1.0",
    );
    let (dir, _) = generated(&text);
    let csv = String::from_utf8(read(&dir.path().join("gen/dataset.csv"))).unwrap();
    let mut counts = [0usize; 2];
    for line in csv.lines().skip(2) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[3] == "1" {
            counts[fields[2].parse::<usize>().unwrap() - 1] += 1;
        }
    }
    assert_eq!(counts, [40, 40]);
    let truth = truth_from_json(&String::from_utf8(read(&dir.path().join("gen/sealed/truth.json"))).unwrap()).unwrap();
    assert_eq!(truth.n(), 600);
}

#[test]
fn test_mcar_prints_a_summary() {
    let (dir, config) = generated(BASE);
    let o = mnar(&["test-mcar"], &config, &dir.path().join("t"));
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("dof = 1"), "{stdout}");
    assert!(dir.path().join("t/test_report.json").exists());
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bad_value = write_config(dir.path(), "[mle]\ngamma_phi = -1.0\n");
    assert_eq!(mnar(&["estimate"], &bad_value, &out).status.code(), Some(1));
    let unknown = write_config(dir.path(), "[train]\nepoch = 3\n");
    assert_eq!(mnar(&["train"], &unknown, &out).status.code(), Some(1));
    let no_data = write_config(dir.path(), "");
    assert_eq!(mnar(&["generate"], &no_data, &out).status.code(), Some(1));
    assert_eq!(
        mnar(&["train"], &dir.path().join("missing.toml"), &out).status.code(),
        Some(1)
    );
    let usage = Command::new(BIN).arg("train").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn malformed_dataset_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "# d=1 K=2\nx1,y,r\n0.5,3,1\n").unwrap();
    let config = write_config(dir.path(), "[paths]\ndataset = \"d.csv\"\n");
    let o = mnar(&["train"], &config, &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("# d=1 K=2\nx1,y,r\n");
    for i in 0..20 {
        let (x, y) = if i % 2 == 0 { ("1e200", 1) } else { ("-1e200", 2) };
        let label = if i % 3 == 0 { "NA".to_string() } else { y.to_string() };
        let r = if i % 3 == 0 { 0 } else { 1 };
        csv.push_str(&format!("{x},{label},{r}\n"));
    }
    fs::write(dir.path().join("d.csv"), csv).unwrap();
    let config = write_config(
        dir.path(),
        "[train]\ngamma_theta = 1e200\n[paths]\ndataset = \"d.csv\"\n",
    );
    let o = mnar(&["train"], &config, &dir.path().join("t"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn moment_estimate_of_a_hand_built_file() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        "0.1,1,1", "0.2,1,1", "0.3,NA,0", "0.4,2,1", "0.5,NA,0", "0.6,NA,0", "0.7,3,1", "0.8,NA,0", "0.9,NA,0",
        "1.0,NA,0",
    ];
    fs::write(
        dir.path().join("d.csv"),
        format!("# d=1 K=3\nx1,y,r\n{}\n", rows.join("\n")),
    )
    .unwrap();
    let config = write_config(
        dir.path(),
        "[estimate]\nmethod = \"moment_known_prior\"\nprior = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]\n[paths]\ndataset = \"d.csv\"\n",
    );
    ok(&["estimate"], &config, &dir.path().join("o"));
    let phi: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("o/phi.json"))).unwrap();
    // (2 / 10) * 3, (1 / 10) * 3, (1 / 10) * 3
    for (v, want) in phi["phi"].as_array().unwrap().iter().zip([0.6, 0.3, 0.3]) {
        assert!((v.as_f64().unwrap() - want).abs() < 1e-12, "{phi}");
    }
}

#[test]
fn mle_on_mcar_data_is_flat() {
    let text = BASE
        .replace(
            "kind = \"class_bernoulli\"\nphi = [0.9, 0.2]",
            "kind = \"mcar\"\nrate = 0.4",
        )
        .replace(
            "[mle]\nepochs = 10",
            "[mle]\nepochs = 20\nsolver = \"newton\"\nfreeze_theta = true",
        );
    let (dir, config) = generated(&text);
    ok(&["estimate"], &config, &dir.path().join("e"));
    let phi: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("e/phi.json"))).unwrap();
    let rate = phi["n_labeled"].as_f64().unwrap() / phi["n"].as_f64().unwrap();
    for v in phi["phi"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - rate).abs() < 0.05, "{phi} vs {rate}");
    }
}

#[test]
fn moment_mechanism_tracks_phi_better_than_mcar() {
    let (dir, config) = generated(&BASE.replace("epochs = 3", "epochs = 5"));
    let mse = |mechanism: &str, out: &str| {
        let text = fs::read_to_string(&config)
            .unwrap()
            .replace("[train]\n", &format!("[train]\nmechanism = {mechanism}\n"));
        let cfg = dir.path().join(format!("{out}.toml"));
        fs::write(&cfg, text).unwrap();
        ok(&["train"], &cfg, &dir.path().join(out));
        let report: serde_json::Value =
            serde_json::from_slice(&read(&dir.path().join(out).join("report.json"))).unwrap();
        report["phi_mse"].as_f64().unwrap()
    };
    let mcar = mse("{ kind = \"mcar\" }", "mcar");
    let moment = mse("{ kind = \"moment_buffered\" }", "moment");
    assert!(moment < mcar, "{moment} vs {mcar}");
}
