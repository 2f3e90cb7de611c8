use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tclab::config::ExperimentConfig;
use tclab::experiment::{self, Checkpoint};

fn tclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tclab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.toml")
        .to_str()
        .unwrap()
        .to_string()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The error line is a single `error[<code>]: ...` line.
fn assert_error(o: &Output, exit: i32, code: &str) {
    assert_eq!(o.status.code(), Some(exit), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{code}]: ")), "{err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 2\nlearning_rate = 0.1\n");
    assert_error(&tclab(&["train", "--config", &cfg]), 2, "config");
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nmargin = -1.0\n");
    assert_error(&tclab(&["train", "--config", &cfg]), 2, "config");
}

#[test]
fn missing_config_file_exits_2() {
    assert_error(&tclab(&["train", "--config", "/nonexistent/cfg.toml"]), 2, "io");
}

#[test]
fn unknown_flag_exits_2() {
    assert_error(&tclab(&["train", "--bogus"]), 2, "usage");
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        &std::fs::read_to_string(toy())
            .unwrap()
            .replace("lr_post_pool = 1e-2", "lr_post_pool = 1e6"),
    );
    assert_error(&tclab(&["train", "--config", &cfg, "--out", s(&out)]), 3, "non_finite");
}

#[test]
fn cross_domain_eval_without_second_domain_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(tclab(&["train", "--config", &toy(), "--out", s(&run)]).status.success());
    let o = tclab(&[
        "eval",
        "--embeddings",
        s(&run.join("embeddings.csv")),
        "--cross-domain",
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_error(&o, 4, "invalid_argument");
}

#[test]
fn eval_of_embed_output_matches_eval_of_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| -> PathBuf { dir.path().join(n) };
    let toy = toy();
    assert!(tclab(&["gen-data", "--config", &toy, "--out", s(&p("data"))])
        .status
        .success());
    let data = p("data").join("dataset.jsonl");
    assert!(tclab(&["train", "--config", &toy, "--out", s(&p("run")), "--pca2"])
        .status
        .success());
    let ck = p("run").join("checkpoint.json");

    assert!(tclab(&[
        "embed",
        "--checkpoint",
        s(&ck),
        "--dataset",
        s(&data),
        "--out",
        s(&p("emb"))
    ])
    .status
    .success());
    let via_csv = tclab(&[
        "eval",
        "--embeddings",
        s(&p("emb").join("embeddings.csv")),
        "--graded",
        "--out",
        s(&p("e1")),
    ]);
    let via_ck = tclab(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--dataset",
        s(&data),
        "--graded",
        "--out",
        s(&p("e2")),
    ]);
    assert!(via_csv.status.success() && via_ck.status.success());
    let a = std::fs::read(p("e1").join("metrics.json")).unwrap();
    let b = std::fs::read(p("e2").join("metrics.json")).unwrap();
    assert_eq!(a, b);

    // the train run evaluates without sub-category grades
    let c = tclab(&["eval", "--checkpoint", s(&ck), "--config", &toy, "--out", s(&p("e3"))]);
    assert!(c.status.success());
    assert_eq!(
        std::fs::read(p("e3").join("metrics.json")).unwrap(),
        std::fs::read(p("run").join("metrics.json")).unwrap()
    );
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = tclab(&["train", "--config", &toy(), "--out", s(&run), "--seed", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in [
        "checkpoint.json",
        "centers.json",
        "loss_curve.csv",
        "embeddings.csv",
        "metrics.json",
        "config.resolved.toml",
    ] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let resolved = std::fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 8"), "{resolved}");
    let curve = std::fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,total,softmax,metric_component,accuracy\n"));
    assert_eq!(curve.lines().count(), 1 + 31);
}

#[test]
fn zero_epoch_checkpoint_is_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &std::fs::read_to_string(toy())
            .unwrap()
            .replace("epochs = 30", "epochs = 0"),
    );
    let run = dir.path().join("run");
    assert!(tclab(&["train", "--config", &cfg, "--out", s(&run)]).status.success());

    let cfg = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    let split = experiment::dataset_for(&cfg).unwrap();
    let init = experiment::build_model(&cfg, &cfg.network_dims(&split.spec), cfg.seed).unwrap();
    assert_eq!(Checkpoint::load(&run.join("checkpoint.json")).unwrap().model, init);
}

#[test]
fn gradcheck_writes_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = tclab(&[
        "gradcheck",
        "--configs",
        "20",
        "--networks",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(table.starts_with("name,configs,max_params,max_rel_err,tolerance,status\n"));
    assert_eq!(table.lines().count(), 9);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",pass")), "{table}");
}

#[test]
fn sweep_and_compare_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let toy = std::fs::read_to_string(toy())
        .unwrap()
        .replace("epochs = 30", "epochs = 2");
    let cfg = write_config(dir.path(), &toy);
    let out = dir.path().join("sweep");
    let o = tclab(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--param",
        "margin",
        "--values",
        "1,2",
        "--parallel",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("margin,auc,map\n"));
    assert_eq!(csv.lines().count(), 3);

    let out = dir.path().join("compare");
    let o = tclab(&["compare", "--config", &cfg, "--out", s(&out), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let losses: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(losses, ["softmax", "center+softmax", "triplet", "tcl", "tcl+softmax"]);
    assert!(out.join("config.resolved.toml").is_file());
}

#[test]
fn parallel_compare_equals_serial() {
    let dir = tempfile::tempdir().unwrap();
    let toy = std::fs::read_to_string(toy())
        .unwrap()
        .replace("epochs = 30", "epochs = 2")
        .replace("seeds = [3]", "seeds = [3, 4]");
    let cfg = write_config(dir.path(), &toy);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(tclab(&["compare", "--config", &cfg, "--out", s(&a)]).status.success());
    assert!(tclab(&["compare", "--config", &cfg, "--out", s(&b), "--parallel", "3"])
        .status
        .success());
    for f in ["compare.csv", "compare.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}
