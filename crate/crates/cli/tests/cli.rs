use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sjepa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sjepa")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SYNTH: &str = r#"
seed = 4
[synth]
subjects = 2
channels = 8
duration_s = 20.0
[synth.task]
kind = "frequency"
frequencies = [10.0, 20.0]
epochs_per_class = 5
epoch_length_s = 1.1875
"#;

const PRETRAIN: &str = r#"
seed = 1
corpus = "corpus"
interval_s = 2.0
[pretrain]
example_length_s = 1.1875
mask_diameter_fraction = 0.6
batch_size = 4
patience = 2
max_epochs = 4
[pretrain.model.encoder]
depth = 1
[pretrain.model.predictor]
depth = 1
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.toml" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn corpus(dir: &Path) {
    write(dir, "synth.toml", SYNTH);
    let o = sjepa(dir, &["synth", "--config", "synth.toml", "--out", "corpus"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_writes_requested_subjects_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    assert_eq!(fs::read_dir(dir.path().join("corpus/recordings")).unwrap().count(), 2);
    let o = sjepa(dir.path(), &["synth", "--config", "synth.toml", "--out", "again"]);
    assert_eq!(code(&o), 0);
    assert_eq!(files(&dir.path().join("corpus")), files(&dir.path().join("again")));
    // the manifest alone reproduces the run
    let o = sjepa(dir.path(), &["synth", "--config", "corpus/manifest.toml", "--out", "from-manifest"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(files(&dir.path().join("corpus")), files(&dir.path().join("from-manifest")));
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", "[synth]\nsubjects = 2\nchannels = 8\n");
    let o = sjepa(dir.path(), &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("duration_s"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn pretrain_writes_best_checkpoint_and_reproduces_losses() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    write(dir.path(), "pre.toml", PRETRAIN);
    for out in ["a", "b"] {
        let o = sjepa(dir.path(), &["pretrain", "--config", "pre.toml", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(dir.path().join(out).join("best.ckpt").is_file());
        assert!(dir.path().join(out).join("manifest.toml").is_file());
    }
    let a = fs::read(dir.path().join("a/losses.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/losses.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("step,epoch,split,loss\n"));
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    write(dir.path(), "pre.toml", PRETRAIN);
    let o = sjepa(dir.path(), &["pretrain", "--config", "pre.toml", "--out", "run", "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn missing_inputs_exit_2_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pre.toml", PRETRAIN);
    let o = sjepa(dir.path(), &["pretrain", "--config", "pre.toml", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("corpus"), "{}", stderr(&o));

    let o = sjepa(dir.path(), &["report", "nowhere.csv", "--out", "rep"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.csv"));

    corpus(dir.path());
    let ft = "corpus = \"corpus\"\ncheckpoint = \"gone.ckpt\"\narchitecture = \"pre-local\"\nstrategy = \"full\"\n";
    write(dir.path(), "ft.toml", ft);
    let o = sjepa(dir.path(), &["finetune", "--config", "ft.toml", "--out", "ft"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gone.ckpt"), "{}", stderr(&o));
}

#[test]
fn baseline_with_new_strategy_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    write(dir.path(), "ft.toml", "corpus = \"corpus\"\narchitecture = \"post-local\"\nstrategy = \"new\"\n");
    let o = sjepa(dir.path(), &["finetune", "--config", "ft.toml", "--out", "ft"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("full"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    write(dir.path(), "pre.toml", &PRETRAIN.replace("batch_size = 4", "batch_size = 4\nlearning_rate = 1e30"));
    let o = sjepa(dir.path(), &["pretrain", "--config", "pre.toml", "--out", "run"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn report_ranks_two_pipelines() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("# sjepa-results v1\npipeline,dataset,subject,fold,metric,score,epochs\n");
    for fold in 0..3 {
        text.push_str(&format!("a,d,S1,{fold},accuracy,0.9,5\nb,d,S1,{fold},accuracy,0.6,5\n"));
    }
    write(dir.path(), "results.csv", &text);
    let o = sjepa(dir.path(), &["report", "results.csv", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ranking = fs::read_to_string(dir.path().join("rep/ranking.csv")).unwrap();
    let lines: Vec<&str> = ranking.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("a,1.000000,3,0"));
    assert!(dir.path().join("rep/scores_by_paradigm.csv").is_file());
    assert!(dir.path().join("rep/ranks_long.csv").is_file());

    // a gap is an error that names the missing fold
    write(dir.path(), "gap.csv", &text.replace("b,d,S1,2,accuracy,0.6,5\n", ""));
    let o = sjepa(dir.path(), &["report", "gap.csv", "--out", "rep2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("b on d/S1/2"), "{}", stderr(&o));
}

#[test]
fn grid_resumes_to_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    write(dir.path(), "pre.toml", &PRETRAIN.replace("max_epochs = 4", "max_epochs = 1"));
    let o = sjepa(dir.path(), &["pretrain", "--config", "pre.toml", "--out", "pre"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = r#"
seed = 5
[grid]
lengths_s = [1.1875]
fractions = [0.6]
architectures = ["pre-local"]
strategies = ["new"]
[[datasets]]
name = "toy"
corpus = "corpus"
[checkpoints]
"1s-60%" = "pre/best.ckpt"
[downstream]
patience = 1
max_epochs = 2
[model.encoder]
depth = 1
[model.predictor]
depth = 1
[folds]
n_folds = 2
"#;
    write(dir.path(), "grid.toml", grid);
    let o = sjepa(dir.path(), &["grid", "--config", "grid.toml", "--out", "whole", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let whole = fs::read_to_string(dir.path().join("whole/results.csv")).unwrap();
    // 2 pipelines x 2 subjects x 2 folds
    assert_eq!(whole.lines().count(), 2 + 8);

    write(dir.path(), "part.toml", &grid.replace("seed = 5", "seed = 5\nmax_new_cells = 3"));
    let o = sjepa(dir.path(), &["grid", "--config", "part.toml", "--out", "resumed"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("resumed/results.csv")).unwrap().lines().count(), 2 + 3);
    let o = sjepa(dir.path(), &["grid", "--config", "grid.toml", "--out", "resumed", "--jobs", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("resumed/results.csv")).unwrap(), whole);

    let missing = grid.replace("\"1s-60%\" = \"pre/best.ckpt\"", "");
    write(dir.path(), "missing.toml", &missing);
    let o = sjepa(dir.path(), &["grid", "--config", "missing.toml", "--out", "m"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("1s-60%"), "{}", stderr(&o));
}
