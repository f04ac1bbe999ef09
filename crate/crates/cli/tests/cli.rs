use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
size = 32
n_train = 4
n_val = 2
n_test = 2
n_structures = 3

[net]
depth = 2
base_channels = 4

[train.synthesis]
max_epochs = 1
batch_size = 4

[train.registration]
max_epochs = 1
batch_size = 4

[train.reconstruction]
max_epochs = 1
batch_size = 4
"#;

fn ddmc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddmc"))
        .current_dir(dir)
        .args(args)
        .env_remove("DDMC_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn assert_single_error_line(o: &Output, kind: &str) {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with(&format!("ddmc: error kind={kind} ")), "{err}");
}

#[test]
fn help_exits_zero_and_lists_flags() {
    let dir = workspace();
    let top = ddmc(dir.path(), &["--help"]);
    assert_eq!(code(&top), 0);
    for sub in ["gen-data", "make-masks", "train", "eval", "ablate", "render"] {
        assert!(stdout(&top).contains(sub), "{sub} missing from top-level help");
        let o = ddmc(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        for flag in ["--config", "--seed", "--force", "--verbose"] {
            assert!(stdout(&o).contains(flag), "{sub} --help lacks {flag}");
        }
    }
    let train = stdout(&ddmc(dir.path(), &["train", "--help"]));
    for flag in ["--stage", "--data", "--run"] {
        assert!(train.contains(flag));
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = workspace();
    for args in [&["frobnicate"][..], &[][..], &["train", "--no-such-flag"][..], &["ablate"][..]] {
        let o = ddmc(dir.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert_single_error_line(&o, "usage");
    }
}

#[test]
fn print_defaults_is_a_valid_config() {
    let dir = workspace();
    let o = ddmc(dir.path(), &["--print-defaults"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for key in ["seed", "[data]", "[plan]", "[loss]", "[net]", "[mask]", "[train.synthesis]", "[paths]"] {
        assert!(text.contains(key), "defaults lack {key}");
    }
    std::fs::write(dir.path().join("defaults.toml"), &text).unwrap();
    let o = ddmc(dir.path(), &["--config", "defaults.toml", "make-masks", "--accel", "4,8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mask = std::fs::read_to_string(dir.path().join("data/masks/mask_8x.txt")).unwrap();
    assert_eq!(mask.lines().filter(|l| *l == "1").count(), 8);
    assert!(dir.path().join("data/masks/mask_4x.pgm").exists());
}

#[test]
fn bad_config_exits_two() {
    let dir = workspace();
    std::fs::write(dir.path().join("bad.toml"), "[data]\nsize = 32\nszie = 4\n").unwrap();
    let o = ddmc(dir.path(), &["--config", "bad.toml", "gen-data"]);
    assert_eq!(code(&o), 2);
    assert_single_error_line(&o, "validation");
    assert!(stderr(&o).contains("szie"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn missing_files_exit_three() {
    let dir = workspace();
    let o = ddmc(dir.path(), &["--config", "nope.toml", "gen-data"]);
    assert_eq!(code(&o), 3);
    assert_single_error_line(&o, "io");
    let o = ddmc(dir.path(), &["--config", "tiny.toml", "train", "--data", "absent"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let dir = workspace();
    for out in ["a", "b"] {
        let o = ddmc(dir.path(), &["--config", "tiny.toml", "--seed", "7", "gen-data", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(a.len(), 8 + 2);
    assert_eq!(a, b);
    let snapshot = std::fs::read_to_string(dir.path().join("a/config.resolved.toml")).unwrap();
    assert!(snapshot.contains("seed = 7"));
    assert!(snapshot.contains("mm_per_px = 6.0"));

    let again = ddmc(dir.path(), &["--config", "tiny.toml", "--seed", "7", "gen-data", "--out", "a"]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    let forced = ddmc(dir.path(), &["--config", "tiny.toml", "--seed", "7", "--force", "gen-data", "--out", "a"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(files(&dir.path().join("a")), b);
}

#[test]
fn out_of_order_stage_exits_two_and_writes_nothing() {
    let dir = workspace();
    assert_eq!(code(&ddmc(dir.path(), &["--config", "tiny.toml", "gen-data"])), 0);
    let o = ddmc(dir.path(), &["--config", "tiny.toml", "train", "--stage", "reconstruction"]);
    assert_eq!(code(&o), 2);
    assert_single_error_line(&o, "validation");
    assert!(stderr(&o).contains("`synthesis` must be trained before `reconstruction`"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());

    assert_eq!(code(&ddmc(dir.path(), &["--config", "tiny.toml", "train", "--stage", "synthesis"])), 0);
    let o = ddmc(dir.path(), &["--config", "tiny.toml", "train", "--stage", "reconstruction"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`registration` must be trained before"), "{}", stderr(&o));
    assert!(!dir.path().join("run/reconstruction.ckpt").exists());
}

#[test]
fn full_runs_reproduce_checkpoints_and_metrics() {
    let dir = workspace();
    assert_eq!(code(&ddmc(dir.path(), &["--config", "tiny.toml", "gen-data"])), 0);
    for run in ["r1", "r2"] {
        let o = ddmc(dir.path(), &["--config", "tiny.toml", "train", "--run", run]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = ddmc(dir.path(), &["--config", "tiny.toml", "eval", "--run", run]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).starts_with("cell_id,domain_mode,contrast_mode,accel,stage,branch,"));
    }
    let keep = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<_> {
        v.into_iter()
            .filter(|(p, _)| !p.to_string_lossy().ends_with(".timing.csv"))
            .collect()
    };
    let (a, b) = (keep(files(&dir.path().join("r1"))), keep(files(&dir.path().join("r2"))));
    let names: Vec<String> = a.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    for want in ["synthesis.ckpt", "registration.ckpt", "reconstruction.ckpt", "metrics.csv", "per_record.csv"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    assert_eq!(a, b);

    let o = ddmc(dir.path(), &["--config", "tiny.toml", "render", "--run", "r1", "--records", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("r1/report/report.csv")).unwrap();
    assert!(report.lines().any(|l| l.contains(",reconstruction_image,")));
    let o = ddmc(dir.path(), &["--config", "tiny.toml", "eval", "--run", "r1"]);
    assert_eq!(code(&o), 2, "eval must refuse to overwrite metrics");
}

#[test]
fn ablate_one_cell_writes_one_row() {
    let dir = workspace();
    assert_eq!(code(&ddmc(dir.path(), &["--config", "tiny.toml", "gen-data"])), 0);
    let o = ddmc(dir.path(), &["--config", "tiny.toml", "ablate", "--grid", "dual,fused,4x", "--out", "abl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("dual-fused-4x,"));
    assert!(dir.path().join("abl/dual-fused-4x/reconstruction.ckpt").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_ddmc"))
        .current_dir(dir.path())
        .args(["--config", "tiny.toml", "ablate", "--grid", "image,single,4x", "--out", "abl2"])
        .env("DDMC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
