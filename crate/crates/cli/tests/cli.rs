use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn roofseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roofseg"))
        .current_dir(dir)
        .args(args)
        .env_remove("ROOFSEG_EPOCHS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.cfg"), "epochs = 2\nlearnin_rate = 1e-3\n").unwrap();
    let o = roofseg(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learnin_rate"));

    assert_eq!(code(&roofseg(dir.path(), &["gen-data", "--set", "epochs=many"])), 2);
    assert_eq!(code(&roofseg(dir.path(), &["gen-data", "--set", "families=gable,dome"])), 2);
    assert_eq!(code(&roofseg(dir.path(), &["gen-data", "--config", "missing.cfg"])), 2);
}

#[test]
fn missing_data_exits_with_3() {
    let dir = TempDir::new().unwrap();
    let o = roofseg(dir.path(), &["train", "--set", "data_dir=nowhere"]);
    assert_eq!(code(&o), 3);
    let o = roofseg(dir.path(), &["eval", "--checkpoint", "none.ckpt", "--data-dir", "nowhere"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gen_data_writes_every_roof_and_baselines_run() {
    let dir = TempDir::new().unwrap();
    let set = ["--set", "train_count=4", "--set", "test_count=2", "--set", "points=300", "--set", "families=gable,hip"];
    let mut args = vec!["gen-data"];
    args.extend(set);
    let o = roofseg(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.path().join("data");
    let roofs = fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "xyzl"))
        .count();
    assert_eq!(roofs, 6);

    let mut args = vec!["baseline", "--method", "ransac"];
    args.extend(set);
    let o = roofseg(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ransac"));
    assert!(dir.path().join("run/metrics_test_ransac.json").exists());
}
