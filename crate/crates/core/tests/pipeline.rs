use std::fs;
use std::path::Path;

use roofseg::pipeline::*;
use roofseg::roofgen::{load_split, Split};
use roofseg::Error;
use tempfile::TempDir;

fn small_config(root: &Path, roofs: usize, epochs: u64) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [("points", "256"), ("resample", "256"), ("decoders", "4"), ("batch_size", "4"), ("edge_k", "10"), ("n_knn", "10")] {
        c.set(k, v).unwrap();
    }
    c.train_count = roofs;
    c.test_count = 3;
    c.epochs = epochs;
    c.data_dir = root.join("data");
    c.out_dir = root.join("run");
    c
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let text = "epochs = 3 # short\n\nfamilies = gable, hip\neamm = false\nlearning_rate = 2e-4\n";
    let c = RunConfig::parse(text).unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.families.len(), 2);
    assert!(!c.eamm);
    assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);

    assert!(matches!(RunConfig::parse("epoch = 3"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("epochs 3"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("iou_threshold = 1.5"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("families = dome"), Err(Error::Config(_))));
}

#[test]
fn environment_overrides_follow_the_file() {
    let mut c = RunConfig::parse("seed = 4\nbatch_size = 2").unwrap();
    let env = [("ROOFSEG_SEED".to_string(), "9".to_string()), ("HOME".to_string(), "/x".to_string())];
    c.apply_env(env).unwrap();
    assert_eq!((c.seed, c.batch_size), (9, 2));
    let bad = [("ROOFSEG_NOPE".to_string(), "1".to_string())];
    assert!(matches!(c.apply_env(bad), Err(Error::Config(_))));
    assert_eq!(Error::Config(String::new()).exit_code(), 2);
}

#[test]
fn training_runs_resumes_and_evaluates() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path(), 8, 2);
    assert_eq!(cmd_gen_data(&config).unwrap(), 11);

    let mut epochs_seen = Vec::new();
    let summary = train(&config, None, |ev| {
        if let TrainEvent::Epoch { epoch, .. } = ev {
            epochs_seen.push(*epoch);
        }
    })
    .unwrap();
    assert_eq!(epochs_seen, vec![1, 2]);
    assert_eq!(summary.steps, 4);
    let csv = read_loss_csv(&summary.loss_csv).unwrap();
    assert_eq!(csv.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(csv.values().all(|b| b.total.is_finite() && b.total > 0.0));

    // checkpoint bytes survive a load and save
    let first = checkpoint_path(&config.out_dir, 1);
    let bytes = fs::read(&first).unwrap();
    let copy = dir.path().join("copy.ckpt");
    Checkpoint::load(&first).unwrap().save(&copy).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), bytes);

    // resuming from epoch 1 reproduces epoch 2
    let mut resumed = config.clone();
    resumed.out_dir = dir.path().join("resumed");
    train(&resumed, Some(&first), |_| {}).unwrap();
    let a = Checkpoint::load(&checkpoint_path(&config.out_dir, 2)).unwrap();
    let b = Checkpoint::load(&checkpoint_path(&resumed.out_dir, 2)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.moments, b.moments);
    assert_eq!(a.rng, b.rng);

    let mut other = config.clone();
    other.seed = 1;
    assert!(matches!(train(&other, Some(&first), |_| {}), Err(Error::Config(_))));
    assert!(matches!(train_or_resume(&other, |_| {}), Err(Error::Config(_))));
    let again = train_or_resume(&config, |_| panic!("a finished run trains no further")).unwrap();
    assert_eq!(again.steps, summary.steps);

    let out = dir.path().join("eval");
    let reports = cmd_eval(&summary.final_checkpoint, &config.data_dir, Split::Test, None, &[Baseline::Ransac], &out).unwrap();
    assert_eq!(reports.len(), 2);
    for name in ["metrics_test_roofseg.json", "metrics_test_ransac.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap();
        for key in ["mCov", "mWCov", "mPrec", "mRec"] {
            let x = v["report"][key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x), "{name} {key} = {x}");
        }
        assert_eq!(v["report"]["samples"].as_array().unwrap().len(), 3);
    }
    assert!(out.join("summary.csv").exists());

    let samples = load_split(&config.data_dir, Split::Test, config.edge_k).unwrap();
    let input = dir.path().join("roof.xyz");
    let text: String = samples[0].1.cloud.coords().iter().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect();
    fs::write(&input, text).unwrap();
    let output = dir.path().join("roof.xyzl");
    let r = cmd_segment(&summary.final_checkpoint, &input, &output, Some(true)).unwrap();
    assert_eq!(r.points, samples[0].1.cloud.len());
    let labels: Vec<usize> = fs::read_to_string(&output)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(labels.len(), r.points);
    assert!(labels.iter().all(|l| r.positive_masks.contains(l)));
    assert!(output.with_extension("xyzl.json").exists());
}

#[test]
fn loss_decreases_on_a_small_dataset() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path(), 16, 10);
    cmd_gen_data(&config).unwrap();
    let summary = train(&config, None, |_| {}).unwrap();
    let m = &summary.epoch_means;
    let head = (m[0] + m[1]) / 2.0;
    let tail = (m[8] + m[9]) / 2.0;
    assert!(tail < 0.9 * head, "epoch means {m:?}");
}

#[test]
fn missing_data_is_not_a_config_error() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path(), 2, 1);
    let err = train(&config, None, |_| {}).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
