use metacal::losses::{HyperKind, HyperParams};
use metacal::meta::{
    prepare_data, retrain_with_fixed_hparams, run_training, write_report, MetaObjective, RunReport, Splits,
    TrainConfig, TRAJECTORY_CSV_HEADER,
};
use metacal::metrics::BinStats;
use metacal::Error;
use serde_json::json;

fn tiny(extra: &[&str]) -> TrainConfig {
    let mut ov: Vec<String> = [
        "data.blobs.n=400",
        "data.test_n=200",
        "model.hidden=[16]",
        "optim.epochs=4",
        "optim.batch_size=32",
        "optim.lr_drops=[3]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ov.extend(extra.iter().map(|s| s.to_string()));
    TrainConfig::with_overrides(json!({}), &ov).unwrap()
}

fn run(cfg: &TrainConfig) -> metacal::meta::RunOutput {
    run_training(cfg, &prepare_data(cfg).unwrap()).unwrap()
}

#[test]
fn reports_are_deterministic() {
    let cfg = tiny(&["meta.enabled=true", "eval.corrupted_domains=true"]);
    let a = run(&cfg).report.to_json().unwrap();
    let b = run(&cfg).report.to_json().unwrap();
    assert_eq!(a, b);
    let other = run(&tiny(&["meta.enabled=true", "seed=1"])).report.to_json().unwrap();
    assert_ne!(a, other);
}

#[test]
fn report_round_trips_and_validates() {
    let cfg = tiny(&["meta.enabled=true", "eval.corrupted_domains=true"]);
    let report = run(&cfg).report;
    let parsed = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(parsed, report);
    assert_eq!(parsed.config, cfg);
    assert_eq!(parsed.epochs.len(), 4);
    assert_eq!(parsed.meta_updates as usize, parsed.omega_trajectory.len());
    let domains = parsed.corrupted_domains.unwrap();
    assert_eq!(domains.domains.len(), 7);
    assert!(domains.worst_ece >= domains.mean_ece);

    let mut bad = report.clone();
    bad.test.ece = 1.5;
    assert!(RunReport::from_json(&bad.to_json().unwrap()).is_err());
    let mut bad = report.clone();
    bad.reliability.bins.pop();
    assert!(RunReport::from_json(&bad.to_json().unwrap()).is_err());
    let mut bad = report.clone();
    bad.format = "something-else".into();
    assert!(RunReport::from_json(&bad.to_json().unwrap()).is_err());
    let text = report
        .to_json()
        .unwrap()
        .replacen("\"mode\"", "\"extra\": 1,\n  \"mode\"", 1);
    assert!(RunReport::from_json(&text).is_err());
}

#[test]
fn write_report_emits_all_files() {
    let cfg = tiny(&["meta.enabled=true", "meta.trajectory_stride=5"]);
    let report = run(&cfg).report;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/run");
    let paths = write_report(&report, &out).unwrap();
    assert_eq!(paths.len(), 3);

    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(RunReport::from_json(&text).unwrap(), report);

    let bins = BinStats::from_csv(&std::fs::read_to_string(out.join("reliability.csv")).unwrap()).unwrap();
    assert_eq!(bins.bins.len(), 15);
    assert_eq!(bins.total(), 200);

    let traj = std::fs::read_to_string(out.join("omega_trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some(TRAJECTORY_CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), report.omega_trajectory.len() * 4);
    assert!(report.omega_trajectory.iter().all(|p| p.iter % 5 == 0));

    // Rewriting replaces the files and leaves nothing else behind.
    write_report(&report, &out).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["omega_trajectory.csv", "reliability.csv", "report.json"]);
}

#[test]
fn meta_learning_moves_omega() {
    let cfg = tiny(&["meta.enabled=true", "meta.lr=0.01"]);
    let out = run(&cfg);
    let traj = &out.report.omega_trajectory;
    assert!(traj.windows(2).any(|w| w[0].values != w[1].values));
    assert_eq!(out.omega.unwrap().kind, HyperKind::LsVector);
}

#[test]
fn meta_loss_is_logged_only_with_meta_learning() {
    let plain = run(&tiny(&[])).report;
    assert!(plain.epochs.iter().all(|e| e.meta_loss.is_none()));
    assert!(plain.omega.is_none() && plain.omega_trajectory.is_empty());
    let meta = run(&tiny(&["meta.enabled=true", "meta.objective=dece_plus_ce"])).report;
    assert!(meta.epochs.iter().all(|e| e.meta_loss.is_some()));
}

#[test]
fn every_baseline_loss_trains() {
    for kind in [
        "brier",
        "focal",
        "flsd53",
        "label_smoothing",
        "ce_plus_dece",
        "ce_plus_mmce",
    ] {
        let report = run(&tiny(&[&format!("loss.kind={kind}")])).report;
        assert!(report.test.error < 0.6, "{kind}: {}", report.test.error);
    }
    for objective in ["ce", "mmce"] {
        let report = run(&tiny(&["meta.enabled=true", &format!("meta.objective={objective}")])).report;
        assert!(report.test.nll.is_finite());
    }
    for hyper in ["ls_scalar", "l2_unitwise"] {
        let out = run(&tiny(&["meta.enabled=true", &format!("meta.hyper={hyper}")]));
        let om = out.omega.unwrap();
        assert_eq!(om.values.len(), if hyper == "ls_scalar" { 1 } else { 16 * 4 + 4 });
    }
}

#[test]
fn early_stopping_keeps_best_validation_epoch() {
    let report = run(&tiny(&["eval.early_stopping=true", "optim.epochs=6"])).report;
    let best = report
        .epochs
        .iter()
        .min_by(|a, b| a.val_error.total_cmp(&b.val_error))
        .unwrap();
    assert_eq!(report.best_epoch, best.epoch);
    let last = run(&tiny(&["optim.epochs=6"])).report;
    assert_eq!(last.best_epoch, 5);
}

#[test]
fn snapshots_follow_the_configured_interval() {
    let out = run(&tiny(&["eval.snapshot_every=2"]));
    let epochs: Vec<usize> = out.snapshots.iter().map(|(e, _)| *e).collect();
    assert_eq!(epochs, [2, 4]);
    assert_eq!(out.snapshots[1].1, out.params);
}

#[test]
fn retraining_with_zero_omega_is_plain_training_on_the_merged_split() {
    let cfg = tiny(&[]);
    let data = prepare_data(&cfg).unwrap();
    let zeros = HyperParams::zeros(HyperKind::LsVector, 4, 16);
    let retrained = retrain_with_fixed_hparams(&zeros, &cfg, &data).unwrap();
    let merged = Splits {
        train: data.train.concat(&data.metaval).unwrap(),
        ..data.clone()
    };
    let plain = run_training(&cfg, &merged).unwrap();
    assert_eq!(retrained.params, plain.params);
    assert_eq!(retrained.report.test, plain.report.test);
    assert_eq!(retrained.report.mode, "retrain");
    assert_eq!(retrained.report.data.train_n, data.train.len() + data.metaval.len());
}

#[test]
fn retraining_echoes_the_loaded_omega() {
    let cfg = tiny(&["meta.enabled=true", "meta.lr=0.01"]);
    let data = prepare_data(&cfg).unwrap();
    let omega = run_training(&cfg, &data).unwrap().omega.unwrap();
    let reloaded = HyperParams::from_json(&omega.to_json().unwrap()).unwrap();
    let out = retrain_with_fixed_hparams(&reloaded, &cfg, &data).unwrap();
    let echoed = out.report.omega.unwrap();
    assert!(echoed
        .values
        .iter()
        .zip(&omega.values)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(out.report.meta_updates, 0);
}

#[test]
fn retraining_rejects_mismatched_hyperparameters() {
    let cfg = tiny(&[]);
    let data = prepare_data(&cfg).unwrap();
    let scalar = HyperParams::zeros(HyperKind::LsScalar, 4, 16);
    assert!(matches!(
        retrain_with_fixed_hparams(&scalar, &cfg, &data),
        Err(Error::Config(_))
    ));
    let l2 = HyperParams::zeros(HyperKind::L2Unitwise, 4, 8);
    let cfg = tiny(&["meta.hyper=l2_unitwise"]);
    assert!(matches!(
        retrain_with_fixed_hparams(&l2, &cfg, &data),
        Err(Error::Config(_))
    ));
}

#[test]
fn csv_data_source_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let gen = prepare_data(&cfg).unwrap();
    let train_path = dir.path().join("train.csv");
    let test_path = dir.path().join("test.csv");
    gen.train
        .concat(&gen.val)
        .unwrap()
        .concat(&gen.metaval)
        .unwrap()
        .save_csv(&train_path)
        .unwrap();
    gen.test.save_csv(&test_path).unwrap();
    let cfg = TrainConfig::with_overrides(
        serde_json::to_value(&cfg).unwrap(),
        &[
            format!("data.train_csv={}", json!(train_path)),
            format!("data.test_csv={}", json!(test_path)),
        ],
    )
    .unwrap();
    let data = prepare_data(&cfg).unwrap();
    assert_eq!(data.test, metacal::data::Dataset::load_csv(&test_path).unwrap());
    assert_eq!(data.train.len() + data.val.len() + data.metaval.len(), 400);
    run_training(&cfg, &data).unwrap();
}

#[test]
fn dece_objective_is_the_default() {
    assert_eq!(TrainConfig::default().meta.objective, MetaObjective::Dece);
}
