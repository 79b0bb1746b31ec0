use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use crate::nn::ModelConfig;
use crate::scene::{generate_scene, split_dataset, write_dataset, SceneSpec};

use super::*;

fn tiny_scene_spec() -> SceneSpec {
    SceneSpec {
        height: 16,
        width: 16,
        count_min: 2,
        count_max: 6,
        clusters_min: 1,
        clusters_max: 2,
        ..SceneSpec::default()
    }
}

fn tiny_model() -> ModelConfig {
    let parse = |s: &str| s.parse().unwrap();
    ModelConfig {
        in_channels: 1,
        extractor: [
            "k(3,3)-c6-s1-p1-d1-relu",
            "maxpooling(2,2)",
            "k(3,3)-c8-s1-p1-d1-relu",
            "maxpooling(2,2)",
        ]
        .iter()
        .map(|s| parse(s))
        .collect(),
        regressor_head: vec![parse("k(1,1)-c1-s1-p0-d1-relu")],
        seg_head_template: vec![parse("k(1,1)-c2-s1-p0-d1")],
        num_seg_heads: 3,
        downsample_factor: 4,
        seg_classes: 2,
    }
}

fn tiny_cfg(method: Method, dataset_dir: std::path::PathBuf, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default_desk(method, dataset_dir, seed);
    cfg.model = tiny_model();
    cfg.epochs = 2;
    cfg.steps_per_epoch = 6;
    cfg.eval_epochs = 1;
    cfg.lr = 2e-3;
    cfg.lr_halve_epochs = 1;
    cfg.sigma = 1.0;
    cfg
}

fn tiny_pools(n_labeled: usize, n_unlabeled: usize) -> (Vec<crate::scene::Scene>, Vec<crate::scene::Scene>) {
    let spec = tiny_scene_spec();
    let labeled = (0..n_labeled as u64)
        .map(|s| generate_scene(s, &spec).unwrap())
        .collect();
    let unlabeled = (0..n_unlabeled as u64)
        .map(|s| generate_scene(1000 + s, &spec).unwrap())
        .collect();
    (labeled, unlabeled)
}

#[test]
fn lr_schedule_is_exact() {
    let lr0 = 1e-3;
    for epoch in 0..100 {
        let expect = lr0 * 2f64.powi(-((epoch / 20) as i32));
        assert_eq!(lr_at_epoch(lr0, 20, epoch), expect);
    }
    assert_eq!(lr_at_epoch(1.0, 1, 3), 0.125);
}

#[test]
fn schedule_draws_one_of_each() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (li, ui) = schedule_step(&mut rng, 3, 200).unwrap();
        assert!(li < 3);
        assert!(ui.unwrap() < 200);
    }
    // label-only style: no unlabeled pool
    let (_, ui) = schedule_step(&mut rng, 3, 0).unwrap();
    assert!(ui.is_none());
    assert!(schedule_step(&mut rng, 0, 10).is_err());

    // same seed, same sequence
    let seq = |seed: u64| -> Vec<(usize, Option<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| schedule_step(&mut rng, 7, 31).unwrap()).collect()
    };
    assert_eq!(seq(9), seq(9));
    assert_ne!(seq(9), seq(10));
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        let parsed: Method = m.name().parse().unwrap();
        assert_eq!(parsed, m);
    }
    assert!("mean-teacher".parse::<Method>().is_err());
}

#[test]
fn config_validation_rejects_bad_fields() {
    let (labeled, unlabeled) = tiny_pools(3, 2);
    let mut cfg = tiny_cfg(Method::Irast, "unused".into(), 0);
    cfg.t_p = 0.5;
    assert!(train_with_data(&cfg, &labeled, &unlabeled).is_err());

    let mut cfg = tiny_cfg(Method::Irast, "unused".into(), 0);
    cfg.lr = 0.0;
    assert!(train_with_data(&cfg, &labeled, &unlabeled).is_err());

    let mut cfg = tiny_cfg(Method::Irast, "unused".into(), 0);
    cfg.ratios = vec![0.5, 0.2];
    assert!(train_with_data(&cfg, &labeled, &unlabeled).is_err());
}

#[test]
fn count_metrics_hand_values() {
    // counts (10,12) and (20,17): MAE 2.5, RMS error sqrt(6.5)
    let (mae, mse) = count_metrics(&[(10.0, 12), (20.0, 17)]);
    assert!((mae - 2.5).abs() < 1e-12);
    assert!((mse - 6.5f64.sqrt()).abs() < 1e-12);

    let (mae, mse) = count_metrics(&[(3.0, 3), (7.0, 7)]);
    assert_eq!((mae, mse), (0.0, 0.0));
}

#[test]
fn mae_never_exceeds_rms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    use rand::Rng;
    for _ in 0..50 {
        let counts: Vec<(f64, usize)> = (0..10)
            .map(|_| (rng.random_range(0.0..30.0), rng.random_range(0..30)))
            .collect();
        let (mae, mse) = count_metrics(&counts);
        assert!(mae <= mse + 1e-12);
    }
}

#[test]
fn label_only_trains_without_heads_or_unlabeled_data() {
    let (labeled, _) = tiny_pools(4, 0);
    let cfg = tiny_cfg(Method::LabelOnly, "unused".into(), 3);
    let outcome = train_with_data(&cfg, &labeled, &[]).unwrap();
    assert_eq!(outcome.bundle.cfg.num_seg_heads, 0);
    assert_eq!(outcome.history.len(), 2);
    assert!(outcome.best_val_mae.is_finite());
}

#[test]
fn every_method_completes_a_tiny_run() {
    let (labeled, unlabeled) = tiny_pools(4, 3);
    for method in Method::ALL {
        let cfg = tiny_cfg(method, "unused".into(), 1);
        let outcome = train_with_data(&cfg, &labeled, &unlabeled)
            .unwrap_or_else(|e| panic!("{} failed: {}", method, e));
        assert_eq!(outcome.history.len(), 2, "{}", method);
        for record in &outcome.history {
            assert!(record.val_mae.is_finite());
        }
        if matches!(method, Method::Irast | Method::IrastWoIr) {
            assert!(outcome.history[0].pseudo_precision.is_some());
        } else {
            assert!(outcome.history[0].pseudo_precision.is_none());
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (labeled, unlabeled) = tiny_pools(4, 3);
    let cfg = tiny_cfg(Method::Irast, "unused".into(), 7);
    let a = train_with_data(&cfg, &labeled, &unlabeled).unwrap();
    let b = train_with_data(&cfg, &labeled, &unlabeled).unwrap();
    assert_eq!(a.history, b.history);
    for (pa, pb) in a.bundle.parameters().iter().zip(b.bundle.parameters()) {
        assert_eq!(pa.to_vec(), pb.to_vec());
    }

    let mut cfg2 = cfg.clone();
    cfg2.seed = 8;
    let c = train_with_data(&cfg2, &labeled, &unlabeled).unwrap();
    assert_ne!(a.history, c.history);
}

fn write_tiny_dataset(dir: &std::path::Path) {
    let spec = tiny_scene_spec();
    let scenes: Vec<_> = (0..10).map(|s| generate_scene(s, &spec).unwrap()).collect();
    let split = split_dataset(scenes, 4, 4, 2, 0).unwrap();
    write_dataset(&split, &spec, dir).unwrap();
}

#[test]
fn run_training_writes_the_run_directory() {
    let data_dir = tempdir().unwrap();
    write_tiny_dataset(data_dir.path());
    let out = tempdir().unwrap();

    let cfg = tiny_cfg(Method::Irast, data_dir.path().to_path_buf(), 5);
    let run_dir = out.path().join("irast-5");
    let (summary, audit) = run_training(&cfg, &run_dir).unwrap();

    assert!(run_dir.join(CONFIG_FILE).is_file());
    assert!(run_dir.join(METRICS_FILE).is_file());
    assert!(run_dir.join(SUMMARY_FILE).is_file());
    assert!(run_dir.join(CHECKPOINT_FILE).is_file());
    assert_eq!(summary.n_labeled, 4);
    assert_eq!(summary.n_test, 2);
    assert!(summary.wall_time_s > 0.0);
    assert!(audit.touched_role("unlabeled"));

    // the persisted config must parse back to the run's config
    let text = std::fs::read_to_string(run_dir.join(CONFIG_FILE)).unwrap();
    let parsed: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, cfg);
}

#[test]
fn metrics_file_is_byte_reproducible() {
    let data_dir = tempdir().unwrap();
    write_tiny_dataset(data_dir.path());
    let out = tempdir().unwrap();

    let cfg = tiny_cfg(Method::Irast, data_dir.path().to_path_buf(), 5);
    let (_, _) = run_training(&cfg, &out.path().join("a")).unwrap();
    let (_, _) = run_training(&cfg, &out.path().join("b")).unwrap();
    let a = std::fs::read(out.path().join("a").join(METRICS_FILE)).unwrap();
    let b = std::fs::read(out.path().join("b").join(METRICS_FILE)).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn label_only_run_never_opens_unlabeled_files() {
    let data_dir = tempdir().unwrap();
    write_tiny_dataset(data_dir.path());
    let out = tempdir().unwrap();

    let cfg = tiny_cfg(Method::LabelOnly, data_dir.path().to_path_buf(), 5);
    let (_, audit) = run_training(&cfg, &out.path().join("lo")).unwrap();
    assert!(!audit.touched_role("unlabeled"));
    assert!(audit.touched_role("labeled"));
    assert!(audit.touched_role("test"));
}

#[test]
fn ablation_rows_carry_provenance() {
    let data_dir = tempdir().unwrap();
    write_tiny_dataset(data_dir.path());
    let out = tempdir().unwrap();

    let base = tiny_cfg(Method::Irast, data_dir.path().to_path_buf(), 2);
    let rows = run_ablation(
        &AblationGrid::ConfidenceThreshold(vec![0.6, 0.9]),
        &base,
        out.path(),
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let cfg: TrainConfig = serde_json::from_str(&row.config_json).unwrap();
        assert_eq!(cfg.dataset_dir, base.dataset_dir);
        assert!(row.test_mae.is_finite());
    }
    assert!(out.path().join("tp_0.6-2").is_dir());
    assert!(out.path().join("tp_0.9-2").is_dir());

    // singleton grid: exactly one run
    let one = run_ablation(
        &AblationGrid::TaskCount(vec![2]),
        &base,
        &out.path().join("single"),
    )
    .unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].cell, "tasks=2");

    assert!(run_ablation(&AblationGrid::TaskCount(vec![]), &base, out.path()).is_err());
    assert!(run_ablation(&AblationGrid::TaskCount(vec![9]), &base, out.path()).is_err());
}

#[test]
fn median_and_report_aggregation() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0]), 2.5);
    assert_eq!(median(&[5.0]), 5.0);

    // fixture run dirs with hand-written summaries
    let out = tempdir().unwrap();
    let mk = |name: &str, method: Method, seed: u64, mae: f64| {
        let dir = out.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let summary = RunSummary {
            method,
            seed,
            n_labeled: 4,
            n_unlabeled: 4,
            n_test: 2,
            best_val_mae: mae,
            test_mae: mae,
            test_mse: mae + 1.0,
            wall_time_s: 1.25,
            pseudo_precision: None,
            pseudo_coverage: None,
        };
        std::fs::write(
            dir.join(SUMMARY_FILE),
            format!("{}\n", serde_json::to_string(&summary).unwrap()),
        )
        .unwrap();
    };
    mk("irast-0", Method::Irast, 0, 3.0);
    mk("irast-1", Method::Irast, 1, 1.0);
    mk("irast-2", Method::Irast, 2, 2.0);
    mk("label-only-0", Method::LabelOnly, 0, 5.0);

    let rows = collect_report(&[out.path().to_path_buf()]).unwrap();
    assert_eq!(rows.len(), 4);
    let medians = method_medians(&rows);
    let irast = medians.iter().find(|(m, ..)| *m == Method::Irast).unwrap();
    assert_eq!(irast.1, 2.0);
    assert_eq!(irast.3, 3);

    let csv = report_csv(&rows);
    assert!(csv.starts_with("method,seed"));
    assert!(csv.contains("1.25"), "wall time must appear in the csv");

    let table = render_table(&rows);
    assert!(table.contains("irast") && table.contains("label-only"));

    assert!(collect_report(&[out.path().join("nonexistent")]).is_err());
}

#[test]
fn experiment_config_schema_is_strict() {
    let cfg = ExperimentConfig {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        train: tiny_cfg(Method::Irast, "data".into(), 0),
        generate: Some(DatasetSpec::benchmark()),
        output_dir: "runs".into(),
    };
    cfg.validate().unwrap();
    let json = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);

    // unknown fields are rejected
    let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
    doc["surprise"] = serde_json::json!(1);
    let strict: std::result::Result<ExperimentConfig, _> =
        serde_json::from_value(doc);
    assert!(strict.is_err());

    let mut wrong_version = cfg.clone();
    wrong_version.schema_version = 99;
    assert!(wrong_version.validate().is_err());
}
