use growsched_core::evalkit::read_reports_csv;
use growsched_core::growing::{GrowingModel, TrainMode};
use growsched_core::oracle::GroupingConfig;
use growsched_core::pipeline::{run, Arm, RunConfig, REPORT_CSV};
use growsched_core::trace::{DatasetSnapshot, GrowthInjection};

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.trace.node_count = 50;
    cfg.trace.task_count = 2_000;
    cfg.trace.span_us = 2_000_000_000;
    cfg.trace.template_count = 20;
    cfg.trace.growth_schedule = (1..=4)
        .map(|g| GrowthInjection {
            time: g * 400_000_000,
            count: 2,
        })
        .collect();
    cfg.grouping = GroupingConfig { increment: 5 };
    cfg.train.epochs_limit = 15;
    cfg.train.max_attempts = 2;
    cfg
}

#[test]
fn summaries_agree_with_reports() {
    let out = run(&small(2)).unwrap();
    for arm in [Arm::Growing, Arm::FullyRetrain] {
        let reports: Vec<_> = out.reports_for(arm).collect();
        let s = out.summary(arm).unwrap();
        assert_eq!(s.steps, reports.len());
        assert_eq!(s.total_epochs, reports.iter().map(|r| r.epochs as u64).sum::<u64>());
        assert_eq!(
            s.failed_steps,
            reports.iter().filter(|r| r.mode == TrainMode::Failed.name()).count()
        );
        let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
        assert!((s.mean_accuracy - mean).abs() < 1e-12);
        let passing = reports.iter().filter(|r| r.accuracy > 0.95).count() as f64;
        assert!((s.accuracy_pass_rate - passing / reports.len() as f64).abs() < 1e-12);
        let with_g0: Vec<f64> = reports.iter().filter_map(|r| r.group0_f1).collect();
        assert_eq!(s.group0_f1_pass_rate.is_some(), !with_g0.is_empty());
    }
    let final_features = out.manifest.final_features_count;
    for (_, m) in &out.models {
        assert_eq!(m.features_count(), final_features);
    }
}

#[test]
fn growing_model_records_its_extensions() {
    let out = run(&small(4)).unwrap();
    let growing = &out.models.iter().find(|(a, _)| *a == Arm::Growing).unwrap().1;
    let h = &growing.extension_history;
    assert!(!h.is_empty());
    assert!(h.iter().all(|e| e.new_count > e.old_count));
    assert!(h.windows(2).all(|w| w[0].new_count == w[1].old_count));
    let fully = &out.models.iter().find(|(a, _)| *a == Arm::FullyRetrain).unwrap().1;
    assert!(fully.extension_history.is_empty());
}

#[test]
fn written_outputs_round_trip() {
    let cfg = small(6);
    let out = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(&cfg, dir.path()).unwrap();
    let csv = std::fs::File::open(dir.path().join(REPORT_CSV)).unwrap();
    assert_eq!(read_reports_csv(csv).unwrap(), out.reports);
    let m = GrowingModel::load(&dir.path().join("models/growing.json")).unwrap();
    assert_eq!(m.classifier, out.models[0].1.classifier);
    let snap = DatasetSnapshot::load(&dir.path().join("last_snapshot.json")).unwrap();
    assert_eq!(Some(snap), out.last_snapshot);
    let back = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);
}
