use std::fs;

use mad_core::config::{Config, Method};
use mad_core::data::{Dataset, Split};
use mad_core::diag::{evaluate, js_probe, JsProbeConfig};
use mad_core::models::ClassifierNet;
use mad_core::trainer::{self, rundir, run_ablation, run_distillation, run_distillation_with, Axis};
use mad_core::Error;

fn small() -> Config {
    let mut cfg = Config::preset("desk").unwrap();
    cfg.data.per_class = 60;
    cfg.teacher.ep = 6;
    cfg.teacher.ldep = vec![3, 5];
    cfg.distill.ep = 4;
    cfg.distill.spe = 5;
    cfg.distill.ldep = vec![2, 3];
    cfg.distill.n_s = 3;
    cfg.distill.bs = 32;
    cfg.distill.ckpt_every = 5;
    cfg.distill.probe_lag = 2;
    cfg.distill.sample_every = 2;
    cfg.distill.mem_capacity = 64;
    cfg
}

fn teacher(cfg: &Config) -> (ClassifierNet, Dataset) {
    let (train, test) = trainer::datasets(&cfg.data).unwrap();
    let (net, report) = trainer::pretrain_teacher(&train, &test, &cfg.teacher, 20.0, 0).unwrap();
    assert_eq!(report.epochs.len(), cfg.teacher.ep);
    (net, test)
}

#[test]
fn every_method_writes_its_run_directory() {
    let cfg = small();
    let (net, test) = teacher(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("teacher.ckpt");
    net.save(&ckpt).unwrap();
    for method in [Method::Abm, Method::Mem, Method::Mad] {
        let mut c = cfg.clone();
        c.distill.method = method;
        if method == Method::Abm {
            c.distill.student_loss.second = 0.0;
        }
        let out = dir.path().join(method.to_string());
        let summary = run_distillation(&ckpt, &test, &c, &out, &[]).unwrap();
        assert_eq!(summary.stages, c.distill.stages());
        assert_eq!(summary.metrics.len(), c.distill.ep);
        for f in [rundir::CONFIG_FILE, rundir::METRICS_FILE, rundir::STAGES_FILE, rundir::SUMMARY_FILE] {
            assert!(out.join(f).is_file(), "{method}: {f} missing");
        }
        let metrics = fs::read_to_string(out.join(rundir::METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().count(), c.distill.ep + 1);
        let ema_ckpt = rundir::ckpt_path(&out, "ema", 20);
        assert_eq!(ema_ckpt.is_file(), method == Method::Mad);
        assert!(rundir::ckpt_path(&out, "student", 18).is_file());
        assert_eq!(summary.ema_updates > 0, method == Method::Mad);
        let summary_json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(rundir::SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(summary_json["status"], "completed");
    }
}

#[test]
fn probe_reads_a_finished_run() {
    let cfg = small();
    let (net, test) = teacher(&cfg);
    let dir = tempfile::tempdir().unwrap();
    run_distillation_with(&net, &test, &cfg, Some(dir.path()), &[]).unwrap();
    let probe = JsProbeConfig {
        stages: vec![5, 10, 15, 20],
        tau: 2,
        batches: 2,
        batch_size: 16,
    };
    let rows = js_probe(dir.path(), &probe).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!((0.0..=std::f64::consts::LN_2).contains(&r.js_gen));
        assert!(r.js_ema.is_some());
        assert_eq!(r.n_samples, 32);
    }
    let csv = fs::read_to_string(dir.path().join("js_probe.csv")).unwrap();
    assert!(csv.starts_with("t,js_gen,js_ema,n_samples\n"));

    let missing = JsProbeConfig {
        stages: vec![7],
        ..probe
    };
    assert!(matches!(js_probe(dir.path(), &missing), Err(Error::Missing(_))));
}

#[test]
fn distillation_refuses_training_data() {
    let cfg = small();
    let (net, test) = teacher(&cfg);
    let (train, _) = trainer::datasets(&cfg.data).unwrap();
    assert_eq!(train.split, Split::Train);
    assert!(run_distillation_with(&net, &train, &cfg, None, &[]).is_err());
    assert!(run_distillation_with(&net, &test, &cfg, None, &[]).is_ok());
}

#[test]
fn missing_teacher_is_reported_as_missing() {
    let cfg = small();
    let (_, test) = trainer::datasets(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_distillation(&dir.path().join("nope.ckpt"), &test, &cfg, dir.path(), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn ablation_writes_tables() {
    let cfg = small();
    let (net, test) = teacher(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let values = Axis::Conditioning.parse_values(&["sum,cat".into()]).unwrap();
    let (rows, results) = run_ablation(&cfg, &net, &test, &values, &[0, 1], Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(results.len(), 2);
    assert!(results.iter().all(|r| r.runs == 2));
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("ablation_runs.csv").is_file());
}

#[test]
fn dataset_csv_round_trip() {
    let cfg = small();
    let (_, test) = trainer::datasets(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.csv");
    test.write_csv(&path).unwrap();
    let back = Dataset::read_csv(&path, test.classes, Split::Test).unwrap();
    assert_eq!(back.labels, test.labels);
    assert_eq!(back.inputs, test.inputs);
    let (net, _) = teacher(&cfg);
    assert_eq!(evaluate(&net, &back).unwrap(), evaluate(&net, &test).unwrap());
}
