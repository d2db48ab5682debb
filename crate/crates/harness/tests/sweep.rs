use std::path::Path;

use cvpb::config::{DataSource, ExperimentConfig, MethodEntry};
use cvpb::data::ShapesParams;
use cvpb::records::read_jsonl;
use cvpb::runner::{load_eval, prepare_models, run_experiment, CONFIG_FILE, RECORDS_STEM};
use cvpb_core::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use cvpb_core::metrics::EvalRecord;
use cvpb_core::models::{BackboneConfig, TrainHyper};

fn tiny(out: &Path, methods: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        data: DataSource::Shapes {
            params: ShapesParams {
                count: 400,
                classes: 4,
                ..Default::default()
            },
        },
        methods: methods.iter().map(|m| MethodEntry::new(m.parse().unwrap())).collect(),
        ..Default::default()
    };
    cfg.model.backbone = BackboneConfig {
        widths: vec![8, 16],
        pool_after: vec![0, 1],
        ..Default::default()
    };
    cfg.model.train = TrainHyper {
        steps: 80,
        batch_size: 32,
        ..Default::default()
    };
    cfg.ssl.train = TrainHyper {
        steps: 30,
        batch_size: 32,
        ..Default::default()
    };
    cfg.grid.kinds = vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast];
    cfg.grid.severities = vec![1, 3];
    cfg.grid.eval_count = 33;
    cfg.adapt.iters = 2;
    cfg
}

fn strip_time(mut r: Vec<EvalRecord>) -> Vec<EvalRecord> {
    for x in &mut r {
        x.wall_ms = 0.0;
    }
    r
}

#[test]
fn rerun_from_persisted_config_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["standard", "cvp", "vp_patch", "tent", "tent+cvp"]);
    let first = run_experiment(&cfg).unwrap();
    assert!(first.records.iter().all(|r| r.failure.is_none()));
    // One record per (method, kind, severity, batch); 33 images make two batches.
    assert_eq!(first.records.len(), 5 * 2 * 2 * 2);

    let mut again = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(again, cfg);
    again.workers = 3;
    let second = run_experiment(&again).unwrap();
    assert_eq!(strip_time(second.records.clone()), strip_time(first.records.clone()));
    for m in &first.summary.methods {
        let (a, b) = (first.summary.method(m).unwrap(), second.summary.method(m).unwrap());
        assert!((a.avg_acc - b.avg_acc).abs() < 1e-6, "{m}");
    }
    let persisted: Vec<EvalRecord> = read_jsonl(&dir.path().join(format!("{RECORDS_STEM}.jsonl"))).unwrap();
    assert_eq!(persisted, second.records);
    assert!(dir.path().join(format!("{RECORDS_STEM}.csv")).exists());

    for r in first
        .records
        .iter()
        .filter(|r| ["cvp", "vp_patch", "tent+cvp"].contains(&r.method.as_str()))
    {
        let (l0, lf) = (r.loss0.unwrap(), r.loss_final.unwrap());
        assert!(lf <= l0, "{} {} s{}: {lf} > {l0}", r.method, r.kind, r.severity);
    }
}

#[test]
fn standard_only_reproduces_frozen_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["standard"]);
    let out = run_experiment(&cfg).unwrap();
    assert!(!dir.path().join(cvpb::runner::SSL_HEAD_FILE).exists());
    let models = prepare_models(&cfg, dir.path()).unwrap();
    let eval = load_eval(&cfg).unwrap();
    for r in &out.records {
        assert_eq!(r.wall_ms, 0.0);
        assert!(r.loss0.is_none());
    }
    for kind in &cfg.grid.kinds {
        for &s in &cfg.grid.severities {
            let spec = CorruptionSpec::new(*kind, s, cvpb::runner::cell_seed(cfg.seed, *kind, s)).unwrap();
            let (_, pred) = models.backbone.predict(&corrupt(&eval.images, &spec).unwrap()).unwrap();
            let correct = pred.iter().zip(&eval.labels).filter(|(p, l)| p == l).count() as f64;
            let got = out.summary.cell("standard", kind.name(), s).unwrap();
            assert!((got - 100.0 * correct / eval.len() as f64).abs() < 1e-9, "{} s{s}", kind.name());
        }
    }
    assert_eq!(out.summary.method("standard").unwrap().cells_present, 4);
}
