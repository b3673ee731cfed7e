use drift_ptq::config::CalibConfig;
use drift_ptq::dataset::Dataset;
use drift_ptq::pipeline::{allocate, build_fp_model, compensate_interface, interface_stats, run_stage1, run_stage3, snapped_variant, Calibration};
use drift_ptq_core::policy::ActionPolicy;
use drift_ptq_core::quant::{Precision, QuantizableModel};
use drift_ptq_core::sim::EnvSpec;

fn small_config(seed: u64) -> CalibConfig {
    let mut cfg = CalibConfig::default();
    cfg.seed = seed;
    cfg.episodes = 48;
    cfg.episode_steps = 24;
    cfg.probe_steps = 4;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn dataset_is_deterministic_balanced_and_small_angle() {
    let cfg = small_config(4);
    let a = Dataset::generate(&cfg).unwrap();
    let b = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.write(&dir.path().join("a.jsonl")).unwrap();
    b.write(&dir.path().join("b.jsonl")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap()
    );
    assert_eq!(a.bin_histogram(), vec![cfg.episodes / cfg.spatial_bins; cfg.spatial_bins]);
    assert_eq!(a.records.len(), cfg.episodes * cfg.episode_steps);
    for r in &a.records {
        assert!(r.bin < cfg.spatial_bins);
        assert!(r.action.iter().all(|v| v.is_finite() && v.abs() < 0.5), "{:?}", r.action);
    }
    assert_ne!(a, Dataset::generate(&small_config(5)).unwrap());
}

#[test]
fn full_precision_model_needs_no_compensation() {
    let cfg = small_config(8);
    let ds = Dataset::generate(&cfg).unwrap();
    let cal = Calibration::new(&ds, &cfg).unwrap();
    let (fp, _) = build_fp_model(&cfg, &ds, &cal).unwrap();
    let fp_stats = interface_stats(&fp, &cal).unwrap();
    let mut same = fp.clone();
    let rep = compensate_interface(&mut same, &fp_stats, &cal, &cfg).unwrap();
    assert!(rep.affine.g.iter().all(|g| (g - 1.0).abs() <= 1e-3), "{:?}", rep.affine.g);
    assert!(rep.low_rank_norm <= 1e-3, "{}", rep.low_rank_norm);
}

/// With every layer kept at 16 bits the final model is the snapped one.
#[test]
fn full_retention_matches_snapped_model() {
    let mut cfg = small_config(9);
    cfg.retention_k = 100.0;
    let ds = Dataset::generate(&cfg).unwrap();
    let cal = Calibration::new(&ds, &cfg).unwrap();
    let (fp, fit) = build_fp_model(&cfg, &ds, &cal).unwrap();
    let s1 = run_stage1(&fp, fit, &cal, &cfg).unwrap();
    let alloc = allocate(&fp, &s1, &cfg).unwrap();
    assert_eq!(alloc.bitmap.count(Precision::W4), 0);
    let (q, out) = run_stage3(&fp, &s1, alloc, &cal, &cfg).unwrap();
    let snapped = snapped_variant(&fp).unwrap();
    assert!(out.rotation.is_none() && out.csrc.is_none());
    assert_eq!(out.memory.reduction_fraction, 0.0);
    for id in q.layer_ids() {
        let (a, b) = (q.layer(&id).unwrap(), snapped.layer(&id).unwrap());
        assert_eq!(a.weight(), b.weight(), "{id}");
        assert_eq!(a.bias(), b.bias(), "{id}");
        assert_eq!(a.format(), b.format(), "{id}");
    }
    let env = EnvSpec::default();
    for s in 0..8 {
        let obs = env.episode(s).observation();
        assert_eq!(q.act(&obs, s).unwrap(), snapped.act(&obs, s).unwrap());
    }
}
