use dua_harness::config::{Domain, ExperimentConfig, Segment};
use dua_harness::data::{load_test, load_train, TestBed};
use dua_harness::experiments::*;
use dua_harness::train::train_model;

fn setup() -> (ExperimentConfig, dua_core::Model, TestBed) {
    let mut cfg = ExperimentConfig::default();
    cfg.train_samples = 400;
    cfg.test_samples = 500;
    cfg.epochs = 1;
    cfg.eval_slice = 200;
    cfg.n_adapt_samples = 8;
    cfg.batch_size = 8;
    cfg.stability_checkpoints = vec![4, 8];
    cfg.density_samples = 50;
    let model = train_model(&cfg, &load_train(&cfg).unwrap()).unwrap().model;
    let bed = TestBed::new(&cfg, load_test(&cfg).unwrap()).unwrap();
    (cfg, model, bed)
}

#[test]
fn runner_edge_cases() {
    let (cfg, model, bed) = setup();

    // identical stream seeds give identical runs
    let mut c = cfg.clone();
    c.n_runs = 2;
    c.run_seeds = Some(vec![9, 9]);
    let stab = run_shuffle_stability(&model, &c, &bed).unwrap();
    assert!(stab.summary.iter().all(|s| s.std == 0.0));

    // no samples: flat source curve
    let mut c = cfg.clone();
    c.n_adapt_samples = 0;
    c.norm_arm = false;
    let curve = run_adapt_curve(&model, &c, &bed).unwrap();
    assert_eq!(curve.dua.rows.len(), 1);
    assert_eq!(curve.dua.rows[0].k, 0);

    // mask none is the source model
    let abl = run_layer_ablation(&model, &cfg, &bed).unwrap();
    let none = abl.rows.iter().find(|r| r.mask == "none").unwrap();
    assert_eq!(none.error_pct, abl.source_error_pct);
    assert_eq!(abl.rows.len(), 5);

    // histogram mass is conserved and unknown layers are rejected
    let dens = export_density(&model, &cfg, &bed).unwrap();
    for ch in 0..64 {
        let rows: Vec<_> = dens.rows.iter().filter(|r| r.channel == ch).collect();
        assert_eq!(rows.len(), cfg.density_bins);
        for count in [
            rows.iter().map(|r| r.count_clean).sum::<u64>(),
            rows.iter().map(|r| r.count_shift).sum::<u64>(),
            rows.iter().map(|r| r.count_adapted).sum::<u64>(),
        ] {
            assert_eq!(count, dens.samples as u64);
        }
    }
    let mut c = cfg.clone();
    c.density_layer = "bn9".into();
    let err = export_density(&model, &c, &bed).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stationary_clean_stream_keeps_clean_error() {
    let mut cfg = ExperimentConfig::default();
    cfg.train_samples = 3000;
    cfg.epochs = 2;
    cfg.test_samples = 1000;
    cfg.eval_slice = 400;
    cfg.cycle = vec![Segment { domain: Domain::Clean, samples: 15 }; 2];
    cfg.eval_every = 5;
    let model = train_model(&cfg, &load_train(&cfg).unwrap()).unwrap().model;
    let bed = TestBed::new(&cfg, load_test(&cfg).unwrap()).unwrap();
    let cyc = run_cycle(&model, &cfg, &bed).unwrap();
    let src = cyc.segments[0].source_error_pct;
    assert!(src <= 5.0, "source clean error {src}");
    for r in &cyc.rows {
        assert!((r.error_pct - src).abs() <= 0.5, "{r:?} vs source {src}");
    }
}

#[test]
fn training_is_deterministic() {
    let mut cfg = ExperimentConfig::default();
    cfg.train_samples = 200;
    cfg.epochs = 1;
    let train = load_train(&cfg).unwrap();
    let a = train_model(&cfg, &train).unwrap().model;
    let b = train_model(&cfg, &train).unwrap().model;
    assert_eq!(dua_core::checkpoint::to_bytes(&a), dua_core::checkpoint::to_bytes(&b));
}
