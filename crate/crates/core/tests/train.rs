use looprecon::binio::FormatError;
use looprecon::eval::CameraSource;
use looprecon::synthdata::{generate_scene, SceneSpec};
use looprecon::train::{trainable, Checkpoint, Config, KSamplerKind, Shard, TrainError, Trainer};
use looprecon::losses::Stage;
use looprecon::{ModelConfig, Tensor};

fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.model = ModelConfig::micro();
    cfg.schedule.k_min = 1;
    cfg.schedule.k_max = 3;
    cfg.schedule.k_inf = 2;
    cfg.data.scenes = vec![2, 1];
    cfg.train.steps = 4;
    cfg.optim.warmup_steps = 1;
    cfg
}

fn shards() -> Vec<Shard> {
    let scene = |seed| generate_scene(&SceneSpec::random(seed, 2, 32, 32)).unwrap();
    vec![
        Shard { id: "a".into(), records: vec![scene(1), scene(2)] },
        Shard { id: "b".into(), records: vec![scene(3)] },
    ]
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = micro_config();
    let back = Config::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    Config::default().validate().unwrap();
}

#[test]
fn unknown_keys_are_rejected() {
    let err = Config::from_toml("[model]\nwidht = 64\n").unwrap_err();
    assert!(matches!(&err, TrainError::Config(m) if m.contains("widht")), "{err}");
    assert!(Config::from_toml("[modle]\n").is_err());
    let env = [("LOOPRECON_OPTIM_LEARNING_RATE".to_string(), "0.1".to_string())];
    assert!(Config::from_toml_with_env("", env).is_err());
}

#[test]
fn env_overrides_file_values() {
    let text = "[optim]\nlr = 0.001\n[schedule]\nk_max = 10\n";
    let env = [
        ("LOOPRECON_OPTIM_LR".to_string(), "0.01".to_string()),
        ("LOOPRECON_SCHEDULE_K_SAMPLER".to_string(), "fixed".to_string()),
        ("LOOPRECON_DATA_SCENES".to_string(), "[3, 4]".to_string()),
        ("UNRELATED_OPTIM_LR".to_string(), "0.5".to_string()),
    ];
    let cfg = Config::from_toml_with_env(text, env).unwrap();
    assert_eq!(cfg.optim.lr, 0.01);
    assert_eq!(cfg.schedule.k_max, 10);
    assert_eq!(cfg.schedule.k_sampler, KSamplerKind::Fixed);
    assert_eq!(cfg.data.scenes, vec![3, 4]);
}

#[test]
fn out_of_range_values_name_the_key() {
    let err = Config::from_toml("[optim]\nlr = 2.0\n").unwrap_err();
    assert!(err.to_string().contains("optim.lr"), "{err}");
    let err = Config::from_toml("[schedule]\nk_min = 9\nk_max = 4\n").unwrap_err();
    assert!(err.to_string().contains("schedule.k_max"), "{err}");
}

#[test]
fn fixed_seed_gives_identical_runs() {
    let mut a: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    let mut b: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    for _ in 0..3 {
        let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
        assert_eq!(ra, rb);
        assert!(ra.loss.total.is_finite() && (1..=3).contains(&ra.k));
    }
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let mut full: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    full.run(|_| {}).unwrap();

    let mut first: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    first.train_step().unwrap();
    first.train_step().unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.step, 2);
    let mut resumed = Trainer::resume(micro_config(), ckpt, &shards()).unwrap();
    resumed.run(|_| {}).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.optimizer, full.optimizer);
}

#[test]
fn resume_rejects_a_different_config() {
    let tr: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    let mut other = micro_config();
    other.optim.lr = 1e-2;
    let err = Trainer::resume(other, tr.checkpoint(), &shards()).err().unwrap();
    assert!(matches!(&err, TrainError::Mismatch(m) if m.contains("lr")), "{err}");
    let mut longer = micro_config();
    longer.train.steps = 10;
    Trainer::resume(longer, tr.checkpoint(), &shards()).unwrap();
}

#[test]
fn checkpoint_bytes_are_stable() {
    let mut tr: Trainer<f32> = Trainer::new(micro_config(), &shards()).unwrap();
    tr.train_step().unwrap();
    let ckpt = tr.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.djvc");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let model = loaded.model().unwrap();
    assert_eq!(model.params, tr.model.params);
}

#[test]
fn corrupt_checkpoints_report_named_errors() {
    let tr: Trainer<f32> = Trainer::new(micro_config(), &shards()).unwrap();
    let bytes = tr.checkpoint().to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad),
        Err(TrainError::Format(FormatError::BadMagic { offset: 0, .. }))
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad),
        Err(TrainError::Format(FormatError::Version { found: 9, .. }))
    ));
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(TrainError::Format(FormatError::Truncated { .. }))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&long),
        Err(TrainError::Format(FormatError::Trailing(1)))
    ));
    // f32 tensors read back into an f64 run.
    let widened = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(widened.params.cast::<f32>(), tr.model.params);
}

#[test]
fn shape_mismatch_names_the_parameter() {
    let tr: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    let mut ckpt = tr.checkpoint();
    let name = ckpt.params.iter().map(|(k, _)| k.clone()).find(|k| k.ends_with(".w")).unwrap();
    ckpt.params.insert(name.clone(), Tensor::zeros(&[3, 5]));
    let err = ckpt.model().err().unwrap();
    assert!(matches!(&err, TrainError::Param { name: n, .. } if *n == name), "{err}");
    assert!(err.to_string().contains(&name));

    let mut extra = tr.checkpoint();
    extra.params.insert("stray.w", Tensor::zeros(&[2, 2]));
    assert!(matches!(extra.model(), Err(TrainError::Param { name, .. }) if name == "stray.w"));
}

#[test]
fn stage_two_only_moves_the_depth_head() {
    let mut one: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    one.train_step().unwrap();
    let ckpt = one.checkpoint();
    let mut cfg = micro_config().stage_two();
    cfg.train.steps = 2;
    let mut two = Trainer::stage_two(cfg, &ckpt, &shards()).unwrap();
    let is_head = trainable(Stage::Two);
    let frozen_before = two.model.params.checksum(|n| !is_head(n));
    let head_before = two.model.params.checksum(&is_head);
    two.run(|r| assert!(r.loss.conf != 0.0)).unwrap();
    assert_eq!(two.model.params.checksum(|n| !is_head(n)), frozen_before);
    assert_ne!(two.model.params.checksum(&is_head), head_before);
    assert!(two.optimizer.m.keys().all(|n| is_head(n)));

    let err = Trainer::stage_two(micro_config().stage_two(), &two.checkpoint(), &shards()).err().unwrap();
    assert!(matches!(err, TrainError::Config(_)));
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut tr: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    tr.train_step().unwrap();
    let name = tr.model.params.iter().map(|(k, _)| k.clone()).find(|k| k.starts_with("depth_dec.")).unwrap();
    tr.model.params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let err = tr.train_step().err().unwrap();
    assert!(matches!(err, TrainError::NonFinite { step: 1 }), "{err}");
}

#[test]
fn evaluation_reports_finite_metrics() {
    let tr: Trainer<f64> = Trainer::new(micro_config(), &shards()).unwrap();
    let m = tr.evaluate(2, CameraSource::Rays).unwrap();
    assert!(m.rel_l2.is_finite() && (0.0..=100.0).contains(&m.ir));
    assert_eq!(m.n_pairs, 3);
}

#[test]
fn shards_must_match_the_model_resolution() {
    let mut cfg = micro_config();
    cfg.model.image_height = 64;
    cfg.model.image_width = 64;
    assert!(matches!(Trainer::<f64>::new(cfg, &shards()), Err(TrainError::Config(_))));
}
