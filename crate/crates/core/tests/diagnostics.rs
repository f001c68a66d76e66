use looprecon::diagnostics::{
    attention_probe, decode_at_every_step, early_stop_compare, kinf_sweep, loop_states, refinement_trace, EvalOptions,
    Reduction,
};
use looprecon::eval::{evaluate_prediction, target_as_prediction, CameraSource};
use looprecon::losses::Target;
use looprecon::model::{Binder, ForwardOptions};
use looprecon::synthdata::{generate_scene, SceneSpec};
use looprecon::{DepthHead, Model, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(config: ModelConfig) -> Model<f64> {
    let mut m = Model::new(config, 3).unwrap();
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".ls1") || name.ends_with(".ls2") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.2);
        }
    }
    m
}

fn sample(seed: u64, views: usize) -> (Tensor<f64>, Target<f64>) {
    let rec = generate_scene(&SceneSpec::random(seed, views, 32, 32)).unwrap();
    let s = rec.sample::<f64>(None).unwrap();
    (s.images, s.target)
}

#[test]
fn trace_of_identical_states() {
    let z = vec![vec![1.0, -2.0, 0.5, 3.0]; 5];
    let t = refinement_trace(&z, 2, Reduction::Flatten).unwrap();
    assert_eq!(t.len(), 4);
    assert!(t.cosine_to_final.iter().all(|&c| (c - 1.0).abs() < 1e-15));
    assert!(t.relative_update.iter().all(|&r| r == 0.0));
    assert!(t.norm.iter().all(|&n| n == t.norm[0]));
    assert!(refinement_trace(&z[..1], 2, Reduction::Flatten).is_err());
}

#[test]
fn trace_of_orthogonal_state_is_zero_cosine() {
    let z = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0]];
    let t = refinement_trace(&z, 3, Reduction::Flatten).unwrap();
    assert_eq!(t.cosine_to_final, vec![0.0]);
    assert!((t.relative_update[0] - 5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn trace_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, tokens, dim) = (6, 5, 4);
    let z: Vec<Vec<f64>> = (0..=k).map(|_| (0..tokens * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let t = refinement_trace(&z, dim, Reduction::Flatten).unwrap();
    for i in 0..k {
        let mut d = 0.0;
        let mut diff = 0.0;
        for j in 0..tokens * dim {
            d += z[i][j] * z[k][j];
            diff += (z[i + 1][j] - z[i][j]).powi(2);
        }
        assert!((t.cosine_to_final[i] - d / (norm(&z[i]) * norm(&z[k]))).abs() < 1e-10);
        assert!((t.relative_update[i] - diff.sqrt() / norm(&z[i])).abs() < 1e-10);
        assert!((t.norm[i] - norm(&z[i])).abs() < 1e-10);
    }
    let p = refinement_trace(&z, dim, Reduction::PerTokenMean).unwrap();
    for i in 0..k {
        let mut c = 0.0;
        for tok in 0..tokens {
            let s = |v: &Vec<f64>| v[tok * dim..(tok + 1) * dim].to_vec();
            let (a, b) = (s(&z[i]), s(&z[k]));
            c += a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (norm(&a) * norm(&b)) / tokens as f64;
        }
        assert!((p.cosine_to_final[i] - c).abs() < 1e-10);
    }
    assert_eq!(t.to_tsv().lines().count(), k + 1);
}

#[test]
fn ground_truth_pipeline_scores_perfectly() {
    let (_, target) = sample(1, 3);
    let pred = target_as_prediction(&target);
    for source in [CameraSource::Rays, CameraSource::Head] {
        let r = evaluate_prediction(&pred, &target, source).unwrap();
        assert!(r.rel_l2 < 1e-9, "{r:?}");
        assert_eq!(r.ir, 100.0);
        assert!(r.auc3 > 99.99 && r.auc30 > 99.999, "{r:?}");
        assert_eq!(r.n_pairs, 3);
    }
}

#[test]
fn camera_source_only_changes_pose_metrics() {
    let m = model(ModelConfig::micro());
    let (images, target) = sample(2, 2);
    let pred = m.predict(&images, 2, DepthHead::Linear).unwrap();
    let a = evaluate_prediction(&pred, &target, CameraSource::Rays).unwrap();
    let b = evaluate_prediction(&pred, &target, CameraSource::Head).unwrap();
    assert_eq!((a.rel_l2, a.ir, a.n_points), (b.rel_l2, b.ir, b.n_points));
}

#[test]
fn decode_every_step_ends_at_the_standard_forward() {
    let m = model(ModelConfig::micro());
    let (images, target) = sample(3, 2);
    let opts = EvalOptions::default();
    let reports = decode_at_every_step(&m, &images, &target, 3, opts).unwrap();
    assert_eq!(reports.len(), 3);
    let full = evaluate_prediction(&m.predict(&images, 3, DepthHead::Linear).unwrap(), &target, opts.camera_source).unwrap();
    assert_eq!(reports[2], full);
    assert_ne!(reports[0], full);
    let states = loop_states(&m, &images, 3).unwrap();
    assert_eq!(states.len(), 4);
}

#[test]
fn probe_rows_are_distributions() {
    let m = model(ModelConfig::micro());
    let (images, _) = sample(4, 2);
    let center = 2 * 4 + 2;
    for it in 0..2 {
        let p = attention_probe(&m, &images, 2, (0, center), it).unwrap();
        assert!((p.row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.row.iter().all(|&x| x >= 0.0));
        assert_eq!(p.heatmaps.len(), 2);
        assert!(p.heatmaps.iter().all(|h| h.len() == 16));
    }
    assert!(attention_probe(&m, &images, 2, (0, center), 2).is_err());
    assert!(attention_probe(&m, &images, 2, (2, 0), 0).is_err());
    assert!(attention_probe(&m, &images, 2, (0, 16), 0).is_err());
}

#[test]
fn single_head_probe_is_the_raw_softmax_row() {
    let cfg = ModelConfig { head_dim: 64, ..ModelConfig::micro() };
    let m = model(cfg.clone());
    let (images, _) = sample(5, 2);
    let p = attention_probe(&m, &images, 2, (1, 5), 1).unwrap();
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&m.params);
    let out = m.forward(&mut tape, &mut b, &images, 2, ForwardOptions::default()).unwrap();
    let probs = tape.value(out.global_attention[1]);
    assert_eq!(probs.shape()[1], 1);
    let n = probs.shape()[2];
    let qi = cfg.tokens_per_view() + 1 + cfg.registers + 5;
    assert_eq!(p.row, probs.data()[qi * n..(qi + 1) * n].to_vec());
}

#[test]
fn equal_queries_and_keys_give_a_uniform_heatmap() {
    let mut m = model(ModelConfig::micro());
    for name in ["loop.0.global.attn.qkv.w", "loop.0.global.attn.qkv.b"] {
        m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let (images, _) = sample(6, 2);
    let p = attention_probe(&m, &images, 2, (0, 3), 0).unwrap();
    let u = 1.0 / p.row.len() as f64;
    assert!(p.row.iter().all(|&x| (x - u).abs() < 1e-12));
    assert!(p.heatmaps.iter().flatten().all(|&x| (x - u).abs() < 1e-12));
}

#[test]
fn sweep_and_early_stop_agree_at_k_max() {
    let m = model(ModelConfig::micro());
    let samples = vec![sample(7, 2), sample(8, 2)];
    let opts = EvalOptions::default();
    let sweep = kinf_sweep(&m, &samples, &[1, 2, 3], opts).unwrap();
    assert_eq!(sweep.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 3]);
    let cmp = early_stop_compare(&m, &samples, 3, opts).unwrap();
    assert_eq!(cmp.len(), 3);
    assert_eq!(cmp[2].early_stop, cmp[2].full_pass);
    assert_eq!(cmp[2].full_pass, sweep[2].report);
    assert_eq!(cmp[0].full_pass, sweep[0].report);
}
