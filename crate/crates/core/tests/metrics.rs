use looprecon::geometry::{sim3_align, Camera};
use looprecon::metrics::{
    abs_rel, align_points, evaluate, pairwise_pose_errors, pointmap_metrics, pose_auc, MetricError,
    MetricReport,
};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..5.0)))
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    UnitQuaternion::from_scaled_axis(axis)
}

fn cam(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Camera<f64> {
    Camera::new(q, t, (1.0, 1.0), 8, 8).unwrap()
}

#[test]
fn identical_points_score_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = cloud(&mut rng, 50);
    let (rel, ir) = pointmap_metrics(&pts, &pts, &vec![true; 50]).unwrap();
    assert_eq!((rel, ir), (0.0, 100.0));
}

#[test]
fn two_percent_offset_is_an_inlier() {
    let gt = [Vector3::new(0.0, 0.0, 1.0)];
    let pred = [Vector3::new(0.0, 0.0, 1.02)];
    let (rel, ir) = pointmap_metrics(&pred, &gt, &[true]).unwrap();
    assert!((rel - 0.02).abs() < 1e-12);
    assert_eq!(ir, 100.0);
}

#[test]
fn pointmap_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = cloud(&mut rng, 300);
    let pred: Vec<_> = gt
        .iter()
        .map(|g| g + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
        .collect();
    let valid: Vec<bool> = (0..300).map(|_| rng.random_bool(0.8)).collect();
    let (mut sum, mut inl, mut n) = (0.0, 0.0, 0.0);
    for i in 0..300 {
        if !valid[i] {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2) + (p.z - g.z).powi(2)).sqrt();
        let r = d / (g.x * g.x + g.y * g.y + g.z * g.z).sqrt();
        sum += r;
        if r < 0.03 {
            inl += 1.0;
        }
        n += 1.0;
    }
    let (rel, ir) = pointmap_metrics(&pred, &gt, &valid).unwrap();
    assert!((rel - sum / n).abs() < 1e-10);
    assert!((ir - 100.0 * inl / n).abs() < 1e-10);
}

#[test]
fn inlier_ratio_is_per_point() {
    // mean error 0.025 < 3% but only half the points are inliers
    let gt = vec![Vector3::new(0.0, 0.0, 1.0); 4];
    let pred = vec![
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 0.0, 1.05),
        Vector3::new(0.0, 0.0, 1.05),
    ];
    let (rel, ir) = pointmap_metrics(&pred, &gt, &[true; 4]).unwrap();
    assert!(rel < 0.03);
    assert_eq!(ir, 50.0);
}

#[test]
fn degenerate_inputs_error() {
    let gt = [Vector3::new(0.0, 0.0, 0.0)];
    assert_eq!(pointmap_metrics(&gt, &gt, &[true]), Err(MetricError::NoValidPoints));
    assert_eq!(pointmap_metrics(&gt, &gt, &[false]), Err(MetricError::NoValidPoints));
    let c = cam(UnitQuaternion::identity(), Vector3::zeros());
    assert_eq!(pairwise_pose_errors(&[c.clone()], &[c]), Err(MetricError::TooFewViews(1)));
    assert_eq!(pose_auc(&[], 3.0), Err(MetricError::Empty));
    assert!(pose_auc(&[1.0], 0.0).is_err());
}

#[test]
fn ten_degree_rotation_error() {
    let gt = [
        cam(UnitQuaternion::identity(), Vector3::zeros()),
        cam(UnitQuaternion::from_euler_angles(0.0, 0.3, 0.0), Vector3::new(1.0, 0.0, 0.0)),
    ];
    let mut pred = gt.clone();
    pred[1].rotation = UnitQuaternion::from_euler_angles(0.0, 0.3 + 10f64.to_radians(), 0.0);
    // keep the relative translation direction exact
    let e = pairwise_pose_errors(&pred, &gt).unwrap();
    assert_eq!(e.len(), 1);
    assert!((e[0] - 10.0).abs() < 1e-9, "{}", e[0]);
    assert_eq!(pairwise_pose_errors(&gt, &gt).unwrap(), vec![0.0]);
}

fn oracle_pair(pi: &Camera<f64>, pj: &Camera<f64>, gi: &Camera<f64>, gj: &Camera<f64>) -> f64 {
    let rel_r = |a: &Camera<f64>, b: &Camera<f64>| a.rotation_matrix().transpose() * b.rotation_matrix();
    let rel_t = |a: &Camera<f64>, b: &Camera<f64>| a.rotation_matrix().transpose() * (b.translation - a.translation);
    let m: Matrix3<f64> = rel_r(pi, pj).transpose() * rel_r(gi, gj);
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rot = cos.acos().to_degrees();
    let (a, b) = (rel_t(pi, pj), rel_t(gi, gj));
    let c = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    rot.max(c.acos().to_degrees())
}

#[test]
fn pose_errors_match_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = rng.random_range(2..6);
        let mk = |rng: &mut ChaCha8Rng| {
            (0..v)
                .map(|_| cam(random_rotation(rng), Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))))
                .collect::<Vec<_>>()
        };
        let (pred, gt) = (mk(&mut rng), mk(&mut rng));
        let errs = pairwise_pose_errors(&pred, &gt).unwrap();
        let mut k = 0;
        for i in 0..v {
            for j in i + 1..v {
                worst = worst.max((errs[k] - oracle_pair(&pred[i], &pred[j], &gt[i], &gt[j])).abs());
                k += 1;
            }
        }
        assert_eq!(k, errs.len());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn zero_baseline_handling() {
    let q = UnitQuaternion::from_euler_angles(0.1, 0.0, 0.0);
    let gt = [cam(UnitQuaternion::identity(), Vector3::zeros()), cam(q, Vector3::zeros())];
    let pred = [
        cam(UnitQuaternion::identity(), Vector3::zeros()),
        cam(q, Vector3::new(0.0, 0.0, 5.0)),
    ];
    // no gt baseline: rotation only
    assert!(pairwise_pose_errors(&pred, &gt).unwrap()[0] < 1e-9);
    // gt baseline but none predicted: worst case
    assert_eq!(pairwise_pose_errors(&gt, &pred).unwrap()[0], 180.0);
}

#[test]
fn auc_closed_form_cases() {
    assert_eq!(pose_auc(&[0.0, 0.0, 0.0], 30.0).unwrap(), 100.0);
    assert_eq!(pose_auc(&[15.0], 30.0).unwrap(), 50.0);
    assert_eq!(pose_auc(&[45.0], 30.0).unwrap(), 0.0);
}

#[test]
fn auc_matches_trapezoid_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let errs: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..40.0)).collect();
    for tau in [3.0, 30.0] {
        let h = 0.001;
        let n = (tau / h) as usize;
        let acc = |x: f64| errs.iter().filter(|&&e| e <= x).count() as f64 / errs.len() as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
            integral += 0.5 * (acc(a) + acc(b)) * h;
        }
        let numeric = 100.0 * integral / tau;
        assert!((pose_auc(&errs, tau).unwrap() - numeric).abs() < 0.01);
    }
}

#[test]
fn aligned_metrics_ignore_a_similarity_on_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = cloud(&mut rng, 200);
    let pred: Vec<_> = gt
        .iter()
        .map(|g| g + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
        .collect();
    let valid = vec![true; 200];
    let (a, _) = align_points(&pred, &gt, &valid).unwrap();
    let base = pointmap_metrics(&a, &gt, &valid).unwrap();
    let rot = random_rotation(&mut rng);
    let moved: Vec<_> = pred.iter().map(|p| rot * p * 3.7 + Vector3::new(1.0, -2.0, 0.5)).collect();
    let (b, _) = align_points(&moved, &gt, &valid).unwrap();
    let other = pointmap_metrics(&b, &gt, &valid).unwrap();
    assert!((base.0 - other.0).abs() < 1e-6);
    assert!((base.1 - other.1).abs() < 1e-6);
    // alignment of an exact similarity copy is perfect
    let sim = sim3_align(&moved, &pred, None).unwrap();
    assert!((sim.scale - 1.0 / 3.7).abs() < 1e-9);
}

#[test]
fn evaluate_ground_truth_is_perfect_and_serializes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = cloud(&mut rng, 60);
    let cams: Vec<_> = (0..3)
        .map(|i| cam(random_rotation(&mut rng), Vector3::new(i as f64, 0.5, 0.0)))
        .collect();
    let (r, _) = evaluate(&pts, &pts, &vec![true; 60], &cams, &cams).unwrap();
    assert!(r.rel_l2 < 1e-12);
    assert_eq!((r.ir, r.auc3, r.auc30, r.n_points, r.n_pairs), (100.0, 100.0, 100.0, 60, 3));
    let kv = r.to_kv();
    assert!(kv.lines().any(|l| l == "n_pairs=3"));
    let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    let merged = MetricReport::merge(&[r.clone(), r.clone()]);
    assert_eq!(merged.n_points, 120);
    assert_eq!(merged.ir, 100.0);
}

#[test]
fn abs_rel_mean() {
    let v = abs_rel(&[1.1, 2.0, 9.0], &[1.0, 4.0, 1.0], &[true, true, false]).unwrap();
    assert!((v - 0.3).abs() < 1e-12);
}

proptest! {
    #[test]
    fn auc_monotone_and_permutation_invariant(
        errs in prop::collection::vec(0.0f64..60.0, 1..20),
        idx in 0usize..20,
        bump in 0.0f64..10.0,
        tau in prop::sample::select(vec![3.0, 30.0]),
    ) {
        let base = pose_auc(&errs, tau).unwrap();
        let mut worse = errs.clone();
        let i = idx % errs.len();
        worse[i] += bump;
        prop_assert!(pose_auc(&worse, tau).unwrap() <= base + 1e-12);
        let mut rev = errs.clone();
        rev.reverse();
        prop_assert!((pose_auc(&rev, tau).unwrap() - base).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&base));
    }
}
