//! Scoring a model prediction against a target: Sim(3)-aligned pointmap
//! metrics plus pairwise pose AUC.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{camera_from_rays, Camera, RayMap, DIRECTION_EPS};
use crate::losses::Target;
use crate::metrics::{align_points, pairwise_pose_errors, pointmap_metrics, pose_auc, MetricError, MetricReport};
use crate::model::Prediction;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where predicted cameras come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraSource {
    /// Recovered from the predicted ray map.
    #[default]
    Rays,
    /// Read from the camera head output.
    Head,
}

impl std::str::FromStr for CameraSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rays" => Ok(Self::Rays),
            "head" => Ok(Self::Head),
            other => Err(format!("unknown camera source {other:?} (expected rays or head)")),
        }
    }
}

fn values<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Camera from one `[9]` row: translation, quaternion (w, x, y, z), fov.
pub fn camera_from_row(row: &[f64], height: usize, width: usize) -> Option<Camera<f64>> {
    let q = Quaternion::new(row[3], row[4], row[5], row[6]);
    if !(q.norm() > 0.0) {
        return None;
    }
    let clamp = |f: f64| f.clamp(1e-3, std::f64::consts::PI - 1e-3);
    Camera::new(
        UnitQuaternion::from_quaternion(q),
        Vector3::new(row[0], row[1], row[2]),
        (clamp(row[7]), clamp(row[8])),
        height,
        width,
    )
    .ok()
}

fn views_hw<T: Scalar>(depth: &Tensor<T>) -> (usize, usize, usize) {
    let s = depth.shape();
    (s[0], s[1], s[2])
}

/// Ground-truth cameras of a target.
pub fn target_cameras<T: Scalar>(target: &Target<T>) -> Vec<Camera<f64>> {
    let (v, h, w) = views_hw(&target.depth);
    let cam = values(&target.camera);
    (0..v)
        .map(|i| camera_from_row(&cam[i * 9..i * 9 + 9], h, w).expect("target cameras are valid"))
        .collect()
}

/// Predicted cameras; `None` where recovery fails.
pub fn predicted_cameras<T: Scalar>(pred: &Prediction<T>, source: CameraSource) -> Vec<Option<Camera<f64>>> {
    let (v, h, w) = views_hw(&pred.depth);
    match source {
        CameraSource::Head => {
            let cam = values(&pred.camera);
            (0..v).map(|i| camera_from_row(&cam[i * 9..i * 9 + 9], h, w)).collect()
        }
        CameraSource::Rays => {
            let rays = values(&pred.rays);
            let per = h * w * 6;
            (0..v)
                .map(|i| {
                    let map = RayMap::from_interleaved(h, w, &rays[i * per..(i + 1) * per]).ok()?;
                    camera_from_rays(&map).ok()
                })
                .collect()
        }
    }
}

/// Pairwise pose errors where a missing predicted camera counts as 180°.
pub fn pose_errors(pred: &[Option<Camera<f64>>], gt: &[Camera<f64>]) -> Result<Vec<f64>, MetricError> {
    if gt.len() < 2 {
        return Err(MetricError::TooFewViews(gt.len()));
    }
    let mut out = Vec::new();
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let e = match (&pred[i], &pred[j]) {
                (Some(a), Some(b)) => {
                    pairwise_pose_errors(&[a.clone(), b.clone()], &[gt[i].clone(), gt[j].clone()])?[0]
                }
                _ => 180.0,
            };
            out.push(e);
        }
    }
    Ok(out)
}

fn points(t: &[f64]) -> Vec<Vector3<f64>> {
    t.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

/// Metrics for one sample: all valid points of all views are aligned jointly.
pub fn evaluate_prediction<T: Scalar>(
    pred: &Prediction<T>,
    target: &Target<T>,
    source: CameraSource,
) -> Result<MetricReport, MetricError> {
    let gt = points(&values(&target.points));
    let valid: Vec<bool> = values(&target.valid).iter().map(|&v| v > 0.5).collect();
    let p = points(&values(&pred.points));
    let (aligned, _) = align_points(&p, &gt, &valid)?;
    let (rel_l2, ir) = pointmap_metrics(&aligned, &gt, &valid)?;
    let n_points = gt
        .iter()
        .zip(&valid)
        .filter(|(g, &ok)| ok && g.norm() >= DIRECTION_EPS)
        .count();
    let (auc3, auc30, n_pairs) = if target.views() >= 2 {
        let errs = pose_errors(&predicted_cameras(pred, source), &target_cameras(target))?;
        (pose_auc(&errs, 3.0)?, pose_auc(&errs, 30.0)?, errs.len())
    } else {
        (0.0, 0.0, 0)
    };
    Ok(MetricReport {
        rel_l2,
        ir,
        auc3,
        auc30,
        n_points,
        n_pairs,
    })
}

/// Treat the target itself as a prediction (pipeline self-check).
pub fn target_as_prediction<T: Scalar>(target: &Target<T>) -> Prediction<T> {
    Prediction {
        rays: target.rays.clone(),
        depth: target.depth.clone(),
        confidence: None,
        camera: target.camera.clone(),
        points: target.points.clone(),
    }
}
