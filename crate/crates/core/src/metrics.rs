//! Evaluation metrics: similarity-aligned pointmap accuracy and pairwise pose AUC.

use nalgebra::{convert, RealField, Vector3};
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    rotation_angle, sim3_align, translation_angle, Camera, GeometryError, Sim3, DIRECTION_EPS,
};

/// Relative error below which a point counts as an inlier.
pub const INLIER_THRESHOLD: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no valid points to evaluate")]
    NoValidPoints,
    #[error("pose errors need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("empty error list")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("length mismatch: {0} vs {1}")]
    Mismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Mean relative point error and inlier percentage over valid points.
///
/// Points with a ground-truth norm below `1e-8` are skipped.
pub fn pointmap_metrics<T: RealField + Copy + ToPrimitive>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    valid: &[bool],
) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(MetricError::Mismatch(pred.len(), gt.len()));
    }
    if valid.len() != gt.len() {
        return Err(MetricError::Mismatch(valid.len(), gt.len()));
    }
    let eps: T = convert(DIRECTION_EPS);
    let thr: T = convert(INLIER_THRESHOLD);
    let mut sum = 0.0;
    let mut inliers = 0usize;
    let mut n = 0usize;
    for ((p, g), &ok) in pred.iter().zip(gt).zip(valid) {
        let gn = g.norm();
        if !ok || gn < eps {
            continue;
        }
        let r = (p - g).norm() / gn;
        sum += to_f64(r);
        if r < thr {
            inliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::NoValidPoints);
    }
    Ok((sum / n as f64, 100.0 * inliers as f64 / n as f64))
}

/// Mean `|d − d*| / d*` over valid pixels with positive ground truth.
pub fn abs_rel(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(MetricError::Mismatch(pred.len(), gt.len()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.len() {
        if valid[i] && gt[i] > 0.0 {
            sum += (pred[i] - gt[i]).abs() / gt[i];
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::NoValidPoints);
    }
    Ok(sum / n as f64)
}

/// Per-pair angular pose error in degrees over unordered pairs `i < j`.
///
/// The error is the larger of the relative rotation and relative translation
/// direction errors. When the ground-truth baseline is shorter than `1e-8`
/// only the rotation error counts; a vanishing predicted baseline against a
/// real one counts as 180°.
pub fn pairwise_pose_errors<T: RealField + Copy + ToPrimitive>(pred: &[Camera<T>], gt: &[Camera<T>]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(MetricError::Mismatch(pred.len(), gt.len()));
    }
    if gt.len() < 2 {
        return Err(MetricError::TooFewViews(gt.len()));
    }
    let eps: T = convert(DIRECTION_EPS);
    let rel = |c: &[Camera<T>], i: usize, j: usize| {
        let ri = c[i].rotation_matrix();
        let rj = c[j].rotation_matrix();
        (ri.transpose() * rj, ri.transpose() * (c[j].translation - c[i].translation))
    };
    let mut out = Vec::with_capacity(gt.len() * (gt.len() - 1) / 2);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let (rp, tp) = rel(pred, i, j);
            let (rg, tg) = rel(gt, i, j);
            let rot = to_f64(rotation_angle(&rp, &rg));
            let trans = if tg.norm() < eps {
                0.0
            } else {
                translation_angle(&tp, &tg).map_or(180.0, to_f64)
            };
            out.push(rot.max(trans));
        }
    }
    Ok(out)
}

/// Area under the cumulative accuracy curve on `[0, τ]`, as a percentage.
pub fn pose_auc(errors: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(MetricError::BadThreshold(tau));
    }
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = errors.iter().map(|&e| (1.0 - e / tau).max(0.0)).sum();
    Ok(100.0 * sum / errors.len() as f64)
}

/// Aggregated evaluation for one or more scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel_l2: f64,
    pub ir: f64,
    pub auc3: f64,
    pub auc30: f64,
    pub n_points: usize,
    pub n_pairs: usize,
}

impl MetricReport {
    /// One `key=value` pair per line, in field order.
    pub fn to_kv(&self) -> String {
        format!(
            "rel_l2={}\nir={}\nauc3={}\nauc30={}\nn_points={}\nn_pairs={}\n",
            self.rel_l2, self.ir, self.auc3, self.auc30, self.n_points, self.n_pairs
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    /// Point-weighted and pair-weighted mean over reports.
    pub fn merge(reports: &[MetricReport]) -> MetricReport {
        let np: usize = reports.iter().map(|r| r.n_points).sum();
        let nq: usize = reports.iter().map(|r| r.n_pairs).sum();
        let wavg = |f: fn(&MetricReport) -> f64, w: fn(&MetricReport) -> usize, tot: usize| {
            if tot == 0 {
                0.0
            } else {
                reports.iter().map(|r| f(r) * w(r) as f64).sum::<f64>() / tot as f64
            }
        };
        MetricReport {
            rel_l2: wavg(|r| r.rel_l2, |r| r.n_points, np),
            ir: wavg(|r| r.ir, |r| r.n_points, np),
            auc3: wavg(|r| r.auc3, |r| r.n_pairs, nq),
            auc30: wavg(|r| r.auc30, |r| r.n_pairs, nq),
            n_points: np,
            n_pairs: nq,
        }
    }
}

/// Sim(3)-align the valid predicted points onto ground truth, then score.
///
/// Returns the alignment alongside the metrics. Pose metrics are computed
/// from the cameras directly since they are invariant to a global similarity
/// up to the translation scale, which the angular errors ignore.
pub fn evaluate<T: RealField + Copy + ToPrimitive>(
    pred_points: &[Vector3<T>],
    gt_points: &[Vector3<T>],
    valid: &[bool],
    pred_cams: &[Camera<T>],
    gt_cams: &[Camera<T>],
) -> Result<(MetricReport, Sim3<T>)> {
    let (aligned, sim) = align_points(pred_points, gt_points, valid)?;
    let (rel_l2, ir) = pointmap_metrics(&aligned, gt_points, valid)?;
    let eps: T = convert(DIRECTION_EPS);
    let n_points = gt_points
        .iter()
        .zip(valid)
        .filter(|(g, &v)| v && g.norm() >= eps)
        .count();
    let errors = pairwise_pose_errors(pred_cams, gt_cams)?;
    Ok((
        MetricReport {
            rel_l2,
            ir,
            auc3: pose_auc(&errors, 3.0)?,
            auc30: pose_auc(&errors, 30.0)?,
            n_points,
            n_pairs: errors.len(),
        },
        sim,
    ))
}

/// Align `pred` onto `gt` using only valid correspondences; returns every
/// predicted point transformed.
pub fn align_points<T: RealField + Copy + ToPrimitive>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    valid: &[bool],
) -> Result<(Vec<Vector3<T>>, Sim3<T>)> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(MetricError::Mismatch(pred.len(), gt.len()));
    }
    let (src, dst): (Vec<_>, Vec<_>) = (0..gt.len())
        .filter(|&i| valid[i])
        .map(|i| (pred[i], gt[i]))
        .unzip();
    if src.is_empty() {
        return Err(MetricError::NoValidPoints);
    }
    let sim = sim3_align(&src, &dst, None)?;
    Ok((pred.iter().map(|p| sim.apply(p)).collect(), sim))
}

fn to_f64<T: ToPrimitive>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
