//! Scale-normalized multi-task training loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PredictionVars;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("normalization needs at least one valid point")]
    EmptyValid,
    #[error("normalization scale undefined: mean point norm is zero")]
    ZeroNorm,
    #[error("confidence must be strictly positive")]
    NonPositiveConfidence,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub depth: f64,
    pub ray: f64,
    pub point: f64,
    pub camera: f64,
    pub grad: f64,
    pub cam_translation: f64,
    pub cam_rotation: f64,
    pub cam_fov: f64,
    pub conf_lambda: f64,
    pub grad_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            ray: 1.0,
            point: 1.0,
            camera: 1.0,
            grad: 1.0,
            cam_translation: 1.0,
            cam_rotation: 1.0,
            cam_fov: 0.5,
            conf_lambda: 0.2,
            grad_scales: 4,
        }
    }
}

/// Ground truth for one multi-view sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Target<T> {
    /// `[V, H, W]` z-depth.
    pub depth: Tensor<T>,
    /// `[V, H, W]` with 1 for valid pixels and 0 otherwise.
    pub valid: Tensor<T>,
    /// `[V, H, W, 6]`.
    pub rays: Tensor<T>,
    /// `[V, H, W, 3]`.
    pub points: Tensor<T>,
    /// `[V, 9]`: translation, quaternion (w, x, y, z), fov (x, y).
    pub camera: Tensor<T>,
    /// Dense synthetic depth enables the gradient term.
    pub dense: bool,
}

impl<T: Scalar> Target<T> {
    pub fn views(&self) -> usize {
        self.depth.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let s = self.depth.shape();
        if s.len() != 3 {
            return Err(LossError::Shape(format!("depth must be [V, H, W], got {s:?}")));
        }
        let (v, h, w) = (s[0], s[1], s[2]);
        for (label, t, want) in [
            ("valid", &self.valid, vec![v, h, w]),
            ("rays", &self.rays, vec![v, h, w, 6]),
            ("points", &self.points, vec![v, h, w, 3]),
            ("camera", &self.camera, vec![v, 9]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(LossError::Shape(format!("{label}: expected {want:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Target<U> {
        Target {
            depth: self.depth.cast(),
            valid: self.valid.cast(),
            rays: self.rays.cast(),
            points: self.points.cast(),
            camera: self.camera.cast(),
            dense: self.dense,
        }
    }
}

/// `s = (mean ‖X_j‖₂ over valid j)⁻¹` for interleaved `xyz` points.
pub fn norm_scale(points: &[f64], valid: &[bool]) -> Result<f64> {
    if points.len() != valid.len() * 3 {
        return Err(LossError::Shape(format!("{} coordinates for {} pixels", points.len(), valid.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &ok) in points.chunks_exact(3).zip(valid) {
        if ok {
            sum += (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(LossError::EmptyValid);
    }
    if sum == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    Ok(n as f64 / sum)
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub depth: f64,
    pub grad: f64,
    pub ray: f64,
    pub point: f64,
    pub camera: f64,
    /// Confidence-weighted depth term (stage 2).
    pub conf: f64,
    pub pred_scale: f64,
    pub gt_scale: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub report: LossReport,
}

fn masked_mean<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: Var, count: f64) -> Result<Var> {
    let m = tape.mul(x, mask)?;
    let s = tape.sum_all(m)?;
    Ok(tape.mul_scalar(s, T::lit(1.0 / count))?)
}

fn mask_count<T: Scalar>(valid: &Tensor<T>) -> Result<f64> {
    let n: f64 = valid.data().iter().map(|v| v.as_f64()).sum();
    if n <= 0.0 {
        return Err(LossError::EmptyValid);
    }
    Ok(n)
}

/// Differentiable `(mean ‖X‖ over valid)⁻¹` for points `[V, H, W, 3]`.
fn scale_on_tape<T: Scalar>(tape: &mut Tape<T>, points: Var, mask: Var, count: f64) -> Result<Var> {
    let n = tape.norm_last(points)?;
    let mean = masked_mean(tape, n, mask, count)?;
    if tape.value(mean).item().as_f64() == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    let one = tape.scalar_const(T::one());
    Ok(tape.div(one, mean)?)
}

/// Multi-scale ℓ₁ loss on forward-difference depth gradients.
///
/// Both depths `[V, H, W]` are already scale-normalized. Each scale halves the
/// resolution by 2×2 average pooling; a pooled pixel is valid only when all
/// four children are. Per scale, the mean runs over the union of valid x and
/// y gradient pixels; scales are summed.
pub fn grad_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, valid: &Tensor<T>, scales: usize) -> Result<Var> {
    let mut r = tape.sub(pred, gt)?;
    let mut mask = valid.clone();
    let mut total = tape.scalar_const(T::zero());
    for s in 0..scales {
        if s > 0 {
            let shape = tape.shape(r).to_vec();
            let (v, h, w) = (shape[0], shape[1] / 2, shape[2] / 2);
            if h == 0 || w == 0 {
                break;
            }
            let cropped = tape.narrow(r, 1, 0, 2 * h)?;
            let cropped = tape.narrow(cropped, 2, 0, 2 * w)?;
            let x = tape.reshape(cropped, &[v, h, 2, w, 2])?;
            let x = tape.transpose(x, &[0, 1, 3, 2, 4])?;
            let x = tape.reshape(x, &[v, h, w, 4])?;
            r = tape.mean(x, 3)?;
            mask = pool_mask(&mask, h, w);
        }
        let shape = tape.shape(r).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let md = mask.data();
        let mut terms = Vec::new();
        let mut count = 0.0;
        for (axis, len) in [(2usize, w), (1usize, h)] {
            if len < 2 {
                continue;
            }
            let a = tape.narrow(r, axis, 1, len - 1)?;
            let b = tape.narrow(r, axis, 0, len - 1)?;
            let g = tape.sub(a, b)?;
            let gshape = tape.shape(g).to_vec();
            let gm = Tensor::from_fn(&gshape, |i| {
                let x = i % gshape[2];
                let y = (i / gshape[2]) % gshape[1];
                let vi = i / (gshape[1] * gshape[2]);
                let (y2, x2) = if axis == 2 { (y, x + 1) } else { (y + 1, x) };
                let p = md[(vi * h + y) * w + x];
                let q = md[(vi * h + y2) * w + x2];
                if p.as_f64() > 0.0 && q.as_f64() > 0.0 {
                    T::one()
                } else {
                    T::zero()
                }
            });
            count += gm.data().iter().map(|x| x.as_f64()).sum::<f64>();
            let gm = tape.constant(gm);
            let ag = tape.abs(g)?;
            let m = tape.mul(ag, gm)?;
            terms.push(tape.sum_all(m)?);
        }
        if count > 0.0 {
            for t in terms {
                let t = tape.mul_scalar(t, T::lit(1.0 / count))?;
                total = tape.add(total, t)?;
            }
        }
    }
    Ok(total)
}

fn pool_mask<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = mask.shape();
    let (v, w0) = (s[0], s[2]);
    let h0 = s[1];
    let d = mask.data();
    Tensor::from_fn(&[v, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let vi = i / (h * w);
        let all = (0..2).all(|dy| (0..2).all(|dx| d[(vi * h0 + 2 * y + dy) * w0 + 2 * x + dx].as_f64() > 0.0));
        if all {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `mean over valid of c·‖a − b‖₂ − λ log c`; `a`, `b` are `[V, H, W]` or `[V, H, W, k]`.
pub fn conf_loss<T: Scalar>(tape: &mut Tape<T>, c: Var, a: Var, b: Var, valid: &Tensor<T>, lambda: f64) -> Result<Var> {
    if tape.value(c).data().iter().any(|&x| !(x > T::zero())) {
        return Err(LossError::NonPositiveConfidence);
    }
    let d = tape.sub(a, b)?;
    let r = if tape.shape(d).len() == tape.shape(c).len() {
        tape.abs(d)?
    } else {
        tape.norm_last(d)?
    };
    let cr = tape.mul(c, r)?;
    let lc = tape.log(c)?;
    let lc = tape.mul_scalar(lc, T::lit(lambda))?;
    let per = tape.sub(cr, lc)?;
    let mask = tape.constant(valid.clone());
    masked_mean(tape, per, mask, mask_count(valid)?)
}

/// Mean over views of `w_t·ℓ₁(ŝt̂, s̄t) + w_q·min(ℓ₁(q̂, q), ℓ₁(q̂, −q)) + w_f·ℓ₁(f̂, f)`.
pub fn camera_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    pred_scale: Var,
    gt_scale: f64,
    w: &LossWeights,
) -> Result<Var> {
    let v = gt.shape()[0];
    let gd = gt.data();
    let col = |range: std::ops::Range<usize>, f: &dyn Fn(T) -> T| {
        let n = range.len();
        Tensor::from_fn(&[v, n], |i| f(gd[(i / n) * 9 + range.start + i % n]))
    };
    let s = T::lit(gt_scale);
    let gt_t = tape.constant(col(0..3, &|x| x * s));
    let gt_q = tape.constant(col(3..7, &|x| x));
    let gt_nq = tape.constant(col(3..7, &|x| -x));
    let gt_f = tape.constant(col(7..9, &|x| x));
    let parts = tape.split(pred, 1, &[3, 4, 2])?;

    let l1 = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        Ok(tape.sum(d, 1)?)
    };
    let t_hat = tape.mul(parts[0], pred_scale)?;
    let lt = l1(tape, t_hat, gt_t)?;
    let lq_pos = l1(tape, parts[1], gt_q)?;
    let lq_neg = l1(tape, parts[1], gt_nq)?;
    let a = tape.neg(lq_pos)?;
    let b = tape.neg(lq_neg)?;
    let a = tape.reshape(a, &[v, 1])?;
    let b = tape.reshape(b, &[v, 1])?;
    let both = tape.concat(&[a, b], 1)?;
    let m = tape.max(both, 1)?;
    let lq = tape.neg(m)?;
    let lf = l1(tape, parts[2], gt_f)?;

    let lt = tape.mul_scalar(lt, T::lit(w.cam_translation))?;
    let lq = tape.mul_scalar(lq, T::lit(w.cam_rotation))?;
    let lf = tape.mul_scalar(lf, T::lit(w.cam_fov))?;
    let sum = tape.add(lt, lq)?;
    let sum = tape.add(sum, lf)?;
    Ok(tape.mean(sum, 0)?)
}

/// Training stage: 1 is end-to-end, 2 fine-tunes the depth branch with confidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Full objective: stage 1 sums depth, gradient, ray, pointmap and camera
/// terms; stage 2 keeps a confidence-weighted depth term and the pointmap term.
pub fn stage_loss<T: Scalar>(
    tape: &mut Tape<T>,
    stage: Stage,
    pred: &PredictionVars,
    gt: &Target<T>,
    w: &LossWeights,
) -> Result<LossOutput> {
    gt.check()?;
    let pshape = tape.shape(pred.points).to_vec();
    if pshape != gt.points.shape() {
        return Err(LossError::Shape(format!(
            "predicted points {pshape:?} vs target {:?}",
            gt.points.shape()
        )));
    }
    let count = mask_count(&gt.valid)?;
    let mask = tape.constant(gt.valid.clone());
    let valid: Vec<bool> = gt.valid.data().iter().map(|x| x.as_f64() > 0.0).collect();
    let gt_points: Vec<f64> = gt.points.data().iter().map(|x| x.as_f64()).collect();
    let s_gt = norm_scale(&gt_points, &valid)?;
    let s_pred = scale_on_tape(tape, pred.points, mask, count)?;
    let sg = T::lit(s_gt);

    let scaled = |tape: &mut Tape<T>, t: &Tensor<T>| {
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * sg).collect()).expect("same shape");
        tape.constant(v)
    };
    let gt_depth = scaled(tape, &gt.depth);
    let gt_pts = scaled(tape, &gt.points);
    let pred_depth = tape.mul(pred.depth, s_pred)?;
    let pred_pts = tape.mul(pred.points, s_pred)?;

    let mut report = LossReport {
        pred_scale: tape.value(s_pred).item().as_f64(),
        gt_scale: s_gt,
        ..Default::default()
    };
    let mut total = tape.scalar_const(T::zero());
    let mut add = |tape: &mut Tape<T>, term: Var, weight: f64| -> Result<f64> {
        let wt = tape.mul_scalar(term, T::lit(weight))?;
        total = tape.add(total, wt)?;
        Ok(tape.value(term).item().as_f64())
    };

    let dp = tape.sub(pred_pts, gt_pts)?;
    let dp = tape.norm_last(dp)?;
    let point = masked_mean(tape, dp, mask, count)?;
    report.point = add(tape, point, w.point)?;

    match stage {
        Stage::One => {
            let dd = tape.sub(pred_depth, gt_depth)?;
            let dd = tape.abs(dd)?;
            let depth = masked_mean(tape, dd, mask, count)?;
            report.depth = add(tape, depth, w.depth)?;

            if gt.dense && w.grad > 0.0 {
                let g = grad_loss(tape, pred_depth, gt_depth, &gt.valid, w.grad_scales)?;
                report.grad = add(tape, g, w.grad)?;
            }

            // Origins carry the scene scale; directions are unit-z and scale-free.
            let rp = tape.split(pred.rays, 3, &[3, 3])?;
            let gr = gt.rays.data();
            let n = gr.len() / 6;
            let go = Tensor::from_fn(&[n, 3], |i| gr[(i / 3) * 6 + i % 3] * sg);
            let gd = Tensor::from_fn(&[n, 3], |i| gr[(i / 3) * 6 + 3 + i % 3]);
            let mut origin_shape = gt.rays.shape().to_vec();
            origin_shape[3] = 3;
            let go = tape.constant(go.reshaped(&origin_shape)?);
            let gd = tape.constant(gd.reshaped(&origin_shape)?);
            let po = tape.mul(rp[0], s_pred)?;
            let d_o = tape.sub(po, go)?;
            let d_d = tape.sub(rp[1], gd)?;
            let both = tape.concat(&[d_o, d_d], 3)?;
            let both = tape.abs(both)?;
            let ray = tape.mean_all(both)?;
            report.ray = add(tape, ray, w.ray)?;

            let cam = camera_loss(tape, pred.camera, &gt.camera, s_pred, s_gt, w)?;
            report.camera = add(tape, cam, w.camera)?;
        }
        Stage::Two => {
            let c = pred.confidence.ok_or_else(|| {
                LossError::Shape("stage 2 needs a confidence map from the convolutional head".into())
            })?;
            let conf = conf_loss(tape, c, pred_depth, gt_depth, &gt.valid, w.conf_lambda)?;
            report.conf = add(tape, conf, w.depth)?;
        }
    }
    report.total = tape.value(total).item().as_f64();
    Ok(LossOutput { total, report })
}
