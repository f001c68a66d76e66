//! Pinhole cameras, ray maps, depth unprojection, camera recovery from rays,
//! similarity alignment and angular error measures.
//!
//! Conventions: camera-to-world rotation `R` and camera center `t`; camera
//! frame is x right, y down, z forward; pixel `(u, v)` is column/row with its
//! center at `(u + ½, v + ½)`; principal point at the image center; ray
//! directions have unit camera-frame z so that depth is z-depth.

use nalgebra::{convert, Matrix3, RealField, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

fn lit<T: RealField + Copy>(v: f64) -> T {
    convert(v)
}

fn to_degrees<T: RealField + Copy>(rad: T) -> T {
    rad * lit::<T>(180.0) / T::pi()
}

/// Pinhole camera with per-axis field of view and a centered principal point.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T: RealField + Copy> {
    /// Camera-to-world rotation, canonical sign (scalar part ≥ 0).
    pub rotation: UnitQuaternion<T>,
    /// Camera center in world coordinates.
    pub translation: Vector3<T>,
    /// (horizontal, vertical) field of view in radians.
    pub fov: (T, T),
    pub height: usize,
    pub width: usize,
}

pub fn canonical_quaternion<T: RealField + Copy>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    if q.w < T::zero() {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl<T: RealField + Copy> Camera<T> {
    pub fn new(
        rotation: UnitQuaternion<T>,
        translation: Vector3<T>,
        fov: (T, T),
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let in_range = |f: T| f > T::zero() && f < T::pi();
        if !in_range(fov.0) || !in_range(fov.1) {
            return Err(GeometryError::InvalidCamera(format!(
                "field of view {:?} outside (0, pi)",
                fov
            )));
        }
        if height == 0 || width == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        Ok(Self {
            rotation: canonical_quaternion(rotation),
            translation,
            fov,
            height,
            width,
        })
    }

    pub fn identity(fov: (T, T), height: usize, width: usize) -> Result<Self> {
        Self::new(UnitQuaternion::identity(), Vector3::zeros(), fov, height, width)
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Focal lengths in pixels `(fx, fy)`.
    pub fn focal(&self) -> (T, T) {
        let two = lit::<T>(2.0);
        let fx = lit::<T>(self.width as f64) / two / (self.fov.0 / two).tan();
        let fy = lit::<T>(self.height as f64) / two / (self.fov.1 / two).tan();
        (fx, fy)
    }

    /// Camera-frame direction through the center of pixel `(u, v)` with unit z.
    pub fn pixel_direction(&self, u: usize, v: usize) -> Vector3<T> {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let half = lit::<T>(0.5);
        Vector3::new(
            (lit::<T>(u as f64) + half - cx) / fx,
            (lit::<T>(v as f64) + half - cy) / fy,
            T::one(),
        )
    }

    pub fn principal_point(&self) -> (T, T) {
        (
            lit::<T>(self.width as f64) / lit(2.0),
            lit::<T>(self.height as f64) / lit(2.0),
        )
    }

    /// World point to camera frame.
    pub fn to_camera_frame(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    /// Continuous pixel coordinates (pixel `u` has center `u + ½`) of a world
    /// point, or `None` behind the camera.
    pub fn project(&self, p: &Vector3<T>) -> Option<(T, T)> {
        let c = self.to_camera_frame(p);
        if c.z <= T::zero() {
            return None;
        }
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        Some((fx * c.x / c.z + cx, fy * c.y / c.z + cy))
    }
}

/// Per-pixel ray origins and unnormalized directions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMap<T: RealField + Copy> {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<Vector3<T>>,
    pub directions: Vec<Vector3<T>>,
}

impl<T: RealField + Copy> RayMap<T> {
    /// From an interleaved `H×W×6` buffer (origin xyz, direction xyz).
    pub fn from_interleaved(height: usize, width: usize, data: &[T]) -> Result<Self> {
        let expected = height * width * 6;
        if data.len() != expected {
            return Err(GeometryError::ShapeMismatch {
                expected,
                got: data.len(),
            });
        }
        let (origins, directions) = data
            .chunks(6)
            .map(|c| (Vector3::new(c[0], c[1], c[2]), Vector3::new(c[3], c[4], c[5])))
            .unzip();
        Ok(Self {
            height,
            width,
            origins,
            directions,
        })
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.origins.len() * 6);
        for (o, d) in self.origins.iter().zip(&self.directions) {
            out.extend_from_slice(&[o.x, o.y, o.z, d.x, d.y, d.z]);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// World points per pixel with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap<T: RealField + Copy> {
    pub height: usize,
    pub width: usize,
    pub points: Vec<Vector3<T>>,
    pub valid: Vec<bool>,
}

pub fn rays_from_camera<T: RealField + Copy>(cam: &Camera<T>) -> RayMap<T> {
    let r = cam.rotation_matrix();
    let n = cam.height * cam.width;
    let mut directions = Vec::with_capacity(n);
    for v in 0..cam.height {
        for u in 0..cam.width {
            directions.push(r * cam.pixel_direction(u, v));
        }
    }
    RayMap {
        height: cam.height,
        width: cam.width,
        origins: vec![cam.translation; n],
        directions,
    }
}

/// `X = origin + depth · direction` on valid pixels.
pub fn unproject<T: RealField + Copy>(rays: &RayMap<T>, depth: &[T], valid: &[bool]) -> Result<PointMap<T>> {
    let n = rays.len();
    for len in [depth.len(), valid.len()] {
        if len != n {
            return Err(GeometryError::ShapeMismatch { expected: n, got: len });
        }
    }
    let points = rays
        .origins
        .iter()
        .zip(&rays.directions)
        .zip(depth.iter().zip(valid))
        .map(|((o, d), (&z, &ok))| if ok { o + d * z } else { Vector3::zeros() })
        .collect();
    Ok(PointMap {
        height: rays.height,
        width: rays.width,
        points,
        valid: valid.to_vec(),
    })
}

/// Recover a pinhole camera from a ray map.
///
/// The center is the mean origin. The rotation is the orthogonal Procrustes
/// solution between unit-focal canonical pixel directions and the given
/// directions; on a centered pixel grid the canonical second-moment matrix is
/// diagonal, so the per-axis focal scaling does not bias the rotation. Focal
/// lengths then follow from a least-squares fit on the de-rotated directions.
pub fn camera_from_rays<T: RealField + Copy>(rays: &RayMap<T>) -> Result<Camera<T>> {
    let (h, w) = (rays.height, rays.width);
    let n = h * w;
    if n < 4 || rays.len() != n {
        return Err(GeometryError::Degenerate(format!(
            "need at least 4 consistent rays, got {} for {h}x{w}",
            rays.len()
        )));
    }
    let inv_n = T::one() / lit::<T>(n as f64);
    let center = rays.origins.iter().fold(Vector3::zeros(), |a, o| a + o) * inv_n;
    let half = lit::<T>(0.5);
    let (cx, cy) = (lit::<T>(w as f64) * half, lit::<T>(h as f64) * half);
    let canonical = |i: usize| {
        let (u, v) = (i % w, i / w);
        Vector3::new(lit::<T>(u as f64) + half - cx, lit::<T>(v as f64) + half - cy, T::one())
    };
    let mut cross = Matrix3::zeros();
    for (i, d) in rays.directions.iter().enumerate() {
        cross += d * canonical(i).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let smax = sv.max();
    if !(smax > T::zero()) || sv.min() <= smax * lit(1e-12) {
        return Err(GeometryError::Degenerate(
            "direction field has rank < 3".into(),
        ));
    }
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    let r = u * fix * vt;
    let rt = r.transpose();
    let (mut nx, mut dx, mut ny, mut dy) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (i, d) in rays.directions.iter().enumerate() {
        let local = rt * d;
        let c = canonical(i);
        nx += local.x * c.x * local.z;
        dx += c.x * c.x * local.z * local.z;
        ny += local.y * c.y * local.z;
        dy += c.y * c.y * local.z * local.z;
    }
    let (ax, ay) = (nx / dx, ny / dy);
    if !(ax > T::zero()) || !(ay > T::zero()) {
        return Err(GeometryError::Degenerate(
            "non-positive focal estimate".into(),
        ));
    }
    let two = lit::<T>(2.0);
    let fov = (
        two * (cx * ax).atan(),
        two * (cy * ay).atan(),
    );
    let rotation = UnitQuaternion::from_matrix(&r);
    Camera::new(rotation, center, fov, h, w)
}

/// Similarity transform `p ↦ s·R·p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sim3<T: RealField + Copy> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: RealField + Copy> Sim3<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Weighted closed-form similarity alignment (Umeyama) minimizing
/// `Σ wᵢ‖s·R·srcᵢ + t − dstᵢ‖²` with `det R = +1`.
pub fn sim3_align<T: RealField + Copy>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
    weights: Option<&[T]>,
) -> Result<Sim3<T>> {
    if src.len() != dst.len() {
        return Err(GeometryError::ShapeMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(GeometryError::ShapeMismatch {
                expected: src.len(),
                got: w.len(),
            });
        }
    }
    if src.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let weight = |i: usize| weights.map_or(T::one(), |w| w[i]);
    let total = (0..src.len()).fold(T::zero(), |a, i| a + weight(i));
    if !(total > T::zero()) {
        return Err(GeometryError::Degenerate("weights sum to zero".into()));
    }
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for i in 0..src.len() {
        mu_s += src[i] * weight(i);
        mu_d += dst[i] * weight(i);
    }
    mu_s /= total;
    mu_d /= total;
    let mut cov = Matrix3::zeros();
    let mut var_s = T::zero();
    for i in 0..src.len() {
        let (a, b) = (src[i] - mu_s, dst[i] - mu_d);
        cov += b * a.transpose() * weight(i);
        var_s += a.norm_squared() * weight(i);
    }
    cov /= total;
    var_s /= total;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap_or(std::cmp::Ordering::Equal));
    if !(var_s > T::zero()) || d[order[1]] <= d[order[0]] * lit(1e-12) {
        return Err(GeometryError::Degenerate(
            "collinear or coincident points".into(),
        ));
    }
    let mut fix = Matrix3::identity();
    if u.determinant() * vt.determinant() < T::zero() {
        // flip the axis of the smallest singular value
        fix[(order[2], order[2])] = -T::one();
    }
    let rotation = u * fix * vt;
    let mut trace = T::zero();
    for i in 0..3 {
        trace += d[i] * fix[(i, i)];
    }
    let scale = trace / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// Geodesic angle between two rotations, in degrees.
///
/// Evaluated as `atan2(‖skew‖, (tr − 1)/2)`, which equals the clamped
/// `arccos((tr(R₁ᵀR₂) − 1)/2)` and stays accurate near 0° and 180°.
pub fn rotation_angle<T: RealField + Copy>(r1: &Matrix3<T>, r2: &Matrix3<T>) -> T {
    let rel = r1.transpose() * r2;
    let half = lit::<T>(0.5);
    let cos = (rel.trace() - T::one()) * half;
    let sx = rel[(2, 1)] - rel[(1, 2)];
    let sy = rel[(0, 2)] - rel[(2, 0)];
    let sz = rel[(1, 0)] - rel[(0, 1)];
    let sin = (sx * sx + sy * sy + sz * sz).sqrt() * half;
    to_degrees(sin.atan2(cos))
}

/// Minimum vector norm for a direction to be defined.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Angle between two translation directions in degrees; `None` when either
/// vector is shorter than [`DIRECTION_EPS`].
pub fn translation_angle<T: RealField + Copy>(t1: &Vector3<T>, t2: &Vector3<T>) -> Option<T> {
    let eps = lit::<T>(DIRECTION_EPS);
    if t1.norm() < eps || t2.norm() < eps {
        return None;
    }
    let cross = t1.cross(t2).norm();
    let dot = t1.dot(t2);
    Some(to_degrees(cross.atan2(dot)))
}
