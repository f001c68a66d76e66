//! Procedural multi-view scenes with analytic ground truth.
//!
//! Scenes are a bounded ground plane plus a few spheres, ray cast from cameras
//! orbiting the scene centroid. Everything in a [`DatasetRecord`] is expressed
//! in the frame of view 0.

mod container;
mod mixture;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::FormatError;
use crate::geometry::{rays_from_camera, unproject, Camera, GeometryError};
use crate::losses::Target;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub use container::{read_record, record_bytes, record_from_bytes, write_record, FORMAT_VERSION, MAGIC};
pub use mixture::{mixture_probs, MixtureSampler};

pub const GENERATOR_VERSION: u32 = 1;
/// Minimum fraction of pixels that must hit geometry in every view.
pub const MIN_VALID_FRACTION: f64 = 0.3;
const CAMERA_RETRIES: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("view {view}: only {fraction:.3} of pixels valid after {tries} camera draws")]
    TooFewValid { view: usize, fraction: f64, tries: usize },
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Ray-castable surface with a base albedo and a linear albedo gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
        gradient: [f64; 3],
    },
    /// Rectangle through `point` spanned by unit axes `u`, `v` with half
    /// extents; its normal is `u × v`.
    Plane {
        point: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        extent: [f64; 2],
        albedo: [f64; 3],
        gradient: [f64; 3],
    },
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl Primitive {
    /// Nearest hit distance along `o + s·d` with `s > 1e-9`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        const MIN_S: f64 = 1e-9;
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = o - v3(*center);
                let a = d.norm_squared();
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // numerically stable root pair
                let q = -(b + b.signum() * sq);
                let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
                let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
                if lo > MIN_S {
                    Some(lo)
                } else if hi > MIN_S {
                    Some(hi)
                } else {
                    None
                }
            }
            Primitive::Plane { point, u, v, extent, .. } => {
                let n = v3(*u).cross(&v3(*v));
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = n.dot(&(v3(*point) - o)) / denom;
                if s <= MIN_S {
                    return None;
                }
                let rel = o + d * s - v3(*point);
                if rel.dot(&v3(*u)).abs() <= extent[0] && rel.dot(&v3(*v)).abs() <= extent[1] {
                    Some(s)
                } else {
                    None
                }
            }
        }
    }

    /// Distance of `x` from the surface (signed for planes).
    pub fn residual(&self, x: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => (x - v3(*center)).norm() - radius,
            Primitive::Plane { point, u, v, .. } => v3(*u).cross(&v3(*v)).dot(&(x - v3(*point))),
        }
    }

    pub fn normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, .. } => (x - v3(*center)).normalize(),
            Primitive::Plane { u, v, .. } => v3(*u).cross(&v3(*v)),
        }
    }

    fn albedo(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let (a, g) = match self {
            Primitive::Sphere { albedo, gradient, .. } | Primitive::Plane { albedo, gradient, .. } => (albedo, gradient),
        };
        let s = v3(*g).dot(x);
        v3(*a).map(|c| c + s)
    }

    fn anchor(&self) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, .. } => v3(*center),
            Primitive::Plane { point, .. } => v3(*point),
        }
    }

    /// Same surface under `x ↦ R·x + t`.
    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Primitive {
        let p = |a: &[f64; 3]| arr(r * v3(*a) + t);
        let d = |a: &[f64; 3]| arr(r * v3(*a));
        match self {
            Primitive::Sphere { center, radius, albedo, gradient } => Primitive::Sphere {
                center: p(center),
                radius: *radius,
                albedo: *albedo,
                gradient: d(gradient),
            },
            Primitive::Plane { point, u, v, extent, albedo, gradient } => Primitive::Plane {
                point: p(point),
                u: d(u),
                v: d(v),
                extent: *extent,
                albedo: *albedo,
                gradient: d(gradient),
            },
        }
    }
}

/// Camera placement on a jittered orbit around the scene centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub radius: (f64, f64),
    /// Elevation above the ground plane, radians.
    pub elevation: (f64, f64),
    /// Azimuth spread between consecutive views, radians.
    pub azimuth_step: f64,
    /// Uniform jitter added to azimuth, elevation and look-at point.
    pub jitter: f64,
}

impl Default for Orbit {
    fn default() -> Self {
        Self {
            radius: (3.0, 4.0),
            elevation: (0.35, 0.7),
            azimuth_step: 0.45,
            jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    /// Checker cells per world unit.
    pub checker_frequency: f64,
    /// Direction towards the light.
    pub light: [f64; 3],
    pub orbit: Orbit,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// (horizontal, vertical) field of view, radians.
    pub fov: (f64, f64),
}

impl SceneSpec {
    /// A ground plane with two to four resting spheres. World `y` points down.
    pub fn random(seed: u64, views: usize, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e);
        let color = |rng: &mut ChaCha8Rng| [rng.random_range(0.3..0.9), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)];
        let mut primitives = vec![Primitive::Plane {
            point: [0.0, 1.0, 0.0],
            u: [0.0, 0.0, 1.0],
            v: [1.0, 0.0, 0.0],
            extent: [3.5, 3.5],
            albedo: color(&mut rng),
            gradient: [rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05)],
        }];
        let n = rng.random_range(2..=4);
        for _ in 0..n {
            let radius = rng.random_range(0.3..0.8);
            primitives.push(Primitive::Sphere {
                center: [rng.random_range(-1.2..1.2), 1.0 - radius, rng.random_range(-1.2..1.2)],
                radius,
                albedo: color(&mut rng),
                gradient: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            });
        }
        let light = Vector3::new(rng.random_range(-0.5..0.5), -1.0, rng.random_range(-0.5..0.5)).normalize();
        let fov = 1.0;
        Self {
            seed,
            primitives,
            checker_frequency: rng.random_range(1.5..3.0),
            light: arr(light),
            orbit: Orbit::default(),
            views,
            height,
            width,
            fov: (fov, fov * height as f64 / width as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Scene(m.to_string()));
        if self.primitives.is_empty() {
            return bad("at least one primitive required");
        }
        if self.views == 0 || self.height == 0 || self.width == 0 {
            return bad("views and image size must be positive");
        }
        if v3(self.light).norm() == 0.0 {
            return bad("light direction must be nonzero");
        }
        let o = &self.orbit;
        if !(o.radius.0 > 0.0 && o.radius.0 <= o.radius.1 && o.elevation.0 <= o.elevation.1) {
            return bad("orbit ranges must be ordered and positive");
        }
        for p in &self.primitives {
            if let Primitive::Sphere { radius, .. } = p {
                if !(*radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.primitives.iter().map(Primitive::anchor).sum::<Vector3<f64>>() / self.primitives.len() as f64
    }
}

/// Camera-to-world rotation looking from `eye` at `target` with world `y` down.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> UnitQuaternion<f64> {
    let forward = (target - eye).normalize();
    let up = Vector3::new(0.0, -1.0, 0.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down, forward]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Stored camera: rotation quaternion (w, x, y, z), center, fov.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub fov: [f64; 2],
}

impl CameraRecord {
    pub fn from_camera(c: &Camera<f64>) -> Self {
        let q = c.rotation;
        Self {
            q: [q.w, q.i, q.j, q.k],
            t: arr(c.translation),
            fov: [c.fov.0, c.fov.1],
        }
    }

    pub fn camera(&self, height: usize, width: usize) -> Result<Camera<f64>> {
        let q = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(self.q[0], self.q[1], self.q[2], self.q[3]));
        Ok(Camera::new(q, v3(self.t), (self.fov[0], self.fov[1]), height, width)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    /// `H·W·3` row-major RGB.
    pub image: Vec<u8>,
    /// `H·W` z-depth, 0 on invalid pixels.
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
    pub camera: CameraRecord,
}

impl ViewRecord {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub height: usize,
    pub width: usize,
    pub generator_version: u32,
    pub units: String,
    pub views: Vec<ViewRecord>,
}

/// Model input and loss target built from a record.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// `[V, H, W, 3]` in `[0, 1]`.
    pub images: Tensor<T>,
    pub target: Target<T>,
}

impl DatasetRecord {
    pub fn cameras(&self) -> Result<Vec<Camera<f64>>> {
        self.views.iter().map(|v| v.camera.camera(self.height, self.width)).collect()
    }

    /// Ground-truth points of one view (zeros on invalid pixels).
    pub fn points(&self, view: usize) -> Result<Vec<Vector3<f64>>> {
        let v = &self.views[view];
        let cam = v.camera.camera(self.height, self.width)?;
        let depth: Vec<f64> = v.depth.iter().map(|&d| d as f64).collect();
        Ok(unproject(&rays_from_camera(&cam), &depth, &v.valid)?.points)
    }

    /// The first `views` views (all when `None`) as tensors.
    pub fn sample<T: Scalar>(&self, views: Option<usize>) -> Result<Sample<T>> {
        let nv = views.unwrap_or(self.views.len()).min(self.views.len());
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let mut images = Vec::with_capacity(nv * hw * 3);
        let mut depth = Vec::with_capacity(nv * hw);
        let mut valid = Vec::with_capacity(nv * hw);
        let mut rays = Vec::with_capacity(nv * hw * 6);
        let mut points = Vec::with_capacity(nv * hw * 3);
        let mut camera = Vec::with_capacity(nv * 9);
        for (i, v) in self.views[..nv].iter().enumerate() {
            images.extend(v.image.iter().map(|&b| b as f64 / 255.0));
            depth.extend(v.depth.iter().map(|&d| d as f64));
            valid.extend(v.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            let cam = v.camera.camera(h, w)?;
            let rm = rays_from_camera(&cam);
            for (o, d) in rm.origins.iter().zip(&rm.directions) {
                rays.extend([o.x, o.y, o.z, d.x, d.y, d.z]);
            }
            for p in self.points(i)? {
                points.extend([p.x, p.y, p.z]);
            }
            let c = &v.camera;
            camera.extend([c.t[0], c.t[1], c.t[2], c.q[0], c.q[1], c.q[2], c.q[3], c.fov[0], c.fov[1]]);
        }
        Ok(Sample {
            images: Tensor::from_f64(&[nv, h, w, 3], &images)?,
            target: Target {
                depth: Tensor::from_f64(&[nv, h, w], &depth)?,
                valid: Tensor::from_f64(&[nv, h, w], &valid)?,
                rays: Tensor::from_f64(&[nv, h, w, 6], &rays)?,
                points: Tensor::from_f64(&[nv, h, w, 3], &points)?,
                camera: Tensor::from_f64(&[nv, 9], &camera)?,
                dense: true,
            },
        })
    }
}

/// Shading parameters shared by every view of a scene.
#[derive(Clone, Debug)]
pub struct Shading {
    pub light: Vector3<f64>,
    pub checker_frequency: f64,
    pub ambient: f64,
}

/// Ray cast one view: nearest positive hit per pixel, Lambertian shading
/// modulated by a procedural checker.
pub fn render_view(primitives: &[Primitive], cam: &Camera<f64>, shading: &Shading) -> ViewRecord {
    let rays = rays_from_camera(cam);
    let n = rays.len();
    let mut image = vec![0u8; n * 3];
    let mut depth = vec![0f32; n];
    let mut valid = vec![false; n];
    let light = shading.light.normalize();
    for i in 0..n {
        let (o, d) = (&rays.origins[i], &rays.directions[i]);
        let hit = primitives
            .iter()
            .filter_map(|p| p.intersect(o, d).map(|s| (s, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((s, prim)) = hit else { continue };
        let x = o + d * s;
        let mut nrm = prim.normal(&x);
        if nrm.dot(d) > 0.0 {
            nrm = -nrm;
        }
        let f = shading.checker_frequency;
        let cell = (x.x * f).floor() + (x.y * f).floor() + (x.z * f).floor();
        let checker = if (cell as i64).rem_euclid(2) == 0 { 1.0 } else { 0.65 };
        let lambert = nrm.dot(&light).max(0.0);
        let rgb = prim.albedo(&x) * (checker * (shading.ambient + (1.0 - shading.ambient) * lambert));
        for c in 0..3 {
            image[i * 3 + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        // unit camera-frame z on the ray makes the hit distance the z-depth
        depth[i] = s as f32;
        valid[i] = true;
    }
    ViewRecord {
        image,
        depth,
        valid,
        camera: CameraRecord::from_camera(cam),
    }
}

/// Generated record plus the primitives expressed in the record's frame.
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub record: DatasetRecord,
    pub primitives: Vec<Primitive>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<DatasetRecord> {
    Ok(generate_scene_with_primitives(spec)?.record)
}

/// Sample cameras, re-express the scene relative to view 0 and render.
///
/// A view with too few valid pixels redraws its camera a bounded number of
/// times before failing.
pub fn generate_scene_with_primitives(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroid = spec.centroid();
    let o = &spec.orbit;
    let base_azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let shading_world = Shading {
        light: v3(spec.light),
        checker_frequency: spec.checker_frequency,
        ambient: 0.35,
    };
    let mut ref_frame: Option<(Matrix3<f64>, Vector3<f64>)> = None;
    let mut views = Vec::with_capacity(spec.views);
    let mut primitives = spec.primitives.clone();
    for vi in 0..spec.views {
        let mut best = 0.0;
        let mut accepted = None;
        for _ in 0..CAMERA_RETRIES {
            let jit = |rng: &mut ChaCha8Rng| if o.jitter > 0.0 { rng.random_range(-o.jitter..o.jitter) } else { 0.0 };
            let az = base_azimuth + vi as f64 * o.azimuth_step + jit(&mut rng);
            let el = rng.random_range(o.elevation.0..=o.elevation.1) + jit(&mut rng);
            let r = rng.random_range(o.radius.0..=o.radius.1);
            let eye = centroid + Vector3::new(el.cos() * az.sin(), -el.sin(), -el.cos() * az.cos()) * r;
            let target = centroid + Vector3::new(jit(&mut rng), jit(&mut rng), jit(&mut rng));
            let world = Camera::new(look_at(&eye, &target), eye, spec.fov, spec.height, spec.width)?;
            // express everything relative to view 0: x' = R0ᵀ (x − t0)
            let (r0t, t0) = match ref_frame {
                Some(f) => f,
                None => (world.rotation_matrix().transpose(), world.translation),
            };
            let to_ref = |x: Vector3<f64>| r0t * (x - t0);
            let cam = if vi == 0 {
                Camera::identity(spec.fov, spec.height, spec.width)?
            } else {
                let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                    r0t * world.rotation_matrix(),
                ));
                Camera::new(rot, to_ref(world.translation), spec.fov, spec.height, spec.width)?
            };
            let prims: Vec<_> = if vi == 0 {
                spec.primitives.iter().map(|p| p.transformed(&r0t, &(-(r0t * t0)))).collect()
            } else {
                primitives.clone()
            };
            let shade = Shading {
                light: r0t * shading_world.light,
                ..shading_world.clone()
            };
            let view = render_view(&prims, &cam, &shade);
            let frac = view.valid_fraction();
            if frac >= MIN_VALID_FRACTION {
                accepted = Some((view, prims, (r0t, t0)));
                break;
            }
            best = f64::max(best, frac);
        }
        let Some((view, prims, frame)) = accepted else {
            return Err(DataError::TooFewValid {
                view: vi,
                fraction: best,
                tries: CAMERA_RETRIES,
            });
        };
        if vi == 0 {
            ref_frame = Some(frame);
            primitives = prims;
        }
        views.push(view);
    }
    Ok(GeneratedScene {
        record: DatasetRecord {
            height: spec.height,
            width: spec.width,
            generator_version: GENERATOR_VERSION,
            units: "scene units; poses relative to view 0".to_string(),
            views,
        },
        primitives,
    })
}
