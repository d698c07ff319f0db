//! Analytic scenes with an exact-in-the-limit volume renderer, camera
//! trajectories and posed-image datasets on disk.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormality_error, rotation_of, CameraModel, Ray, Vec3};
use crate::raster::Image;
use crate::trainer::TrainView;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    /// Everything at or below `height` along +z.
    Ground { height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Density per scene unit.
    pub density: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Adds a view-dependent highlight; not used for quantitative checks.
    #[serde(default)]
    pub glossy: bool,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Shape {
    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Shape::Sphere { center, radius } => (x - v3(*center)).norm_squared() <= radius * radius,
            Shape::Box { min, max } => (0..3).all(|i| x[i] >= min[i] && x[i] <= max[i]),
            Shape::Ground { height } => x.z <= *height,
        }
    }

    /// Parameter interval where the ray is inside the shape, if any.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = origin - v3(*center);
                let b = oc.dot(dir);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                    } else {
                        let a = (min[i] - origin[i]) / dir[i];
                        let b = (max[i] - origin[i]) / dir[i];
                        lo = lo.max(a.min(b));
                        hi = hi.min(a.max(b));
                    }
                }
                (hi > lo).then_some((lo, hi))
            }
            Shape::Ground { height } => {
                if dir.z.abs() < 1e-15 {
                    return (origin.z <= *height).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let t = (height - origin.z) / dir.z;
                Some(if dir.z > 0.0 { (f64::NEG_INFINITY, t) } else { (t, f64::INFINITY) })
            }
        }
    }
}

const HIGHLIGHT_DIR: [f64; 3] = [0.48, -0.6, 0.64];

fn shade(albedo: [f64; 3], glossy: bool, dir: &Vec3) -> [f64; 3] {
    if !glossy {
        return albedo;
    }
    let h = 0.35 * (-dir).dot(&v3(HIGHLIGHT_DIR)).max(0.0).powi(8);
    albedo.map(|a| (a + h).min(1.0))
}

impl AnalyticScene {
    pub fn empty(background: [f64; 3]) -> Self {
        Self { primitives: Vec::new(), background, glossy: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let ok_shape = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { min, max } => (0..3).all(|k| max[k] > min[k]),
                Shape::Ground { height } => height.is_finite(),
            };
            let ok_albedo = p.albedo.iter().all(|a| (0.0..=1.0).contains(a));
            if !ok_shape || !(p.density >= 0.0) || !ok_albedo {
                return Err(Error::InvalidArgument(format!("primitive {i} is malformed")));
            }
        }
        Ok(())
    }
}

/// Density and color at `x`: summed densities of the containing primitives
/// and their density-weighted albedo (background color in empty space).
pub fn scene_field(scene: &AnalyticScene, x: &Vec3) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut rgb = [0.0; 3];
    for p in scene.primitives.iter().filter(|p| p.shape.contains(x)) {
        sigma += p.density;
        for c in 0..3 {
            rgb[c] += p.density * p.albedo[c];
        }
    }
    if sigma > 0.0 {
        (sigma, rgb.map(|v| v / sigma))
    } else {
        (0.0, scene.background)
    }
}

/// Composites one ray in fixed steps of `1 / steps_per_unit`. Each step's
/// optical depth is the exact overlap of the step with every primitive, so
/// steps covering a single primitive are integrated without error.
pub fn oracle_ray(scene: &AnalyticScene, ray: &Ray, steps_per_unit: f64) -> [f64; 3] {
    let spans: Vec<(f64, f64, &Primitive)> = scene
        .primitives
        .iter()
        .filter_map(|p| {
            let (a, b) = p.shape.ray_interval(&ray.origin, &ray.dir)?;
            let (a, b) = (a.max(ray.near), b.min(ray.far));
            (b > a && p.density > 0.0).then_some((a, b, p))
        })
        .collect();
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    if !spans.is_empty() {
        let lo = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let h = 1.0 / steps_per_unit;
        // Steps are anchored at the near plane so every pixel shares one lattice.
        let first = ((lo - ray.near) / h).floor() as i64;
        let last = ((hi - ray.near) / h).ceil() as i64;
        for k in first..last {
            let a = ray.near + k as f64 * h;
            let b = a + h;
            let mut tau = 0.0;
            let mut emitted = [0.0; 3];
            for &(s0, s1, p) in &spans {
                let len = b.min(s1) - a.max(s0);
                if len > 0.0 {
                    let d = p.density * len;
                    tau += d;
                    let c = shade(p.albedo, scene.glossy, &ray.dir);
                    for ch in 0..3 {
                        emitted[ch] += d * c[ch];
                    }
                }
            }
            if tau > 0.0 {
                let w = trans * (1.0 - (-tau).exp());
                for ch in 0..3 {
                    rgb[ch] += w * emitted[ch] / tau;
                }
                trans *= (-tau).exp();
            }
            if trans < 1e-12 {
                break;
            }
        }
    }
    for ch in 0..3 {
        rgb[ch] += trans * scene.background[ch];
    }
    rgb
}

pub fn oracle_render(scene: &AnalyticScene, cam: &CameraModel, steps_per_unit: f64) -> Image {
    let mut img = Image::new(cam.width, cam.height);
    img.data.par_chunks_mut(cam.width * 3).enumerate().for_each(|(y, row)| {
        for x in 0..cam.width {
            let rgb = oracle_ray(scene, &cam.pixel_ray(x, y), steps_per_unit);
            for c in 0..3 {
                row[3 * x + c] = rgb[c] as f32;
            }
        }
    });
    img
}

/// Largest per-channel change when the step is halved.
pub fn convergence_gap(scene: &AnalyticScene, cam: &CameraModel, steps_per_unit: f64) -> f64 {
    let a = oracle_render(scene, cam, steps_per_unit);
    let b = oracle_render(scene, cam, 2.0 * steps_per_unit);
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Tolerance a halved step must stay within.
pub const CONVERGENCE_TOLERANCE: f64 = 1.0 / 512.0;

/// Camera-to-world pose at `eye` looking at `target` with +z up.
pub fn look_at(eye: Vec3, target: Vec3) -> Matrix4<f64> {
    let fwd = (target - eye).normalize();
    let up_hint = if fwd.cross(&Vec3::z()).norm() < 1e-9 { Vec3::x() } else { Vec3::z() };
    let right = fwd.cross(&up_hint).normalize();
    let up = right.cross(&fwd);
    let mut m = Matrix4::identity();
    for r in 0..3 {
        m[(r, 0)] = right[r];
        m[(r, 1)] = up[r];
        m[(r, 2)] = -fwd[r];
        m[(r, 3)] = eye[r];
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Evenly spaced on a horizontal circle, looking at `target`.
    Orbit { radius: f64, height: f64, target: [f64; 3] },
    /// Steps along `direction` with fixed orientation and optional sideways sway.
    Forward { start: [f64; 3], direction: [f64; 3], step: f64, sway: f64 },
}

pub fn make_trajectory(kind: &Trajectory, n: usize) -> Vec<Matrix4<f64>> {
    match kind {
        Trajectory::Orbit { radius, height, target } => (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                let t = v3(*target);
                let eye = Vec3::new(t.x + radius * a.cos(), t.y + radius * a.sin(), t.z + height);
                look_at(eye, t)
            })
            .collect(),
        Trajectory::Forward { start, direction, step, sway } => {
            let dir = v3(*direction).normalize();
            let base = look_at(Vec3::zeros(), dir);
            let right = Vec3::new(base[(0, 0)], base[(1, 0)], base[(2, 0)]);
            (0..n)
                .map(|i| {
                    let eye = v3(*start) + dir * (step * i as f64) + right * (sway * (0.7 * i as f64).sin());
                    let mut m = base;
                    for r in 0..3 {
                        m[(r, 3)] = eye[r];
                    }
                    m
                })
                .collect()
        }
    }
}

/// Pinhole parameters shared by every frame of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Centered principal point and a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64, near: f64, far: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64, width, height, near, far }
    }

    pub fn camera(&self, pose: Matrix4<f64>) -> Result<CameraModel> {
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose, self.near, self.far)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    /// Row-major camera-to-world matrix.
    pub transform: Vec<f64>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }
}

pub fn pose_to_row_major(m: &Matrix4<f64>) -> Vec<f64> {
    (0..16).map(|i| m[(i / 4, i % 4)]).collect()
}

pub fn pose_from_row_major(v: &[f64]) -> Option<Matrix4<f64>> {
    (v.len() == 16).then(|| Matrix4::from_row_slice(v))
}

/// Every seventh frame (index 6, 13, ...) is held out for testing.
pub fn split_for(index: usize) -> &'static str {
    if index % 7 == 6 {
        "test"
    } else {
        "train"
    }
}

/// A loaded dataset: manifest plus decoded cameras and images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn indices(&self, split: &str) -> Vec<usize> {
        self.manifest.frames.iter().enumerate().filter(|(_, f)| f.split == split).map(|(i, _)| i).collect()
    }

    pub fn views(&self, split: &str) -> Vec<TrainView> {
        self.indices(split)
            .into_iter()
            .map(|i| TrainView { camera: self.cameras[i].clone(), image: self.images[i].clone() })
            .collect()
    }
}

/// Renders every pose with the oracle and writes PNGs plus `manifest.json`.
/// The step size is checked for convergence on the first pose.
pub fn write_dataset(
    scene: &AnalyticScene,
    poses: &[Matrix4<f64>],
    intrinsics: &Intrinsics,
    steps_per_unit: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    scene.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cameras = poses.iter().map(|p| intrinsics.camera(*p)).collect::<Result<Vec<_>>>()?;
    if let Some(cam) = cameras.first() {
        let gap = convergence_gap(scene, cam, steps_per_unit);
        if gap >= CONVERGENCE_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "oracle step {steps_per_unit}/unit not converged: halving changes a pixel by {gap:.5}"
            )));
        }
    }
    let frames: Vec<FrameEntry> = cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| -> Result<FrameEntry> {
            let file = format!("frame_{i:04}.png");
            oracle_render(scene, cam, steps_per_unit).save_png(&out_dir.join(&file))?;
            Ok(FrameEntry { file, transform: pose_to_row_major(&cam.cam_to_world), split: split_for(i).to_string() })
        })
        .collect::<Result<_>>()?;
    let i = intrinsics;
    let manifest = DatasetManifest {
        fx: i.fx,
        fy: i.fy,
        cx: i.cx,
        cy: i.cy,
        width: i.width,
        height: i.height,
        near: i.near,
        far: i.far,
        frames,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Parses and validates `dir/manifest.json` and decodes every image.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::dataset(path.display().to_string(), e.to_string()))?;
    let intr = manifest.intrinsics();
    let mut cameras = Vec::with_capacity(manifest.frames.len());
    let mut images = Vec::with_capacity(manifest.frames.len());
    for (k, frame) in manifest.frames.iter().enumerate() {
        let ctx = || format!("frame {k} ({})", frame.file);
        let pose = pose_from_row_major(&frame.transform)
            .ok_or_else(|| Error::dataset(ctx(), format!("transform has {} entries, expected 16", frame.transform.len())))?;
        let err = orthonormality_error(&rotation_of(&pose));
        if err > 1e-5 {
            return Err(Error::dataset(ctx(), format!("rotation is not orthonormal (error {err:.2e})")));
        }
        if frame.split != "train" && frame.split != "test" {
            return Err(Error::dataset(ctx(), format!("unknown split {:?}", frame.split)));
        }
        cameras.push(intr.camera(pose).map_err(|e| Error::dataset(ctx(), e.to_string()))?);
        let img_path = dir.join(&frame.file);
        let img = Image::load_png(&img_path)?;
        if img.width != manifest.width || img.height != manifest.height {
            return Err(Error::dataset(
                ctx(),
                format!("image is {}x{}, manifest declares {}x{}", img.width, img.height, manifest.width, manifest.height),
            ));
        }
        images.push(img);
    }
    Ok(Dataset { root: dir.to_path_buf(), manifest, cameras, images })
}

/// A named scene with the capture setup used to generate its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene: AnalyticScene,
    pub trajectories: Vec<Trajectory>,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    pub steps_per_unit: f64,
}

pub const SCENE_NAMES: [&str; 3] = ["three_spheres", "two_scale", "corridor"];

fn sphere(center: [f64; 3], radius: f64, density: f64, albedo: [f64; 3]) -> Primitive {
    Primitive { shape: Shape::Sphere { center, radius }, density, albedo }
}

pub fn builtin_scene(name: &str) -> Result<SceneSpec> {
    let white = [1.0; 3];
    match name {
        "three_spheres" => Ok(SceneSpec {
            scene: AnalyticScene {
                primitives: vec![
                    sphere([0.0, 0.0, 0.0], 0.7, 30.0, [0.85, 0.2, 0.15]),
                    sphere([1.1, 0.6, -0.2], 0.45, 30.0, [0.2, 0.7, 0.25]),
                    sphere([-0.8, 0.9, 0.3], 0.4, 30.0, [0.15, 0.3, 0.85]),
                ],
                background: white,
                glossy: false,
            },
            trajectories: vec![Trajectory::Orbit { radius: 4.0, height: 1.5, target: [0.0; 3] }],
            fov_deg: 50.0,
            near: 1.5,
            far: 7.0,
            steps_per_unit: 256.0,
        }),
        "two_scale" => {
            let mut prims = vec![sphere([0.0, 0.0, 0.0], 0.8, 30.0, [0.8, 0.75, 0.2])];
            // A ring of small spheres only resolved by the close cameras.
            for k in 0..8 {
                let a = k as f64 * std::f64::consts::TAU / 8.0;
                let c = [0.3 + 0.6 * (k % 2) as f64, 0.2 + 0.08 * k as f64, 0.9 - 0.6 * (k % 2) as f64];
                prims.push(sphere([1.4 * a.cos(), 1.4 * a.sin(), 0.1 * (k % 3) as f64], 0.18, 40.0, c));
            }
            Ok(SceneSpec {
                scene: AnalyticScene { primitives: prims, background: white, glossy: false },
                trajectories: vec![
                    Trajectory::Orbit { radius: 3.0, height: 1.0, target: [0.0; 3] },
                    Trajectory::Orbit { radius: 7.0, height: 2.5, target: [0.0; 3] },
                ],
                fov_deg: 50.0,
                near: 0.8,
                far: 11.0,
                steps_per_unit: 256.0,
            })
        }
        "corridor" => Ok(SceneSpec {
            scene: AnalyticScene {
                primitives: vec![
                    Primitive { shape: Shape::Ground { height: -1.0 }, density: 20.0, albedo: [0.55, 0.5, 0.45] },
                    Primitive { shape: Shape::Box { min: [-4.0, 1.5, -1.0], max: [8.0, 2.0, 1.5] }, density: 20.0, albedo: [0.7, 0.3, 0.3] },
                    Primitive { shape: Shape::Box { min: [-4.0, -2.0, -1.0], max: [8.0, -1.5, 1.5] }, density: 20.0, albedo: [0.3, 0.3, 0.7] },
                    sphere([5.0, 0.0, 0.0], 0.6, 30.0, [0.2, 0.8, 0.3]),
                ],
                background: white,
                glossy: false,
            },
            trajectories: vec![Trajectory::Forward { start: [-3.0, 0.0, 0.2], direction: [1.0, 0.0, 0.0], step: 0.12, sway: 0.15 }],
            fov_deg: 60.0,
            near: 0.3,
            far: 12.0,
            steps_per_unit: 256.0,
        }),
        _ => Err(Error::InvalidArgument(format!("unknown scene {name:?}; expected one of {}", SCENE_NAMES.join(", ")))),
    }
}

impl SceneSpec {
    /// `n` poses, split evenly (and interleaved) across the trajectories.
    pub fn poses(&self, n: usize) -> Vec<Matrix4<f64>> {
        let k = self.trajectories.len();
        let per: Vec<Vec<Matrix4<f64>>> = self
            .trajectories
            .iter()
            .enumerate()
            .map(|(j, t)| make_trajectory(t, n / k + usize::from(j < n % k)))
            .collect();
        (0..n).map(|i| per[i % k][i / k]).collect()
    }

    pub fn intrinsics(&self, width: usize, height: usize) -> Intrinsics {
        Intrinsics::from_fov(width, height, self.fov_deg, self.near, self.far)
    }

    /// Writes an `n`-view dataset of this scene.
    pub fn generate(&self, n: usize, width: usize, height: usize, out_dir: &Path) -> Result<DatasetManifest> {
        write_dataset(&self.scene, &self.poses(n), &self.intrinsics(width, height), self.steps_per_unit, out_dir)
    }
}

#[cfg(test)]
mod tests;
