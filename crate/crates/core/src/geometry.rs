//! Pinhole cameras, ray generation, interval sampling along rays and the
//! probe-local spherical coordinate transform.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pinhole camera looking down its local -z axis, with camera-space y up
/// and pixel-space y down.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_world: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: Matrix4<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::InvalidArgument(format!("need 0 < near < far, got {near}, {far}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        let err = orthonormality_error(&rotation_of(&cam_to_world));
        if err > 1e-5 {
            return Err(Error::InvalidArgument(format!("camera rotation not orthonormal (error {err:e})")));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_to_world,
            near,
            far,
        })
    }

    pub fn with_pose(&self, cam_to_world: Matrix4<f64>) -> Result<Self> {
        Self::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, cam_to_world, self.near, self.far)
    }

    pub fn position(&self) -> Vec3 {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Ray through pixel coordinate `(px, py)`; integer pixel `(i, j)` is
    /// sampled at its center `(i + 0.5, j + 0.5)`.
    pub fn generate_ray(&self, px: f64, py: f64) -> Ray {
        let local = Vec3::new((px - self.cx) / self.fx, -(py - self.cy) / self.fy, -1.0);
        let dir = (rotation_of(&self.cam_to_world) * local).normalize();
        Ray {
            origin: self.position(),
            dir,
            near: self.near,
            far: self.far,
        }
    }

    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.generate_ray(x as f64 + 0.5, y as f64 + 0.5)
    }
}

pub fn rotation_of(m: &Matrix4<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

/// Largest entry of `R^T R - I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Normalized inverse distance and unit-range spherical angles of a point
/// relative to a probe center.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProbeCoord {
    /// `1 / (|x - p| + 1)`, in (0, 1].
    pub t: f64,
    /// Polar angle over pi, in [0, 1].
    pub theta_hat: f64,
    /// Azimuth mapped from atan2's range onto [0, 1).
    pub phi_hat: f64,
}

/// Projects `x` into the spherical frame of a probe at `p`.
///
/// The azimuth uses the full-range `atan2`; on the polar axis it is 0.
#[inline]
pub fn probe_project(x: &Vec3, p: &Vec3) -> Result<ProbeCoord> {
    let r = x - p;
    let dist = r.norm();
    if dist < 1e-8 {
        return Err(Error::DegenerateProjection { distance: dist });
    }
    let t = 1.0 / (dist + 1.0);
    let theta_hat = (r.z / dist).clamp(-1.0, 1.0).acos() / PI;
    let phi_hat = if r.x == 0.0 && r.y == 0.0 {
        0.0
    } else {
        let v = (r.y.atan2(r.x) + PI) / (2.0 * PI);
        if v >= 1.0 {
            0.0
        } else {
            v
        }
    };
    Ok(ProbeCoord { t, theta_hat, phi_hat })
}

/// Direction whose projection has the given unit-range angles.
pub fn direction_from_angles(theta_hat: f64, phi_hat: f64) -> Vec3 {
    let theta = theta_hat * PI;
    let phi = phi_hat * 2.0 * PI - PI;
    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

#[inline]
fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Sawtooth warp `frac(nu * angle)` of both angles; output lies in [0, 1).
#[inline]
pub fn periodic_warp(coord: &ProbeCoord, nu: [f64; 2]) -> (f64, f64) {
    (frac(nu[0] * coord.theta_hat), frac(nu[1] * coord.phi_hat))
}

/// `n + 1` interval boundaries covering `[near, far]`.
///
/// With jitter, each interior boundary `k` is drawn uniformly from
/// `[near + (k-1) s, near + k s]`; the endpoints stay at near and far.
pub fn stratified_samples<R: Rng + ?Sized>(ray: &Ray, n: usize, jitter: bool, rng: &mut R) -> Vec<f64> {
    let n = n.max(1);
    let span = ray.far - ray.near;
    let step = span / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    out.push(ray.near);
    for k in 1..n {
        let b = if jitter {
            ray.near + ((k - 1) as f64 + rng.gen::<f64>()) * step
        } else {
            ray.near + span * (k as f64 / n as f64)
        };
        out.push(b);
    }
    out.push(ray.far);
    out
}

/// Per-interval padding added to compositing weights before resampling.
pub const RESAMPLE_PADDING: f64 = 0.01;

/// Draws `n_fine + 1` boundaries from the piecewise-constant density
/// proportional to `weights + 0.01` over `boundaries`, merged with the first
/// and last old boundary, sorted and deduplicated.
///
/// With an rng the draws are stratified-random, otherwise deterministic
/// stratum midpoints.
pub fn importance_resample<R: Rng + ?Sized>(
    boundaries: &[f64],
    weights: &[f64],
    n_fine: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    assert_eq!(boundaries.len(), weights.len() + 1, "one weight per interval");
    let first = boundaries[0];
    let last = boundaries[boundaries.len() - 1];
    if n_fine == 0 {
        return vec![first, last];
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += w.max(0.0) + RESAMPLE_PADDING;
        cdf.push(acc);
    }
    for c in cdf.iter_mut() {
        *c /= acc;
    }
    let count = n_fine + 1;
    let mut rng = rng;
    let mut out = Vec::with_capacity(count + 2);
    out.push(first);
    let mut bin = 0;
    for k in 0..count {
        let offset = match rng.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let u = (k as f64 + offset) / count as f64;
        // u is increasing, so the bin search resumes where it left off.
        while bin + 1 < weights.len() && cdf[bin + 1] <= u {
            bin += 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let f = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
        out.push(boundaries[bin] + f * (boundaries[bin + 1] - boundaries[bin]));
    }
    out.push(last);
    sort_dedup(&mut out);
    out
}

/// Sorts ascending and removes exact duplicates.
pub fn sort_dedup(v: &mut Vec<f64>) {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
}

/// Union of two boundary sets, sorted and deduplicated.
pub fn merge_boundaries(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    sort_dedup(&mut out);
    out
}
