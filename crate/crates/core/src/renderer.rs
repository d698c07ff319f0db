//! Volume compositing along rays with a coarse-to-fine sampling schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{importance_resample, merge_boundaries, stratified_samples, CameraModel, Ray, Vec3};
use crate::probe_field::{FieldGrads, FieldWorkspace, ProbeField, ProbeSelection};
use crate::raster::Image;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub white_background: bool,
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_coarse: 48, n_fine: 32, white_background: true, jitter: true }
    }
}

impl RenderConfig {
    /// Sample counts used at GPU scale.
    pub fn full_scale() -> Self {
        Self { n_coarse: 256, n_fine: 96, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(Error::InvalidArgument("n_coarse must be at least 1".into()));
        }
        Ok(())
    }

    pub fn background<T: Real>(&self) -> [T; 3] {
        if self.white_background {
            [T::one(); 3]
        } else {
            [T::zero(); 3]
        }
    }
}

/// Samples along one ray and their compositing state.
#[derive(Debug, Clone, Default)]
pub struct RaySampleSet<T> {
    /// N + 1 ascending interval boundaries.
    pub t_vals: Vec<f64>,
    pub points: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub sigma: Vec<T>,
    /// N x 3, interleaved.
    pub rgb: Vec<T>,
    pub alpha: Vec<T>,
    /// N + 1 transmittances, `trans[0] = 1`.
    pub trans: Vec<T>,
    pub weights: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayResult<T> {
    pub rgb: [T; 3],
    pub opacity: T,
    pub depth: T,
    pub weights: Vec<T>,
}

impl<T: Real> RaySampleSet<T> {
    /// Sets boundaries and derives midpoints and interval lengths.
    pub fn set_boundaries(&mut self, ray: &Ray, t_vals: Vec<f64>) {
        let n = t_vals.len() - 1;
        self.points.clear();
        self.deltas.clear();
        for k in 0..n {
            let (a, b) = (t_vals[k], t_vals[k + 1]);
            debug_assert!(b > a, "boundaries must ascend");
            self.points.push(ray.at(0.5 * (a + b)));
            self.deltas.push(b - a);
        }
        self.t_vals = t_vals;
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Alpha compositing of the populated densities and radiances.
    pub fn composite(&mut self, background: Option<[T; 3]>) -> Result<RayResult<T>> {
        let n = self.len();
        if self.sigma.len() != n || self.rgb.len() != 3 * n {
            return Err(Error::DimensionMismatch { expected: n, got: self.sigma.len() });
        }
        self.alpha.resize(n, T::zero());
        self.trans.resize(n + 1, T::zero());
        self.weights.resize(n, T::zero());
        self.trans[0] = T::one();
        let mut rgb = [T::zero(); 3];
        let (mut opacity, mut depth) = (T::zero(), T::zero());
        for i in 0..n {
            let s = self.sigma[i];
            if !(s >= T::zero()) {
                return Err(Error::NegativeDensity(s.to_f64_lossless()));
            }
            let decay = (-s * T::of(self.deltas[i])).exp();
            let a = T::one() - decay;
            let w = self.trans[i] * a;
            self.alpha[i] = a;
            self.trans[i + 1] = self.trans[i] * decay;
            self.weights[i] = w;
            for c in 0..3 {
                rgb[c] += w * self.rgb[3 * i + c];
            }
            opacity += w;
            depth += w * T::of(0.5 * (self.t_vals[i] + self.t_vals[i + 1]));
        }
        if let Some(bg) = background {
            for c in 0..3 {
                rgb[c] += self.trans[n] * bg[c];
            }
        }
        let depth = depth / opacity.max(T::of(1e-8));
        Ok(RayResult { rgb, opacity, depth, weights: self.weights.clone() })
    }

    /// Adjoint of [`composite`](Self::composite) for a cotangent on the pixel
    /// color. Writes per-sample density and radiance cotangents.
    pub fn composite_backward(&self, d_rgb: [T; 3], background: Option<[T; 3]>, d_sigma: &mut Vec<T>, d_c: &mut Vec<T>) {
        let n = self.len();
        d_sigma.resize(n, T::zero());
        d_c.resize(3 * n, T::zero());
        // Suffix sum S_k = sum_{i>k} w_i c_i + T_{N+1} bg, projected on d_rgb.
        let mut suffix = match background {
            Some(bg) => self.trans[n] * (d_rgb[0] * bg[0] + d_rgb[1] * bg[1] + d_rgb[2] * bg[2]),
            None => T::zero(),
        };
        for k in (0..n).rev() {
            let c = &self.rgb[3 * k..3 * k + 3];
            let gc = d_rgb[0] * c[0] + d_rgb[1] * c[1] + d_rgb[2] * c[2];
            d_sigma[k] = T::of(self.deltas[k]) * (self.trans[k + 1] * gc - suffix);
            let w = self.weights[k];
            for ch in 0..3 {
                d_c[3 * k + ch] = w * d_rgb[ch];
            }
            suffix += w * gc;
        }
    }
}

/// Boundaries used by both passes of one ray, reusable to replay a render
/// with identical samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplePlan {
    pub coarse: Vec<f64>,
    pub fine: Option<Vec<f64>>,
}

/// Per-worker buffers for rendering and differentiating rays.
#[derive(Debug, Clone, Default)]
pub struct RayWorkspace<T> {
    pub coarse: RaySampleSet<T>,
    pub fine: RaySampleSet<T>,
    coarse_field: FieldWorkspace<T>,
    fine_field: FieldWorkspace<T>,
    has_fine: bool,
    d_sigma: Vec<T>,
    d_c: Vec<T>,
}

/// Both composites of a rendered ray. `fine` equals `coarse` when the
/// schedule has no fine pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPasses<T> {
    pub fine: RayResult<T>,
    pub coarse: RayResult<T>,
}

/// Runs the coarse-to-fine schedule along `ray`. `eval` fills `sigma` and
/// `rgb` of a sample set whose boundaries are set (its flag is true for the
/// fine pass). With `plan` given its boundaries are reused instead of being
/// drawn; the plan actually used is returned either way.
#[allow(clippy::too_many_arguments)]
pub fn march_ray<T: Real, R: Rng + ?Sized>(
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut R,
    plan: Option<&SamplePlan>,
    coarse_set: &mut RaySampleSet<T>,
    fine_set: &mut RaySampleSet<T>,
    mut eval: impl FnMut(bool, &mut RaySampleSet<T>) -> Result<()>,
) -> Result<(RayPasses<T>, SamplePlan)> {
    let bg = cfg.white_background.then(|| cfg.background());
    let coarse_t = match plan {
        Some(p) => p.coarse.clone(),
        None => stratified_samples(ray, cfg.n_coarse, cfg.jitter, rng),
    };
    coarse_set.set_boundaries(ray, coarse_t.clone());
    eval(false, coarse_set)?;
    let coarse = coarse_set.composite(bg)?;
    let fine_t = match plan {
        Some(p) => p.fine.clone(),
        None if cfg.n_fine > 0 => {
            let weights: Vec<f64> = coarse.weights.iter().map(|w| w.to_f64_lossless()).collect();
            let drawn = if cfg.jitter {
                importance_resample(&coarse_t, &weights, cfg.n_fine, Some(rng))
            } else {
                importance_resample::<ChaCha8Rng>(&coarse_t, &weights, cfg.n_fine, None)
            };
            Some(merge_boundaries(&coarse_t, &drawn))
        }
        None => None,
    };
    let fine = match &fine_t {
        Some(t) => {
            fine_set.set_boundaries(ray, t.clone());
            eval(true, fine_set)?;
            fine_set.composite(bg)?
        }
        None => coarse.clone(),
    };
    Ok((RayPasses { fine, coarse }, SamplePlan { coarse: coarse_t, fine: fine_t }))
}

/// Renders one ray through the probe field, keeping what the adjoint needs
/// in `ws`.
pub fn render_ray_with<T: Real, R: Rng + ?Sized>(
    field: &ProbeField<T>,
    sel: &ProbeSelection,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut R,
    plan: Option<&SamplePlan>,
    ws: &mut RayWorkspace<T>,
) -> Result<(RayPasses<T>, SamplePlan)> {
    let RayWorkspace { coarse, fine, coarse_field, fine_field, .. } = ws;
    let out = march_ray(ray, cfg, rng, plan, coarse, fine, |is_fine, set| {
        let fws = if is_fine { &mut *fine_field } else { &mut *coarse_field };
        field.eval_points(sel, &set.points, &ray.dir, fws)?;
        set.sigma.clear();
        set.sigma.extend_from_slice(fws.sigma());
        set.rgb.clear();
        set.rgb.extend_from_slice(fws.rgb());
        Ok(())
    })?;
    ws.has_fine = out.1.fine.is_some();
    Ok(out)
}

/// Renders one ray and returns the final composite.
pub fn render_ray<T: Real, R: Rng + ?Sized>(
    field: &ProbeField<T>,
    sel: &ProbeSelection,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<RayResult<T>> {
    let mut ws = RayWorkspace::default();
    Ok(render_ray_with(field, sel, ray, cfg, rng, None, &mut ws)?.0.fine)
}

/// Adjoint of the last [`render_ray_with`] call in `ws`, for cotangents on
/// the fine and coarse pixel colors. Sample positions are constants.
pub fn backward_ray<T: Real>(
    field: &ProbeField<T>,
    cfg: &RenderConfig,
    ws: &mut RayWorkspace<T>,
    d_fine: [T; 3],
    d_coarse: [T; 3],
    grads: &mut FieldGrads<T>,
) {
    let bg = cfg.white_background.then(|| cfg.background());
    let mut d_coarse = d_coarse;
    if ws.has_fine {
        ws.fine.composite_backward(d_fine, bg, &mut ws.d_sigma, &mut ws.d_c);
        field.backward_points(&mut ws.fine_field, &ws.d_sigma, &ws.d_c, grads);
    } else {
        for c in 0..3 {
            d_coarse[c] += d_fine[c];
        }
    }
    ws.coarse.composite_backward(d_coarse, bg, &mut ws.d_sigma, &mut ws.d_c);
    field.backward_points(&mut ws.coarse_field, &ws.d_sigma, &ws.d_c, grads);
}

/// Renders every pixel center of `cam` with jitter off. One probe selection
/// serves the whole image.
pub fn render_image<T: Real>(field: &ProbeField<T>, cam: &CameraModel, cfg: &RenderConfig) -> Result<Image> {
    let sel = field.select_probes(&cam.position());
    let cfg = RenderConfig { jitter: false, ..cfg.clone() };
    let mut img = Image::new(cam.width, cam.height);
    img.data
        .par_chunks_mut(cam.width * 3)
        .enumerate()
        .try_for_each_init(RayWorkspace::default, |ws, (y, row)| -> Result<()> {
            // Never drawn from with jitter off.
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            for x in 0..cam.width {
                let ray = cam.pixel_ray(x, y);
                let (passes, _) = render_ray_with(field, &sel, &ray, &cfg, &mut rng, None, ws)?;
                for c in 0..3 {
                    row[3 * x + c] = passes.fine.rgb[c].to_f64_lossless() as f32;
                }
            }
            Ok(())
        })?;
    Ok(img)
}

#[cfg(test)]
mod tests;
