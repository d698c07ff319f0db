//! Photometric optimization of a probe field against posed images.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::grids::{resample_matrix_values, resample_vector_values, AdamState};
use crate::probe_field::{FieldConfig, FieldGrads, ProbeField, ProbeSelection, SelectionMode};
use crate::raster::Image;
use crate::real::Real;
use crate::renderer::{backward_ray, render_ray_with, RayWorkspace, RenderConfig, SamplePlan};

/// Core grid resolutions reached at a fraction of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpscaleMilestone {
    pub fraction: f64,
    pub core_vector_res: usize,
    pub core_matrix_res: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_milestones: Vec<f64>,
    pub upscale_milestones: Vec<UpscaleMilestone>,
    pub coarse_loss_weight: f64,
    /// Learning-rate multiplier for the decoder layers.
    pub decoder_lr_scale: f64,
    /// Draw a camera per ray instead of one camera per batch.
    pub mixed_batch: bool,
    /// Rays per gradient work unit; results do not depend on the thread count.
    pub chunk_rays: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub field: FieldConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_rays: 1024,
            lr_init: 1e-2,
            lr_final: 3.5e-4,
            lr_milestones: vec![0.5, 0.75, 0.9],
            upscale_milestones: vec![
                UpscaleMilestone { fraction: 0.3, core_vector_res: 32, core_matrix_res: [24, 48] },
                UpscaleMilestone { fraction: 0.6, core_vector_res: 64, core_matrix_res: [32, 64] },
            ],
            coarse_loss_weight: 0.1,
            decoder_lr_scale: 0.1,
            mixed_batch: false,
            chunk_rays: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-15,
            seed: 0,
            field: FieldConfig::desk(),
            render: RenderConfig::default(),
        }
    }
}

/// Names accepted by [`TrainConfig::apply_ablation`].
pub const ABLATIONS: [&str; 7] = [
    "full",
    "disable_core_vector",
    "disable_core_matrix",
    "point_neighborhood",
    "random_centers",
    "normalize_weights",
    "factor_concatenation",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations == 0 || self.batch_rays == 0 || self.chunk_rays == 0 {
            return bad("iterations, batch_rays and chunk_rays must be positive");
        }
        if !(self.decoder_lr_scale > 0.0 && self.decoder_lr_scale.is_finite()) {
            return bad("decoder_lr_scale must be positive");
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return bad("need 0 < lr_final <= lr_init");
        }
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&f| f > 0.0 && f < 1.0);
        if !ascending(&self.lr_milestones) {
            return bad("lr milestones must ascend inside (0, 1)");
        }
        let fr: Vec<f64> = self.upscale_milestones.iter().map(|m| m.fraction).collect();
        if !ascending(&fr) {
            return bad("upscale milestones must ascend inside (0, 1)");
        }
        self.field.validate()?;
        self.render.validate()
    }

    /// Switches one ablation on.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        let f = &mut self.field;
        match name {
            "full" => {}
            "disable_core_vector" => f.disable_core_vector = true,
            "disable_core_matrix" => f.disable_core_matrix = true,
            "point_neighborhood" => f.selection_mode = SelectionMode::Point,
            "random_centers" => f.distribution_mode = crate::probe_field::DistributionMode::Random,
            "normalize_weights" => f.normalize_weights = true,
            "factor_concatenation" => f.factor_concatenation = true,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation {name:?}; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Iteration at which a milestone fraction takes effect.
    pub fn milestone_iteration(&self, fraction: f64) -> usize {
        (fraction * self.iterations as f64).floor() as usize
    }
}

/// Learning rate at `iteration`: `lr_init` scaled by
/// `(lr_final / lr_init)^(k / K)` once `k` of `K` milestones are passed.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.lr_milestones.len();
    if total == 0 {
        return cfg.lr_init;
    }
    let passed = cfg.lr_milestones.iter().filter(|&&f| iteration >= cfg.milestone_iteration(f)).count();
    if passed == total {
        return cfg.lr_final;
    }
    cfg.lr_init * (cfg.lr_final / cfg.lr_init).powf(passed as f64 / total as f64)
}

/// Mean squared error over every channel.
pub fn photometric_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), got: pred.len() });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / pred.len() as f64)
}

/// A posed training image.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraModel,
    pub image: Image,
}

/// One training ray: a pixel center of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySpec {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub fine_mse: f64,
    pub coarse_mse: f64,
    pub total: f64,
}

/// Optimizer state that persists across steps.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub iteration: usize,
    /// One Adam state per named parameter tensor, in visiting order.
    pub adam: Vec<(String, AdamState<T>)>,
    pub rng: ChaCha8Rng,
    pub last_loss: Option<BatchLoss>,
}

impl<T: Real> TrainState<T> {
    pub fn new(field: &mut ProbeField<T>, cfg: &TrainConfig) -> Result<Self> {
        let mut adam = Vec::new();
        let mut err = None;
        field.visit_params_mut(&mut |name, _, v, _| match AdamState::new(v.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {
            Ok(s) => adam.push((name.to_string(), s)),
            Err(e) => err = Some(e),
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(Self { iteration: 0, adam, rng: ChaCha8Rng::seed_from_u64(cfg.seed), last_loss: None })
    }
}

/// Gradients and loss of one batch, accumulated into `chunk_grads` (one
/// buffer per chunk, reduced in chunk order by the caller). Each ray draws
/// its jitter from stream `ray index` of `ray_seed`. With `plans` given the
/// rays reuse those sample boundaries; the plans used are returned.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grads<T: Real>(
    field: &ProbeField<T>,
    views: &[TrainView],
    selections: &[ProbeSelection],
    rays: &[RaySpec],
    cfg: &TrainConfig,
    ray_seed: u64,
    plans: Option<&[SamplePlan]>,
    chunk_grads: &mut [FieldGrads<T>],
) -> Result<(BatchLoss, Vec<SamplePlan>)> {
    let chunk = cfg.chunk_rays;
    let n_chunks = rays.len().div_ceil(chunk);
    if chunk_grads.len() < n_chunks {
        return Err(Error::DimensionMismatch { expected: n_chunks, got: chunk_grads.len() });
    }
    let scale = T::of(2.0 / (3.0 * rays.len() as f64));
    let w_coarse = T::of(cfg.coarse_loss_weight);
    let results: Vec<Result<(f64, f64, Vec<SamplePlan>)>> = rays
        .par_chunks(chunk)
        .zip(chunk_grads.par_iter_mut())
        .enumerate()
        .map_init(RayWorkspace::default, |ws, (ci, (chunk_rays, grads))| {
            let (mut fine_sse, mut coarse_sse) = (0.0, 0.0);
            let mut used = Vec::with_capacity(chunk_rays.len());
            for (j, spec) in chunk_rays.iter().enumerate() {
                let index = ci * chunk + j;
                let view = &views[spec.view];
                let mut rng = ChaCha8Rng::seed_from_u64(ray_seed);
                rng.set_stream(index as u64);
                let ray = view.camera.pixel_ray(spec.x, spec.y);
                let plan = plans.map(|p| &p[index]);
                let (passes, plan) = render_ray_with(field, &selections[spec.view], &ray, &cfg.render, &mut rng, plan, ws)?;
                let target = view.image.pixel(spec.x, spec.y);
                let (mut d_fine, mut d_coarse) = ([T::zero(); 3], [T::zero(); 3]);
                for c in 0..3 {
                    let t = T::of(target[c] as f64);
                    let df = passes.fine.rgb[c] - t;
                    let dc = passes.coarse.rgb[c] - t;
                    fine_sse += (df * df).to_f64_lossless();
                    coarse_sse += (dc * dc).to_f64_lossless();
                    d_fine[c] = scale * df;
                    d_coarse[c] = w_coarse * scale * dc;
                }
                backward_ray(field, &cfg.render, ws, d_fine, d_coarse, grads);
                used.push(plan);
            }
            Ok((fine_sse, coarse_sse, used))
        })
        .collect();
    let (mut fine_sse, mut coarse_sse) = (0.0, 0.0);
    let mut used = Vec::with_capacity(rays.len());
    for r in results {
        let (f, c, p) = r?;
        fine_sse += f;
        coarse_sse += c;
        used.extend(p);
    }
    let denom = 3.0 * rays.len() as f64;
    let (fine_mse, coarse_mse) = (fine_sse / denom, coarse_sse / denom);
    Ok((BatchLoss { fine_mse, coarse_mse, total: fine_mse + cfg.coarse_loss_weight * coarse_mse }, used))
}

/// A probe field, its training views and optimizer state.
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub field: ProbeField<T>,
    pub state: TrainState<T>,
    pub views: Vec<TrainView>,
    selections: Vec<ProbeSelection>,
    chunk_grads: Vec<FieldGrads<T>>,
}

impl<T: Real> Trainer<T> {
    /// Places probes from the view positions and starts from iteration 0.
    pub fn new(config: TrainConfig, views: Vec<TrainView>) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidArgument("no training views".into()));
        }
        let positions: Vec<Vec3> = views.iter().map(|v| v.camera.position()).collect();
        let mut field = ProbeField::initialize(config.field.clone(), &positions)?;
        let expected = config.field.expected_parameter_count();
        if field.parameter_count() != expected {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} differs from closed form {expected}",
                field.parameter_count()
            )));
        }
        let state = TrainState::new(&mut field, &config)?;
        Self::resume(config, field, state, views)
    }

    /// Continues from an existing field and optimizer state.
    pub fn resume(config: TrainConfig, field: ProbeField<T>, state: TrainState<T>, views: Vec<TrainView>) -> Result<Self> {
        config.validate()?;
        let selections = views.iter().map(|v| field.select_probes(&v.camera.position())).collect();
        let mut t = Self { config, field, state, views, selections, chunk_grads: Vec::new() };
        t.reset_chunk_grads();
        Ok(t)
    }

    fn reset_chunk_grads(&mut self) {
        let n = self.config.batch_rays.div_ceil(self.config.chunk_rays);
        self.chunk_grads = (0..n).map(|_| self.field.zero_grads()).collect();
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    /// Resizes core grids and their Adam moments at milestones that fall on
    /// the current iteration.
    pub fn apply_upscales(&mut self) -> Result<bool> {
        let it = self.state.iteration;
        let due: Vec<UpscaleMilestone> = self
            .config
            .upscale_milestones
            .iter()
            .filter(|m| self.config.milestone_iteration(m.fraction) == it)
            .cloned()
            .collect();
        for m in &due {
            upscale_cores(&mut self.field, &mut self.state, m.core_vector_res, m.core_matrix_res)?;
        }
        if !due.is_empty() {
            self.reset_chunk_grads();
        }
        Ok(!due.is_empty())
    }

    /// Draws the rays of the next batch and the seed for their jitter.
    fn draw_batch(&mut self) -> (Vec<RaySpec>, u64) {
        let rng = &mut self.state.rng;
        let n_views = self.views.len();
        let shared = rng.gen_range(0..n_views);
        let mut rays = Vec::with_capacity(self.config.batch_rays);
        for _ in 0..self.config.batch_rays {
            let view = if self.config.mixed_batch { rng.gen_range(0..n_views) } else { shared };
            let cam = &self.views[view].camera;
            rays.push(RaySpec { view, x: rng.gen_range(0..cam.width), y: rng.gen_range(0..cam.height) });
        }
        (rays, rng.next_u64())
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self) -> Result<BatchLoss> {
        if self.is_done() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        self.apply_upscales()?;
        let it = self.state.iteration;
        let (rays, seed) = self.draw_batch();
        let (loss, _) = batch_loss_and_grads(&self.field, &self.views, &self.selections, &rays, &self.config, seed, None, &mut self.chunk_grads)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {it}")));
        }
        for g in &self.chunk_grads {
            self.field.absorb_grads(g);
        }
        for g in self.chunk_grads.iter_mut() {
            g.clear();
        }
        let lr = lr_at(it, &self.config);
        let decoder_lr = lr * self.config.decoder_lr_scale;
        let adam = &mut self.state.adam;
        let mut k = 0;
        let mut err = None;
        self.field.visit_params_mut(&mut |name, _, v, g| {
            let (n, state) = &mut adam[k];
            debug_assert_eq!(n, name);
            if err.is_none() {
                let lr = if name.starts_with("decoder.") { decoder_lr } else { lr };
                if let Err(e) = state.step(v, g, lr) {
                    err = Some(Error::NonFinite(format!("{name} at iteration {it}: {e}")));
                }
            }
            g.fill(T::zero());
            k += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.state.iteration += 1;
        self.state.last_loss = Some(loss);
        Ok(loss)
    }

    /// Runs to completion, calling `on_step(iteration, loss, lr)` after each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, usize, BatchLoss, f64) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let it = self.state.iteration;
            let loss = self.step()?;
            on_step(self, it, loss, lr_at(it, &self.config))?;
        }
        Ok(())
    }

    pub fn selection(&self, view: usize) -> &ProbeSelection {
        &self.selections[view]
    }
}

/// Resamples every core grid and the matching Adam moments.
pub fn upscale_cores<T: Real>(field: &mut ProbeField<T>, state: &mut TrainState<T>, vector_res: usize, matrix_res: [usize; 2]) -> Result<()> {
    let adam = &mut state.adam;
    let mut result = Ok(());
    let mut k = 0;
    field.visit_params_mut(&mut |name, shape, v, g| {
        if result.is_err() {
            return;
        }
        let res: Result<()> = (|| {
            let resample = |x: &[T]| -> Result<Vec<T>> {
                if name.starts_with("core_vector.") {
                    resample_vector_values(x, shape[0], shape[1], vector_res)
                } else {
                    resample_matrix_values(x, shape[0], shape[1], shape[2], true, matrix_res[0], matrix_res[1])
                }
            };
            if name.starts_with("core_vector.") || name.starts_with("core_matrix.") {
                *v = resample(v)?;
                *g = vec![T::zero(); v.len()];
                let s = &mut adam[k].1;
                s.m = resample(&s.m)?;
                s.v = resample(&s.v)?;
            }
            Ok(())
        })();
        result = res;
        k += 1;
    });
    result?;
    for g in &mut field.probes.core_vectors {
        g.resolution = vector_res;
    }
    for g in &mut field.probes.core_matrices {
        g.height = matrix_res[0];
        g.width = matrix_res[1];
    }
    field.config.core_vector_res = vector_res;
    field.config.core_matrix_res = matrix_res;
    Ok(())
}

#[cfg(test)]
mod tests;
