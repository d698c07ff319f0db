//! The probe scene representation: placement, camera-neighborhood
//! selection, per-point factor queries, permutation-invariant aggregation
//! and decoding to density and radiance.
//!
//! Each probe tensor is factorized as a Hadamard product of a shared core
//! vector (radial), a shared core matrix (angular) and a per-probe basis
//! matrix. Basis matrices store `F` channels; their blended sample is
//! expanded to `R` channels by a trainable linear map before the product.

mod decoder;
mod distribute;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{direction_encoding_len, encode_direction, Decoder, DecoderGrads, DecoderTape};
pub use distribute::{distribute_basis, distribute_cores, farthest_point_sampling, kmeans, random_positions, unique_positions};

use crate::error::{Error, Result};
use crate::geometry::{periodic_warp, probe_project, ProbeCoord, Vec3};
use crate::grids::{add_into, DenseGrad, DenseLayer, MatrixGrid, Stencil1, Stencil2, VectorGrid};
use crate::real::{sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Probes nearest the rendering camera, shared by every sample of the view.
    #[default]
    Camera,
    /// Probes nearest each sample point.
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    #[default]
    Fps,
    Random,
}

/// Hyperparameters of the probe representation and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// L: number of basis probes.
    pub num_basis: usize,
    /// C: number of shared core factors.
    pub num_cores: usize,
    /// L-hat: basis probes used per view.
    pub basis_neighbors: usize,
    /// C-hat: core factors used per view.
    pub core_neighbors: usize,
    /// R: factor components.
    pub components: usize,
    /// F: stored basis channels.
    pub basis_components: usize,
    pub core_vector_res: usize,
    /// (H, W) of core matrices.
    pub core_matrix_res: [usize; 2],
    /// (H, W) of basis matrices.
    pub basis_matrix_res: [usize; 2],
    pub nu_core: [f64; 2],
    pub nu_basis: [f64; 2],
    pub normalize_weights: bool,
    pub disable_core_vector: bool,
    pub disable_core_matrix: bool,
    pub factor_concatenation: bool,
    pub selection_mode: SelectionMode,
    pub distribution_mode: DistributionMode,
    pub decoder_width: usize,
    pub geo_features: usize,
    pub direction_octaves: usize,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FieldConfig {
    /// Small CPU-scale model.
    pub fn desk() -> Self {
        Self {
            num_basis: 8,
            num_cores: 2,
            basis_neighbors: 4,
            core_neighbors: 1,
            components: 16,
            basis_components: 2,
            core_vector_res: 16,
            core_matrix_res: [16, 32],
            basis_matrix_res: [64, 128],
            nu_core: [4.0, 4.0],
            nu_basis: [4.0, 4.0],
            normalize_weights: false,
            disable_core_vector: false,
            disable_core_matrix: false,
            factor_concatenation: false,
            selection_mode: SelectionMode::Camera,
            distribution_mode: DistributionMode::Fps,
            decoder_width: 64,
            geo_features: 15,
            direction_octaves: 2,
            seed: 0,
        }
    }

    /// Published full-scale settings for small scenes.
    pub fn full_scale() -> Self {
        Self {
            num_basis: 64,
            num_cores: 3,
            basis_neighbors: 16,
            core_neighbors: 3,
            components: 32,
            basis_components: 2,
            core_vector_res: 64,
            core_matrix_res: [64, 128],
            basis_matrix_res: [256, 512],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.num_basis >= self.basis_neighbors && self.basis_neighbors >= 1) {
            return bad(format!("need L >= L-hat >= 1, got {} / {}", self.num_basis, self.basis_neighbors));
        }
        if !(self.num_cores >= self.core_neighbors && self.core_neighbors >= 1) {
            return bad(format!("need C >= C-hat >= 1, got {} / {}", self.num_cores, self.core_neighbors));
        }
        if !(self.components >= self.basis_components && self.basis_components >= 1) {
            return bad(format!("need R >= F >= 1, got {} / {}", self.components, self.basis_components));
        }
        if self.core_vector_res < 2 || self.core_matrix_res.iter().chain(&self.basis_matrix_res).any(|&r| r < 2) {
            return bad("grid resolutions must be at least 2".into());
        }
        if self.nu_core.iter().chain(&self.nu_basis).any(|&v| !(v > 0.0)) {
            return bad("warp frequencies must be positive".into());
        }
        if self.decoder_width == 0 {
            return bad("decoder width must be positive".into());
        }
        Ok(())
    }

    /// Closed-form trainable parameter count for the initial resolutions.
    pub fn expected_parameter_count(&self) -> usize {
        self.parameter_count_at(self.core_vector_res, self.core_matrix_res)
    }

    pub fn parameter_count_at(&self, core_vector_res: usize, core_matrix_res: [usize; 2]) -> usize {
        let (r, f) = (self.components, self.basis_components);
        let [hc, wc] = core_matrix_res;
        let [hb, wb] = self.basis_matrix_res;
        let grids = self.num_cores * (core_vector_res * r + hc * wc * r) + self.num_basis * hb * wb * f;
        let heads = (r + 1) + (r + 1) + (f + 1);
        let expand = f * r + r;
        let concat = if self.factor_concatenation { self.basis_neighbors * f * r + r } else { 0 };
        let w = self.decoder_width;
        let geo = self.geo_features;
        let cin = geo + direction_encoding_len(self.direction_octaves);
        let trunk = (r * w + w) + (w * w + w) + (w * (1 + geo) + 1 + geo);
        let color = (cin * w + w) + (w * 3 + 3);
        grids + heads + expand + concat + trunk + color
    }
}

/// Positions plus every factor of the probe representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet<T> {
    pub basis_positions: Vec<[f32; 3]>,
    pub core_positions: Vec<[f32; 3]>,
    pub core_vectors: Vec<VectorGrid<T>>,
    pub core_matrices: Vec<MatrixGrid<T>>,
    pub basis_matrices: Vec<MatrixGrid<T>>,
    /// F -> R expansion of the blended basis sample.
    pub expand_basis: DenseLayer<T>,
    /// L-hat * F -> R projection used by the concatenation ablation.
    pub concat_basis: Option<DenseLayer<T>>,
    /// Gate heads for the core-vector, core-matrix and basis groups.
    pub weight_heads: [DenseLayer<T>; 3],
}

/// Canonically ordered probe indices for one view (or one point).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSelection {
    pub basis_indices: Vec<usize>,
    pub core_indices: Vec<usize>,
    pub source: Vec3,
}

#[derive(Debug, Clone, Default)]
pub struct CoreSample<T> {
    pub index: usize,
    pub coord: ProbeCoord,
    pub vector_stencil: Stencil1<T>,
    pub matrix_stencil: Stencil2<T>,
    /// R values, empty when the core vector is disabled.
    pub vector: Vec<T>,
    /// R values, empty when the core matrix is disabled.
    pub matrix: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct BasisSample<T> {
    pub index: usize,
    pub stencil: Stencil2<T>,
    /// F values.
    pub matrix: Vec<T>,
}

/// Factor samples of the selected probes at one point.
#[derive(Debug, Clone, Default)]
pub struct FactorSamples<T> {
    pub cores: Vec<CoreSample<T>>,
    pub basis: Vec<BasisSample<T>>,
}

impl<T> FactorSamples<T> {
    fn is_canonical(&self) -> bool {
        self.cores.windows(2).all(|w| w[0].index < w[1].index) && self.basis.windows(2).all(|w| w[0].index < w[1].index)
    }
}

/// Aggregated feature `g` of a point plus what the adjoint needs.
#[derive(Debug, Clone, Default)]
pub struct PointFeature<T> {
    pub g: Vec<T>,
    pub core_vector_agg: Vec<T>,
    pub core_matrix_agg: Vec<T>,
    pub basis_agg: Vec<T>,
    pub expanded: Vec<T>,
    pub core_vector_weights: Vec<T>,
    pub core_matrix_weights: Vec<T>,
    pub basis_weights: Vec<T>,
    scratch: Vec<T>,
    scratch_agg: Vec<T>,
}

/// Gradient buffers shaped like a [`ProbeField`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads<T> {
    pub core_vectors: Vec<Vec<T>>,
    pub core_matrices: Vec<Vec<T>>,
    pub basis_matrices: Vec<Vec<T>>,
    pub expand_basis: DenseGrad<T>,
    pub concat_basis: Option<DenseGrad<T>>,
    pub weight_heads: [DenseGrad<T>; 3],
    pub decoder: DecoderGrads<T>,
}

/// The full trainable model: probes plus decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeField<T> {
    pub config: FieldConfig,
    pub probes: ProbeSet<T>,
    pub decoder: Decoder<T>,
}

fn to_f32(p: &Vec3) -> [f32; 3] {
    [p.x as f32, p.y as f32, p.z as f32]
}

#[inline]
pub fn position_of(p: &[f32; 3]) -> Vec3 {
    Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

/// Indices of the `k` positions nearest `target`, ties to the lower index,
/// returned in ascending index order.
pub fn nearest_indices(positions: &[[f32; 3]], target: &Vec3, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    nearest_indices_into(positions, target, k, &mut out);
    out
}

fn nearest_indices_into(positions: &[[f32; 3]], target: &Vec3, k: usize, out: &mut Vec<usize>) {
    let mut order: Vec<(f64, usize)> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| ((position_of(p) - target).norm_squared(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    out.clear();
    out.extend(order.iter().take(k).map(|&(_, i)| i));
    out.sort_unstable();
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Sigmoid-gated blend `sum_i w_i f_i` (divided by `sum_i w_i` when normalizing).
fn gate_forward<'a, T: Real>(
    head: &DenseLayer<T>,
    feats: impl Iterator<Item = &'a [T]>,
    normalize: bool,
    agg: &mut [T],
    weights: &mut Vec<T>,
) {
    agg.fill(T::zero());
    weights.clear();
    for f in feats {
        let w = sigmoid(head.bias[0] + dot(&head.weight, f));
        weights.push(w);
        for (a, &v) in agg.iter_mut().zip(f) {
            *a += w * v;
        }
    }
    if normalize {
        let s: T = weights.iter().copied().sum();
        for a in agg.iter_mut() {
            *a /= s;
        }
    }
}

/// Cotangent of one gated feature `f_i` given the aggregate cotangent.
/// Writes it into `df` and accumulates the head gradient.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gate_backward_one<T: Real>(
    head: &DenseLayer<T>,
    head_grad: &mut DenseGrad<T>,
    f: &[T],
    w: T,
    weight_sum: T,
    agg: &[T],
    d_agg: &[T],
    normalize: bool,
    df: &mut [T],
) {
    let (coef, dw) = if normalize {
        let mut acc = T::zero();
        for ((&g, &fi), &a) in d_agg.iter().zip(f).zip(agg) {
            acc += g * (fi - a);
        }
        (w / weight_sum, acc / weight_sum)
    } else {
        (w, dot(d_agg, f))
    };
    let dz = dw * w * (T::one() - w);
    head_grad.bias[0] += dz;
    for ((gw, &fi), (d, (&g, &hw))) in head_grad
        .weight
        .iter_mut()
        .zip(f)
        .zip(df.iter_mut().zip(d_agg.iter().zip(&head.weight)))
    {
        *gw += dz * fi;
        *d = coef * g + dz * hw;
    }
}

impl<T: Real> ProbeField<T> {
    /// Places probes from the training camera centers and initializes every
    /// factor from `config.seed`.
    pub fn initialize(config: FieldConfig, camera_positions: &[Vec3]) -> Result<Self> {
        config.validate()?;
        let basis = match config.distribution_mode {
            DistributionMode::Fps => distribute_basis(camera_positions, config.num_basis)?,
            DistributionMode::Random => random_positions(camera_positions, config.num_basis, config.seed)?,
        };
        let cores = distribute_cores(camera_positions, config.num_cores)?;
        Self::with_positions(config, &basis, &cores)
    }

    pub fn with_positions(config: FieldConfig, basis: &[Vec3], cores: &[Vec3]) -> Result<Self> {
        config.validate()?;
        if basis.len() != config.num_basis || cores.len() != config.num_cores {
            return Err(Error::InvalidArgument(format!(
                "expected {} basis and {} core positions, got {} and {}",
                config.num_basis,
                config.num_cores,
                basis.len(),
                cores.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (r, f) = (config.components, config.basis_components);
        let [hc, wc] = config.core_matrix_res;
        let [hb, wb] = config.basis_matrix_res;
        let core_vectors = (0..config.num_cores)
            .map(|_| VectorGrid::random(config.core_vector_res, r, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let core_matrices = (0..config.num_cores)
            .map(|_| MatrixGrid::random(hc, wc, r, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let basis_matrices = (0..config.num_basis)
            .map(|_| MatrixGrid::random(hb, wb, f, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let weight_heads = [
            DenseLayer::random(r, 1, &mut rng),
            DenseLayer::random(r, 1, &mut rng),
            DenseLayer::random(f, 1, &mut rng),
        ];
        let expand_basis = DenseLayer::random(f, r, &mut rng);
        let concat_basis = config
            .factor_concatenation
            .then(|| DenseLayer::random(config.basis_neighbors * f, r, &mut rng));
        let decoder = Decoder::random(r, config.decoder_width, config.geo_features, config.direction_octaves, &mut rng)?;
        let probes = ProbeSet {
            basis_positions: basis.iter().map(to_f32).collect(),
            core_positions: cores.iter().map(to_f32).collect(),
            core_vectors,
            core_matrices,
            basis_matrices,
            expand_basis,
            concat_basis,
            weight_heads,
        };
        let field = Self { config, probes, decoder };
        debug_assert_eq!(field.parameter_count(), field.config.expected_parameter_count());
        Ok(field)
    }

    pub fn components(&self) -> usize {
        self.config.components
    }

    /// Nearest `L-hat` basis probes and `C-hat` cores to a camera position.
    pub fn select_probes(&self, camera_position: &Vec3) -> ProbeSelection {
        ProbeSelection {
            basis_indices: nearest_indices(&self.probes.basis_positions, camera_position, self.config.basis_neighbors),
            core_indices: nearest_indices(&self.probes.core_positions, camera_position, self.config.core_neighbors),
            source: *camera_position,
        }
    }

    /// Queries every selected probe at `x`.
    pub fn query_factors(&self, sel: &ProbeSelection, x: &Vec3) -> Result<FactorSamples<T>> {
        let mut out = FactorSamples::default();
        self.query_factors_into(&sel.core_indices, &sel.basis_indices, x, &mut out)?;
        Ok(out)
    }

    pub fn query_factors_into(&self, cores: &[usize], basis: &[usize], x: &Vec3, out: &mut FactorSamples<T>) -> Result<()> {
        let cfg = &self.config;
        let p = &self.probes;
        out.cores.resize_with(cores.len(), Default::default);
        for (s, &c) in out.cores.iter_mut().zip(cores) {
            let coord = probe_project(x, &position_of(&p.core_positions[c]))?;
            s.index = c;
            s.coord = coord;
            if cfg.disable_core_vector {
                s.vector.clear();
            } else {
                let grid = &p.core_vectors[c];
                s.vector_stencil = grid.stencil(coord.t);
                s.vector.resize(grid.channels, T::zero());
                grid.eval_stencil(s.vector_stencil, &mut s.vector);
            }
            if cfg.disable_core_matrix {
                s.matrix.clear();
            } else {
                let grid = &p.core_matrices[c];
                let (ut, up) = periodic_warp(&coord, cfg.nu_core);
                s.matrix_stencil = grid.stencil(ut, up);
                s.matrix.resize(grid.channels, T::zero());
                grid.eval_stencil(&s.matrix_stencil, &mut s.matrix);
            }
        }
        out.basis.resize_with(basis.len(), Default::default);
        for (s, &l) in out.basis.iter_mut().zip(basis) {
            let coord = probe_project(x, &position_of(&p.basis_positions[l]))?;
            let grid = &p.basis_matrices[l];
            let (ut, up) = periodic_warp(&coord, cfg.nu_basis);
            s.index = l;
            s.stencil = grid.stencil(ut, up);
            s.matrix.resize(grid.channels, T::zero());
            grid.eval_stencil(&s.stencil, &mut s.matrix);
        }
        Ok(())
    }

    /// Blends factor samples into `g`. Inputs are re-sorted by probe index
    /// first, so the result does not depend on their order.
    pub fn aggregate(&self, samples: &FactorSamples<T>) -> PointFeature<T> {
        let mut out = PointFeature::default();
        if samples.is_canonical() {
            self.aggregate_into(samples, &mut out);
        } else {
            let mut sorted = samples.clone();
            sorted.cores.sort_by_key(|s| s.index);
            sorted.basis.sort_by_key(|s| s.index);
            self.aggregate_into(&sorted, &mut out);
        }
        out
    }

    /// Aggregation for samples already in canonical (ascending index) order.
    pub fn aggregate_into(&self, samples: &FactorSamples<T>, out: &mut PointFeature<T>) {
        debug_assert!(samples.is_canonical());
        let cfg = &self.config;
        let p = &self.probes;
        let r = cfg.components;
        out.core_vector_agg.resize(r, T::zero());
        out.core_matrix_agg.resize(r, T::zero());
        if cfg.disable_core_vector {
            out.core_vector_agg.fill(T::one());
            out.core_vector_weights.clear();
        } else {
            gate_forward(
                &p.weight_heads[0],
                samples.cores.iter().map(|s| s.vector.as_slice()),
                cfg.normalize_weights,
                &mut out.core_vector_agg,
                &mut out.core_vector_weights,
            );
        }
        if cfg.disable_core_matrix {
            out.core_matrix_agg.fill(T::one());
            out.core_matrix_weights.clear();
        } else {
            gate_forward(
                &p.weight_heads[1],
                samples.cores.iter().map(|s| s.matrix.as_slice()),
                cfg.normalize_weights,
                &mut out.core_matrix_agg,
                &mut out.core_matrix_weights,
            );
        }
        out.expanded.resize(r, T::zero());
        match &p.concat_basis {
            Some(layer) => {
                out.basis_agg.clear();
                for s in &samples.basis {
                    out.basis_agg.extend_from_slice(&s.matrix);
                }
                out.basis_weights.clear();
                layer.forward_into(&out.basis_agg, &mut out.expanded);
            }
            None => {
                out.basis_agg.resize(cfg.basis_components, T::zero());
                gate_forward(
                    &p.weight_heads[2],
                    samples.basis.iter().map(|s| s.matrix.as_slice()),
                    cfg.normalize_weights,
                    &mut out.basis_agg,
                    &mut out.basis_weights,
                );
                p.expand_basis.forward_into(&out.basis_agg, &mut out.expanded);
            }
        }
        out.g.resize(r, T::zero());
        for k in 0..r {
            out.g[k] = out.core_vector_agg[k] * out.core_matrix_agg[k] * out.expanded[k];
        }
        debug_assert!(out.g.iter().all(|v| v.is_finite()), "non-finite point feature");
    }

    /// Adjoint of [`aggregate_into`](Self::aggregate_into) and of the grid
    /// queries behind `samples`, accumulating into `grads`.
    pub fn aggregate_backward(&self, samples: &FactorSamples<T>, feat: &mut PointFeature<T>, dg: &[T], grads: &mut FieldGrads<T>) {
        let cfg = &self.config;
        let p = &self.probes;
        let r = cfg.components;
        let normalize = cfg.normalize_weights;
        let PointFeature {
            core_vector_agg: v,
            core_matrix_agg: m,
            expanded: e,
            basis_agg,
            core_vector_weights,
            core_matrix_weights,
            basis_weights,
            scratch,
            scratch_agg: d_agg,
            ..
        } = feat;
        scratch.resize(r.max(2 * basis_agg.len()), T::zero());

        if !cfg.disable_core_vector {
            d_agg.clear();
            d_agg.extend((0..r).map(|k| dg[k] * m[k] * e[k]));
            let wsum: T = core_vector_weights.iter().copied().sum();
            for (s, &w) in samples.cores.iter().zip(core_vector_weights.iter()) {
                let df = &mut scratch[..r];
                gate_backward_one(&p.weight_heads[0], &mut grads.weight_heads[0], &s.vector, w, wsum, v, d_agg, normalize, df);
                p.core_vectors[s.index].scatter_stencil(s.vector_stencil, df, &mut grads.core_vectors[s.index]);
            }
        }
        if !cfg.disable_core_matrix {
            d_agg.clear();
            d_agg.extend((0..r).map(|k| dg[k] * v[k] * e[k]));
            let wsum: T = core_matrix_weights.iter().copied().sum();
            for (s, &w) in samples.cores.iter().zip(core_matrix_weights.iter()) {
                let df = &mut scratch[..r];
                gate_backward_one(&p.weight_heads[1], &mut grads.weight_heads[1], &s.matrix, w, wsum, m, d_agg, normalize, df);
                p.core_matrices[s.index].scatter_stencil(&s.matrix_stencil, df, &mut grads.core_matrices[s.index]);
            }
        }

        // de = dg * v * m, then through the expansion (or concatenation) layer.
        d_agg.clear();
        d_agg.extend((0..r).map(|k| dg[k] * v[k] * m[k]));
        let nb = basis_agg.len();
        let d_basis = &mut scratch[..nb];
        d_basis.fill(T::zero());
        match (&p.concat_basis, &mut grads.concat_basis) {
            (Some(layer), Some(g)) => {
                layer.backward_into(basis_agg, d_agg, Some(d_basis), g);
                let f = cfg.basis_components;
                for (j, s) in samples.basis.iter().enumerate() {
                    let df = &d_basis[j * f..(j + 1) * f];
                    p.basis_matrices[s.index].scatter_stencil(&s.stencil, df, &mut grads.basis_matrices[s.index]);
                }
            }
            _ => {
                p.expand_basis.backward_into(basis_agg, d_agg, Some(d_basis), &mut grads.expand_basis);
                let wsum: T = basis_weights.iter().copied().sum();
                let (d_bagg, df) = scratch.split_at_mut(nb);
                let df = &mut df[..nb];
                for (s, &w) in samples.basis.iter().zip(basis_weights.iter()) {
                    gate_backward_one(&p.weight_heads[2], &mut grads.weight_heads[2], &s.matrix, w, wsum, basis_agg, d_bagg, normalize, df);
                    p.basis_matrices[s.index].scatter_stencil(&s.stencil, df, &mut grads.basis_matrices[s.index]);
                }
            }
        }
    }

    pub fn zero_grads(&self) -> FieldGrads<T> {
        let p = &self.probes;
        let head = |l: &DenseLayer<T>| DenseGrad::zeros(l.in_dim, l.out_dim);
        FieldGrads {
            core_vectors: p.core_vectors.iter().map(|g| vec![T::zero(); g.values.len()]).collect(),
            core_matrices: p.core_matrices.iter().map(|g| vec![T::zero(); g.values.len()]).collect(),
            basis_matrices: p.basis_matrices.iter().map(|g| vec![T::zero(); g.values.len()]).collect(),
            expand_basis: head(&p.expand_basis),
            concat_basis: p.concat_basis.as_ref().map(head),
            weight_heads: [head(&p.weight_heads[0]), head(&p.weight_heads[1]), head(&p.weight_heads[2])],
            decoder: self.decoder.zero_grads(),
        }
    }

    /// Every trainable tensor as `(name, shape, values, grad)`, in a fixed order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, Vec<usize>, &mut Vec<T>, &mut Vec<T>)) {
        let p = &mut self.probes;
        for (i, g) in p.core_vectors.iter_mut().enumerate() {
            f(&format!("core_vector.{i}"), vec![g.resolution, g.channels], &mut g.values, &mut g.grad);
        }
        for (i, g) in p.core_matrices.iter_mut().enumerate() {
            f(&format!("core_matrix.{i}"), vec![g.height, g.width, g.channels], &mut g.values, &mut g.grad);
        }
        for (i, g) in p.basis_matrices.iter_mut().enumerate() {
            f(&format!("basis_matrix.{i}"), vec![g.height, g.width, g.channels], &mut g.values, &mut g.grad);
        }
        let mut dense = |name: &str, l: &mut DenseLayer<T>| {
            f(&format!("{name}.weight"), vec![l.out_dim, l.in_dim], &mut l.weight, &mut l.grad.weight);
            f(&format!("{name}.bias"), vec![l.out_dim], &mut l.bias, &mut l.grad.bias);
        };
        let [hv, hm, hb] = &mut p.weight_heads;
        dense("head.core_vector", hv);
        dense("head.core_matrix", hm);
        dense("head.basis", hb);
        dense("expand_basis", &mut p.expand_basis);
        if let Some(l) = p.concat_basis.as_mut() {
            dense("concat_basis", l);
        }
        for (name, l) in decoder::dense_layers_mut(&mut self.decoder) {
            dense(&name, l);
        }
    }

    /// Read-only counterpart of [`visit_params_mut`](Self::visit_params_mut).
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, Vec<usize>, &[T])) {
        let p = &self.probes;
        for (i, g) in p.core_vectors.iter().enumerate() {
            f(&format!("core_vector.{i}"), vec![g.resolution, g.channels], &g.values);
        }
        for (i, g) in p.core_matrices.iter().enumerate() {
            f(&format!("core_matrix.{i}"), vec![g.height, g.width, g.channels], &g.values);
        }
        for (i, g) in p.basis_matrices.iter().enumerate() {
            f(&format!("basis_matrix.{i}"), vec![g.height, g.width, g.channels], &g.values);
        }
        let mut dense = |name: &str, l: &DenseLayer<T>| {
            f(&format!("{name}.weight"), vec![l.out_dim, l.in_dim], &l.weight);
            f(&format!("{name}.bias"), vec![l.out_dim], &l.bias);
        };
        let [hv, hm, hb] = &p.weight_heads;
        dense("head.core_vector", hv);
        dense("head.core_matrix", hm);
        dense("head.basis", hb);
        dense("expand_basis", &p.expand_basis);
        if let Some(l) = p.concat_basis.as_ref() {
            dense("concat_basis", l);
        }
        for (name, l) in decoder::dense_layers(&self.decoder) {
            dense(&name, l);
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    /// Adds worker gradients into the model's own gradient buffers.
    pub fn absorb_grads(&mut self, grads: &FieldGrads<T>) {
        let flat = grads.flat();
        let mut k = 0;
        self.visit_params_mut(&mut |_, _, _, g| {
            add_into(g, flat[k]);
            k += 1;
        });
        debug_assert_eq!(k, flat.len());
    }

    pub fn clear_grads(&mut self) {
        self.visit_params_mut(&mut |_, _, _, g| g.fill(T::zero()));
    }

    pub fn grads_are_zero(&mut self) -> bool {
        let mut zero = true;
        self.visit_params_mut(&mut |_, _, _, g| zero &= g.iter().all(|v| *v == T::zero()));
        zero
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> ProbeField<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.to_f64_lossless())).collect::<Vec<U>>();
        let dense = |l: &DenseLayer<T>| DenseLayer::from_parts(l.in_dim, l.out_dim, c(&l.weight), c(&l.bias)).expect("same shape");
        let mlp = |m: &crate::grids::Mlp<T>| crate::grids::Mlp {
            layers: m.layers.iter().map(dense).collect(),
            heads: m.heads.clone(),
        };
        let p = &self.probes;
        ProbeField {
            config: self.config.clone(),
            probes: ProbeSet {
                basis_positions: p.basis_positions.clone(),
                core_positions: p.core_positions.clone(),
                core_vectors: p
                    .core_vectors
                    .iter()
                    .map(|g| VectorGrid::from_values(g.resolution, g.channels, c(&g.values)).expect("same shape"))
                    .collect(),
                core_matrices: p
                    .core_matrices
                    .iter()
                    .map(|g| MatrixGrid::from_values(g.height, g.width, g.channels, g.wrap_azimuth, c(&g.values)).expect("same shape"))
                    .collect(),
                basis_matrices: p
                    .basis_matrices
                    .iter()
                    .map(|g| MatrixGrid::from_values(g.height, g.width, g.channels, g.wrap_azimuth, c(&g.values)).expect("same shape"))
                    .collect(),
                expand_basis: dense(&p.expand_basis),
                concat_basis: p.concat_basis.as_ref().map(dense),
                weight_heads: [dense(&p.weight_heads[0]), dense(&p.weight_heads[1]), dense(&p.weight_heads[2])],
            },
            decoder: Decoder {
                trunk: mlp(&self.decoder.trunk),
                color: mlp(&self.decoder.color),
                octaves: self.decoder.octaves,
            },
        }
    }

    /// Density and radiance at one point for view direction `d`.
    pub fn decode(&self, feature: &PointFeature<T>, d: &Vec3) -> Result<(T, [T; 3])> {
        self.decoder.decode(&feature.g, d)
    }

    /// Selection used for a point: the view's selection, or the point's own
    /// neighbors in point mode.
    fn point_selection<'a>(&self, view: &'a ProbeSelection, x: &Vec3, scratch: &'a mut (Vec<usize>, Vec<usize>)) -> (&'a [usize], &'a [usize]) {
        match self.config.selection_mode {
            SelectionMode::Camera => (&view.core_indices, &view.basis_indices),
            SelectionMode::Point => {
                nearest_indices_into(&self.probes.core_positions, x, self.config.core_neighbors, &mut scratch.0);
                nearest_indices_into(&self.probes.basis_positions, x, self.config.basis_neighbors, &mut scratch.1);
                (&scratch.0, &scratch.1)
            }
        }
    }

    /// Evaluates density and radiance for a batch of points sharing one view
    /// direction, recording everything the adjoint needs in `ws`.
    pub fn eval_points(&self, view: &ProbeSelection, xs: &[Vec3], d: &Vec3, ws: &mut FieldWorkspace<T>) -> Result<()> {
        let n = xs.len();
        let r = self.config.components;
        if ws.points.len() < n {
            ws.points.resize_with(n, Default::default);
        }
        ws.n = n;
        ws.g.resize(n * r, T::zero());
        let mut sel_scratch = std::mem::take(&mut ws.sel_scratch);
        for (i, x) in xs.iter().enumerate() {
            let (cores, basis) = self.point_selection(view, x, &mut sel_scratch);
            let pt = &mut ws.points[i];
            self.query_factors_into(cores, basis, x, &mut pt.0)?;
            self.aggregate_into(&pt.0, &mut pt.1);
            ws.g[i * r..(i + 1) * r].copy_from_slice(&pt.1.g);
        }
        ws.sel_scratch = sel_scratch;
        self.decoder.forward_batch(n, &ws.g, d, &mut ws.tape)
    }

    /// Adjoint of the last [`eval_points`](Self::eval_points).
    pub fn backward_points(&self, ws: &mut FieldWorkspace<T>, d_sigma: &[T], d_rgb: &[T], grads: &mut FieldGrads<T>) {
        let n = ws.n;
        let r = self.config.components;
        ws.dg.resize(n * r, T::zero());
        self.decoder.backward_batch(&mut ws.tape, d_sigma, d_rgb, &mut ws.dg, &mut grads.decoder);
        for i in 0..n {
            let (samples, feat) = &mut ws.points[i];
            self.aggregate_backward(samples, feat, &ws.dg[i * r..(i + 1) * r], grads);
        }
    }
}

/// Reusable per-worker buffers for batched point evaluation.
#[derive(Debug, Clone, Default)]
pub struct FieldWorkspace<T> {
    n: usize,
    points: Vec<(FactorSamples<T>, PointFeature<T>)>,
    sel_scratch: (Vec<usize>, Vec<usize>),
    g: Vec<T>,
    dg: Vec<T>,
    pub tape: DecoderTape<T>,
}

impl<T: Real> FieldWorkspace<T> {
    pub fn sigma(&self) -> &[T] {
        &self.tape.sigma[..self.n]
    }

    pub fn rgb(&self) -> &[T] {
        &self.tape.rgb[..self.n * 3]
    }

    pub fn features(&self) -> &[T] {
        &self.g
    }
}

impl<T: Real> FieldGrads<T> {
    /// Gradient tensors in the same order as [`ProbeField::visit_params_mut`].
    pub fn flat(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        out.extend(self.core_vectors.iter().map(|v| v.as_slice()));
        out.extend(self.core_matrices.iter().map(|v| v.as_slice()));
        out.extend(self.basis_matrices.iter().map(|v| v.as_slice()));
        for h in &self.weight_heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out.push(&self.expand_basis.weight);
        out.push(&self.expand_basis.bias);
        if let Some(c) = &self.concat_basis {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for g in self.decoder.trunk.iter().chain(&self.decoder.color) {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self
            .core_vectors
            .iter_mut()
            .chain(self.core_matrices.iter_mut())
            .chain(self.basis_matrices.iter_mut())
            .zip(other.core_vectors.iter().chain(&other.core_matrices).chain(&other.basis_matrices))
        {
            add_into(a, b);
        }
        self.expand_basis.add_assign(&other.expand_basis);
        if let (Some(a), Some(b)) = (self.concat_basis.as_mut(), other.concat_basis.as_ref()) {
            a.add_assign(b);
        }
        for (a, b) in self.weight_heads.iter_mut().zip(&other.weight_heads) {
            a.add_assign(b);
        }
        self.decoder.add_assign(&other.decoder);
    }

    pub fn clear(&mut self) {
        for v in self.core_vectors.iter_mut().chain(self.core_matrices.iter_mut()).chain(self.basis_matrices.iter_mut()) {
            v.fill(T::zero());
        }
        self.expand_basis.clear();
        if let Some(c) = self.concat_basis.as_mut() {
            c.clear();
        }
        for h in self.weight_heads.iter_mut() {
            h.clear();
        }
        self.decoder.clear();
    }
}

/// Random direction helper used by tests and scene tooling.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}
