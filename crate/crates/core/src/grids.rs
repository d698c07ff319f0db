//! Interpolatable parameter grids, dense layers and a small MLP, each with a
//! forward evaluation and a hand-written adjoint, plus Adam and grid
//! resampling.
//!
//! Adjoints never produce cotangents for query coordinates: sample and probe
//! positions are fixed, only grid values and layer weights are trained.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

static OUT_OF_RANGE_QUERIES: AtomicU64 = AtomicU64::new(0);

/// Number of interpolation queries whose coordinate had to be clamped into
/// the unit interval since process start.
pub fn out_of_range_queries() -> u64 {
    OUT_OF_RANGE_QUERIES.load(Ordering::Relaxed)
}

#[inline]
fn clamp_unit(u: f64) -> f64 {
    if (0.0..=1.0).contains(&u) {
        u
    } else {
        OUT_OF_RANGE_QUERIES.fetch_add(1, Ordering::Relaxed);
        if u.is_nan() {
            0.0
        } else {
            u.clamp(0.0, 1.0)
        }
    }
}

/// Lower knot and blend factor for an endpoint-inclusive lattice of `res` knots.
#[inline]
fn clamped_knot(u: f64, res: usize) -> (usize, f64) {
    let x = clamp_unit(u) * (res - 1) as f64;
    let i0 = (x.floor() as usize).min(res - 2);
    (i0, x - i0 as f64)
}

/// Lower knot and blend factor on a periodic lattice of `res` knots spanning [0, 1).
#[inline]
fn periodic_knot(u: f64, res: usize) -> (usize, usize, f64) {
    let x = u.rem_euclid(1.0) * res as f64;
    let fl = x.floor();
    let i0 = (fl as usize) % res;
    (i0, (i0 + 1) % res, x - fl)
}

/// Initialization shared by all factor grids: U(-0.1, 0.1) / sqrt(R).
pub fn init_grid_values<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, components: usize) -> Vec<T> {
    let scale = 0.1 / (components as f64).sqrt();
    (0..len).map(|_| T::of(rng.gen_range(-scale..=scale))).collect()
}

/// Two-knot linear interpolation stencil.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil1<T> {
    pub lo: usize,
    pub w_hi: T,
}

/// Four-cell bilinear stencil (cell indices into an `H x W` lattice).
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil2<T> {
    pub cells: [usize; 4],
    pub weights: [T; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid<T> {
    pub resolution: usize,
    pub channels: usize,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> VectorGrid<T> {
    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        Self::from_values(resolution, channels, vec![T::zero(); resolution * channels])
    }

    pub fn from_values(resolution: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if resolution < 2 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "vector grid needs resolution >= 2 and channels >= 1, got {resolution}x{channels}"
            )));
        }
        if values.len() != resolution * channels {
            return Err(Error::DimensionMismatch {
                expected: resolution * channels,
                got: values.len(),
            });
        }
        let grad = vec![T::zero(); values.len()];
        Ok(Self {
            resolution,
            channels,
            values,
            grad,
        })
    }

    pub fn random<R: Rng + ?Sized>(resolution: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let values = init_grid_values(rng, resolution * channels, channels);
        Self::from_values(resolution, channels, values)
    }

    #[inline]
    pub fn stencil(&self, u: f64) -> Stencil1<T> {
        let (lo, f) = clamped_knot(u, self.resolution);
        Stencil1 { lo, w_hi: T::of(f) }
    }

    #[inline]
    pub fn eval_stencil(&self, s: Stencil1<T>, out: &mut [T]) {
        let c = self.channels;
        let a = &self.values[s.lo * c..(s.lo + 1) * c];
        let b = &self.values[(s.lo + 1) * c..(s.lo + 2) * c];
        let w_lo = T::one() - s.w_hi;
        for ((o, &va), &vb) in out.iter_mut().zip(a).zip(b) {
            *o = w_lo * va + s.w_hi * vb;
        }
    }

    #[inline]
    pub fn scatter_stencil(&self, s: Stencil1<T>, cotangent: &[T], grad: &mut [T]) {
        let c = self.channels;
        let w_lo = T::one() - s.w_hi;
        let (ga, gb) = grad[s.lo * c..(s.lo + 2) * c].split_at_mut(c);
        for k in 0..c {
            ga[k] += w_lo * cotangent[k];
            gb[k] += s.w_hi * cotangent[k];
        }
    }

    /// Linear interpolation at `u` in [0, 1] (clamped, with a diagnostic count).
    pub fn interp(&self, u: f64) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        self.eval_stencil(self.stencil(u), &mut out);
        out
    }

    /// Adjoint of [`interp`](Self::interp) into an external gradient buffer.
    pub fn accumulate_grad(&self, u: f64, cotangent: &[T], grad: &mut [T]) {
        self.scatter_stencil(self.stencil(u), cotangent, grad);
    }

    pub fn backward(&mut self, u: f64, cotangent: &[T]) {
        let s = self.stencil(u);
        let mut grad = std::mem::take(&mut self.grad);
        self.scatter_stencil(s, cotangent, &mut grad);
        self.grad = grad;
    }

    pub fn resample(&self, new_resolution: usize) -> Result<Self> {
        let values = resample_vector_values(&self.values, self.resolution, self.channels, new_resolution)?;
        Self::from_values(new_resolution, self.channels, values)
    }
}

/// Linearly resamples a `[res x channels]` knot array onto `new_res` knots.
///
/// The blend weights are computed from exact integer ratios, so old knot
/// values survive bitwise whenever the new lattice contains them.
pub fn resample_vector_values<T: Real>(values: &[T], res: usize, channels: usize, new_res: usize) -> Result<Vec<T>> {
    if new_res < res {
        return Err(Error::InvalidArgument(format!(
            "cannot shrink grid resolution from {res} to {new_res}"
        )));
    }
    let mut out = Vec::with_capacity(new_res * channels);
    for k in 0..new_res {
        let (lo, w) = exact_knot(k, res - 1, new_res - 1);
        let w = T::of(w);
        for c in 0..channels {
            let a = values[lo * channels + c];
            let v = if w == T::zero() {
                a
            } else {
                let b = values[(lo + 1) * channels + c];
                (T::one() - w) * a + w * b
            };
            out.push(v);
        }
    }
    Ok(out)
}

/// Position of new knot `k` on an old lattice with `old_intervals` intervals,
/// where the new lattice has `new_intervals` intervals over the same span.
fn exact_knot(k: usize, old_intervals: usize, new_intervals: usize) -> (usize, f64) {
    let num = k * old_intervals;
    let lo = num / new_intervals;
    let rem = num % new_intervals;
    if lo >= old_intervals {
        (old_intervals - 1, 1.0)
    } else {
        (lo, rem as f64 / new_intervals as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGrid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[height x width x channels]`, channels innermost.
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub wrap_azimuth: bool,
}

impl<T: Real> MatrixGrid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize, wrap_azimuth: bool) -> Result<Self> {
        Self::from_values(height, width, channels, wrap_azimuth, vec![T::zero(); height * width * channels])
    }

    pub fn from_values(height: usize, width: usize, channels: usize, wrap_azimuth: bool, values: Vec<T>) -> Result<Self> {
        if height < 2 || width < 2 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix grid needs H, W >= 2 and channels >= 1, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                got: values.len(),
            });
        }
        let grad = vec![T::zero(); values.len()];
        Ok(Self {
            height,
            width,
            channels,
            values,
            grad,
            wrap_azimuth,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        wrap_azimuth: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let values = init_grid_values(rng, height * width * channels, channels);
        Self::from_values(height, width, channels, wrap_azimuth, values)
    }

    #[inline]
    pub fn stencil(&self, u_theta: f64, u_phi: f64) -> Stencil2<T> {
        let (r0, fy) = clamped_knot(u_theta, self.height);
        let r1 = r0 + 1;
        let (c0, c1, fx) = if self.wrap_azimuth {
            periodic_knot(u_phi, self.width)
        } else {
            let (c0, fx) = clamped_knot(u_phi, self.width);
            (c0, c0 + 1, fx)
        };
        let w = self.width;
        let (fy, fx) = (T::of(fy), T::of(fx));
        let (gy, gx) = (T::one() - fy, T::one() - fx);
        Stencil2 {
            cells: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
            weights: [gy * gx, gy * fx, fy * gx, fy * fx],
        }
    }

    #[inline]
    pub fn eval_stencil(&self, s: &Stencil2<T>, out: &mut [T]) {
        let c = self.channels;
        for o in out.iter_mut() {
            *o = T::zero();
        }
        for (&cell, &w) in s.cells.iter().zip(&s.weights) {
            let row = &self.values[cell * c..(cell + 1) * c];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }

    #[inline]
    pub fn scatter_stencil(&self, s: &Stencil2<T>, cotangent: &[T], grad: &mut [T]) {
        let c = self.channels;
        for (&cell, &w) in s.cells.iter().zip(&s.weights) {
            let row = &mut grad[cell * c..(cell + 1) * c];
            for (g, &ct) in row.iter_mut().zip(cotangent) {
                *g += w * ct;
            }
        }
    }

    /// Bilinear interpolation; the azimuth axis wraps when `wrap_azimuth` is set.
    pub fn interp(&self, u_theta: f64, u_phi: f64) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        self.eval_stencil(&self.stencil(u_theta, u_phi), &mut out);
        out
    }

    pub fn accumulate_grad(&self, u_theta: f64, u_phi: f64, cotangent: &[T], grad: &mut [T]) {
        self.scatter_stencil(&self.stencil(u_theta, u_phi), cotangent, grad);
    }

    pub fn backward(&mut self, u_theta: f64, u_phi: f64, cotangent: &[T]) {
        let s = self.stencil(u_theta, u_phi);
        let mut grad = std::mem::take(&mut self.grad);
        self.scatter_stencil(&s, cotangent, &mut grad);
        self.grad = grad;
    }

    pub fn resample(&self, new_height: usize, new_width: usize) -> Result<Self> {
        let values = resample_matrix_values(
            &self.values,
            self.height,
            self.width,
            self.channels,
            self.wrap_azimuth,
            new_height,
            new_width,
        )?;
        Self::from_values(new_height, new_width, self.channels, self.wrap_azimuth, values)
    }
}

/// Bilinear counterpart of [`resample_vector_values`]; the width axis is
/// treated as periodic when `wrap` is set.
pub fn resample_matrix_values<T: Real>(
    values: &[T],
    height: usize,
    width: usize,
    channels: usize,
    wrap: bool,
    new_height: usize,
    new_width: usize,
) -> Result<Vec<T>> {
    if new_height < height || new_width < width {
        return Err(Error::InvalidArgument(format!(
            "cannot shrink grid from {height}x{width} to {new_height}x{new_width}"
        )));
    }
    let cols: Vec<(usize, usize, f64)> = (0..new_width)
        .map(|j| {
            if wrap {
                let num = j * width;
                let lo = num / new_width;
                (lo % width, (lo + 1) % width, (num % new_width) as f64 / new_width as f64)
            } else {
                let (lo, w) = exact_knot(j, width - 1, new_width - 1);
                (lo, lo + 1, w)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(new_height * new_width * channels);
    for i in 0..new_height {
        let (r0, fy) = exact_knot(i, height - 1, new_height - 1);
        let r1 = r0 + 1;
        let fy = T::of(fy);
        for &(c0, c1, fx) in &cols {
            let fx = T::of(fx);
            for c in 0..channels {
                let at = |r: usize, col: usize| values[(r * width + col) * channels + c];
                // Zero weights skip the neighbour entirely so lattice-aligned
                // knots are copied without rounding.
                let row = |r: usize| {
                    if fx == T::zero() {
                        at(r, c0)
                    } else {
                        (T::one() - fx) * at(r, c0) + fx * at(r, c1)
                    }
                };
                let v = if fy == T::zero() {
                    row(r0)
                } else {
                    (T::one() - fy) * row(r0) + fy * row(r1)
                };
                out.push(v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DenseGrad<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        add_into(&mut self.weight, &other.weight);
        add_into(&mut self.bias, &other.bias);
    }

    pub fn clear(&mut self) {
        self.weight.fill(T::zero());
        self.bias.fill(T::zero());
    }
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad: DenseGrad<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
            grad: DenseGrad::zeros(in_dim, out_dim),
        }
    }

    /// Fan-in scaled uniform initialization, U(-1/sqrt(in), 1/sqrt(in)).
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *w = T::of(rng.gen_range(-bound..=bound));
        }
        layer
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim,
                got: weight.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                got: bias.len(),
            });
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
            grad: DenseGrad::zeros(in_dim, out_dim),
        })
    }

    #[inline]
    pub fn forward_into(&self, x: &[T], y: &mut [T]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (&w, &xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *yo = acc;
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        let mut y = vec![T::zero(); self.out_dim];
        self.forward_into(x, &mut y);
        Ok(y)
    }

    /// Single-sample adjoint: accumulates parameter gradients into `grad`
    /// and adds the input cotangent into `dx` when given.
    #[inline]
    pub fn backward_into(&self, x: &[T], dy: &[T], dx: Option<&mut [T]>, grad: &mut DenseGrad<T>) {
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (gw, &xi) in row.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    /// `y[n x out] = x[n x in] W^T + b`.
    pub fn forward_batch(&self, n: usize, x: &[T], y: &mut [T]) {
        let (i, o) = (self.in_dim, self.out_dim);
        for row in y[..n * o].chunks_exact_mut(o) {
            row.copy_from_slice(&self.bias);
        }
        T::gemm(n, i, o, T::one(), x, i as isize, 1, &self.weight, 1, i as isize, T::one(), y, o as isize, 1);
    }

    /// Batched adjoint. `dx`, when given, is overwritten with `dy W`.
    pub fn backward_batch(&self, n: usize, x: &[T], dy: &[T], dx: Option<&mut [T]>, grad: &mut DenseGrad<T>) {
        let (i, o) = (self.in_dim, self.out_dim);
        // dW[o x i] += dy^T x
        T::gemm(o, n, i, T::one(), dy, 1, o as isize, x, i as isize, 1, T::one(), &mut grad.weight, i as isize, 1);
        for row in dy[..n * o].chunks_exact(o) {
            add_into(&mut grad.bias, row);
        }
        if let Some(dx) = dx {
            T::gemm(n, o, i, T::one(), dy, o as isize, 1, &self.weight, i as isize, 1, T::zero(), dx, i as isize, 1);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Named slice of an MLP output vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputHead {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Affine layers with rectifiers between them; the last layer is raw.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
    pub heads: Vec<OutputHead>,
}

/// Activations recorded by [`Mlp::forward_batch`] for the adjoint pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape<T> {
    n: usize,
    /// `acts[0]` is the input, `acts[k]` the output of layer `k - 1`.
    acts: Vec<Vec<T>>,
    scratch: [Vec<T>; 2],
}

impl<T: Real> MlpTape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl<T: Real> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>, heads: Vec<OutputHead>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        let out = layers.last().map(|l| l.out_dim).unwrap_or(0);
        for h in &heads {
            if h.start + h.len > out {
                return Err(Error::InvalidArgument(format!("head {} exceeds output width {out}", h.name)));
            }
        }
        Ok(Self { layers, heads })
    }

    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[k]`, fan-in initialized.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], heads: Vec<OutputHead>, rng: &mut R) -> Result<Self> {
        let layers = dims.windows(2).map(|w| DenseLayer::random(w[0], w[1], rng)).collect();
        Self::new(layers, heads)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn head(&self, name: &str) -> Option<&OutputHead> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = vec![T::zero(); layer.out_dim];
            layer.forward_into(&x, &mut y);
            if k < last {
                relu_in_place(&mut y);
            }
            x = y;
        }
        Ok(x)
    }

    /// Single-sample adjoint. Returns the input cotangent.
    pub fn backward(&self, input: &[T], d_output: &[T], grads: &mut [DenseGrad<T>]) -> Result<Vec<T>> {
        let mut tape = MlpTape::default();
        self.forward_batch(1, input, &mut tape)?;
        let mut d_input = vec![T::zero(); self.in_dim()];
        self.backward_batch(&mut tape, d_output, Some(&mut d_input), grads);
        Ok(d_input)
    }

    /// Evaluates `n` row-major inputs, recording activations in `tape`.
    pub fn forward_batch<'t>(&self, n: usize, input: &[T], tape: &'t mut MlpTape<T>) -> Result<&'t [T]> {
        if input.len() != n * self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: n * self.in_dim(),
                got: input.len(),
            });
        }
        tape.n = n;
        tape.acts.resize_with(self.layers.len() + 1, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (done, rest) = tape.acts.split_at_mut(k + 1);
            let y = &mut rest[0];
            y.resize(n * layer.out_dim, T::zero());
            layer.forward_batch(n, &done[k], y);
            if k < last {
                relu_in_place(y);
            }
        }
        Ok(tape.output())
    }

    /// Batched adjoint for the most recent `forward_batch` on `tape`.
    /// `d_input`, when given, is overwritten with the input cotangent.
    pub fn backward_batch(&self, tape: &mut MlpTape<T>, d_output: &[T], d_input: Option<&mut [T]>, grads: &mut [DenseGrad<T>]) {
        let n = tape.n;
        let [cur, next] = &mut tape.scratch;
        cur.clear();
        cur.extend_from_slice(&d_output[..n * self.out_dim()]);
        let mut d_input = d_input;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k > 0 {
                next.resize(n * layer.in_dim, T::zero());
                layer.backward_batch(n, &tape.acts[k], cur, Some(next), &mut grads[k]);
                // Rectifier mask from the recorded post-activation.
                for (d, &a) in next.iter_mut().zip(&tape.acts[k]) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                std::mem::swap(cur, next);
            } else {
                layer.backward_batch(n, &tape.acts[0], cur, d_input.as_deref_mut(), &mut grads[0]);
            }
        }
    }

    pub fn zero_grads(&self) -> Vec<DenseGrad<T>> {
        self.layers.iter().map(|l| DenseGrad::zeros(l.in_dim, l.out_dim)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }
}

#[inline]
fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adam needs 0 <= beta < 1 and eps > 0, got beta1={beta1} beta2={beta2} eps={eps}"
            )));
        }
        Ok(Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1,
            beta2,
            eps,
        })
    }

    /// One bias-corrected Adam update. The caller zeroes `grad` afterwards.
    pub fn step(&mut self, param: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: if param.len() != self.m.len() { param.len() } else { grad.len() },
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bias1 = T::of(1.0 - self.beta1.powi(t));
        let bias2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for ((p, &g), (m, v)) in param.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
