//! Decoder from an aggregated point feature and view direction to density
//! and radiance.
//!
//! Trunk: `R -> W -> W -> 1 + geo` with rectifiers; the first output is the
//! raw density (softplus), the rest are geometry features. Color branch:
//! `[geo | d | sin/cos(2^k pi d)] -> W -> 3` with a sigmoid.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::geometry::Vec3;
use crate::grids::{DenseGrad, DenseLayer, Mlp, MlpTape, OutputHead};
use crate::real::{sigmoid, softplus, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub trunk: Mlp<T>,
    pub color: Mlp<T>,
    pub octaves: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads<T> {
    pub trunk: Vec<DenseGrad<T>>,
    pub color: Vec<DenseGrad<T>>,
}

/// Scratch and recorded activations for a batch of decoded samples.
#[derive(Debug, Clone, Default)]
pub struct DecoderTape<T> {
    n: usize,
    trunk: MlpTape<T>,
    color: MlpTape<T>,
    color_in: Vec<T>,
    pub sigma: Vec<T>,
    pub rgb: Vec<T>,
    d_trunk: Vec<T>,
    d_color: Vec<T>,
    d_color_in: Vec<T>,
}

pub fn direction_encoding_len(octaves: usize) -> usize {
    3 + 6 * octaves
}

/// `[d, sin(2^k pi d), cos(2^k pi d)]` for `k < octaves`.
pub fn encode_direction<T: Real>(d: &Vec3, octaves: usize, out: &mut Vec<T>) {
    out.clear();
    out.extend(d.iter().map(|&v| T::of(v)));
    for k in 0..octaves {
        let f = (1u64 << k) as f64 * PI;
        out.extend(d.iter().map(|&v| T::of((f * v).sin())));
        out.extend(d.iter().map(|&v| T::of((f * v).cos())));
    }
}

impl<T: Real> Decoder<T> {
    pub fn random<R: Rng + ?Sized>(components: usize, width: usize, geo_features: usize, octaves: usize, rng: &mut R) -> Result<Self> {
        let trunk = Mlp::random(
            &[components, width, width, 1 + geo_features],
            vec![
                OutputHead { name: "density".into(), start: 0, len: 1 },
                OutputHead { name: "geometry".into(), start: 1, len: geo_features },
            ],
            rng,
        )?;
        let color = Mlp::random(
            &[geo_features + direction_encoding_len(octaves), width, 3],
            vec![OutputHead { name: "rgb".into(), start: 0, len: 3 }],
            rng,
        )?;
        Ok(Self { trunk, color, octaves })
    }

    pub fn geo_features(&self) -> usize {
        self.trunk.out_dim() - 1
    }

    /// Zeroes the last layer of both branches, so every output sits at the
    /// activation's value at zero.
    pub fn zero_final_layers(&mut self) {
        for mlp in [&mut self.trunk, &mut self.color] {
            let last = mlp.layers.last_mut().expect("non-empty mlp");
            last.weight.fill(T::zero());
            last.bias.fill(T::zero());
        }
    }

    pub fn zero_grads(&self) -> DecoderGrads<T> {
        DecoderGrads {
            trunk: self.trunk.zero_grads(),
            color: self.color.zero_grads(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.trunk.parameter_count() + self.color.parameter_count()
    }

    /// Single-point decode returning `(sigma, rgb)`.
    pub fn decode(&self, g: &[T], d: &Vec3) -> Result<(T, [T; 3])> {
        let mut tape = DecoderTape::default();
        self.forward_batch(1, g, d, &mut tape)?;
        Ok((tape.sigma[0], [tape.rgb[0], tape.rgb[1], tape.rgb[2]]))
    }

    /// Decodes `n` features sharing one view direction.
    pub fn forward_batch(&self, n: usize, g: &[T], d: &Vec3, tape: &mut DecoderTape<T>) -> Result<()> {
        tape.n = n;
        let geo = self.geo_features();
        let trunk_w = geo + 1;
        let raw = self.trunk.forward_batch(n, g, &mut tape.trunk)?;
        tape.sigma.clear();
        tape.sigma.extend(raw.chunks_exact(trunk_w).map(|row| softplus(row[0])));

        let mut enc = Vec::new();
        encode_direction::<T>(d, self.octaves, &mut enc);
        let cin = geo + enc.len();
        tape.color_in.clear();
        tape.color_in.reserve(n * cin);
        for row in raw.chunks_exact(trunk_w) {
            tape.color_in.extend_from_slice(&row[1..]);
            tape.color_in.extend_from_slice(&enc);
        }
        let out = self.color.forward_batch(n, &tape.color_in, &mut tape.color)?;
        tape.rgb.clear();
        tape.rgb.extend(out.iter().map(|&v| sigmoid(v)));
        Ok(())
    }

    /// Adjoint of the last `forward_batch`; overwrites `dg` (`n x R`).
    pub fn backward_batch(&self, tape: &mut DecoderTape<T>, d_sigma: &[T], d_rgb: &[T], dg: &mut [T], grads: &mut DecoderGrads<T>) {
        let n = tape.n;
        let geo = self.geo_features();
        let trunk_w = geo + 1;
        let cin = self.color.in_dim();

        tape.d_color.clear();
        tape.d_color.extend(d_rgb[..n * 3].iter().zip(&tape.rgb).map(|(&g, &s)| g * s * (T::one() - s)));
        tape.d_color_in.resize(n * cin, T::zero());
        self.color.backward_batch(&mut tape.color, &tape.d_color, Some(&mut tape.d_color_in), &mut grads.color);

        tape.d_trunk.resize(n * trunk_w, T::zero());
        let raw = tape.trunk.output();
        for i in 0..n {
            let row = &mut tape.d_trunk[i * trunk_w..(i + 1) * trunk_w];
            row[0] = d_sigma[i] * sigmoid(raw[i * trunk_w]);
            row[1..].copy_from_slice(&tape.d_color_in[i * cin..i * cin + geo]);
        }
        self.trunk.backward_batch(&mut tape.trunk, &tape.d_trunk, Some(dg), &mut grads.trunk);
    }
}

impl<T: Real> DecoderGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.trunk.iter_mut().zip(&other.trunk).chain(self.color.iter_mut().zip(&other.color)) {
            a.add_assign(b);
        }
    }

    pub fn clear(&mut self) {
        for g in self.trunk.iter_mut().chain(self.color.iter_mut()) {
            g.clear();
        }
    }
}

pub(crate) fn dense_layers_mut<T>(d: &mut Decoder<T>) -> impl Iterator<Item = (String, &mut DenseLayer<T>)> {
    let trunk = d.trunk.layers.iter_mut().enumerate().map(|(k, l)| (format!("decoder.trunk.{k}"), l));
    let color = d.color.layers.iter_mut().enumerate().map(|(k, l)| (format!("decoder.color.{k}"), l));
    trunk.chain(color)
}

pub(crate) fn dense_layers<T>(d: &Decoder<T>) -> impl Iterator<Item = (String, &DenseLayer<T>)> {
    let trunk = d.trunk.layers.iter().enumerate().map(|(k, l)| (format!("decoder.trunk.{k}"), l));
    let color = d.color.layers.iter().enumerate().map(|(k, l)| (format!("decoder.color.{k}"), l));
    trunk.chain(color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_final_layers_give_activation_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dec = Decoder::<f64>::random(8, 16, 15, 2, &mut rng).unwrap();
        dec.zero_final_layers();
        let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (sigma, rgb) = dec.decode(&g, &Vec3::new(0.0, 0.6, 0.8)).unwrap();
        assert!((sigma - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn encoding_layout() {
        let mut enc = Vec::new();
        encode_direction::<f64>(&Vec3::new(0.5, 0.0, 1.0), 2, &mut enc);
        assert_eq!(enc.len(), 15);
        assert_eq!(&enc[..3], &[0.5, 0.0, 1.0]);
        assert!((enc[3] - (0.5 * PI).sin()).abs() < 1e-15);
        assert!((enc[12] - (2.0 * PI * 0.5).cos()).abs() < 1e-15);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dec = Decoder::<f64>::random(6, 12, 5, 2, &mut rng).unwrap();
        let d = Vec3::new(0.2, -0.3, 0.9).normalize();
        let n = 3;
        let g: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ds: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dc: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |g: &[f64]| {
            let mut tape = DecoderTape::default();
            dec.forward_batch(n, g, &d, &mut tape).unwrap();
            tape.sigma.iter().zip(&ds).map(|(a, b)| a * b).sum::<f64>()
                + tape.rgb.iter().zip(&dc).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = DecoderTape::default();
        dec.forward_batch(n, &g, &d, &mut tape).unwrap();
        let mut dg = vec![0.0; n * 6];
        let mut grads = dec.zero_grads();
        dec.backward_batch(&mut tape, &ds, &dc, &mut dg, &mut grads);
        let h = 1e-5;
        for i in 0..g.len() {
            let (mut p, mut m) = (g.clone(), g.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let err = (fd - dg[i]).abs();
            assert!(err < 1e-5 * fd.abs().max(dg[i].abs()) || err < 1e-8, "dg[{i}] {} vs {fd}", dg[i]);
        }
    }
}
