//! Image quality metrics and probe export.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::probe_field::ProbeSet;
use crate::raster::Image;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::InvalidArgument(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let sse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sse / a.data.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for a unit peak; identical images give +inf.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Channel-mean luminance as a row-major plane.
pub fn luminance(img: &Image) -> Vec<f64> {
    img.data.chunks_exact(3).map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale structural similarity over every full window position.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let taps = gaussian_taps();
    let (la, lb) = (luminance(a), luminance(b));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, w, h, &taps);
    let mu_b = filter_valid(&lb, w, h, &taps);
    let aa = filter_valid(&prod(&la, &la), w, h, &taps);
    let bb = filter_valid(&prod(&lb, &lb), w, h, &taps);
    let ab = filter_valid(&prod(&la, &lb), w, h, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// ASCII PLY with basis probes in green followed by core probes in blue.
pub fn probes_ply<T>(probes: &ProbeSet<T>) -> String {
    let n = probes.basis_positions.len() + probes.core_positions.len();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment basis probes green, core probes blue\n");
    let _ = writeln!(s, "element vertex {n}");
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {c}");
    }
    s.push_str("end_header\n");
    let groups = [(&probes.basis_positions, "0 255 0"), (&probes.core_positions, "0 0 255")];
    for (positions, color) in groups {
        for p in positions.iter() {
            let _ = writeln!(s, "{:.6} {:.6} {:.6} {color}", p[0], p[1], p[2]);
        }
    }
    s
}

pub fn export_probes<T>(probes: &ProbeSet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, probes_ply(probes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::probe_field::{FieldConfig, ProbeField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    /// Direct 2-D window sums, no separability.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let taps = gaussian_taps();
        let (la, lb) = (luminance(a), luminance(b));
        let w = a.width;
        let (ow, oh) = (a.width - 10, a.height - 10);
        let mut total = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let g = taps[i] * taps[j];
                        let (p, q) = (la[(y + j) * w + x + i], lb[(y + j) * w + x + i]);
                        ma += g * p;
                        mb += g * q;
                        aa += g * p * p;
                        bb += g * q * q;
                        ab += g * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
            }
        }
        total / (ow * oh) as f64
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 5, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let base = Image::filled(4, 4, [0.25; 3]);
        let off = Image::filled(4, 4, [0.35; 3]);
        // f32 pixels carry the offset inexactly; the closed form holds to f32 precision.
        assert!((psnr(&base, &off).unwrap() - 20.0).abs() < 1e-5);
        let exact = Image::filled(4, 4, [0.5; 3]);
        let exact_off = Image::filled(4, 4, [0.625; 3]);
        assert_eq!(psnr(&exact, &exact_off).unwrap(), 10.0 * (1.0f64 / 0.015625).log10());
        let b = random_image(8, 5, 2);
        let mut sse = 0.0;
        for i in 0..a.data.len() {
            sse += (a.data[i] as f64 - b.data[i] as f64).powi(2);
        }
        let oracle = 10.0 * (1.0 / (sse / a.data.len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
        assert!(psnr(&a, &random_image(5, 8, 2)).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(16, 13, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(16, 13, 4);
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-9);
        // A checkerboard against its negative.
        let mut board = Image::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x + y) % 2 == 0 { 0.9 } else { 0.1 };
                board.set_pixel(x, y, [v; 3]);
            }
        }
        let neg = Image::from_data(16, 16, board.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&board, &neg).unwrap() < 0.5);
        // Constant images: only the luminance term remains.
        let (p, q) = (Image::filled(12, 12, [0.2; 3]), Image::filled(12, 12, [0.7; 3]));
        let (m1, m2) = (0.2f32 as f64, 0.7f32 as f64);
        let lum = (2.0 * m1 * m2 + 1e-4) / (m1 * m1 + m2 * m2 + 1e-4);
        assert!((ssim(&p, &q).unwrap() - lum).abs() < 1e-9);
        assert!((ssim(&p, &q).unwrap() - ssim_reference(&p, &q)).abs() < 1e-9);
        assert!(ssim(&Image::new(10, 20), &Image::new(10, 20)).is_err());
    }

    /// Minimal PLY grammar check returning vertex rows.
    fn parse_ply(text: &str) -> Vec<([f64; 3], [u8; 3])> {
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("ply"));
        assert_eq!(lines.next(), Some("format ascii 1.0"));
        let mut count = None;
        let mut props = Vec::new();
        for line in lines.by_ref() {
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["comment", ..] => {}
                ["element", "vertex", n] => count = Some(n.parse::<usize>().unwrap()),
                ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
                ["end_header"] => break,
                other => panic!("unexpected header line {other:?}"),
            }
        }
        assert_eq!(props.len(), 6);
        let rows: Vec<_> = lines
            .map(|l| {
                let w: Vec<&str> = l.split_whitespace().collect();
                assert_eq!(w.len(), 6);
                (
                    [w[0].parse().unwrap(), w[1].parse().unwrap(), w[2].parse().unwrap()],
                    [w[3].parse().unwrap(), w[4].parse().unwrap(), w[5].parse().unwrap()],
                )
            })
            .collect();
        assert_eq!(Some(rows.len()), count);
        rows
    }

    #[test]
    fn probe_export() {
        let cams: Vec<Vec3> = (0..12).map(|i| Vec3::new(i as f64 * 0.731, (i * i) as f64 * 0.1, 1.0 / 3.0)).collect();
        let field: ProbeField<f32> = ProbeField::initialize(FieldConfig::desk(), &cams).unwrap();
        let text = probes_ply(&field.probes);
        assert!(text.contains("element vertex 10\n"));
        let rows = parse_ply(&text);
        for (i, (xyz, rgb)) in rows.iter().enumerate() {
            let (p, color) = if i < 8 { (field.probes.basis_positions[i], [0, 255, 0]) } else { (field.probes.core_positions[i - 8], [0, 0, 255]) };
            assert_eq!(*rgb, color);
            for k in 0..3 {
                assert!((xyz[k] - p[k] as f64).abs() <= 5e-7);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        export_probes(&field.probes, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    }
}
