use super::*;
use crate::probe_field::FieldConfig;
use proptest::prelude::{prop, prop_assert, proptest};
use rand::SeedableRng;

fn set_from(deltas: &[f64], sigma: &[f64], rgb: &[f64]) -> RaySampleSet<f64> {
    let mut t = vec![0.0];
    for d in deltas {
        t.push(t.last().unwrap() + d);
    }
    let ray = Ray { origin: Vec3::zeros(), dir: Vec3::z(), near: 0.0, far: *t.last().unwrap() };
    let mut s = RaySampleSet::default();
    s.set_boundaries(&ray, t);
    s.sigma = sigma.to_vec();
    s.rgb = rgb.to_vec();
    s
}

#[test]
fn empty_space_shows_background() {
    let mut s = set_from(&[0.5; 4], &[0.0; 4], &[0.3; 12]);
    let r = s.composite(Some([1.0; 3])).unwrap();
    assert_eq!(r.rgb, [1.0; 3]);
    assert_eq!(r.opacity, 0.0);
    let r = s.composite(None).unwrap();
    assert_eq!(r.rgb, [0.0; 3]);
}

#[test]
fn two_sample_hand_example() {
    let mut s = set_from(&[0.5, 0.5], &[1.0, 2.0], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let r = s.composite(None).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    assert!(close(s.alpha[0], 0.393469) && close(s.alpha[1], 0.632121));
    assert!(close(s.trans[1], 0.606531));
    assert!(close(r.weights[0], 0.393469) && close(r.weights[1], 0.383401));
    assert!(close(r.rgb[0], 0.393469) && close(r.rgb[1], 0.383401) && r.rgb[2] == 0.0);
}

#[test]
fn opaque_first_sample_saturates() {
    let mut s = set_from(&[1.0, 1.0, 1.0], &[50.0, 3.0, 3.0], &[0.2; 9]);
    let r = s.composite(Some([1.0; 3])).unwrap();
    assert!((r.weights[0] - 1.0).abs() < 1e-12);
    assert!(r.weights[1..].iter().all(|w| *w < 1e-12));
    assert!((r.depth - 0.5).abs() < 1e-9);
}

#[test]
fn negative_density_is_rejected() {
    let mut s = set_from(&[1.0, 1.0], &[1.0, -0.5], &[0.0; 6]);
    assert!(matches!(s.composite(None), Err(Error::NegativeDensity(_))));
}

#[test]
fn composite_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 7;
    let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
    let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
    let rgb: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
    let g = [0.3, -0.7, 1.1];
    let bg = Some([1.0, 0.5, 0.25]);
    let loss = |sigma: &[f64], rgb: &[f64]| {
        let r = set_from(&deltas, sigma, rgb).composite(bg).unwrap();
        g[0] * r.rgb[0] + g[1] * r.rgb[1] + g[2] * r.rgb[2]
    };
    let mut s = set_from(&deltas, &sigma, &rgb);
    s.composite(bg).unwrap();
    let (mut ds, mut dc) = (Vec::new(), Vec::new());
    s.composite_backward(g, bg, &mut ds, &mut dc);
    let h = 1e-5;
    for k in 0..n {
        let (mut p, mut m) = (sigma.clone(), sigma.clone());
        p[k] += h;
        m[k] -= h;
        let num = (loss(&p, &rgb) - loss(&m, &rgb)) / (2.0 * h);
        assert!((num - ds[k]).abs() < 1e-8, "sigma {k}: {num} vs {}", ds[k]);
    }
    for k in 0..3 * n {
        let (mut p, mut m) = (rgb.clone(), rgb.clone());
        p[k] += h;
        m[k] -= h;
        let num = (loss(&sigma, &p) - loss(&sigma, &m)) / (2.0 * h);
        assert!((num - dc[k]).abs() < 1e-8);
    }
}

proptest! {
    #[test]
    fn weights_and_transmittance_partition_unity(
        sigma in prop::collection::vec(0.0f64..20.0, 1..40),
        dt in 0.001f64..0.5,
    ) {
        let n = sigma.len();
        let mut s = set_from(&vec![dt; n], &sigma, &vec![0.5; 3 * n]);
        let r = s.composite(Some([1.0; 3])).unwrap();
        let total: f64 = r.weights.iter().sum::<f64>() + s.trans[n];
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(r.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(s.trans.windows(2).all(|t| t[1] <= t[0]));
    }

    #[test]
    fn splitting_an_interval_changes_nothing(
        sigma in prop::collection::vec(0.0f64..10.0, 2..12),
        split in 0usize..12,
    ) {
        let n = sigma.len();
        let split = split % n;
        let rgb: Vec<f64> = (0..3 * n).map(|i| (i as f64 * 0.137).fract()).collect();
        let deltas = vec![0.2; n];
        let base = set_from(&deltas, &sigma, &rgb).composite(Some([1.0; 3])).unwrap();
        let mut d2 = deltas.clone();
        d2[split] = 0.1;
        d2.insert(split, 0.1);
        let mut s2 = sigma.clone();
        s2.insert(split, sigma[split]);
        let mut c2 = rgb.clone();
        for c in (0..3).rev() {
            c2.insert(3 * split, rgb[3 * split + c]);
        }
        let refined = set_from(&d2, &s2, &c2).composite(Some([1.0; 3])).unwrap();
        for c in 0..3 {
            prop_assert!((base.rgb[c] - refined.rgb[c]).abs() < 1e-6);
        }
    }
}

fn desk_field() -> ProbeField<f64> {
    let cams: Vec<Vec3> = (0..12)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 12.0;
            Vec3::new(4.0 * a.cos(), 4.0 * a.sin(), 1.0)
        })
        .collect();
    let cfg = FieldConfig {
        components: 4,
        core_vector_res: 4,
        core_matrix_res: [4, 8],
        basis_matrix_res: [8, 16],
        decoder_width: 8,
        geo_features: 3,
        ..FieldConfig::desk()
    };
    ProbeField::initialize(cfg, &cams).unwrap()
}

fn look_at_origin(eye: Vec3) -> CameraModel {
    let fwd = (-eye).normalize();
    let right = fwd.cross(&Vec3::z()).normalize();
    let up = right.cross(&fwd);
    let mut m = nalgebra::Matrix4::identity();
    for r in 0..3 {
        m[(r, 0)] = right[r];
        m[(r, 1)] = up[r];
        m[(r, 2)] = -fwd[r];
        m[(r, 3)] = eye[r];
    }
    CameraModel::new(8.0, 8.0, 4.0, 4.0, 8, 8, m, 0.5, 8.0).unwrap()
}

#[test]
fn zero_density_field_renders_background() {
    let mut field = desk_field();
    field.decoder.zero_final_layers();
    let last = field.decoder.trunk.layers.last_mut().unwrap();
    last.bias[0] = -60.0;
    let cam = look_at_origin(Vec3::new(4.0, 0.0, 1.0));
    let img = render_image(&field, &cam, &RenderConfig::default()).unwrap();
    assert!(img.data.iter().all(|v| (*v - 1.0).abs() < 1e-6));
    let tiny = CameraModel { width: 2, height: 2, cx: 1.0, cy: 1.0, ..cam };
    let img = render_image(&field, &tiny, &RenderConfig { white_background: true, ..Default::default() }).unwrap();
    assert_eq!(img.data.len(), 12);
}

#[test]
fn rendering_is_deterministic() {
    let field = desk_field();
    let cam = look_at_origin(Vec3::new(0.0, 4.0, 1.0));
    let a = render_image(&field, &cam, &RenderConfig::default()).unwrap();
    let b = render_image(&field, &cam, &RenderConfig::default()).unwrap();
    assert_eq!(a, b);
    let ray = cam.pixel_ray(3, 5);
    let sel = field.select_probes(&cam.position());
    let cfg = RenderConfig { jitter: false, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r1 = render_ray(&field, &sel, &ray, &cfg, &mut rng).unwrap();
    let r2 = render_ray(&field, &sel, &ray, &cfg, &mut rng).unwrap();
    assert_eq!(r1, r2);
}

/// Coarse-to-fine marching through an analytic sphere classifies hits and
/// misses like exact ray-sphere intersection.
#[test]
fn analytic_sphere_opacity_matches_intersection() {
    let (center, radius, amp) = (Vec3::zeros(), 1.0, 40.0);
    let cam = CameraModel { width: 48, height: 48, cx: 24.0, cy: 24.0, fx: 30.0, fy: 30.0, ..look_at_origin(Vec3::new(4.0, 0.0, 1.0)) };
    let cfg = RenderConfig { jitter: false, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut cs, mut fs) = (RaySampleSet::<f64>::default(), RaySampleSet::default());
    let (mut correct, mut total) = (0, 0);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.pixel_ray(x, y);
            let (passes, _) = march_ray(&ray, &cfg, &mut rng, None, &mut cs, &mut fs, |_, set| {
                set.sigma = set.points.iter().map(|p| if (p - center).norm() < radius { amp } else { 0.0 }).collect();
                set.rgb = vec![0.5; set.points.len() * 3];
                Ok(())
            })
            .unwrap();
            let oc = ray.origin - center;
            let b = oc.dot(&ray.dir);
            let hit = b * b - (oc.norm_squared() - radius * radius) > 0.0;
            correct += usize::from((passes.fine.opacity > 0.5) == hit);
            total += 1;
        }
    }
    assert!(correct as f64 >= 0.99 * total as f64, "{correct}/{total}");
}

#[test]
fn fine_pass_concentrates_near_surface() {
    let cam = look_at_origin(Vec3::new(4.0, 0.0, 0.0));
    let ray = cam.pixel_ray(4, 4);
    let cfg = RenderConfig { jitter: false, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut cs, mut fs) = (RaySampleSet::<f64>::default(), RaySampleSet::default());
    let (_, plan) = march_ray(&ray, &cfg, &mut rng, None, &mut cs, &mut fs, |_, set| {
        set.sigma = set.points.iter().map(|p| if p.norm() < 1.0 { 30.0 } else { 0.0 }).collect();
        set.rgb = vec![0.5; set.points.len() * 3];
        Ok(())
    })
    .unwrap();
    let fine = plan.fine.unwrap();
    let near_surface = fine.iter().filter(|t| (**t - 3.0).abs() < 0.5).count();
    assert!(near_surface >= cfg.n_fine / 2, "{near_surface}");
}
