use super::*;
use crate::grids::VectorGrid;

fn ring_views(n: usize, size: usize, color: [f32; 3]) -> Vec<TrainView> {
    (0..n)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / n as f64;
            let eye = Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.5);
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
            let h = size as f64 / 2.0;
            let camera = CameraModel::new(size as f64, size as f64, h, h, size, size, m, 0.5, 6.0).unwrap();
            TrainView { camera, image: Image::filled(size, size, color) }
        })
        .collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        iterations: 60,
        batch_rays: 48,
        chunk_rays: 16,
        upscale_milestones: vec![UpscaleMilestone { fraction: 0.5, core_vector_res: 7, core_matrix_res: [7, 16] }],
        field: FieldConfig {
            num_basis: 4,
            num_cores: 2,
            basis_neighbors: 2,
            core_neighbors: 1,
            components: 4,
            basis_components: 2,
            core_vector_res: 4,
            core_matrix_res: [4, 8],
            basis_matrix_res: [8, 16],
            decoder_width: 16,
            geo_features: 4,
            ..FieldConfig::desk()
        },
        render: RenderConfig { n_coarse: 8, n_fine: 4, ..RenderConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-2);
    assert!((lr_at(1999, &cfg) - 3.5e-4).abs() < 1e-9);
    assert!((lr_at(1800, &cfg) - 3.5e-4).abs() < 1e-9);
    let drop = lr_at(1000, &cfg) / lr_at(999, &cfg);
    assert!((drop - 0.32711).abs() < 1e-5);
    assert!((lr_at(1500, &cfg) / lr_at(1499, &cfg) - drop).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for it in 0..cfg.iterations {
        let lr = lr_at(it, &cfg);
        assert!(lr <= prev && (cfg.lr_final..=cfg.lr_init).contains(&lr));
        prev = lr;
    }
}

#[test]
fn loss_examples() {
    assert_eq!(photometric_loss(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
    let t: Vec<f64> = (0..30).map(|i| i as f64 / 40.0).collect();
    let p: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
    assert!((photometric_loss(&p, &t).unwrap() - 0.01).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
    let b: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
    let mut sse = 0.0;
    for i in 0..a.len() {
        sse += (a[i] - b[i]) * (a[i] - b[i]);
    }
    assert!((photometric_loss(&a, &b).unwrap() - sse / 300.0).abs() < 1e-12);
    assert!(photometric_loss(&a, &b[..2]).is_err());
}

#[test]
fn ablation_names() {
    for name in ABLATIONS {
        let mut cfg = TrainConfig::default();
        cfg.apply_ablation(name).unwrap();
        cfg.validate().unwrap();
    }
    assert!(TrainConfig::default().apply_ablation("nope").is_err());
}

#[test]
fn constant_scene_loss_decreases_and_grads_are_cleared() {
    let cfg = TrainConfig { iterations: 200, ..tiny_config() };
    let mut t: Trainer<f32> = Trainer::new(cfg, ring_views(8, 8, [0.8, 0.3, 0.1])).unwrap();
    let first = t.step().unwrap().total;
    assert!(t.field.grads_are_zero());
    let mut last = first;
    while !t.is_done() {
        last = t.step().unwrap().total;
        assert!(t.field.grads_are_zero());
    }
    assert!(last < first * 0.5, "{first} -> {last}");
    assert_eq!(t.field.probes.core_vectors[0].resolution, 7);
    assert_eq!(t.state.adam[0].1.m.len(), t.field.probes.core_vectors[0].values.len());
}

#[test]
fn training_is_bitwise_reproducible() {
    let run = |cfg: TrainConfig| {
        let mut t: Trainer<f32> = Trainer::new(cfg, ring_views(6, 8, [0.2, 0.5, 0.9])).unwrap();
        let mut losses = Vec::new();
        t.run(|_, _, l, _| {
            losses.push(l.total.to_bits());
            Ok(())
        })
        .unwrap();
        (losses, t.field)
    };
    let (a, fa) = run(tiny_config());
    let (b, fb) = run(tiny_config());
    assert_eq!(a, b);
    assert_eq!(fa, fb);
    // The chunked reduction does not depend on the worker count.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (c, _) = pool.install(|| run(tiny_config()));
    assert_eq!(a, c);
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let mut cfg = tiny_config();
    cfg.render.jitter = false;
    let views = ring_views(4, 6, [0.6, 0.4, 0.2]);
    let positions: Vec<Vec3> = views.iter().map(|v| v.camera.position()).collect();
    let mut field: ProbeField<f64> = ProbeField::initialize(cfg.field.clone(), &positions).unwrap();
    let sels: Vec<ProbeSelection> = views.iter().map(|v| field.select_probes(&v.camera.position())).collect();
    let rays: Vec<RaySpec> = (0..20).map(|i| RaySpec { view: 1, x: i % 6, y: (i * 7) % 6 }).collect();
    let chunks = rays.len().div_ceil(cfg.chunk_rays);
    let mut grads: Vec<FieldGrads<f64>> = (0..chunks).map(|_| field.zero_grads()).collect();
    let (_, plans) = batch_loss_and_grads(&field, &views, &sels, &rays, &cfg, 3, None, &mut grads).unwrap();
    for g in &grads {
        field.absorb_grads(g);
    }
    let loss = |f: &ProbeField<f64>| {
        let mut g: Vec<FieldGrads<f64>> = (0..chunks).map(|_| f.zero_grads()).collect();
        batch_loss_and_grads(f, &views, &sels, &rays, &cfg, 3, Some(&plans), &mut g).unwrap().0.total
    };
    let mut candidates = Vec::new();
    field.visit_params_mut(&mut |name, _, _, g| {
        for (i, v) in g.iter().enumerate() {
            if *v != 0.0 {
                candidates.push((name.to_string(), i, *v));
            }
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for _ in 0..20 {
        let (name, idx, analytic) = candidates[rng.gen_range(0..candidates.len())].clone();
        let mut f = field.clone();
        let bump = |f: &mut ProbeField<f64>, d: f64| {
            f.visit_params_mut(&mut |n, _, v, _| {
                if n == name {
                    v[idx] += d;
                }
            })
        };
        bump(&mut f, h);
        let plus = loss(&f);
        bump(&mut f, -2.0 * h);
        let minus = loss(&f);
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        assert!(rel < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
    }
}

#[test]
fn nested_upscale_preserves_functions_and_moments() {
    let mut cfg = tiny_config();
    cfg.field.core_vector_res = 4;
    let views = ring_views(4, 6, [0.5; 3]);
    let mut t: Trainer<f64> = Trainer::new(cfg, views).unwrap();
    t.step().unwrap();
    let before_v = t.field.probes.core_vectors[1].clone();
    let before_m = t.field.probes.core_matrices[0].clone();
    let moment_before = VectorGrid::from_values(4, 4, t.state.adam[1].1.m.clone()).unwrap();
    upscale_cores(&mut t.field, &mut t.state, 7, [7, 16]).unwrap();
    let after_v = &t.field.probes.core_vectors[1];
    let after_m = &t.field.probes.core_matrices[0];
    let moment_after = VectorGrid::from_values(7, 4, t.state.adam[1].1.m.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (u, w) = (rng.gen::<f64>(), rng.gen::<f64>());
        for (a, b) in before_v.interp(u).iter().zip(after_v.interp(u)) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in before_m.interp(u, w).iter().zip(after_m.interp(u, w)) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in moment_before.interp(u).iter().zip(moment_after.interp(u)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(t.field.parameter_count(), t.field.config.expected_parameter_count());
    assert!(upscale_cores(&mut t.field, &mut t.state, 5, [7, 16]).is_err());
    // Training continues with resized buffers.
    t.reset_chunk_grads();
    t.step().unwrap();
}

#[test]
fn no_milestones_leave_grids_untouched() {
    let cfg = TrainConfig { upscale_milestones: vec![], iterations: 5, ..tiny_config() };
    let mut t: Trainer<f32> = Trainer::new(cfg, ring_views(4, 6, [0.5; 3])).unwrap();
    t.run(|_, _, _, _| Ok(())).unwrap();
    assert_eq!(t.field.probes.core_vectors[0].resolution, 4);
    assert_eq!(t.field.probes.core_matrices[0].width, 8);
}
