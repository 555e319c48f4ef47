use lbsplat_core::corrective::{neutral_set, GaussianSet};
use lbsplat_core::pipeline::anchor_rest;
use lbsplat_core::render::*;
use lbsplat_core::skinning::{pose_to_joint_transforms, skin_gaussians};
use lbsplat_core::synth::random_avatar;
use lbsplat_core::{ModelConfig, Pose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn axis_camera(w: u32, h: u32) -> Camera {
    Camera {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
        fx: 500.0,
        fy: 500.0,
        cx: w as f32 / 2.0,
        cy: h as f32 / 2.0,
        width: w,
        height: h,
        near: 0.1,
        far: 100.0,
    }
}

fn one(pos: [f32; 3], rot: [f32; 4], scale: [f32; 3]) -> GaussianSet {
    GaussianSet {
        positions: vec![pos],
        rotations: vec![rot],
        scales: vec![scale],
        colors: vec![[0.2, 0.4, 0.6]],
        opacities: vec![0.8],
    }
}

fn splat(mean: [f32; 2], sigma: f32, depth: f32, color: [f32; 3], opacity: f32) -> Splat2D {
    let inv = 1.0 / (sigma * sigma);
    Splat2D {
        mean,
        conic: [inv, 0.0, inv],
        extent: [3.0 * sigma; 2],
        depth,
        color,
        opacity,
    }
}

#[test]
fn isotropic_footprint_matches_pinhole_formula() {
    let cam = axis_camera(256, 256);
    let (sigma, z) = (0.1, 5.0);
    let s = project_gaussians(&one([0.0, 0.0, z], [0.0, 0.0, 0.0, 1.0], [sigma; 3]), &cam).unwrap();
    let cov = s[0].covariance();
    let expect = (cam.fx * sigma / z).powi(2);
    assert!((cov[0] / expect - 1.0).abs() < 0.01 && (cov[2] / expect - 1.0).abs() < 0.01);
    assert!(cov[1].abs() < 1e-3 * expect);
    assert_eq!(s[0].mean, [128.0, 128.0]);

    let near = project_gaussians(&one([0.0, 0.0, 4.0], [0.0, 0.0, 0.0, 1.0], [0.2; 3]), &cam).unwrap();
    let far = project_gaussians(&one([0.0, 0.0, 8.0], [0.0, 0.0, 0.0, 1.0], [0.2; 3]), &cam).unwrap();
    let ratio = (near[0].covariance()[0] / far[0].covariance()[0]).sqrt();
    assert!((ratio - 2.0).abs() < 0.04, "{ratio}");
}

#[test]
fn behind_near_far_and_off_screen_are_culled() {
    let cam = axis_camera(64, 64);
    let id = [0.0, 0.0, 0.0, 1.0];
    for p in [[0.0, 0.0, -2.0], [0.0, 0.0, 0.05], [0.0, 0.0, 200.0], [50.0, 0.0, 2.0]] {
        assert!(
            project_gaussians(&one(p, id, [0.05; 3]), &cam).unwrap().is_empty(),
            "{p:?}"
        );
    }
    let mut bad = cam;
    bad.near = 0.0;
    assert!(project_gaussians(&one([0.0; 3], id, [0.1; 3]), &bad).is_err());
}

/// Screen covariance from a finite-difference Jacobian of the projection in
/// double precision.
fn numeric_covariance(cam: &Camera, p: [f32; 3], sigma_world: [[f64; 3]; 3]) -> [f64; 3] {
    let proj = |q: [f64; 3]| -> [f64; 2] {
        let r = cam.rotation;
        let c: Vec<f64> = (0..3)
            .map(|i| cam.translation[i] as f64 + (0..3).map(|j| r[i][j] as f64 * q[j]).sum::<f64>())
            .collect();
        [
            cam.fx as f64 * c[0] / c[2] + cam.cx as f64,
            cam.fy as f64 * c[1] / c[2] + cam.cy as f64,
        ]
    };
    let h = 1e-6;
    let mut jac = [[0f64; 3]; 2];
    for j in 0..3 {
        let mut a = p.map(|v| v as f64);
        let mut b = a;
        a[j] += h;
        b[j] -= h;
        let (pa, pb) = (proj(a), proj(b));
        for i in 0..2 {
            jac[i][j] = (pa[i] - pb[i]) / (2.0 * h);
        }
    }
    let mut out = [[0f64; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    out[i][k] += jac[i][a] * sigma_world[a][b] * jac[k][b];
                }
            }
        }
    }
    [out[0][0] + 0.3, out[0][1], out[1][1] + 0.3]
}

#[test]
fn projection_matches_numeric_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cam = Camera::look_at([0.4, 1.2, 3.0], [0.0, 0.9, 0.0], [0.0, 1.0, 0.0], 0.7, 320, 240);
    for _ in 0..200 {
        let p = [
            rng.random_range(-0.3..0.3),
            rng.random_range(0.6..1.2),
            rng.random_range(-0.3..0.3),
        ];
        let q = glam::Quat::from_xyzw(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let s = [0; 3].map(|_: i32| rng.random_range(0.005f32..0.05));
        let g = one(p, q.to_array(), s);
        let Some(splat) = project_gaussians(&g, &cam).unwrap().pop() else {
            panic!("visible Gaussian culled")
        };
        let r = glam::DMat3::from_quat(q.as_dquat());
        let d = glam::DMat3::from_diagonal(glam::DVec3::new(s[0] as f64, s[1] as f64, s[2] as f64));
        let sig = r * d * d * r.transpose();
        let sig = [0, 1, 2].map(|i| [0, 1, 2].map(|j| sig.col(j)[i]));
        let expect = numeric_covariance(&cam, p, sig);
        let got = splat.covariance();
        let scale = expect[0].max(expect[2]);
        for c in 0..3 {
            assert!(
                (got[c] as f64 - expect[c]).abs() <= 2e-3 * scale,
                "{got:?} vs {expect:?}"
            );
        }
    }
}

#[test]
fn compositing_closed_forms() {
    let empty = rasterize_cpu(&[], 8, 8);
    assert!(empty.pixels.iter().all(|p| *p == [0.0; 4]));

    let s = splat([4.5, 4.5], 1.0, 1.0, [0.2, 0.4, 0.6], 0.7);
    let img = rasterize_cpu(&[s], 9, 9);
    let c = img.get(4, 4);
    assert_eq!(c[3], 0.7);
    assert_eq!(&c[..3], &[0.2 * 0.7, 0.4 * 0.7, 0.6 * 0.7]);

    let red = splat([4.5, 4.5], 2.0, 1.0, [1.0, 0.0, 0.0], 0.5);
    let blue = splat([4.5, 4.5], 2.0, 2.0, [0.0, 0.0, 1.0], 1.0);
    for order in [[red, blue], [blue, red]] {
        let c = rasterize_cpu(&order, 9, 9).get(4, 4);
        assert_eq!(c, [0.5, 0.0, 0.5, 1.0]);
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, w: u32, h: u32) -> Vec<Splat2D> {
    (0..n)
        .map(|_| {
            let sx: f32 = rng.random_range(0.5..8.0);
            let sy: f32 = rng.random_range(0.5..8.0);
            let rho: f32 = rng.random_range(-0.8..0.8);
            let cov = [sx * sx, rho * sx * sy, sy * sy];
            let det = cov[0] * cov[2] - cov[1] * cov[1];
            Splat2D {
                mean: [
                    rng.random_range(-10.0..w as f32 + 10.0),
                    rng.random_range(-10.0..h as f32 + 10.0),
                ],
                conic: [cov[2] / det, -cov[1] / det, cov[0] / det],
                extent: [3.0 * sx, 3.0 * sy],
                depth: rng.random_range(0.5..10.0),
                color: [0; 3].map(|_: i32| rng.random_range(0.0..1.0)),
                opacity: rng.random_range(0.05..1.0),
            }
        })
        .collect()
}

#[test]
fn tiled_rasterizer_is_identical_to_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let (w, h) = (rng.random_range(1..80), rng.random_range(1..80));
        let n = rng.random_range(0..400);
        let scene = random_scene(&mut rng, n, w, h);
        let a = rasterize_cpu(&scene, w, h);
        let b = rasterize_tiled(&scene, w, h);
        assert_eq!(a, b, "case {case}");
        assert_eq!(a, rasterize_cpu(&scene, w, h));
        for p in &a.pixels {
            assert!((0.0..=1.0).contains(&p[3]));
        }
    }
}

#[test]
fn tile_lists_cover_every_contributing_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (70, 45);
    let scene = random_scene(&mut rng, 300, w, h);
    let bins = bin_splats(&scene, w, h);
    assert!(bins.keys.windows(2).all(|k| k[0] <= k[1]));
    for y in 0..h {
        for x in 0..w {
            let tile = (y / TILE_SIZE * bins.tiles_x + x / TILE_SIZE) as usize;
            let [a, b] = bins.ranges[tile];
            let list = &bins.values[a as usize..b as usize];
            for (i, s) in scene.iter().enumerate() {
                if s.alpha_at(x as f32 + 0.5, y as f32 + 0.5).is_some() {
                    assert!(list.contains(&(i as u32)));
                }
            }
        }
    }
}

#[test]
fn input_order_does_not_change_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let mut scene = random_scene(&mut rng, 150, 48, 48);
        let base = rasterize_cpu(&scene, 48, 48);
        for k in (1..scene.len()).rev() {
            scene.swap(k, rng.random_range(0..=k));
        }
        assert_eq!(rasterize_cpu(&scene, 48, 48), base);
        assert_eq!(rasterize_tiled(&scene, 48, 48), base);
    }
}

#[test]
fn adding_a_gaussian_behind_the_camera_changes_nothing() {
    let model = random_avatar(&ModelConfig::tiny(), 1).unwrap();
    let cam = Camera::front(64, 96);
    let mut set = neutral_set(&model.neutral);
    let before = rasterize_cpu(&project_gaussians(&set, &cam).unwrap(), 64, 96);
    set.positions.push([0.0, 0.9, 9.0]);
    set.rotations.push([0.0, 0.0, 0.0, 1.0]);
    set.scales.push([1.0; 3]);
    set.colors.push([1.0; 3]);
    set.opacities.push(1.0);
    let after = rasterize_cpu(&project_gaussians(&set, &cam).unwrap(), 64, 96);
    assert_eq!(before, after);
    assert!(before.pixels.iter().any(|p| p[3] > 0.5), "avatar not in view");
}

#[test]
fn static_frames_are_bit_identical_and_timings_are_sane() {
    let mut model = random_avatar(&ModelConfig::tiny(), 2).unwrap();
    anchor_rest(&mut model).unwrap();
    let cam = Camera::front(96, 128);
    let pose = Pose::zeros(&model.config);
    let t = std::time::Instant::now();
    let (a, ta) = render_frame(&model, &pose, &cam).unwrap();
    let wall = t.elapsed().as_secs_f64() * 1e3;
    assert!(ta.total_ms() <= wall * 1.1 + 1e-3);
    assert!(ta.stages().iter().all(|s| s.1 >= 0.0));
    let (b, _) = render_frame(&model, &pose, &cam).unwrap();
    assert_eq!(a, b);

    // The rest pose renders the neutral Gaussians.
    let transforms = pose_to_joint_transforms(&model.skeleton, &pose.theta_p).unwrap();
    let neutral = neutral_set(&model.neutral);
    let rest = skin_gaussians(
        &neutral,
        &model.neutral.skin_joints,
        &model.neutral.skin_weights,
        &transforms,
    )
    .unwrap();
    assert_eq!(rest, neutral);
    assert_eq!(rasterize_cpu(&project_gaussians(&neutral, &cam).unwrap(), 96, 128), a);
}

#[test]
fn camera_json_round_trip() {
    let cam = Camera::front(640, 480);
    let text = serde_json::to_string(&cam).unwrap();
    assert_eq!(serde_json::from_str::<Camera>(&text).unwrap(), cam);
}

proptest! {
    #[test]
    fn radix_sort_is_a_stable_sort(keys in prop::collection::vec(any::<u64>().prop_map(|k| k & 0x0000_0fff_ffff_ff0f), 0..300)) {
        let mut k = keys.clone();
        let mut v: Vec<u32> = (0..keys.len() as u32).collect();
        radix_sort_pairs(&mut k, &mut v);
        let mut expect: Vec<(u64, u32)> = keys.iter().copied().zip(0..).collect();
        expect.sort_by_key(|p| p.0);
        prop_assert_eq!(k, expect.iter().map(|p| p.0).collect::<Vec<_>>());
        prop_assert_eq!(v, expect.iter().map(|p| p.1).collect::<Vec<_>>());
    }

    #[test]
    fn sortable_depth_preserves_order(a in -1e6f32..1e6, b in -1e6f32..1e6) {
        prop_assert_eq!(a.total_cmp(&b), sortable_depth(a).cmp(&sortable_depth(b)));
    }
}
