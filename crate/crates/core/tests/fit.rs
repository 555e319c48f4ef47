use lbsplat_core::fit::{fit_part_mlp, fit_part_mlps, FitConfig};
use lbsplat_core::pose::init_part_mlp;
use lbsplat_core::{mlp_forward, Error, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_inputs(n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Normal::new(0.0, 0.2).unwrap();
    let expr = Normal::new(0.0, 0.5).unwrap();
    (0..n)
        .map(|_| {
            (0..73)
                .map(|i| {
                    if i < 63 {
                        body.sample(&mut rng)
                    } else {
                        expr.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f32>]) -> Array2<f32> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(r, c)| rows[r][c])
}

#[test]
fn self_distillation_reaches_heldout_mse() {
    let shapes = ModelConfig::desk().mlp_shapes();
    let teacher = init_part_mlp(&shapes, &mut ChaCha8Rng::seed_from_u64(100));
    let inputs = random_inputs(20000, 7);
    let targets: Vec<Vec<f32>> = inputs.iter().map(|x| mlp_forward(&teacher, x).unwrap()).collect();
    let split = inputs.len() * 4 / 5;
    let x = to_matrix(&inputs[..split]);
    let y = to_matrix(&targets[..split]).mapv(|v| v as f64);
    let (student, _) = fit_part_mlp(
        &x,
        &y,
        &shapes,
        &FitConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(200),
    )
    .unwrap();
    let mut se = 0f64;
    for (xi, yi) in inputs[split..].iter().zip(&targets[split..]) {
        let p = mlp_forward(&student, xi).unwrap();
        se += p.iter().zip(yi).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    let heldout = se / ((inputs.len() - split) * 16) as f64;
    let mut var = 0f64;
    for c in 0..16 {
        let m: f64 = targets.iter().map(|t| t[c] as f64).sum::<f64>() / targets.len() as f64;
        var += targets.iter().map(|t| (t[c] as f64 - m).powi(2)).sum::<f64>() / targets.len() as f64 / 16.0;
    }
    eprintln!("held-out mse {heldout:.3e}, target variance {var:.3e}");
    assert!(heldout <= 1e-3, "held-out mse {heldout}");
    assert!(heldout <= 0.1 * var, "held-out mse {heldout} vs variance {var}");
}

#[test]
fn constant_targets_are_solved_by_bias() {
    let shapes = ModelConfig::tiny().mlp_shapes();
    let inputs = random_inputs(64, 1);
    let x = to_matrix(&inputs);
    let y = Array2::from_shape_fn((64, 16), |(_, c)| c as f64 * 0.25 - 1.0);
    let (mlp, stats) = fit_part_mlp(
        &x,
        &y,
        &shapes,
        &FitConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    assert!(stats.mse <= 1e-8);
    let out = mlp_forward(&mlp, &inputs[5]).unwrap();
    for (c, v) in out.iter().enumerate() {
        assert!((*v as f64 - (c as f64 * 0.25 - 1.0)).abs() < 1e-4);
    }
}

#[test]
fn repeated_sample_is_interpolated() {
    let shapes = ModelConfig::tiny().mlp_shapes();
    let one = random_inputs(1, 2).pop().unwrap();
    let inputs = vec![one.clone(); 40];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets = vec![Array2::from_shape_fn((40, 16), |(_, c)| target[c])];
    let (w, stats) = fit_part_mlps(&inputs, &targets, &[true], 63, &shapes, &FitConfig::default(), 9).unwrap();
    assert!(stats[0].mse <= 1e-8);
    let out = mlp_forward(&w.parts[0], &one).unwrap();
    for (a, b) in out.iter().zip(&target) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn too_few_samples_is_a_precondition_error() {
    let shapes = ModelConfig::tiny().mlp_shapes();
    let inputs = random_inputs(31, 2);
    let targets = vec![Array2::zeros((31, 16))];
    let err = fit_part_mlps(&inputs, &targets, &[false], 63, &shapes, &FitConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn fitting_is_deterministic() {
    let shapes = ModelConfig::tiny().mlp_shapes();
    let inputs = random_inputs(64, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let targets = vec![Array2::from_shape_fn((64, 16), |_| rng.random_range(-1.0..1.0)); 2];
    let cfg = FitConfig {
        iterations: 50,
        ..FitConfig::default()
    };
    let a = fit_part_mlps(&inputs, &targets, &[false, true], 63, &shapes, &cfg, 1).unwrap();
    let b = fit_part_mlps(&inputs, &targets, &[false, true], 63, &shapes, &cfg, 1).unwrap();
    assert_eq!(a.0, b.0);
}
