use lbsplat_core::pca::*;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn centered(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    x - &mean
}

fn naive_l1(x: &Array2<f64>, r: &PcaResult) -> f64 {
    let (f, d) = x.dim();
    let mut total = 0.0;
    for i in 0..f {
        for j in 0..d {
            let mut v = r.mean[j];
            for c in 0..r.k() {
                v += r.coefficients[[i, c]] * r.basis[[c, j]];
            }
            total += (x[[i, j]] - v).abs();
        }
    }
    total / (f * d) as f64
}

#[test]
fn rank_one_is_recovered_exactly() {
    let a = random(30, 1, 1);
    let b = random(1, 40, 2);
    let x = a.dot(&b) + 0.5;
    let r = pca(x.view(), 1).unwrap();
    assert!((r.explained_ratio[0] - 1.0).abs() < 1e-9);
    assert!(reconstruction_error_l1(x.view(), &r).unwrap() <= 1e-6);
}

#[test]
fn equal_energy_orthogonal_rows() {
    let f = 6;
    let mut x = Array2::zeros((f, 10));
    for i in 0..f {
        x[[i, i]] = 3.0;
    }
    let r = pca(x.view(), f).unwrap();
    for j in 0..f - 1 {
        assert!((r.explained_ratio[j] - 1.0 / (f - 1) as f64).abs() < 1e-9);
    }
    assert!(r.explained_ratio[f - 1].abs() < 1e-9);
}

#[test]
fn basis_matches_covariance_eigendecomposition() {
    let x = random(50, 200, 3);
    let k = 8;
    let r = pca(x.view(), k).unwrap();
    let xc = centered(&x);
    let cov = xc.t().dot(&xc);
    let m = nalgebra::DMatrix::from_fn(200, 200, |i, j| cov[[i, j]]);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..200).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().sum();
    for (j, &e) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(e);
        let dot: f64 = (0..200).map(|i| v[i] * r.basis[[j, i]]).sum();
        let sign = dot.signum();
        for i in 0..200 {
            assert!((sign * v[i] - r.basis[[j, i]]).abs() < 1e-5, "basis row {j}");
        }
        for row in 0..50 {
            let c: f64 = (0..200).map(|i| xc[[row, i]] * v[i]).sum::<f64>() * sign;
            assert!((c - r.coefficients[[row, j]]).abs() < 1e-5);
        }
        assert!((r.explained_ratio[j] - eig.eigenvalues[e] / total).abs() < 1e-9);
    }
}

#[test]
fn invariants_of_the_result() {
    let x = random(40, 30, 4);
    let r = pca(x.view(), 20).unwrap();
    let gram = r.basis.dot(&r.basis.t());
    for i in 0..20 {
        for j in 0..20 {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((gram[[i, j]] - expect).abs() < 1e-5);
        }
    }
    assert!(r.explained_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    assert!(r.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    for j in 0..20 {
        let row = r.basis.row(j);
        let big = row
            .iter()
            .copied()
            .fold(0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(big > 0.0, "sign convention");
    }
    // Projection fixpoint.
    let recon = r.reconstruct();
    let again = pca(recon.view(), 20).unwrap();
    assert!(reconstruction_error_l1(recon.view(), &again).unwrap() <= 1e-6);
}

#[test]
fn precondition_errors() {
    let x = random(5, 8, 5);
    assert!(pca(x.view(), 6).is_err());
    let mut bad = x.clone();
    bad[[0, 0]] = f64::NAN;
    assert!(pca(bad.view(), 2).is_err());
    let r = pca(x.view(), 2).unwrap();
    assert!(reconstruction_error_l1(x.slice(s![..4, ..]), &r).is_err());
}

#[test]
fn l1_error_oracles() {
    for seed in 0..10 {
        let x = random(20, 15, 10 + seed);
        for k in [0, 3, 7] {
            let r = pca(x.view(), k).unwrap();
            let got = reconstruction_error_l1(x.view(), &r).unwrap();
            assert!((got - naive_l1(&x, &r)).abs() <= 1e-8);
        }
        let r0 = pca(x.view(), 0).unwrap();
        let xc = centered(&x);
        let baseline = xc.iter().map(|v| v.abs()).sum::<f64>() / xc.len() as f64;
        assert!((reconstruction_error_l1(x.view(), &r0).unwrap() - baseline).abs() < 1e-12);
    }
    let low = random(25, 3, 30).dot(&random(3, 12, 31));
    let r = pca(low.view(), 3).unwrap();
    assert!(reconstruction_error_l1(low.view(), &r).unwrap() <= 1e-6);
}

#[test]
fn error_is_non_increasing_in_k() {
    let x = random(30, 24, 6);
    let errs: Vec<f64> = (0..=24)
        .map(|k| reconstruction_error_l1(x.view(), &pca(x.view(), k).unwrap()).unwrap())
        .collect();
    // PCA minimizes squared error; check that alongside L1.
    let sq: Vec<f64> = (0..=24)
        .map(|k| {
            let r = pca(x.view(), k).unwrap();
            (&x - &r.reconstruct()).iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    assert!(sq.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errs:?}");
}

#[test]
fn single_group_equals_global() {
    let x = random(20, 30, 7);
    let all = vec![(0..30).collect::<Vec<_>>()];
    let local = local_pca_experiment(x.view(), &all, 5).unwrap();
    let global = pca(x.view(), 5).unwrap();
    assert!((local.pooled_error - reconstruction_error_l1(x.view(), &global).unwrap()).abs() < 1e-12);
    for (a, b) in local.mean_explained_ratio.iter().zip(&global.explained_ratio) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn grouping_preconditions() {
    let x = random(10, 9, 8);
    assert!(local_pca_experiment(x.view(), &[vec![0, 1, 2], vec![]], 2).is_err());
    assert!(local_pca_experiment(x.view(), &[vec![0, 1, 2, 3, 4, 5, 6, 7]], 2).is_err());
    assert!(local_pca_experiment(x.view(), &[(0..9).collect(), vec![0]], 2).is_err());
}

#[test]
fn exact_block_rank_is_recovered_locally_but_not_globally() {
    let p = BlockDataParams {
        frames: 60,
        groups: 6,
        gaussians_per_group: 8,
        rank: 4,
        snr_db: f64::INFINITY,
        seed: 1,
    };
    let (x, groups) = block_correlated_data(&p);
    let local = local_pca_experiment(x.view(), &groups, 4).unwrap();
    assert!(local.pooled_error <= 1e-6);
    let global = pca(x.view(), 4).unwrap();
    assert!(reconstruction_error_l1(x.view(), &global).unwrap() > 1e-2);
}

#[test]
fn true_grouping_beats_random_groupings() {
    let p = BlockDataParams {
        frames: 60,
        groups: 8,
        gaussians_per_group: 16,
        rank: 4,
        snr_db: 20.0,
        seed: 2,
    };
    let (x, groups) = block_correlated_data(&p);
    let truth = local_pca_experiment(x.view(), &groups, 4).unwrap().pooled_error;
    for seed in 0..20 {
        let rg = random_grouping(x.ncols(), p.groups, seed).unwrap();
        let e = local_pca_experiment(x.view(), &rg, 4).unwrap().pooled_error;
        assert!(truth < e, "seed {seed}: {truth} vs {e}");
    }
}

#[test]
fn locality_ordering_on_block_correlated_data() {
    let p = BlockDataParams::default();
    let (x, groups) = block_correlated_data(&p);
    let all = vec![(0..x.ncols()).collect::<Vec<_>>()];
    let g16 = local_pca_experiment(x.view(), &all, 16).unwrap();
    let g64 = local_pca_experiment(x.view(), &all, 64).unwrap();
    let l16 = local_pca_experiment(x.view(), &groups, 16).unwrap();
    let r16 = local_pca_experiment(x.view(), &random_grouping(x.ncols(), 64, 9).unwrap(), 16).unwrap();
    assert!(l16.pooled_error < g64.pooled_error);
    assert!(g64.pooled_error < g16.pooled_error);
    assert!((r16.pooled_error - g16.pooled_error).abs() <= 0.15 * g16.pooled_error);
    let top4 = |r: &LocalPcaReport| r.mean_explained_ratio[..4].iter().sum::<f64>();
    assert!(top4(&l16) > top4(&g16));
}

#[test]
fn random_grouping_properties() {
    let a = random_grouping(300, 7, 3).unwrap();
    assert_eq!(a, random_grouping(300, 7, 3).unwrap());
    let mut seen = vec![false; 300];
    for g in &a {
        assert!((14..=15).contains(&(g.len() / 3)));
        for chunk in g.chunks(3) {
            assert_eq!(chunk[0] % 3, 0);
            assert_eq!(chunk, [chunk[0], chunk[0] + 1, chunk[0] + 2]);
        }
        g.iter().for_each(|&c| seen[c] = true);
    }
    assert!(seen.iter().all(|&s| s));
    let singles = random_grouping(30, 10, 0).unwrap();
    assert!(singles.iter().all(|g| g.len() == 3));
    assert!(random_grouping(30, 11, 0).is_err());
    assert!(random_grouping(31, 2, 0).is_err());
}

#[test]
fn random_grouping_assignment_is_uniform() {
    // Which group each Gaussian lands in over 1000 seeds; chi-square against
    // the uniform assignment with 7 degrees of freedom.
    let (items, groups, seeds) = (40, 8, 1000);
    let mut counts = vec![vec![0f64; groups]; items];
    for seed in 0..seeds {
        for (g, cols) in random_grouping(items * 3, groups, seed).unwrap().iter().enumerate() {
            for c in cols.iter().step_by(3) {
                counts[c / 3][g] += 1.0;
            }
        }
    }
    let expected = seeds as f64 / groups as f64;
    let mut failures = 0;
    for row in &counts {
        let chi2: f64 = row.iter().map(|o| (o - expected).powi(2) / expected).sum();
        // p = 0.001 critical value.
        if chi2 > 24.32 {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} Gaussians failed the uniformity test");
}

#[test]
fn local_factorization_recovers_low_rank_stacks() {
    let stacks: Vec<Array2<f64>> = (0..3).map(|i| random(40, 3, i).dot(&random(3, 25, 100 + i))).collect();
    let facts = fit_local_blendshapes(&stacks, 5).unwrap();
    for (x, f) in stacks.iter().zip(&facts) {
        let err = (x - &f.reconstruct()).iter().map(|v| v.abs()).fold(0f64, f64::max);
        assert!(err <= 1e-6);
        assert_eq!(f.basis.dim(), (5, 25));
        for j in 3..5 {
            assert!(f.basis.row(j).iter().all(|&v| v == 0.0), "rank-deficient rows are zero");
        }
    }
    let zero = fit_local_blendshapes(&stacks, 0).unwrap();
    assert_eq!(zero[0].features.dim(), (40, 0));
    assert!(zero[0].basis.is_empty());
    assert!(fit_local_blendshapes(&[random(3, 10, 1)], 4).is_err());
}

#[test]
fn local_factorization_meets_the_eckart_young_optimum() {
    for seed in 0..5 {
        let x = random(30, 18, 200 + seed);
        let k = 6;
        let f = &fit_local_blendshapes(std::slice::from_ref(&x), k).unwrap()[0];
        let resid: f64 = (&x - &f.reconstruct()).iter().map(|v| v * v).sum();
        let m = nalgebra::DMatrix::from_fn(30, 18, |i, j| x[[i, j]]);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let optimum: f64 = sv[k..].iter().map(|s| s * s).sum();
        assert!((resid - optimum).abs() <= 1e-6 * optimum.max(1.0));
    }
}
