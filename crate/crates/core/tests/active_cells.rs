mod common;

use approx::assert_relative_eq;
use ctf_core::active_cells::{estimate_j_with_z, DEFAULT_GRID};
use ctf_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::binom_se;

fn strong_cells(seed: u64, n_vars: usize, n_active_cells: usize) -> DatasetF64 {
    generate_dataset(&SimConfig {
        n_vars,
        cell_size: 10,
        n_samples: 400,
        n_active: n_active_cells,
        actives_per_cell: 1,
        coef: 1.0,
        var_x: 1.0,
        var_noise: 0.5,
        seed,
    })
    .unwrap()
}

#[test]
fn h_closed_form() {
    let (c, z, t, g, count) = (1.0f64, 0.5, 0.6, 1000usize, 640usize);
    let b = t * z + c;
    let root = (-b + (b * b + 4.0 * (1.0 - t) * (g - count) as f64).sqrt()) / (2.0 * (1.0 - t));
    assert_relative_eq!(
        h_i(c, z, t, count, g).unwrap(),
        root * root,
        max_relative = 1e-12
    );
}

#[test]
fn h_decreases_in_c() {
    for &t in &DEFAULT_GRID {
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let h = h_i(i as f64 * 0.25, 0.7, t, 600, 1000).unwrap();
            assert!(h <= prev);
            prev = h;
        }
    }
}

#[test]
fn noiseless_counts_recover_j() {
    let (g, j) = (1000usize, 50usize);
    for &t in &DEFAULT_GRID {
        let count = ((g - j) as f64 * t).round() as usize + j;
        let h = h_i(0.0, 0.0, t, count, g).unwrap();
        assert!((h - (g - j) as f64).abs() < 1e-8, "t = {t}: {h}");
    }
    // Counts on the exact mean line with C → 0 give Ĵ = J.
    let pvalues: Vec<f64> = (0..g)
        .map(|i| {
            if i < j {
                0.0
            } else {
                (i - j) as f64 / (g - j) as f64 + 1e-12
            }
        })
        .collect();
    let est = estimate_j_with_z(&pvalues, &DEFAULT_GRID, 1.0 - 1e-15, 0.0).unwrap();
    assert!(est.j_hat.abs_diff(j) <= 1, "Ĵ = {}", est.j_hat);
}

#[test]
fn estimate_record_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pvalues: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let est = estimate_j(&pvalues, &DEFAULT_GRID, 0.05, 7).unwrap();
    assert_eq!(est.grid, DEFAULT_GRID.to_vec());
    assert!(est.counts.windows(2).all(|w| w[0] <= w[1]));
    assert!(est.counts.iter().all(|&c| c <= 500));
    assert_relative_eq!(
        est.c,
        (-2.0 * 0.9 * 0.05f64.ln()).sqrt(),
        max_relative = 1e-14
    );
    assert!(est.j_hat <= 500);
    assert_eq!(est, estimate_j(&pvalues, &DEFAULT_GRID, 0.05, 7).unwrap());
    assert!(est.j_hat < 100, "null Ĵ = {}", est.j_hat);
    let text = serde_json::to_string(&est).unwrap();
    for key in ["grid", "counts", "z_draw", "\"c\"", "epsilon", "j_hat"] {
        assert!(text.contains(key));
    }
}

#[test]
fn j_hat_nonincreasing_in_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pvalues: Vec<f64> = (0..400)
        .map(|i| if i < 30 { 1e-9 } else { rng.random() })
        .collect();
    for &z in &[-1.5, 0.0, 0.8] {
        let mut prev = usize::MAX;
        for i in 1..50 {
            let eps = i as f64 / 50.0;
            let j = estimate_j_with_z(&pvalues, &DEFAULT_GRID, eps, z)
                .unwrap()
                .j_hat;
            assert!(j <= prev);
            prev = j;
        }
    }
}

#[test]
fn count_process_mean_and_covariance() {
    let (g, j, reps) = (200usize, 10usize, 2000usize);
    let (t1, t2) = (0.5, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut z1 = Vec::with_capacity(reps);
    let mut z2 = Vec::with_capacity(reps);
    for _ in 0..reps {
        let p: Vec<f64> = (0..g)
            .map(|i| if i < j { 0.0 } else { rng.random() })
            .collect();
        let c = dhat_counts(&p, &[t1, t2]);
        z1.push(c[0] as f64 - ((g - j) as f64 * t1 + j as f64));
        z2.push(c[1] as f64 - ((g - j) as f64 * t2 + j as f64));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var1 = (g - j) as f64 * t1 * (1.0 - t1);
    assert!(mean(&z1).abs() < 3.0 * (var1 / reps as f64).sqrt());
    let prods: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a * b).collect();
    let cov = mean(&prods) - mean(&z1) * mean(&z2);
    let want = (g - j) as f64 * (t1.min(t2) - t1 * t2);
    let m = mean(&prods);
    let sd = (prods.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    assert!(
        (cov - want).abs() < 3.0 * sd / (reps as f64).sqrt(),
        "cov {cov} want {want}"
    );
}

#[test]
fn cell_pvalue_behaviour() {
    let y = ndarray::Array1::from(vec![2.0; 8]);
    let x = ndarray::Array2::from_shape_fn((8, 2), |(i, j)| (i * (j + 1)) as f64 + (i % 3) as f64);
    let flat = Dataset::new(y, x, Partition::uniform(2, 2).unwrap())
        .unwrap()
        .with_sigma_y_sq(1.0)
        .unwrap();
    assert_eq!(cell_pvalue(&flat, 0).unwrap(), 1.0);

    let reps = 100;
    let strong = (0..reps)
        .filter(|&r| {
            let data: DatasetF64 = generate_dataset(&SimConfig {
                n_vars: 20,
                cell_size: 10,
                n_samples: 5000,
                n_active: 5,
                actives_per_cell: 5,
                coef: 1.0,
                var_x: 1.0,
                var_noise: 1.0,
                seed: 60 + r,
            })
            .unwrap();
            let a = data.partition().cell_of(data.true_active().unwrap()[0]);
            cell_pvalue(&data, a).unwrap() < 1e-6
        })
        .count();
    assert!(strong >= 99, "{strong}/{reps}");
}

#[test]
fn single_bound_matches_plain_run() {
    let data = strong_cells(5, 100, 1);
    let config = AdjustConfig {
        grid: DEFAULT_GRID.to_vec(),
        seed: 3,
        regime: AdjustRegime::Parametric {
            target: TargetRule::Default,
        },
    };
    let adj = adjusted_discovery(&data, 0.05, 0.05, &config).unwrap();
    assert_relative_eq!(adj.level, 0.1);
    for run in &adj.runs {
        assert!(adj.detected.iter().all(|v| run.detected.contains(v)));
    }
    if adj.estimate.j_hat <= 1 {
        let target = TargetRule::Default.target(data.n_samples(), 10, 1).unwrap();
        let th = optimize_thresholds(0.05, 100, 10, &target)
            .unwrap()
            .thresholds;
        assert_eq!(
            adj.detected,
            run_parametric_test(&data, &th).unwrap().detected
        );
    }
}

#[test]
fn intersection_is_contained_in_every_run() {
    let data = strong_cells(8, 200, 4);
    let config = AdjustConfig {
        grid: DEFAULT_GRID.to_vec(),
        seed: 1,
        regime: AdjustRegime::Parametric {
            target: TargetRule::Default,
        },
    };
    let adj = adjusted_discovery(&data, 0.05, 0.05, &config).unwrap();
    assert_eq!(adj.runs.len(), adj.estimate.j_hat.max(1));
    for run in &adj.runs {
        assert!(adj.detected.iter().all(|v| run.detected.contains(v)));
    }
    assert!(adj.estimate.j_hat >= 4, "Ĵ = {}", adj.estimate.j_hat);
}

#[test]
fn adjusted_null_fwer() {
    let reps = 300;
    let mut false_hits = 0;
    for r in 0..reps {
        let data = strong_cells(10_000 + r, 200, 0);
        let config = AdjustConfig {
            grid: DEFAULT_GRID.to_vec(),
            seed: 50_000 + r,
            regime: AdjustRegime::Parametric {
                target: TargetRule::Default,
            },
        };
        if !adjusted_discovery(&data, 0.05, 0.05, &config)
            .unwrap()
            .detected
            .is_empty()
        {
            false_hits += 1;
        }
    }
    let rate = false_hits as f64 / reps as f64;
    assert!(
        rate <= 0.1 + 3.0 * binom_se(0.1, reps as usize),
        "FWER {rate}"
    );
}

proptest! {
    #[test]
    fn h_satisfies_its_quadratic(c in 0.0f64..5.0, z in -4.0f64..4.0, t in 0.05f64..0.95,
                                 g in 10usize..5000, frac in 0.0f64..=1.0) {
        let count = (frac * g as f64).floor() as usize;
        let h = h_i(c, z, t, count, g).unwrap();
        let s = h.sqrt();
        let resid = count as f64 - g as f64 + (1.0 - t) * h + (t * z + c) * s;
        prop_assert!(h >= 0.0);
        prop_assert!(resid.abs() <= 1e-8 * (g as f64).max(1.0), "residual {}", resid);
    }

    #[test]
    fn counts_are_monotone(p in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let counts = dhat_counts(&p, &[0.1, 0.3, 0.5, 0.9, 1.0]);
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(counts[4], p.len());
    }
}
