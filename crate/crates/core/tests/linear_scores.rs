mod common;

use approx::assert_relative_eq;
use ctf_core::linear_scores::{read_dataset_csv, write_dataset_csv, write_partition_csv};
use ctf_core::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{chi2_cdf_quad, ks_pvalue, naive_excess_ss};

fn random_data(seed: u64, n: usize, p: usize, cell: usize) -> DatasetF64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
    let y = Array1::from_shape_fn(n, |i| {
        let e: f64 = StandardNormal.sample(&mut rng);
        0.7 * x[[i, 0]] - 0.4 * x[[i, 1]] + 2.0 + e
    });
    Dataset::new(y, x, Partition::uniform(p, cell).unwrap()).unwrap()
}

fn null_config(seed: u64) -> SimConfig {
    SimConfig {
        n_vars: 20,
        cell_size: 10,
        n_samples: 60,
        n_active: 0,
        actives_per_cell: 1,
        coef: 1.0,
        var_x: 1.0,
        var_noise: 1.0,
        seed,
    }
}

#[test]
fn scores_match_normal_equations() {
    let data = random_data(4, 80, 12, 4);
    let cols = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&v| data.x().column(v).to_vec()).collect()
    };
    let y = data.y().to_vec();
    let s2 = data.sigma_y_sq();
    for g in 0..data.partition().n_cells() {
        let want = naive_excess_ss(&y, &cols(data.partition().cell(g))) / s2;
        assert_relative_eq!(cell_score(&data, g).unwrap(), want, max_relative = 1e-9);
    }
    for v in 0..12 {
        let want = naive_excess_ss(&y, &cols(&[v])) / s2;
        assert_relative_eq!(variable_score(&data, v).unwrap(), want, max_relative = 1e-9);
    }
}

#[test]
fn projections_match_free_functions() {
    let data = random_data(5, 50, 20, 5);
    let proj = Projections::new(&data);
    for g in 0..4 {
        assert_relative_eq!(
            proj.cell_score(g).unwrap(),
            cell_score(&data, g).unwrap(),
            max_relative = 1e-10
        );
    }
    for v in 0..20 {
        assert_relative_eq!(
            proj.variable_score(v).unwrap(),
            variable_score(&data, v).unwrap(),
            max_relative = 1e-10
        );
    }
}

#[test]
fn nestedness_holds() {
    for seed in 0..20 {
        let data = random_data(100 + seed, 40, 15, 5);
        for g in 0..3 {
            let t_g = cell_score(&data, g).unwrap();
            for &v in data.partition().cell(g) {
                assert!(t_g >= variable_score(&data, v).unwrap() - 1e-9);
            }
        }
    }
}

#[test]
fn constant_column_is_singular() {
    let mut data_x = Array2::<f64>::zeros((10, 2));
    for i in 0..10 {
        data_x[[i, 0]] = i as f64;
        data_x[[i, 1]] = 3.0;
    }
    let y = Array1::from_shape_fn(10, |i| (i * i) as f64);
    let data = Dataset::new(y, data_x, Partition::uniform(2, 1).unwrap()).unwrap();
    assert!(variable_score(&data, 0).is_ok());
    assert!(matches!(
        variable_score(&data, 1),
        Err(CtfError::Singular { .. })
    ));
    assert!(matches!(
        cell_score(&data, 1),
        Err(CtfError::Singular { .. })
    ));
}

#[test]
fn null_scores_are_chi_square() {
    let reps = 2000;
    let mut cells = Vec::with_capacity(reps);
    let mut vars = Vec::with_capacity(reps);
    for r in 0..reps {
        let data: DatasetF64 = generate_dataset(&null_config(r as u64))
            .unwrap()
            .with_sigma_y_sq(1.0)
            .unwrap();
        cells.push(cell_score(&data, 0).unwrap());
        vars.push(variable_score(&data, 13).unwrap());
    }
    let p_cell = ks_pvalue(&mut cells, |x| chi2_cdf_quad(x, 10));
    let p_var = ks_pvalue(&mut vars, |x| chi2_cdf_quad(x, 1));
    assert!(p_cell > 0.01, "cell KS p = {p_cell}");
    assert!(p_var > 0.01, "variable KS p = {p_var}");
}

#[test]
fn response_variance_matches_model() {
    let cfg = SimConfig {
        n_vars: 100,
        cell_size: 10,
        n_samples: 5000,
        n_active: 5,
        actives_per_cell: 5,
        coef: 1.0,
        var_x: 1.0,
        var_noise: 10.0,
        seed: 9,
    };
    let data: DatasetF64 = generate_dataset(&cfg).unwrap();
    let y = data.y();
    let m = y.mean().unwrap();
    let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
    assert!((var - 15.0).abs() < 0.5, "var(y) = {var}");
    assert_eq!(data.true_active().unwrap().len(), 5);
    let cells: std::collections::BTreeSet<usize> = data
        .true_active()
        .unwrap()
        .iter()
        .map(|&v| data.partition().cell_of(v))
        .collect();
    assert_eq!(cells.len(), 1);
}

#[test]
fn null_response_variance() {
    let cfg = SimConfig {
        n_samples: 20_000,
        ..null_config(3)
    };
    let data: DatasetF64 = generate_dataset(&cfg).unwrap();
    assert!((data.sigma_y_sq() - 1.0).abs() < 0.05);
}

#[test]
fn generation_is_deterministic() {
    let a: DatasetF64 = generate_dataset(&null_config(17)).unwrap();
    let b: DatasetF64 = generate_dataset(&null_config(17)).unwrap();
    let c: DatasetF64 = generate_dataset(&null_config(18)).unwrap();
    assert_eq!(a.y(), b.y());
    assert_eq!(a.x(), b.x());
    assert_ne!(a.y(), c.y());
}

#[test]
fn f32_scores_track_f64() {
    let data: DatasetF64 = generate_dataset(&null_config(2)).unwrap();
    let data32 = Dataset::new(
        data.y().mapv(|v| v as f32),
        data.x().mapv(|v| v as f32),
        data.partition().clone(),
    )
    .unwrap();
    for g in 0..2 {
        let a = cell_score(&data32, g).unwrap() as f64;
        let b = cell_score(&data, g).unwrap();
        assert!((a - b).abs() <= 1e-3 * b.max(1.0));
    }
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: DatasetF64 = generate_dataset(&null_config(6)).unwrap();
    let (dp, pp) = (dir.path().join("d.csv"), dir.path().join("p.csv"));
    write_dataset_csv(&data, &dp).unwrap();
    write_partition_csv(&data, &pp).unwrap();
    let back: DatasetF64 = read_dataset_csv(&dp, &pp).unwrap();
    assert_eq!(back.y(), data.y());
    assert_eq!(back.x(), data.x());
    assert_eq!(back.partition().cells(), data.partition().cells());
    assert_eq!(back.variable_names(), data.variable_names());
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let (dp, pp) = (dir.path().join("d.csv"), dir.path().join("p.csv"));
    std::fs::write(&dp, "y,a,b\n1,2,3\n2,3,4\n3,x,5\n4,1,1\n").unwrap();
    std::fs::write(&pp, "variable_id,cell_id\na,g\nb,g\n").unwrap();
    match read_dataset_csv::<f64>(&dp, &pp) {
        Err(CtfError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&dp, "y,a,b\n1,2,3\n2,3,4\n3,1,5\n").unwrap();
    std::fs::write(&pp, "variable,cell\na,g\nb,g\n").unwrap();
    assert!(matches!(
        read_dataset_csv::<f64>(&dp, &pp),
        Err(CtfError::Parse { line: 1, .. })
    ));
    std::fs::write(&pp, "variable_id,cell_id\na,g\n").unwrap();
    assert!(read_dataset_csv::<f64>(&dp, &pp).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn location_invariance(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let data = random_data(seed, 30, 6, 3);
        let shifted = Dataset::new(
            data.y().mapv(|v| v + shift),
            data.x().clone(),
            data.partition().clone(),
        )
        .unwrap()
        .with_sigma_y_sq(data.sigma_y_sq())
        .unwrap();
        for g in 0..2 {
            let a = cell_score(&data, g).unwrap();
            let b = cell_score(&shifted, g).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
        }
        let a = variable_score(&data, 4).unwrap();
        let b = variable_score(&shifted, 4).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
    }

    #[test]
    fn scores_nonnegative_and_nested(seed in 0u64..10_000) {
        let data = random_data(seed, 25, 8, 4);
        let proj = Projections::new(&data);
        let table = proj.score_table();
        for (g, cell) in data.partition().cells().iter().enumerate() {
            let t_g = table.cells[g].unwrap();
            prop_assert!(t_g >= 0.0);
            for &v in cell {
                let t_v = table.variables[v].unwrap();
                prop_assert!(t_v >= 0.0 && t_v <= t_g + 1e-9);
            }
        }
    }
}
