use ctf_core::harness::{
    experiment_thresholds, run_null_fwer_experiment, run_power_experiment, ExperimentSpec,
    RegimeChoice, METHOD_CTF_NP, METHOD_CTF_PAR, METHOD_HOLM_NP, METHOD_HOLM_PAR,
};
use ctf_core::SimConfig;

fn small_spec() -> ExperimentSpec {
    ExperimentSpec::from_json(
        r#"{
            "sim": {"n_vars": 20, "cell_size": 10, "n_samples": 120, "n_active": 2,
                    "actives_per_cell": 1, "coef": 1.0, "var_x": 1.0, "var_noise": 2.0,
                    "seed": 0},
            "alpha": 0.1,
            "regime": "both",
            "k_perms": 2000,
            "replicates": 12,
            "sweep": [1, 2],
            "seed": 31
        }"#,
    )
    .unwrap()
}

#[test]
fn table_is_thread_count_invariant() {
    let spec = small_spec();
    let one = run_power_experiment(&spec, Some(1)).unwrap().to_csv();
    let four = run_power_experiment(&spec, Some(4)).unwrap().to_csv();
    assert_eq!(one, four);
    let mut other = spec.clone();
    other.seed += 1;
    assert_ne!(one, run_power_experiment(&other, Some(1)).unwrap().to_csv());
}

#[test]
fn golden_table() {
    let csv = run_power_experiment(&small_spec(), Some(2))
        .unwrap()
        .to_csv();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/small_power.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, &csv).unwrap();
    }
    assert_eq!(csv, std::fs::read_to_string(path).unwrap());
}

#[test]
fn table_layout() {
    let mut spec = small_spec();
    spec.replicates = 1;
    let table = run_power_experiment(&spec, None).unwrap();
    let csv = table.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# ctf power table format_version=1"));
    assert_eq!(
        lines.next(),
        Some("kind,sweep,method,rate,ci_half_width,trials")
    );
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 16);
    for line in body {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6);
        let rate: f64 = f[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&rate));
        assert!(f[4].parse::<f64>().unwrap() >= 0.0);
    }
    for s in [1, 2] {
        for m in [
            METHOD_CTF_PAR,
            METHOD_HOLM_PAR,
            METHOD_CTF_NP,
            METHOD_HOLM_NP,
        ] {
            assert_eq!(table.power(s, m).unwrap().trials, 2);
            assert_eq!(table.fwer(s, m).unwrap().trials, 1);
        }
    }
}

#[test]
fn trivial_level_rejects_everything() {
    let mut spec = small_spec();
    spec.alpha = 1.0;
    spec.regime = RegimeChoice::Parametric;
    spec.replicates = 30;
    let table = run_null_fwer_experiment(&spec, None).unwrap();
    assert_eq!(table.fwer(0, METHOD_CTF_PAR).unwrap().rate, 1.0);
    // Holm still needs min p <= 1/|V| for its first rejection.
    let holm = table.fwer(0, METHOD_HOLM_PAR).unwrap().rate;
    assert!(holm > 0.3 && holm < 0.95, "Holm {holm}");
    assert!(table.rows.is_empty());
}

#[test]
fn thresholds_follow_the_sweep() {
    let spec = small_spec();
    let th = experiment_thresholds(&spec).unwrap();
    assert_eq!(th.len(), 2);
    assert_eq!(th[0].j_bound, 2);
    assert_eq!(th[1].j_bound, 1);
    assert!(th
        .iter()
        .all(|t| t.parametric.is_some() && t.nonparametric.is_some()));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = small_spec();
    spec.k_perms = None;
    assert!(run_power_experiment(&spec, None).is_err());
    let mut spec = small_spec();
    spec.sweep = vec![0];
    assert!(spec.validate().is_err());
    let mut spec = small_spec();
    spec.sim = SimConfig {
        n_vars: 25,
        ..spec.sim
    };
    assert!(spec.validate().is_err());
    assert!(ExperimentSpec::from_json(r#"{"alpha": 0.1}"#).is_err());
    let text = serde_json::to_string(&small_spec()).unwrap();
    assert!(
        ExperimentSpec::from_json(&text.replace("\"seed\":31", "\"seed\":31,\"extra\":1")).is_err()
    );
}
