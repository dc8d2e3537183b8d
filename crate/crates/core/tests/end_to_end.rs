use abae_core::{
    abae_sample, generate, load_dataset, parse_predicate, save_dataset, uniform_sample, Aggregate,
    QueryConfig, Schema, SynthSpec,
};

fn small_spec() -> SynthSpec {
    SynthSpec {
        n: 20_000,
        seed: 11,
        ..SynthSpec::default()
    }
}

#[test]
fn csv_round_trip_preserves_records() {
    let (dataset, _) = generate(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let schema = Schema::for_dataset(&dataset);
    save_dataset(&dataset, &path, &schema).unwrap();
    let loaded = load_dataset(&path, &schema).unwrap();
    assert_eq!(loaded.len(), dataset.len());
    assert_eq!(loaded.label_names(), dataset.label_names());
    let original: Vec<_> = dataset.records().collect();
    let reloaded: Vec<_> = loaded.records().collect();
    assert_eq!(original, reloaded);
}

#[test]
fn abae_estimates_every_aggregate_near_truth() {
    let (dataset, truth) = generate(&small_spec()).unwrap();
    let predicate = parse_predicate("pred").unwrap();
    for aggregate in [Aggregate::Avg, Aggregate::Sum, Aggregate::Count] {
        let config = QueryConfig {
            aggregate,
            seed: 3,
            ..QueryConfig::new(predicate.clone(), 4000)
        };
        let report = abae_sample(&dataset, &config).unwrap();
        let exact = truth.value(aggregate);
        assert!(report.oracle_calls <= config.budget);
        assert!(report.ci_low <= report.estimate && report.estimate <= report.ci_high);
        assert!(
            (report.estimate - exact).abs() / exact < 0.25,
            "{aggregate:?}: {} vs {exact}",
            report.estimate
        );
    }
}

#[test]
fn same_seed_same_report() {
    let (dataset, _) = generate(&small_spec()).unwrap();
    let config = QueryConfig {
        seed: 9,
        ..QueryConfig::new(parse_predicate("pred").unwrap(), 2000)
    };
    let a = abae_sample(&dataset, &config).unwrap();
    let b = abae_sample(&dataset, &config).unwrap();
    assert_eq!(a.estimate, b.estimate);
    assert_eq!((a.ci_low, a.ci_high), (b.ci_low, b.ci_high));
    let u = uniform_sample(&dataset, &config).unwrap();
    assert_eq!(u.stage1_draws + u.stage2_draws, u.oracle_calls);
}
