use std::collections::HashSet;

use htfl_core::data::{
    gen_gaussian_mixture, gen_har_like, partition, train_len, Dataset, HarLikeConfig, PartitionResult, ScenarioKind,
    ScenarioSpec, SplitMode,
};
use proptest::prelude::*;

fn check_coverage(p: &PartitionResult, ds: &Dataset) {
    let mut seen = HashSet::new();
    for (tr, te) in p.client_train.iter().zip(&p.client_test) {
        for &i in tr.iter().chain(te) {
            assert!(i < ds.len());
            assert!(seen.insert(i), "sample {i} assigned twice");
        }
        let n = tr.len() + te.len();
        assert!(tr.len().abs_diff(train_len(n)) <= 1);
        assert!((tr.len() as f64 - 0.75 * n as f64).abs() <= 1.0 + 1e-9, "{} of {n}", tr.len());
    }
}

fn scenario(kind: u8, n: usize, alpha: f64, cpc: usize, split: SplitMode) -> ScenarioSpec {
    let mut s = match kind {
        0 => ScenarioSpec::dirichlet(n, alpha),
        1 => ScenarioSpec::pathological(n, cpc),
        _ => ScenarioSpec::feature_shift(n, cpc),
    };
    s.split = split;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partitions_are_disjoint_deterministic_and_split_three_to_one(
        kind in 0u8..3,
        n in 2usize..12,
        alpha in 0.05f64..5.0,
        cpc in 1usize..4,
        stratified in any::<bool>(),
        seed in 0u64..1000,
    ) {
        prop_assume!(kind != 1 || n * cpc >= 6);
        let ds = gen_gaussian_mixture(6, 900, 3, 2.0, 5).unwrap();
        let split = if stratified { SplitMode::Stratified } else { SplitMode::Uniform };
        let spec = scenario(kind, n, alpha, cpc, split);
        let p = partition(&ds, &spec, seed).unwrap();
        prop_assert_eq!(p.n_clients(), n);
        if !stratified {
            check_coverage(&p, &ds);
        }
        prop_assert!(p.client_test.iter().all(|t| !t.is_empty()));
        prop_assert_eq!(&partition(&ds, &spec, seed).unwrap(), &p);
    }
}

#[test]
fn dirichlet_covers_every_sample() {
    let ds = gen_gaussian_mixture(10, 3000, 4, 2.0, 0).unwrap();
    let p = partition(&ds, &ScenarioSpec::dirichlet(20, 0.1), 3).unwrap();
    check_coverage(&p, &ds);
    let total: usize = p.client_train.iter().chain(&p.client_test).map(Vec::len).sum();
    assert_eq!(total, ds.len());
}

#[test]
fn dirichlet_shares_average_to_one_over_n() {
    let ds = gen_gaussian_mixture(4, 800, 2, 2.0, 0).unwrap();
    let n = 5;
    let seeds = 200;
    let mut shares = vec![Vec::new(); n];
    for seed in 0..seeds {
        let p = partition(&ds, &ScenarioSpec::dirichlet(n, 0.5), seed).unwrap();
        let h = p.class_histograms(&ds);
        for (i, row) in h.iter().enumerate() {
            shares[i].push(row[0] as f64 / 200.0);
        }
    }
    for s in &shares {
        let mean = s.iter().sum::<f64>() / seeds as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (seeds as f64 - 1.0);
        let se = (var / seeds as f64).sqrt();
        assert!((mean - 1.0 / n as f64).abs() <= 3.0 * se + 0.01, "mean {mean} se {se}");
    }
}

#[test]
fn pathological_gives_each_client_its_class_count() {
    let ds = gen_gaussian_mixture(10, 2000, 2, 2.0, 0).unwrap();
    let p = partition(&ds, &ScenarioSpec::pathological(20, 2), 1).unwrap();
    for classes in p.train_classes(&ds) {
        assert_eq!(classes.len(), 2);
    }
}

#[test]
fn real_world_keeps_subjects_together() {
    let cfg = HarLikeConfig {
        subjects: 6,
        samples: 600,
        length: 32,
        channels: 2,
        ..Default::default()
    };
    let ds = gen_har_like(&cfg, 4).unwrap();
    let groups = ds.group_id().unwrap();
    let p = partition(&ds, &ScenarioSpec::real_world(3), 0).unwrap();
    assert_eq!(p.scenario.kind, ScenarioKind::RealWorld);
    let mut owner = vec![None; cfg.subjects];
    for (i, (tr, te)) in p.client_train.iter().zip(&p.client_test).enumerate() {
        for &s in tr.iter().chain(te) {
            let g = groups[s];
            assert!(owner[g].is_none() || owner[g] == Some(i), "subject {g} split across clients");
            owner[g] = Some(i);
        }
    }
}

#[test]
fn too_many_clients_is_infeasible() {
    let ds = gen_gaussian_mixture(2, 10, 2, 1.0, 0).unwrap();
    assert!(partition(&ds, &ScenarioSpec::dirichlet(50, 1.0), 0).is_err());
    assert!(partition(&ds, &ScenarioSpec::dirichlet(4, -1.0), 0).is_err());
}
