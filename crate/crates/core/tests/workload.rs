use ecbr_core::enclave::MIB;
use ecbr_core::filter::covers;
use ecbr_core::workload::{
    generate, measured_match_rate, parse_sizes, records_csv, sweep, sweep_svg, Profile, WorkloadError, WorkloadSpec,
};
use ecbr_core::{ContainmentIndex, CostModel, Filter};

fn index_of(subs: &[ecbr_core::Subscription]) -> ContainmentIndex {
    let mut ix = ContainmentIndex::new();
    for s in subs {
        ix.insert(s.clone()).unwrap();
    }
    ix
}

#[test]
fn chains_nest() {
    let spec = WorkloadSpec { n_subscriptions: 400, profile: Profile::Chains(4), n_publications: 10, ..Default::default() };
    let w = generate(&spec).unwrap();
    assert_eq!(w.subscriptions.len(), 400);
    for chain in w.subscriptions.chunks(4) {
        let fs: Vec<&Filter> = chain.iter().map(|s| &s.filter).collect();
        for i in 0..4 {
            for j in i..4 {
                assert!(covers(fs[i], fs[j]), "{} should cover {}", fs[i], fs[j]);
            }
        }
    }
    let ix = index_of(&w.subscriptions);
    assert_eq!(ix.roots().len(), 100);
    assert_eq!(ix.edges().len(), 300);
}

#[test]
fn generation_is_reproducible() {
    for profile in [Profile::Flat, Profile::Chains(8), Profile::Zipf, Profile::Tree(4)] {
        let spec = WorkloadSpec { n_subscriptions: 300, profile, n_publications: 200, seed: 42, ..Default::default() };
        assert_eq!(generate(&spec).unwrap().render(), generate(&spec).unwrap().render());
        let other = WorkloadSpec { seed: 43, ..spec.clone() };
        if profile == Profile::Zipf {
            assert_ne!(generate(&spec).unwrap().render(), generate(&other).unwrap().render());
        }
    }
}

#[test]
fn zero_match_rate_matches_nothing() {
    for profile in [Profile::Flat, Profile::Chains(8), Profile::Zipf, Profile::Tree(8)] {
        let spec = WorkloadSpec { n_subscriptions: 500, profile, n_publications: 300, match_rate: Some(0.0), ..Default::default() };
        let w = generate(&spec).unwrap();
        assert_eq!(measured_match_rate(&w.subscriptions, &w.publications), 0.0);
    }
}

#[test]
fn match_rate_targets_are_met() {
    let cases = [
        (Profile::Chains(8), 800, 0.004),
        (Profile::Flat, 800, 0.001),
        (Profile::Zipf, 600, 0.05),
        (Profile::Tree(4), 340, 0.01),
    ];
    for (profile, n, rate) in cases {
        let spec = WorkloadSpec { n_subscriptions: n, profile, n_publications: 500, match_rate: Some(rate), ..Default::default() };
        let w = generate(&spec).unwrap();
        let got = measured_match_rate(&w.subscriptions, &w.publications);
        assert!((got - rate).abs() <= 0.1 * rate, "{profile:?}: target {rate}, measured {got}");
    }
}

#[test]
fn impossible_rates_are_refused() {
    let spec = WorkloadSpec { n_subscriptions: 400, profile: Profile::Chains(4), match_rate: Some(1.0), n_publications: 50, ..Default::default() };
    assert!(matches!(generate(&spec), Err(WorkloadError::InfeasibleSpec(_))));
}

#[test]
fn chains_prune_most_evaluations() {
    let n = 4000;
    let eval = |profile| {
        let spec = WorkloadSpec { n_subscriptions: n, profile, n_publications: 200, match_rate: Some(0.0), ..Default::default() };
        let w = generate(&spec).unwrap();
        let ix = index_of(&w.subscriptions);
        w.publications.iter().map(|p| ix.match_all(p).stats.evaluations).sum::<u64>()
    };
    let (chains, flat) = (eval(Profile::Chains(8)), eval(Profile::Flat));
    assert_eq!(flat, 200 * n as u64);
    assert!(chains * 4 <= flat, "chains {chains} flat {flat}");
    assert!(chains <= 200 * n as u64 / 4);
}

#[test]
fn sweep_output_is_reproducible() {
    let model = CostModel { epc_budget_bytes: 4 * MIB, reserved_bytes: MIB, arena_bytes: 128 * 1024, ..Default::default() };
    let spec = WorkloadSpec { n_publications: 200, ..Default::default() };
    let sizes = parse_sizes("1,2,3.5,6MiB").unwrap();
    let a = records_csv(&sweep(&spec, &sizes, &model));
    let b = records_csv(&sweep(&spec, &sizes, &model));
    assert_eq!(a, b);
    assert!(a.starts_with("db_bytes,sim_ns_inside,sim_ns_outside,slowdown,evaluations,hits,misses,swaps\n"));
    assert_eq!(a.lines().count(), 5);
    let recs = sweep(&spec, &sizes, &model);
    assert!(recs.iter().all(|r| r.slowdown >= 1.0 && r.sim_ns_inside >= r.sim_ns_outside));
    let svg = sweep_svg(&recs, model.epc_budget_bytes);
    assert_eq!(svg, sweep_svg(&recs, model.epc_budget_bytes));
    assert!(svg.contains("<line"));
}
