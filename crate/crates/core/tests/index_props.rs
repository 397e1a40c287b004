use std::collections::{BTreeSet, HashSet};

use ecbr_core::filter::covers;
use ecbr_core::index::subscription_bytes;
use ecbr_core::{AttrValue, Constraint, ContainmentIndex, Filter, FilterId, Match, Predicate, PubId, Publication, SenderId, Subscription};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_filter(rng: &mut impl Rng) -> Filter {
    loop {
        let n = rng.gen_range(1..=2);
        let cs: Vec<Constraint> = (0..n)
            .map(|_| {
                let attr = ["a", "b", "c", "s"][rng.gen_range(0..4)];
                let pred = if attr == "s" {
                    let lit = ["", "x", "xy", "xyz", "y"][rng.gen_range(0..5)];
                    if rng.gen_bool(0.5) && !lit.is_empty() {
                        Predicate::StrEq(lit.into())
                    } else {
                        Predicate::StrPrefix(lit.into())
                    }
                } else {
                    let lo = rng.gen_range(0..20);
                    let w = rng.gen_range(0..12);
                    match rng.gen_range(0..6) {
                        0 => Predicate::int_range(Some(lo), None),
                        1 => Predicate::int_range(None, Some(lo + w)),
                        _ => Predicate::int_range(Some(lo), Some(lo + w)),
                    }
                };
                Constraint::new(attr, pred)
            })
            .collect();
        if let Ok(f) = Filter::from_constraints(cs) {
            return f;
        }
    }
}

fn random_pub(rng: &mut impl Rng) -> Publication {
    let mut attrs = Vec::new();
    for a in ["a", "b", "c"] {
        if rng.gen_bool(0.7) {
            attrs.push((a.to_string(), AttrValue::Int(rng.gen_range(-2..34))));
        }
    }
    if rng.gen_bool(0.5) {
        attrs.push(("s".into(), AttrValue::Str(["x", "xy", "xyz", "xz", "y", "z"][rng.gen_range(0..6)].into())));
    }
    if attrs.is_empty() {
        attrs.push(("d".into(), AttrValue::Int(0)));
    }
    Publication::new(PubId::default(), attrs).unwrap()
}

fn random_subs(rng: &mut impl Rng, n: usize) -> Vec<Subscription> {
    (0..n)
        .map(|_| {
            let f = random_filter(rng).with_id(FilterId::random(rng));
            Subscription::new(f, SenderId([rng.gen_range(0..25u8); 16]))
        })
        .collect()
}

fn build(subs: &[Subscription]) -> ContainmentIndex {
    let mut ix = ContainmentIndex::new();
    for s in subs {
        ix.insert(s.clone()).unwrap();
    }
    ix
}

fn brute_force(subs: &[Subscription], p: &Publication) -> BTreeSet<Match> {
    subs.iter()
        .filter(|s| s.filter.matches(p))
        .map(|s| Match { subscriber: s.subscriber, filter_id: s.filter_id() })
        .collect()
}

/// Transitive reduction of strict covering over the distinct filters,
/// computed pairwise from scratch.
fn oracle_structure(subs: &[Subscription]) -> (BTreeSet<(String, String)>, BTreeSet<String>) {
    let mut uniq: Vec<Filter> = Vec::new();
    for s in subs {
        if !uniq.iter().any(|f| f.same_shape(&s.filter)) {
            uniq.push(s.filter.clone());
        }
    }
    let strict = |a: &Filter, b: &Filter| !a.same_shape(b) && covers(a, b);
    for a in &uniq {
        for b in &uniq {
            assert!(!(strict(a, b) && strict(b, a)), "mutual covering between {a} and {b}");
        }
    }
    let mut edges = BTreeSet::new();
    for a in &uniq {
        for b in &uniq {
            if strict(a, b) && !uniq.iter().any(|c| strict(a, c) && strict(c, b)) {
                edges.insert((a.render(), b.render()));
            }
        }
    }
    let roots = uniq.iter().filter(|b| !uniq.iter().any(|a| strict(a, b))).map(|f| f.render()).collect();
    (edges, roots)
}

#[test]
fn match_all_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for round in 0..20 {
        let n = if round == 0 { 0 } else { rng.gen_range(1..=1000) };
        let subs = random_subs(&mut rng, n);
        let ix = build(&subs);
        for _ in 0..500 {
            let p = random_pub(&mut rng);
            let r = ix.match_all(&p);
            let got: BTreeSet<Match> = r.matches.iter().copied().collect();
            assert_eq!(got.len(), r.matches.len(), "duplicate matches");
            assert_eq!(got, brute_force(&subs, &p));
            assert_eq!(r.stats.matched as usize, got.len());
            assert!(r.stats.evaluations as usize <= ix.node_count());
            assert_eq!(r.stats.evaluations + r.stats.pruned, ix.node_count() as u64);
            cases += 1;
        }
    }
    assert_eq!(cases, 10_000);
}

#[test]
fn batch_matching_agrees_with_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let subs = random_subs(&mut rng, 400);
    let ix = build(&subs);
    let pubs: Vec<Publication> = (0..300).map(|_| random_pub(&mut rng)).collect();
    let par = ix.match_batch(&pubs);
    let seq = ix.match_batch_sequential(&pubs);
    for (a, b) in par.iter().zip(&seq) {
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.stats, b.stats);
    }
}

#[test]
fn structure_survives_random_operation_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let mut ix = ContainmentIndex::new();
        let mut live: Vec<Subscription> = Vec::new();
        for step in 0..1000 {
            if !live.is_empty() && rng.gen_bool(0.4) {
                let s = live.swap_remove(rng.gen_range(0..live.len()));
                assert_eq!(ix.remove(s.filter_id()).unwrap(), s);
            } else {
                let s = random_subs(&mut rng, 1).pop().unwrap();
                ix.insert(s.clone()).unwrap();
                live.push(s);
            }
            let bytes: u64 = live.iter().map(|s| subscription_bytes(&s.filter)).sum();
            assert_eq!(ix.resident_bytes(), bytes);
            if step % 10 == 0 || step > 990 {
                let (edges, roots) = oracle_structure(&live);
                assert_eq!(ix.edges(), edges, "edges diverged at step {step}");
                assert_eq!(ix.roots(), roots, "roots diverged at step {step}");
            }
        }
    }
}

#[test]
fn insertion_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let subs = random_subs(&mut rng, 50);
    let reference = build(&subs);
    let probe: Vec<Publication> = (0..50).map(|_| random_pub(&mut rng)).collect();
    for _ in 0..20 {
        let mut order = subs.clone();
        order.shuffle(&mut rng);
        let ix = build(&order);
        assert_eq!(ix.edges(), reference.edges());
        assert_eq!(ix.roots(), reference.roots());
        assert_eq!(ix.to_dot(), reference.to_dot());
        for p in &probe {
            let (a, b) = (ix.match_all(p), reference.match_all(p));
            assert_eq!(a.matches, b.matches);
            assert_eq!(a.stats, b.stats);
        }
    }
}

#[test]
fn nested_chains_evaluate_only_roots_on_misses() {
    let (k, d) = (30i64, 8i64);
    let mut subs = Vec::new();
    for chain in 0..k {
        let base = chain * 100;
        for level in 0..d {
            let f = Filter::from_constraints([Constraint::new("v", Predicate::int_range(Some(base + level), Some(base + 2 * d - 1 - level)))])
                .unwrap();
            subs.push(Subscription::new(f, SenderId([chain as u8; 16])));
        }
    }
    let ix = build(&subs);
    for v in [-5, 50, 1000 * k, 99] {
        let p = Publication::new(PubId::default(), [("v", AttrValue::Int(v))]).unwrap();
        let r = ix.match_all(&p);
        assert!(r.matches.is_empty());
        assert_eq!(r.stats.evaluations as i64, k);
        assert_eq!(r.stats.pruned as i64, k * (d - 1));
    }
}

#[test]
fn shared_filters_keep_distinct_entries() {
    let f = ecbr_core::parse_filter("t >= 0 && t <= 9").unwrap();
    let mut ix = ContainmentIndex::new();
    for i in 0..3u8 {
        ix.insert(Subscription::new(f.clone().with_id(FilterId([i; 16])), SenderId([i; 16]))).unwrap();
    }
    assert_eq!(ix.node_count(), 1);
    assert_eq!(ix.len(), 3);
    let p = Publication::new(PubId::default(), [("t", AttrValue::Int(4))]).unwrap();
    assert_eq!(ix.match_all(&p).matches.len(), 3);
    ix.remove(FilterId([0; 16])).unwrap();
    assert_eq!(ix.match_all(&p).matches.len(), 2);
    assert!(ix.insert(Subscription::new(f.with_id(FilterId([1; 16])), SenderId([9; 16]))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn insert_then_remove_restores_structure(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subs = random_subs(&mut rng, n);
        let mut ix = build(&subs);
        let (edges, roots, bytes) = (ix.edges(), ix.roots(), ix.resident_bytes());
        let extra = random_subs(&mut rng, 1).pop().unwrap();
        ix.insert(extra.clone()).unwrap();
        ix.remove(extra.filter_id()).unwrap();
        prop_assert_eq!(ix.edges(), edges);
        prop_assert_eq!(ix.roots(), roots);
        prop_assert_eq!(ix.resident_bytes(), bytes);
    }

    #[test]
    fn matches_never_repeat(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subs = random_subs(&mut rng, 120);
        let ix = build(&subs);
        let p = random_pub(&mut rng);
        let r = ix.match_all(&p);
        let uniq: HashSet<Match> = r.matches.iter().copied().collect();
        prop_assert_eq!(uniq.len(), r.matches.len());
    }
}
