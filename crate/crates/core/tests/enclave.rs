mod common;

use common::{contains, Client};
use ecbr_core::enclave::{build_manifest, measure, stats_csv, Outcome, PageStats, Pager, Reject, Touch, MIB};
use ecbr_core::workload::{calibrate, sweep, CalibrationError, Profile, WorkloadSpec};
use ecbr_core::{AttrValue, CostModel, Enclave, FilterId, PubId, Publication};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> CostModel {
    CostModel {
        epc_budget_bytes: 8 * MIB,
        reserved_bytes: 2 * MIB,
        arena_bytes: 256 * 1024,
        ..CostModel::default()
    }
}

fn publication(id: u8, attrs: &[(&str, AttrValue)]) -> Publication {
    Publication::new(PubId([id; 16]), attrs.iter().cloned()).unwrap()
}

#[test]
fn pager_fits_exactly() {
    let mut p = Pager::new(4);
    let got: Vec<Touch> = [1, 2, 3, 4, 1, 2].into_iter().map(|x| p.touch(x)).collect();
    assert_eq!(got, [Touch::Miss, Touch::Miss, Touch::Miss, Touch::Miss, Touch::Hit, Touch::Hit]);
    assert_eq!(p.stats(), PageStats { hits: 2, misses: 4, swaps: 0 });
}

#[test]
fn pager_cyclic_overflow_always_swaps() {
    let mut p = Pager::new(4);
    for x in 0..8 {
        p.touch(x);
    }
    p.reset_stats();
    for _ in 0..10 {
        for x in 0..8 {
            assert_eq!(p.touch(x), Touch::Swap);
        }
    }
    assert_eq!(p.stats().swaps, 80);
    assert_eq!(p.resident_pages(), 4);
}

#[test]
fn pager_small_working_set_only_hits() {
    let m = CostModel::default();
    let mut p = Pager::new(16);
    p.touch_all(0..10, &m);
    let ns = p.touch_all((0..10).cycle().take(100), &m);
    assert_eq!(ns, 100 * m.hit_ns);
}

#[test]
fn pager_matches_lru_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cap in [1usize, 2, 5, 17] {
        let mut p = Pager::new(cap as u64);
        let mut lru: Vec<u32> = Vec::new();
        for _ in 0..5000 {
            let x = rng.gen_range(0..40u32);
            let expect = if let Some(i) = lru.iter().position(|&y| y == x) {
                lru.remove(i);
                Touch::Hit
            } else if lru.len() == cap {
                lru.pop();
                Touch::Swap
            } else {
                Touch::Miss
            };
            lru.insert(0, x);
            assert_eq!(p.touch(x), expect);
            assert_eq!(p.lru_order(), lru);
        }
    }
}

#[test]
fn measurement_examples() {
    let manifest = build_manifest(&CostModel::default());
    assert_eq!(measure(&manifest), measure(&manifest));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let mut m = manifest.clone();
        let i = rng.gen_range(0..m.len());
        m[i] ^= rng.gen_range(1..=255u8);
        assert_ne!(measure(&m), measure(&manifest));
    }
    assert_eq!(measure(b"").to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

#[test]
fn subscription_ecalls() {
    let mut e = Enclave::new(CostModel::default(), 1).unwrap();
    let mut c = Client::connect(&mut e, 10);
    let msg = c.subscribe_msg(FilterId([1; 16]), "temp >= 10 && temp <= 20");
    let r = e.ecall_submit_subscription(&msg);
    assert_eq!(r.outcome, Outcome::Accepted { filter_id: FilterId([1; 16]) });
    assert_eq!(e.subscription_count(), 1);
    assert!(r.sim_ns > 0);

    let mut bad = c.subscribe_msg(FilterId([2; 16]), "temp >= 0");
    let tag_at = bad.len() - 64 - 1;
    bad[tag_at] ^= 1;
    assert_eq!(e.ecall_submit_subscription(&bad).rejection(), Some(Reject::BadTag));
    assert_eq!(e.subscription_count(), 1);

    let mut huge = c.subscribe_msg(FilterId([3; 16]), "temp >= 0");
    huge[46..50].copy_from_slice(&(MIB as u32).to_be_bytes());
    assert_eq!(e.ecall_submit_subscription(&huge).rejection(), Some(Reject::TooLarge));
    assert_eq!(e.ecall_submit_subscription(&vec![0u8; 70 * 1024]).rejection(), Some(Reject::TooLarge));

    let dup = c.subscribe_msg(FilterId([1; 16]), "temp >= 0");
    assert_eq!(e.ecall_submit_subscription(&dup).rejection(), Some(Reject::DuplicateFilterId));
    let neq = c.subscribe_msg(FilterId([4; 16]), "temp != 3");
    assert_eq!(e.ecall_submit_subscription(&neq).rejection(), Some(Reject::UnsupportedOperator));
    let unsat = c.subscribe_msg(FilterId([5; 16]), "a == 3 && a == 4");
    assert_eq!(e.ecall_submit_subscription(&unsat).rejection(), Some(Reject::Unsatisfiable));
    let wrong_ctx = c.ring.seal(c.key, ecbr_core::Context::Pub, b"x").unwrap().to_bytes();
    assert_eq!(e.ecall_submit_subscription(&wrong_ctx).rejection(), Some(Reject::ContextMismatch));

    let mut other = Client::connect(&mut e, 11);
    let steal = other.unsubscribe_msg(FilterId([1; 16]));
    assert_eq!(e.ecall_unsubscribe(&steal).rejection(), Some(Reject::NotOwner));
    let missing = c.unsubscribe_msg(FilterId([9; 16]));
    assert_eq!(e.ecall_unsubscribe(&missing).rejection(), Some(Reject::UnknownFilterId));
    let un = c.unsubscribe_msg(FilterId([1; 16]));
    assert_eq!(e.ecall_unsubscribe(&un).outcome, Outcome::Removed { filter_id: FilterId([1; 16]) });
    assert_eq!(e.subscription_count(), 0);
    assert_eq!(e.index_bytes(), 0);
}

#[test]
fn publish_ecalls() {
    let mut e = Enclave::new(CostModel::default(), 2).unwrap();
    let mut subs: Vec<Client> = (0..3).map(|i| Client::connect(&mut e, 20 + i)).collect();
    let filters = ["temp >= 10 && temp <= 20", "temp >= 0 && temp <= 100", "temp >= 50"];
    for (i, (c, f)) in subs.iter_mut().zip(filters).enumerate() {
        let m = c.subscribe_msg(FilterId([i as u8; 16]), f);
        assert!(!e.ecall_submit_subscription(&m).is_rejected());
    }
    let mut publisher = Client::connect(&mut e, 30);
    let p = publication(1, &[("temp", AttrValue::Int(15))]);
    let r = e.ecall_publish(&publisher.publish_msg(&p));
    let Outcome::Published { pub_id, deliveries, skipped } = r.outcome else { panic!("{:?}", r.outcome) };
    assert_eq!(pub_id, PubId([1; 16]));
    assert!(skipped.is_empty());
    let mut got: Vec<_> = deliveries.iter().map(|d| d.subscriber).collect();
    got.sort();
    let mut want = vec![subs[0].id(), subs[1].id()];
    want.sort();
    assert_eq!(got, want);
    for d in &deliveries {
        let owner = subs.iter().find(|c| c.id() == d.subscriber).unwrap();
        assert_eq!(owner.open_delivery(&d.envelope), p);
        let stranger = subs.iter().find(|c| c.id() != d.subscriber).unwrap();
        assert!(stranger.ring.open_bytes(&d.envelope, ecbr_core::Context::Pub).is_err());
    }

    let none = publication(2, &[("humidity", AttrValue::Int(1))]);
    let r = e.ecall_publish(&publisher.publish_msg(&none));
    assert!(matches!(&r.outcome, Outcome::Published { deliveries, .. } if deliveries.is_empty()));
    assert!(r.sim_ns > 0);

    let garbage = publisher.ring.seal(publisher.key, ecbr_core::Context::Pub, b"\x00\x01junk").unwrap().to_bytes();
    assert_eq!(e.ecall_publish(&garbage).rejection(), Some(Reject::MalformedEncoding));

    let gone = subs[0].id();
    let r = e.ecall_drop_session(gone);
    assert_eq!(r.outcome, Outcome::SessionDropped { peer: gone, removed: 1 });
    let r = e.ecall_publish(&publisher.publish_msg(&p));
    let Outcome::Published { deliveries, .. } = r.outcome else { panic!() };
    assert_eq!(deliveries.len(), 1);
    assert_eq!(deliveries[0].subscriber, subs[1].id());
}

#[test]
fn messages_without_a_session_are_refused() {
    let mut e = Enclave::new(CostModel::default(), 3).unwrap();
    let mut c = Client::connect(&mut e, 40);
    e.ecall_drop_session(c.id());
    let m = c.subscribe_msg(FilterId([1; 16]), "a >= 1");
    assert!(matches!(e.ecall_submit_subscription(&m).rejection(), Some(Reject::UnknownKey | Reject::NoSession)));
    assert_eq!(e.ecall_session_finish(c.id(), &m).rejection(), Some(Reject::NoPendingHandshake));
}

/// Random operations with a marker planted in every plaintext; no result
/// leaving the enclave may contain it.
#[test]
fn boundary_carries_no_plaintext() {
    const MARKER: &str = "PLAINTEXTMARKER";
    let mut e = Enclave::new(small_model(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut clients: Vec<Client> = (0..6).map(|i| Client::connect(&mut e, 50 + i)).collect();
    let mut owned: Vec<(usize, FilterId)> = Vec::new();
    let budget = e.model().epc_budget_bytes - e.model().reserved_bytes;
    let mut deliveries = 0;
    for step in 0..10_000u32 {
        let ci = rng.gen_range(0..clients.len());
        let r = match rng.gen_range(0..10) {
            0..=3 => {
                let id = FilterId::random(&mut rng);
                let lo = rng.gen_range(0..100);
                let f = format!("{MARKER}{} prefix \"{MARKER}\" && v >= {lo} && v <= {}", ci, lo + rng.gen_range(0..50));
                owned.push((ci, id));
                clients[ci].subscribe_msg(id, &f)
            }
            4 if !owned.is_empty() => {
                let (ci, id) = owned.swap_remove(rng.gen_range(0..owned.len()));
                let m = clients[ci].unsubscribe_msg(id);
                let r = e.ecall_unsubscribe(&m);
                assert!(!contains(&r.boundary_bytes(), MARKER.as_bytes()));
                continue;
            }
            _ => {
                let target = rng.gen_range(0..clients.len());
                let p = Publication::new(
                    PubId(rng.gen()),
                    [
                        (format!("{MARKER}{target}"), AttrValue::Str(format!("{MARKER}-{step}"))),
                        ("v".into(), AttrValue::Int(rng.gen_range(0..150))),
                    ],
                )
                .unwrap();
                let m = clients[ci].publish_msg(&p);
                assert!(!contains(&m, MARKER.as_bytes()));
                let r = e.ecall_publish(&m);
                if let Outcome::Published { deliveries: d, .. } = &r.outcome {
                    deliveries += d.len();
                    for d in d {
                        let owner = clients.iter().find(|c| c.id() == d.subscriber).unwrap();
                        assert_eq!(owner.open_delivery(&d.envelope), p);
                    }
                }
                assert!(!contains(&r.boundary_bytes(), MARKER.as_bytes()));
                assert!(e.resident_bytes() <= budget);
                continue;
            }
        };
        assert!(!contains(&r, MARKER.as_bytes()));
        let res = e.ecall_submit_subscription(&r);
        assert!(!res.is_rejected(), "{:?}", res.outcome);
        assert!(!contains(&res.boundary_bytes(), MARKER.as_bytes()));
        assert!(e.resident_bytes() <= budget);
    }
    assert!(deliveries > 1000, "only {deliveries} deliveries");
    let _ = &mut clients;
}

#[test]
fn identical_runs_have_identical_clocks() {
    let run = || {
        let mut e = Enclave::new(small_model(), 6).unwrap();
        e.enable_stats_log();
        let mut c = Client::connect(&mut e, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..300u32 {
            let lo = rng.gen_range(0..1000);
            let m = c.subscribe_msg(FilterId::random(&mut rng), &format!("x >= {lo} && x <= {}", lo + 40));
            e.ecall_submit_subscription(&m);
            if i % 3 == 0 {
                let p = publication(0, &[("x", AttrValue::Int(rng.gen_range(0..1000)))]);
                e.ecall_publish(&c.publish_msg(&p));
            }
        }
        (e.clock(), stats_csv(&e.take_stats_log()))
    };
    let (a, csv_a) = run();
    let (b, csv_b) = run();
    assert_eq!(a, b);
    assert_eq!(csv_a, csv_b);
    assert!(csv_a.starts_with("op,sim_ns,hits,misses,swaps,resident_bytes\n"));
}

fn scaled_spec() -> WorkloadSpec {
    WorkloadSpec { profile: Profile::Tree(8), n_publications: 400, seed: 9, ..Default::default() }
}

#[test]
fn degradation_is_monotone_in_database_size() {
    let m = small_model();
    let sizes: Vec<u64> = (0..10).map(|i| m.epc_budget_bytes / 4 + i * (2 * m.epc_budget_bytes - m.epc_budget_bytes / 4) / 9).collect();
    let recs = sweep(&scaled_spec(), &sizes, &m);
    for w in recs.windows(2) {
        assert!(w[1].slowdown >= w[0].slowdown, "{} then {}", w[0].slowdown, w[1].slowdown);
        assert!(w[1].sim_ns_inside >= w[0].sim_ns_inside);
    }
    assert!(recs.iter().all(|r| r.slowdown >= 1.0));
    assert!(recs.last().unwrap().slowdown > 2.0);
}

#[test]
fn degradation_starts_before_the_budget_line() {
    let m = small_model();
    let at = m.epc_budget_bytes * 9 / 10;
    let r = &sweep(&scaled_spec(), &[at], &m)[0];
    assert!(r.slowdown > 1.5, "slowdown {} at 0.9x budget", r.slowdown);
    let no_reserve = CostModel { reserved_bytes: 0, ..m };
    let r0 = &sweep(&scaled_spec(), &[at], &no_reserve)[0];
    assert!(r0.slowdown < r.slowdown);
}

#[test]
fn calibration_hits_target_and_reports_errors() {
    let m = small_model();
    let spec = scaled_spec();
    let (db, budget) = (m.epc_budget_bytes * 25 / 16, m.epc_budget_bytes);
    let cal = calibrate(&m, 6.0, db, budget, &spec).unwrap();
    let r = &sweep(&spec, &[db], &cal)[0];
    assert!((r.slowdown - 6.0).abs() <= 0.3, "calibrated slowdown {}", r.slowdown);
    assert!(matches!(calibrate(&m, 1.0, db, budget, &spec), Err(CalibrationError::Unreachable { .. })));
    assert!(matches!(calibrate(&m, 6.0, budget, budget, &spec), Err(CalibrationError::DatabaseWithinBudget { .. })));
}

#[test]
fn cost_model_file() {
    let m = CostModel::parse("# demo\nswap_ns=5000\nreserved_bytes=1048576 # one MiB\n").unwrap();
    assert_eq!(m.swap_ns, 5000);
    assert_eq!(m.reserved_bytes, MIB);
    assert_eq!(m.epc_budget_bytes, 128 * MIB);
    assert!(CostModel::parse("swap_ns=50").is_err());
    assert!(CostModel::parse("bogus=1").is_err());
    assert!(CostModel::parse("reserved_bytes=999999999999").is_err());
}
