//! Synthetic workloads, the paging sweep and swap-cost calibration.
//!
//! Subscription streams are unbounded and deterministic in the seed, so a
//! sweep can grow one index through ascending database sizes and
//! calibration can rebuild exactly the same index for a single size.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use crate::enclave::{CostModel, Layout, PageStats, Pager, MIB};
use crate::filter::{AttrValue, Constraint, Filter, Predicate, Publication};
use crate::ids::{FilterId, PubId, SenderId};
use crate::index::{subscription_bytes, ContainmentIndex, Subscription};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Equal-width overlapping intervals: no filter covers another.
    Flat,
    /// Disjoint chains of strictly nested intervals of the given depth.
    Chains(u32),
    /// Zipf-distributed attribute choice with random interval widths.
    Zipf,
    /// Aligned intervals forming a complete tree of the given fan-out,
    /// emitted level by level.
    Tree(u32),
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let (name, arg) = match s.find(['(', ':']) {
            Some(i) => (&s[..i], Some(s[i + 1..].trim_end_matches(')').trim())),
            None => (s, None),
        };
        let num = |d: u32| -> Option<u32> {
            match arg {
                None => Some(d),
                Some(a) => a.parse().ok().filter(|&n| n >= 1),
            }
        };
        match name {
            "flat" if arg.is_none() => Some(Profile::Flat),
            "zipf" if arg.is_none() => Some(Profile::Zipf),
            "chains" => num(8).map(Profile::Chains),
            "tree" => num(8).filter(|&f| f >= 2).map(Profile::Tree),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Profile::Flat => "flat".into(),
            Profile::Zipf => "zipf".into(),
            Profile::Chains(d) => format!("chains({d})"),
            Profile::Tree(f) => format!("tree({f})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub n_subscriptions: usize,
    /// Number of distinct attribute names subscriptions draw from.
    pub attributes: usize,
    pub profile: Profile,
    pub n_publications: usize,
    /// Mean fraction of stored subscriptions each publication should
    /// match; `None` draws publications uniformly from the value domain.
    pub match_rate: Option<f64>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n_subscriptions: 1000,
            attributes: 4,
            profile: Profile::Tree(8),
            n_publications: 10_000,
            match_rate: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("infeasible workload: {0}")]
    InfeasibleSpec(String),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

impl WorkloadSpec {
    /// Parses flat `key=value` text; `#` starts a comment. Missing keys keep
    /// defaults.
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| WorkloadError::InvalidSpec(format!("line {}: {m}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v = v.trim();
            let int = || v.parse::<u64>().map_err(|_| bad(&format!("not an integer: {v}")));
            match k.trim() {
                "n_subscriptions" => s.n_subscriptions = int()? as usize,
                "attributes" => s.attributes = int()? as usize,
                "profile" => s.profile = Profile::parse(v).ok_or_else(|| bad(&format!("unknown profile {v}")))?,
                "n_publications" => s.n_publications = int()? as usize,
                "seed" => s.seed = int()?,
                "match_rate" => {
                    s.match_rate = match v {
                        "none" | "" => None,
                        _ => Some(v.parse().map_err(|_| bad(&format!("not a number: {v}")))?),
                    }
                }
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.attributes == 0 || self.attributes > crate::filter::MAX_ATTRS {
            return Err(WorkloadError::InvalidSpec("attributes must be in 1..=64".into()));
        }
        if let Some(r) = self.match_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(WorkloadError::InvalidSpec("match_rate must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "n_subscriptions={}", self.n_subscriptions).unwrap();
        writeln!(out, "attributes={}", self.attributes).unwrap();
        writeln!(out, "profile={}", self.profile.render()).unwrap();
        writeln!(out, "n_publications={}", self.n_publications).unwrap();
        match self.match_rate {
            Some(r) => writeln!(out, "match_rate={r}").unwrap(),
            None => writeln!(out, "match_rate=none").unwrap(),
        }
        writeln!(out, "seed={}", self.seed).unwrap();
        out
    }
}

fn attr_name(i: usize) -> String {
    format!("a{i}")
}

fn range(attr: String, lo: i64, hi: i64) -> Filter {
    Filter::from_constraints([Constraint::new(attr, Predicate::int_range(Some(lo), Some(hi)))])
        .expect("generated ranges are well formed")
}

fn sub_id(seed: u64, i: u64) -> FilterId {
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&seed.to_be_bytes());
    b[8..].copy_from_slice(&i.to_be_bytes());
    FilterId(b)
}

fn pub_id(seed: u64, i: u64) -> PubId {
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&(!seed).to_be_bytes());
    b[8..].copy_from_slice(&i.to_be_bytes());
    PubId(b)
}

const ZIPF_SPAN: i64 = 1000;

/// Tree height: the deepest level whose interval width is one.
fn tree_height(fanout: u32) -> u32 {
    let mut h = 0;
    let mut w: i64 = 1;
    while let Some(n) = w.checked_mul(fanout as i64) {
        if n > 1 << 60 {
            break;
        }
        w = n;
        h += 1;
    }
    h
}

/// Unbounded deterministic stream of subscriptions for a spec.
pub struct SubscriptionStream {
    spec: WorkloadSpec,
    rng: ChaCha20Rng,
    next: u64,
    tree_level: u32,
    tree_order: Vec<u64>,
    tree_pos: usize,
    zipf: Option<Zipf<f64>>,
}

impl SubscriptionStream {
    pub fn new(spec: &WorkloadSpec) -> Self {
        let zipf = matches!(spec.profile, Profile::Zipf).then(|| Zipf::new(spec.attributes as u64, 1.0).unwrap());
        Self {
            spec: spec.clone(),
            rng: ChaCha20Rng::seed_from_u64(spec.seed),
            next: 0,
            tree_level: 0,
            tree_order: vec![0],
            tree_pos: 0,
            zipf,
        }
    }

    fn filter(&mut self, i: u64) -> Filter {
        let a = self.spec.attributes as u64;
        match self.spec.profile {
            Profile::Flat => {
                let k = (i / a) as i64;
                range(attr_name((i % a) as usize), 10 * k, 10 * k + 19)
            }
            Profile::Chains(d) => {
                let d = d as u64;
                let (chain, level) = (i / d, (i % d) as i64);
                let base = ((chain / a) * (2 * d + 2)) as i64;
                range(attr_name((chain % a) as usize), base + level, base + 2 * d as i64 - 1 - level)
            }
            Profile::Zipf => {
                let attr = self.zipf.unwrap().sample(&mut self.rng) as usize - 1;
                let lo = self.rng.gen_range(0..ZIPF_SPAN);
                let u: f64 = self.rng.gen();
                let width = (ZIPF_SPAN as f64 * u * u * u) as i64;
                range(attr_name(attr), lo, lo + width)
            }
            Profile::Tree(f) => {
                if self.tree_pos == self.tree_order.len() {
                    self.tree_level += 1;
                    let n = (f as u64).pow(self.tree_level);
                    self.tree_order = (0..n).collect();
                    self.tree_order.shuffle(&mut self.rng);
                    self.tree_pos = 0;
                }
                let k = self.tree_order[self.tree_pos] as i64;
                self.tree_pos += 1;
                let width = (f as i64).pow(tree_height(f) - self.tree_level);
                range("x".into(), k * width, (k + 1) * width - 1)
            }
        }
    }
}

impl Iterator for SubscriptionStream {
    type Item = Subscription;

    fn next(&mut self) -> Option<Subscription> {
        let i = self.next;
        self.next += 1;
        let f = self.filter(i).with_id(sub_id(self.spec.seed, i));
        let mut who = [0u8; 16];
        who[8..].copy_from_slice(&i.to_be_bytes());
        Some(Subscription::new(f, SenderId(who)))
    }
}

/// Value domain natural publications are drawn from: (attribute count, hi).
fn domain(spec: &WorkloadSpec, n_subs: usize) -> (usize, i64) {
    let a = spec.attributes as u64;
    let n = n_subs as u64;
    match spec.profile {
        Profile::Flat => (spec.attributes, 10 * (n / a + 2) as i64),
        Profile::Chains(d) => {
            let chains = n.div_ceil(d as u64);
            (spec.attributes, ((chains.div_ceil(a) + 1) * (2 * d as u64 + 2)) as i64)
        }
        Profile::Zipf => (spec.attributes, 2 * ZIPF_SPAN),
        Profile::Tree(f) => (1, (f as i64).pow(tree_height(f))),
    }
}

fn single(id: PubId, attr: String, v: i64) -> Publication {
    Publication::new(id, [(attr, AttrValue::Int(v))]).expect("one valid attribute")
}

/// Publications drawn uniformly from the profile's value domain.
pub fn natural_publications(spec: &WorkloadSpec, n_subs: usize, count: usize, stream: u64) -> Vec<Publication> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x5eed_0000_0000_0000 ^ stream);
    let (attrs, hi) = domain(spec, n_subs);
    (0..count as u64)
        .map(|i| {
            let attr = if let Profile::Tree(_) = spec.profile { "x".to_string() } else { attr_name(rng.gen_range(0..attrs)) };
            single(pub_id(spec.seed ^ stream, i), attr, rng.gen_range(0..hi))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub subscriptions: Vec<Subscription>,
    pub publications: Vec<Publication>,
}

impl Workload {
    /// Text rendering used for byte-level reproducibility checks.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.subscriptions {
            writeln!(out, "S {} {} {}", s.filter_id(), s.subscriber, s.filter).unwrap();
        }
        for p in &self.publications {
            writeln!(out, "P {} {}", p.id(), p.render()).unwrap();
        }
        out
    }
}

/// Brute-force mean fraction of subscriptions matched per publication.
pub fn measured_match_rate(subs: &[Subscription], pubs: &[Publication]) -> f64 {
    if subs.is_empty() || pubs.is_empty() {
        return 0.0;
    }
    let total: usize = pubs.iter().map(|p| subs.iter().filter(|s| s.filter.matches(p)).count()).sum();
    total as f64 / (pubs.len() as f64 * subs.len() as f64)
}

/// Generates subscriptions and publications. With a match-rate target the
/// publications mix points inside stored filters with points outside every
/// filter, chosen so the realised rate lands within 10% of the target.
pub fn generate(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    let subscriptions: Vec<Subscription> = SubscriptionStream::new(spec).take(spec.n_subscriptions).collect();
    let publications = match spec.match_rate {
        None => natural_publications(spec, spec.n_subscriptions, spec.n_publications, 0),
        Some(rate) => targeted_publications(spec, &subscriptions, rate)?,
    };
    Ok(Workload { subscriptions, publications })
}

fn targeted_publications(spec: &WorkloadSpec, subs: &[Subscription], rate: f64) -> Result<Vec<Publication>, WorkloadError> {
    let n_pub = spec.n_publications;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x7a26_e700_0000_0000);
    let target = rate * n_pub as f64 * subs.len() as f64;
    let mut hits: Vec<(String, i64)> = Vec::new();
    if target > 0.0 {
        if subs.is_empty() {
            return Err(WorkloadError::InfeasibleSpec("no subscriptions to match".into()));
        }
        let mut index = ContainmentIndex::new();
        for s in subs {
            index.insert(s.clone()).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
        }
        let mut sum = 0.0;
        let mut attempts = 0;
        while sum < 0.95 * target && hits.len() < n_pub && attempts < 50 * n_pub.max(1) {
            attempts += 1;
            let s = &subs[rng.gen_range(0..subs.len())];
            let c = &s.filter.constraints()[0];
            let Predicate::IntRange { lo: Some(lo), hi: Some(hi) } = c.pred else { continue };
            let v = rng.gen_range(lo..=hi);
            let count = index.match_all(&single(PubId::default(), c.attr.clone(), v)).stats.matched as f64;
            if sum + count <= 1.05 * target {
                sum += count;
                hits.push((c.attr.clone(), v));
            }
        }
        if sum < 0.9 * target {
            return Err(WorkloadError::InfeasibleSpec(format!(
                "match rate {rate} unreachable: best achieved {:.4}",
                sum / (n_pub as f64 * subs.len() as f64)
            )));
        }
    }
    let mut slots: Vec<Option<(String, i64)>> = hits.into_iter().map(Some).collect();
    slots.resize(n_pub, None);
    slots.shuffle(&mut rng);
    let miss_attr = if let Profile::Tree(_) = spec.profile { "x".to_string() } else { attr_name(0) };
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let (attr, v) = s.unwrap_or_else(|| (miss_attr.clone(), -1));
            single(pub_id(spec.seed, i as u64), attr, v)
        })
        .collect())
}

/// One measured point of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub db_bytes: u64,
    pub sim_ns_inside: u64,
    pub sim_ns_outside: u64,
    pub slowdown: f64,
    pub evaluations: u64,
    pub hits: u64,
    pub misses: u64,
    pub swaps: u64,
}

pub fn records_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("db_bytes,sim_ns_inside,sim_ns_outside,slowdown,evaluations,hits,misses,swaps\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{:.4},{},{},{},{}",
            r.db_bytes, r.sim_ns_inside, r.sim_ns_outside, r.slowdown, r.evaluations, r.hits, r.misses, r.swaps
        )
        .unwrap();
    }
    out
}

/// Page-touch trace of a matching run at one database size. Counts depend
/// only on page geometry and budget, never on per-touch costs.
pub struct PagedRun {
    pub db_bytes: u64,
    /// Every allocated page in allocation order; resident state after build.
    warm: Vec<u32>,
    /// Touches of the warm-up publications, then of the measured ones.
    trace: Vec<u32>,
    measured_from: usize,
    pub evaluations: u64,
}

impl PagedRun {
    fn replay(&self, mut pager: Pager) -> PageStats {
        pager.warm(self.warm.iter().copied());
        for &p in &self.trace[..self.measured_from] {
            pager.touch(p);
        }
        pager.reset_stats();
        for &p in &self.trace[self.measured_from..] {
            pager.touch(p);
        }
        pager.stats()
    }

    /// Counts inside the protected budget of `model`.
    pub fn inside(&self, model: &CostModel) -> PageStats {
        self.replay(Pager::for_model(model))
    }

    /// Counts with unbounded plain memory.
    pub fn outside(&self) -> PageStats {
        self.replay(Pager::unbounded())
    }

    pub fn record(&self, model: &CostModel) -> RunRecord {
        self.record_from(model, self.inside(model), self.outside())
    }

    fn record_from(&self, model: &CostModel, inside: PageStats, outside: PageStats) -> RunRecord {
        let sim_ns_inside = inside.cost(model);
        let sim_ns_outside = outside.cost(model);
        RunRecord {
            db_bytes: self.db_bytes,
            sim_ns_inside,
            sim_ns_outside,
            slowdown: sim_ns_inside as f64 / sim_ns_outside.max(1) as f64,
            evaluations: self.evaluations,
            hits: inside.hits,
            misses: inside.misses,
            swaps: inside.swaps,
        }
    }
}

/// Grows an index along the spec's subscription stream and records paged
/// matching runs at requested sizes.
pub struct SweepBuilder {
    spec: WorkloadSpec,
    stream: SubscriptionStream,
    index: ContainmentIndex,
    layout: Layout,
}

impl SweepBuilder {
    pub fn new(spec: &WorkloadSpec, model: &CostModel) -> Self {
        Self {
            spec: spec.clone(),
            stream: SubscriptionStream::new(spec),
            index: ContainmentIndex::new(),
            layout: Layout::new(model.page_size, model.arena_bytes),
        }
    }

    pub fn index(&self) -> &ContainmentIndex {
        &self.index
    }

    /// Inserts subscriptions until the index footprint reaches `db_bytes`.
    pub fn grow_to(&mut self, db_bytes: u64) {
        while self.index.resident_bytes() < db_bytes {
            let s = self.stream.next().expect("unbounded stream");
            let id = s.filter_id();
            let bytes = subscription_bytes(&s.filter);
            self.index.insert(s).expect("stream ids are unique");
            self.layout.alloc(id, bytes);
        }
    }

    /// Records warm-up and measured publication batches at the current size.
    /// Tracing runs in parallel; the trace itself is order-preserving.
    pub fn trace(&self) -> PagedRun {
        let n = self.spec.n_publications;
        let pubs = natural_publications(&self.spec, self.index.len(), 2 * n, 1);
        let per_pub = crate::par::map_range(pubs.len(), |i| {
            let mut pages: Vec<u32> = self.layout.arena_pages(i as u64).collect();
            let r = self.index.match_with(&pubs[i], |entries| {
                for e in entries {
                    pages.extend(self.layout.pages(e.filter_id()));
                }
            });
            (pages, r.stats.evaluations)
        });
        let measured_from = per_pub[..n].iter().map(|(p, _)| p.len()).sum();
        let evaluations = per_pub[n..].iter().map(|(_, e)| e).sum();
        PagedRun {
            db_bytes: self.index.resident_bytes(),
            warm: self.layout.all_pages(),
            trace: per_pub.into_iter().flat_map(|(p, _)| p).collect(),
            measured_from,
            evaluations,
        }
    }
}

/// Runs the sweep over ascending `sizes` (bytes).
pub fn sweep(spec: &WorkloadSpec, sizes: &[u64], model: &CostModel) -> Vec<RunRecord> {
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let mut b = SweepBuilder::new(spec, model);
    sorted
        .into_iter()
        .map(|size| {
            b.grow_to(size);
            let mut r = b.trace().record(model);
            r.db_bytes = size;
            r
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("database of {db_bytes} bytes does not exceed the {budget_bytes}-byte budget")]
    DatabaseWithinBudget { db_bytes: u64, budget_bytes: u64 },
    #[error("target slowdown {target} unreachable (swap cost would have to be {needed:.1} ns, not above miss cost {miss_ns} ns)")]
    Unreachable { target: f64, needed: f64, miss_ns: u64 },
    #[error("workload causes no swaps at this size")]
    NoSwaps,
}

/// Solves for the swap cost that makes the slowdown of a `db_bytes` run
/// against a `budget_bytes` budget equal `target`.
///
/// Hit, miss and swap counts do not depend on the costs, so the slowdown is
/// affine in `swap_ns` and the solve is exact up to integer rounding.
pub fn calibrate(
    model: &CostModel,
    target: f64,
    db_bytes: u64,
    budget_bytes: u64,
    spec: &WorkloadSpec,
) -> Result<CostModel, CalibrationError> {
    if db_bytes <= budget_bytes {
        return Err(CalibrationError::DatabaseWithinBudget { db_bytes, budget_bytes });
    }
    let base = CostModel { epc_budget_bytes: budget_bytes, ..*model };
    let mut b = SweepBuilder::new(spec, &base);
    b.grow_to(db_bytes);
    let run = b.trace();
    let inside = run.inside(&base);
    let outside = run.outside().cost(&base) as f64;
    if inside.swaps == 0 {
        return Err(CalibrationError::NoSwaps);
    }
    let rest = (inside.hits * base.hit_ns + inside.misses * base.miss_ns) as f64;
    let needed = (target * outside - rest) / inside.swaps as f64;
    let swap_ns = needed.round();
    if swap_ns <= base.miss_ns as f64 {
        return Err(CalibrationError::Unreachable { target, needed, miss_ns: base.miss_ns });
    }
    Ok(CostModel { swap_ns: swap_ns as u64, ..base })
}

/// Parses `64,96,128MiB` style lists. A trailing unit applies to every
/// entry without its own; recognised units are B, KiB, MiB and GiB.
pub fn parse_sizes(s: &str) -> Result<Vec<u64>, String> {
    fn split_unit(t: &str) -> (&str, Option<u64>) {
        for (suffix, mult) in [("GiB", 1u64 << 30), ("MiB", MIB), ("KiB", 1 << 10), ("B", 1)] {
            if let Some(n) = t.strip_suffix(suffix) {
                return (n.trim(), Some(mult));
            }
        }
        (t, None)
    }
    let items: Vec<&str> = s.split(',').map(str::trim).collect();
    let default_unit = items.last().and_then(|t| split_unit(t).1).unwrap_or(1);
    items
        .iter()
        .map(|t| {
            let (num, unit) = split_unit(t);
            let n: f64 = num.parse().map_err(|_| format!("bad size {t:?}"))?;
            if n <= 0.0 {
                return Err(format!("size must be positive: {t:?}"));
            }
            Ok((n * unit.unwrap_or(default_unit) as f64).round() as u64)
        })
        .collect()
}

/// Line chart of slowdown against database size with a vertical marker at
/// the protected-memory budget.
pub fn sweep_svg(records: &[RunRecord], budget_bytes: u64) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 30.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    let mib = |b: u64| b as f64 / MIB as f64;
    let x_max = records.iter().map(|r| mib(r.db_bytes)).fold(mib(budget_bytes), f64::max) * 1.1;
    let y_max = records.iter().map(|r| r.slowdown).fold(1.0, f64::max) * 1.1;
    let px = |x: f64| L + x / x_max * (W - L - R);
    let py = |y: f64| H - B - y / y_max * (H - T - B);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">Matching slowdown vs subscription database size</text>"#,
        W / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<path d="M{L} {T} V{} H{}" stroke="black" fill="none"/>"#,
        H - B,
        W - R
    )
    .unwrap();
    let ticks = 5;
    for i in 0..=ticks {
        let xv = x_max * i as f64 / ticks as f64;
        let yv = y_max * i as f64 / ticks as f64;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.0}</text>"#,
            px(xv),
            H - B + 16.0,
            xv
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{:.1}</text>"#,
            L - 6.0,
            py(yv) + 4.0,
            yv
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">database size (MiB)</text>"#,
        (L + W - R) / 2.0,
        H - 18.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 18 {})">slowdown (inside / outside)</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    )
    .unwrap();
    let bx = px(mib(budget_bytes));
    writeln!(
        s,
        r#"<line x1="{bx:.1}" y1="{T}" x2="{bx:.1}" y2="{}" stroke="firebrick" stroke-dasharray="6 4"/>"#,
        H - B
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" fill="firebrick">EPC {:.0} MiB</text>"#,
        bx + 4.0,
        T + 12.0,
        mib(budget_bytes)
    )
    .unwrap();
    let pts: Vec<String> =
        records.iter().map(|r| format!("{:.1},{:.1}", px(mib(r.db_bytes)), py(r.slowdown))).collect();
    writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" ")).unwrap();
    for r in records {
        writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="steelblue"><title>{:.0} MiB: {:.2}x</title></circle>"#,
            px(mib(r.db_bytes)),
            py(r.slowdown),
            mib(r.db_bytes),
            r.slowdown
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Per-attribute counts, handy for inspecting generated workloads.
pub fn attribute_histogram(subs: &[Subscription]) -> HashMap<String, usize> {
    let mut h = HashMap::new();
    for s in subs {
        for c in s.filter.constraints() {
            *h.entry(c.attr.clone()).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_syntax() {
        assert_eq!(Profile::parse("chains(8)"), Some(Profile::Chains(8)));
        assert_eq!(Profile::parse("chains:4"), Some(Profile::Chains(4)));
        assert_eq!(Profile::parse("tree"), Some(Profile::Tree(8)));
        assert_eq!(Profile::parse("flat"), Some(Profile::Flat));
        assert_eq!(Profile::parse("tree(1)"), None);
        assert_eq!(Profile::parse("mesh"), None);
    }

    #[test]
    fn spec_text_round_trip() {
        let s = WorkloadSpec { profile: Profile::Chains(3), match_rate: Some(0.25), ..Default::default() };
        assert_eq!(WorkloadSpec::parse(&s.render()).unwrap(), s);
        assert!(WorkloadSpec::parse("match_rate=2").is_err());
        assert!(WorkloadSpec::parse("colour=blue").is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_sizes("64,96,128,160,200MiB").unwrap(), vec![64 * MIB, 96 * MIB, 128 * MIB, 160 * MIB, 200 * MIB]);
        assert_eq!(parse_sizes("1KiB,2048").unwrap(), vec![1024, 2048]);
        assert!(parse_sizes("x").is_err());
    }

    #[test]
    fn tree_levels_nest() {
        let spec = WorkloadSpec { profile: Profile::Tree(4), ..Default::default() };
        let subs: Vec<_> = SubscriptionStream::new(&spec).take(1 + 4 + 16).collect();
        let mut ix = ContainmentIndex::new();
        for s in subs {
            ix.insert(s).unwrap();
        }
        assert_eq!(ix.roots().len(), 1);
        assert_eq!(ix.edges().len(), 20);
        ix.validate().unwrap();
    }

    #[test]
    fn svg_has_budget_marker() {
        let r = RunRecord {
            db_bytes: 64 * MIB,
            sim_ns_inside: 10,
            sim_ns_outside: 10,
            slowdown: 1.0,
            evaluations: 1,
            hits: 1,
            misses: 0,
            swaps: 0,
        };
        let svg = sweep_svg(&[r], 128 * MIB);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("EPC 128 MiB"));
        assert!(svg.contains("<polyline"));
    }
}
