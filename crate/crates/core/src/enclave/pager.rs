//! LRU residency tracking for protected pages.

use super::cost::CostModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Touch {
    Hit,
    Miss,
    Swap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PageStats {
    pub hits: u64,
    pub misses: u64,
    pub swaps: u64,
}

impl PageStats {
    pub fn touches(&self) -> u64 {
        self.hits + self.misses + self.swaps
    }

    pub fn cost(&self, m: &CostModel) -> u64 {
        self.hits * m.hit_ns + self.misses * m.miss_ns + self.swaps * m.swap_ns
    }

    pub fn since(&self, earlier: &PageStats) -> PageStats {
        PageStats {
            hits: self.hits - earlier.hits,
            misses: self.misses - earlier.misses,
            swaps: self.swaps - earlier.swaps,
        }
    }

    pub fn add(&mut self, o: &PageStats) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.swaps += o.swaps;
    }
}

const NIL: u32 = u32::MAX;

/// Page ids are small dense integers; residency and recency live in flat
/// arrays indexed by id, forming an intrusive doubly linked LRU list.
#[derive(Clone, Debug)]
pub struct Pager {
    capacity: Option<u64>,
    prev: Vec<u32>,
    next: Vec<u32>,
    resident: Vec<bool>,
    /// Most recently used.
    head: u32,
    /// Least recently used.
    tail: u32,
    len: u64,
    stats: PageStats,
}

impl Pager {
    pub fn new(capacity_pages: u64) -> Self {
        assert!(capacity_pages > 0, "pager needs at least one page");
        Self::with_capacity(Some(capacity_pages))
    }

    /// No eviction ever happens; cold pages cost a miss once.
    pub fn unbounded() -> Self {
        Self::with_capacity(None)
    }

    pub fn for_model(m: &CostModel) -> Self {
        Self::new(m.usable_pages())
    }

    fn with_capacity(capacity: Option<u64>) -> Self {
        Self {
            capacity,
            prev: Vec::new(),
            next: Vec::new(),
            resident: Vec::new(),
            head: NIL,
            tail: NIL,
            len: 0,
            stats: PageStats::default(),
        }
    }

    pub fn capacity(&self) -> Option<u64> {
        self.capacity
    }

    pub fn resident_pages(&self) -> u64 {
        self.len
    }

    pub fn is_resident(&self, page: u32) -> bool {
        self.resident.get(page as usize).copied().unwrap_or(false)
    }

    pub fn stats(&self) -> PageStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = PageStats::default();
    }

    fn grow(&mut self, page: u32) {
        let need = page as usize + 1;
        if self.resident.len() < need {
            let n = need.max(self.resident.len() * 2);
            self.prev.resize(n, NIL);
            self.next.resize(n, NIL);
            self.resident.resize(n, false);
        }
    }

    fn unlink(&mut self, p: u32) {
        let (a, b) = (self.prev[p as usize], self.next[p as usize]);
        if a == NIL {
            self.head = b;
        } else {
            self.next[a as usize] = b;
        }
        if b == NIL {
            self.tail = a;
        } else {
            self.prev[b as usize] = a;
        }
    }

    fn push_front(&mut self, p: u32) {
        self.prev[p as usize] = NIL;
        self.next[p as usize] = self.head;
        if self.head != NIL {
            self.prev[self.head as usize] = p;
        }
        self.head = p;
        if self.tail == NIL {
            self.tail = p;
        }
    }

    pub fn touch(&mut self, page: u32) -> Touch {
        self.grow(page);
        if self.resident[page as usize] {
            if self.head != page {
                self.unlink(page);
                self.push_front(page);
            }
            self.stats.hits += 1;
            return Touch::Hit;
        }
        let full = self.capacity.is_some_and(|c| self.len >= c);
        if full {
            let victim = self.tail;
            self.unlink(victim);
            self.resident[victim as usize] = false;
            self.len -= 1;
        }
        self.resident[page as usize] = true;
        self.push_front(page);
        self.len += 1;
        if full {
            self.stats.swaps += 1;
            Touch::Swap
        } else {
            self.stats.misses += 1;
            Touch::Miss
        }
    }

    /// Touches each page in order, returning the simulated cost.
    pub fn touch_all(&mut self, pages: impl IntoIterator<Item = u32>, m: &CostModel) -> u64 {
        let before = self.stats;
        for p in pages {
            self.touch(p);
        }
        self.stats.since(&before).cost(m)
    }

    /// Makes pages resident in order without charging for them.
    pub fn warm(&mut self, pages: impl IntoIterator<Item = u32>) {
        let saved = self.stats;
        for p in pages {
            self.touch(p);
        }
        self.stats = saved;
    }

    /// Resident pages from most to least recently used.
    pub fn lru_order(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len as usize);
        let mut p = self.head;
        while p != NIL {
            out.push(p);
            p = self.next[p as usize];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_exactly() {
        let mut p = Pager::new(4);
        let got: Vec<Touch> = [1, 2, 3, 4, 1, 2].into_iter().map(|x| p.touch(x)).collect();
        use Touch::*;
        assert_eq!(got, vec![Miss, Miss, Miss, Miss, Hit, Hit]);
        assert_eq!(p.stats(), PageStats { hits: 2, misses: 4, swaps: 0 });
    }

    #[test]
    fn cyclic_over_capacity_always_swaps() {
        let mut p = Pager::new(4);
        for x in 0..8 {
            p.touch(x);
        }
        p.reset_stats();
        for _ in 0..5 {
            for x in 0..8 {
                assert_eq!(p.touch(x), Touch::Swap);
            }
        }
        assert_eq!(p.resident_pages(), 4);
    }

    #[test]
    fn lru_victim_is_least_recent() {
        let mut p = Pager::new(3);
        for x in [1, 2, 3, 1, 4] {
            p.touch(x);
        }
        assert!(!p.is_resident(2));
        assert_eq!(p.lru_order(), vec![4, 1, 3]);
    }

    #[test]
    fn unbounded_never_swaps() {
        let mut p = Pager::unbounded();
        let m = CostModel::default();
        let cost = p.touch_all((0..1000).chain(0..1000), &m);
        assert_eq!(cost, 1000 * m.miss_ns + 1000 * m.hit_ns);
        assert_eq!(p.stats().swaps, 0);
    }

    #[test]
    fn warm_is_free() {
        let mut p = Pager::new(2);
        p.warm([5, 6, 7]);
        assert_eq!(p.stats(), PageStats::default());
        assert_eq!(p.lru_order(), vec![7, 6]);
    }
}
