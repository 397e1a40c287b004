//! Address assignment for enclave data, used to turn index activity into
//! page touches. The runtime arena sits at address zero; subscription
//! extents are bump-allocated after it, with freed extents reused by size.

use std::collections::{BTreeMap, HashMap};

use crate::ids::FilterId;

/// Arena pages touched per ecall (argument copy-in and scratch).
pub const ARENA_TOUCHES: u64 = 4;

#[derive(Clone, Debug)]
pub struct Layout {
    page_size: u64,
    arena_pages: u64,
    next: u64,
    extents: HashMap<FilterId, (u64, u64)>,
    free: BTreeMap<u64, Vec<u64>>,
}

impl Layout {
    pub fn new(page_size: u64, arena_bytes: u64) -> Self {
        let arena_pages = arena_bytes.div_ceil(page_size);
        Self { page_size, arena_pages, next: arena_pages * page_size, extents: HashMap::new(), free: BTreeMap::new() }
    }

    pub fn alloc(&mut self, id: FilterId, len: u64) -> u64 {
        let addr = match self.free.get_mut(&len).and_then(|v| v.pop()) {
            Some(a) => a,
            None => {
                let a = self.next;
                self.next += len;
                a
            }
        };
        self.extents.insert(id, (addr, len));
        addr
    }

    pub fn free(&mut self, id: FilterId) {
        if let Some((addr, len)) = self.extents.remove(&id) {
            self.free.entry(len).or_default().push(addr);
        }
    }

    pub fn extent(&self, id: FilterId) -> Option<(u64, u64)> {
        self.extents.get(&id).copied()
    }

    /// Pages spanned by the extent of `id`.
    pub fn pages(&self, id: FilterId) -> std::ops::Range<u32> {
        match self.extents.get(&id) {
            Some(&(addr, len)) => (addr / self.page_size) as u32..(addr + len).div_ceil(self.page_size) as u32,
            None => 0..0,
        }
    }

    /// Arena pages touched by the `n`th ecall; cycles through the arena.
    pub fn arena_pages(&self, n: u64) -> impl Iterator<Item = u32> {
        let ap = self.arena_pages;
        (0..if ap == 0 { 0 } else { ARENA_TOUCHES }).map(move |k| ((n * ARENA_TOUCHES + k) % ap) as u32)
    }

    /// Every allocated page, arena first then extents in address order.
    pub fn all_pages(&self) -> Vec<u32> {
        let mut ext: Vec<(u64, u64)> = self.extents.values().copied().collect();
        ext.sort_unstable();
        let mut out: Vec<u32> = (0..self.arena_pages as u32).collect();
        for (addr, len) in ext {
            for p in (addr / self.page_size) as u32..(addr + len).div_ceil(self.page_size) as u32 {
                if out.last() != Some(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_follow_arena_and_reuse_holes() {
        let mut l = Layout::new(4096, 8192);
        let a = FilterId([1; 16]);
        let b = FilterId([2; 16]);
        assert_eq!(l.alloc(a, 192), 8192);
        assert_eq!(l.alloc(b, 4096), 8384);
        assert_eq!(l.pages(a), 2..3);
        assert_eq!(l.pages(b), 2..4);
        l.free(a);
        assert_eq!(l.pages(a), 0..0);
        let c = FilterId([3; 16]);
        assert_eq!(l.alloc(c, 192), 8192);
        assert_eq!(l.all_pages(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn arena_rotation() {
        let l = Layout::new(4096, 6 * 4096);
        assert_eq!(l.arena_pages(0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(l.arena_pages(1).collect::<Vec<_>>(), vec![4, 5, 0, 1]);
        assert_eq!(Layout::new(4096, 0).arena_pages(3).count(), 0);
    }
}
