//! Simulated-time cost model for the protected page cache.

use std::fmt::Write as _;

use thiserror::Error;

pub const MIB: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub epc_budget_bytes: u64,
    pub page_size: u64,
    pub hit_ns: u64,
    pub miss_ns: u64,
    pub swap_ns: u64,
    pub reserved_bytes: u64,
    /// Runtime scratch (ecall buffers, heap) resident alongside the index.
    pub arena_bytes: u64,
    /// Fixed charge per envelope opened or sealed.
    pub envelope_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            epc_budget_bytes: 128 * MIB,
            page_size: 4096,
            hit_ns: 5,
            miss_ns: 100,
            swap_ns: 4000,
            reserved_bytes: 32 * MIB,
            arena_bytes: 4 * MIB,
            envelope_ns: 1000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostModelError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid cost model: {0}")]
    Invalid(&'static str),
}

const KEYS: [&str; 8] = [
    "epc_budget_bytes",
    "page_size",
    "hit_ns",
    "miss_ns",
    "swap_ns",
    "reserved_bytes",
    "arena_bytes",
    "envelope_ns",
];

impl CostModel {
    pub fn validate(&self) -> Result<(), CostModelError> {
        if self.page_size == 0 {
            return Err(CostModelError::Invalid("page_size must be positive"));
        }
        if !(self.swap_ns > self.miss_ns && self.miss_ns > self.hit_ns && self.hit_ns > 0) {
            return Err(CostModelError::Invalid("need swap_ns > miss_ns > hit_ns > 0"));
        }
        if self.reserved_bytes >= self.epc_budget_bytes {
            return Err(CostModelError::Invalid("reserved_bytes must be below epc_budget_bytes"));
        }
        if self.usable_pages() == 0 {
            return Err(CostModelError::Invalid("budget leaves no usable pages"));
        }
        Ok(())
    }

    /// Pages available to enclave data once reserved memory is taken.
    pub fn usable_pages(&self) -> u64 {
        (self.epc_budget_bytes - self.reserved_bytes.min(self.epc_budget_bytes)) / self.page_size.max(1)
    }

    pub fn arena_pages(&self) -> u64 {
        self.arena_bytes.div_ceil(self.page_size)
    }

    /// Parses `key=value` lines; `#` starts a comment. Missing keys keep
    /// their defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, CostModelError> {
        let mut m = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CostModelError::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let v: u64 = v.trim().parse().map_err(|e| err(format!("{}: {e}", v.trim())))?;
            let slot = match k.trim() {
                "epc_budget_bytes" => &mut m.epc_budget_bytes,
                "page_size" => &mut m.page_size,
                "hit_ns" => &mut m.hit_ns,
                "miss_ns" => &mut m.miss_ns,
                "swap_ns" => &mut m.swap_ns,
                "reserved_bytes" => &mut m.reserved_bytes,
                "arena_bytes" => &mut m.arena_bytes,
                "envelope_ns" => &mut m.envelope_ns,
                other => return Err(err(format!("unknown key {other:?}"))),
            };
            *slot = v;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_config(&self) -> String {
        let vals = [
            self.epc_budget_bytes,
            self.page_size,
            self.hit_ns,
            self.miss_ns,
            self.swap_ns,
            self.reserved_bytes,
            self.arena_bytes,
            self.envelope_ns,
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}
