//! Publications, conjunctive filters, matching and the covering relation.
//!
//! A filter is a conjunction of at most one constraint per attribute, each
//! drawn from {integer range, string equality, string prefix}. Restricting
//! the algebra this way makes covering decidable attribute by attribute.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{FilterId, PubId};

pub const MAX_ATTRS: usize = 64;
pub const MAX_NAME_LEN: usize = 64;
pub const MAX_STR_LEN: usize = 255;

/// Value carried by a publication attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AttrValue {
    Int(i64),
    Str(String),
}

impl AttrValue {
    fn tag(&self) -> u8 {
        match self {
            AttrValue::Int(_) => 0,
            AttrValue::Str(_) => 1,
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_owned())
    }
}

pub fn is_valid_name(name: &str) -> bool {
    let b = name.as_bytes();
    !b.is_empty()
        && b.len() <= MAX_NAME_LEN
        && (b[0].is_ascii_alphabetic() || b[0] == b'_')
        && b.iter().all(|c| c.is_ascii_alphanumeric() || *c == b'_')
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PublicationError {
    #[error("publication must carry between 1 and {MAX_ATTRS} attributes, got {0}")]
    AttributeCount(usize),
    #[error("invalid attribute name {0:?}")]
    InvalidName(String),
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("string value for {0:?} exceeds {MAX_STR_LEN} bytes")]
    ValueTooLong(String),
    #[error("malformed publication text at byte {0}")]
    Syntax(usize),
}

/// A set of typed attribute/value pairs; the unit of routed content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Publication {
    id: PubId,
    attrs: BTreeMap<String, AttrValue>,
}

impl Publication {
    pub fn new<I, K>(id: PubId, attrs: I) -> Result<Self, PublicationError>
    where
        I: IntoIterator<Item = (K, AttrValue)>,
        K: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in attrs {
            let k = k.into();
            if !is_valid_name(&k) {
                return Err(PublicationError::InvalidName(k));
            }
            if let AttrValue::Str(s) = &v {
                if s.len() > MAX_STR_LEN {
                    return Err(PublicationError::ValueTooLong(k));
                }
            }
            if map.contains_key(&k) {
                return Err(PublicationError::DuplicateAttribute(k));
            }
            map.insert(k, v);
        }
        if map.is_empty() || map.len() > MAX_ATTRS {
            return Err(PublicationError::AttributeCount(map.len()));
        }
        Ok(Self { id, attrs: map })
    }

    pub fn id(&self) -> PubId {
        self.id
    }

    pub fn get(&self, name: &str) -> Option<&AttrValue> {
        self.attrs.get(name)
    }

    pub fn attrs(&self) -> impl Iterator<Item = (&str, &AttrValue)> {
        self.attrs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// Parses `name=value,...` where a value is an integer, a double-quoted
    /// string, or a bare token taken as a string.
    pub fn parse(text: &str, id: PubId) -> Result<Self, PublicationError> {
        let mut lx = Lexer::new(text);
        let mut pairs = Vec::new();
        loop {
            lx.skip_ws();
            let start = lx.pos;
            let name = match lx.ident() {
                Some(n) => n.to_owned(),
                None => return Err(PublicationError::Syntax(start)),
            };
            lx.skip_ws();
            if !lx.eat(b'=') {
                return Err(PublicationError::Syntax(lx.pos));
            }
            lx.skip_ws();
            let value = if lx.peek() == Some(b'"') {
                match lx.string_lit() {
                    Ok(s) => AttrValue::Str(s),
                    Err(e) => return Err(PublicationError::Syntax(e.pos())),
                }
            } else {
                let vstart = lx.pos;
                while let Some(c) = lx.peek() {
                    if c == b',' {
                        break;
                    }
                    lx.pos += 1;
                }
                let raw = text[vstart..lx.pos].trim();
                if raw.is_empty() {
                    return Err(PublicationError::Syntax(vstart));
                }
                match raw.parse::<i64>() {
                    Ok(v) => AttrValue::Int(v),
                    Err(_) => AttrValue::Str(raw.to_owned()),
                }
            };
            pairs.push((name, value));
            lx.skip_ws();
            if lx.at_end() {
                break;
            }
            if !lx.eat(b',') {
                return Err(PublicationError::Syntax(lx.pos));
            }
        }
        Publication::new(id, pairs)
    }

    /// Canonical text form, attributes in byte order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (k, v)) in self.attrs.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            match v {
                AttrValue::Int(n) => write!(out, "{k}={n}").unwrap(),
                AttrValue::Str(s) => {
                    write!(out, "{k}=").unwrap();
                    push_quoted(&mut out, s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("truncated publication encoding")]
    Truncated,
    #[error("unknown value tag {0}")]
    BadTag(u8),
    #[error("attribute name or value is not valid UTF-8")]
    NonUtf8,
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("attributes are not in canonical order")]
    NotCanonical,
    #[error("invalid attribute name {0:?}")]
    InvalidName(String),
    #[error("attribute count {0} out of range")]
    AttributeCount(usize),
    #[error("{0} trailing bytes after publication")]
    TrailingBytes(usize),
}

/// Big-endian layout: `u16 count`, then per attribute (byte-sorted by name)
/// `u8 name_len, name, u8 tag, (i64 | u8 len, bytes)`, then the 16-byte id.
pub fn encode_publication(p: &Publication) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + p.attrs.len() * 16 + 16);
    out.extend_from_slice(&(p.attrs.len() as u16).to_be_bytes());
    for (k, v) in &p.attrs {
        out.push(k.len() as u8);
        out.extend_from_slice(k.as_bytes());
        out.push(v.tag());
        match v {
            AttrValue::Int(n) => out.extend_from_slice(&n.to_be_bytes()),
            AttrValue::Str(s) => {
                out.push(s.len() as u8);
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
    out.extend_from_slice(&p.id.0);
    out
}

pub fn decode_publication(bytes: &[u8]) -> Result<Publication, EncodingError> {
    let mut r = crate::codec::Reader::new(bytes);
    let trunc = |_| EncodingError::Truncated;
    let count = r.u16().map_err(trunc)? as usize;
    if count == 0 || count > MAX_ATTRS {
        return Err(EncodingError::AttributeCount(count));
    }
    let mut attrs = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let nlen = r.u8().map_err(trunc)? as usize;
        let name = std::str::from_utf8(r.take(nlen).map_err(trunc)?)
            .map_err(|_| EncodingError::NonUtf8)?
            .to_owned();
        if !is_valid_name(&name) {
            return Err(EncodingError::InvalidName(name));
        }
        if let Some(prev) = &last {
            match prev.as_bytes().cmp(name.as_bytes()) {
                std::cmp::Ordering::Equal => return Err(EncodingError::DuplicateAttribute(name)),
                std::cmp::Ordering::Greater => return Err(EncodingError::NotCanonical),
                std::cmp::Ordering::Less => {}
            }
        }
        let value = match r.u8().map_err(trunc)? {
            0 => AttrValue::Int(r.i64().map_err(trunc)?),
            1 => {
                let len = r.u8().map_err(trunc)? as usize;
                let s = std::str::from_utf8(r.take(len).map_err(trunc)?)
                    .map_err(|_| EncodingError::NonUtf8)?;
                AttrValue::Str(s.to_owned())
            }
            t => return Err(EncodingError::BadTag(t)),
        };
        last = Some(name.clone());
        attrs.insert(name, value);
    }
    let id = PubId(r.array::<16>().map_err(trunc)?);
    if r.remaining() != 0 {
        return Err(EncodingError::TrailingBytes(r.remaining()));
    }
    Ok(Publication { id, attrs })
}

/// Per-attribute predicate. Integer bounds use `None` for the infinite
/// sentinels, so `[i64::MIN, i64::MAX]` and "unbounded" stay distinct.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Predicate {
    IntRange { lo: Option<i64>, hi: Option<i64> },
    StrEq(String),
    StrPrefix(String),
}

impl Predicate {
    pub fn int_range(lo: Option<i64>, hi: Option<i64>) -> Self {
        Predicate::IntRange { lo, hi }
    }

    fn satisfied_by(&self, v: &AttrValue) -> bool {
        match (self, v) {
            (Predicate::IntRange { lo, hi }, AttrValue::Int(x)) => {
                lo.map_or(true, |l| l <= *x) && hi.map_or(true, |h| *x <= h)
            }
            (Predicate::StrEq(s), AttrValue::Str(x)) => s == x,
            (Predicate::StrPrefix(s), AttrValue::Str(x)) => x.as_bytes().starts_with(s.as_bytes()),
            _ => false,
        }
    }

    /// True when every value satisfying `specific` satisfies `self`.
    pub fn subsumes(&self, specific: &Predicate) -> bool {
        use Predicate::*;
        match (self, specific) {
            (IntRange { lo: glo, hi: ghi }, IntRange { lo: slo, hi: shi }) => {
                let lo_ok = match (glo, slo) {
                    (None, _) => true,
                    (Some(_), None) => false,
                    (Some(g), Some(s)) => g <= s,
                };
                let hi_ok = match (ghi, shi) {
                    (None, _) => true,
                    (Some(_), None) => false,
                    (Some(g), Some(s)) => s <= g,
                };
                lo_ok && hi_ok
            }
            (StrPrefix(g), StrPrefix(s)) | (StrPrefix(g), StrEq(s)) => {
                s.as_bytes().starts_with(g.as_bytes())
            }
            (StrEq(g), StrEq(s)) => g == s,
            _ => false,
        }
    }

    /// Conjunction of two predicates on the same attribute, or `None` when no
    /// value satisfies both.
    pub fn intersect(&self, other: &Predicate) -> Option<Predicate> {
        use Predicate::*;
        match (self, other) {
            (IntRange { lo: alo, hi: ahi }, IntRange { lo: blo, hi: bhi }) => {
                let lo = match (alo, blo) {
                    (None, x) | (x, None) => *x,
                    (Some(a), Some(b)) => Some(*a.max(b)),
                };
                let hi = match (ahi, bhi) {
                    (None, x) | (x, None) => *x,
                    (Some(a), Some(b)) => Some(*a.min(b)),
                };
                match (lo, hi) {
                    (Some(l), Some(h)) if l > h => None,
                    _ => Some(IntRange { lo, hi }),
                }
            }
            (StrEq(a), StrEq(b)) => (a == b).then(|| StrEq(a.clone())),
            (StrEq(e), StrPrefix(p)) | (StrPrefix(p), StrEq(e)) => {
                e.as_bytes().starts_with(p.as_bytes()).then(|| StrEq(e.clone()))
            }
            (StrPrefix(a), StrPrefix(b)) => {
                if b.as_bytes().starts_with(a.as_bytes()) {
                    Some(StrPrefix(b.clone()))
                } else if a.as_bytes().starts_with(b.as_bytes()) {
                    Some(StrPrefix(a.clone()))
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    fn literal_len(&self) -> usize {
        match self {
            Predicate::IntRange { .. } => 0,
            Predicate::StrEq(s) | Predicate::StrPrefix(s) => s.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub attr: String,
    pub pred: Predicate,
}

impl Constraint {
    pub fn new(attr: impl Into<String>, pred: Predicate) -> Self {
        Self { attr: attr.into(), pred }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FilterError {
    #[error("syntax error at byte {pos}: expected {}", expected.join(" or "))]
    Syntax { pos: usize, expected: Vec<&'static str> },
    #[error("unsupported operator `{op}` at byte {pos}")]
    UnsupportedOperator { op: String, pos: usize },
    #[error("filter is unsatisfiable on attribute {attr:?}")]
    Unsatisfiable { attr: String },
    #[error("invalid attribute name {0:?}")]
    InvalidName(String),
    #[error("string literal exceeds {MAX_STR_LEN} bytes")]
    LiteralTooLong,
    #[error("integer range on {0:?} has no finite bound")]
    UnboundedRange(String),
    #[error("filter has no constraints")]
    Empty,
    #[error("filter has more than {MAX_ATTRS} constraints")]
    TooManyConstraints,
}

/// A normalized conjunction: constraints sorted by attribute, one per
/// attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Filter {
    id: FilterId,
    constraints: Vec<Constraint>,
}

impl Filter {
    /// Normalizes raw constraints: merges constraints on the same attribute
    /// and rejects unsatisfiable conjunctions. The id is derived from the
    /// canonical text; use [`Filter::with_id`] to assign one.
    pub fn from_constraints(raw: impl IntoIterator<Item = Constraint>) -> Result<Self, FilterError> {
        let mut merged: BTreeMap<String, Predicate> = BTreeMap::new();
        for c in raw {
            if !is_valid_name(&c.attr) {
                return Err(FilterError::InvalidName(c.attr));
            }
            match &c.pred {
                Predicate::IntRange { lo: None, hi: None } => {
                    return Err(FilterError::UnboundedRange(c.attr))
                }
                Predicate::IntRange { lo: Some(l), hi: Some(h) } if l > h => {
                    return Err(FilterError::Unsatisfiable { attr: c.attr })
                }
                Predicate::StrEq(s) | Predicate::StrPrefix(s) if s.len() > MAX_STR_LEN => {
                    return Err(FilterError::LiteralTooLong)
                }
                _ => {}
            }
            match merged.get(&c.attr) {
                None => {
                    merged.insert(c.attr, c.pred);
                }
                Some(prev) => match prev.intersect(&c.pred) {
                    Some(p) => {
                        merged.insert(c.attr, p);
                    }
                    None => return Err(FilterError::Unsatisfiable { attr: c.attr }),
                },
            }
        }
        if merged.is_empty() {
            return Err(FilterError::Empty);
        }
        if merged.len() > MAX_ATTRS {
            return Err(FilterError::TooManyConstraints);
        }
        let constraints: Vec<Constraint> =
            merged.into_iter().map(|(attr, pred)| Constraint { attr, pred }).collect();
        let mut f = Filter { id: FilterId::default(), constraints };
        f.id = FilterId::derive(&f.render());
        Ok(f)
    }

    pub fn with_id(mut self, id: FilterId) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> FilterId {
        self.id
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn get(&self, attr: &str) -> Option<&Predicate> {
        self.constraints
            .binary_search_by(|c| c.attr.as_str().cmp(attr))
            .ok()
            .map(|i| &self.constraints[i].pred)
    }

    /// Same constraints, ignoring the id.
    pub fn same_shape(&self, other: &Filter) -> bool {
        self.constraints == other.constraints
    }

    pub fn matches(&self, p: &Publication) -> bool {
        self.constraints
            .iter()
            .all(|c| p.attrs.get(&c.attr).is_some_and(|v| c.pred.satisfied_by(v)))
    }

    /// `self` covers `specific` iff every publication matching `specific`
    /// also matches `self`.
    pub fn covers(&self, specific: &Filter) -> bool {
        if self.constraints.len() > specific.constraints.len() {
            return false;
        }
        let mut s = specific.constraints.iter();
        'outer: for g in &self.constraints {
            for c in s.by_ref() {
                match c.attr.cmp(&g.attr) {
                    std::cmp::Ordering::Less => continue,
                    std::cmp::Ordering::Equal => {
                        if g.pred.subsumes(&c.pred) {
                            continue 'outer;
                        }
                        return false;
                    }
                    std::cmp::Ordering::Greater => return false,
                }
            }
            return false;
        }
        true
    }

    /// Some publication matches both filters.
    pub fn intersects(&self, other: &Filter) -> bool {
        let (mut a, mut b) = (self.constraints.iter().peekable(), other.constraints.iter().peekable());
        while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
            match x.attr.cmp(&y.attr) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    if x.pred.intersect(&y.pred).is_none() {
                        return false;
                    }
                    a.next();
                    b.next();
                }
            }
        }
        true
    }

    /// Total bytes of string literals, used by the memory accounting.
    pub fn literal_bytes(&self) -> usize {
        self.constraints.iter().map(|c| c.pred.literal_len()).sum()
    }

    /// Canonical text: attributes in byte order, ranges as `>=`/`<=` pairs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let sep = |out: &mut String| {
            if !out.is_empty() {
                out.push_str(" && ");
            }
        };
        for c in &self.constraints {
            match &c.pred {
                Predicate::IntRange { lo, hi } => {
                    if let Some(l) = lo {
                        sep(&mut out);
                        write!(out, "{} >= {l}", c.attr).unwrap();
                    }
                    if let Some(h) = hi {
                        sep(&mut out);
                        write!(out, "{} <= {h}", c.attr).unwrap();
                    }
                }
                Predicate::StrEq(s) => {
                    sep(&mut out);
                    write!(out, "{} == ", c.attr).unwrap();
                    push_quoted(&mut out, s);
                }
                Predicate::StrPrefix(s) => {
                    sep(&mut out);
                    write!(out, "{} prefix ", c.attr).unwrap();
                    push_quoted(&mut out, s);
                }
            }
        }
        out
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FilterId {
    /// Content-derived id: the first 16 bytes of SHA-256 over `text`.
    pub fn derive(text: &str) -> Self {
        let d = Sha256::digest(text.as_bytes());
        FilterId(d[..16].try_into().unwrap())
    }
}

pub fn covers(general: &Filter, specific: &Filter) -> bool {
    general.covers(specific)
}

pub fn render_filter(f: &Filter) -> String {
    f.render()
}

fn push_quoted(out: &mut String, s: &str) {
    out.push('"');
    for ch in s.chars() {
        if ch == '"' || ch == '\\' {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('"');
}

const EXPECT_OP: &[&str] = &["==", "!=", "<", "<=", ">", ">=", "prefix"];

/// Parses `name op literal ( && name op literal )*` into a normalized filter.
pub fn parse_filter(text: &str) -> Result<Filter, FilterError> {
    let mut lx = Lexer::new(text);
    let mut raw = Vec::new();
    loop {
        lx.skip_ws();
        let name_pos = lx.pos;
        let name = lx.ident().ok_or(FilterError::Syntax {
            pos: name_pos,
            expected: vec!["attribute name"],
        })?;
        if name.len() > MAX_NAME_LEN {
            return Err(FilterError::InvalidName(name.to_owned()));
        }
        lx.skip_ws();
        let op_pos = lx.pos;
        let op = lx.operator().ok_or(FilterError::Syntax {
            pos: op_pos,
            expected: EXPECT_OP.to_vec(),
        })?;
        lx.skip_ws();
        let lit_pos = lx.pos;
        let pred = match op {
            "prefix" => match lx.peek() {
                Some(b'"') => Predicate::StrPrefix(lx.string_lit()?),
                _ => {
                    return Err(FilterError::Syntax { pos: lit_pos, expected: vec!["string literal"] })
                }
            },
            "!=" => return Err(FilterError::UnsupportedOperator { op: op.into(), pos: op_pos }),
            "==" if lx.peek() == Some(b'"') => Predicate::StrEq(lx.string_lit()?),
            _ => {
                let v = lx.int_lit().ok_or(FilterError::Syntax {
                    pos: lit_pos,
                    expected: if op == "==" {
                        vec!["integer literal", "string literal"]
                    } else {
                        vec!["integer literal"]
                    },
                })?;
                let unsat = || FilterError::Unsatisfiable { attr: name.to_owned() };
                match op {
                    "==" => Predicate::int_range(Some(v), Some(v)),
                    "<=" => Predicate::int_range(None, Some(v)),
                    ">=" => Predicate::int_range(Some(v), None),
                    "<" => Predicate::int_range(None, Some(v.checked_sub(1).ok_or_else(unsat)?)),
                    ">" => Predicate::int_range(Some(v.checked_add(1).ok_or_else(unsat)?), None),
                    _ => unreachable!(),
                }
            }
        };
        raw.push(Constraint::new(name, pred));
        lx.skip_ws();
        if lx.at_end() {
            break;
        }
        if !lx.eat_str("&&") {
            return Err(FilterError::Syntax { pos: lx.pos, expected: vec!["&&", "end of input"] });
        }
    }
    Filter::from_constraints(raw)
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl FilterError {
    fn pos(&self) -> usize {
        match self {
            FilterError::Syntax { pos, .. } | FilterError::UnsupportedOperator { pos, .. } => *pos,
            _ => 0,
        }
    }
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes().get(self.pos).copied()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_str(&mut self, s: &str) -> bool {
        if self.bytes()[self.pos..].starts_with(s.as_bytes()) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Option<&'a str> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.pos += 1,
            _ => return None,
        }
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        Some(&self.src[start..self.pos])
    }

    fn operator(&mut self) -> Option<&'static str> {
        for op in ["==", "!=", "<=", ">=", "<", ">"] {
            if self.eat_str(op) {
                return Some(op);
            }
        }
        let save = self.pos;
        if self.ident() == Some("prefix") {
            return Some("prefix");
        }
        self.pos = save;
        None
    }

    fn int_lit(&mut self) -> Option<i64> {
        let start = self.pos;
        self.eat(b'-');
        let digits = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits {
            self.pos = start;
            return None;
        }
        match self.src[start..self.pos].parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.pos = start;
                None
            }
        }
    }

    fn string_lit(&mut self) -> Result<String, FilterError> {
        debug_assert_eq!(self.peek(), Some(b'"'));
        self.pos += 1;
        let mut out = String::new();
        loop {
            let rest = &self.src[self.pos..];
            let mut chars = rest.chars();
            match chars.next() {
                None => {
                    return Err(FilterError::Syntax { pos: self.pos, expected: vec!["closing quote"] })
                }
                Some('"') => {
                    self.pos += 1;
                    break;
                }
                Some('\\') => match chars.next() {
                    Some(c @ ('"' | '\\')) => {
                        out.push(c);
                        self.pos += 2;
                    }
                    _ => {
                        return Err(FilterError::Syntax {
                            pos: self.pos + 1,
                            expected: vec!["\\\" or \\\\ escape"],
                        })
                    }
                },
                Some(c) => {
                    out.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
        if out.len() > MAX_STR_LEN {
            return Err(FilterError::LiteralTooLong);
        }
        Ok(out)
    }
}
