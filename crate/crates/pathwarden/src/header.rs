//! Wildcard bit-vector algebra over a fixed-width header space.
//!
//! A [`HeaderPattern`] describes a set of concrete headers as a ternary
//! string over `{0, 1, x}`; a [`HeaderSpace`] is a finite union of such
//! patterns kept free of internally subsumed members. These two types carry
//! all the set arithmetic the transfer-function engine needs: meet,
//! subsumption, disjoint subtraction and uniform sampling.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Widest supported header, bounded by the u128 backing words.
pub const MAX_HEADER_BITS: u16 = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeaderError {
    #[error("pattern widths differ: {0} vs {1}")]
    WidthMismatch(u16, u16),
    #[error("header width {0} exceeds the supported maximum of {MAX_HEADER_BITS}")]
    WidthTooLarge(u16),
    #[error("empty pattern string")]
    EmptyPattern,
    #[error("invalid pattern character {0:?} (expected 0, 1 or x)")]
    BadCharacter(char),
}

/// A ternary match pattern of fixed width.
///
/// String position 0 is the most significant bit, so `"10x"` matches the
/// concrete headers `0b100` and `0b101`. Internally a position is either
/// fixed (mask bit set, value bit meaningful) or a wildcard (mask bit clear,
/// value bit forced to zero so derived equality is canonical).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeaderPattern {
    width: u16,
    mask: u128,
    value: u128,
}

impl HeaderPattern {
    /// All-wildcard pattern (the full space).
    pub fn wildcard(width: u16) -> Self {
        assert!(width > 0 && width <= MAX_HEADER_BITS);
        HeaderPattern { width, mask: 0, value: 0 }
    }

    /// Fully concrete pattern matching exactly `value`.
    pub fn exact(width: u16, value: u128) -> Self {
        assert!(width > 0 && width <= MAX_HEADER_BITS);
        let mask = Self::width_mask(width);
        HeaderPattern { width, mask, value: value & mask }
    }

    /// Build from raw value/mask words. Mask bit set = fixed position.
    pub fn from_bits(width: u16, value: u128, mask: u128) -> Self {
        assert!(width > 0 && width <= MAX_HEADER_BITS);
        let wm = Self::width_mask(width);
        let mask = mask & wm;
        HeaderPattern { width, mask, value: value & mask }
    }

    pub fn parse(s: &str) -> Result<Self, HeaderError> {
        if s.is_empty() {
            return Err(HeaderError::EmptyPattern);
        }
        if s.len() > MAX_HEADER_BITS as usize {
            return Err(HeaderError::WidthTooLarge(s.len() as u16));
        }
        let width = s.len() as u16;
        let mut mask = 0u128;
        let mut value = 0u128;
        for (i, c) in s.chars().enumerate() {
            let bit = 1u128 << (width as usize - 1 - i);
            match c {
                '0' => mask |= bit,
                '1' => {
                    mask |= bit;
                    value |= bit;
                }
                'x' | 'X' | '*' => {}
                other => return Err(HeaderError::BadCharacter(other)),
            }
        }
        Ok(HeaderPattern { width, mask, value })
    }

    fn width_mask(width: u16) -> u128 {
        if width as u32 == 128 {
            u128::MAX
        } else {
            (1u128 << width) - 1
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    /// Raw mask word: bit set = position fixed.
    pub fn mask_bits(&self) -> u128 {
        self.mask
    }

    /// Raw value word (zero at wildcard positions).
    pub fn value_bits(&self) -> u128 {
        self.value
    }

    /// Number of wildcard positions.
    pub fn free_bits(&self) -> u32 {
        self.width as u32 - self.mask.count_ones()
    }

    /// Exact number of concrete headers the pattern covers.
    pub fn header_count(&self) -> u128 {
        1u128 << self.free_bits().min(127)
    }

    pub fn matches(&self, header: u128) -> bool {
        (header ^ self.value) & self.mask == 0
    }

    /// Positionwise meet. `None` when any fixed position conflicts.
    pub fn intersect(&self, other: &HeaderPattern) -> Result<Option<HeaderPattern>, HeaderError> {
        if self.width != other.width {
            return Err(HeaderError::WidthMismatch(self.width, other.width));
        }
        if (self.value ^ other.value) & self.mask & other.mask != 0 {
            return Ok(None);
        }
        Ok(Some(HeaderPattern {
            width: self.width,
            mask: self.mask | other.mask,
            value: (self.value & self.mask) | (other.value & other.mask),
        }))
    }

    /// Does `self` cover every header of `other`?
    pub fn subsumes(&self, other: &HeaderPattern) -> bool {
        self.width == other.width
            && self.mask & !other.mask == 0
            && (self.value ^ other.value) & self.mask == 0
    }

    /// Disjoint difference `self − other`.
    ///
    /// Walks the positions `other` fixes but `self` leaves free, peeling the
    /// half-space that escapes `other` at each step. The result pieces are
    /// pairwise disjoint and their union is exactly the set difference.
    pub fn subtract(&self, other: &HeaderPattern) -> Vec<HeaderPattern> {
        match self.intersect(other) {
            Err(_) | Ok(None) => return vec![*self],
            Ok(Some(_)) => {}
        }
        if other.subsumes(self) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut cur = *self;
        let mut todo = other.mask & !self.mask;
        while todo != 0 {
            let bit = todo & todo.wrapping_neg();
            todo &= todo - 1;
            let other_val = other.value & bit;
            // Escape piece: this position flipped away from `other`.
            out.push(HeaderPattern {
                width: self.width,
                mask: cur.mask | bit,
                value: cur.value | (other_val ^ bit),
            });
            // Pin the position to `other`'s value and keep peeling.
            cur = HeaderPattern {
                width: self.width,
                mask: cur.mask | bit,
                value: cur.value | other_val,
            };
        }
        out
    }

    /// Overwrite the positions fixed by `rewrite` with its values, leaving
    /// all other positions untouched. This is the bit-masking rewrite used
    /// by forwarding actions.
    pub fn apply_rewrite(&self, rewrite: &HeaderPattern) -> HeaderPattern {
        debug_assert_eq!(self.width, rewrite.width);
        HeaderPattern {
            width: self.width,
            mask: self.mask | rewrite.mask,
            value: (self.value & !rewrite.mask) | rewrite.value,
        }
    }

    /// Rewrite a concrete header.
    pub fn rewrite_header(&self, header: u128) -> u128 {
        (header & !self.mask) | self.value
    }

    /// Iterate every concrete header (only sensible for narrow patterns).
    pub fn enumerate(&self) -> impl Iterator<Item = u128> + '_ {
        let free: Vec<u32> = (0..self.width as u32)
            .filter(|i| self.mask & (1u128 << i) == 0)
            .collect();
        let count = 1u128 << free.len();
        (0..count).map(move |combo| {
            let mut h = self.value;
            for (j, bitpos) in free.iter().enumerate() {
                if combo & (1u128 << j) != 0 {
                    h |= 1u128 << bitpos;
                }
            }
            h
        })
    }

    /// Draw one concrete header uniformly from the pattern.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u128 {
        let mut h = self.value;
        for i in 0..self.width as u32 {
            let bit = 1u128 << i;
            if self.mask & bit == 0 && rng.gen::<bool>() {
                h |= bit;
            }
        }
        h
    }
}

impl fmt::Display for HeaderPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in (0..self.width as usize).rev() {
            let bit = 1u128 << i;
            let c = if self.mask & bit == 0 {
                'x'
            } else if self.value & bit != 0 {
                '1'
            } else {
                '0'
            };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for HeaderPattern {
    type Err = HeaderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeaderPattern::parse(s)
    }
}

impl Serialize for HeaderPattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeaderPattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        HeaderPattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A finite union of patterns over one width.
///
/// Canonical form drops any member wholly subsumed by another member; an
/// empty union is the empty set. Members may still overlap partially, so
/// exact counting and uniform sampling go through [`HeaderSpace::disjoint_cover`].
#[derive(Debug, Clone)]
pub struct HeaderSpace {
    width: u16,
    patterns: Vec<HeaderPattern>,
}

impl HeaderSpace {
    pub fn empty(width: u16) -> Self {
        HeaderSpace { width, patterns: Vec::new() }
    }

    pub fn full(width: u16) -> Self {
        HeaderSpace { width, patterns: vec![HeaderPattern::wildcard(width)] }
    }

    pub fn from_pattern(p: HeaderPattern) -> Self {
        HeaderSpace { width: p.width(), patterns: vec![p] }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[HeaderPattern] {
        &self.patterns
    }

    pub fn matches(&self, header: u128) -> bool {
        self.patterns.iter().any(|p| p.matches(header))
    }

    /// Insert one pattern, keeping the union canonical.
    pub fn add(&mut self, p: HeaderPattern) {
        debug_assert_eq!(p.width(), self.width);
        if self.patterns.iter().any(|q| q.subsumes(&p)) {
            return;
        }
        self.patterns.retain(|q| !p.subsumes(q));
        self.patterns.push(p);
    }

    pub fn union_with(&mut self, other: &HeaderSpace) {
        for p in &other.patterns {
            self.add(*p);
        }
    }

    pub fn intersect_pattern(&self, p: &HeaderPattern) -> HeaderSpace {
        let mut out = HeaderSpace::empty(self.width);
        for q in &self.patterns {
            if let Ok(Some(m)) = q.intersect(p) {
                out.add(m);
            }
        }
        out
    }

    pub fn subtract_pattern(&self, p: &HeaderPattern) -> HeaderSpace {
        let mut out = HeaderSpace::empty(self.width);
        for q in &self.patterns {
            for piece in q.subtract(p) {
                out.add(piece);
            }
        }
        out
    }

    /// Rewrite every member (bit-masking overwrite).
    pub fn apply_rewrite(&self, rewrite: &HeaderPattern) -> HeaderSpace {
        let mut out = HeaderSpace::empty(self.width);
        for q in &self.patterns {
            out.add(q.apply_rewrite(rewrite));
        }
        out
    }

    /// Equivalent pairwise-disjoint pattern list (order deterministic).
    pub fn disjoint_cover(&self) -> Vec<HeaderPattern> {
        let mut cover: Vec<HeaderPattern> = Vec::new();
        for p in &self.patterns {
            let mut pieces = vec![*p];
            for done in cover.clone() {
                let mut next = Vec::new();
                for piece in pieces {
                    next.extend(piece.subtract(&done));
                }
                pieces = next;
                if pieces.is_empty() {
                    break;
                }
            }
            cover.extend(pieces);
        }
        cover
    }

    /// Exact number of concrete headers in the union.
    pub fn header_count(&self) -> u128 {
        self.disjoint_cover().iter().map(|p| p.header_count()).sum()
    }

    /// Draw one header uniformly at random from the whole union.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u128> {
        let cover = self.disjoint_cover();
        if cover.is_empty() {
            return None;
        }
        let total: u128 = cover.iter().map(|p| p.header_count()).sum();
        let mut pick = rng.gen_range(0..total);
        for p in &cover {
            let n = p.header_count();
            if pick < n {
                return Some(p.sample(rng));
            }
            pick -= n;
        }
        unreachable!("weights exhausted")
    }
}

impl fmt::Display for HeaderSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.patterns.is_empty() {
            return write!(f, "∅");
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if i > 0 {
                write!(f, " ∪ ")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pat(s: &str) -> HeaderPattern {
        HeaderPattern::parse(s).unwrap()
    }

    #[test]
    fn intersect_positionwise_meet() {
        assert_eq!(pat("10x").intersect(&pat("1x0")).unwrap(), Some(pat("100")));
        assert_eq!(pat("10x").intersect(&pat("11x")).unwrap(), None);
        assert_eq!(pat("xxx").intersect(&pat("101")).unwrap(), Some(pat("101")));
    }

    #[test]
    fn intersect_width_mismatch_is_an_error() {
        assert_eq!(
            pat("10x").intersect(&pat("10xx")),
            Err(HeaderError::WidthMismatch(3, 4))
        );
    }

    #[test]
    fn display_round_trips() {
        for s in ["10x", "xxx", "000", "1x0x1"] {
            assert_eq!(pat(s).to_string(), s);
        }
    }

    #[test]
    fn subtract_simple() {
        // xxx − 00x peels one fixed position per piece; the exact shape of
        // the cover is an implementation detail, the set must be exact.
        let pieces = pat("xxx").subtract(&pat("00x"));
        assert_eq!(pieces.len(), 2);
        for h in 0..8u128 {
            let expect = !pat("00x").matches(h);
            assert_eq!(pieces.iter().any(|p| p.matches(h)), expect, "header {h:b}");
        }
    }

    #[test]
    fn subtract_disjoint_returns_self() {
        assert_eq!(pat("1xx").subtract(&pat("0xx")), vec![pat("1xx")]);
    }

    #[test]
    fn subtract_subsumed_is_empty() {
        assert!(pat("10x").subtract(&pat("1xx")).is_empty());
    }

    #[test]
    fn rewrite_overrides_fixed_positions() {
        let rw = pat("x1x");
        assert_eq!(pat("00x").apply_rewrite(&rw), pat("01x"));
        assert_eq!(rw.rewrite_header(0b000), 0b010);
    }

    #[test]
    fn space_canonical_form_drops_subsumed() {
        let mut hs = HeaderSpace::empty(3);
        hs.add(pat("10x"));
        hs.add(pat("1xx"));
        assert_eq!(hs.patterns().len(), 1);
        assert_eq!(hs.patterns()[0], pat("1xx"));
        hs.add(pat("100"));
        assert_eq!(hs.patterns().len(), 1);
    }

    #[test]
    fn space_count_handles_overlap() {
        let mut hs = HeaderSpace::empty(3);
        hs.add(pat("1xx"));
        hs.add(pat("x1x"));
        // 1xx has 4 headers, x1x has 4, overlap 11x has 2.
        assert_eq!(hs.header_count(), 6);
    }

    #[test]
    fn sampling_stays_inside_the_space() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut hs = HeaderSpace::empty(8);
        hs.add(pat("1010xxxx"));
        hs.add(pat("0001xx11"));
        for _ in 0..200 {
            let h = hs.sample(&mut rng).unwrap();
            assert!(hs.matches(h));
        }
        assert!(HeaderSpace::empty(8).sample(&mut rng).is_none());
    }

    /// Two patterns of one shared width.
    fn pattern_pair() -> impl Strategy<Value = (String, String)> {
        (1usize..=9).prop_flat_map(|w| {
            (
                proptest::collection::vec(prop_oneof!["0", "1", "x"], w)
                    .prop_map(|v| v.concat()),
                proptest::collection::vec(prop_oneof!["0", "1", "x"], w)
                    .prop_map(|v| v.concat()),
            )
        })
    }

    proptest! {
        #[test]
        fn subtract_is_exact_set_difference((a, b) in pattern_pair()) {
            let (pa, pb) = (pat(&a), pat(&b));
            let pieces = pa.subtract(&pb);
            let width = a.len() as u32;
            for h in 0..(1u128 << width) {
                let in_diff = pa.matches(h) && !pb.matches(h);
                let in_pieces = pieces.iter().filter(|p| p.matches(h)).count();
                prop_assert_eq!(in_diff, in_pieces == 1, "header {:b}", h);
                prop_assert!(in_pieces <= 1, "pieces must be disjoint");
            }
        }

        #[test]
        fn intersect_is_exact_set_meet((a, b) in pattern_pair()) {
            let (pa, pb) = (pat(&a), pat(&b));
            let meet = pa.intersect(&pb).unwrap();
            let width = a.len() as u32;
            for h in 0..(1u128 << width) {
                let expect = pa.matches(h) && pb.matches(h);
                let got = meet.map(|m| m.matches(h)).unwrap_or(false);
                prop_assert_eq!(expect, got);
            }
        }

        #[test]
        fn disjoint_cover_preserves_membership(pats in proptest::collection::vec("[01x]{6}", 1..5)) {
            let mut hs = HeaderSpace::empty(6);
            for p in &pats {
                hs.add(pat(p));
            }
            let cover = hs.disjoint_cover();
            for h in 0..(1u128 << 6) {
                let direct = hs.matches(h);
                let covered = cover.iter().filter(|p| p.matches(h)).count();
                prop_assert_eq!(direct, covered == 1);
                prop_assert!(covered <= 1);
            }
        }
    }
}
