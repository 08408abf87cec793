//! Boolean attention masks over the joint text/image/condition sequence.
//!
//! Two kinds are built from a [`TokenLayout`]:
//!
//! * semantic alignment: each caption group binds to its image tokens, the
//!   global caption binds to every image token, and image tokens attend to
//!   each other densely;
//! * attribute isolation: the stricter variant used on the middle layers,
//!   where entity image tokens only see their own image tokens and caption,
//!   and only background image tokens keep a global view.
//!
//! Condition tokens are appended unrestricted; their strength is controlled
//! by the additive bias in [`crate::shape`].

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};
use crate::tokens::{TokenLayout, TokenRole};

/// Layer count of the reference architecture the default gating range is
/// expressed against.
pub const REFERENCE_LAYERS: usize = 57;
/// Half-open `[20, 38)` range of attribute-isolation layers.
pub const REFERENCE_AIA_RANGE: Range<usize> = 20..38;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    SemanticAlignment,
    AttributeIsolation,
}

impl MaskKind {
    pub fn short_name(self) -> &'static str {
        match self {
            MaskKind::SemanticAlignment => "saa",
            MaskKind::AttributeIsolation => "aia",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for MaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "saa" => Ok(MaskKind::SemanticAlignment),
            "aia" => Ok(MaskKind::AttributeIsolation),
            other => Err(format!("unknown mask kind `{other}` (expected saa or aia)")),
        }
    }
}

/// `S x S` boolean matrix; row = query, column = key.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: FixedBitSet,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.size, self.size)?;
        for q in 0..self.size.min(64) {
            let row: String = (0..self.size.min(64))
                .map(|k| if self.get(q, k) { '1' } else { '0' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl AttentionMask {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            allowed: FixedBitSet::with_capacity(size * size),
        }
    }

    pub fn full(size: usize) -> Self {
        let mut mask = Self::empty(size);
        mask.allowed.insert_range(..);
        mask
    }

    /// Builds from row-major 0/1 rows. Panics if the rows are not square.
    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let size = rows.len();
        let mut mask = Self::empty(size);
        for (q, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), size, "mask rows must be square");
            for (k, &v) in row.iter().enumerate() {
                mask.set(q, k, v != 0);
            }
        }
        mask
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed.contains(q * self.size + k)
    }

    #[inline]
    pub fn set(&mut self, q: usize, k: usize, allowed: bool) {
        self.allowed.set(q * self.size + k, allowed);
    }

    pub fn row(&self, q: usize) -> impl Iterator<Item = bool> + '_ {
        (0..self.size).map(move |k| self.get(q, k))
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.size)
            .map(|q| self.row(q).map(u8::from).collect())
            .collect()
    }

    pub fn allowed_in_row(&self, q: usize) -> usize {
        self.allowed.count_ones(q * self.size..(q + 1) * self.size)
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.count_ones(..)
    }

    /// Forbids every query from attending the given key columns.
    pub fn disallow_keys(&mut self, keys: impl IntoIterator<Item = usize>) {
        for k in keys {
            for q in 0..self.size {
                self.set(q, k, false);
            }
        }
    }

    /// True when every pair allowed here is also allowed in `other`,
    /// restricted to the given query and key ranges.
    pub fn is_subset_on(&self, other: &Self, queries: Range<usize>, keys: Range<usize>) -> bool {
        queries
            .flat_map(|q| keys.clone().map(move |k| (q, k)))
            .all(|(q, k)| !self.get(q, k) || other.get(q, k))
    }
}

fn saa_allows(q: TokenRole, k: TokenRole) -> bool {
    use TokenRole::*;
    match (q, k) {
        (Text(i), Text(j)) => i == j,
        (Text(i), Image(j)) => i == j || i == 0,
        (Image(i), Text(j)) => i == j || j == 0,
        (Image(_), Image(_)) => true,
    }
}

fn aia_allows(q: TokenRole, k: TokenRole) -> bool {
    use TokenRole::*;
    match (q, k) {
        (Text(i), Text(j)) => i == j,
        (Text(i), Image(j)) => i == j,
        (Image(i), Text(j)) => i == j,
        (Image(i), Image(j)) => i == j || i == 0,
    }
}

fn build_with(layout: &TokenLayout, allows: fn(TokenRole, TokenRole) -> bool) -> AttentionMask {
    let roles = layout.roles();
    let mut mask = AttentionMask::empty(roles.len());
    for (q, &rq) in roles.iter().enumerate() {
        for (k, &rk) in roles.iter().enumerate() {
            if allows(rq, rk) {
                mask.allowed.insert(q * roles.len() + k);
            }
        }
    }
    mask
}

pub fn build_saa(layout: &TokenLayout) -> AttentionMask {
    build_with(layout, saa_allows)
}

pub fn build_aia(layout: &TokenLayout) -> AttentionMask {
    build_with(layout, aia_allows)
}

pub fn build_mask(layout: &TokenLayout, kind: MaskKind) -> AttentionMask {
    match kind {
        MaskKind::SemanticAlignment => build_saa(layout),
        MaskKind::AttributeIsolation => build_aia(layout),
    }
}

/// Appends `n_cond` fully-allowed rows and columns.
pub fn extend_with_condition(mask: &AttentionMask, n_cond: usize) -> AttentionMask {
    if n_cond == 0 {
        return mask.clone();
    }
    let old = mask.size;
    let size = old + n_cond;
    let mut out = AttentionMask::full(size);
    for q in 0..old {
        for k in 0..old {
            if !mask.get(q, k) {
                out.set(q, k, false);
            }
        }
    }
    out
}

/// Which mask kind each transformer layer uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSchedule {
    total_layers: usize,
    aia: Range<usize>,
}

impl LayerSchedule {
    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn aia_range(&self) -> Range<usize> {
        self.aia.clone()
    }

    pub fn kind(&self, layer: usize) -> MaskKind {
        if self.aia.contains(&layer) {
            MaskKind::AttributeIsolation
        } else {
            MaskKind::SemanticAlignment
        }
    }

    pub fn kinds(&self) -> impl Iterator<Item = MaskKind> + '_ {
        (0..self.total_layers).map(|l| self.kind(l))
    }

    /// The reference gating range rescaled to `total_layers`.
    pub fn scaled(total_layers: usize) -> Self {
        let scale =
            |l: usize| ((l * total_layers) as f64 / REFERENCE_LAYERS as f64).round() as usize;
        Self {
            total_layers,
            aia: scale(REFERENCE_AIA_RANGE.start)..scale(REFERENCE_AIA_RANGE.end),
        }
    }
}

impl Default for LayerSchedule {
    fn default() -> Self {
        Self {
            total_layers: REFERENCE_LAYERS,
            aia: REFERENCE_AIA_RANGE,
        }
    }
}

pub fn make_schedule(
    total_layers: usize,
    aia_start: usize,
    aia_end: usize,
) -> Result<LayerSchedule> {
    if aia_start > aia_end || aia_end > total_layers {
        return Err(Error::RangeError {
            total: total_layers,
            start: aia_start,
            end: aia_end,
        });
    }
    Ok(LayerSchedule {
        total_layers,
        aia: aia_start..aia_end,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub unreachable_rows: Vec<usize>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.unreachable_rows.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::UnreachableQuery {
                rows: self.unreachable_rows,
            })
        }
    }
}

/// Lists every query row with no allowed key.
pub fn check_reachability(mask: &AttentionMask) -> ValidationReport {
    ValidationReport {
        unreachable_rows: (0..mask.size)
            .filter(|&q| mask.allowed_in_row(q) == 0)
            .collect(),
    }
}

/// Memoizes masks per `(layout, kind)`. Concurrent inserts of the same key
/// are idempotent: the first stored mask wins and is returned to everyone.
#[derive(Debug, Default)]
pub struct MaskCache {
    entries: RwLock<HashMap<(TokenLayout, MaskKind), Arc<AttentionMask>>>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, layout: &TokenLayout, kind: MaskKind) -> Arc<AttentionMask> {
        let key = (layout.clone(), kind);
        if let Some(mask) = self.entries.read().expect("mask cache poisoned").get(&key) {
            return Arc::clone(mask);
        }
        let built = Arc::new(build_mask(layout, kind));
        let mut entries = self.entries.write().expect("mask cache poisoned");
        Arc::clone(entries.entry(key).or_insert(built))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("mask cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
