//! Morton indexing, box geometry and the E2/E4 neighborhood queries.
//!
//! Each octal digit of an index is `iz << 2 | iy << 1 | ix` for one level,
//! with the coarsest level in the most significant digit. A key is always
//! tagged with its level, so `(level, index)` identifies a box uniquely.

use crate::error::{domain, FmmError, Result};

/// Deepest supported level; `3 * MAX_LEVEL` bits fit a `u64` with headroom.
pub const MAX_LEVEL: u32 = 20;

/// A location in the unit cube.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn sub(&self, other: &Point3) -> [f64; 3] {
        [self.x - other.x, self.y - other.y, self.z - other.z]
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let [dx, dy, dz] = self.sub(other);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn in_unit_cube(&self) -> bool {
        [self.x, self.y, self.z].iter().all(|c| (0.0..1.0).contains(c))
    }
}

/// Anything that has a position in the unit cube.
pub trait Located {
    fn position(&self) -> Point3;
}

impl Located for Point3 {
    #[inline]
    fn position(&self) -> Point3 {
        *self
    }
}

/// Maps arbitrary coordinates into `[0, 1)^3`, preserving aspect ratio.
///
/// The largest extent of the bounding box is scaled to one; coordinates that
/// land exactly on the upper face are nudged just below it.
pub fn normalize_points(raw: &[[f64; 3]]) -> Vec<Point3> {
    if raw.is_empty() {
        return Vec::new();
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in raw {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let below_one = 1.0 - f64::EPSILON / 2.0;
    let map = |v: f64, d: usize| ((v - lo[d]) * scale).clamp(0.0, below_one);
    raw.iter().map(|p| Point3::new(map(p[0], 0), map(p[1], 1), map(p[2], 2))).collect()
}

/// Integer grid coordinates of a box at a given level.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct BoxCoords {
    pub level: u32,
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
}

impl BoxCoords {
    pub const fn new(level: u32, ix: u32, iy: u32, iz: u32) -> Self {
        Self { level, ix, iy, iz }
    }

    fn validate(&self) -> Result<()> {
        if self.level > MAX_LEVEL {
            return Err(FmmError::Capacity { what: format!("octree level {}", self.level), limit: MAX_LEVEL as u64 });
        }
        let side = 1u64 << self.level;
        if [self.ix, self.iy, self.iz].iter().any(|&c| c as u64 >= side) {
            return domain(format!("coordinates {self:?} outside a grid of side {side}"));
        }
        Ok(())
    }
}

/// Level-tagged interleaved box index.
///
/// Ordering is by level first, then by index, so sorted key arrays at a
/// fixed level are in Morton (Z-curve) order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MortonKey {
    level: u32,
    index: u64,
}

#[inline]
fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact_bits(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Interleaves grid coordinates into a Morton key.
pub fn interleave(coords: BoxCoords) -> Result<MortonKey> {
    coords.validate()?;
    Ok(MortonKey { level: coords.level, index: encode(coords.ix, coords.iy, coords.iz) })
}

/// Inverse of [`interleave`].
pub fn deinterleave(key: MortonKey) -> BoxCoords {
    let (ix, iy, iz) = decode(key.index);
    BoxCoords::new(key.level, ix, iy, iz)
}

#[inline]
pub(crate) fn encode(ix: u32, iy: u32, iz: u32) -> u64 {
    spread_bits(ix) | spread_bits(iy) << 1 | spread_bits(iz) << 2
}

#[inline]
pub(crate) fn decode(index: u64) -> (u32, u32, u32) {
    (compact_bits(index), compact_bits(index >> 1), compact_bits(index >> 2))
}

/// Number of boxes at a level, `8^level`.
#[inline]
pub const fn boxes_at_level(level: u32) -> u64 {
    1u64 << (3 * level)
}

#[inline]
fn grid_coordinate(v: f64, side: u32) -> u32 {
    let c = (v * side as f64).floor();
    if c <= 0.0 {
        0
    } else {
        (c as u32).min(side - 1)
    }
}

/// Morton index (without level tag) of the box containing `p` at `level`.
///
/// Coordinates on the upper face of the unit cube clamp into the last box.
#[inline]
pub(crate) fn point_index(p: &Point3, level: u32) -> u64 {
    let side = 1u32 << level;
    encode(grid_coordinate(p.x, side), grid_coordinate(p.y, side), grid_coordinate(p.z, side))
}

impl MortonKey {
    /// Builds a key, checking `index < 8^level` and `level <= MAX_LEVEL`.
    pub fn new(level: u32, index: u64) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(FmmError::Capacity { what: format!("octree level {level}"), limit: MAX_LEVEL as u64 });
        }
        if index >= boxes_at_level(level) {
            return domain(format!("index {index} out of range at level {level}"));
        }
        Ok(Self { level, index })
    }

    /// Builds a key the caller already knows to be in range.
    #[inline]
    pub(crate) const fn new_unchecked(level: u32, index: u64) -> Self {
        Self { level, index }
    }

    pub const fn root() -> Self {
        Self { level: 0, index: 0 }
    }

    #[inline]
    pub const fn level(&self) -> u32 {
        self.level
    }

    #[inline]
    pub const fn index(&self) -> u64 {
        self.index
    }

    /// Box containing `p` at `level`.
    pub fn from_point(p: &Point3, level: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(FmmError::Capacity { what: format!("octree level {level}"), limit: MAX_LEVEL as u64 });
        }
        Ok(Self::new_unchecked(level, point_index(p, level)))
    }

    pub fn coords(&self) -> BoxCoords {
        deinterleave(*self)
    }

    /// Side length of boxes at this key's level.
    pub fn width(&self) -> f64 {
        1.0 / (1u64 << self.level) as f64
    }

    pub fn center(&self) -> Point3 {
        let c = self.coords();
        let w = self.width();
        Point3::new((c.ix as f64 + 0.5) * w, (c.iy as f64 + 0.5) * w, (c.iz as f64 + 0.5) * w)
    }

    pub fn parent(&self) -> Result<Self> {
        if self.level == 0 {
            return domain("the root box has no parent");
        }
        Ok(Self::new_unchecked(self.level - 1, self.index >> 3))
    }

    /// Ancestor at a coarser (or equal) level.
    #[inline]
    pub fn ancestor(&self, level: u32) -> Self {
        debug_assert!(level <= self.level);
        Self::new_unchecked(level, self.index >> (3 * (self.level - level)))
    }

    pub fn children(&self) -> Result<[Self; 8]> {
        if self.level >= MAX_LEVEL {
            return Err(FmmError::Capacity {
                what: format!("children of a level-{} box", self.level),
                limit: MAX_LEVEL as u64,
            });
        }
        let first = self.index << 3;
        Ok(std::array::from_fn(|k| Self::new_unchecked(self.level + 1, first + k as u64)))
    }

    /// Index range `[lo, hi)` of this box's descendants at a finer level.
    pub fn descendant_range(&self, level: u32) -> std::ops::Range<u64> {
        debug_assert!(level >= self.level);
        let shift = 3 * (level - self.level);
        (self.index << shift)..((self.index + 1) << shift)
    }

    /// The box itself and every same-level box touching it, in Morton order.
    pub fn e2_neighbors(&self) -> Vec<Self> {
        let c = self.coords();
        let side = 1i64 << self.level;
        let mut out = Vec::with_capacity(27);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y, z) = (c.ix as i64 + dx, c.iy as i64 + dy, c.iz as i64 + dz);
                    if (0..side).contains(&x) && (0..side).contains(&y) && (0..side).contains(&z) {
                        out.push(Self::new_unchecked(self.level, encode(x as u32, y as u32, z as u32)));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Children of the parent's E2 set that are not in this box's E2 set,
    /// in Morton order. Empty at levels 0 and 1.
    pub fn e4_neighbors(&self) -> Vec<Self> {
        if self.level < 2 {
            return Vec::new();
        }
        let parent = Self::new_unchecked(self.level - 1, self.index >> 3);
        let mut out = Vec::with_capacity(189);
        for pn in parent.e2_neighbors() {
            for k in 0..8 {
                let child = Self::new_unchecked(self.level, (pn.index << 3) + k);
                if !self.is_adjacent(&child) {
                    out.push(child);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True when both boxes are on the same level and their grid coordinates
    /// differ by at most one along every axis (a box is adjacent to itself).
    pub fn is_adjacent(&self, other: &Self) -> bool {
        if self.level != other.level {
            return false;
        }
        let (a, b) = (self.coords(), other.coords());
        a.ix.abs_diff(b.ix) <= 1 && a.iy.abs_diff(b.iy) <= 1 && a.iz.abs_diff(b.iz) <= 1
    }

    /// True when `other` belongs to this box's E4 set.
    pub fn has_in_e4(&self, other: &Self) -> bool {
        if self.level != other.level || self.level < 2 {
            return false;
        }
        let pa = Self::new_unchecked(self.level - 1, self.index >> 3);
        let pb = Self::new_unchecked(other.level - 1, other.index >> 3);
        pa.is_adjacent(&pb) && !self.is_adjacent(other)
    }

    /// Grid offset `other - self`, for same-level keys.
    pub fn offset_to(&self, other: &Self) -> [i32; 3] {
        let (a, b) = (self.coords(), other.coords());
        [b.ix as i32 - a.ix as i32, b.iy as i32 - a.iy as i32, b.iz as i32 - a.iz as i32]
    }
}

/// Box containing `p` at `level`.
pub fn box_index_of_point(p: &Point3, level: u32) -> Result<MortonKey> {
    MortonKey::from_point(p, level)
}
