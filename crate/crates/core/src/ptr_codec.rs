//! Tagged-word encodings and slot arithmetic.
//!
//! Every pointer mode in the simulator reduces to arithmetic on a 2^N-aligned
//! slot. This module holds that arithmetic for the aligned-allocation and
//! CentroID modes and for the Baggy / Low-Fat baselines used in comparisons.
//!
//! A [`TaggedWord`] packs seven tag bits above a 57-bit linear address:
//!
//! | bits     | field                                   |
//! |----------|-----------------------------------------|
//! | 63       | mode selector: 0 = Aligned, 1 = CentroID |
//! | 62..=57  | slot exponent `N`, valid in `1..=56`     |
//! | 56..=0   | linear address                          |
//!
//! Everything here is a pure function over `Copy` values.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Width of the simulated linear address space.
pub const ADDRESS_BITS: u32 = 57;
/// Mask selecting the canonical address bits 56..=0.
pub const ADDRESS_MASK: u64 = (1u64 << ADDRESS_BITS) - 1;
/// Smallest slot exponent; single-byte objects are widened to 2-byte slots.
pub const MIN_EXPONENT: u32 = 1;
/// Largest slot exponent a tag may carry.
pub const MAX_EXPONENT: u32 = 56;
/// Default Low-Fat block-count exponent `M` (32 sub-blocks per slot).
pub const DEFAULT_LOWFAT_BLOCK_BITS: u32 = 5;

const MODE_SHIFT: u32 = 63;
const EXPONENT_SHIFT: u32 = 57;
const EXPONENT_FIELD: u64 = 0x3f;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("address {0:#x} is not canonical (bits 63..57 must be zero)")]
    NonCanonical(u64),
    #[error("slot exponent {0} outside {MIN_EXPONENT}..={MAX_EXPONENT}")]
    ExponentOutOfRange(u32),
    #[error("malformed tag in word {word:#018x}: exponent field {exponent}")]
    MalformedTag { word: u64, exponent: u32 },
    #[error("range start {start:#x} lies after end {end:#x}")]
    InvertedRange { start: u64, end: u64 },
    #[error("range [{start:#x}, {end:#x}] must span at least two bytes")]
    DegenerateRange { start: u64, end: u64 },
    #[error("expected a {expected} word, found {found}")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error("slot base {base:#x} is not aligned to 2^{exponent}")]
    MisalignedSlot { base: u64, exponent: u32 },
    #[error("invalid low-fat fields: {0}")]
    InvalidLowFat(String),
}

/// Number of significant bits in `x` (0 for 0).
#[inline]
pub const fn bit_length(x: u64) -> u32 {
    u64::BITS - x.leading_zeros()
}

#[inline]
const fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

fn check_exponent(n: u32) -> Result<u32, CodecError> {
    if (MIN_EXPONENT..=MAX_EXPONENT).contains(&n) {
        Ok(n)
    } else {
        Err(CodecError::ExponentOutOfRange(n))
    }
}

/// An address in the 57-bit simulated space.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LinearAddress(u64);

impl LinearAddress {
    pub const ZERO: Self = Self(0);
    pub const MAX: Self = Self(ADDRESS_MASK);

    pub fn new(value: u64) -> Result<Self, CodecError> {
        if value & !ADDRESS_MASK != 0 {
            Err(CodecError::NonCanonical(value))
        } else {
            Ok(Self(value))
        }
    }

    /// Drops bits 63..57.
    pub const fn truncate(value: u64) -> Self {
        Self(value & ADDRESS_MASK)
    }

    pub const fn get(self) -> u64 {
        self.0
    }

    /// `self + delta`, or `None` when the result leaves the canonical space.
    pub fn checked_offset(self, delta: i64) -> Option<Self> {
        let sum = self.0 as i128 + delta as i128;
        if (0..=ADDRESS_MASK as i128).contains(&sum) {
            Some(Self(sum as u64))
        } else {
            None
        }
    }

    pub fn checked_add(self, n: u64) -> Option<Self> {
        self.0.checked_add(n).and_then(|v| Self::new(v).ok())
    }
}

impl fmt::Debug for LinearAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::Display for LinearAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::LowerHex for LinearAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl Serialize for LinearAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::hex::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for LinearAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = crate::hex::deserialize(d)?;
        LinearAddress::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Pointer mode carried in bit 63.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Bounds are synthesized from the tag and address; no table access.
    Aligned,
    /// The word names a centroid that keys the descriptor table.
    Centroid,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Aligned => "aligned",
            Mode::Centroid => "centroid",
        })
    }
}

/// Which of the two slot midpoints a centroid is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidKind {
    /// `...0111`: the last byte of the lower half.
    Low,
    /// `...1000`: the first byte of the upper half.
    High,
}

/// A 2^N-aligned slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotSpec {
    base: LinearAddress,
    exponent: u32,
}

impl SlotSpec {
    pub fn new(base: LinearAddress, exponent: u32) -> Result<Self, CodecError> {
        check_exponent(exponent)?;
        if base.get() & low_mask(exponent) != 0 {
            return Err(CodecError::MisalignedSlot {
                base: base.get(),
                exponent,
            });
        }
        Ok(Self { base, exponent })
    }

    /// The N-slot that holds `addr`.
    pub fn containing(addr: LinearAddress, exponent: u32) -> Result<Self, CodecError> {
        check_exponent(exponent)?;
        Ok(Self {
            base: slot_base(addr, exponent),
            exponent,
        })
    }

    pub fn base(&self) -> LinearAddress {
        self.base
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    /// Last byte of the slot.
    pub fn bound(&self) -> LinearAddress {
        LinearAddress(self.base.0 | low_mask(self.exponent))
    }

    pub fn size(&self) -> u64 {
        1u64 << self.exponent
    }

    /// The slot-invariant address prefix shared by every byte in the slot.
    pub fn cid(&self) -> u64 {
        self.base.0 >> self.exponent
    }

    pub fn contains(&self, addr: LinearAddress) -> bool {
        in_slot_check(addr, *self)
    }

    pub fn bounds(&self) -> BoundsDescriptor {
        BoundsDescriptor {
            base: self.base,
            bound: self.bound(),
        }
    }
}

/// A decoded 64-bit tagged word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaggedWord {
    pub mode: Mode,
    pub exponent: u32,
    pub address: LinearAddress,
}

impl TaggedWord {
    pub fn new(mode: Mode, exponent: u32, address: LinearAddress) -> Result<Self, CodecError> {
        check_exponent(exponent)?;
        Ok(Self {
            mode,
            exponent,
            address,
        })
    }

    pub fn encode(&self) -> u64 {
        let mode_bit = match self.mode {
            Mode::Aligned => 0,
            Mode::Centroid => 1,
        };
        (mode_bit << MODE_SHIFT) | ((self.exponent as u64) << EXPONENT_SHIFT) | self.address.0
    }

    pub fn decode(word: u64) -> Result<Self, CodecError> {
        let exponent = ((word >> EXPONENT_SHIFT) & EXPONENT_FIELD) as u32;
        if check_exponent(exponent).is_err() {
            return Err(CodecError::MalformedTag { word, exponent });
        }
        let mode = if word >> MODE_SHIFT == 0 {
            Mode::Aligned
        } else {
            Mode::Centroid
        };
        Ok(Self {
            mode,
            exponent,
            address: LinearAddress(word & ADDRESS_MASK),
        })
    }

    /// The N-slot this word's address sits in.
    pub fn slot(&self) -> SlotSpec {
        SlotSpec {
            base: slot_base(self.address, self.exponent),
            exponent: self.exponent,
        }
    }

    /// Same tag, different address.
    pub fn with_address(&self, address: LinearAddress) -> Self {
        Self { address, ..*self }
    }
}

impl fmt::Display for TaggedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.encode())
    }
}

impl Serialize for TaggedWord {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::hex::serialize(&self.encode(), s)
    }
}

impl<'de> Deserialize<'de> for TaggedWord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = crate::hex::deserialize(d)?;
        TaggedWord::decode(raw).map_err(serde::de::Error::custom)
    }
}

pub fn encode(mode: Mode, exponent: u32, address: LinearAddress) -> Result<u64, CodecError> {
    TaggedWord::new(mode, exponent, address).map(|w| w.encode())
}

pub fn decode(word: u64) -> Result<TaggedWord, CodecError> {
    TaggedWord::decode(word)
}

/// Inclusive object bounds `[base, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundsDescriptor {
    pub base: LinearAddress,
    pub bound: LinearAddress,
}

impl BoundsDescriptor {
    pub fn new(base: LinearAddress, bound: LinearAddress) -> Result<Self, CodecError> {
        if base > bound {
            return Err(CodecError::InvertedRange {
                start: base.get(),
                end: bound.get(),
            });
        }
        Ok(Self { base, bound })
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u64 {
        self.bound.get() - self.base.get() + 1
    }

    pub fn contains(&self, addr: LinearAddress) -> bool {
        self.base <= addr && addr <= self.bound
    }

    /// True iff `[start, start + size - 1]` lies inside the bounds.
    pub fn contains_span(&self, start: LinearAddress, size: u64) -> bool {
        if size == 0 || start < self.base {
            return false;
        }
        match start.get().checked_add(size - 1) {
            Some(last) => last <= self.bound.get(),
            None => false,
        }
    }
}

/// Smallest `N >= 1` such that `start` and `end` share an N-slot.
pub fn min_slot_exponent(start: LinearAddress, end: LinearAddress) -> Result<u32, CodecError> {
    if start > end {
        return Err(CodecError::InvertedRange {
            start: start.get(),
            end: end.get(),
        });
    }
    check_exponent(bit_length(start.get() ^ end.get()).max(MIN_EXPONENT))
}

pub fn slot_base(addr: LinearAddress, exponent: u32) -> LinearAddress {
    LinearAddress(addr.0 & !low_mask(exponent))
}

/// Baggy-style bounds of an Aligned word: the whole slot.
pub fn aligned_bounds(word: TaggedWord) -> Result<BoundsDescriptor, CodecError> {
    if word.mode != Mode::Aligned {
        return Err(CodecError::ModeMismatch {
            expected: Mode::Aligned,
            found: word.mode,
        });
    }
    Ok(word.slot().bounds())
}

/// Low-Fat sub-block fields of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowFatFields {
    /// Slot exponent `N`.
    pub exponent: u32,
    /// Sub-block exponent `E`.
    pub sub_block_exponent: u32,
    /// Block-count exponent `M = N - E`.
    pub block_bits: u32,
    /// First block index `B`.
    pub first_block: u64,
    /// Last block index `T`.
    pub last_block: u64,
}

impl LowFatFields {
    pub fn new(
        exponent: u32,
        block_bits: u32,
        first_block: u64,
        last_block: u64,
    ) -> Result<Self, CodecError> {
        check_exponent(exponent)?;
        if block_bits > exponent {
            return Err(CodecError::InvalidLowFat(format!(
                "block bits {block_bits} exceed slot exponent {exponent}"
            )));
        }
        let fields = Self {
            exponent,
            sub_block_exponent: exponent - block_bits,
            block_bits,
            first_block,
            last_block,
        };
        fields.validate()?;
        Ok(fields)
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.block_bits + self.sub_block_exponent != self.exponent {
            return Err(CodecError::InvalidLowFat(format!(
                "M ({}) + E ({}) != N ({})",
                self.block_bits, self.sub_block_exponent, self.exponent
            )));
        }
        if self.first_block > self.last_block {
            return Err(CodecError::InvalidLowFat(format!(
                "first block {} after last block {}",
                self.first_block, self.last_block
            )));
        }
        if self.last_block >> self.block_bits != 0 {
            return Err(CodecError::InvalidLowFat(format!(
                "last block {} does not fit in {} bits",
                self.last_block, self.block_bits
            )));
        }
        Ok(())
    }

    pub fn sub_block_size(&self) -> u64 {
        1u64 << self.sub_block_exponent
    }
}

/// Low-Fat bounds: `SlotBase | (B << E)` through `SlotBase | (T << E) | (2^E - 1)`.
pub fn lowfat_bounds(slot: SlotSpec, fields: LowFatFields) -> Result<BoundsDescriptor, CodecError> {
    fields.validate()?;
    if fields.exponent != slot.exponent {
        return Err(CodecError::InvalidLowFat(format!(
            "fields describe a 2^{} slot, slot is 2^{}",
            fields.exponent, slot.exponent
        )));
    }
    let e = fields.sub_block_exponent;
    let base = slot.base.0 | (fields.first_block << e);
    let bound = slot.base.0 | (fields.last_block << e) | low_mask(e);
    Ok(BoundsDescriptor {
        base: LinearAddress(base),
        bound: LinearAddress(bound),
    })
}

/// Low-Fat encoding for an object of `size` bytes placed at its slot base,
/// using the smallest sub-block exponent that fits within `2^block_bits` blocks.
pub fn lowfat_fit(size: u64, block_bits: u32) -> Result<LowFatFields, CodecError> {
    let size = size.max(1);
    let needed = bit_length(size - 1).max(MIN_EXPONENT);
    let sub_block_exponent = needed.saturating_sub(block_bits);
    let exponent = check_exponent((sub_block_exponent + block_bits).max(MIN_EXPONENT))?;
    let blocks = size.div_ceil(1u64 << sub_block_exponent);
    LowFatFields::new(exponent, exponent - sub_block_exponent, 0, blocks - 1)
}

/// The two midpoints bisecting a slot, `(CentroID-L, CentroID-H)`.
pub fn centroid_pair(slot: SlotSpec) -> (LinearAddress, LinearAddress) {
    let half = 1u64 << (slot.exponent - 1);
    (
        LinearAddress(slot.base.0 | (half - 1)),
        LinearAddress(slot.base.0 | half),
    )
}

/// Identifier for an object spanning `[start, end]`: CentroID-H of its minimal slot.
pub fn canonical_centroid(
    start: LinearAddress,
    end: LinearAddress,
) -> Result<LinearAddress, CodecError> {
    if start >= end {
        return Err(if start > end {
            CodecError::InvertedRange {
                start: start.get(),
                end: end.get(),
            }
        } else {
            CodecError::DegenerateRange {
                start: start.get(),
                end: end.get(),
            }
        });
    }
    let n = min_slot_exponent(start, end)?;
    let slot = SlotSpec::containing(start, n)?;
    Ok(centroid_pair(slot).1)
}

/// Recovers `N` from a centroid by counting trailing ones (L) or zeros (H).
pub fn exponent_from_centroid(centroid: LinearAddress, kind: CentroidKind) -> u32 {
    match kind {
        CentroidKind::Low => centroid.0.trailing_ones() + 1,
        CentroidKind::High => centroid.0.trailing_zeros() + 1,
    }
}

/// True iff `addr` shares the slot prefix of `slot`.
pub fn in_slot_check(addr: LinearAddress, slot: SlotSpec) -> bool {
    addr.0 >> slot.exponent == slot.base.0 >> slot.exponent
}

/// Aligned-mode slot exponent for a request of `size` bytes.
pub fn aligned_exponent_for_size(size: u64) -> u32 {
    bit_length(size.max(2) - 1).max(MIN_EXPONENT)
}
