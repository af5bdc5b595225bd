//! Parent/child descriptor lookup.
//!
//! A page-granular parent region (the mmap-like allocation) carries a
//! System-level descriptor. Small children are carved out of it by the heap
//! and carry User-level descriptors. Given a child address, the parent
//! descriptor can be recovered three ways:
//!
//! * `DualTag`: the child word carries the parent's slot exponent in bits
//!   56..=51, so the parent centroid is computed directly from the word.
//! * `RangeCache`: a fully-associative range cache over parent regions, with
//!   a walk of the sorted parent list on a miss.
//! * `Pte`: the flat page table stores the parent centroid (S-TAG) in each
//!   entry; one walk plus one descriptor lookup.
//!
//! Parent descriptors live in their own store so a large child can never
//! collide with its parent's centroid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alloc_sim::{AllocError, AllocRequest, AllocationRecord, ArenaId, HeapState};
use crate::descriptor_store::{
    DescriptorStore, Level, LookupOutcome, ObjectDescriptor, Permissions, RangeLookup, StoreConfig,
    StoreError,
};
use crate::dgu::{AccessFault, FaultKind};
use crate::ptr_codec::{
    bit_length, centroid_pair, CodecError, LinearAddress, Mode, SlotSpec, TaggedWord, MAX_EXPONENT,
};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
/// Address width left in a dual-tag word.
pub const DUAL_TAG_ADDRESS_BITS: u32 = 51;
const DUAL_TAG_ADDRESS_MASK: u64 = (1 << DUAL_TAG_ADDRESS_BITS) - 1;
const S_TAG_SHIFT: u32 = 51;
const U_TAG_SHIFT: u32 = 57;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MultiLevelError {
    #[error("parent size must be positive")]
    ZeroSize,
    #[error("parent window exhausted: cannot map {0} bytes")]
    WindowExhausted(u64),
    #[error("no parent region with centroid {0}")]
    UnknownParent(LinearAddress),
    #[error("parent {parent} has no room for {size} more bytes")]
    ParentFull { parent: LinearAddress, size: u64 },
    #[error("address {0} does not fit the {DUAL_TAG_ADDRESS_BITS}-bit dual-tag window")]
    OutsideDualTagWindow(LinearAddress),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParentScheme {
    DualTag,
    RangeCache,
    Pte,
}

impl ParentScheme {
    pub const ALL: [ParentScheme; 3] = [
        ParentScheme::DualTag,
        ParentScheme::RangeCache,
        ParentScheme::Pte,
    ];
}

impl fmt::Display for ParentScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParentScheme::DualTag => "dualtag",
            ParentScheme::RangeCache => "rangecache",
            ParentScheme::Pte => "pte",
        })
    }
}

impl FromStr for ParentScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dualtag" => Ok(ParentScheme::DualTag),
            "rangecache" => Ok(ParentScheme::RangeCache),
            "pte" => Ok(ParentScheme::Pte),
            other => Err(format!(
                "unknown parent scheme {other:?} (dualtag, rangecache, pte)"
            )),
        }
    }
}

/// Child word with the parent's slot exponent folded in.
///
/// Layout: bits 63..57 U-TAG (mode + exponent, as a plain tagged word),
/// bits 56..51 parent exponent (0 = no parent), bits 50..0 address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DualTagWord {
    pub u_tag_mode: Mode,
    pub u_tag_exponent: u32,
    pub s_tag_exponent: u32,
    pub address: LinearAddress,
}

impl DualTagWord {
    pub fn new(child: TaggedWord, s_tag_exponent: u32) -> Result<Self, MultiLevelError> {
        if child.address.get() > DUAL_TAG_ADDRESS_MASK {
            return Err(MultiLevelError::OutsideDualTagWindow(child.address));
        }
        if s_tag_exponent > MAX_EXPONENT {
            return Err(CodecError::ExponentOutOfRange(s_tag_exponent).into());
        }
        Ok(Self {
            u_tag_mode: child.mode,
            u_tag_exponent: child.exponent,
            s_tag_exponent,
            address: child.address,
        })
    }

    pub fn encode(&self) -> u64 {
        let mode = match self.u_tag_mode {
            Mode::Aligned => 0u64,
            Mode::Centroid => 1,
        };
        (mode << 63)
            | ((self.u_tag_exponent as u64) << U_TAG_SHIFT)
            | ((self.s_tag_exponent as u64) << S_TAG_SHIFT)
            | self.address.get()
    }

    pub fn decode(word: u64) -> Result<Self, CodecError> {
        let s_tag_exponent = ((word >> S_TAG_SHIFT) & 0x3f) as u32;
        if s_tag_exponent > MAX_EXPONENT {
            return Err(CodecError::MalformedTag {
                word,
                exponent: s_tag_exponent,
            });
        }
        // The U-TAG decodes exactly like a plain word once the S-TAG bits are cleared.
        let child = TaggedWord::decode(word & !(0x3f << S_TAG_SHIFT))?;
        Ok(Self {
            u_tag_mode: child.mode,
            u_tag_exponent: child.exponent,
            s_tag_exponent,
            address: LinearAddress::truncate(word & DUAL_TAG_ADDRESS_MASK),
        })
    }

    /// The plain word a single-tag DGU sees.
    pub fn child_word(&self) -> TaggedWord {
        TaggedWord {
            mode: self.u_tag_mode,
            exponent: self.u_tag_exponent,
            address: self.address,
        }
    }

    /// Parent slot exponent as read straight out of a raw word. No privilege
    /// is needed, which is how dual tags leak system metadata to user code.
    pub fn exposed_s_tag(word: u64) -> u32 {
        ((word >> S_TAG_SHIFT) & 0x3f) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageTableEntry {
    pub vpn: u64,
    pub present: bool,
    pub permissions: Permissions,
    pub s_tag: Option<LinearAddress>,
}

/// Single-level page table keyed by virtual page number.
#[derive(Debug, Clone, Default)]
pub struct PageTable {
    entries: BTreeMap<u64, PageTableEntry>,
}

impl PageTable {
    pub fn entry(&self, addr: LinearAddress) -> Option<&PageTableEntry> {
        self.entries.get(&(addr.get() >> PAGE_SHIFT))
    }

    pub fn entries(&self) -> impl Iterator<Item = &PageTableEntry> {
        self.entries.values()
    }

    pub fn tagged_pages(&self, s_tag: LinearAddress) -> usize {
        self.entries
            .values()
            .filter(|e| e.present && e.s_tag == Some(s_tag))
            .count()
    }

    fn map(
        &mut self,
        base: LinearAddress,
        bound: LinearAddress,
        permissions: Permissions,
        s_tag: LinearAddress,
    ) {
        for vpn in (base.get() >> PAGE_SHIFT)..=(bound.get() >> PAGE_SHIFT) {
            self.entries.insert(
                vpn,
                PageTableEntry {
                    vpn,
                    present: true,
                    permissions,
                    s_tag: Some(s_tag),
                },
            );
        }
    }

    fn unmap(&mut self, base: LinearAddress, bound: LinearAddress) {
        for vpn in (base.get() >> PAGE_SHIFT)..=(bound.get() >> PAGE_SHIFT) {
            self.entries.remove(&vpn);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentRegion {
    pub descriptor: ObjectDescriptor,
    pub word: TaggedWord,
    pub arena: ArenaId,
    pub children: Vec<u64>,
}

impl ParentRegion {
    pub fn centroid(&self) -> LinearAddress {
        self.descriptor.centroid
    }

    pub fn pages(&self) -> u64 {
        (self.descriptor.bound.get() - self.descriptor.base.get() + 1) / PAGE_SIZE
    }
}

/// Per-scheme lookup cost counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchemeCounters {
    pub lookups: u64,
    pub resolved: u64,
    pub misses: u64,
    pub tag_decodes: u64,
    pub walks: u64,
    pub range_hits: u64,
    pub range_fills: u64,
    pub descriptor_lookups: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultiLevelCounters {
    pub dualtag: SchemeCounters,
    pub rangecache: SchemeCounters,
    pub pte: SchemeCounters,
}

impl MultiLevelCounters {
    pub fn get(&self, scheme: ParentScheme) -> &SchemeCounters {
        match scheme {
            ParentScheme::DualTag => &self.dualtag,
            ParentScheme::RangeCache => &self.rangecache,
            ParentScheme::Pte => &self.pte,
        }
    }

    fn get_mut(&mut self, scheme: ParentScheme) -> &mut SchemeCounters {
        match scheme {
            ParentScheme::DualTag => &mut self.dualtag,
            ParentScheme::RangeCache => &mut self.rangecache,
            ParentScheme::Pte => &mut self.pte,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLevelConfig {
    pub window_base: u64,
    pub window_size: u64,
    pub store: StoreConfig,
}

impl Default for MultiLevelConfig {
    fn default() -> Self {
        Self {
            window_base: 0x4000_0000,
            window_size: 1 << 40,
            store: StoreConfig::default(),
        }
    }
}

/// Input to `parent_of`: the child address and, for the dual-tag scheme,
/// the dual-tag word the child was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParentQuery {
    pub address: LinearAddress,
    pub dual_word: Option<u64>,
}

/// A child allocation inside a parent region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildAllocation {
    pub word: TaggedWord,
    pub dual_word: DualTagWord,
    pub record: AllocationRecord,
}

#[derive(Debug, Clone)]
pub struct MultiLevel {
    config: MultiLevelConfig,
    cursor: u64,
    system: DescriptorStore,
    page_table: PageTable,
    // Sorted parent list for range-cache miss walks: base -> centroid.
    parents: BTreeMap<LinearAddress, LinearAddress>,
    regions: BTreeMap<LinearAddress, ParentRegion>,
    counters: MultiLevelCounters,
}

impl Default for MultiLevel {
    fn default() -> Self {
        Self::new(MultiLevelConfig::default())
    }
}

impl MultiLevel {
    pub fn new(config: MultiLevelConfig) -> Self {
        Self {
            config,
            cursor: config.window_base,
            system: DescriptorStore::new(config.store),
            page_table: PageTable::default(),
            parents: BTreeMap::new(),
            regions: BTreeMap::new(),
            counters: MultiLevelCounters::default(),
        }
    }

    pub fn system_store(&self) -> &DescriptorStore {
        &self.system
    }

    pub fn system_store_mut(&mut self) -> &mut DescriptorStore {
        &mut self.system
    }

    pub fn page_table(&self) -> &PageTable {
        &self.page_table
    }

    pub fn counters(&self) -> MultiLevelCounters {
        self.counters
    }

    pub fn region(&self, centroid: LinearAddress) -> Option<&ParentRegion> {
        self.regions.get(&centroid)
    }

    pub fn regions(&self) -> impl Iterator<Item = &ParentRegion> {
        self.regions.values()
    }

    /// Maps a page-granular parent region and registers it with every scheme.
    pub fn map_parent(
        &mut self,
        heap: &mut HeapState,
        size: u64,
    ) -> Result<ParentRegion, MultiLevelError> {
        if size == 0 {
            return Err(MultiLevelError::ZeroSize);
        }
        let len = size
            .checked_next_multiple_of(PAGE_SIZE)
            .ok_or(MultiLevelError::WindowExhausted(size))?;
        let n = bit_length(len - 1);
        let slot_size = 1u64 << n;
        let cursor = self.cursor;
        let slot_end = (cursor & !(slot_size - 1)) + slot_size - 1;
        let base = if cursor + len - 1 <= slot_end {
            cursor
        } else {
            cursor.next_multiple_of(slot_size)
        };
        let window_end = self.config.window_base + self.config.window_size - 1;
        let bound = base + len - 1;
        if bound > window_end || bound > DUAL_TAG_ADDRESS_MASK {
            return Err(MultiLevelError::WindowExhausted(size));
        }
        self.cursor = bound + 1;

        let base = LinearAddress::new(base)?;
        let bound = LinearAddress::new(bound)?;
        let descriptor = ObjectDescriptor::new(base, bound, Level::System)?;
        let centroid = descriptor.centroid;
        self.system.insert(descriptor.clone())?;
        self.page_table
            .map(base, bound, descriptor.permissions, centroid);
        self.parents.insert(base, centroid);
        let region = ParentRegion {
            word: TaggedWord::new(Mode::Centroid, n, base)?,
            descriptor,
            arena: heap.add_arena(base, bound),
            children: Vec::new(),
        };
        self.regions.insert(centroid, region.clone());
        Ok(region)
    }

    /// Revokes the parent and clears every trace of it from the lookup paths.
    pub fn unmap_parent(
        &mut self,
        centroid: LinearAddress,
    ) -> Result<ParentRegion, MultiLevelError> {
        let region = self
            .regions
            .remove(&centroid)
            .ok_or(MultiLevelError::UnknownParent(centroid))?;
        self.system.revoke(centroid)?;
        self.page_table
            .unmap(region.descriptor.base, region.descriptor.bound);
        self.parents.remove(&region.descriptor.base);
        Ok(region)
    }

    pub fn child_alloc(
        &mut self,
        heap: &mut HeapState,
        user_store: &mut DescriptorStore,
        parent: LinearAddress,
        object_id: u64,
        size: u64,
        mode_override: Option<Mode>,
    ) -> Result<ChildAllocation, MultiLevelError> {
        let region = self
            .regions
            .get_mut(&parent)
            .ok_or(MultiLevelError::UnknownParent(parent))?;
        let req = AllocRequest {
            object_id,
            size,
            level: Level::User,
            mode_override,
            arena: region.arena,
            parent: Some(parent),
        };
        let (word, record) = heap.allocate_with(user_store, req).map_err(|e| match e {
            AllocError::OutOfSpace { .. } => MultiLevelError::ParentFull { parent, size },
            other => other.into(),
        })?;
        region.children.push(object_id);
        let dual_word = DualTagWord::new(word, region.word.exponent)?;
        Ok(ChildAllocation {
            word,
            dual_word,
            record,
        })
    }

    /// The dual-tag word issued for `child`: its own tag plus the exponent of
    /// the parent region holding its address (0 when there is none).
    pub fn dual_word_for(&self, child: TaggedWord) -> Result<DualTagWord, MultiLevelError> {
        let s_tag = self
            .parent_region_at(child.address)
            .map_or(0, |r| r.word.exponent);
        DualTagWord::new(child, s_tag)
    }

    pub fn query_for(&self, child: TaggedWord) -> ParentQuery {
        ParentQuery {
            address: child.address,
            dual_word: self.dual_word_for(child).ok().map(|w| w.encode()),
        }
    }

    fn parent_region_at(&self, addr: LinearAddress) -> Option<&ParentRegion> {
        let (_, c) = self.parents.range(..=addr).next_back()?;
        let r = &self.regions[c];
        r.descriptor.bounds().contains(addr).then_some(r)
    }

    /// Recovers the parent descriptor for a child address.
    pub fn parent_of(
        &mut self,
        query: ParentQuery,
        scheme: ParentScheme,
    ) -> Result<ObjectDescriptor, AccessFault> {
        self.counters.get_mut(scheme).lookups += 1;
        let found = match scheme {
            ParentScheme::DualTag => self.via_dual_tag(query),
            ParentScheme::RangeCache => self.via_range_cache(query.address),
            ParentScheme::Pte => self.via_page_table(query.address),
        };
        let counters = self.counters.get_mut(scheme);
        match found {
            Some(d) if d.level == Level::System && d.bounds().contains(query.address) => {
                counters.resolved += 1;
                Ok(d)
            }
            _ => {
                counters.misses += 1;
                Err(AccessFault::new(
                    FaultKind::DescriptorMiss,
                    query.dual_word.unwrap_or(query.address.get()),
                    Some(query.address),
                    format!("no parent region covers {} ({scheme})", query.address),
                ))
            }
        }
    }

    fn live_system(
        &mut self,
        centroid: LinearAddress,
        scheme: ParentScheme,
    ) -> Option<ObjectDescriptor> {
        self.counters.get_mut(scheme).descriptor_lookups += 1;
        match self.system.lookup(centroid) {
            LookupOutcome::Hit(d) | LookupOutcome::MissThenFill(d) => Some(d),
            LookupOutcome::NotFound | LookupOutcome::RevokedEntry(_) => None,
        }
    }

    fn via_dual_tag(&mut self, query: ParentQuery) -> Option<ObjectDescriptor> {
        self.counters.dualtag.tag_decodes += 1;
        let word = DualTagWord::decode(query.dual_word?).ok()?;
        if word.s_tag_exponent == 0 || word.address != query.address {
            return None;
        }
        let slot = SlotSpec::containing(word.address, word.s_tag_exponent).ok()?;
        self.live_system(centroid_pair(slot).1, ParentScheme::DualTag)
    }

    fn via_range_cache(&mut self, addr: LinearAddress) -> Option<ObjectDescriptor> {
        if let RangeLookup::Hit(d) = self.system.range_lookup(addr) {
            self.counters.rangecache.range_hits += 1;
            return Some(d);
        }
        self.counters.rangecache.walks += 1;
        let centroid = self.parent_region_at(addr)?.centroid();
        let d = self.system.peek(centroid).filter(|d| d.is_live())?.clone();
        if self.system.range_fill(centroid).is_ok() {
            self.counters.rangecache.range_fills += 1;
        }
        Some(d)
    }

    fn via_page_table(&mut self, addr: LinearAddress) -> Option<ObjectDescriptor> {
        self.counters.pte.walks += 1;
        let s_tag = self
            .page_table
            .entry(addr)
            .filter(|e| e.present)
            .and_then(|e| e.s_tag)?;
        self.live_system(s_tag, ParentScheme::Pte)
    }
}
