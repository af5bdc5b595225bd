//! Centralized descriptor storage.
//!
//! Three structures live here:
//!
//! * the memory-resident table, an associative map keyed by canonical centroid;
//! * a set-associative LRU descriptor cache tagged by centroid;
//! * a small fully-associative LRU range cache answering "which registered
//!   range holds this address".
//!
//! Revoked descriptors stay in the table as tombstones so a stale word can be
//! told apart from a word that never named anything. A tombstone is dropped
//! when a new descriptor with the same centroid is inserted, which only
//! happens when the allocator re-issues an address range.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ptr_codec::{
    canonical_centroid, exponent_from_centroid, min_slot_exponent, BoundsDescriptor, CentroidKind,
    CodecError, LinearAddress,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("a live descriptor is already registered under centroid {0}")]
    DuplicateCentroid(LinearAddress),
    #[error("no descriptor registered under centroid {0}")]
    UnknownCentroid(LinearAddress),
    #[error("descriptor {0} is already revoked")]
    AlreadyRevoked(LinearAddress),
    #[error("range [{base}, {bound}] overlaps cached range [{other_base}, {other_bound}]")]
    RangeOverlap {
        base: LinearAddress,
        bound: LinearAddress,
        other_base: LinearAddress,
        other_bound: LinearAddress,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Permissions {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Permissions {
    pub const READ_WRITE: Self = Self {
        read: true,
        write: true,
        execute: false,
    };
    pub const READ_ONLY: Self = Self {
        read: true,
        write: false,
        execute: false,
    };
    pub const ALL: Self = Self {
        read: true,
        write: true,
        execute: true,
    };
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    User,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorState {
    Live,
    Revoked,
}

/// Per-object record held in the table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub centroid: LinearAddress,
    pub base: LinearAddress,
    pub bound: LinearAddress,
    pub permissions: Permissions,
    pub level: Level,
    pub state: DescriptorState,
    pub generation: u32,
    pub parent_centroid: Option<LinearAddress>,
    pub semantic_tag: Option<u8>,
}

impl ObjectDescriptor {
    /// A live read/write descriptor keyed by the canonical centroid of `[base, bound]`.
    pub fn new(
        base: LinearAddress,
        bound: LinearAddress,
        level: Level,
    ) -> Result<Self, CodecError> {
        Ok(Self {
            centroid: canonical_centroid(base, bound)?,
            base,
            bound,
            permissions: Permissions::READ_WRITE,
            level,
            state: DescriptorState::Live,
            generation: 0,
            parent_centroid: None,
            semantic_tag: None,
        })
    }

    pub fn bounds(&self) -> BoundsDescriptor {
        BoundsDescriptor {
            base: self.base,
            bound: self.bound,
        }
    }

    pub fn is_live(&self) -> bool {
        self.state == DescriptorState::Live
    }

    /// Minimal slot exponent of the described range.
    pub fn exponent(&self) -> u32 {
        min_slot_exponent(self.base, self.bound).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub sets: usize,
    pub ways: usize,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        Self { sets: 64, ways: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub invalidations: u64,
}

impl CacheCounters {
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

#[derive(Debug, Clone)]
struct CacheLine {
    tag: LinearAddress,
    descriptor: ObjectDescriptor,
}

/// Set-associative LRU cache of descriptors tagged by centroid.
#[derive(Debug, Clone)]
pub struct DescriptorCache {
    geometry: CacheGeometry,
    // Index 0 is most recently used.
    sets: Vec<Vec<CacheLine>>,
    counters: CacheCounters,
}

impl DescriptorCache {
    pub fn new(geometry: CacheGeometry) -> Self {
        let geometry = CacheGeometry {
            sets: geometry.sets.max(1),
            ways: geometry.ways.max(1),
        };
        Self {
            geometry,
            sets: vec![Vec::with_capacity(geometry.ways); geometry.sets],
            counters: CacheCounters::default(),
        }
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    /// Set selected by the low bits of the slot prefix above the centroid's
    /// trailing `1000..0` pattern.
    pub fn set_index(&self, centroid: LinearAddress) -> usize {
        let n = exponent_from_centroid(centroid, CentroidKind::High);
        let prefix = centroid.get().checked_shr(n).unwrap_or(0);
        (prefix % self.geometry.sets as u64) as usize
    }

    /// Looks up `centroid`, promoting it to MRU on a hit.
    pub fn probe(&mut self, centroid: LinearAddress) -> Option<ObjectDescriptor> {
        let idx = self.set_index(centroid);
        let set = &mut self.sets[idx];
        match set.iter().position(|l| l.tag == centroid) {
            Some(pos) => {
                let line = set.remove(pos);
                let d = line.descriptor.clone();
                set.insert(0, line);
                self.counters.hits += 1;
                Some(d)
            }
            None => {
                self.counters.misses += 1;
                None
            }
        }
    }

    /// Installs `descriptor` as MRU, returning the evicted LRU line's tag if any.
    pub fn fill(&mut self, descriptor: ObjectDescriptor) -> Option<LinearAddress> {
        let idx = self.set_index(descriptor.centroid);
        let ways = self.geometry.ways;
        let set = &mut self.sets[idx];
        if let Some(pos) = set.iter().position(|l| l.tag == descriptor.centroid) {
            set.remove(pos);
        }
        let evicted = if set.len() >= ways {
            self.counters.evictions += 1;
            set.pop().map(|l| l.tag)
        } else {
            None
        };
        set.insert(
            0,
            CacheLine {
                tag: descriptor.centroid,
                descriptor,
            },
        );
        evicted
    }

    pub fn invalidate(&mut self, centroid: LinearAddress) -> bool {
        let idx = self.set_index(centroid);
        let set = &mut self.sets[idx];
        match set.iter().position(|l| l.tag == centroid) {
            Some(pos) => {
                set.remove(pos);
                self.counters.invalidations += 1;
                true
            }
            None => false,
        }
    }

    /// Rewrites a cached copy in place without touching LRU order.
    fn refresh(&mut self, descriptor: &ObjectDescriptor) {
        let idx = self.set_index(descriptor.centroid);
        if let Some(line) = self.sets[idx]
            .iter_mut()
            .find(|l| l.tag == descriptor.centroid)
        {
            line.descriptor = descriptor.clone();
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &ObjectDescriptor> {
        self.sets.iter().flatten().map(|l| &l.descriptor)
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One range-cache entry; the descriptor is referenced by centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub base: LinearAddress,
    pub bound: LinearAddress,
    pub centroid: LinearAddress,
}

impl RangeEntry {
    fn contains(&self, addr: LinearAddress) -> bool {
        self.base <= addr && addr <= self.bound
    }

    fn overlaps(&self, other: &RangeEntry) -> bool {
        self.base <= other.bound && other.base <= self.bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RangeCounters {
    pub hits: u64,
    pub misses: u64,
    pub fills: u64,
    pub evictions: u64,
    pub rejected: u64,
}

impl RangeCounters {
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

pub const DEFAULT_RANGE_CAPACITY: usize = 16;

/// Fully-associative LRU cache of address ranges.
#[derive(Debug, Clone)]
pub struct RangeCache {
    capacity: usize,
    // Front is most recently used.
    entries: VecDeque<RangeEntry>,
    counters: RangeCounters,
}

impl RangeCache {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            counters: RangeCounters::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn counters(&self) -> RangeCounters {
        self.counters
    }

    pub fn lookup(&mut self, addr: LinearAddress) -> Option<RangeEntry> {
        match self.entries.iter().position(|e| e.contains(addr)) {
            Some(pos) => {
                let e = self.entries.remove(pos).expect("position in range");
                self.entries.push_front(e);
                self.counters.hits += 1;
                Some(e)
            }
            None => {
                self.counters.misses += 1;
                None
            }
        }
    }

    /// Inserts as MRU, evicting the LRU entry when full. Overlapping ranges are rejected.
    pub fn insert(&mut self, entry: RangeEntry) -> Result<Option<RangeEntry>, StoreError> {
        if let Some(other) = self.entries.iter().find(|e| e.overlaps(&entry)) {
            self.counters.rejected += 1;
            return Err(StoreError::RangeOverlap {
                base: entry.base,
                bound: entry.bound,
                other_base: other.base,
                other_bound: other.bound,
            });
        }
        let evicted = if self.entries.len() >= self.capacity {
            self.counters.evictions += 1;
            self.entries.pop_back()
        } else {
            None
        };
        self.entries.push_front(entry);
        self.counters.fills += 1;
        Ok(evicted)
    }

    pub fn invalidate_centroid(&mut self, centroid: LinearAddress) {
        self.entries.retain(|e| e.centroid != centroid);
    }

    pub fn entries(&self) -> impl Iterator<Item = &RangeEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupOutcome {
    Hit(ObjectDescriptor),
    MissThenFill(ObjectDescriptor),
    NotFound,
    /// Carries the stale descriptor for diagnostics.
    RevokedEntry(ObjectDescriptor),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RangeLookup {
    Hit(ObjectDescriptor),
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LookupCounters {
    pub hit: u64,
    pub miss_then_fill: u64,
    pub not_found: u64,
    pub revoked: u64,
}

impl LookupCounters {
    pub fn total(&self) -> u64 {
        self.hit + self.miss_then_fill + self.not_found + self.revoked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub cache: CacheGeometry,
    pub range_capacity: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            cache: CacheGeometry::default(),
            range_capacity: DEFAULT_RANGE_CAPACITY,
        }
    }
}

/// Descriptor table plus its cache models.
#[derive(Debug, Clone)]
pub struct DescriptorStore {
    table: HashMap<LinearAddress, ObjectDescriptor>,
    cache: DescriptorCache,
    ranges: RangeCache,
    lookups: LookupCounters,
    tombstones_reclaimed: u64,
}

impl Default for DescriptorStore {
    fn default() -> Self {
        Self::new(StoreConfig::default())
    }
}

impl DescriptorStore {
    pub fn new(config: StoreConfig) -> Self {
        Self {
            table: HashMap::new(),
            cache: DescriptorCache::new(config.cache),
            ranges: RangeCache::new(config.range_capacity),
            lookups: LookupCounters::default(),
            tombstones_reclaimed: 0,
        }
    }

    /// Registers a descriptor. The cache is left cold.
    pub fn insert(&mut self, descriptor: ObjectDescriptor) -> Result<(), StoreError> {
        let key = descriptor.centroid;
        if let Some(existing) = self.table.get(&key) {
            if existing.is_live() {
                return Err(StoreError::DuplicateCentroid(key));
            }
            self.tombstones_reclaimed += 1;
        }
        // A tombstone never sits in either cache, so nothing to invalidate.
        self.table.insert(key, descriptor);
        Ok(())
    }

    pub fn revoke(&mut self, centroid: LinearAddress) -> Result<ObjectDescriptor, StoreError> {
        let entry = self
            .table
            .get_mut(&centroid)
            .ok_or(StoreError::UnknownCentroid(centroid))?;
        if !entry.is_live() {
            return Err(StoreError::AlreadyRevoked(centroid));
        }
        entry.state = DescriptorState::Revoked;
        let stale = entry.clone();
        self.cache.invalidate(centroid);
        self.ranges.invalidate_centroid(centroid);
        Ok(stale)
    }

    pub fn set_permissions(
        &mut self,
        centroid: LinearAddress,
        permissions: Permissions,
    ) -> Result<(), StoreError> {
        let entry = self
            .table
            .get_mut(&centroid)
            .ok_or(StoreError::UnknownCentroid(centroid))?;
        entry.permissions = permissions;
        let updated = entry.clone();
        self.cache.refresh(&updated);
        Ok(())
    }

    /// Cache first, then table; a live table hit fills the cache.
    pub fn lookup(&mut self, centroid: LinearAddress) -> LookupOutcome {
        if let Some(d) = self.cache.probe(centroid) {
            self.lookups.hit += 1;
            return LookupOutcome::Hit(d);
        }
        match self.table.get(&centroid) {
            None => {
                self.lookups.not_found += 1;
                LookupOutcome::NotFound
            }
            Some(d) if !d.is_live() => {
                self.lookups.revoked += 1;
                LookupOutcome::RevokedEntry(d.clone())
            }
            Some(d) => {
                let d = d.clone();
                self.cache.fill(d.clone());
                self.lookups.miss_then_fill += 1;
                LookupOutcome::MissThenFill(d)
            }
        }
    }

    /// Table read with no cache side effects.
    pub fn peek(&self, centroid: LinearAddress) -> Option<&ObjectDescriptor> {
        self.table.get(&centroid)
    }

    /// Range-cache query. A miss leaves the fill to the caller's table walk.
    pub fn range_lookup(&mut self, addr: LinearAddress) -> RangeLookup {
        match self.ranges.lookup(addr) {
            Some(entry) => match self.table.get(&entry.centroid) {
                Some(d) if d.is_live() => RangeLookup::Hit(d.clone()),
                _ => {
                    self.ranges.invalidate_centroid(entry.centroid);
                    RangeLookup::Miss
                }
            },
            None => RangeLookup::Miss,
        }
    }

    /// Caches the range of a live descriptor.
    pub fn range_fill(
        &mut self,
        centroid: LinearAddress,
    ) -> Result<Option<RangeEntry>, StoreError> {
        let d = self
            .table
            .get(&centroid)
            .filter(|d| d.is_live())
            .ok_or(StoreError::UnknownCentroid(centroid))?;
        self.ranges.insert(RangeEntry {
            base: d.base,
            bound: d.bound,
            centroid,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.table.values().filter(|d| d.is_live()).count()
    }

    pub fn cache(&self) -> &DescriptorCache {
        &self.cache
    }

    pub fn range_cache(&self) -> &RangeCache {
        &self.ranges
    }

    pub fn lookup_counters(&self) -> LookupCounters {
        self.lookups
    }

    pub fn tombstones_reclaimed(&self) -> u64 {
        self.tombstones_reclaimed
    }

    /// Every cached descriptor equals the table's live entry for its key.
    pub fn is_coherent(&self) -> bool {
        let cache_ok = self.cache.entries().all(|c| {
            self.table
                .get(&c.centroid)
                .is_some_and(|t| t.is_live() && t == c)
        });
        let range_ok = self.ranges.entries().all(|e| {
            self.table
                .get(&e.centroid)
                .is_some_and(|t| t.is_live() && t.base == e.base && t.bound == e.bound)
        });
        cache_ok && range_ok
    }
}
