//! Simulated binning allocator.
//!
//! No host memory is reserved; the heap is bookkeeping over a window of the
//! 57-bit space. Small requests (below the mode threshold) get Aligned words
//! placed at the base of a fresh minimal 2^N slot. Everything else gets a
//! contiguous CentroID-mode range, placed so that its minimal slot exponent
//! equals `bit_length(size - 1)`, with a descriptor registered in the store.
//!
//! By default no address range is ever issued twice. With reuse enabled,
//! freed ranges go back to per-class free lists and come out again with a
//! bumped generation, which reintroduces aliasing between old and new words.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::descriptor_store::{DescriptorStore, Level, ObjectDescriptor, StoreError};
use crate::ptr_codec::{
    aligned_exponent_for_size, bit_length, min_slot_exponent, slot_base, CodecError, LinearAddress,
    Mode, SlotSpec, TaggedWord, MAX_EXPONENT,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("allocation size must be at least one byte")]
    ZeroSize,
    #[error("arena {arena} exhausted: cannot place {size} bytes")]
    OutOfSpace { arena: usize, size: u64 },
    #[error("unknown object id {0}")]
    UnknownObject(u64),
    #[error("double free of object {0}")]
    DoubleFree(u64),
    #[error("object id {0} was already allocated")]
    DuplicateObject(u64),
    #[error("unknown arena {0}")]
    UnknownArena(usize),
    #[error("invalid size-class table: {0}")]
    InvalidSizeClasses(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeClass {
    pub max_size: u64,
    pub exponent: u32,
}

/// Ordered `(max_size, N)` classes used to round Aligned-mode requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeClassTable {
    classes: Vec<SizeClass>,
}

impl Default for SizeClassTable {
    /// Powers of two from 2 B to 1 KiB.
    fn default() -> Self {
        Self {
            classes: (1..=10)
                .map(|n| SizeClass {
                    max_size: 1 << n,
                    exponent: n,
                })
                .collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SizeClassFile {
    Wrapped { classes: Vec<SizeClass> },
    Bare(Vec<SizeClass>),
}

impl SizeClassTable {
    pub fn new(classes: Vec<SizeClass>) -> Result<Self, AllocError> {
        if classes.is_empty() {
            return Err(AllocError::InvalidSizeClasses("no classes".into()));
        }
        for c in &classes {
            if !(1..=MAX_EXPONENT).contains(&c.exponent) {
                return Err(AllocError::InvalidSizeClasses(format!(
                    "exponent {} out of range",
                    c.exponent
                )));
            }
            if c.max_size == 0 || c.max_size > 1u64 << c.exponent {
                return Err(AllocError::InvalidSizeClasses(format!(
                    "max size {} does not fit a 2^{} slot",
                    c.max_size, c.exponent
                )));
            }
        }
        for pair in classes.windows(2) {
            if pair[1].max_size <= pair[0].max_size || pair[1].exponent < pair[0].exponent {
                return Err(AllocError::InvalidSizeClasses(format!(
                    "classes not increasing at max size {}",
                    pair[1].max_size
                )));
            }
        }
        Ok(Self { classes })
    }

    /// Accepts JSON (`{"classes": [...]}` or a bare array of
    /// `{"max_size", "exponent"}`) or text lines of `max_size exponent`.
    pub fn parse(text: &str) -> Result<Self, AllocError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') || trimmed.starts_with('[') {
            let file: SizeClassFile = serde_json::from_str(text)
                .map_err(|e| AllocError::InvalidSizeClasses(e.to_string()))?;
            return Self::new(match file {
                SizeClassFile::Wrapped { classes } | SizeClassFile::Bare(classes) => classes,
            });
        }
        let mut classes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parsed = match (parts.next(), parts.next(), parts.next()) {
                (Some(size), Some(n), None) => size.parse().ok().zip(n.parse().ok()),
                _ => None,
            };
            let (max_size, exponent) = parsed.ok_or_else(|| {
                AllocError::InvalidSizeClasses(format!(
                    "line {}: expected `max_size exponent`",
                    i + 1
                ))
            })?;
            classes.push(SizeClass { max_size, exponent });
        }
        Self::new(classes)
    }

    pub fn classes(&self) -> &[SizeClass] {
        &self.classes
    }

    pub fn exponent_for(&self, size: u64) -> Option<u32> {
        self.classes
            .iter()
            .find(|c| size <= c.max_size)
            .map(|c| c.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocConfig {
    /// Requests below this size default to Aligned mode.
    pub mode_threshold: u64,
    pub size_classes: SizeClassTable,
    /// Return freed ranges to free lists instead of quarantining them forever.
    pub reuse: bool,
    pub arena_base: u64,
    pub arena_size: u64,
    /// Also register descriptors for Aligned objects, keyed by their slot's centroid.
    pub register_aligned: bool,
}

pub const DEFAULT_MODE_THRESHOLD: u64 = 1024;
pub const DEFAULT_ARENA_BASE: u64 = 1 << 36;
pub const DEFAULT_ARENA_SIZE: u64 = 1 << 32;

impl Default for AllocConfig {
    fn default() -> Self {
        Self {
            mode_threshold: DEFAULT_MODE_THRESHOLD,
            size_classes: SizeClassTable::default(),
            reuse: false,
            arena_base: DEFAULT_ARENA_BASE,
            arena_size: DEFAULT_ARENA_SIZE,
            register_aligned: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArenaId(pub usize);

impl ArenaId {
    pub const MAIN: Self = Self(0);
}

#[derive(Debug, Clone)]
struct Arena {
    base: u64,
    // Inclusive.
    limit: u64,
    cursor: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocState {
    Live,
    Freed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub object_id: u64,
    pub requested_size: u64,
    pub base: LinearAddress,
    pub bound: LinearAddress,
    pub slot: SlotSpec,
    pub mode: Mode,
    pub level: Level,
    pub generation: u32,
    pub state: AllocState,
    pub arena: ArenaId,
    pub word: TaggedWord,
    /// Key of the registered descriptor, when one exists.
    pub centroid: Option<LinearAddress>,
    pub parent: Option<LinearAddress>,
}

impl AllocationRecord {
    pub fn reserved(&self) -> u64 {
        self.bound.get() - self.base.get() + 1
    }

    pub fn slack(&self) -> u64 {
        self.reserved() - self.requested_size
    }

    pub fn is_live(&self) -> bool {
        self.state == AllocState::Live
    }

    pub fn contains(&self, addr: LinearAddress) -> bool {
        self.base <= addr && addr <= self.bound
    }
}

/// One allocation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRequest {
    pub object_id: u64,
    pub size: u64,
    pub level: Level,
    pub mode_override: Option<Mode>,
    pub arena: ArenaId,
    pub parent: Option<LinearAddress>,
}

impl AllocRequest {
    pub fn new(object_id: u64, size: u64, level: Level) -> Self {
        Self {
            object_id,
            size,
            level,
            mode_override: None,
            arena: ArenaId::MAIN,
            parent: None,
        }
    }

    pub fn with_mode(mut self, mode: Option<Mode>) -> Self {
        self.mode_override = mode;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeFragmentation {
    pub objects: u64,
    pub total_requested: u64,
    pub total_reserved: u64,
    pub mean_slack: f64,
    pub max_slack: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FragmentationReport {
    pub aligned: ModeFragmentation,
    pub centroid: ModeFragmentation,
}

impl FragmentationReport {
    pub fn for_mode(&self, mode: Mode) -> &ModeFragmentation {
        match mode {
            Mode::Aligned => &self.aligned,
            Mode::Centroid => &self.centroid,
        }
    }
}

type FreeKey = (ArenaId, Mode, u32, u64);

/// Heap bookkeeping. Single owner; the replay engine drives it.
#[derive(Debug, Clone)]
pub struct HeapState {
    config: AllocConfig,
    arenas: Vec<Arena>,
    records: BTreeMap<u64, AllocationRecord>,
    // Interval index over live ranges: base -> object id.
    live: BTreeMap<LinearAddress, u64>,
    free_lists: BTreeMap<FreeKey, Vec<LinearAddress>>,
    generations: HashMap<LinearAddress, u32>,
    next_id: u64,
    double_frees: u64,
}

fn align_up(value: u64, exponent: u32) -> Option<u64> {
    let mask = (1u64 << exponent) - 1;
    value.checked_add(mask).map(|v| v & !mask)
}

impl HeapState {
    pub fn new(config: AllocConfig) -> Self {
        let main = Arena {
            base: config.arena_base,
            limit: config.arena_base + config.arena_size.max(1) - 1,
            cursor: config.arena_base,
        };
        Self {
            config,
            arenas: vec![main],
            records: BTreeMap::new(),
            live: BTreeMap::new(),
            free_lists: BTreeMap::new(),
            generations: HashMap::new(),
            next_id: 0,
            double_frees: 0,
        }
    }

    pub fn config(&self) -> &AllocConfig {
        &self.config
    }

    /// Adds an arena covering `[base, bound]`, e.g. the inside of a parent region.
    pub fn add_arena(&mut self, base: LinearAddress, bound: LinearAddress) -> ArenaId {
        self.arenas.push(Arena {
            base: base.get(),
            limit: bound.get(),
            cursor: base.get(),
        });
        ArenaId(self.arenas.len() - 1)
    }

    pub fn arena_bounds(&self, id: ArenaId) -> Option<(LinearAddress, LinearAddress)> {
        self.arenas.get(id.0).map(|a| {
            (
                LinearAddress::truncate(a.base),
                LinearAddress::truncate(a.limit),
            )
        })
    }

    /// Allocates under a fresh object id.
    pub fn allocate(
        &mut self,
        store: &mut DescriptorStore,
        size: u64,
        level: Level,
        mode_override: Option<Mode>,
    ) -> Result<(TaggedWord, AllocationRecord), AllocError> {
        let id = self.next_id;
        self.allocate_with(
            store,
            AllocRequest::new(id, size, level).with_mode(mode_override),
        )
    }

    pub fn allocate_with(
        &mut self,
        store: &mut DescriptorStore,
        req: AllocRequest,
    ) -> Result<(TaggedWord, AllocationRecord), AllocError> {
        if req.size == 0 {
            return Err(AllocError::ZeroSize);
        }
        if self.records.contains_key(&req.object_id) {
            return Err(AllocError::DuplicateObject(req.object_id));
        }
        if req.arena.0 >= self.arenas.len() {
            return Err(AllocError::UnknownArena(req.arena.0));
        }
        let mode = req
            .mode_override
            .unwrap_or(if req.size < self.config.mode_threshold {
                Mode::Aligned
            } else {
                Mode::Centroid
            });

        let (base, reserved, exponent) = match mode {
            Mode::Aligned => {
                let n = self
                    .config
                    .size_classes
                    .exponent_for(req.size)
                    .unwrap_or_else(|| aligned_exponent_for_size(req.size));
                let base = self.place(req.arena, mode, n, 1 << n, req.size, |cursor| {
                    align_up(cursor, n)
                })?;
                (base, 1u64 << n, n)
            }
            Mode::Centroid => {
                // Single-byte objects are widened so the range has two distinct centroids.
                let len = req.size.max(2);
                let n = bit_length(len - 1);
                let base = self.place(req.arena, mode, n, len, req.size, |cursor| {
                    let fits = slot_base(LinearAddress::truncate(cursor), n)
                        .get()
                        .checked_add((1u64 << n) - 1)
                        .is_some_and(|slot_end| cursor + (len - 1) <= slot_end);
                    if fits {
                        Some(cursor)
                    } else {
                        align_up(cursor, n)
                    }
                })?;
                (base, len, n)
            }
        };

        let base_addr = LinearAddress::new(base)?;
        let bound_addr = LinearAddress::new(base + reserved - 1)?;
        debug_assert_eq!(
            min_slot_exponent(base_addr, bound_addr).ok(),
            Some(exponent.max(1))
        );
        let slot = SlotSpec::containing(base_addr, exponent)?;
        let word = TaggedWord::new(mode, exponent, base_addr)?;
        let generation = self.generations.get(&base_addr).copied().unwrap_or(0);

        let centroid = if mode == Mode::Centroid || self.config.register_aligned {
            let mut d = ObjectDescriptor::new(base_addr, bound_addr, req.level)?;
            d.generation = generation;
            d.parent_centroid = req.parent;
            let c = d.centroid;
            store.insert(d)?;
            Some(c)
        } else {
            None
        };

        let record = AllocationRecord {
            object_id: req.object_id,
            requested_size: req.size,
            base: base_addr,
            bound: bound_addr,
            slot,
            mode,
            level: req.level,
            generation,
            state: AllocState::Live,
            arena: req.arena,
            word,
            centroid,
            parent: req.parent,
        };
        self.records.insert(req.object_id, record.clone());
        self.live.insert(base_addr, req.object_id);
        self.next_id = self.next_id.max(req.object_id + 1);
        Ok((word, record))
    }

    /// Picks a base: a recycled range for this class when reuse is on, else
    /// the placement rule applied to the arena cursor.
    fn place(
        &mut self,
        arena_id: ArenaId,
        mode: Mode,
        exponent: u32,
        reserved: u64,
        requested: u64,
        rule: impl Fn(u64) -> Option<u64>,
    ) -> Result<u64, AllocError> {
        if self.config.reuse {
            if let Some(base) = self
                .free_lists
                .get_mut(&(arena_id, mode, exponent, reserved))
                .and_then(Vec::pop)
            {
                return Ok(base.get());
            }
        }
        let arena = &mut self.arenas[arena_id.0];
        let out_of_space = AllocError::OutOfSpace {
            arena: arena_id.0,
            size: requested,
        };
        let base = rule(arena.cursor).ok_or(out_of_space.clone())?;
        let end = base.checked_add(reserved - 1).ok_or(out_of_space.clone())?;
        if end > arena.limit {
            return Err(out_of_space);
        }
        arena.cursor = end + 1;
        Ok(base)
    }

    pub fn free(
        &mut self,
        store: &mut DescriptorStore,
        object_id: u64,
    ) -> Result<AllocationRecord, AllocError> {
        let record = self
            .records
            .get_mut(&object_id)
            .ok_or(AllocError::UnknownObject(object_id))?;
        if record.state == AllocState::Freed {
            self.double_frees += 1;
            return Err(AllocError::DoubleFree(object_id));
        }
        record.state = AllocState::Freed;
        let record = record.clone();
        self.live.remove(&record.base);
        if let Some(c) = record.centroid {
            store.revoke(c)?;
        }
        if self.config.reuse {
            *self.generations.entry(record.base).or_insert(0) += 1;
            self.free_lists
                .entry((
                    record.arena,
                    record.mode,
                    record.slot.exponent(),
                    record.reserved(),
                ))
                .or_default()
                .push(record.base);
        }
        Ok(record)
    }

    pub fn record(&self, object_id: u64) -> Option<&AllocationRecord> {
        self.records.get(&object_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.records.values()
    }

    pub fn live_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.live.values().map(|id| &self.records[id])
    }

    /// The live record whose `[base, bound]` holds `addr`.
    pub fn find_live(&self, addr: LinearAddress) -> Option<&AllocationRecord> {
        let (_, id) = self.live.range(..=addr).next_back()?;
        let r = &self.records[id];
        r.contains(addr).then_some(r)
    }

    /// Live ranges are pairwise disjoint.
    pub fn is_disjoint(&self) -> bool {
        let mut prev: Option<LinearAddress> = None;
        for id in self.live.values() {
            let r = &self.records[id];
            if prev.is_some_and(|p| r.base <= p) {
                return false;
            }
            prev = Some(r.bound);
        }
        true
    }

    pub fn double_frees(&self) -> u64 {
        self.double_frees
    }

    pub fn fragmentation_report(&self) -> FragmentationReport {
        let mut report = FragmentationReport::default();
        for r in self.records.values() {
            let m = match r.mode {
                Mode::Aligned => &mut report.aligned,
                Mode::Centroid => &mut report.centroid,
            };
            m.objects += 1;
            m.total_requested += r.requested_size;
            m.total_reserved += r.reserved();
            m.max_slack = m.max_slack.max(r.slack());
        }
        for m in [&mut report.aligned, &mut report.centroid] {
            if m.objects > 0 {
                m.mean_slack = (m.total_reserved - m.total_requested) as f64 / m.objects as f64;
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor_store::{DescriptorState, LookupOutcome};
    use crate::ptr_codec::canonical_centroid;
    use proptest::prelude::*;

    fn heap() -> (HeapState, DescriptorStore) {
        (
            HeapState::new(AllocConfig::default()),
            DescriptorStore::default(),
        )
    }

    #[test]
    fn size_nine_gets_sixteen_byte_slot() {
        let (mut h, mut s) = heap();
        let (w, r) = h.allocate(&mut s, 9, Level::User, None).unwrap();
        assert_eq!((w.mode, w.exponent), (Mode::Aligned, 4));
        assert_eq!(r.slack(), 7);
        assert_eq!(r.slack(), (1 << 4) - 9);
        assert_eq!(r.base, w.address);
        assert!(s.is_empty());
    }

    #[test]
    fn single_byte_gets_two_byte_slot() {
        let (mut h, mut s) = heap();
        let (w, r) = h.allocate(&mut s, 1, Level::User, None).unwrap();
        assert_eq!(w.exponent, 1);
        assert_eq!(r.bound.get(), r.base.get() + 1);
    }

    #[test]
    fn large_object_goes_centroid_with_descriptor() {
        let (mut h, mut s) = heap();
        let (w, r) = h.allocate(&mut s, 1 << 20, Level::System, None).unwrap();
        assert_eq!(w.mode, Mode::Centroid);
        assert_eq!(r.slack(), 0);
        let c = r.centroid.unwrap();
        assert!(r.base <= c && c <= r.bound);
        assert_eq!(c, canonical_centroid(r.base, r.bound).unwrap());
        let d = s.peek(c).unwrap();
        assert_eq!((d.base, d.bound, d.level), (r.base, r.bound, Level::System));
        assert_eq!(w.exponent, 20);
    }

    #[test]
    fn centroid_placement_packs_within_minimal_slot() {
        let (mut h, mut s) = heap();
        // Two 1500-byte objects share nothing; the second starts right after
        // the first when it still fits its own 2 KiB slot.
        let (_, a) = h.allocate(&mut s, 1500, Level::User, None).unwrap();
        let (_, b) = h.allocate(&mut s, 1500, Level::User, None).unwrap();
        assert_eq!(a.base.get() % 2048, 0);
        assert_eq!(b.base.get(), a.base.get() + 2048);
        // Cursor sits at offset 3548; [3548, 3847] would cross a 512-byte
        // boundary, so the 300-byte object moves up to 3584.
        let (_, c) = h
            .allocate(&mut s, 300, Level::User, Some(Mode::Centroid))
            .unwrap();
        assert_eq!(c.base.get() - a.base.get(), 3584);
        // [3884, 3903] fits the 32-byte slot at 3872 and packs tightly.
        let (_, d) = h
            .allocate(&mut s, 20, Level::User, Some(Mode::Centroid))
            .unwrap();
        assert_eq!(d.base.get(), c.bound.get() + 1);
        for r in [&a, &b, &c, &d] {
            assert_eq!(r.slot.exponent(), bit_length(r.requested_size - 1));
        }
    }

    #[test]
    fn free_revokes_and_double_free_is_reported() {
        let (mut h, mut s) = heap();
        let (_, r) = h.allocate(&mut s, 4096, Level::User, None).unwrap();
        let freed = h.free(&mut s, r.object_id).unwrap();
        assert_eq!(freed.state, AllocState::Freed);
        assert_eq!(
            s.peek(r.centroid.unwrap()).unwrap().state,
            DescriptorState::Revoked
        );
        assert_eq!(
            h.free(&mut s, r.object_id),
            Err(AllocError::DoubleFree(r.object_id))
        );
        assert_eq!(h.double_frees(), 1);
        assert_eq!(h.free(&mut s, 999), Err(AllocError::UnknownObject(999)));
    }

    #[test]
    fn reuse_bumps_slot_generation() {
        let mut h = HeapState::new(AllocConfig {
            reuse: true,
            ..AllocConfig::default()
        });
        let mut s = DescriptorStore::default();
        let (_, a) = h.allocate(&mut s, 24, Level::User, None).unwrap();
        h.free(&mut s, a.object_id).unwrap();
        let (_, b) = h.allocate(&mut s, 20, Level::User, None).unwrap();
        assert_eq!(b.base, a.base);
        assert_eq!(b.generation, a.generation + 1);
    }

    #[test]
    fn reuse_reissues_centroid_range_over_tombstone() {
        let mut h = HeapState::new(AllocConfig {
            reuse: true,
            ..AllocConfig::default()
        });
        let mut s = DescriptorStore::default();
        let (_, a) = h.allocate(&mut s, 5000, Level::User, None).unwrap();
        h.free(&mut s, a.object_id).unwrap();
        let (_, b) = h.allocate(&mut s, 5000, Level::User, None).unwrap();
        assert_eq!(b.centroid, a.centroid);
        assert_eq!(s.tombstones_reclaimed(), 1);
        assert!(matches!(
            s.lookup(a.centroid.unwrap()),
            LookupOutcome::MissThenFill(_)
        ));
    }

    #[test]
    fn fresh_policy_never_reissues() {
        let (mut h, mut s) = heap();
        let (_, a) = h.allocate(&mut s, 24, Level::User, None).unwrap();
        h.free(&mut s, a.object_id).unwrap();
        let (_, b) = h.allocate(&mut s, 24, Level::User, None).unwrap();
        assert!(b.base > a.bound);
    }

    #[test]
    fn arena_exhaustion() {
        let mut h = HeapState::new(AllocConfig {
            arena_size: 64,
            ..AllocConfig::default()
        });
        let mut s = DescriptorStore::default();
        h.allocate(&mut s, 64, Level::User, None).unwrap();
        assert!(matches!(
            h.allocate(&mut s, 1, Level::User, None),
            Err(AllocError::OutOfSpace { .. })
        ));
        assert_eq!(
            h.allocate(&mut s, 0, Level::User, None),
            Err(AllocError::ZeroSize)
        );
    }

    #[test]
    fn duplicate_object_id_rejected() {
        let (mut h, mut s) = heap();
        h.allocate_with(&mut s, AllocRequest::new(7, 8, Level::User))
            .unwrap();
        assert_eq!(
            h.allocate_with(&mut s, AllocRequest::new(7, 8, Level::User)),
            Err(AllocError::DuplicateObject(7))
        );
    }

    #[test]
    fn fragmentation_examples() {
        let (mut h, mut s) = heap();
        h.allocate(&mut s, 9, Level::User, None).unwrap();
        assert_eq!(h.fragmentation_report().aligned.max_slack, 7);

        let (mut h, mut s) = heap();
        h.allocate(&mut s, 16, Level::User, None).unwrap();
        assert_eq!(h.fragmentation_report().aligned.max_slack, 0);

        let (mut h, mut s) = heap();
        for n in 2..=10u32 {
            let (_, r) = h
                .allocate(&mut s, (1 << (n - 1)) + 1, Level::User, None)
                .unwrap();
            assert_eq!(r.slot.exponent(), n);
            assert_eq!(r.slack(), (1 << (n - 1)) - 1);
        }
        let rep = h.fragmentation_report();
        assert_eq!(rep.aligned.objects, 9);
        assert_eq!(rep.aligned.max_slack, (1 << 9) - 1);
        assert_eq!(rep.centroid.objects, 0);
    }

    #[test]
    fn size_class_table_parsing() {
        let json = r#"{"classes":[{"max_size":8,"exponent":3},{"max_size":48,"exponent":6}]}"#;
        let t = SizeClassTable::parse(json).unwrap();
        assert_eq!(t.exponent_for(9), Some(6));
        assert_eq!(t.exponent_for(49), None);
        let text = "# size exponent\n8 3\n48 6\n";
        assert_eq!(SizeClassTable::parse(text).unwrap(), t);
        assert!(SizeClassTable::parse("16 3").is_err());
        assert!(SizeClassTable::parse("8 3\n4 2").is_err());
        assert!(SizeClassTable::parse("8").is_err());
    }

    #[test]
    fn custom_classes_drive_aligned_exponent() {
        let mut h = HeapState::new(AllocConfig {
            size_classes: SizeClassTable::parse("8 3\n48 6").unwrap(),
            ..AllocConfig::default()
        });
        let mut s = DescriptorStore::default();
        let (w, _) = h.allocate(&mut s, 9, Level::User, None).unwrap();
        assert_eq!(w.exponent, 6);
        // Beyond the table, the exponent falls back to the minimal slot.
        let (w, _) = h.allocate(&mut s, 100, Level::User, None).unwrap();
        assert_eq!(w.exponent, 7);
    }

    proptest! {
        #[test]
        fn heap_invariants_hold(
            ops in proptest::collection::vec((any::<bool>(), 1u64..6000, any::<bool>(), 0usize..64), 1..120),
            reuse in any::<bool>(),
        ) {
            let mut h = HeapState::new(AllocConfig { reuse, ..AllocConfig::default() });
            let mut s = DescriptorStore::default();
            let mut ids = Vec::new();
            let mut last_base = None;
            for (is_alloc, size, force, pick) in ops {
                if is_alloc || ids.is_empty() {
                    let ov = force.then_some(Mode::Centroid);
                    let (w, r) = h.allocate(&mut s, size, Level::User, ov).unwrap();
                    if !reuse {
                        prop_assert!(last_base.is_none_or(|b| r.base > b));
                        last_base = Some(r.base);
                    }
                    prop_assert!(r.requested_size <= r.reserved());
                    prop_assert!(r.slot.contains(r.base) && r.slot.contains(r.bound));
                    match r.mode {
                        Mode::Aligned => {
                            prop_assert!(size < DEFAULT_MODE_THRESHOLD && !force);
                            let b = crate::ptr_codec::aligned_bounds(w).unwrap();
                            prop_assert_eq!((b.base, b.bound), (r.base, r.bound));
                            let n = r.slot.exponent();
                            if size == 1 {
                                // widened to the 2-byte minimum slot
                                prop_assert_eq!(r.slack(), 1);
                            } else {
                                prop_assert!(r.slack() < 1u64 << (n - 1));
                            }
                        }
                        Mode::Centroid => {
                            let d = s.peek(r.centroid.unwrap()).unwrap();
                            prop_assert_eq!((d.base, d.bound), (r.base, r.bound));
                        }
                    }
                    ids.push(r.object_id);
                } else {
                    let id = ids.swap_remove(pick % ids.len());
                    h.free(&mut s, id).unwrap();
                }
                prop_assert!(h.is_disjoint());
            }
        }
    }
}
