//! Descriptor generation and access authentication.
//!
//! For every access the DGU obtains a descriptor for the word (synthesized
//! from the tag for Aligned words, fetched from the store for CentroID words)
//! and then runs the checks in a fixed order:
//!
//! 1. tag well-formedness
//! 2. descriptor derivation
//! 3. address authentication: `[ea, ea + size - 1]` inside `[base, bound]`
//! 4. access control against the descriptor's permissions
//! 5. temporal check: the descriptor must be live
//!
//! The first failing phase names the fault. A faulting request is never
//! issued.

use serde::{Deserialize, Serialize};

use crate::descriptor_store::{
    DescriptorState, DescriptorStore, Level, LookupOutcome, ObjectDescriptor, Permissions,
};
use crate::ptr_codec::{centroid_pair, LinearAddress, Mode, TaggedWord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Load,
    Store,
    Fetch,
}

impl Permissions {
    pub fn permits(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Load => self.read,
            AccessKind::Store => self.write,
            AccessKind::Fetch => self.execute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    MalformedTag,
    OutOfBounds,
    UseAfterFree,
    PermissionDenied,
    DescriptorMiss,
    DoubleFree,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::MalformedTag,
        FaultKind::OutOfBounds,
        FaultKind::UseAfterFree,
        FaultKind::PermissionDenied,
        FaultKind::DescriptorMiss,
        FaultKind::DoubleFree,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FaultKind::MalformedTag => "malformed_tag",
            FaultKind::OutOfBounds => "out_of_bounds",
            FaultKind::UseAfterFree => "use_after_free",
            FaultKind::PermissionDenied => "permission_denied",
            FaultKind::DescriptorMiss => "descriptor_miss",
            FaultKind::DoubleFree => "double_free",
        }
    }
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind} on word {word:#018x}: {detail}")]
pub struct AccessFault {
    pub kind: FaultKind,
    #[serde(with = "crate::hex")]
    pub word: u64,
    #[serde(with = "crate::hex::option")]
    pub effective_address: Option<u64>,
    pub detail: String,
}

impl AccessFault {
    pub fn new(
        kind: FaultKind,
        word: u64,
        ea: Option<LinearAddress>,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            word,
            effective_address: ea.map(LinearAddress::get),
            detail: detail.into(),
        }
    }
}

/// A memory demand: a raw word plus a signed offset, byte count, and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRequest {
    pub word: u64,
    pub offset: i64,
    pub size: u64,
    pub kind: AccessKind,
}

impl AccessRequest {
    pub fn new(word: TaggedWord, offset: i64, size: u64, kind: AccessKind) -> Self {
        Self::raw(word.encode(), offset, size, kind)
    }

    pub fn raw(word: u64, offset: i64, size: u64, kind: AccessKind) -> Self {
        Self {
            word,
            offset,
            size,
            kind,
        }
    }
}

/// An authenticated access, ready to be issued.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectiveAccess {
    pub effective_address: LinearAddress,
    pub size: u64,
    pub descriptor: ObjectDescriptor,
}

impl EffectiveAccess {
    /// Inclusive byte span.
    pub fn span(&self) -> (LinearAddress, LinearAddress) {
        let last = LinearAddress::truncate(self.effective_address.get() + self.size - 1);
        (self.effective_address, last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DguConfig {
    /// Derive the centroid of Aligned words and consult the store when the
    /// allocator registered one.
    pub aligned_liveness: bool,
    /// Let `ptr_add` produce the one-past-the-end address.
    pub cpp_one_past: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DguCounters {
    pub attempted: u64,
    pub issued: u64,
    pub faulted: u64,
    pub synthesized: u64,
    pub store_lookups: u64,
    pub pointer_ops: u64,
    pub pointer_faults: u64,
}

/// Bounds and default permissions for an Aligned word, computed without the store.
pub fn synthesize_aligned(word: TaggedWord) -> ObjectDescriptor {
    let slot = word.slot();
    ObjectDescriptor {
        centroid: centroid_pair(slot).1,
        base: slot.base(),
        bound: slot.bound(),
        permissions: Permissions::READ_WRITE,
        level: Level::User,
        state: DescriptorState::Live,
        generation: 0,
        parent_centroid: None,
        semantic_tag: None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dgu {
    config: DguConfig,
    counters: DguCounters,
}

impl Dgu {
    pub fn new(config: DguConfig) -> Self {
        Self {
            config,
            counters: DguCounters::default(),
        }
    }

    pub fn config(&self) -> DguConfig {
        self.config
    }

    pub fn counters(&self) -> DguCounters {
        self.counters
    }

    /// Descriptor for `word`, or the fault that prevents obtaining a live one.
    pub fn derive_descriptor(
        &mut self,
        store: &mut DescriptorStore,
        word: TaggedWord,
    ) -> Result<ObjectDescriptor, AccessFault> {
        let d = self.derive(store, word)?;
        if d.is_live() {
            Ok(d)
        } else {
            Err(revoked_fault(word.encode(), None, &d))
        }
    }

    /// Like `derive_descriptor` but hands back tombstones so the temporal
    /// phase can run in its place in the pipeline.
    fn derive(
        &mut self,
        store: &mut DescriptorStore,
        word: TaggedWord,
    ) -> Result<ObjectDescriptor, AccessFault> {
        let centroid = centroid_pair(word.slot()).1;
        match word.mode {
            Mode::Aligned => {
                if self.config.aligned_liveness {
                    self.counters.store_lookups += 1;
                    match store.lookup(centroid) {
                        LookupOutcome::Hit(d) | LookupOutcome::MissThenFill(d) => return Ok(d),
                        LookupOutcome::RevokedEntry(d) => return Ok(d),
                        LookupOutcome::NotFound => {}
                    }
                }
                self.counters.synthesized += 1;
                Ok(synthesize_aligned(word))
            }
            Mode::Centroid => {
                self.counters.store_lookups += 1;
                match store.lookup(centroid) {
                    LookupOutcome::Hit(d)
                    | LookupOutcome::MissThenFill(d)
                    | LookupOutcome::RevokedEntry(d) => Ok(d),
                    LookupOutcome::NotFound => Err(AccessFault::new(
                        FaultKind::DescriptorMiss,
                        word.encode(),
                        None,
                        format!("no descriptor for centroid {centroid}"),
                    )),
                }
            }
        }
    }

    pub fn authenticate(
        &mut self,
        store: &mut DescriptorStore,
        req: AccessRequest,
    ) -> Result<EffectiveAccess, AccessFault> {
        self.counters.attempted += 1;
        let result = self.run_phases(store, req);
        match result {
            Ok(_) => self.counters.issued += 1,
            Err(_) => self.counters.faulted += 1,
        }
        result
    }

    fn run_phases(
        &mut self,
        store: &mut DescriptorStore,
        req: AccessRequest,
    ) -> Result<EffectiveAccess, AccessFault> {
        let word = TaggedWord::decode(req.word).map_err(|e| {
            AccessFault::new(FaultKind::MalformedTag, req.word, None, e.to_string())
        })?;
        let descriptor = self.derive(store, word)?;

        let ea = word.address.checked_offset(req.offset);
        let in_bounds = ea.is_some_and(|ea| descriptor.bounds().contains_span(ea, req.size));
        let ea = match (ea, in_bounds) {
            (Some(ea), true) => ea,
            _ => {
                return Err(AccessFault::new(
                    FaultKind::OutOfBounds,
                    req.word,
                    ea,
                    format!(
                        "{} byte(s) at offset {} outside [{}, {}]",
                        req.size, req.offset, descriptor.base, descriptor.bound
                    ),
                ))
            }
        };

        if !descriptor.permissions.permits(req.kind) {
            return Err(AccessFault::new(
                FaultKind::PermissionDenied,
                req.word,
                Some(ea),
                format!("{:?} not permitted", req.kind),
            ));
        }

        if !descriptor.is_live() {
            return Err(revoked_fault(req.word, Some(ea), &descriptor));
        }

        Ok(EffectiveAccess {
            effective_address: ea,
            size: req.size,
            descriptor,
        })
    }

    /// Pointer arithmetic at address generation: the tag is kept, and the
    /// result must stay inside the derivable bounds.
    pub fn ptr_add(
        &mut self,
        store: &mut DescriptorStore,
        word: u64,
        delta: i64,
    ) -> Result<TaggedWord, AccessFault> {
        self.counters.pointer_ops += 1;
        let result = self.checked_ptr_add(store, word, delta);
        if result.is_err() {
            self.counters.pointer_faults += 1;
        }
        result
    }

    fn checked_ptr_add(
        &mut self,
        store: &mut DescriptorStore,
        raw: u64,
        delta: i64,
    ) -> Result<TaggedWord, AccessFault> {
        let word = TaggedWord::decode(raw)
            .map_err(|e| AccessFault::new(FaultKind::MalformedTag, raw, None, e.to_string()))?;
        let bounds = match word.mode {
            Mode::Aligned => word.slot().bounds(),
            Mode::Centroid => self.derive_descriptor(store, word)?.bounds(),
        };
        let target = word.address.checked_offset(delta);
        let ok = target.is_some_and(|t| {
            bounds.contains(t) || (self.config.cpp_one_past && t.get() == bounds.bound.get() + 1)
        });
        match (target, ok) {
            (Some(t), true) => Ok(word.with_address(t)),
            _ => Err(AccessFault::new(
                FaultKind::OutOfBounds,
                raw,
                target,
                format!(
                    "pointer moved by {delta} leaves [{}, {}]",
                    bounds.base, bounds.bound
                ),
            )),
        }
    }
}

fn revoked_fault(word: u64, ea: Option<LinearAddress>, d: &ObjectDescriptor) -> AccessFault {
    AccessFault::new(
        FaultKind::UseAfterFree,
        word,
        ea,
        format!(
            "descriptor {} for [{}, {}] revoked (generation {})",
            d.centroid, d.base, d.bound, d.generation
        ),
    )
}
