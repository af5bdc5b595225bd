//! Deterministic trace replay: allocator, descriptor store, and DGU in one loop.

use std::collections::HashMap;

use super::report::{FaultRecord, Report, Verdict, REPORT_VERSION};
use super::trace::{Label, Op, Trace, TraceError, TraceEvent};
use crate::alloc_sim::{AllocConfig, AllocError, AllocRequest, HeapState};
use crate::descriptor_store::{DescriptorStore, Level, StoreConfig};
use crate::dgu::{AccessFault, AccessKind, AccessRequest, Dgu, DguConfig, FaultKind};
use crate::multilevel::{MultiLevel, MultiLevelConfig, MultiLevelError, ParentScheme};
use crate::ptr_codec::{LinearAddress, Mode, TaggedWord};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayConfig {
    pub alloc: AllocConfig,
    pub store: StoreConfig,
    pub dgu: DguConfig,
    /// System-level allocations become parent regions and user allocations
    /// are placed inside the newest live parent with room.
    pub parent_scheme: Option<ParentScheme>,
    pub multilevel: MultiLevelConfig,
    /// Overrides every allocation's mode, including per-event overrides.
    pub force_mode: Option<Mode>,
    /// Keep a verdict per access in the report.
    pub explain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Trace(#[from] TraceError),
}

// Parents tried for each child before falling back to the main arena.
const PARENT_PROBE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Object {
    word: u64,
    // Parent region centroid when this object is one.
    parent_region: Option<LinearAddress>,
    child: bool,
}

struct Replayer<'a> {
    config: &'a ReplayConfig,
    heap: HeapState,
    store: DescriptorStore,
    dgu: Dgu,
    ml: Option<(ParentScheme, MultiLevel)>,
    live_parents: Vec<LinearAddress>,
    objects: HashMap<u64, Object>,
    report: Report,
}

impl<'a> Replayer<'a> {
    fn new(config: &'a ReplayConfig) -> Self {
        Self {
            config,
            heap: HeapState::new(config.alloc.clone()),
            store: DescriptorStore::new(config.store),
            dgu: Dgu::new(config.dgu),
            ml: config
                .parent_scheme
                .map(|s| (s, MultiLevel::new(config.multilevel))),
            live_parents: Vec::new(),
            objects: HashMap::new(),
            report: Report {
                version: REPORT_VERSION,
                parent_scheme: config.parent_scheme,
                ..Report::default()
            },
        }
    }

    fn event(&mut self, e: &TraceEvent) {
        self.report.counts.events += 1;
        match e.op {
            Op::Alloc {
                object_id,
                size,
                level,
                mode_override,
            } => {
                let mode = self.config.force_mode.or(mode_override);
                self.alloc(object_id, size, level, mode);
                self.check_heap();
            }
            Op::Free { object_id } => {
                self.free(e, object_id);
                self.check_heap();
            }
            Op::Access {
                object_id,
                offset,
                size,
                kind,
            } => match self.objects.get(&object_id).copied() {
                Some(obj) => self.access(e, Some(object_id), obj, offset, size, kind),
                None => self.report.counts.skipped += 1,
            },
            Op::RawAccess {
                word,
                offset,
                size,
                kind,
            } => {
                let obj = Object {
                    word,
                    parent_region: None,
                    child: false,
                };
                self.access(e, None, obj, offset, size, kind);
            }
        }
    }

    fn alloc(&mut self, object_id: u64, size: u64, level: Level, mode: Option<Mode>) {
        self.report.counts.allocs += 1;
        let placed = match &mut self.ml {
            Some((_, ml)) if level == Level::System => match ml.map_parent(&mut self.heap, size) {
                Ok(region) => {
                    self.live_parents.push(region.centroid());
                    self.report.objects_by_mode.parents += 1;
                    Some(Object {
                        word: region.word.encode(),
                        parent_region: Some(region.centroid()),
                        child: false,
                    })
                }
                Err(_) => None,
            },
            Some((_, ml)) => {
                let mut placed = None;
                for &parent in self.live_parents.iter().rev().take(PARENT_PROBE) {
                    match ml.child_alloc(
                        &mut self.heap,
                        &mut self.store,
                        parent,
                        object_id,
                        size,
                        mode,
                    ) {
                        Ok(c) => {
                            placed = Some(Ok(c.word));
                            break;
                        }
                        Err(MultiLevelError::ParentFull { .. }) => continue,
                        Err(_) => {
                            placed = Some(Err(()));
                            break;
                        }
                    }
                }
                match placed {
                    Some(Ok(word)) => {
                        self.report.objects_by_mode.children += 1;
                        Some(Object {
                            word: word.encode(),
                            parent_region: None,
                            child: true,
                        })
                    }
                    Some(Err(())) => None,
                    None => self.main_alloc(object_id, size, level, mode),
                }
            }
            None => self.main_alloc(object_id, size, level, mode),
        };
        match placed {
            Some(obj) => {
                if obj.parent_region.is_none() {
                    match TaggedWord::decode(obj.word).map(|w| w.mode) {
                        Ok(Mode::Aligned) => self.report.objects_by_mode.aligned += 1,
                        _ => self.report.objects_by_mode.centroid += 1,
                    }
                }
                self.objects.insert(object_id, obj);
            }
            None => self.report.counts.alloc_failures += 1,
        }
    }

    fn main_alloc(
        &mut self,
        object_id: u64,
        size: u64,
        level: Level,
        mode: Option<Mode>,
    ) -> Option<Object> {
        let req = AllocRequest::new(object_id, size, level).with_mode(mode);
        let (word, _) = self.heap.allocate_with(&mut self.store, req).ok()?;
        Some(Object {
            word: word.encode(),
            parent_region: None,
            child: false,
        })
    }

    fn free(&mut self, e: &TraceEvent, object_id: u64) {
        let Some(obj) = self.objects.get(&object_id).copied() else {
            return;
        };
        let result = match (obj.parent_region, &mut self.ml) {
            (Some(centroid), Some((_, ml))) => match ml.unmap_parent(centroid) {
                Ok(_) => {
                    self.live_parents.retain(|&p| p != centroid);
                    Ok(())
                }
                Err(MultiLevelError::UnknownParent(_)) => Err(true),
                Err(_) => Err(false),
            },
            _ => match self.heap.free(&mut self.store, object_id) {
                Ok(_) => Ok(()),
                Err(AllocError::DoubleFree(_)) => Err(true),
                Err(_) => Err(false),
            },
        };
        let faulted = match result {
            Ok(()) => {
                self.report.counts.frees += 1;
                false
            }
            Err(true) => {
                self.report.counts.double_frees += 1;
                let fault = AccessFault::new(
                    FaultKind::DoubleFree,
                    obj.word,
                    None,
                    format!("object {object_id} freed twice"),
                );
                self.record_fault(e, Some(object_id), fault);
                true
            }
            Err(false) => {
                self.report.invariant_violations += 1;
                false
            }
        };
        if let Some(label) = e.label {
            self.report.detection.record(label, faulted);
        }
    }

    fn access(
        &mut self,
        e: &TraceEvent,
        object_id: Option<u64>,
        obj: Object,
        offset: i64,
        size: u64,
        kind: AccessKind,
    ) {
        let req = AccessRequest::raw(obj.word, offset, size, kind);
        let store = match (&mut self.ml, obj.parent_region) {
            (Some((_, ml)), Some(_)) => ml.system_store_mut(),
            _ => &mut self.store,
        };
        let result = self.dgu.authenticate(store, req);
        self.report.counts.attempted += 1;
        let verdict_ea;
        let fault_kind;
        let detail;
        match result {
            Ok(access) => {
                self.report.counts.issued += 1;
                let (start, end) = access.span();
                // An issued span never leaves the word's slot.
                let slot = TaggedWord::decode(obj.word).map(|w| w.slot().bounds());
                if !slot.is_ok_and(|b| b.contains(start) && b.contains(end)) {
                    self.report.invariant_violations += 1;
                }
                if let (Some((scheme, ml)), true) = (&mut self.ml, obj.child) {
                    if let Ok(w) = TaggedWord::decode(obj.word) {
                        let q = ml.query_for(w.with_address(start));
                        let _ = ml.parent_of(q, *scheme);
                    }
                }
                verdict_ea = Some(start.get());
                fault_kind = None;
                detail = format!(
                    "within [{}, {}]",
                    access.descriptor.base, access.descriptor.bound
                );
            }
            Err(fault) => {
                self.report.counts.faulted += 1;
                verdict_ea = fault.effective_address;
                fault_kind = Some(fault.kind);
                detail = fault.detail.clone();
                self.record_fault(e, object_id, fault);
            }
        }
        if let Some(label) = e.label {
            self.report.detection.record(label, fault_kind.is_some());
        }
        if self.config.explain {
            self.report.verdicts.push(Verdict {
                seq: e.seq,
                object_id,
                offset,
                size,
                kind,
                label: e.label,
                effective_address: verdict_ea,
                fault: fault_kind,
                detail,
            });
        }
    }

    fn record_fault(&mut self, e: &TraceEvent, object_id: Option<u64>, fault: AccessFault) {
        self.report.faults_by_kind.bump(fault.kind);
        self.report.faults.push(FaultRecord {
            seq: e.seq,
            object_id,
            label: e.label,
            fault,
        });
    }

    fn check_heap(&mut self) {
        let system_ok = self
            .ml
            .as_ref()
            .is_none_or(|(_, ml)| ml.system_store().is_coherent());
        if !self.heap.is_disjoint() || !self.store.is_coherent() || !system_ok {
            self.report.invariant_violations += 1;
        }
    }

    fn finish(mut self) -> Report {
        let r = &mut self.report;
        r.detection.finish();
        r.descriptor_cache = self.store.cache().counters().into();
        r.descriptor_lookups = self.store.lookup_counters();
        r.range_cache = match &self.ml {
            Some((_, ml)) => ml.system_store().range_cache().counters().into(),
            None => self.store.range_cache().counters().into(),
        };
        r.fragmentation = self.heap.fragmentation_report();
        r.dgu = self.dgu.counters();
        r.schemes = self.ml.as_ref().map(|(_, ml)| ml.counters());
        if r.counts.attempted != r.counts.issued + r.counts.faulted
            || r.dgu.attempted != r.dgu.issued + r.dgu.faulted
            || r.counts.attempted != r.dgu.attempted
        {
            r.invariant_violations += 1;
        }
        self.report
    }
}

/// Replays `trace` under `config`. Identical inputs give identical reports.
pub fn replay(trace: &Trace, config: &ReplayConfig) -> Result<Report, ReplayError> {
    trace.validate()?;
    let mut r = Replayer::new(config);
    for e in &trace.events {
        r.event(e);
    }
    Ok(r.finish())
}

/// Labels attached to the accesses of a replay, for tests and tooling.
pub fn labeled_accesses(trace: &Trace) -> impl Iterator<Item = (u64, Label)> + '_ {
    trace
        .events
        .iter()
        .filter(|e| e.op.is_access())
        .filter_map(|e| e.label.map(|l| (e.seq, l)))
}
