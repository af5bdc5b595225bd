//! Acceptance suite. Each test prints one `criterion N ...: PASS|FAIL` line
//! straight to stdout (bypassing the test harness capture) before asserting.

use std::collections::{HashSet, VecDeque};
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use centroid_mem::alloc_sim::{AllocConfig, AllocRequest, HeapState};
use centroid_mem::descriptor_store::{
    CacheGeometry, DescriptorCache, DescriptorStore, Level, LookupOutcome, ObjectDescriptor,
    RangeCache, RangeEntry,
};
use centroid_mem::dgu::{AccessKind, AccessRequest, Dgu, FaultKind};
use centroid_mem::harness::{
    generate, inject, replay, Label, Op, ReplayConfig, Trace, TraceEvent, WorkloadParams,
};
use centroid_mem::multilevel::{DualTagWord, MultiLevel, ParentQuery, ParentScheme, PAGE_SIZE};
use centroid_mem::ptr_codec::{
    canonical_centroid, centroid_pair, lowfat_bounds, lowfat_fit, min_slot_exponent, slot_base,
    LinearAddress, Mode, SlotSpec, TaggedWord,
};

fn la(v: u64) -> LinearAddress {
    LinearAddress::new(v).unwrap()
}

fn report(n: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n} [{name}]: {verdict} ({})",
        detail.as_ref()
    );
    let _ = out.flush();
}

#[test]
fn criterion_1_codec_exhaustive_12_bit() {
    let mut pairs = 0u64;
    let mut violations = 0u64;
    for start in 0..4096u64 {
        for end in start + 1..4096 {
            pairs += 1;
            let n = min_slot_exponent(la(start), la(end)).unwrap();
            // Scan oracle: smallest N whose slots agree.
            let mut scan = 1;
            while start >> scan != end >> scan {
                scan += 1;
            }
            let same_slot = slot_base(la(start), n) == slot_base(la(end), n);
            let (lo, hi) = centroid_pair(SlotSpec::containing(la(start), n).unwrap());
            let straddles = (start..=end).contains(&lo.get()) && (start..=end).contains(&hi.get());
            if n != scan || !same_slot || !straddles {
                violations += 1;
            }
        }
    }
    report(
        1,
        "codec exhaustive",
        violations == 0 && pairs == 4096 * 4095 / 2,
        format!("{pairs} pairs, {violations} violations"),
    );
    assert_eq!(pairs, 4096 * 4095 / 2);
    assert_eq!(violations, 0);
}

#[test]
fn criterion_2_centroid_uniqueness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut collisions = 0u64;
    let mut objects = 0u64;
    for _ in 0..10_000 {
        let mut seen = HashSet::new();
        let mut cursor = rng.gen_range(0..16u64);
        loop {
            let len = if rng.gen_bool(0.8) {
                rng.gen_range(2..=64u64)
            } else {
                rng.gen_range(65..=1024u64)
            };
            let end = cursor + len - 1;
            if end >= 4096 {
                break;
            }
            let c = canonical_centroid(la(cursor), la(end)).unwrap();
            assert!((cursor..=end).contains(&c.get()));
            objects += 1;
            if !seen.insert(c) {
                collisions += 1;
            }
            cursor = end + 1 + rng.gen_range(0..32u64);
        }
    }
    report(
        2,
        "centroid uniqueness",
        collisions == 0,
        format!("10000 packings, {objects} objects, {collisions} collisions"),
    );
    assert_eq!(collisions, 0);
}

#[test]
fn criterion_3_fragmentation_closed_forms() {
    // Aligned half: the slot for 2^(N-1)+1 bytes is 2^N.
    let mut heap = HeapState::new(AllocConfig::default());
    let mut store = DescriptorStore::default();
    let mut aligned_bad = Vec::new();
    for n in 2..=16u32 {
        let size = (1u64 << (n - 1)) + 1;
        let (w, r) = heap
            .allocate(&mut store, size, Level::User, Some(Mode::Aligned))
            .unwrap();
        if w.exponent != n || r.slack() != (1 << (n - 1)) - 1 {
            aligned_bad.push((n, r.slack()));
        }
    }

    // Low-Fat half (M = 5): sweep every size whose minimal slot is 2^N.
    let mut lowfat_bad = Vec::new();
    let mut lowfat_seen = Vec::new();
    for n in 6..=16u32 {
        let e = n - 5;
        let mut worst = (0u64, 0u64);
        for size in (1u64 << (n - 1)) + 1..=1u64 << n {
            let fields = lowfat_fit(size, 5).unwrap();
            assert_eq!(
                (fields.exponent, fields.exponent - fields.sub_block_exponent),
                (n, 5)
            );
            let slot = SlotSpec::new(la(0), n).unwrap();
            let slack = lowfat_bounds(slot, fields).unwrap().len() - size;
            if slack > worst.1 {
                worst = (size, slack);
            }
        }
        let expected = (1u64 << (e - 1)) - 1;
        lowfat_seen.push(format!("N={n} E={e} worst={} at {}", worst.1, worst.0));
        if worst.1 != expected {
            lowfat_bad.push(format!(
                "N={n}: worst {} at size {}, expected {expected}",
                worst.1, worst.0
            ));
        }
    }

    let pass = aligned_bad.is_empty() && lowfat_bad.is_empty();
    let detail = format!(
        "aligned N=2..16 {}; low-fat N=6..16 {}{}",
        if aligned_bad.is_empty() {
            "exact".to_string()
        } else {
            format!("mismatches {aligned_bad:?}")
        },
        if lowfat_bad.is_empty() {
            "exact".to_string()
        } else {
            format!("{} mismatches vs 2^(E-1)-1", lowfat_bad.len())
        },
        lowfat_bad
            .first()
            .map(|m| format!(", e.g. {m}"))
            .unwrap_or_default(),
    );
    report(3, "fragmentation closed forms", pass, detail);
    assert!(aligned_bad.is_empty(), "aligned: {aligned_bad:?}");
    assert!(
        lowfat_bad.is_empty(),
        "low-fat worst case differs from 2^(E-1)-1: {lowfat_bad:?} (measured: {lowfat_seen:?})"
    );
}

#[test]
fn criterion_4_adjacent_objects_micro_trace() {
    let alloc = |id| Op::Alloc {
        object_id: id,
        size: 4,
        level: Level::User,
        mode_override: None,
    };
    let load = |offset, label| {
        (
            Op::Access {
                object_id: 0,
                offset,
                size: 1,
                kind: AccessKind::Load,
            },
            label,
        )
    };
    let mut events = vec![
        TraceEvent::new(0, alloc(0)),
        TraceEvent::new(0, alloc(1)),
        TraceEvent::new(0, alloc(2)),
    ];
    for (op, label) in [
        load(2, Label::Benign),
        load(5, Label::SpatialViolation),
        load(8, Label::SpatialViolation),
    ] {
        events.push(TraceEvent::labeled(0, op, label));
    }
    let mut trace = Trace::new(events);
    trace.renumber();
    let cfg = ReplayConfig {
        explain: true,
        ..ReplayConfig::default()
    };
    let r = replay(&trace, &cfg).unwrap();
    let outcomes: Vec<(i64, Option<FaultKind>)> =
        r.verdicts.iter().map(|v| (v.offset, v.fault)).collect();
    let expected = vec![
        (2, None),
        (5, Some(FaultKind::OutOfBounds)),
        (8, Some(FaultKind::OutOfBounds)),
    ];
    // Faulting addresses are A + 5 and A + 8, inside B and C.
    let a = r.verdicts[0].effective_address.unwrap() - 2;
    let adjacent = r.verdicts[1].effective_address == Some(a + 5)
        && r.verdicts[2].effective_address == Some(a + 8);
    let pass = outcomes == expected
        && r.counts.issued == 1
        && r.faults_by_kind.out_of_bounds == 2
        && adjacent;
    report(
        4,
        "adjacent objects",
        pass,
        format!(
            "A+2 {:?}, A+5 {:?}, A+8 {:?}; issued {}",
            outcomes[0].1, outcomes[1].1, outcomes[2].1, r.counts.issued
        ),
    );
    assert_eq!(outcomes, expected);
    assert_eq!(
        (
            r.counts.issued,
            r.faults_by_kind.out_of_bounds,
            r.counts.faulted
        ),
        (1, 2, 2)
    );
    assert!(adjacent);
}

#[test]
fn criterion_5_dgu_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut heap = HeapState::new(AllocConfig::default());
    let mut store = DescriptorStore::default();
    let mut dgu = Dgu::default();
    // (word, oracle interval, live)
    let mut objects: Vec<(TaggedWord, (u64, u64), u64, bool)> = Vec::new();
    for id in 0..400u64 {
        let size = if rng.gen_bool(0.7) {
            rng.gen_range(1..1024)
        } else {
            rng.gen_range(1024..20_000)
        };
        let mode = match rng.gen_range(0..3) {
            0 => Some(Mode::Aligned),
            1 => Some(Mode::Centroid),
            _ => None,
        };
        let (w, r) = heap
            .allocate_with(
                &mut store,
                AllocRequest::new(id, size, Level::User).with_mode(mode),
            )
            .unwrap();
        let interval = match w.mode {
            Mode::Aligned => {
                let s = w.slot();
                (s.base().get(), s.bound().get())
            }
            Mode::Centroid => (r.base.get(), r.bound.get()),
        };
        objects.push((w, interval, id, true));
    }
    for o in objects.iter_mut() {
        if rng.gen_bool(0.2) {
            heap.free(&mut store, o.2).unwrap();
            o.3 = false;
        }
    }
    let mut disagreements = 0u64;
    for _ in 0..100_000 {
        let (w, (lo, hi), _, live) = objects[rng.gen_range(0..objects.len())];
        let span = hi - lo + 1;
        let offset = rng.gen_range(-64..(span as i64 + 64));
        let size = rng.gen_range(1..=16u64);
        let kind = if rng.gen_bool(0.5) {
            AccessKind::Load
        } else {
            AccessKind::Store
        };
        let start = w.address.get() as i64 + offset;
        let every_byte_inside = (0..size as i64).all(|i| {
            let b = start + i;
            b >= lo as i64 && b <= hi as i64
        });
        // Freed CentroID objects are revoked; Aligned words carry no liveness.
        let expect_issue = every_byte_inside && (live || w.mode == Mode::Aligned);
        let got = dgu.authenticate(&mut store, AccessRequest::new(w, offset, size, kind));
        if got.is_ok() != expect_issue {
            disagreements += 1;
        }
        if let Err(f) = got {
            let expected_kind = if every_byte_inside {
                FaultKind::UseAfterFree
            } else {
                FaultKind::OutOfBounds
            };
            if f.kind != expected_kind {
                disagreements += 1;
            }
        }
    }
    let c = dgu.counters();
    report(
        5,
        "dgu oracle",
        disagreements == 0,
        format!(
            "100000 probes, {} issued, {} faulted, {disagreements} disagreements",
            c.issued, c.faulted
        ),
    );
    assert_eq!(disagreements, 0);
    assert_eq!(c.attempted, 100_000);
}

fn aliasing_trace() -> Trace {
    let alloc = |id| Op::Alloc {
        object_id: id,
        size: 3000,
        level: Level::User,
        mode_override: Some(Mode::Centroid),
    };
    let mut t = Trace::new(vec![
        TraceEvent::labeled(0, alloc(0), Label::Benign),
        TraceEvent::labeled(0, Op::Free { object_id: 0 }, Label::Benign),
        // Same size, so a reusing allocator hands back the same range and centroid.
        TraceEvent::labeled(0, alloc(1), Label::Benign),
        TraceEvent::labeled(
            0,
            Op::Access {
                object_id: 0,
                offset: 100,
                size: 8,
                kind: AccessKind::Load,
            },
            Label::TemporalViolation,
        ),
    ]);
    t.renumber();
    t
}

#[test]
fn criterion_6_temporal_detection() {
    let base = generate(&WorkloadParams {
        allocs: 1000,
        mode_override: Some(Mode::Centroid),
        seed: 6,
        ..WorkloadParams::default()
    })
    .unwrap();
    let trace = inject(&base, 0.0, 1.0, 6);
    let uafs = trace.count_label(Label::TemporalViolation);
    let fresh = replay(&trace, &ReplayConfig::default()).unwrap();
    let d = fresh.detection;

    let aliasing = aliasing_trace();
    let reuse_cfg = ReplayConfig {
        alloc: AllocConfig {
            reuse: true,
            ..AllocConfig::default()
        },
        ..ReplayConfig::default()
    };
    let reused = replay(&aliasing, &reuse_cfg).unwrap();
    let fresh_alias = replay(&aliasing, &ReplayConfig::default()).unwrap();

    let pass = uafs == 1000
        && d.recall == Some(1.0)
        && d.precision == Some(1.0)
        && reused.detection.false_negatives >= 1
        && fresh_alias.detection.false_negatives == 0;
    report(
        6,
        "temporal detection",
        pass,
        format!(
            "{uafs} UAFs fresh: recall {:?} precision {:?}; reuse aliasing trace: {} missed (fresh: {})",
            d.recall, d.precision, reused.detection.false_negatives, fresh_alias.detection.false_negatives
        ),
    );
    assert_eq!(uafs, 1000);
    assert_eq!(d.temporal_positives, 1000);
    assert_eq!(d.recall, Some(1.0));
    assert_eq!(d.precision, Some(1.0));
    assert!(reused.detection.false_negatives >= 1);
    assert_eq!(fresh_alias.detection.false_negatives, 0);
    assert_eq!(fresh_alias.faults_by_kind.use_after_free, 1);
}

/// Reference LRU: back of the queue is most recent.
struct QueueLru<K> {
    capacity: usize,
    queue: VecDeque<K>,
}

impl<K: PartialEq + Copy> QueueLru<K> {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            queue: VecDeque::new(),
        }
    }

    fn hit(&mut self, key: K) -> bool {
        match self.queue.iter().position(|&k| k == key) {
            Some(p) => {
                self.queue.remove(p);
                self.queue.push_back(key);
                true
            }
            None => false,
        }
    }

    fn fill(&mut self, key: K) -> Option<K> {
        let evicted = if self.queue.len() == self.capacity {
            self.queue.pop_front()
        } else {
            None
        };
        self.queue.push_back(key);
        evicted
    }

    fn remove(&mut self, key: K) {
        self.queue.retain(|&k| k != key);
    }
}

#[test]
fn criterion_7_cache_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Descriptor cache: 64 x 4, 10^4 operations over 600 keys.
    let geometry = CacheGeometry::default();
    let mut cache = DescriptorCache::new(geometry);
    let mut model: Vec<QueueLru<u64>> = (0..geometry.sets)
        .map(|_| QueueLru::new(geometry.ways))
        .collect();
    let mut descriptors = Vec::new();
    let mut base = 0x10_0000u64;
    for _ in 0..600 {
        let len = rng.gen_range(2..5000u64);
        descriptors.push(ObjectDescriptor::new(la(base), la(base + len - 1), Level::User).unwrap());
        base += len + rng.gen_range(0..64);
    }
    let mut desc_mismatch = 0u64;
    for _ in 0..10_000 {
        let d = &descriptors[rng.gen_range(0..descriptors.len())];
        let c = d.centroid.get();
        let set = ((c >> (c.trailing_zeros() + 1)) % geometry.sets as u64) as usize;
        if cache.set_index(d.centroid) != set {
            desc_mismatch += 1;
        }
        if rng.gen_bool(0.05) {
            cache.invalidate(d.centroid);
            model[set].remove(c);
            continue;
        }
        let expected_hit = model[set].hit(c);
        let got_hit = cache.probe(d.centroid).is_some();
        if got_hit != expected_hit {
            desc_mismatch += 1;
        }
        if !got_hit {
            let got_evicted = cache.fill(d.clone()).map(|e| e.get());
            if got_evicted != model[set].fill(c) {
                desc_mismatch += 1;
            }
        }
    }

    // Same hit/miss sequence through the store's lookup path.
    let mut store = DescriptorStore::default();
    for d in &descriptors {
        store.insert(d.clone()).unwrap();
    }
    let mut model: Vec<QueueLru<u64>> = (0..geometry.sets)
        .map(|_| QueueLru::new(geometry.ways))
        .collect();
    for _ in 0..10_000 {
        let d = &descriptors[rng.gen_range(0..descriptors.len())];
        let c = d.centroid.get();
        let set = store.cache().set_index(d.centroid);
        let expected_hit = model[set].hit(c);
        if !expected_hit {
            model[set].fill(c);
        }
        let got_hit = match store.lookup(d.centroid) {
            LookupOutcome::Hit(_) => true,
            LookupOutcome::MissThenFill(_) => false,
            other => panic!("unexpected {other:?}"),
        };
        if got_hit != expected_hit {
            desc_mismatch += 1;
        }
    }

    // Range cache: 16 entries, 10^4 operations over 40 ranges plus gaps.
    let mut ranges = Vec::new();
    let mut base = 0x4000_0000u64;
    for _ in 0..40 {
        let len = rng.gen_range(1..64u64) * PAGE_SIZE;
        ranges.push(RangeEntry {
            base: la(base),
            bound: la(base + len - 1),
            centroid: canonical_centroid(la(base), la(base + len - 1)).unwrap(),
        });
        base += len + PAGE_SIZE;
    }
    let mut rc = RangeCache::new(16);
    let mut rmodel: QueueLru<usize> = QueueLru::new(16);
    let mut range_mismatch = 0u64;
    for _ in 0..10_000 {
        let i = rng.gen_range(0..ranges.len());
        let r = ranges[i];
        let gap = rng.gen_bool(0.1);
        let addr = if gap {
            r.bound.get() + 1 + rng.gen_range(0..PAGE_SIZE)
        } else {
            rng.gen_range(r.base.get()..=r.bound.get())
        };
        let got = rc.lookup(la(addr));
        let expected_hit = !gap && rmodel.hit(i);
        if got.is_some() != expected_hit || (expected_hit && got != Some(r)) {
            range_mismatch += 1;
        }
        if got.is_none() && !gap {
            let evicted = rc.insert(r).unwrap();
            if evicted.map(|e| ranges.iter().position(|x| *x == e).unwrap()) != rmodel.fill(i) {
                range_mismatch += 1;
            }
        }
    }

    // Capacity: 16 ranges stay resident; a 17th evicts the least recently used.
    let mut rc = RangeCache::new(16);
    for r in &ranges[..16] {
        assert!(rc.insert(*r).unwrap().is_none());
    }
    let all_resident = ranges[..16].iter().all(|r| rc.lookup(r.base).is_some());
    let evicted = rc.insert(ranges[16]).unwrap();
    let capacity_ok = all_resident
        && evicted == Some(ranges[0])
        && rc.len() == 16
        && rc.lookup(ranges[0].base).is_none();

    let pass = desc_mismatch == 0 && range_mismatch == 0 && capacity_ok;
    report(
        7,
        "cache models",
        pass,
        format!(
            "descriptor cache {desc_mismatch} mismatches over 2x10^4 ops; range cache {range_mismatch} mismatches over 10^4 ops; 16-entry capacity {}",
            if capacity_ok { "ok" } else { "wrong" }
        ),
    );
    assert_eq!(desc_mismatch, 0);
    assert_eq!(range_mismatch, 0);
    assert!(capacity_ok);
}

#[test]
fn criterion_8_multilevel_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ml = MultiLevel::default();
    let mut heap = HeapState::new(AllocConfig::default());
    let mut user = DescriptorStore::default();
    let mut parents = Vec::new();
    let mut children = Vec::new();
    let mut id = 0u64;
    for _ in 0..24 {
        let pages = rng.gen_range(1..=64u64);
        let p = ml
            .map_parent(&mut heap, pages * PAGE_SIZE - rng.gen_range(0..PAGE_SIZE))
            .unwrap();
        for _ in 0..rng.gen_range(1..6) {
            let size = rng.gen_range(8..2048u64);
            if let Ok(c) = ml.child_alloc(&mut heap, &mut user, p.centroid(), id, size, None) {
                children.push((p.centroid(), c));
                id += 1;
            }
        }
        parents.push(p);
    }
    let mut disagreements = 0u64;
    let mut wrong_parent = 0u64;
    for _ in 0..1000 {
        let (parent, c) = &children[rng.gen_range(0..children.len())];
        let addr = la(c.record.base.get() + rng.gen_range(0..c.record.requested_size));
        let dual = DualTagWord {
            address: addr,
            ..c.dual_word
        };
        let q = ParentQuery {
            address: addr,
            dual_word: Some(dual.encode()),
        };
        let answers: Vec<_> = ParentScheme::ALL
            .iter()
            .map(|&s| ml.parent_of(q, s))
            .collect();
        if answers.iter().any(|a| a != &answers[0]) {
            disagreements += 1;
        }
        match &answers[0] {
            Ok(d) if d.centroid == *parent && d.level == Level::System => {}
            _ => wrong_parent += 1,
        }
    }
    // Unmapped parents miss under every scheme.
    let gone = parents[3].centroid();
    ml.unmap_parent(gone).unwrap();
    let mut miss_disagreements = 0u64;
    for (_, c) in children.iter().filter(|(p, _)| *p == gone) {
        let q = ParentQuery {
            address: c.record.base,
            dual_word: Some(c.dual_word.encode()),
        };
        for s in ParentScheme::ALL {
            if ml.parent_of(q, s).map_err(|f| f.kind) != Err(FaultKind::DescriptorMiss) {
                miss_disagreements += 1;
            }
        }
    }
    let pass =
        parents.len() >= 20 && disagreements == 0 && wrong_parent == 0 && miss_disagreements == 0;
    report(
        8,
        "multi-level agreement",
        pass,
        format!(
            "{} parents, 1000 addresses, {disagreements} disagreements, {wrong_parent} wrong parents, {miss_disagreements} unmapped mismatches",
            parents.len()
        ),
    );
    assert!(parents.len() >= 20);
    assert_eq!(disagreements, 0);
    assert_eq!(wrong_parent, 0);
    assert_eq!(miss_disagreements, 0);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report_seed2024.json")
}

fn golden_report() -> String {
    let trace = generate(&WorkloadParams {
        allocs: 2000,
        spatial_rate: 0.02,
        temporal_rate: 0.1,
        seed: 2024,
        ..WorkloadParams::default()
    })
    .unwrap();
    // Round-trip through the on-disk format, as `gen | run` would.
    let trace = Trace::parse(&trace.to_jsonl()).unwrap();
    replay(&trace, &ReplayConfig::default()).unwrap().to_json()
}

#[test]
fn criterion_9_end_to_end_determinism() {
    let first = golden_report();
    let second = std::thread::spawn(golden_report).join().unwrap();
    if std::env::var_os("CENTROID_MEM_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &first).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).unwrap_or_default();
    let pass = first == second && first == golden;
    report(
        9,
        "end-to-end determinism",
        pass,
        format!(
            "two runs {}; golden file {}",
            if first == second {
                "identical"
            } else {
                "differ"
            },
            if first == golden {
                "matches"
            } else {
                "differs"
            }
        ),
    );
    assert_eq!(first, second);
    assert!(
        first == golden,
        "report differs from {}",
        golden_path().display()
    );
}

#[test]
fn golden_report_has_expected_shape() {
    let r = centroid_mem::harness::Report::from_json(&golden_report()).unwrap();
    assert_eq!(r.counts.attempted, r.counts.issued + r.counts.faulted);
    assert_eq!(r.invariant_violations, 0);
    assert_eq!(r.detection.false_positives, 0);
}
