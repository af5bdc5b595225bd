//! Side-by-side replay under three bounds back-ends.
//!
//! * `Aligned`: every object forced to Aligned mode (power-of-two slot bounds).
//! * `LowFat`: sub-block refined slot bounds (`M` = 5 by default). No
//!   per-object metadata survives a free, so temporal errors go unseen.
//! * `Centroid`: every object forced to CentroID mode (exact bounds, revocation).

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::replay::{replay, ReplayConfig, ReplayError};
use super::report::Detection;
use super::trace::{Op, Trace};
use crate::descriptor_store::DescriptorStore;
use crate::dgu::{AccessRequest, Dgu};
use crate::ptr_codec::{
    lowfat_bounds, lowfat_fit, LinearAddress, Mode, SlotSpec, DEFAULT_LOWFAT_BLOCK_BITS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Aligned,
    LowFat,
    Centroid,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Aligned, Backend::LowFat, Backend::Centroid];
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Aligned => "aligned",
            Backend::LowFat => "lowfat",
            Backend::Centroid => "centroid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backend: Backend,
    pub objects: u64,
    pub total_requested: u64,
    pub total_reserved: u64,
    pub mean_slack: f64,
    pub max_slack: u64,
    pub attempted: u64,
    pub issued: u64,
    pub faulted: u64,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, backend: Backend) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.backend == backend)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparison serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "backend",
            "objects",
            "requested",
            "reserved",
            "mean_slack",
            "max_slack",
            "attempted",
            "issued",
            "faulted",
            "tp",
            "fp",
            "tn",
            "fn",
            "precision",
            "recall",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let d = &r.detection;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.backend.to_string(),
                r.objects.to_string(),
                r.total_requested.to_string(),
                r.total_reserved.to_string(),
                r.mean_slack.to_string(),
                r.max_slack.to_string(),
                r.attempted.to_string(),
                r.issued.to_string(),
                r.faulted.to_string(),
                d.true_positives.to_string(),
                d.false_positives.to_string(),
                d.true_negatives.to_string(),
                d.false_negatives.to_string(),
                opt(d.precision),
                opt(d.recall),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_human(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<9} {:>8} {:>12} {:>12} {:>10} {:>10} {:>8} {:>8} {:>9} {:>9} {:>9}",
            "backend",
            "objects",
            "requested",
            "reserved",
            "mean_slk",
            "max_slk",
            "issued",
            "faulted",
            "spatial",
            "temporal",
            "precision"
        );
        for r in &self.rows {
            let d = &r.detection;
            let _ = writeln!(
                s,
                "{:<9} {:>8} {:>12} {:>12} {:>10.2} {:>10} {:>8} {:>8} {:>9} {:>9} {:>9}",
                r.backend.to_string(),
                r.objects,
                r.total_requested,
                r.total_reserved,
                r.mean_slack,
                r.max_slack,
                r.issued,
                r.faulted,
                format!("{}/{}", d.spatial_detected, d.spatial_positives),
                format!("{}/{}", d.temporal_detected, d.temporal_positives),
                d.precision.map_or("n/a".to_string(), |p| format!("{p:.4}")),
            );
        }
        s
    }
}

fn tagged_row(
    trace: &Trace,
    base: &ReplayConfig,
    backend: Backend,
    mode: Mode,
) -> Result<ComparisonRow, ReplayError> {
    let cfg = ReplayConfig {
        force_mode: Some(mode),
        parent_scheme: None,
        explain: false,
        ..base.clone()
    };
    let r = replay(trace, &cfg)?;
    let m = r.fragmentation.for_mode(mode);
    Ok(ComparisonRow {
        backend,
        objects: m.objects,
        total_requested: m.total_requested,
        total_reserved: m.total_reserved,
        mean_slack: m.mean_slack,
        max_slack: m.max_slack,
        attempted: r.counts.attempted,
        issued: r.counts.issued,
        faulted: r.counts.faulted,
        detection: r.detection,
    })
}

/// Low-Fat model: each object occupies `[0, reserved)` relative to its base,
/// with `reserved` the sub-block rounded span from `lowfat_fit`.
fn lowfat_row(trace: &Trace, block_bits: u32) -> Result<ComparisonRow, ReplayError> {
    trace.validate()?;
    let mut row = ComparisonRow {
        backend: Backend::LowFat,
        objects: 0,
        total_requested: 0,
        total_reserved: 0,
        mean_slack: 0.0,
        max_slack: 0,
        attempted: 0,
        issued: 0,
        faulted: 0,
        detection: Detection::default(),
    };
    let mut reserved: HashMap<u64, u64> = HashMap::new();
    let mut raw_dgu = Dgu::default();
    let mut empty = DescriptorStore::default();
    for e in &trace.events {
        let faulted = match e.op {
            Op::Alloc {
                object_id, size, ..
            } => {
                let Some(span) = lowfat_span(size, block_bits) else {
                    continue;
                };
                reserved.insert(object_id, span);
                row.objects += 1;
                row.total_requested += size;
                row.total_reserved += span;
                row.max_slack = row.max_slack.max(span - size);
                continue;
            }
            Op::Free { .. } => false,
            Op::Access {
                object_id,
                offset,
                size,
                ..
            } => {
                let Some(&span) = reserved.get(&object_id) else {
                    continue;
                };
                let inside = offset >= 0
                    && size > 0
                    && (offset as u64)
                        .checked_add(size)
                        .is_some_and(|end| end <= span);
                !inside
            }
            Op::RawAccess {
                word,
                offset,
                size,
                kind,
            } => raw_dgu
                .authenticate(&mut empty, AccessRequest::raw(word, offset, size, kind))
                .is_err(),
        };
        if e.op.is_access() {
            row.attempted += 1;
            if faulted {
                row.faulted += 1;
            } else {
                row.issued += 1;
            }
        }
        if let Some(label) = e.label {
            if !matches!(e.op, Op::Alloc { .. }) {
                row.detection.record(label, faulted);
            }
        }
    }
    if row.objects > 0 {
        row.mean_slack = (row.total_reserved - row.total_requested) as f64 / row.objects as f64;
    }
    row.detection.finish();
    Ok(row)
}

/// Bytes reserved for an object of `size` under Low-Fat sub-block bounds.
pub fn lowfat_span(size: u64, block_bits: u32) -> Option<u64> {
    let fields = lowfat_fit(size, block_bits).ok()?;
    let slot = SlotSpec::new(LinearAddress::ZERO, fields.exponent).ok()?;
    Some(lowfat_bounds(slot, fields).ok()?.len())
}

/// Replays `trace` under each back-end with the allocator and cache settings of `base`.
pub fn compare(trace: &Trace, base: &ReplayConfig) -> Result<Comparison, ReplayError> {
    Ok(Comparison {
        rows: vec![
            tagged_row(trace, base, Backend::Aligned, Mode::Aligned)?,
            lowfat_row(trace, DEFAULT_LOWFAT_BLOCK_BITS)?,
            tagged_row(trace, base, Backend::Centroid, Mode::Centroid)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor_store::Level;
    use crate::harness::trace::{Label, TraceEvent};
    use crate::harness::workload::{generate, WorkloadParams};

    fn adversarial() -> Trace {
        let mut events = Vec::new();
        for (i, n) in (6..=16u32).enumerate() {
            events.push(TraceEvent::labeled(
                0,
                Op::Alloc {
                    object_id: i as u64,
                    size: (1 << (n - 1)) + 1,
                    level: Level::User,
                    mode_override: None,
                },
                Label::Benign,
            ));
        }
        let mut t = Trace::new(events);
        t.renumber();
        t
    }

    #[test]
    fn lowfat_beats_aligned_on_adversarial_sizes() {
        let c = compare(&adversarial(), &ReplayConfig::default()).unwrap();
        let aligned = c.row(Backend::Aligned).unwrap();
        let lowfat = c.row(Backend::LowFat).unwrap();
        let centroid = c.row(Backend::Centroid).unwrap();
        assert!(lowfat.max_slack < aligned.max_slack);
        // Largest object: N = 16, slack 2^15 - 1 aligned; sub-blocks of 2^(16-5) under Low-Fat.
        assert_eq!(aligned.max_slack, (1 << 15) - 1);
        assert_eq!(lowfat.max_slack, (1 << 11) - 1);
        assert_eq!(centroid.max_slack, 0);
        assert_eq!(aligned.objects, 11);
    }

    #[test]
    fn lowfat_span_matches_sub_block_rounding() {
        assert_eq!(lowfat_span(1, 5), Some(1));
        assert_eq!(lowfat_span(33, 5), Some(34));
        assert_eq!(lowfat_span(1025, 5), Some(1088));
        for size in 1..5000u64 {
            let span = lowfat_span(size, 5).unwrap();
            assert!(span >= size);
            let e = crate::ptr_codec::bit_length(size - 1).saturating_sub(5);
            assert!(span - size < 1 << e);
        }
    }

    #[test]
    fn centroid_detects_everything_on_injected_trace() {
        let t = generate(&WorkloadParams {
            allocs: 500,
            spatial_rate: 0.2,
            temporal_rate: 0.3,
            seed: 17,
            ..WorkloadParams::default()
        })
        .unwrap();
        let c = compare(&t, &ReplayConfig::default()).unwrap();
        let centroid = c.row(Backend::Centroid).unwrap().detection;
        assert_eq!(centroid.recall, Some(1.0));
        assert_eq!(centroid.precision, Some(1.0));
        let lowfat = c.row(Backend::LowFat).unwrap().detection;
        assert_eq!(lowfat.temporal_detected, 0);
        assert!(lowfat.temporal_positives > 0);
        let aligned = c.row(Backend::Aligned).unwrap().detection;
        assert!(aligned.spatial_detected < aligned.spatial_positives);
        assert!(c.to_human().lines().count() == 4);
        assert_eq!(c.to_csv().lines().count(), 4);
    }
}
