//! Replay reports: JSON, flat CSV, and a human summary.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::trace::Label;
use crate::alloc_sim::FragmentationReport;
use crate::descriptor_store::{CacheCounters, LookupCounters, RangeCounters};
use crate::dgu::{AccessFault, AccessKind, DguCounters, FaultKind};
use crate::multilevel::{MultiLevelCounters, ParentScheme};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub events: u64,
    pub allocs: u64,
    pub alloc_failures: u64,
    pub frees: u64,
    pub double_frees: u64,
    /// Accesses the DGU saw.
    pub attempted: u64,
    pub issued: u64,
    pub faulted: u64,
    /// Accesses to objects whose allocation failed.
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FaultCounts {
    pub malformed_tag: u64,
    pub out_of_bounds: u64,
    pub use_after_free: u64,
    pub permission_denied: u64,
    pub descriptor_miss: u64,
    pub double_free: u64,
}

impl FaultCounts {
    pub fn bump(&mut self, kind: FaultKind) {
        *self.get_mut(kind) += 1;
    }

    pub fn get(&self, kind: FaultKind) -> u64 {
        match kind {
            FaultKind::MalformedTag => self.malformed_tag,
            FaultKind::OutOfBounds => self.out_of_bounds,
            FaultKind::UseAfterFree => self.use_after_free,
            FaultKind::PermissionDenied => self.permission_denied,
            FaultKind::DescriptorMiss => self.descriptor_miss,
            FaultKind::DoubleFree => self.double_free,
        }
    }

    fn get_mut(&mut self, kind: FaultKind) -> &mut u64 {
        match kind {
            FaultKind::MalformedTag => &mut self.malformed_tag,
            FaultKind::OutOfBounds => &mut self.out_of_bounds,
            FaultKind::UseAfterFree => &mut self.use_after_free,
            FaultKind::PermissionDenied => &mut self.permission_denied,
            FaultKind::DescriptorMiss => &mut self.descriptor_miss,
            FaultKind::DoubleFree => &mut self.double_free,
        }
    }

    pub fn total(&self) -> u64 {
        FaultKind::ALL.iter().map(|&k| self.get(k)).sum()
    }
}

/// Confusion matrix over labeled events; a fault is a positive verdict.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Detection {
    pub labeled: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
    pub spatial_positives: u64,
    pub spatial_detected: u64,
    pub temporal_positives: u64,
    pub temporal_detected: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl Detection {
    pub fn record(&mut self, label: Label, faulted: bool) {
        self.labeled += 1;
        match (label.is_violation(), faulted) {
            (true, true) => self.true_positives += 1,
            (true, false) => self.false_negatives += 1,
            (false, true) => self.false_positives += 1,
            (false, false) => self.true_negatives += 1,
        }
        match label {
            Label::SpatialViolation => {
                self.spatial_positives += 1;
                self.spatial_detected += faulted as u64;
            }
            Label::TemporalViolation => {
                self.temporal_positives += 1;
                self.temporal_detected += faulted as u64;
            }
            Label::Benign => {}
        }
    }

    pub fn finish(&mut self) {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        self.precision = ratio(
            self.true_positives,
            self.true_positives + self.false_positives,
        );
        self.recall = ratio(
            self.true_positives,
            self.true_positives + self.false_negatives,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheSummary {
    #[serde(flatten)]
    pub counters: CacheCounters,
    pub hit_rate: Option<f64>,
}

impl From<CacheCounters> for CacheSummary {
    fn from(counters: CacheCounters) -> Self {
        Self {
            counters,
            hit_rate: counters.hit_rate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RangeSummary {
    #[serde(flatten)]
    pub counters: RangeCounters,
    pub hit_rate: Option<f64>,
}

impl From<RangeCounters> for RangeSummary {
    fn from(counters: RangeCounters) -> Self {
        Self {
            counters,
            hit_rate: counters.hit_rate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeCounts {
    pub aligned: u64,
    pub centroid: u64,
    /// Page-granular parent regions (only with a parent scheme).
    pub parents: u64,
    pub children: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub seq: u64,
    pub object_id: Option<u64>,
    pub label: Option<Label>,
    pub fault: AccessFault,
}

/// Per-access outcome kept when explaining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub seq: u64,
    pub object_id: Option<u64>,
    pub offset: i64,
    pub size: u64,
    pub kind: AccessKind,
    pub label: Option<Label>,
    #[serde(with = "crate::hex::option")]
    pub effective_address: Option<u64>,
    pub fault: Option<FaultKind>,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        let target = match self.object_id {
            Some(id) => format!("obj {id}{:+}", self.offset),
            None => format!("raw{:+}", self.offset),
        };
        let outcome = match self.fault {
            None => "issued".to_string(),
            Some(k) => format!("{k}, not issued"),
        };
        let ea = self
            .effective_address
            .map(|a| format!(" @ {a:#x}"))
            .unwrap_or_default();
        format!(
            "seq {:>6}  {:<18} {:?} {}B{ea} -> {outcome} ({})",
            self.seq, target, self.kind, self.size, self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub parent_scheme: Option<ParentScheme>,
    pub counts: Counts,
    pub faults_by_kind: FaultCounts,
    pub detection: Detection,
    pub descriptor_cache: CacheSummary,
    pub range_cache: RangeSummary,
    pub descriptor_lookups: LookupCounters,
    pub fragmentation: FragmentationReport,
    pub objects_by_mode: ModeCounts,
    pub dgu: DguCounters,
    pub schemes: Option<MultiLevelCounters>,
    pub invariant_violations: u64,
    pub faults: Vec<FaultRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<Verdict>,
}

impl Report {
    pub fn has_faults(&self) -> bool {
        self.faults_by_kind.total() > 0
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Scalar metrics as `metric,value` rows with dotted names. The fault and
    /// verdict lists are reduced to their lengths.
    pub fn to_csv(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut rows = Vec::new();
        flatten("", &value, &mut rows);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"])
            .expect("in-memory write");
        for (k, v) in rows {
            w.write_record([k, v]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_human(&self) -> String {
        let mut s = String::new();
        let c = &self.counts;
        let _ = writeln!(s, "events       {}", c.events);
        let _ = writeln!(
            s,
            "allocs       {} ({} aligned, {} centroid, {} parents, {} failed)",
            c.allocs,
            self.objects_by_mode.aligned,
            self.objects_by_mode.centroid,
            self.objects_by_mode.parents,
            c.alloc_failures
        );
        let _ = writeln!(s, "frees        {} ({} double)", c.frees, c.double_frees);
        let _ = writeln!(
            s,
            "accesses     {} attempted, {} issued, {} faulted, {} skipped",
            c.attempted, c.issued, c.faulted, c.skipped
        );
        let kinds: Vec<String> = FaultKind::ALL
            .iter()
            .filter(|&&k| self.faults_by_kind.get(k) > 0)
            .map(|&k| format!("{k}={}", self.faults_by_kind.get(k)))
            .collect();
        let _ = writeln!(
            s,
            "faults       {}",
            if kinds.is_empty() {
                "none".to_string()
            } else {
                kinds.join(" ")
            }
        );
        let d = &self.detection;
        let _ = writeln!(
            s,
            "detection    tp={} fp={} tn={} fn={} precision={} recall={}",
            d.true_positives,
            d.false_positives,
            d.true_negatives,
            d.false_negatives,
            fmt_ratio(d.precision),
            fmt_ratio(d.recall)
        );
        let _ = writeln!(
            s,
            "             spatial {}/{}  temporal {}/{}",
            d.spatial_detected, d.spatial_positives, d.temporal_detected, d.temporal_positives
        );
        let dc = &self.descriptor_cache;
        let _ = writeln!(
            s,
            "desc cache   hits={} misses={} evictions={} hit_rate={}",
            dc.counters.hits,
            dc.counters.misses,
            dc.counters.evictions,
            fmt_ratio(dc.hit_rate)
        );
        let rc = &self.range_cache;
        let _ = writeln!(
            s,
            "range cache  hits={} misses={} fills={} hit_rate={}",
            rc.counters.hits,
            rc.counters.misses,
            rc.counters.fills,
            fmt_ratio(rc.hit_rate)
        );
        for (name, m) in [
            ("aligned", &self.fragmentation.aligned),
            ("centroid", &self.fragmentation.centroid),
        ] {
            let _ = writeln!(
                s,
                "slack {name:<8} objects={} requested={} reserved={} mean={:.2} max={}",
                m.objects, m.total_requested, m.total_reserved, m.mean_slack, m.max_slack
            );
        }
        if let (Some(scheme), Some(counters)) = (self.parent_scheme, &self.schemes) {
            let sc = counters.get(scheme);
            let _ = writeln!(
                s,
                "parent/{scheme:<6} lookups={} resolved={} misses={} walks={} decodes={} range_hits={} range_fills={}",
                sc.lookups, sc.resolved, sc.misses, sc.walks, sc.tag_decodes, sc.range_hits, sc.range_fills
            );
        }
        let _ = writeln!(s, "invariants   {} violation(s)", self.invariant_violations);
        if !self.verdicts.is_empty() {
            let _ = writeln!(s);
            for v in &self.verdicts {
                let _ = writeln!(s, "{}", v.line());
            }
        }
        s
    }
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    use serde_json::Value;
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&key(k), v, out);
            }
        }
        Value::Array(items) => out.push((format!("{prefix}.len"), items.len().to_string())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
