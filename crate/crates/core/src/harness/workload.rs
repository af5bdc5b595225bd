//! Synthetic bimodal workloads and violation injection.
//!
//! Object sizes follow a two-population mix: mostly small (log-uniform in
//! `[16, 1024)`) with a thin tail of large ones (log-uniform in
//! `[64 KiB, 16 MiB)`). Lifetimes are geometric with a short mean for small
//! objects and a long one for large objects. The lifetime parameters are
//! synthetic defaults, not measurements.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{Label, Op, Trace, TraceEvent};
use crate::alloc_sim::SizeClassTable;
use crate::descriptor_store::Level;
use crate::dgu::AccessKind;
use crate::ptr_codec::{bit_length, Mode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("{name} = {value} is not a probability")]
    Probability { name: &'static str, value: f64 },
    #[error("{name} range [{min}, {max}) is empty")]
    EmptyRange {
        name: &'static str,
        min: u64,
        max: u64,
    },
    #[error("{name} = {value} must be at least 1")]
    Mean { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub allocs: usize,
    pub p_small: f64,
    pub small_min: u64,
    pub small_max: u64,
    pub large_min: u64,
    pub large_max: u64,
    /// Mean lifetime, in subsequent allocations.
    pub small_lifetime: f64,
    pub large_lifetime: f64,
    pub accesses_per_object: u32,
    pub mode_override: Option<Mode>,
    pub spatial_rate: f64,
    pub temporal_rate: f64,
    pub seed: u64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        Self {
            allocs: 1000,
            p_small: 0.99,
            small_min: 16,
            small_max: 1024,
            large_min: 64 * 1024,
            large_max: 16 * 1024 * 1024,
            small_lifetime: 8.0,
            large_lifetime: 64.0,
            accesses_per_object: 4,
            mode_override: None,
            spatial_rate: 0.0,
            temporal_rate: 0.0,
            seed: 0,
        }
    }
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (name, value) in [
            ("p_small", self.p_small),
            ("spatial_rate", self.spatial_rate),
            ("temporal_rate", self.temporal_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(WorkloadError::Probability { name, value });
            }
        }
        for (name, min, max) in [
            ("small size", self.small_min, self.small_max),
            ("large size", self.large_min, self.large_max),
        ] {
            if min == 0 || min >= max {
                return Err(WorkloadError::EmptyRange { name, min, max });
            }
        }
        for (name, value) in [
            ("small_lifetime", self.small_lifetime),
            ("large_lifetime", self.large_lifetime),
        ] {
            if value.is_nan() || value < 1.0 {
                return Err(WorkloadError::Mean { name, value });
            }
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, min: u64, max: u64) -> u64 {
    let (lo, hi) = ((min as f64).ln(), (max as f64).ln());
    let v = rng.gen_range(lo..hi).exp() as u64;
    v.clamp(min, max - 1)
}

/// Geometric on {1, 2, ...} with the given mean.
fn geometric(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    1 + (u.ln() / (1.0 - p).ln()).floor() as u64
}

fn benign_access(rng: &mut ChaCha8Rng, object_id: u64, size: u64) -> Op {
    const WIDTHS: [u64; 4] = [1, 2, 4, 8];
    let fits = WIDTHS.iter().filter(|&&w| w <= size).count();
    let width = WIDTHS[rng.gen_range(0..fits)];
    let offset = rng.gen_range(0..=size - width) as i64;
    let kind = if rng.gen_bool(0.5) {
        AccessKind::Load
    } else {
        AccessKind::Store
    };
    Op::Access {
        object_id,
        offset,
        size: width,
        kind,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    // Accesses sort before frees at the same tick.
    Access(u64),
    Free(u64),
}

type Queue = BTreeSet<(u64, Pending, u64)>;

fn drain(
    tick: u64,
    pending: &mut Queue,
    events: &mut Vec<TraceEvent>,
    rng: &mut ChaCha8Rng,
    sizes: &HashMap<u64, u64>,
) {
    while let Some(&(t, what, _)) = pending.first() {
        if t > tick {
            break;
        }
        pending.pop_first();
        let op = match what {
            Pending::Access(id) => benign_access(rng, id, sizes[&id]),
            Pending::Free(id) => Op::Free { object_id: id },
        };
        events.push(TraceEvent::labeled(
            events.len() as u64 + 1,
            op,
            Label::Benign,
        ));
    }
}

/// Builds a benign trace, then applies `inject` with the configured rates.
pub fn generate(params: &WorkloadParams) -> Result<Trace, WorkloadError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sizes = HashMap::new();
    let mut pending = Queue::new();
    let mut order = 0u64;
    let mut events = Vec::new();
    for i in 0..params.allocs as u64 {
        let small = rng.gen_bool(params.p_small);
        let (size, level, mean) = if small {
            (
                log_uniform(&mut rng, params.small_min, params.small_max),
                Level::User,
                params.small_lifetime,
            )
        } else {
            (
                log_uniform(&mut rng, params.large_min, params.large_max),
                Level::System,
                params.large_lifetime,
            )
        };
        sizes.insert(i, size);
        events.push(TraceEvent::labeled(
            events.len() as u64 + 1,
            Op::Alloc {
                object_id: i,
                size,
                level,
                mode_override: params.mode_override,
            },
            Label::Benign,
        ));
        let lifetime = geometric(&mut rng, mean);
        for _ in 0..params.accesses_per_object {
            let at = i + rng.gen_range(0..lifetime);
            pending.insert((at, Pending::Access(i), order));
            order += 1;
        }
        pending.insert((i + lifetime, Pending::Free(i), order));
        order += 1;
        drain(i, &mut pending, &mut events, &mut rng, &sizes);
    }
    drain(u64::MAX, &mut pending, &mut events, &mut rng, &sizes);

    let trace = Trace::new(events);
    if params.spatial_rate > 0.0 || params.temporal_rate > 0.0 {
        Ok(inject(
            &trace,
            params.spatial_rate,
            params.temporal_rate,
            params.seed,
        ))
    } else {
        Ok(trace)
    }
}

/// Slot exponent an object of `size` gets under the default Aligned policy.
fn default_slot_exponent(size: u64) -> u32 {
    SizeClassTable::default()
        .exponent_for(size)
        .unwrap_or_else(|| bit_length(size.max(2) - 1))
}

/// Adds labeled violations to `trace`.
///
/// After each access to a live object, with probability `spatial_rate`, an
/// out-of-bounds access at offset >= size is added; roughly half land in the
/// slot's slack (when it has any), the rest at or past the slot's end. After
/// each free, with probability `temporal_rate`, an in-bounds access to the
/// freed object is added. Seq numbers are rewritten.
pub fn inject(trace: &Trace, spatial_rate: f64, temporal_rate: f64, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e_11ed);
    let mut sizes: HashMap<u64, u64> = HashMap::new();
    let mut live: HashMap<u64, bool> = HashMap::new();
    let mut out = Vec::with_capacity(trace.len());
    for e in &trace.events {
        out.push(*e);
        match e.op {
            Op::Alloc {
                object_id, size, ..
            } => {
                sizes.insert(object_id, size);
                live.insert(object_id, true);
            }
            Op::Access {
                object_id, kind, ..
            } if live.get(&object_id) == Some(&true)
                && spatial_rate > 0.0
                && rng.gen_bool(spatial_rate) =>
            {
                let size = sizes[&object_id];
                let slot = 1u64 << default_slot_exponent(size);
                let offset = if slot > size && rng.gen_bool(0.5) {
                    rng.gen_range(size..slot)
                } else {
                    slot + rng.gen_range(0..slot.min(4096))
                };
                out.push(TraceEvent::labeled(
                    0,
                    Op::Access {
                        object_id,
                        offset: offset as i64,
                        size: 1,
                        kind,
                    },
                    Label::SpatialViolation,
                ));
            }
            Op::Free { object_id } => {
                let was_live = live.insert(object_id, false) == Some(true);
                if was_live && temporal_rate > 0.0 && rng.gen_bool(temporal_rate) {
                    let size = sizes[&object_id];
                    out.push(TraceEvent::labeled(
                        0,
                        Op::Access {
                            object_id,
                            offset: rng.gen_range(0..size) as i64,
                            size: 1,
                            kind: AccessKind::Load,
                        },
                        Label::TemporalViolation,
                    ));
                }
            }
            _ => {}
        }
    }
    let mut t = Trace::new(out);
    t.renumber();
    t
}
