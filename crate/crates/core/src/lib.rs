//! Desk-scale simulator for descriptor-based, object-aware memory.
//!
//! Objects carry a 64-bit tagged word whose top bit selects between two
//! descriptor addressing modes. Aligned words describe their own bounds:
//! the tag's slot exponent and the address yield a 2^N slot. CentroID words
//! name one of the two midpoints of the object's minimal slot, and that
//! midpoint keys a centralized descriptor table sitting behind a cache.
//!
//! Modules, bottom-up:
//!
//! * [`ptr_codec`]: tag layout and slot arithmetic (Aligned, CentroID, Baggy, Low-Fat)
//! * [`descriptor_store`]: descriptor table, set-associative descriptor cache, range cache
//! * [`alloc_sim`]: simulated binning allocator issuing tagged words
//! * [`dgu`]: descriptor generation and access authentication
//! * [`multilevel`]: parent/child descriptor lookup schemes over a flat page table
//! * [`harness`]: trace schema, workload generation, violation injection, replay, reports

pub mod alloc_sim;
pub mod descriptor_store;
pub mod dgu;
pub mod harness;
pub mod hex;
pub mod multilevel;
pub mod ptr_codec;

pub use alloc_sim::{AllocConfig, AllocError, AllocationRecord, HeapState};
pub use descriptor_store::{DescriptorStore, Level, ObjectDescriptor, Permissions};
pub use dgu::{AccessFault, AccessKind, AccessRequest, Dgu, FaultKind};
pub use ptr_codec::{LinearAddress, Mode, SlotSpec, TaggedWord};
pub use harness::{Report, Trace};
pub use multilevel::{MultiLevel, ParentScheme};
