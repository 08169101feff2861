//! Error type shared by the simulator modules.

use thiserror::Error;

use crate::injector::Phase;
use crate::memory::GuestAddress;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("access at {addr:#x}+{len:#x} out of range (image size {size:#x})")]
    OutOfRange { addr: u64, len: u64, size: u64 },

    #[error("misaligned address {0} (8-byte alignment required)")]
    Misaligned(GuestAddress),

    #[error("address {0} is not page-aligned")]
    Unaligned(GuestAddress),

    #[error("region {start}+{len:#x} overlaps an existing allocation")]
    RegionOverlap { start: GuestAddress, len: u64 },

    #[error("no region registered at {start}+{len:#x}")]
    RegionNotFound { start: GuestAddress, len: u64 },

    #[error("zero-length region requested at {0}")]
    EmptyRegion(GuestAddress),

    #[error("capacity exceeded: need {needed} bytes, {available} available")]
    Capacity { needed: u64, available: u64 },

    #[error("destination {dest} does not lie inside an allocated protected region")]
    Placement { dest: GuestAddress },

    #[error("injector called out of phase: {op} requires {expected}, current phase is {found}")]
    InjectorPhase {
        op: &'static str,
        expected: &'static str,
        found: Phase,
    },

    #[error("no guest syscall observed within {bound} pump steps")]
    InjectionTimeout { bound: usize },

    #[error("unknown process {0}")]
    UnknownPid(u32),

    #[error("object at {0} is not a live {1}")]
    NotAnObject(GuestAddress, &'static str),

    #[error("unknown object kind name {0:?}")]
    UnknownKind(String),

    #[error("profile rejected: {0}")]
    BadProfile(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("snapshot malformed: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
