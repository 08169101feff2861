//! Deterministic simulator of page-level kernel object monitoring.
//!
//! The crate models a hypervisor watching kernel objects inside a guest
//! memory image. Monitoring is page-granular, so a watched page full of
//! unrelated objects produces events for all of them; the migration engine
//! relocates the objects of interest into a dedicated protected area
//! (allocated by injecting a syscall into the guest) and rewrites every
//! pointer that referenced them, after which only the protected pages need
//! trapping.
//!
//! Modules layer bottom-up:
//!
//! * [`memory`]: paged guest image, per-page trap flags, access trace.
//! * [`profile`]: kernel object layouts and field decoding.
//! * [`guest`]: synthetic guest kernel state and syscall execution.
//! * [`monitor`]: event log, attribution and watch bookkeeping.
//! * [`injector`]: breakpoint-based syscall injection state machine.
//! * [`migration`]: pointer scanning, object migration, validation.
//! * [`bench`]: workload generator, overhead sweep, cost model.
//! * [`scenario`]: scripted end-to-end demonstration cases.

pub mod bench;
pub mod error;
pub mod guest;
pub mod injector;
pub mod memory;
pub mod migration;
pub mod monitor;
pub mod profile;
pub mod scenario;

pub use error::{Result, SimError};
pub use memory::{AccessContext, AccessKind, GuestAddress, MemoryImage, PageFlags, Pid};
