//! Byte-addressable paged guest memory image.
//!
//! The image is flat simulated guest-physical memory with per-page trap
//! flags. Accesses carry an [`AccessContext`]: guest-context accesses on a
//! trapped page are delivered synchronously to the registered sink (the
//! VMExit analog), hypervisor-context accesses never trap and never appear
//! in the access trace.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Page size in bytes. Fixed for the whole simulator.
pub const PAGE_SIZE: u64 = 4096;
/// Pointer width in bytes; words are stored little-endian.
pub const WORD_SIZE: u64 = 8;

/// Process id inside the simulated guest. Pid 0 stands for kernel
/// housekeeping activity that runs in guest context without a process.
pub type Pid = u32;

/// A byte address within the guest-physical image.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct GuestAddress(pub u64);

impl GuestAddress {
    pub const fn new(addr: u64) -> Self {
        Self(addr)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn add(self, offset: u64) -> Self {
        Self(self.0 + offset)
    }

    /// Index of the page containing this address.
    pub const fn page(self) -> u32 {
        (self.0 / PAGE_SIZE) as u32
    }

    pub const fn offset_in_page(self) -> u16 {
        (self.0 % PAGE_SIZE) as u16
    }

    pub const fn is_word_aligned(self) -> bool {
        self.0.is_multiple_of(WORD_SIZE)
    }

    pub const fn is_page_aligned(self) -> bool {
        self.0.is_multiple_of(PAGE_SIZE)
    }
}

impl fmt::Display for GuestAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl From<u64> for GuestAddress {
    fn from(addr: u64) -> Self {
        Self(addr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

/// Who performs a memory access.
///
/// Hypervisor-context accesses model out-of-VM introspection: they bypass
/// the trap flags entirely and are invisible to the event log and trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessContext {
    Guest(Pid),
    Hypervisor,
}

/// Per-page trap flags. Both default to off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PageFlags {
    pub trap_read: bool,
    pub trap_write: bool,
}

impl PageFlags {
    pub fn traps(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.trap_read,
            AccessKind::Write => self.trap_write,
        }
    }

    pub fn any(self) -> bool {
        self.trap_read || self.trap_write
    }
}

/// One trapped (access, page) pair, delivered to the sink synchronously
/// before the access completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrapHit {
    pub page: u32,
    /// Offset of the first byte the access touches within this page.
    pub offset: u16,
    pub kind: AccessKind,
    pub pid: Pid,
}

/// Receiver for trap hits. Implementors use interior mutability; the image
/// calls `trap` while the access is in flight.
pub trait TrapSink {
    fn trap(&self, hit: TrapHit);
}

/// One guest-context access as recorded by the trace, independent of the
/// trap flags. The offline oracle replays these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRecord {
    pub pid: Pid,
    pub kind: AccessKind,
    pub addr: GuestAddress,
    pub len: u32,
}

/// JSON sidecar written next to a raw image snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub regions: Vec<RegionEntry>,
    pub trapped: Vec<TrappedPage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub start: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrappedPage {
    pub page: u32,
    pub read: bool,
    pub write: bool,
}

/// Paged guest-physical memory with trap flags and an allocation table.
pub struct MemoryImage {
    bytes: Vec<u8>,
    flags: Vec<PageFlags>,
    /// Allocated regions, start -> length. Pairwise non-overlapping,
    /// page-aligned.
    regions: BTreeMap<u64, u64>,
    sink: Option<Rc<dyn TrapSink>>,
    trace: Option<Vec<AccessRecord>>,
}

impl MemoryImage {
    /// Creates a zeroed image of `pages` pages.
    pub fn new(pages: u32) -> Self {
        Self {
            bytes: vec![0; (pages as usize) * PAGE_SIZE as usize],
            flags: vec![PageFlags::default(); pages as usize],
            regions: BTreeMap::new(),
            sink: None,
            trace: None,
        }
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn pages(&self) -> u32 {
        self.flags.len() as u32
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn page_flags(&self, page: u32) -> PageFlags {
        self.flags[page as usize]
    }

    pub fn set_page_flags(&mut self, page: u32, flags: PageFlags) {
        self.flags[page as usize] = flags;
    }

    pub fn set_trap_sink(&mut self, sink: Rc<dyn TrapSink>) {
        self.sink = Some(sink);
    }

    pub fn clear_trap_sink(&mut self) {
        self.sink = None;
    }

    /// Starts recording guest-context accesses. Any previous trace is
    /// discarded.
    pub fn start_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn stop_trace(&mut self) -> Vec<AccessRecord> {
        self.trace.take().unwrap_or_default()
    }

    fn check_range(&self, addr: GuestAddress, len: u64) -> Result<()> {
        let end = addr.raw().checked_add(len).ok_or(SimError::OutOfRange {
            addr: addr.raw(),
            len,
            size: self.size(),
        })?;
        if end > self.size() {
            return Err(SimError::OutOfRange {
                addr: addr.raw(),
                len,
                size: self.size(),
            });
        }
        Ok(())
    }

    /// Trace + trap bookkeeping for one guest access. Hypervisor accesses
    /// skip this entirely.
    fn observe(&mut self, ctx: AccessContext, kind: AccessKind, addr: GuestAddress, len: u64) {
        let pid = match ctx {
            AccessContext::Guest(pid) => pid,
            AccessContext::Hypervisor => return,
        };
        if len == 0 {
            return;
        }
        if let Some(trace) = &mut self.trace {
            trace.push(AccessRecord {
                pid,
                kind,
                addr,
                len: len as u32,
            });
        }
        if let Some(sink) = &self.sink {
            let first = addr.page();
            let last = GuestAddress(addr.raw() + len - 1).page();
            for page in first..=last {
                if self.flags[page as usize].traps(kind) {
                    let first_byte = addr.raw().max(page as u64 * PAGE_SIZE);
                    sink.trap(TrapHit {
                        page,
                        offset: (first_byte % PAGE_SIZE) as u16,
                        kind,
                        pid,
                    });
                }
            }
        }
    }

    pub fn read_bytes(&mut self, ctx: AccessContext, addr: GuestAddress, len: u64) -> Result<Vec<u8>> {
        self.check_range(addr, len)?;
        self.observe(ctx, AccessKind::Read, addr, len);
        let start = addr.raw() as usize;
        Ok(self.bytes[start..start + len as usize].to_vec())
    }

    pub fn write_bytes(&mut self, ctx: AccessContext, addr: GuestAddress, data: &[u8]) -> Result<()> {
        self.check_range(addr, data.len() as u64)?;
        self.observe(ctx, AccessKind::Write, addr, data.len() as u64);
        let start = addr.raw() as usize;
        self.bytes[start..start + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// 8-byte little-endian load. The address must be word-aligned.
    pub fn read_word(&mut self, ctx: AccessContext, addr: GuestAddress) -> Result<u64> {
        if !addr.is_word_aligned() {
            return Err(SimError::Misaligned(addr));
        }
        self.check_range(addr, WORD_SIZE)?;
        self.observe(ctx, AccessKind::Read, addr, WORD_SIZE);
        self.peek_word(addr)
    }

    pub fn write_word(&mut self, ctx: AccessContext, addr: GuestAddress, value: u64) -> Result<()> {
        if !addr.is_word_aligned() {
            return Err(SimError::Misaligned(addr));
        }
        self.check_range(addr, WORD_SIZE)?;
        self.observe(ctx, AccessKind::Write, addr, WORD_SIZE);
        let start = addr.raw() as usize;
        self.bytes[start..start + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    /// Hypervisor-context word load through a shared reference. Never
    /// traps or traces, like any hypervisor access.
    pub fn peek_word(&self, addr: GuestAddress) -> Result<u64> {
        if !addr.is_word_aligned() {
            return Err(SimError::Misaligned(addr));
        }
        self.check_range(addr, WORD_SIZE)?;
        let start = addr.raw() as usize;
        Ok(u64::from_le_bytes(self.bytes[start..start + 8].try_into().unwrap()))
    }

    /// Hypervisor-context byte load through a shared reference.
    pub fn peek_bytes(&self, addr: GuestAddress, len: u64) -> Result<&[u8]> {
        self.check_range(addr, len)?;
        let start = addr.raw() as usize;
        Ok(&self.bytes[start..start + len as usize])
    }

    /// Hypervisor-context word store; shorthand for `write_word` with
    /// [`AccessContext::Hypervisor`].
    pub fn poke_word(&mut self, addr: GuestAddress, value: u64) -> Result<()> {
        self.write_word(AccessContext::Hypervisor, addr, value)
    }

    /// Hypervisor-context byte store.
    pub fn poke_bytes(&mut self, addr: GuestAddress, data: &[u8]) -> Result<()> {
        self.write_bytes(AccessContext::Hypervisor, addr, data)
    }

    /// Registers a zero-filled region of whole pages at `addr`.
    pub fn allocate_region(&mut self, addr: GuestAddress, len: u64) -> Result<()> {
        if len == 0 {
            return Err(SimError::EmptyRegion(addr));
        }
        if !addr.is_page_aligned() {
            return Err(SimError::Unaligned(addr));
        }
        let page_len = len.div_ceil(PAGE_SIZE) * PAGE_SIZE;
        self.check_range(addr, page_len)?;
        if self.overlaps_region(addr.raw(), page_len) {
            return Err(SimError::RegionOverlap { start: addr, len });
        }
        let start = addr.raw() as usize;
        self.bytes[start..start + page_len as usize].fill(0);
        self.regions.insert(addr.raw(), page_len);
        Ok(())
    }

    /// Removes a region previously allocated at exactly `(addr, len)` and
    /// clears the trap flags of its pages.
    pub fn release_region(&mut self, addr: GuestAddress, len: u64) -> Result<()> {
        let page_len = len.div_ceil(PAGE_SIZE) * PAGE_SIZE;
        match self.regions.get(&addr.raw()) {
            Some(&stored) if stored == page_len => {}
            _ => return Err(SimError::RegionNotFound { start: addr, len }),
        }
        self.regions.remove(&addr.raw());
        let first = addr.page();
        let last = GuestAddress(addr.raw() + page_len - 1).page();
        for page in first..=last {
            self.flags[page as usize] = PageFlags::default();
        }
        Ok(())
    }

    pub fn overlaps_region(&self, start: u64, len: u64) -> bool {
        let end = start + len;
        self.regions
            .range(..end)
            .next_back()
            .map(|(&s, &l)| s + l > start)
            .unwrap_or(false)
    }

    /// The region containing `addr`, if any.
    pub fn region_containing(&self, addr: GuestAddress) -> Option<(GuestAddress, u64)> {
        self.regions
            .range(..=addr.raw())
            .next_back()
            .filter(|(&s, &l)| addr.raw() < s + l)
            .map(|(&s, &l)| (GuestAddress(s), l))
    }

    pub fn regions(&self) -> impl Iterator<Item = (GuestAddress, u64)> + '_ {
        self.regions.iter().map(|(&s, &l)| (GuestAddress(s), l))
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    /// Deep, independent copy. The sink and any in-flight trace do not
    /// carry over; trap flags and regions do.
    pub fn clone_image(&self) -> MemoryImage {
        MemoryImage {
            bytes: self.bytes.clone(),
            flags: self.flags.clone(),
            regions: self.regions.clone(),
            sink: None,
            trace: None,
        }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            regions: self
                .regions
                .iter()
                .map(|(&start, &len)| RegionEntry { start, len })
                .collect(),
            trapped: self
                .flags
                .iter()
                .enumerate()
                .filter(|(_, f)| f.any())
                .map(|(page, f)| TrappedPage {
                    page: page as u32,
                    read: f.trap_read,
                    write: f.trap_write,
                })
                .collect(),
        }
    }

    /// Rebuilds an image from a raw byte dump plus its sidecar.
    pub fn restore(bytes: Vec<u8>, sidecar: &Sidecar) -> Result<MemoryImage> {
        if bytes.is_empty() || !(bytes.len() as u64).is_multiple_of(PAGE_SIZE) {
            return Err(SimError::Snapshot(format!(
                "raw dump length {} is not a positive multiple of {PAGE_SIZE}",
                bytes.len()
            )));
        }
        let pages = (bytes.len() as u64 / PAGE_SIZE) as u32;
        let mut image = MemoryImage {
            bytes,
            flags: vec![PageFlags::default(); pages as usize],
            regions: BTreeMap::new(),
            sink: None,
            trace: None,
        };
        for entry in &sidecar.regions {
            let addr = GuestAddress(entry.start);
            if !addr.is_page_aligned() || entry.len == 0 || entry.len % PAGE_SIZE != 0 {
                return Err(SimError::Snapshot(format!(
                    "malformed region {:#x}+{:#x}",
                    entry.start, entry.len
                )));
            }
            image.check_range(addr, entry.len).map_err(|_| {
                SimError::Snapshot(format!(
                    "region {:#x}+{:#x} outside image",
                    entry.start, entry.len
                ))
            })?;
            if image.overlaps_region(entry.start, entry.len) {
                return Err(SimError::Snapshot(format!(
                    "region {:#x}+{:#x} overlaps",
                    entry.start, entry.len
                )));
            }
            image.regions.insert(entry.start, entry.len);
        }
        for t in &sidecar.trapped {
            if t.page >= pages {
                return Err(SimError::Snapshot(format!("trapped page {} outside image", t.page)));
            }
            image.flags[t.page as usize] = PageFlags {
                trap_read: t.read,
                trap_write: t.write,
            };
        }
        Ok(image)
    }

    /// Writes the raw dump and JSON sidecar to `bin_path` / `json_path`.
    pub fn dump_to_files(&self, bin_path: &std::path::Path, json_path: &std::path::Path) -> Result<()> {
        std::fs::write(bin_path, &self.bytes)?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(json_path, json)?;
        Ok(())
    }

    pub fn restore_from_files(
        bin_path: &std::path::Path,
        json_path: &std::path::Path,
    ) -> Result<MemoryImage> {
        let bytes = std::fs::read(bin_path)?;
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        MemoryImage::restore(bytes, &sidecar)
    }
}

impl fmt::Debug for MemoryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryImage")
            .field("pages", &self.pages())
            .field("regions", &self.regions)
            .finish()
    }
}
