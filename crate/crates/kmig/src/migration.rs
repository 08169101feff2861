//! Kernel-object migration with pointer redirection.
//!
//! Moving an object out of a shared page requires finding every slot in
//! the image that references it, proving each slot really is a pointer
//! (not data that happens to look like one), rewriting the proven ones,
//! and leaving the rest alone. The engine scans, classifies through
//! cross-link verification, copies, rewrites, and finally parks the old
//! object on the LRU list with a zero refcount so normal reclaim frees
//! it. All engine accesses run hypervisor-context against a paused
//! guest: they produce no monitor events.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Result, SimError};
use crate::guest::{GuestState, SyscallRequest, SyscallResult};
use crate::injector::{RepeatDriver, SyscallInjector};
use crate::memory::{GuestAddress, MemoryImage, WORD_SIZE};
use crate::profile::{
    dentry, files_struct, task, verify_cross_links, Classification, LayoutProfile, ObjectKind,
    ObjectRegistry,
};

/// How a referencing slot relates to the object being moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointerType {
    /// A slot in some other object holding the object's address.
    External,
    /// A slot inside the object pointing at its own interior.
    Internal,
    /// A doubly-linked-list neighbor's link slot.
    ListNeighbor,
}

/// One word-aligned slot whose value falls inside the source object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PointerHit {
    pub slot: GuestAddress,
    pub value: GuestAddress,
    pub ptype: PointerType,
    pub classification: Classification,
    /// Object owning the slot, when the registry knows one.
    pub owner: Option<(ObjectKind, GuestAddress)>,
}

/// A span inside an allocated protected region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AreaSpan {
    pub start: GuestAddress,
    pub len: u64,
}

impl AreaSpan {
    pub fn new(start: GuestAddress, len: u64) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> u64 {
        self.start.raw() + self.len
    }
}

/// What one migration did: where the object went and which slots were
/// touched or deliberately left alone.
#[derive(Debug, Clone, Serialize)]
pub struct MigrationReport {
    pub source: GuestAddress,
    pub dest: GuestAddress,
    pub kind: ObjectKind,
    pub rewritten: Vec<PointerHit>,
    pub skipped_unverified: Vec<PointerHit>,
    /// True when the old extent was zeroed immediately (fdt); dentries
    /// are parked on the LRU instead and freed by reclaim.
    pub released: bool,
}

/// Verdict of a cloned-guest rehearsal.
#[derive(Debug, Clone, Serialize)]
pub struct DryRunVerdict {
    pub pass: bool,
    pub diagnostics: Vec<String>,
}

pub struct MigrationEngine {
    profile: LayoutProfile,
    /// Fault injection for rehearsal tests: when set, Unverified hits
    /// are rewritten like confirmed ones. Never enable outside a clone.
    pub rewrite_unverified: bool,
}

impl MigrationEngine {
    pub fn new(profile: LayoutProfile) -> Self {
        Self { profile, rewrite_unverified: false }
    }

    pub fn standard() -> Self {
        Self::new(LayoutProfile::standard())
    }

    pub fn profile(&self) -> &LayoutProfile {
        &self.profile
    }

    /// Brute-force scan of the whole image for word-aligned slots whose
    /// value lands inside the object at `src`, each classified by
    /// cross-link verification.
    pub fn scan_pointers(
        &self,
        image: &MemoryImage,
        registry: &dyn ObjectRegistry,
        src: GuestAddress,
        kind: ObjectKind,
    ) -> Result<Vec<PointerHit>> {
        let size = self.profile.size_of(kind);
        let lo = src.raw();
        let hi = lo + size;
        let mut hits = Vec::new();
        for (i, chunk) in image.bytes().chunks_exact(WORD_SIZE as usize).enumerate() {
            let value = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if value < lo || value >= hi {
                continue;
            }
            let slot = GuestAddress(i as u64 * WORD_SIZE);
            let classification =
                verify_cross_links(image, &self.profile, registry, src, kind, slot)?;
            let in_src = slot.raw() >= lo && slot.raw() < hi;
            let ptype = if in_src {
                PointerType::Internal
            } else if matches!(
                classification,
                Classification::ConfirmedHashNeighbor | Classification::ConfirmedLruNeighbor
            ) {
                PointerType::ListNeighbor
            } else {
                PointerType::External
            };
            hits.push(PointerHit {
                slot,
                value: GuestAddress(value),
                ptype,
                classification,
                owner: registry.object_at(slot),
            });
        }
        Ok(hits)
    }

    fn check_destination(
        &self,
        state: &GuestState,
        image: &MemoryImage,
        dest: GuestAddress,
        size: u64,
    ) -> Result<()> {
        if !dest.is_word_aligned() {
            return Err(SimError::Unaligned(dest));
        }
        let Some((region_start, region_len)) = image.region_containing(dest) else {
            return Err(SimError::Placement { dest });
        };
        let available = region_start.raw() + region_len - dest.raw();
        if size > available {
            return Err(SimError::Capacity { needed: size, available });
        }
        if !state.extent_is_free(dest.raw(), size) {
            return Err(SimError::Invariant(format!(
                "destination {dest} overlaps a live object"
            )));
        }
        Ok(())
    }

    fn rewrite_hits(
        &self,
        image: &mut MemoryImage,
        hits: &[PointerHit],
        src: GuestAddress,
        dest: GuestAddress,
    ) -> Result<(Vec<PointerHit>, Vec<PointerHit>)> {
        let mut rewritten = Vec::new();
        let mut skipped = Vec::new();
        for hit in hits {
            let confirmed = hit.classification.is_confirmed();
            if !confirmed && !self.rewrite_unverified {
                skipped.push(hit.clone());
                continue;
            }
            let new_value = dest.raw() + (hit.value.raw() - src.raw());
            // Internal slots live inside the copied bytes, so the fixup
            // lands in the destination copy; everything else is rewritten
            // in place.
            let target_slot = if hit.ptype == PointerType::Internal {
                GuestAddress(dest.raw() + (hit.slot.raw() - src.raw()))
            } else {
                hit.slot
            };
            image.poke_word(target_slot, new_value)?;
            rewritten.push(hit.clone());
        }
        Ok((rewritten, skipped))
    }

    /// Moves one dentry to `dest`: copy, rewrite every confirmed
    /// reference, update bookkeeping, then zero the old refcount and park
    /// the old copy on the LRU for normal reclaim.
    pub fn migrate_dentry(
        &self,
        state: &mut GuestState,
        image: &mut MemoryImage,
        src: GuestAddress,
        dest: GuestAddress,
    ) -> Result<MigrationReport> {
        if !state.is_cache_member(src) {
            return Err(SimError::NotAnObject(src, "dentry"));
        }
        let size = dentry::SIZE;
        self.check_destination(state, image, dest, size)?;

        let hits = self.scan_pointers(image, state, src, ObjectKind::Dentry)?;
        let bytes = image.peek_bytes(src, size)?.to_vec();
        image.poke_bytes(dest, &bytes)?;
        let (rewritten, skipped_unverified) = self.rewrite_hits(image, &hits, src, dest)?;

        state.relocate_dentry(src, dest);
        // Old copy: refcount to zero, then onto the LRU tail. All
        // rewrites already happened, so no live path reaches it.
        image.poke_word(GuestAddress(src.raw() + dentry::D_COUNT), 0)?;
        state.park_on_lru(image, crate::memory::AccessContext::Hypervisor, src)?;

        Ok(MigrationReport {
            source: src,
            dest,
            kind: ObjectKind::Dentry,
            rewritten,
            skipped_unverified,
            released: false,
        })
    }

    /// Moves a process's fd table. The only live reference is the
    /// files_struct pointer, so the report carries exactly one rewrite;
    /// the old extent is zeroed and leaves the index.
    pub fn migrate_fdt(
        &self,
        state: &mut GuestState,
        image: &mut MemoryImage,
        pid: crate::memory::Pid,
        dest: GuestAddress,
    ) -> Result<MigrationReport> {
        let src = state
            .fdt_of(pid)
            .ok_or(SimError::UnknownPid(pid))?;
        let size = self.profile.size_of(ObjectKind::Fdt);
        self.check_destination(state, image, dest, size)?;

        let hits = self.scan_pointers(image, state, src, ObjectKind::Fdt)?;
        let bytes = image.peek_bytes(src, size)?.to_vec();
        image.poke_bytes(dest, &bytes)?;
        let (rewritten, skipped_unverified) = self.rewrite_hits(image, &hits, src, dest)?;

        image.poke_bytes(src, &vec![0u8; size as usize])?;
        state.relocate_fdt(pid, dest);

        Ok(MigrationReport {
            source: src,
            dest,
            kind: ObjectKind::Fdt,
            rewritten,
            skipped_unverified,
            released: true,
        })
    }

    /// Migrates `sources` to contiguous 128-byte slots starting at
    /// `area.start`. Capacity is checked before any mutation.
    pub fn migrate_batch(
        &self,
        state: &mut GuestState,
        image: &mut MemoryImage,
        sources: &[GuestAddress],
        area: AreaSpan,
    ) -> Result<Vec<MigrationReport>> {
        let needed = sources.len() as u64 * dentry::SIZE;
        if needed > area.len {
            return Err(SimError::Capacity { needed, available: area.len });
        }
        let mut reports = Vec::with_capacity(sources.len());
        for (i, &src) in sources.iter().enumerate() {
            let dest = GuestAddress(area.start.raw() + i as u64 * dentry::SIZE);
            reports.push(self.migrate_dentry(state, image, src, dest)?);
        }
        Ok(reports)
    }

    /// Rehearses the batch on cloned state and memory, then probes the
    /// clone with injected Open+Read syscalls and audits every byte the
    /// rehearsal changed. The original is never touched.
    pub fn dry_run_validate(
        &self,
        state: &GuestState,
        image: &MemoryImage,
        sources: &[GuestAddress],
        area: AreaSpan,
        probe_paths: &[String],
    ) -> DryRunVerdict {
        let mut diagnostics = Vec::new();
        let mut clone_state = state.clone();
        let mut clone_image = image.clone_image();
        let before = clone_image.bytes().to_vec();

        let reports =
            match self.migrate_batch(&mut clone_state, &mut clone_image, sources, area) {
                Ok(r) => r,
                Err(e) => {
                    return DryRunVerdict {
                        pass: false,
                        diagnostics: vec![format!("migration failed: {e}")],
                    }
                }
            };

        // Conservatism audit: a rewritten slot must carry a confirmed
        // classification.
        for report in &reports {
            for hit in &report.rewritten {
                if !hit.classification.is_confirmed() {
                    diagnostics.push(format!(
                        "unverified slot {} (value {}) was rewritten",
                        hit.slot, hit.value
                    ));
                }
            }
        }

        // Byte audit: everything the rehearsal changed must be a
        // destination copy, a confirmed rewrite, or the LRU parking of an
        // old copy. Anything else is corruption.
        let allowed = allowed_change_set(&reports, area, clone_state.lru_sentinel());
        for (offset, (&was, &now)) in
            before.iter().zip(clone_image.bytes().iter()).enumerate()
        {
            if was != now && !allowed.contains(&(offset as u64 / WORD_SIZE * WORD_SIZE)) {
                diagnostics.push(format!(
                    "unexpected byte change at {} ({was:#04x} -> {now:#04x})",
                    GuestAddress(offset as u64)
                ));
            }
        }

        // Probe the clone the way the hypervisor would: inject Open and
        // Read syscalls carried by ordinary guest activity.
        let carrier = clone_state.pids().into_iter().min().unwrap_or(1);
        let mut injector = SyscallInjector::default();
        let mut driver = RepeatDriver::stdio_read(carrier);
        'probes: for path in probe_paths {
            if injector.phase() != crate::injector::Phase::Armed {
                if let Err(e) = injector.arm(&mut clone_state, &mut clone_image) {
                    diagnostics.push(format!("probe arming failed: {e}"));
                    break 'probes;
                }
            }
            let open = injector.inject(
                &mut clone_state,
                &mut clone_image,
                &mut driver,
                &SyscallRequest::Open { path: path.clone() },
            );
            let fd = match open.map(|o| o.injected_result) {
                Ok(SyscallResult::Fd(fd)) => fd,
                Ok(other) => {
                    diagnostics.push(format!("probe open of {path:?} returned {other:?}"));
                    continue;
                }
                Err(e) => {
                    diagnostics.push(format!("probe open of {path:?} failed: {e}"));
                    continue;
                }
            };
            if let Err(e) = injector.arm(&mut clone_state, &mut clone_image) {
                diagnostics.push(format!("probe arming failed: {e}"));
                break 'probes;
            }
            match injector.inject(
                &mut clone_state,
                &mut clone_image,
                &mut driver,
                &SyscallRequest::Read { fd, len: 1 },
            ) {
                Ok(o) if matches!(o.injected_result, SyscallResult::Bytes(_)) => {}
                Ok(o) => diagnostics
                    .push(format!("probe read of {path:?} returned {:?}", o.injected_result)),
                Err(e) => diagnostics.push(format!("probe read of {path:?} failed: {e}")),
            }
        }

        if let Err(e) = clone_state.verify_invariants(&clone_image) {
            diagnostics.push(format!("post-migration invariants: {e}"));
        }
        if let Err(e) = self.verify_reachability(&clone_state, &clone_image, sources) {
            diagnostics.push(format!("reachability: {e}"));
        }

        DryRunVerdict { pass: diagnostics.is_empty(), diagnostics }
    }

    /// Full-image reachability audit after migration: no live pointer
    /// field may still hold a source address, and every ground-truth
    /// lookup path must reach the destination copy. LRU-parked old
    /// copies (and the LRU links that chain them) are the designated
    /// exception: they are garbage awaiting reclaim.
    pub fn verify_reachability(
        &self,
        state: &GuestState,
        image: &MemoryImage,
        sources: &[GuestAddress],
    ) -> Result<()> {
        let src_set: BTreeSet<u64> = sources.iter().map(|a| a.raw()).collect();
        if src_set.is_empty() {
            return Ok(());
        }
        let lru_sentinel = state.lru_sentinel();
        for (base, kind) in state.objects() {
            if state.is_lru_member(base) {
                continue;
            }
            for field in self.profile.layout(kind).pointer_fields() {
                if base == lru_sentinel
                    && (field.offset == dentry::D_LRU_NEXT || field.offset == dentry::D_LRU_PREV)
                {
                    continue;
                }
                let slot = GuestAddress(base.raw() + field.offset);
                let value = image.peek_word(slot)?;
                if src_set.contains(&value) {
                    return Err(SimError::Invariant(format!(
                        "live {} field {} at {slot} still references migrated source {value:#x}",
                        kind.name(),
                        field.name
                    )));
                }
            }
        }

        // Ground-truth lookups must land on destinations.
        for (path, dentry_addr) in state.ground_truth_paths() {
            let Some(d) = dentry_addr else { continue };
            if src_set.contains(&d.raw()) {
                return Err(SimError::Invariant(format!(
                    "ground-truth path {path:?} still maps to source {d}"
                )));
            }
            let found = resolve_path_by_chain(state, image, path)?;
            if found != Some(d) {
                return Err(SimError::Invariant(format!(
                    "chain walk for {path:?} found {found:?}, ground truth {d}"
                )));
            }
        }
        for pid in state.pids() {
            let task = state.task_of(pid).expect("live pid");
            let files = image.peek_word(GuestAddress(task.raw() + task::FILES))?;
            let fdt = image.peek_word(GuestAddress(files + files_struct::FDT))?;
            if src_set.contains(&fdt) {
                return Err(SimError::Invariant(format!(
                    "pid {pid} fdt walk reaches migrated source {fdt:#x}"
                )));
            }
            if Some(GuestAddress(fdt)) != state.fdt_of(pid) {
                return Err(SimError::Invariant(format!(
                    "pid {pid} fdt walk desynced from bookkeeping"
                )));
            }
        }
        Ok(())
    }
}

/// Word-aligned addresses a dentry batch is allowed to change: the
/// destination copies, confirmed rewrite slots, each old copy's refcount
/// and LRU links, and the LRU sentinel links.
fn allowed_change_set(
    reports: &[MigrationReport],
    area: AreaSpan,
    lru_sentinel: GuestAddress,
) -> BTreeSet<u64> {
    fn word_span(allowed: &mut BTreeSet<u64>, start: u64, len: u64) {
        let mut a = start;
        while a < start + len {
            allowed.insert(a);
            a += WORD_SIZE;
        }
    }
    let mut allowed = BTreeSet::new();
    word_span(&mut allowed, area.start.raw(), area.len);
    word_span(&mut allowed, lru_sentinel.raw() + dentry::D_LRU_NEXT, 2 * WORD_SIZE);
    for report in reports {
        word_span(&mut allowed, report.source.raw() + dentry::D_COUNT, WORD_SIZE);
        word_span(&mut allowed, report.source.raw() + dentry::D_LRU_NEXT, 2 * WORD_SIZE);
        for hit in &report.rewritten {
            if hit.classification.is_confirmed() {
                allowed.insert(hit.slot.raw());
            }
        }
    }
    allowed
}

/// Resolves a path by walking its hash chain and comparing stored name
/// bytes, using only memory contents (no bookkeeping shortcuts).
pub fn resolve_path_by_chain(
    state: &GuestState,
    image: &MemoryImage,
    path: &str,
) -> Result<Option<GuestAddress>> {
    if path.len() >= dentry::INAME_LEN as usize {
        return Ok(None);
    }
    let mut expect = [0u8; dentry::INAME_LEN as usize];
    expect[..path.len()].copy_from_slice(path.as_bytes());
    let sentinel = state.bucket_sentinel_of(path).raw();
    let mut cur = image.peek_word(GuestAddress(sentinel + dentry::D_HASH_NEXT))?;
    let mut hops = 0usize;
    while cur != sentinel {
        if hops > state.cache_member_count() + 1 {
            return Err(SimError::Invariant(format!(
                "hash chain for {path:?} does not close"
            )));
        }
        let name_ptr = image.peek_word(GuestAddress(cur + dentry::D_NAME))?;
        let name = image.peek_bytes(GuestAddress(name_ptr), dentry::INAME_LEN)?;
        if name == &expect[..] {
            return Ok(Some(GuestAddress(cur)));
        }
        cur = image.peek_word(GuestAddress(cur + dentry::D_HASH_NEXT))?;
        hops += 1;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{build_guest, initial_file_name, layout, GuestSpec};
    use crate::memory::PAGE_SIZE;

    const AREA_BASE: u64 = 0xC00000;
    const AREA_LEN: u64 = 32 * PAGE_SIZE;

    fn guest(num_files: u32) -> (GuestState, MemoryImage) {
        build_guest(&GuestSpec {
            num_files,
            num_processes: 2,
            interleave: true,
            seed: 7,
            reclaim_period: 64,
            image_pages: 4096,
            churn_headroom: 16,
        })
        .unwrap()
    }

    fn with_area(num_files: u32) -> (GuestState, MemoryImage, AreaSpan) {
        let (state, mut image) = guest(num_files);
        image.allocate_region(GuestAddress(AREA_BASE), AREA_LEN).unwrap();
        (state, image, AreaSpan::new(GuestAddress(AREA_BASE), AREA_LEN))
    }

    fn open(state: &mut GuestState, image: &mut MemoryImage, pid: u32, path: &str) -> u32 {
        match state
            .run_syscall(image, pid, &SyscallRequest::Open { path: path.into() })
            .unwrap()
        {
            SyscallResult::Fd(fd) => fd,
            other => panic!("open failed: {other:?}"),
        }
    }

    #[test]
    fn scan_finds_the_five_reference_slots_of_an_open_dentry() {
        let (mut state, mut image) = guest(8);
        open(&mut state, &mut image, 1, &initial_file_name(0));
        let src = state.dentry_of(&initial_file_name(0)).unwrap();
        let engine = MigrationEngine::standard();
        let hits = engine.scan_pointers(&image, &state, src, ObjectKind::Dentry).unwrap();

        assert_eq!(hits.len(), 5, "file + inode + two chain links + own d_name");
        let count = |c: Classification| hits.iter().filter(|h| h.classification == c).count();
        assert_eq!(count(Classification::ConfirmedFileBackref), 1);
        assert_eq!(count(Classification::ConfirmedInodeBackref), 1);
        assert_eq!(count(Classification::ConfirmedHashNeighbor), 2);
        assert_eq!(count(Classification::ConfirmedInternal), 1);
        let ptype = |p: PointerType| hits.iter().filter(|h| h.ptype == p).count();
        assert_eq!(ptype(PointerType::External), 2);
        assert_eq!(ptype(PointerType::ListNeighbor), 2);
        assert_eq!(ptype(PointerType::Internal), 1);

        // Independent enumeration: stride the image word-by-word and
        // collect in-range slots; the scan must report exactly these.
        let mut expect = BTreeSet::new();
        let mut addr = 0u64;
        while addr < image.size() {
            let v = image.peek_word(GuestAddress(addr)).unwrap();
            if v >= src.raw() && v < src.raw() + dentry::SIZE {
                expect.insert(addr);
            }
            addr += WORD_SIZE;
        }
        let got: BTreeSet<u64> = hits.iter().map(|h| h.slot.raw()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn scan_reports_planted_decoy_as_unverified() {
        let (mut state, mut image) = guest(8);
        open(&mut state, &mut image, 1, &initial_file_name(0));
        let src = state.dentry_of(&initial_file_name(0)).unwrap();
        let decoy = GuestAddress(layout::SCRATCH + 64);
        image.poke_word(decoy, src.raw()).unwrap();

        let engine = MigrationEngine::standard();
        let hits = engine.scan_pointers(&image, &state, src, ObjectKind::Dentry).unwrap();
        assert_eq!(hits.len(), 6);
        let hit = hits.iter().find(|h| h.slot == decoy).unwrap();
        assert_eq!(hit.classification, Classification::Unverified);
        assert_eq!(hit.ptype, PointerType::External);
        assert!(hit.owner.is_none(), "scratch is not an indexed object");
    }

    #[test]
    fn scan_of_unreferenced_object_yields_only_internal_hit() {
        struct Lone(GuestAddress);
        impl ObjectRegistry for Lone {
            fn object_at(&self, addr: GuestAddress) -> Option<(ObjectKind, GuestAddress)> {
                (addr.raw() >= self.0.raw() && addr.raw() < self.0.raw() + dentry::SIZE)
                    .then_some((ObjectKind::Dentry, self.0))
            }
            fn is_hash_chain_node(&self, _addr: GuestAddress) -> bool {
                false
            }
            fn is_lru_chain_node(&self, _addr: GuestAddress) -> bool {
                false
            }
            fn is_live_files_struct(&self, _addr: GuestAddress) -> bool {
                false
            }
        }
        let mut image = MemoryImage::new(64);
        let src = GuestAddress(0x8000);
        image.poke_word(GuestAddress(src.raw() + dentry::D_NAME), src.raw() + dentry::D_INAME)
            .unwrap();
        let engine = MigrationEngine::standard();
        let hits = engine
            .scan_pointers(&image, &Lone(src), src, ObjectKind::Dentry)
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].ptype, PointerType::Internal);
        assert_eq!(hits[0].classification, Classification::ConfirmedInternal);
    }

    #[test]
    fn migrate_dentry_redirects_every_live_path() {
        let (mut state, mut image, area) = with_area(8);
        let path = initial_file_name(0);
        let fd = open(&mut state, &mut image, 1, &path);
        let src = state.dentry_of(&path).unwrap();
        let engine = MigrationEngine::standard();
        let report = engine.migrate_dentry(&mut state, &mut image, src, area.start).unwrap();

        assert_eq!(report.rewritten.len(), 5);
        assert!(report.skipped_unverified.is_empty());
        assert!(!report.released);
        assert_eq!(state.dentry_of(&path), Some(area.start));

        // The chain walk reaches the destination and never the source.
        assert_eq!(resolve_path_by_chain(&state, &image, &path).unwrap(), Some(area.start));
        // The old copy is parked with a zero refcount.
        assert!(state.is_lru_member(src));
        assert_eq!(image.peek_word(src).unwrap(), 0);
        assert_eq!(
            image.peek_word(GuestAddress(area.start.raw() + dentry::D_COUNT)).unwrap(),
            1
        );
        // The previously opened fd still works through the moved object.
        let out = state
            .run_syscall(&mut image, 1, &SyscallRequest::Read { fd, len: 4 })
            .unwrap();
        assert_eq!(out, SyscallResult::Bytes(4));
        state.verify_invariants(&image).unwrap();
        engine.verify_reachability(&state, &image, &[src]).unwrap();
    }

    #[test]
    fn migrate_preserves_content_except_name_pointer() {
        let (mut state, mut image, area) = with_area(8);
        let path = initial_file_name(1);
        open(&mut state, &mut image, 2, &path);
        let src = state.dentry_of(&path).unwrap();
        let before = image.peek_bytes(src, dentry::SIZE).unwrap().to_vec();
        let engine = MigrationEngine::standard();
        engine.migrate_dentry(&mut state, &mut image, src, area.start).unwrap();
        let after = image.peek_bytes(area.start, dentry::SIZE).unwrap().to_vec();
        for (off, (b, a)) in before.iter().zip(after.iter()).enumerate() {
            let in_name_ptr = (off as u64) >= dentry::D_NAME && (off as u64) < dentry::D_NAME + 8;
            if in_name_ptr {
                continue;
            }
            assert_eq!(b, a, "byte {off} changed");
        }
        assert_eq!(
            image.peek_word(GuestAddress(area.start.raw() + dentry::D_NAME)).unwrap(),
            area.start.raw() + dentry::D_INAME
        );
    }

    #[test]
    fn decoy_survives_migration_untouched() {
        let (mut state, mut image, area) = with_area(8);
        let path = initial_file_name(0);
        open(&mut state, &mut image, 1, &path);
        let src = state.dentry_of(&path).unwrap();
        let decoy = GuestAddress(layout::SCRATCH + 128);
        image.poke_word(decoy, src.raw()).unwrap();

        let engine = MigrationEngine::standard();
        let report = engine.migrate_dentry(&mut state, &mut image, src, area.start).unwrap();
        assert_eq!(report.skipped_unverified.len(), 1);
        assert_eq!(report.skipped_unverified[0].slot, decoy);
        assert_eq!(image.peek_word(decoy).unwrap(), src.raw(), "decoy byte-identical");
    }

    #[test]
    fn fault_injection_rewrites_the_decoy() {
        let (mut state, mut image, area) = with_area(8);
        let path = initial_file_name(0);
        open(&mut state, &mut image, 1, &path);
        let src = state.dentry_of(&path).unwrap();
        let decoy = GuestAddress(layout::SCRATCH + 128);
        image.poke_word(decoy, src.raw()).unwrap();

        let mut engine = MigrationEngine::standard();
        engine.rewrite_unverified = true;
        let report = engine.migrate_dentry(&mut state, &mut image, src, area.start).unwrap();
        assert!(report.rewritten.iter().any(|h| h.slot == decoy));
        assert_eq!(image.peek_word(decoy).unwrap(), area.start.raw());
    }

    #[test]
    fn batch_migrates_400_dentries_contiguously() {
        let (mut state, mut image, area) = with_area(400);
        let sources: Vec<GuestAddress> = (0..400)
            .map(|i| state.dentry_of(&initial_file_name(i)).unwrap())
            .collect();
        let engine = MigrationEngine::standard();
        let reports = engine.migrate_batch(&mut state, &mut image, &sources, area).unwrap();
        assert_eq!(reports.len(), 400);
        assert_eq!(reports[399].dest, GuestAddress(AREA_BASE + 51072));
        let top = reports.iter().map(|r| r.dest.raw() + dentry::SIZE).max().unwrap();
        assert_eq!(top - AREA_BASE, 51200);
        assert!(top <= AREA_BASE + AREA_LEN, "batch overflows the area");
        state.verify_invariants(&image).unwrap();
        engine.verify_reachability(&state, &image, &sources).unwrap();
        // Every path now resolves inside the area.
        for i in 0..400 {
            let d = state.dentry_of(&initial_file_name(i)).unwrap();
            assert!(d.raw() >= AREA_BASE && d.raw() < AREA_BASE + AREA_LEN);
        }
    }

    #[test]
    fn batch_overflow_fails_before_mutating() {
        let (mut state, mut image) = guest(64);
        image.allocate_region(GuestAddress(AREA_BASE), PAGE_SIZE).unwrap();
        let area = AreaSpan::new(GuestAddress(AREA_BASE), PAGE_SIZE);
        let sources: Vec<GuestAddress> = (0..33)
            .map(|i| state.dentry_of(&initial_file_name(i)).unwrap())
            .collect();
        let before = image.bytes().to_vec();
        let engine = MigrationEngine::standard();
        let err = engine.migrate_batch(&mut state, &mut image, &sources, area).unwrap_err();
        assert!(matches!(
            err,
            SimError::Capacity { needed: 4224, available: 4096 }
        ));
        assert_eq!(image.bytes(), &before[..], "zero mutations on overflow");
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let (mut state, mut image, area) = with_area(8);
        let before = image.bytes().to_vec();
        let reports = MigrationEngine::standard()
            .migrate_batch(&mut state, &mut image, &[], area)
            .unwrap();
        assert!(reports.is_empty());
        assert_eq!(image.bytes(), &before[..]);
    }

    #[test]
    fn migrate_dentry_outside_region_is_a_placement_error() {
        let (mut state, mut image) = guest(8);
        let src = state.dentry_of(&initial_file_name(0)).unwrap();
        let engine = MigrationEngine::standard();
        let err = engine
            .migrate_dentry(&mut state, &mut image, src, GuestAddress(AREA_BASE))
            .unwrap_err();
        assert!(matches!(err, SimError::Placement { .. }));

        // A region too small for the tail slot trips the capacity check.
        image.allocate_region(GuestAddress(AREA_BASE), PAGE_SIZE).unwrap();
        let tail = GuestAddress(AREA_BASE + PAGE_SIZE - 64);
        let err = engine.migrate_dentry(&mut state, &mut image, src, tail).unwrap_err();
        assert!(matches!(err, SimError::Capacity { needed: 128, available: 64 }));
    }

    #[test]
    fn migrate_fdt_touches_exactly_one_pointer() {
        let (mut state, mut image, area) = with_area(8);
        let fd = open(&mut state, &mut image, 1, "fdt_1.txt");
        assert_eq!(fd, 3);
        let old_fdt = state.fdt_of(1).unwrap();
        let engine = MigrationEngine::standard();
        let report = engine.migrate_fdt(&mut state, &mut image, 1, area.start).unwrap();

        assert_eq!(report.rewritten.len(), 1, "only the files_struct pointer");
        assert_eq!(
            report.rewritten[0].classification,
            Classification::ConfirmedFdtSlot
        );
        assert!(report.released);
        assert_eq!(state.fdt_of(1), Some(area.start));
        let old_bytes = image
            .peek_bytes(old_fdt, crate::profile::fdt::SIZE)
            .unwrap();
        assert!(old_bytes.iter().all(|&b| b == 0), "old fdt zeroed");

        // fd 3 still resolves through the moved table; the next open
        // lands in slot 4.
        let out = state
            .run_syscall(&mut image, 1, &SyscallRequest::Read { fd, len: 2 })
            .unwrap();
        assert_eq!(out, SyscallResult::Bytes(2));
        let fd2 = open(&mut state, &mut image, 1, "fdt_2.txt");
        assert_eq!(fd2, 4);
        state.verify_invariants(&image).unwrap();
    }

    #[test]
    fn dry_run_passes_and_leaves_original_untouched() {
        let (state, image, area) = with_area(16);
        let sources: Vec<GuestAddress> = (0..16)
            .map(|i| state.dentry_of(&initial_file_name(i)).unwrap())
            .collect();
        let probes: Vec<String> = (0..4).map(initial_file_name).collect();
        let before = image.bytes().to_vec();
        let engine = MigrationEngine::standard();
        let verdict = engine.dry_run_validate(&state, &image, &sources, area, &probes);
        assert!(verdict.pass, "diagnostics: {:?}", verdict.diagnostics);
        assert_eq!(image.bytes(), &before[..], "clone isolation");
        assert_eq!(state.dentry_of(&initial_file_name(0)), Some(sources[0]));
    }

    #[test]
    fn dry_run_flags_fault_injected_corruption_with_the_slot() {
        let (mut state, mut image, area) = with_area(8);
        open(&mut state, &mut image, 1, &initial_file_name(0));
        let src = state.dentry_of(&initial_file_name(0)).unwrap();
        let decoy = GuestAddress(layout::SCRATCH + 512);
        image.poke_word(decoy, src.raw()).unwrap();

        let mut engine = MigrationEngine::standard();
        engine.rewrite_unverified = true;
        let verdict = engine.dry_run_validate(
            &state,
            &image,
            &[src],
            area,
            &[initial_file_name(0)],
        );
        assert!(!verdict.pass);
        let slot_text = format!("{decoy}");
        assert!(
            verdict.diagnostics.iter().any(|d| d.contains(&slot_text)),
            "diagnostics identify the corrupted slot: {:?}",
            verdict.diagnostics
        );
        // Fault mode ran on the clone only.
        assert_eq!(image.peek_word(decoy).unwrap(), src.raw());
    }

    #[test]
    fn reachability_fails_while_a_stale_pointer_survives() {
        let (mut state, mut image, area) = with_area(8);
        let path = initial_file_name(0);
        let fd = open(&mut state, &mut image, 1, &path);
        let src = state.dentry_of(&path).unwrap();
        let engine = MigrationEngine::standard();
        engine.migrate_dentry(&mut state, &mut image, src, area.start).unwrap();

        // Manufacture a stale reference: point the File back at the old
        // address and observe the checker catch it.
        let fdt = state.fdt_of(1).unwrap();
        let file_addr = image
            .peek_word(GuestAddress(fdt.raw() + fd as u64 * 8))
            .unwrap();
        engine.verify_reachability(&state, &image, &[src]).unwrap();
        image
            .poke_word(GuestAddress(file_addr), src.raw())
            .unwrap();
        let err = engine.verify_reachability(&state, &image, &[src]).unwrap_err();
        assert!(matches!(err, SimError::Invariant(_)));
    }
}
