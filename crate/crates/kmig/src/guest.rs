//! Synthetic guest OS: object graph construction and syscall execution.
//!
//! The builder lays a small kernel object graph into a [`MemoryImage`]:
//! a bucketed dentry hash cache, per-process task/files/fdt chains, inodes
//! and open File objects. Syscalls then touch those objects through
//! guest-context accesses only, so every page the real kernel would dirty
//! is visible to the trap machinery. Hypervisor-side bookkeeping (the
//! ground-truth indexes used by verification) never touches the image in
//! guest context.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::memory::{AccessContext, GuestAddress, MemoryImage, Pid, PAGE_SIZE};
use crate::profile::{
    dentry, fdt, file, files_struct, inode, name_buffer, task, ObjectKind, ObjectRegistry,
};

/// Fixed layout of the synthetic guest physical space. Arenas are sized
/// from the build spec; the constants below are their origins.
pub mod layout {
    /// First byte of the syscall entry instruction.
    pub const SYSCALL_ENTRY: u64 = 0x1000;
    /// First byte of the syscall exit instruction.
    pub const SYSCALL_EXIT: u64 = 0x1008;
    /// Marker byte stored at both syscall code addresses.
    pub const SYSCALL_OPCODE: u8 = 0x0F;
    /// 64 dentry-shaped hash bucket sentinels, 128 bytes apart.
    pub const BUCKETS: u64 = 0x2000;
    pub const BUCKET_COUNT: u64 = 64;
    /// Dentry-shaped LRU list sentinel.
    pub const LRU_SENTINEL: u64 = 0x4000;
    /// The root directory dentry.
    pub const ROOT_DENTRY: u64 = 0x4080;
    pub const TASK_ARENA: u64 = 0x5000;
    pub const FILES_ARENA: u64 = 0x6000;
    pub const FDT_ARENA: u64 = 0x8000;
    pub const INODE_ARENA: u64 = 0x10000;
    pub const FILE_ARENA: u64 = 0x40000;
    /// Open-instance File object capacity.
    pub const FILE_SLOTS: u64 = 4096;
    pub const DENTRY_ARENA: u64 = 0x100000;
    /// Scratch span guaranteed untouched by the builder; tests plant
    /// decoys here.
    pub const SCRATCH: u64 = 0xB00000;
    pub const SCRATCH_LEN: u64 = 0x10000;
}

/// Build parameters for a synthetic guest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestSpec {
    pub num_files: u32,
    #[serde(default = "default_processes")]
    pub num_processes: u32,
    #[serde(default = "default_interleave")]
    pub interleave: bool,
    #[serde(default)]
    pub seed: u64,
    /// Run LRU reclamation every this many syscalls in workloads; 0
    /// disables periodic reclamation.
    #[serde(default = "default_reclaim_period")]
    pub reclaim_period: u32,
    #[serde(default = "default_image_pages")]
    pub image_pages: u32,
    /// Extra dentry/inode arena slots beyond `num_files`, for files
    /// created at run time.
    #[serde(default = "default_churn_headroom")]
    pub churn_headroom: u32,
}

fn default_processes() -> u32 {
    2
}

fn default_interleave() -> bool {
    true
}

fn default_reclaim_period() -> u32 {
    64
}

fn default_image_pages() -> u32 {
    4096
}

fn default_churn_headroom() -> u32 {
    64
}

impl Default for GuestSpec {
    fn default() -> Self {
        Self {
            num_files: 400,
            num_processes: default_processes(),
            interleave: default_interleave(),
            seed: 0,
            reclaim_period: default_reclaim_period(),
            image_pages: default_image_pages(),
            churn_headroom: default_churn_headroom(),
        }
    }
}

/// A guest system call. Paths are plain strings at this level; the
/// injector's register encoding interns them to scalar ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyscallRequest {
    Open { path: String },
    Read { fd: u32, len: u64 },
    Write { fd: u32, len: u64 },
    Close { fd: u32 },
    Mmap { addr: u64, len: u64 },
    Munmap { addr: u64, len: u64 },
}

impl SyscallRequest {
    /// The syscall number used by the register-level encoding.
    pub fn number(&self) -> u64 {
        match self {
            SyscallRequest::Read { .. } => 0,
            SyscallRequest::Write { .. } => 1,
            SyscallRequest::Open { .. } => 2,
            SyscallRequest::Close { .. } => 3,
            SyscallRequest::Mmap { .. } => 9,
            SyscallRequest::Munmap { .. } => 11,
        }
    }
}

/// Guest-visible failure statuses. These are ordinary results, not
/// simulator errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyscallError {
    BadFd,
    TooManyOpenFiles,
    NoSpace,
    BadAddress,
    Overlap,
    NameTooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyscallResult {
    Fd(u32),
    Bytes(u64),
    Addr(GuestAddress),
    Done,
    Failed(SyscallError),
}

/// What [`GuestState::exec_syscall`] produced: either the syscall ran to
/// completion, or the armed entry breakpoint fired first and control is
/// with the injector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyscallOutcome {
    Completed(SyscallResult),
    EntryTrapped,
}

/// One named path in the synthetic filesystem.
#[derive(Debug, Clone, PartialEq, Eq)]
struct PathEntry {
    ino: u64,
    inode_addr: u64,
    /// Cached dentry, if one currently exists.
    dentry: Option<u64>,
}

/// The simulated OS state. All maps here are hypervisor-side ground
/// truth; the authoritative object bytes live in the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestState {
    spec: GuestSpec,
    processes: BTreeMap<Pid, u64>,
    /// FilesStruct address per pid.
    files_structs: BTreeMap<Pid, u64>,
    /// Fdt address per pid; updated by fdt migration.
    fdts: BTreeMap<Pid, u64>,
    bucket_addrs: Vec<u64>,
    /// Live cached dentries (sentinels and root excluded).
    cache_members: BTreeSet<u64>,
    /// Dentries currently linked on the LRU list.
    lru_members: BTreeSet<u64>,
    /// Registered File objects (open instances, stdio included).
    open_files: BTreeSet<u64>,
    /// path -> inode/dentry bookkeeping.
    fs: BTreeMap<String, PathEntry>,
    /// dentry address -> path, for name verification.
    path_of_dentry: BTreeMap<u64, String>,
    /// Object extents: base -> (kind, size). Includes LRU-parked objects
    /// until they are reclaimed.
    object_index: BTreeMap<u64, (ObjectKind, u64)>,
    /// Spans reserved by the builder; guest mmap may not overlap them.
    arena_guard: Vec<(u64, u64)>,
    /// Interned path table for the register-level syscall encoding.
    path_table: Vec<String>,
    path_ids: BTreeMap<String, u64>,
    dentry_free: BTreeSet<u64>,
    dentry_next_slot: u32,
    dentry_capacity: u32,
    inode_next_slot: u32,
    inode_capacity: u32,
    file_free: BTreeSet<u64>,
    file_next_slot: u32,
    next_ino: u64,
    /// Set by the injector while entry/exit breakpoints are written.
    pub breakpoints_armed: bool,
    syscalls_executed: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the path bytes, reduced to a bucket index.
pub fn bucket_of(path: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in path.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h % layout::BUCKET_COUNT
}

/// Name of the i-th initial file.
pub fn initial_file_name(i: u32) -> String {
    format!("f_{i:04}.txt")
}

/// Builds a deterministic guest per `spec`. Same spec, same bytes.
pub fn build_guest(spec: &GuestSpec) -> Result<(GuestState, MemoryImage)> {
    if spec.num_files == 0 {
        return Err(SimError::Config("num_files must be at least 1".into()));
    }
    if spec.num_processes == 0 {
        return Err(SimError::Config("num_processes must be at least 1".into()));
    }
    let mut image = MemoryImage::new(spec.image_pages);
    let mut state = GuestState::empty(spec.clone());
    state.check_capacity(image.size())?;

    let hv = AccessContext::Hypervisor;
    image.write_bytes(hv, GuestAddress(layout::SYSCALL_ENTRY), &[layout::SYSCALL_OPCODE])?;
    image.write_bytes(hv, GuestAddress(layout::SYSCALL_EXIT), &[layout::SYSCALL_OPCODE])?;

    // Bucket sentinels: empty circular chains.
    for i in 0..layout::BUCKET_COUNT {
        let addr = layout::BUCKETS + i * dentry::SIZE;
        image.poke_word(GuestAddress(addr + dentry::D_HASH_NEXT), addr)?;
        image.poke_word(GuestAddress(addr + dentry::D_HASH_PREV), addr)?;
        state.bucket_addrs.push(addr);
        state.object_index.insert(addr, (ObjectKind::Dentry, dentry::SIZE));
    }

    // LRU sentinel: empty circular list.
    let lru = layout::LRU_SENTINEL;
    image.poke_word(GuestAddress(lru + dentry::D_LRU_NEXT), lru)?;
    image.poke_word(GuestAddress(lru + dentry::D_LRU_PREV), lru)?;
    state.object_index.insert(lru, (ObjectKind::Dentry, dentry::SIZE));

    // Root dentry and its inode.
    let root = layout::ROOT_DENTRY;
    let root_inode = state.alloc_inode_slot()?;
    state.next_ino = 2;
    write_inode(&mut image, hv, root_inode, 1, root)?;
    state.object_index.insert(root_inode, (ObjectKind::Inode, inode::SIZE));
    // Root is not on any hash chain or the LRU.
    let root_bytes = dentry_bytes(spec.num_processes as u64, 0, 0, root, root_inode, root, "/");
    image.poke_bytes(GuestAddress(root), &root_bytes)?;
    state.object_index.insert(root, (ObjectKind::Dentry, dentry::SIZE));

    // Per-process task -> files_struct -> fdt chain plus a shared stdio
    // File occupying fd slots 0..2.
    for p in 1..=spec.num_processes {
        let pid = p as Pid;
        let task_addr = layout::TASK_ARENA + (p as u64 - 1) * task::SIZE;
        let files_addr = layout::FILES_ARENA + (p as u64 - 1) * files_struct::SIZE;
        let fdt_addr = layout::FDT_ARENA + (p as u64 - 1) * fdt::SIZE;
        image.poke_word(GuestAddress(task_addr + task::PID), pid as u64)?;
        image.poke_word(GuestAddress(task_addr + task::FILES), files_addr)?;
        image.poke_word(GuestAddress(files_addr + files_struct::FDT), fdt_addr)?;

        let stdio = state.alloc_file_slot()?;
        write_file(&mut image, hv, stdio, root, root_inode, 3, 0)?;
        state.open_files.insert(stdio);
        state.object_index.insert(stdio, (ObjectKind::File, file::SIZE));
        for slot in 0..3u64 {
            image.poke_word(GuestAddress(fdt_addr + slot * fdt::SLOT_SIZE), stdio)?;
        }

        state.processes.insert(pid, task_addr);
        state.files_structs.insert(pid, files_addr);
        state.fdts.insert(pid, fdt_addr);
        state.object_index.insert(task_addr, (ObjectKind::Task, task::SIZE));
        state.object_index.insert(files_addr, (ObjectKind::FilesStruct, files_struct::SIZE));
        state.object_index.insert(fdt_addr, (ObjectKind::Fdt, fdt::SIZE));
    }

    // Initial files: arena slots are a seeded permutation of the file
    // indices, so monitored and unmonitored dentries share pages when
    // the stride interleaves them.
    let mut slots: Vec<u32> = (0..spec.num_files).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    slots.shuffle(&mut rng);
    for i in 0..spec.num_files {
        let name = initial_file_name(i);
        let ino = state.next_ino;
        state.next_ino += 1;
        let inode_addr = state.alloc_inode_slot()?;
        let dentry_addr = state.dentry_slot_addr(slots[i as usize]);
        write_inode(&mut image, hv, inode_addr, ino, dentry_addr)?;
        state.object_index.insert(inode_addr, (ObjectKind::Inode, inode::SIZE));
        state.insert_dentry(&mut image, hv, dentry_addr, &name, inode_addr, 0)?;
        state.fs.insert(
            name.clone(),
            PathEntry { ino, inode_addr, dentry: Some(dentry_addr) },
        );
        state.path_of_dentry.insert(dentry_addr, name);
    }
    state.dentry_next_slot = spec.num_files;

    Ok((state, image))
}

/// Serialized dentry image for bulk writes.
fn dentry_bytes(
    d_count: u64,
    hash_next: u64,
    hash_prev: u64,
    parent: u64,
    inode_addr: u64,
    self_addr: u64,
    name: &str,
) -> Vec<u8> {
    let mut bytes = vec![0u8; dentry::SIZE as usize];
    let mut put = |off: u64, v: u64| {
        bytes[off as usize..off as usize + 8].copy_from_slice(&v.to_le_bytes());
    };
    put(dentry::D_COUNT, d_count);
    put(dentry::D_HASH_NEXT, hash_next);
    put(dentry::D_HASH_PREV, hash_prev);
    put(dentry::D_PARENT, parent);
    put(dentry::D_INODE, inode_addr);
    put(dentry::D_NAME, self_addr + dentry::D_INAME);
    let name_bytes = name.as_bytes();
    bytes[dentry::D_INAME as usize..dentry::D_INAME as usize + name_bytes.len()]
        .copy_from_slice(name_bytes);
    bytes
}

fn write_inode(
    image: &mut MemoryImage,
    ctx: AccessContext,
    addr: u64,
    ino: u64,
    dentry_addr: u64,
) -> Result<()> {
    let mut bytes = vec![0u8; inode::SIZE as usize];
    bytes[inode::I_INO as usize..inode::I_INO as usize + 8].copy_from_slice(&ino.to_le_bytes());
    bytes[inode::I_COUNT as usize..inode::I_COUNT as usize + 8]
        .copy_from_slice(&1u64.to_le_bytes());
    bytes[inode::I_DENTRY as usize..inode::I_DENTRY as usize + 8]
        .copy_from_slice(&dentry_addr.to_le_bytes());
    image.write_bytes(ctx, GuestAddress(addr), &bytes)
}

fn write_file(
    image: &mut MemoryImage,
    ctx: AccessContext,
    addr: u64,
    dentry_addr: u64,
    inode_addr: u64,
    count: u64,
    pos: u64,
) -> Result<()> {
    let mut bytes = vec![0u8; file::SIZE as usize];
    let mut put = |off: u64, v: u64| {
        bytes[off as usize..off as usize + 8].copy_from_slice(&v.to_le_bytes());
    };
    put(file::F_DENTRY, dentry_addr);
    put(file::F_INODE, inode_addr);
    put(file::F_COUNT, count);
    put(file::F_POS, pos);
    image.write_bytes(ctx, GuestAddress(addr), &bytes)
}

impl GuestState {
    fn empty(spec: GuestSpec) -> Self {
        let dentry_capacity = spec.num_files + spec.churn_headroom;
        let inode_capacity = spec.num_files + spec.churn_headroom + 1;
        Self {
            spec,
            processes: BTreeMap::new(),
            files_structs: BTreeMap::new(),
            fdts: BTreeMap::new(),
            bucket_addrs: Vec::new(),
            cache_members: BTreeSet::new(),
            lru_members: BTreeSet::new(),
            open_files: BTreeSet::new(),
            fs: BTreeMap::new(),
            path_of_dentry: BTreeMap::new(),
            object_index: BTreeMap::new(),
            arena_guard: Vec::new(),
            path_table: Vec::new(),
            path_ids: BTreeMap::new(),
            dentry_free: BTreeSet::new(),
            dentry_next_slot: 0,
            dentry_capacity,
            inode_next_slot: 0,
            inode_capacity,
            file_free: BTreeSet::new(),
            file_next_slot: 0,
            next_ino: 1,
            breakpoints_armed: false,
            syscalls_executed: 0,
        }
    }

    pub fn spec(&self) -> &GuestSpec {
        &self.spec
    }

    pub fn syscall_entry_addr(&self) -> GuestAddress {
        GuestAddress(layout::SYSCALL_ENTRY)
    }

    pub fn syscall_exit_addr(&self) -> GuestAddress {
        GuestAddress(layout::SYSCALL_EXIT)
    }

    pub fn lru_sentinel(&self) -> GuestAddress {
        GuestAddress(layout::LRU_SENTINEL)
    }

    pub fn root_dentry(&self) -> GuestAddress {
        GuestAddress(layout::ROOT_DENTRY)
    }

    pub fn pids(&self) -> Vec<Pid> {
        self.processes.keys().copied().collect()
    }

    pub fn task_of(&self, pid: Pid) -> Option<GuestAddress> {
        self.processes.get(&pid).map(|&a| GuestAddress(a))
    }

    pub fn fdt_of(&self, pid: Pid) -> Option<GuestAddress> {
        self.fdts.get(&pid).map(|&a| GuestAddress(a))
    }

    pub fn files_struct_of(&self, pid: Pid) -> Option<GuestAddress> {
        self.files_structs.get(&pid).map(|&a| GuestAddress(a))
    }

    /// Ground-truth dentry of a path, if cached.
    pub fn dentry_of(&self, path: &str) -> Option<GuestAddress> {
        self.fs.get(path).and_then(|e| e.dentry).map(GuestAddress)
    }

    pub fn path_of(&self, dentry_addr: GuestAddress) -> Option<&str> {
        self.path_of_dentry.get(&dentry_addr.raw()).map(|s| s.as_str())
    }

    pub fn cache_member_count(&self) -> usize {
        self.cache_members.len()
    }

    pub fn cache_members(&self) -> impl Iterator<Item = GuestAddress> + '_ {
        self.cache_members.iter().map(|&a| GuestAddress(a))
    }

    pub fn lru_len(&self) -> usize {
        self.lru_members.len()
    }

    pub fn open_file_count(&self) -> usize {
        self.open_files.len()
    }

    pub fn is_cache_member(&self, addr: GuestAddress) -> bool {
        self.cache_members.contains(&addr.raw())
    }

    pub fn is_lru_member(&self, addr: GuestAddress) -> bool {
        self.lru_members.contains(&addr.raw())
    }

    pub fn syscalls_executed(&self) -> u64 {
        self.syscalls_executed
    }

    /// Every indexed object (live and LRU-parked) with its kind.
    pub fn objects(&self) -> impl Iterator<Item = (GuestAddress, ObjectKind)> + '_ {
        self.object_index.iter().map(|(&base, &(kind, _))| (GuestAddress(base), kind))
    }

    /// Ground-truth path table: (path, cached dentry if any).
    pub fn ground_truth_paths(&self) -> impl Iterator<Item = (&str, Option<GuestAddress>)> + '_ {
        self.fs
            .iter()
            .map(|(path, entry)| (path.as_str(), entry.dentry.map(GuestAddress)))
    }

    /// Sentinel address of the hash bucket a path hashes into.
    pub fn bucket_sentinel_of(&self, path: &str) -> GuestAddress {
        GuestAddress(self.bucket_addrs[bucket_of(path) as usize])
    }

    /// End of the highest builder arena; guest mmap and the protected
    /// area must start at or above this.
    pub fn arena_end(&self) -> GuestAddress {
        GuestAddress(
            layout::DENTRY_ARENA + self.dentry_capacity as u64 * self.dentry_stride(),
        )
    }

    fn dentry_stride(&self) -> u64 {
        if self.spec.interleave {
            dentry::SIZE
        } else {
            PAGE_SIZE
        }
    }

    fn dentry_slot_addr(&self, slot: u32) -> u64 {
        layout::DENTRY_ARENA + slot as u64 * self.dentry_stride()
    }

    fn check_capacity(&mut self, image_size: u64) -> Result<()> {
        let needed = self.arena_end().raw();
        if needed > image_size {
            return Err(SimError::Capacity { needed, available: image_size });
        }
        let file_arena_len = layout::FILE_SLOTS * file::SIZE;
        let inode_arena_len = self.inode_capacity as u64 * inode::SIZE;
        self.arena_guard = vec![
            (0, layout::BUCKETS),
            (layout::BUCKETS, layout::ROOT_DENTRY + dentry::SIZE - layout::BUCKETS),
            (layout::TASK_ARENA, layout::FDT_ARENA - layout::TASK_ARENA),
            (layout::FDT_ARENA, self.spec.num_processes as u64 * fdt::SIZE),
            (layout::INODE_ARENA, inode_arena_len),
            (layout::FILE_ARENA, file_arena_len),
            (layout::SCRATCH, layout::SCRATCH_LEN),
            (
                layout::DENTRY_ARENA,
                self.dentry_capacity as u64 * self.dentry_stride(),
            ),
        ];
        Ok(())
    }

    fn alloc_inode_slot(&mut self) -> Result<u64> {
        if self.inode_next_slot >= self.inode_capacity {
            return Err(SimError::Capacity {
                needed: (self.inode_next_slot + 1) as u64 * inode::SIZE,
                available: self.inode_capacity as u64 * inode::SIZE,
            });
        }
        let addr = layout::INODE_ARENA + self.inode_next_slot as u64 * inode::SIZE;
        self.inode_next_slot += 1;
        Ok(addr)
    }

    fn alloc_file_slot(&mut self) -> Result<u64> {
        if let Some(&addr) = self.file_free.iter().next() {
            self.file_free.remove(&addr);
            return Ok(addr);
        }
        if self.file_next_slot as u64 >= layout::FILE_SLOTS {
            return Err(SimError::Capacity {
                needed: (self.file_next_slot as u64 + 1) * file::SIZE,
                available: layout::FILE_SLOTS * file::SIZE,
            });
        }
        let addr = layout::FILE_ARENA + self.file_next_slot as u64 * file::SIZE;
        self.file_next_slot += 1;
        Ok(addr)
    }

    fn alloc_dentry_slot(&mut self) -> Result<u64> {
        if let Some(&addr) = self.dentry_free.iter().next() {
            self.dentry_free.remove(&addr);
            return Ok(addr);
        }
        if self.dentry_next_slot >= self.dentry_capacity {
            return Err(SimError::Capacity {
                needed: (self.dentry_next_slot + 1) as u64 * dentry::SIZE,
                available: self.dentry_capacity as u64 * dentry::SIZE,
            });
        }
        let addr = self.dentry_slot_addr(self.dentry_next_slot);
        self.dentry_next_slot += 1;
        Ok(addr)
    }

    /// Interns a path for the scalar syscall-argument encoding.
    pub fn intern_path(&mut self, path: &str) -> u64 {
        if let Some(&id) = self.path_ids.get(path) {
            return id;
        }
        let id = self.path_table.len() as u64;
        self.path_table.push(path.to_string());
        self.path_ids.insert(path.to_string(), id);
        id
    }

    pub fn path_for_id(&self, id: u64) -> Option<&str> {
        self.path_table.get(id as usize).map(|s| s.as_str())
    }

    /// Writes a fresh dentry and links it at the head of its bucket
    /// chain, with all object touches in the given context.
    fn insert_dentry(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        addr: u64,
        name: &str,
        inode_addr: u64,
        d_count: u64,
    ) -> Result<()> {
        let sentinel = self.bucket_addrs[bucket_of(name) as usize];
        let old_first = image.peek_word(GuestAddress(sentinel + dentry::D_HASH_NEXT))?;
        let bytes = dentry_bytes(
            d_count,
            old_first,
            sentinel,
            layout::ROOT_DENTRY,
            inode_addr,
            addr,
            name,
        );
        image.write_bytes(ctx, GuestAddress(addr), &bytes)?;
        image.write_word(ctx, GuestAddress(sentinel + dentry::D_HASH_NEXT), addr)?;
        image.write_word(ctx, GuestAddress(old_first + dentry::D_HASH_PREV), addr)?;
        self.cache_members.insert(addr);
        self.object_index.insert(addr, (ObjectKind::Dentry, dentry::SIZE));
        Ok(())
    }

    /// Executes a syscall, honoring an armed entry breakpoint: if the
    /// injector has replaced the entry instruction, the call yields
    /// before touching any object.
    pub fn exec_syscall(
        &mut self,
        image: &mut MemoryImage,
        pid: Pid,
        req: &SyscallRequest,
    ) -> Result<SyscallOutcome> {
        if !self.processes.contains_key(&pid) {
            return Err(SimError::UnknownPid(pid));
        }
        if self.breakpoints_armed
            && image.peek_bytes(self.syscall_entry_addr(), 1)?[0] == 0xCC
        {
            return Ok(SyscallOutcome::EntryTrapped);
        }
        Ok(SyscallOutcome::Completed(self.run_syscall(image, pid, req)?))
    }

    /// Executes the syscall body unconditionally (the injector calls this
    /// once it has control; plain callers use `exec_syscall`).
    pub fn run_syscall(
        &mut self,
        image: &mut MemoryImage,
        pid: Pid,
        req: &SyscallRequest,
    ) -> Result<SyscallResult> {
        if !self.processes.contains_key(&pid) {
            return Err(SimError::UnknownPid(pid));
        }
        self.syscalls_executed += 1;
        let ctx = AccessContext::Guest(pid);
        match req {
            SyscallRequest::Open { path } => self.sys_open(image, ctx, pid, path),
            SyscallRequest::Read { fd, len } => self.sys_read_write(image, ctx, pid, *fd, *len, false),
            SyscallRequest::Write { fd, len } => self.sys_read_write(image, ctx, pid, *fd, *len, true),
            SyscallRequest::Close { fd } => self.sys_close(image, ctx, pid, *fd),
            SyscallRequest::Mmap { addr, len } => self.sys_mmap(image, *addr, *len),
            SyscallRequest::Munmap { addr, len } => self.sys_munmap(image, *addr, *len),
        }
    }

    fn sys_open(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        pid: Pid,
        path: &str,
    ) -> Result<SyscallResult> {
        if path.len() >= name_buffer::SIZE as usize {
            return Ok(SyscallResult::Failed(SyscallError::NameTooLong));
        }
        // Hash-chain walk: compare each member's inline name with the
        // request, reading through guest context so every touched dentry
        // page is visible to the monitor.
        let sentinel = self.bucket_addrs[bucket_of(path) as usize];
        let mut target = vec![0u8; dentry::INAME_LEN as usize];
        target[..path.len()].copy_from_slice(path.as_bytes());
        let mut cur = image.read_word(ctx, GuestAddress(sentinel + dentry::D_HASH_NEXT))?;
        let mut found = None;
        while cur != sentinel {
            let name_ptr = image.read_word(ctx, GuestAddress(cur + dentry::D_NAME))?;
            let name = image.read_bytes(ctx, GuestAddress(name_ptr), dentry::INAME_LEN)?;
            if name == target {
                found = Some(cur);
                break;
            }
            cur = image.read_word(ctx, GuestAddress(cur + dentry::D_HASH_NEXT))?;
        }

        let (dentry_addr, inode_addr) = match found {
            Some(addr) => {
                let count = image.read_word(ctx, GuestAddress(addr + dentry::D_COUNT))?;
                image.write_word(ctx, GuestAddress(addr + dentry::D_COUNT), count + 1)?;
                let entry = &self.fs[self.path_of_dentry[&addr].as_str()];
                (addr, entry.inode_addr)
            }
            None => {
                // Cache miss: create the dentry (and the inode if the
                // path is new to the filesystem).
                let dentry_addr = match self.alloc_dentry_slot() {
                    Ok(a) => a,
                    Err(_) => return Ok(SyscallResult::Failed(SyscallError::NoSpace)),
                };
                let (ino, inode_addr, fresh_inode) = match self.fs.get(path) {
                    Some(entry) => (entry.ino, entry.inode_addr, false),
                    None => {
                        let inode_addr = match self.alloc_inode_slot() {
                            Ok(a) => a,
                            Err(_) => {
                                self.dentry_free.insert(dentry_addr);
                                return Ok(SyscallResult::Failed(SyscallError::NoSpace));
                            }
                        };
                        let ino = self.next_ino;
                        self.next_ino += 1;
                        (ino, inode_addr, true)
                    }
                };
                self.insert_dentry(image, ctx, dentry_addr, path, inode_addr, 1)?;
                if fresh_inode {
                    write_inode(image, ctx, inode_addr, ino, dentry_addr)?;
                    self.object_index.insert(inode_addr, (ObjectKind::Inode, inode::SIZE));
                } else {
                    image.write_word(ctx, GuestAddress(inode_addr + inode::I_DENTRY), dentry_addr)?;
                }
                self.fs.insert(
                    path.to_string(),
                    PathEntry { ino, inode_addr, dentry: Some(dentry_addr) },
                );
                self.path_of_dentry.insert(dentry_addr, path.to_string());
                (dentry_addr, inode_addr)
            }
        };

        // New open instance.
        let file_addr = match self.alloc_file_slot() {
            Ok(a) => a,
            Err(_) => return Ok(SyscallResult::Failed(SyscallError::NoSpace)),
        };
        write_file(image, ctx, file_addr, dentry_addr, inode_addr, 1, 0)?;
        self.open_files.insert(file_addr);
        self.object_index.insert(file_addr, (ObjectKind::File, file::SIZE));

        // Install at the lowest free fd slot.
        let task_addr = self.processes[&pid];
        let files_addr = image.read_word(ctx, GuestAddress(task_addr + task::FILES))?;
        let fdt_addr = image.read_word(ctx, GuestAddress(files_addr + files_struct::FDT))?;
        let mut fd = None;
        for slot in 0..fdt::MAX_FDS {
            let entry = image.read_word(ctx, GuestAddress(fdt_addr + slot * fdt::SLOT_SIZE))?;
            if entry == 0 {
                fd = Some(slot as u32);
                image.write_word(ctx, GuestAddress(fdt_addr + slot * fdt::SLOT_SIZE), file_addr)?;
                break;
            }
        }
        match fd {
            Some(fd) => Ok(SyscallResult::Fd(fd)),
            None => {
                // No slot: drop the File we just created and, if this
                // open created the dentry, undo its refcount.
                self.release_file(image, ctx, file_addr, dentry_addr)?;
                Ok(SyscallResult::Failed(SyscallError::TooManyOpenFiles))
            }
        }
    }

    /// Resolves an fd to its File object through guest-context reads of
    /// the task / files_struct / fdt chain.
    fn resolve_fd(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        pid: Pid,
        fd: u32,
    ) -> Result<std::result::Result<(u64, u64), SyscallError>> {
        let task_addr = self.processes[&pid];
        let files_addr = image.read_word(ctx, GuestAddress(task_addr + task::FILES))?;
        let fdt_addr = image.read_word(ctx, GuestAddress(files_addr + files_struct::FDT))?;
        if fd as u64 >= fdt::MAX_FDS {
            return Ok(Err(SyscallError::BadFd));
        }
        let slot_addr = fdt_addr + fd as u64 * fdt::SLOT_SIZE;
        let file_addr = image.read_word(ctx, GuestAddress(slot_addr))?;
        if file_addr == 0 {
            return Ok(Err(SyscallError::BadFd));
        }
        Ok(Ok((file_addr, slot_addr)))
    }

    /// READ and WRITE share one object walk: file -> dentry refcount ->
    /// inode refcount -> file position, ending in an f_pos update.
    fn sys_read_write(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        pid: Pid,
        fd: u32,
        len: u64,
        _is_write: bool,
    ) -> Result<SyscallResult> {
        let (file_addr, _) = match self.resolve_fd(image, ctx, pid, fd)? {
            Ok(pair) => pair,
            Err(status) => return Ok(SyscallResult::Failed(status)),
        };
        let dentry_addr = image.read_word(ctx, GuestAddress(file_addr + file::F_DENTRY))?;
        let _d_count = image.read_word(ctx, GuestAddress(dentry_addr + dentry::D_COUNT))?;
        let inode_addr = image.read_word(ctx, GuestAddress(file_addr + file::F_INODE))?;
        let _i_count = image.read_word(ctx, GuestAddress(inode_addr + inode::I_COUNT))?;
        let _f_count = image.read_word(ctx, GuestAddress(file_addr + file::F_COUNT))?;
        let pos = image.read_word(ctx, GuestAddress(file_addr + file::F_POS))?;
        image.write_word(ctx, GuestAddress(file_addr + file::F_POS), pos.wrapping_add(len))?;
        Ok(SyscallResult::Bytes(len))
    }

    fn sys_close(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        pid: Pid,
        fd: u32,
    ) -> Result<SyscallResult> {
        let (file_addr, slot_addr) = match self.resolve_fd(image, ctx, pid, fd)? {
            Ok(pair) => pair,
            Err(status) => return Ok(SyscallResult::Failed(status)),
        };
        image.write_word(ctx, GuestAddress(slot_addr), 0)?;
        let f_count = image.read_word(ctx, GuestAddress(file_addr + file::F_COUNT))?;
        image.write_word(ctx, GuestAddress(file_addr + file::F_COUNT), f_count - 1)?;
        if f_count - 1 == 0 {
            let dentry_addr = image.read_word(ctx, GuestAddress(file_addr + file::F_DENTRY))?;
            self.release_file(image, ctx, file_addr, dentry_addr)?;
        }
        Ok(SyscallResult::Done)
    }

    /// Drops a File object: decrements the dentry refcount, zeroes the
    /// File bytes and returns the slab slot.
    fn release_file(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        file_addr: u64,
        dentry_addr: u64,
    ) -> Result<()> {
        let d_count = image.read_word(ctx, GuestAddress(dentry_addr + dentry::D_COUNT))?;
        image.write_word(
            ctx,
            GuestAddress(dentry_addr + dentry::D_COUNT),
            d_count.saturating_sub(1),
        )?;
        image.write_bytes(ctx, GuestAddress(file_addr), &vec![0u8; file::SIZE as usize])?;
        self.open_files.remove(&file_addr);
        self.object_index.remove(&file_addr);
        self.file_free.insert(file_addr);
        Ok(())
    }

    fn sys_mmap(&mut self, image: &mut MemoryImage, addr: u64, len: u64) -> Result<SyscallResult> {
        if len == 0 || !addr.is_multiple_of(PAGE_SIZE) {
            return Ok(SyscallResult::Failed(SyscallError::BadAddress));
        }
        let page_len = len.div_ceil(PAGE_SIZE) * PAGE_SIZE;
        if addr.checked_add(page_len).is_none_or(|end| end > image.size()) {
            return Ok(SyscallResult::Failed(SyscallError::BadAddress));
        }
        let guard_hit = self
            .arena_guard
            .iter()
            .any(|&(start, glen)| addr < start + glen && start < addr + page_len);
        if guard_hit || image.overlaps_region(addr, page_len) {
            return Ok(SyscallResult::Failed(SyscallError::Overlap));
        }
        image.allocate_region(GuestAddress(addr), len)?;
        Ok(SyscallResult::Addr(GuestAddress(addr)))
    }

    fn sys_munmap(&mut self, image: &mut MemoryImage, addr: u64, len: u64) -> Result<SyscallResult> {
        match image.release_region(GuestAddress(addr), len) {
            Ok(()) => Ok(SyscallResult::Done),
            Err(SimError::RegionNotFound { .. }) => {
                Ok(SyscallResult::Failed(SyscallError::BadAddress))
            }
            Err(e) => Err(e),
        }
    }

    /// Parks a dentry on the LRU list tail (guest or hypervisor context
    /// per caller). The object stays in the index until reclaimed.
    pub fn park_on_lru(
        &mut self,
        image: &mut MemoryImage,
        ctx: AccessContext,
        addr: GuestAddress,
    ) -> Result<()> {
        let addr = addr.raw();
        let sentinel = layout::LRU_SENTINEL;
        let tail = image.peek_word(GuestAddress(sentinel + dentry::D_LRU_PREV))?;
        image.write_word(ctx, GuestAddress(addr + dentry::D_LRU_NEXT), sentinel)?;
        image.write_word(ctx, GuestAddress(addr + dentry::D_LRU_PREV), tail)?;
        image.write_word(ctx, GuestAddress(tail + dentry::D_LRU_NEXT), addr)?;
        image.write_word(ctx, GuestAddress(sentinel + dentry::D_LRU_PREV), addr)?;
        self.lru_members.insert(addr);
        Ok(())
    }

    /// Walks the LRU list as kernel housekeeping (guest context, pid 0)
    /// and frees every entry whose refcount is zero: unlink from LRU,
    /// unlink from its hash chain if still a cache member, zero the
    /// object. Returns the number freed.
    pub fn reclaim_lru(&mut self, image: &mut MemoryImage) -> Result<u32> {
        let ctx = AccessContext::Guest(0);
        let sentinel = layout::LRU_SENTINEL;
        let mut freed = 0;
        let mut cur = image.read_word(ctx, GuestAddress(sentinel + dentry::D_LRU_NEXT))?;
        while cur != sentinel {
            let next = image.read_word(ctx, GuestAddress(cur + dentry::D_LRU_NEXT))?;
            let d_count = image.read_word(ctx, GuestAddress(cur + dentry::D_COUNT))?;
            if d_count == 0 {
                let prev = image.read_word(ctx, GuestAddress(cur + dentry::D_LRU_PREV))?;
                image.write_word(ctx, GuestAddress(prev + dentry::D_LRU_NEXT), next)?;
                image.write_word(ctx, GuestAddress(next + dentry::D_LRU_PREV), prev)?;
                if self.cache_members.contains(&cur) {
                    let hnext = image.read_word(ctx, GuestAddress(cur + dentry::D_HASH_NEXT))?;
                    let hprev = image.read_word(ctx, GuestAddress(cur + dentry::D_HASH_PREV))?;
                    image.write_word(ctx, GuestAddress(hprev + dentry::D_HASH_NEXT), hnext)?;
                    image.write_word(ctx, GuestAddress(hnext + dentry::D_HASH_PREV), hprev)?;
                    self.cache_members.remove(&cur);
                }
                // A still-pointing inode back-reference is cleared so the
                // slot can be reused without a dangling link.
                let d_inode = image.read_word(ctx, GuestAddress(cur + dentry::D_INODE))?;
                if d_inode != 0 {
                    let i_dentry = image.read_word(ctx, GuestAddress(d_inode + inode::I_DENTRY))?;
                    if i_dentry == cur {
                        image.write_word(ctx, GuestAddress(d_inode + inode::I_DENTRY), 0)?;
                    }
                }
                if let Some(path) = self.path_of_dentry.remove(&cur) {
                    if let Some(entry) = self.fs.get_mut(&path) {
                        if entry.dentry == Some(cur) {
                            entry.dentry = None;
                        }
                    }
                }
                image.write_bytes(ctx, GuestAddress(cur), &vec![0u8; dentry::SIZE as usize])?;
                self.lru_members.remove(&cur);
                self.object_index.remove(&cur);
                if cur >= layout::DENTRY_ARENA {
                    self.dentry_free.insert(cur);
                }
                freed += 1;
            }
            cur = next;
        }
        Ok(freed)
    }

    /// Migration bookkeeping: the dentry at `src` now lives at `dest`.
    /// Keeps the parked `src` in the object index for LRU verification.
    pub fn relocate_dentry(&mut self, src: GuestAddress, dest: GuestAddress) {
        let (src, dest) = (src.raw(), dest.raw());
        self.cache_members.remove(&src);
        self.cache_members.insert(dest);
        self.object_index.insert(dest, (ObjectKind::Dentry, dentry::SIZE));
        if let Some(path) = self.path_of_dentry.remove(&src) {
            if let Some(entry) = self.fs.get_mut(&path) {
                entry.dentry = Some(dest);
            }
            self.path_of_dentry.insert(dest, path);
        }
    }

    /// Migration bookkeeping for an fdt move; the old extent is zeroed by
    /// the engine and leaves the index entirely.
    pub fn relocate_fdt(&mut self, pid: Pid, dest: GuestAddress) {
        if let Some(old) = self.fdts.insert(pid, dest.raw()) {
            self.object_index.remove(&old);
        }
        self.object_index.insert(dest.raw(), (ObjectKind::Fdt, fdt::SIZE));
    }

    /// True when no indexed object overlaps [start, start+len). Parked
    /// LRU entries count as occupied until reclaimed.
    pub fn extent_is_free(&self, start: u64, len: u64) -> bool {
        let probe_from = start.saturating_sub(fdt::SIZE);
        !self
            .object_index
            .range(probe_from..start + len)
            .any(|(&base, &(_, size))| base + size > start && base < start + len)
    }

    /// Full structural audit of the object graph: chain consistency,
    /// cross-links, name/ground-truth agreement and the refcount scan.
    pub fn verify_invariants(&self, image: &MemoryImage) -> Result<()> {
        let word = |addr: u64| image.peek_word(GuestAddress(addr));
        let fail = |msg: String| Err(SimError::Invariant(msg));

        // Hash chains: every bucket walk returns to its sentinel, visits
        // only registered members, and links are pairwise consistent.
        let mut seen = BTreeSet::new();
        for &sentinel in &self.bucket_addrs {
            let mut cur = word(sentinel + dentry::D_HASH_NEXT)?;
            let mut hops = 0usize;
            while cur != sentinel {
                if hops > self.cache_members.len() + 1 {
                    return fail(format!("hash chain of bucket {sentinel:#x} does not close"));
                }
                if !self.cache_members.contains(&cur) {
                    return fail(format!("chain node {cur:#x} is not a cache member"));
                }
                let next = word(cur + dentry::D_HASH_NEXT)?;
                let prev_of_next = if next == sentinel {
                    word(sentinel + dentry::D_HASH_PREV)?
                } else {
                    word(next + dentry::D_HASH_PREV)?
                };
                if prev_of_next != cur {
                    return fail(format!("broken back-link after {cur:#x}"));
                }
                seen.insert(cur);
                hops += 1;
                cur = next;
            }
        }
        if seen.len() != self.cache_members.len() {
            return fail(format!(
                "cache membership mismatch: chains hold {}, index holds {}",
                seen.len(),
                self.cache_members.len()
            ));
        }

        // Per-dentry cross-links and names.
        for &d in &self.cache_members {
            let d_inode = word(d + dentry::D_INODE)?;
            match self.object_index.get(&d_inode) {
                Some((ObjectKind::Inode, _)) => {}
                _ => return fail(format!("dentry {d:#x} d_inode {d_inode:#x} is not a live inode")),
            }
            let i_dentry = word(d_inode + inode::I_DENTRY)?;
            if i_dentry != d {
                return fail(format!("inode {d_inode:#x} i_dentry does not point back at {d:#x}"));
            }
            let d_name = word(d + dentry::D_NAME)?;
            if d_name != d + dentry::D_INAME {
                return fail(format!("dentry {d:#x} d_name is not self-referential"));
            }
            let path = match self.path_of_dentry.get(&d) {
                Some(p) => p,
                None => return fail(format!("dentry {d:#x} has no ground-truth path")),
            };
            let mut expect = vec![0u8; dentry::INAME_LEN as usize];
            expect[..path.len()].copy_from_slice(path.as_bytes());
            if image.peek_bytes(GuestAddress(d + dentry::D_INAME), dentry::INAME_LEN)? != &expect[..]
            {
                return fail(format!("dentry {d:#x} name bytes disagree with path {path:?}"));
            }
            let parent = word(d + dentry::D_PARENT)?;
            if parent != layout::ROOT_DENTRY {
                return fail(format!("dentry {d:#x} parent {parent:#x} is not the root"));
            }
        }

        // Refcount scan: d_count equals the number of live File objects
        // whose f_dentry points at the dentry.
        let mut refs: BTreeMap<u64, u64> = BTreeMap::new();
        for &f in &self.open_files {
            let f_dentry = word(f + file::F_DENTRY)?;
            *refs.entry(f_dentry).or_default() += 1;
        }
        for &d in self.cache_members.iter().chain([layout::ROOT_DENTRY].iter()) {
            let d_count = word(d + dentry::D_COUNT)?;
            let expected = refs.get(&d).copied().unwrap_or(0);
            if d_count != expected {
                return fail(format!(
                    "dentry {d:#x} d_count {d_count} but {expected} live file objects reference it"
                ));
            }
        }

        // LRU list consistency.
        let sentinel = layout::LRU_SENTINEL;
        let mut cur = word(sentinel + dentry::D_LRU_NEXT)?;
        let mut lru_seen = BTreeSet::new();
        while cur != sentinel {
            if lru_seen.len() > self.lru_members.len() {
                return fail("LRU list does not close".into());
            }
            if !self.lru_members.contains(&cur) {
                return fail(format!("LRU node {cur:#x} is not a recorded member"));
            }
            let next = word(cur + dentry::D_LRU_NEXT)?;
            let back = if next == sentinel {
                word(sentinel + dentry::D_LRU_PREV)?
            } else {
                word(next + dentry::D_LRU_PREV)?
            };
            if back != cur {
                return fail(format!("broken LRU back-link after {cur:#x}"));
            }
            lru_seen.insert(cur);
            cur = next;
        }
        if lru_seen.len() != self.lru_members.len() {
            return fail("LRU membership mismatch".into());
        }

        // Process chains: task -> files -> fdt, and every live fd slot
        // holds a registered File.
        for (&pid, &task_addr) in &self.processes {
            if word(task_addr + task::PID)? != pid as u64 {
                return fail(format!("task of pid {pid} has wrong pid field"));
            }
            let files_addr = word(task_addr + task::FILES)?;
            if self.files_structs.get(&pid) != Some(&files_addr) {
                return fail(format!("pid {pid} files pointer desynced"));
            }
            let fdt_addr = word(files_addr + files_struct::FDT)?;
            if self.fdts.get(&pid) != Some(&fdt_addr) {
                return fail(format!("pid {pid} fdt pointer desynced"));
            }
            for slot in 0..fdt::MAX_FDS {
                let entry = word(fdt_addr + slot * fdt::SLOT_SIZE)?;
                if entry != 0 && !self.open_files.contains(&entry) {
                    return fail(format!(
                        "pid {pid} fd {slot} holds {entry:#x}, not a live File"
                    ));
                }
            }
        }

        // Open File objects point at live dentries with matching inodes.
        for &f in &self.open_files {
            let f_dentry = word(f + file::F_DENTRY)?;
            let is_root = f_dentry == layout::ROOT_DENTRY;
            if !is_root && !self.cache_members.contains(&f_dentry) {
                return fail(format!("File {f:#x} f_dentry {f_dentry:#x} not a live dentry"));
            }
            let f_inode = word(f + file::F_INODE)?;
            if word(f_dentry + dentry::D_INODE)? != f_inode {
                return fail(format!("File {f:#x} inode link disagrees with its dentry"));
            }
        }
        Ok(())
    }
}

impl ObjectRegistry for GuestState {
    fn object_at(&self, addr: GuestAddress) -> Option<(ObjectKind, GuestAddress)> {
        self.object_index
            .range(..=addr.raw())
            .next_back()
            .filter(|(&base, &(_, size))| addr.raw() < base + size)
            .map(|(&base, &(kind, _))| (kind, GuestAddress(base)))
    }

    fn is_hash_chain_node(&self, addr: GuestAddress) -> bool {
        let a = addr.raw();
        self.cache_members.contains(&a)
            || ((layout::BUCKETS..layout::BUCKETS + layout::BUCKET_COUNT * dentry::SIZE).contains(&a)
                && (a - layout::BUCKETS).is_multiple_of(dentry::SIZE))
    }

    fn is_lru_chain_node(&self, addr: GuestAddress) -> bool {
        addr.raw() == layout::LRU_SENTINEL || self.lru_members.contains(&addr.raw())
    }

    fn is_live_files_struct(&self, addr: GuestAddress) -> bool {
        self.files_structs.values().any(|&a| a == addr.raw())
    }
}
