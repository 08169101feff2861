//! C interface to the monitoring/migration simulator.
//!
//! The surface follows the usual C-library conventions: an opaque session
//! handle, integer status codes, a thread-local error message retrieved
//! separately, and caller-supplied buffers filled via a two-call
//! (query-size, then fill) protocol. The generated header lands in
//! `include/kmig.h`.

use std::cell::RefCell;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use kmig::bench::{monitored_targets, sweep, ScenarioSpec, DEFAULT_KS, PROTECTED_AREA_PAGES};
use kmig::guest::{build_guest, GuestState, SyscallRequest, SyscallResult};
use kmig::injector::{RepeatDriver, SyscallInjector};
use kmig::memory::{MemoryImage, PAGE_SIZE};
use kmig::migration::{AreaSpan, MigrationEngine};
use kmig::monitor::{PageMonitor, Policy};
use kmig::{GuestAddress, SimError};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmigStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The specification or arguments were rejected.
    Config = 3,
    /// The simulation itself failed; see `kmig_last_error`.
    Runtime = 4,
    /// The output buffer is too small; the needed size was written.
    BufferTooSmall = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn status_for(err: &SimError) -> KmigStatus {
    match err {
        SimError::Config(_) | SimError::Json(_) | SimError::BadProfile(_) | SimError::Io(_) => {
            KmigStatus::Config
        }
        _ => KmigStatus::Runtime,
    }
}

fn fail(err: SimError) -> KmigStatus {
    let status = status_for(&err);
    set_error(err.to_string());
    status
}

/// One simulated guest plus the hypervisor-side machinery working on it.
pub struct KmigSim {
    spec: ScenarioSpec,
    state: GuestState,
    image: MemoryImage,
    engine: MigrationEngine,
    injector: SyscallInjector,
    monitor: PageMonitor,
    area: Option<AreaSpan>,
    migrated: Vec<GuestAddress>,
    migrated_from: Vec<GuestAddress>,
}

fn guarded<F: FnOnce() -> KmigStatus>(f: F) -> KmigStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic crossed the boundary");
            KmigStatus::Runtime
        }
    }
}

/// # Safety
/// `ptr` must be null or a pointer previously handed out by this library.
unsafe fn sim_mut<'a>(ptr: *mut KmigSim) -> Result<&'a mut KmigSim, KmigStatus> {
    if ptr.is_null() {
        set_error("sim handle is null");
        return Err(KmigStatus::NullArgument);
    }
    Ok(&mut *ptr)
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, KmigStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(KmigStatus::NullArgument);
    }
    std::ffi::CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        KmigStatus::InvalidUtf8
    })
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, KmigStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(KmigStatus::NullArgument);
    }
    Ok(&mut *ptr)
}

/// Copies `text` plus a terminating NUL into the caller's buffer.
unsafe fn fill_buffer(
    text: &str,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> KmigStatus {
    let bytes = text.as_bytes();
    let want = bytes.len() + 1;
    if !needed.is_null() {
        *needed = want;
    }
    if buf.is_null() || cap < want {
        return KmigStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    KmigStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kmig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message on this thread into `buf` (truncating if
/// needed, always NUL-terminated when `cap > 0`). Returns the full length
/// including the NUL, or 0 when no error has been recorded.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null.
#[no_mangle]
pub unsafe extern "C" fn kmig_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        if message.is_empty() {
            return 0;
        }
        let bytes = message.as_bytes();
        if !buf.is_null() && cap > 0 {
            let copy = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), copy);
            *buf.add(copy) = 0;
        }
        bytes.len() + 1
    })
}

/// Builds a simulator session from a scenario-spec JSON document and
/// stores the handle in `*out`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_new(
    spec_json: *const c_char,
    out: *mut *mut KmigSim,
) -> KmigStatus {
    guarded(|| {
        let out = match out_arg(out, "out handle") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let json = match utf8_arg(spec_json, "spec JSON") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let spec = match ScenarioSpec::from_json(json) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let (state, mut image) = match build_guest(&spec.guest) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        *out = Box::into_raw(Box::new(KmigSim {
            spec,
            state,
            image,
            engine: MigrationEngine::standard(),
            injector: SyscallInjector::default(),
            monitor,
            area: None,
            migrated: Vec::new(),
            migrated_from: Vec::new(),
        }));
        KmigStatus::Ok
    })
}

/// Releases a session. Null is a no-op.
///
/// # Safety
/// `sim` must be null or a handle from `kmig_sim_new`, freed only once.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_free(sim: *mut KmigSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

fn run_call(
    sim: &mut KmigSim,
    pid: u32,
    req: &SyscallRequest,
) -> Result<SyscallResult, KmigStatus> {
    match sim.state.run_syscall(&mut sim.image, pid, req) {
        Ok(SyscallResult::Failed(status)) => {
            set_error(format!("syscall failed: {status:?}"));
            Err(KmigStatus::Runtime)
        }
        Ok(result) => Ok(result),
        Err(e) => Err(fail(e)),
    }
}

/// Opens `path` in process `pid` and writes the descriptor to `*out_fd`.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_open(
    sim: *mut KmigSim,
    pid: u32,
    path: *const c_char,
    out_fd: *mut u32,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let path = match utf8_arg(path, "path") {
            Ok(v) => v.to_string(),
            Err(s) => return s,
        };
        let out_fd = match out_arg(out_fd, "out fd") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match run_call(sim, pid, &SyscallRequest::Open { path }) {
            Ok(SyscallResult::Fd(fd)) => {
                *out_fd = fd;
                KmigStatus::Ok
            }
            Ok(other) => {
                set_error(format!("open returned {other:?}"));
                KmigStatus::Runtime
            }
            Err(s) => s,
        }
    })
}

/// Reads `len` bytes from `fd`; `*out_bytes` receives the count actually
/// transferred.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_read(
    sim: *mut KmigSim,
    pid: u32,
    fd: u32,
    len: u64,
    out_bytes: *mut u64,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_bytes = match out_arg(out_bytes, "out byte count") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match run_call(sim, pid, &SyscallRequest::Read { fd, len }) {
            Ok(SyscallResult::Bytes(n)) => {
                *out_bytes = n;
                KmigStatus::Ok
            }
            Ok(other) => {
                set_error(format!("read returned {other:?}"));
                KmigStatus::Runtime
            }
            Err(s) => s,
        }
    })
}

/// Writes `len` bytes to `fd`; `*out_bytes` receives the count actually
/// transferred.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_write(
    sim: *mut KmigSim,
    pid: u32,
    fd: u32,
    len: u64,
    out_bytes: *mut u64,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_bytes = match out_arg(out_bytes, "out byte count") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match run_call(sim, pid, &SyscallRequest::Write { fd, len }) {
            Ok(SyscallResult::Bytes(n)) => {
                *out_bytes = n;
                KmigStatus::Ok
            }
            Ok(other) => {
                set_error(format!("write returned {other:?}"));
                KmigStatus::Runtime
            }
            Err(s) => s,
        }
    })
}

/// Closes `fd` in process `pid`.
///
/// # Safety
/// `sim` as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_close(sim: *mut KmigSim, pid: u32, fd: u32) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match run_call(sim, pid, &SyscallRequest::Close { fd }) {
            Ok(SyscallResult::Done) => KmigStatus::Ok,
            Ok(other) => {
                set_error(format!("close returned {other:?}"));
                KmigStatus::Runtime
            }
            Err(s) => s,
        }
    })
}

/// Allocates the protected area by injecting an mmap into a syscall of
/// `carrier_pid`. The base address (from the spec) lands in `*out_base`.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_allocate_area(
    sim: *mut KmigSim,
    carrier_pid: u32,
    out_base: *mut u64,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_base = match out_arg(out_base, "out base") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if sim.area.is_some() {
            set_error("protected area already allocated");
            return KmigStatus::Runtime;
        }
        let len = PROTECTED_AREA_PAGES * PAGE_SIZE;
        let mut driver = RepeatDriver::stdio_read(carrier_pid);
        match sim.injector.allocate_protected_area(
            &mut sim.state,
            &mut sim.image,
            &mut driver,
            GuestAddress(sim.spec.protected_base),
            len,
        ) {
            Ok(base) => {
                sim.area = Some(AreaSpan::new(base, len));
                *out_base = base.raw();
                KmigStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Migrates the dentries of the first `k` monitored files into the
/// protected area; `*out_moved` receives the number moved. One-shot.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_migrate(
    sim: *mut KmigSim,
    k: u32,
    out_moved: *mut u32,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_moved = match out_arg(out_moved, "out moved count") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let Some(area) = sim.area else {
            set_error("allocate the protected area first");
            return KmigStatus::Runtime;
        };
        if !sim.migrated.is_empty() {
            set_error("objects already migrated in this session");
            return KmigStatus::Runtime;
        }
        let sources = match monitored_targets(&sim.state, k) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let reports =
            match sim.engine.migrate_batch(&mut sim.state, &mut sim.image, &sources, area) {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
        sim.migrated = reports.iter().map(|r| r.dest).collect();
        sim.migrated_from = sources;
        *out_moved = sim.migrated.len() as u32;
        KmigStatus::Ok
    })
}

/// Traps the protected-area pages for the chosen access kinds and marks
/// the migrated objects as the monitored targets.
///
/// # Safety
/// `sim` as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_watch(
    sim: *mut KmigSim,
    read: bool,
    write: bool,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let Some(area) = sim.area else {
            set_error("allocate the protected area first");
            return KmigStatus::Runtime;
        };
        let first = area.start.page();
        let last = GuestAddress(area.end() - 1).page();
        sim.monitor.register_watch(&mut sim.image, first..=last, read, write);
        sim.monitor.set_targets(sim.migrated.iter().copied());
        KmigStatus::Ok
    })
}

/// Total trap events so far.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_event_total(sim: *mut KmigSim, out: *mut u64) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out = match out_arg(out, "out total") {
            Ok(v) => v,
            Err(s) => return s,
        };
        *out = sim.monitor.event_total();
        KmigStatus::Ok
    })
}

/// Events attributed to anything other than the monitored targets.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_false_triggers(
    sim: *mut KmigSim,
    out: *mut u64,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out = match out_arg(out, "out false triggers") {
            Ok(v) => v,
            Err(s) => return s,
        };
        sim.monitor.resolve_attributions(&sim.state, &sim.image);
        *out = sim.monitor.counts().false_triggers();
        KmigStatus::Ok
    })
}

/// Current address of the cached dentry for `path`, if any.
///
/// # Safety
/// Pointer arguments as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_dentry_addr(
    sim: *mut KmigSim,
    path: *const c_char,
    out_addr: *mut u64,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let path = match utf8_arg(path, "path") {
            Ok(v) => v.to_string(),
            Err(s) => return s,
        };
        let out_addr = match out_arg(out_addr, "out address") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match sim.state.dentry_of(&path) {
            Some(addr) => {
                *out_addr = addr.raw();
                KmigStatus::Ok
            }
            None => {
                set_error(format!("no cached dentry for {path:?}"));
                KmigStatus::Runtime
            }
        }
    })
}

/// Runs the structural audit of the guest, plus the stale-pointer check
/// when objects have been migrated.
///
/// # Safety
/// `sim` as in `kmig_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_verify(sim: *mut KmigSim) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if let Err(e) = sim.state.verify_invariants(&sim.image) {
            return fail(e);
        }
        if !sim.migrated.is_empty() {
            if let Err(e) =
                sim.engine.verify_reachability(&sim.state, &sim.image, &sim.migrated_from)
            {
                return fail(e);
            }
        }
        KmigStatus::Ok
    })
}

/// The injection audit trail as JSON lines, via the two-call buffer
/// protocol.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (or be null to query the
/// size); `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn kmig_sim_audit_jsonl(
    sim: *mut KmigSim,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> KmigStatus {
    guarded(|| {
        let sim = match sim_mut(sim) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let text = sim.injector.audit_jsonl();
        fill_buffer(&text, buf, cap, needed)
    })
}

/// Runs the monitoring-overhead sweep for a spec and fills `buf` with the
/// CSV report (two-call buffer protocol). `ks`/`ks_len` may be null/0 for
/// the default ladder.
///
/// # Safety
/// `spec_json` as in `kmig_sim_new`; `ks` must point to `ks_len` values;
/// `buf`/`needed` as in `kmig_sim_audit_jsonl`.
#[no_mangle]
pub unsafe extern "C" fn kmig_sweep_csv(
    spec_json: *const c_char,
    ks: *const u32,
    ks_len: usize,
    repeats: u32,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> KmigStatus {
    guarded(|| {
        let json = match utf8_arg(spec_json, "spec JSON") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let spec = match ScenarioSpec::from_json(json) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let ladder: Vec<u32> = if ks.is_null() || ks_len == 0 {
            DEFAULT_KS.to_vec()
        } else {
            std::slice::from_raw_parts(ks, ks_len).to_vec()
        };
        match sweep(&spec, &ladder, repeats) {
            Ok(result) => fill_buffer(&result.to_csv(), buf, cap, needed),
            Err(e) => fail(e),
        }
    })
}
