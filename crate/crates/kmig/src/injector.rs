//! Breakpoint-based syscall injection.
//!
//! The injector replaces the guest's syscall entry and exit instructions
//! with INT3 bytes, waits for some process to issue a syscall, swaps the
//! trapped request for an injected one, harvests the injected result at
//! the exit trap, then restores the original bytes and context and lets
//! the original syscall run as if nothing happened. The phase machine is
//! explicit so out-of-order use is an error rather than silent corruption.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::guest::{GuestState, SyscallOutcome, SyscallRequest, SyscallResult};
use crate::memory::{GuestAddress, MemoryImage, Pid};

/// INT3 opcode.
pub const BREAKPOINT: u8 = 0xCC;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Armed,
    EntryTrapped,
    InjectedExecuting,
    ExitTrapped,
    Restored,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Idle => "Idle",
            Phase::Armed => "Armed",
            Phase::EntryTrapped => "EntryTrapped",
            Phase::InjectedExecuting => "InjectedExecuting",
            Phase::ExitTrapped => "ExitTrapped",
            Phase::Restored => "Restored",
        };
        f.write_str(name)
    }
}

/// Supplies the guest activity the injector piggybacks on. The driver is
/// the scenario's model of "processes keep making syscalls".
pub trait SyscallDriver {
    /// The next syscall some process issues, or None if the guest is idle
    /// this step.
    fn next_syscall(&mut self, state: &GuestState) -> Option<(Pid, SyscallRequest)>;

    /// Called when the original (hijacked) syscall has completed and its
    /// result reached the issuing process.
    fn deliver(&mut self, _pid: Pid, _req: &SyscallRequest, _result: &SyscallResult) {}
}

/// Replays a fixed script of syscalls and records deliveries.
pub struct ScriptDriver {
    script: VecDeque<(Pid, SyscallRequest)>,
    pub delivered: Vec<(Pid, SyscallRequest, SyscallResult)>,
}

impl ScriptDriver {
    pub fn new<I>(script: I) -> Self
    where
        I: IntoIterator<Item = (Pid, SyscallRequest)>,
    {
        Self { script: script.into_iter().collect(), delivered: Vec::new() }
    }
}

impl SyscallDriver for ScriptDriver {
    fn next_syscall(&mut self, _state: &GuestState) -> Option<(Pid, SyscallRequest)> {
        self.script.pop_front()
    }

    fn deliver(&mut self, pid: Pid, req: &SyscallRequest, result: &SyscallResult) {
        self.delivered.push((pid, req.clone(), *result));
    }
}

/// A guest with no syscall activity; injections against it time out.
pub struct IdleDriver;

impl SyscallDriver for IdleDriver {
    fn next_syscall(&mut self, _state: &GuestState) -> Option<(Pid, SyscallRequest)> {
        None
    }
}

/// One process re-issuing the same harmless syscall forever; the usual
/// carrier for hypervisor-initiated injections.
pub struct RepeatDriver {
    pub pid: Pid,
    pub req: SyscallRequest,
}

impl RepeatDriver {
    pub fn stdio_read(pid: Pid) -> Self {
        Self { pid, req: SyscallRequest::Read { fd: 0, len: 1 } }
    }
}

impl SyscallDriver for RepeatDriver {
    fn next_syscall(&mut self, _state: &GuestState) -> Option<(Pid, SyscallRequest)> {
        Some((self.pid, self.req.clone()))
    }
}

/// Saved guest context for the hijacked syscall: instruction/stack
/// pointers, the register-level request encoding, and the code bytes the
/// breakpoints overwrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SavedContext {
    pub ip: u64,
    pub sp: u64,
    pub syscall_number: u64,
    pub args: [u64; 6],
    pub overwritten_bytes: Vec<(GuestAddress, u8)>,
    /// The exact pending request, re-executed after restore.
    pub pending: (Pid, SyscallRequest),
}

/// Register-level encoding of a request. Paths travel as interned ids
/// because registers hold scalars.
pub fn encode_request(state: &mut GuestState, req: &SyscallRequest) -> (u64, [u64; 6]) {
    let mut args = [0u64; 6];
    match req {
        SyscallRequest::Open { path } => args[0] = state.intern_path(path),
        SyscallRequest::Read { fd, len } | SyscallRequest::Write { fd, len } => {
            args[0] = *fd as u64;
            args[1] = *len;
        }
        SyscallRequest::Close { fd } => args[0] = *fd as u64,
        SyscallRequest::Mmap { addr, len } | SyscallRequest::Munmap { addr, len } => {
            args[0] = *addr;
            args[1] = *len;
        }
    }
    (req.number(), args)
}

pub fn decode_request(state: &GuestState, number: u64, args: [u64; 6]) -> Result<SyscallRequest> {
    let req = match number {
        0 => SyscallRequest::Read { fd: args[0] as u32, len: args[1] },
        1 => SyscallRequest::Write { fd: args[0] as u32, len: args[1] },
        2 => SyscallRequest::Open {
            path: state
                .path_for_id(args[0])
                .ok_or_else(|| SimError::Config(format!("unknown path id {}", args[0])))?
                .to_string(),
        },
        3 => SyscallRequest::Close { fd: args[0] as u32 },
        9 => SyscallRequest::Mmap { addr: args[0], len: args[1] },
        11 => SyscallRequest::Munmap { addr: args[0], len: args[1] },
        other => return Err(SimError::Config(format!("unknown syscall number {other}"))),
    };
    Ok(req)
}

/// One audit line: a phase transition plus whatever is known at that
/// point.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub from: Phase,
    pub to: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pid: Option<Pid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injected: Option<SyscallRequest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<SyscallResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restored: Option<bool>,
}

/// Everything an injection produced: who carried it, what the injected
/// syscall returned, and what the original syscall returned after replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionOutcome {
    pub pid: Pid,
    pub injected_result: SyscallResult,
    pub original_result: SyscallResult,
    pub saved: SavedContext,
}

pub struct SyscallInjector {
    phase: Phase,
    /// (entry byte, exit byte) overwritten while armed.
    saved_bytes: Option<(u8, u8)>,
    pump_bound: usize,
    audit: Vec<AuditRecord>,
    audit_seq: u64,
}

impl Default for SyscallInjector {
    fn default() -> Self {
        Self::new(1000)
    }
}

impl SyscallInjector {
    /// `pump_bound` limits how many idle driver steps an injection waits
    /// for a carrier syscall before timing out.
    pub fn new(pump_bound: usize) -> Self {
        Self {
            phase: Phase::Idle,
            saved_bytes: None,
            pump_bound,
            audit: Vec::new(),
            audit_seq: 0,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn transition(
        &mut self,
        to: Phase,
        pid: Option<Pid>,
        injected: Option<SyscallRequest>,
        result: Option<SyscallResult>,
        restored: Option<bool>,
    ) {
        self.audit.push(AuditRecord {
            seq: self.audit_seq,
            from: self.phase,
            to,
            pid,
            injected,
            result,
            restored,
        });
        self.audit_seq += 1;
        self.phase = to;
    }

    fn require(&self, op: &'static str, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(SimError::InjectorPhase {
                op,
                expected: match expected {
                    Phase::Idle => "Idle",
                    Phase::Armed => "Armed",
                    Phase::EntryTrapped => "EntryTrapped",
                    Phase::InjectedExecuting => "InjectedExecuting",
                    Phase::ExitTrapped => "ExitTrapped",
                    Phase::Restored => "Restored",
                },
                found: self.phase,
            });
        }
        Ok(())
    }

    /// Writes INT3 over the syscall entry and exit instructions,
    /// remembering the original bytes.
    pub fn arm(&mut self, state: &mut GuestState, image: &mut MemoryImage) -> Result<()> {
        self.require("arm", Phase::Idle)?;
        let entry = state.syscall_entry_addr();
        let exit = state.syscall_exit_addr();
        let entry_byte = image.peek_bytes(entry, 1)?[0];
        let exit_byte = image.peek_bytes(exit, 1)?[0];
        image.poke_bytes(entry, &[BREAKPOINT])?;
        image.poke_bytes(exit, &[BREAKPOINT])?;
        self.saved_bytes = Some((entry_byte, exit_byte));
        state.breakpoints_armed = true;
        self.transition(Phase::Armed, None, None, None, None);
        Ok(())
    }

    /// Restores the original code bytes without injecting anything.
    pub fn disarm(&mut self, state: &mut GuestState, image: &mut MemoryImage) -> Result<()> {
        self.require("disarm", Phase::Armed)?;
        self.restore_bytes(state, image)?;
        self.transition(Phase::Idle, None, None, None, Some(true));
        Ok(())
    }

    fn restore_bytes(&mut self, state: &mut GuestState, image: &mut MemoryImage) -> Result<()> {
        let (entry_byte, exit_byte) = self
            .saved_bytes
            .take()
            .ok_or_else(|| SimError::Invariant("no saved breakpoint bytes".into()))?;
        image.poke_bytes(state.syscall_entry_addr(), &[entry_byte])?;
        image.poke_bytes(state.syscall_exit_addr(), &[exit_byte])?;
        state.breakpoints_armed = false;
        Ok(())
    }

    /// Runs the full three-step protocol: wait for a carrier syscall,
    /// execute `injected` in its place, then restore and replay the
    /// original. The injected result is returned; the original result is
    /// delivered to the driver and echoed in the outcome.
    pub fn inject(
        &mut self,
        state: &mut GuestState,
        image: &mut MemoryImage,
        driver: &mut dyn SyscallDriver,
        injected: &SyscallRequest,
    ) -> Result<InjectionOutcome> {
        self.require("inject", Phase::Armed)?;

        // Step 1: pump the guest until a syscall hits the entry trap.
        let mut carrier = None;
        for _ in 0..self.pump_bound {
            let Some((pid, req)) = driver.next_syscall(state) else {
                continue;
            };
            match state.exec_syscall(image, pid, &req)? {
                SyscallOutcome::EntryTrapped => {
                    carrier = Some((pid, req));
                    break;
                }
                SyscallOutcome::Completed(_) => {
                    return Err(SimError::Invariant(
                        "armed entry breakpoint did not trap".into(),
                    ));
                }
            }
        }
        let Some((pid, original)) = carrier else {
            return Err(SimError::InjectionTimeout { bound: self.pump_bound });
        };
        self.transition(Phase::EntryTrapped, Some(pid), None, None, None);

        // Save the context of the pending syscall.
        let (number, args) = encode_request(state, &original);
        let (entry_byte, exit_byte) = self
            .saved_bytes
            .ok_or_else(|| SimError::Invariant("armed without saved bytes".into()))?;
        let saved = SavedContext {
            ip: state.syscall_entry_addr().raw(),
            sp: 0x7FFF_0000 - pid as u64 * 0x1000,
            syscall_number: number,
            args,
            overwritten_bytes: vec![
                (state.syscall_entry_addr(), entry_byte),
                (state.syscall_exit_addr(), exit_byte),
            ],
            pending: (pid, original.clone()),
        };

        // Step 2: the carrier process executes the injected syscall.
        self.transition(Phase::InjectedExecuting, Some(pid), Some(injected.clone()), None, None);
        let injected_result = state.run_syscall(image, pid, injected)?;
        if image.peek_bytes(state.syscall_exit_addr(), 1)?[0] != BREAKPOINT {
            return Err(SimError::Invariant("exit breakpoint vanished mid-injection".into()));
        }
        self.transition(Phase::ExitTrapped, Some(pid), None, Some(injected_result), None);

        // Step 3: restore code bytes and context, then replay the
        // original request from the syscall entrance.
        self.restore_bytes(state, image)?;
        self.transition(Phase::Restored, Some(pid), None, None, Some(true));
        let replay = decode_request(state, saved.syscall_number, saved.args)?;
        debug_assert_eq!(replay, original, "context round-trip");
        let original_result = match state.exec_syscall(image, pid, &replay)? {
            SyscallOutcome::Completed(result) => result,
            SyscallOutcome::EntryTrapped => {
                return Err(SimError::Invariant("breakpoint survived restore".into()));
            }
        };
        driver.deliver(pid, &original, &original_result);
        self.transition(
            Phase::Idle,
            Some(pid),
            Some(injected.clone()),
            Some(original_result),
            Some(true),
        );

        Ok(InjectionOutcome { pid, injected_result, original_result, saved })
    }

    /// Arms if necessary and injects an MMAP for the protected area at
    /// `base`; returns the area start.
    pub fn allocate_protected_area(
        &mut self,
        state: &mut GuestState,
        image: &mut MemoryImage,
        driver: &mut dyn SyscallDriver,
        base: GuestAddress,
        len: u64,
    ) -> Result<GuestAddress> {
        if self.phase == Phase::Idle {
            self.arm(state, image)?;
        }
        self.require("allocate_protected_area", Phase::Armed)?;
        let outcome = self.inject(
            state,
            image,
            driver,
            &SyscallRequest::Mmap { addr: base.raw(), len },
        )?;
        match outcome.injected_result {
            SyscallResult::Addr(addr) => Ok(addr),
            SyscallResult::Failed(status) => Err(SimError::Config(format!(
                "injected mmap at {base} for {len:#x} bytes failed: {status:?}"
            ))),
            other => Err(SimError::Invariant(format!(
                "mmap returned unexpected result {other:?}"
            ))),
        }
    }

    /// The audit log as JSON lines, one transition per line.
    pub fn audit_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.audit {
            out.push_str(&serde_json::to_string(record).expect("audit serializes"));
            out.push('\n');
        }
        out
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{build_guest, GuestSpec, SyscallError};

    fn guest() -> (GuestState, MemoryImage) {
        build_guest(&GuestSpec {
            num_files: 8,
            num_processes: 2,
            interleave: true,
            seed: 3,
            reclaim_period: 64,
            image_pages: 4096,
            churn_headroom: 8,
        })
        .unwrap()
    }

    const AREA: u64 = 0xC00000;

    #[test]
    fn arm_writes_int3_and_disarm_restores() {
        let (mut state, mut image) = guest();
        let entry = state.syscall_entry_addr();
        let before = image.peek_bytes(entry, 1).unwrap()[0];
        let mut injector = SyscallInjector::default();
        injector.arm(&mut state, &mut image).unwrap();
        assert_eq!(image.peek_bytes(entry, 1).unwrap()[0], BREAKPOINT);
        assert_eq!(
            image.peek_bytes(state.syscall_exit_addr(), 1).unwrap()[0],
            BREAKPOINT
        );
        let err = injector.arm(&mut state, &mut image).unwrap_err();
        assert!(matches!(err, SimError::InjectorPhase { .. }));
        injector.disarm(&mut state, &mut image).unwrap();
        assert_eq!(image.peek_bytes(entry, 1).unwrap()[0], before);
        assert!(!state.breakpoints_armed);
    }

    #[test]
    fn inject_mmap_during_open_preserves_both_results() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        injector.arm(&mut state, &mut image).unwrap();
        let mut driver = ScriptDriver::new([(
            1,
            SyscallRequest::Open { path: "carried.txt".into() },
        )]);
        let outcome = injector
            .inject(
                &mut state,
                &mut image,
                &mut driver,
                &SyscallRequest::Mmap { addr: AREA, len: 128 * 1024 },
            )
            .unwrap();
        assert_eq!(outcome.injected_result, SyscallResult::Addr(GuestAddress(AREA)));
        assert_eq!(outcome.original_result, SyscallResult::Fd(3));
        assert_eq!(outcome.pid, 1);
        assert_eq!(driver.delivered.len(), 1);
        assert_eq!(driver.delivered[0].2, SyscallResult::Fd(3));
        assert_eq!(injector.phase(), Phase::Idle);
        assert_eq!(image.region_count(), 1);
        // Breakpoints fully cleaned up.
        assert_ne!(
            image.peek_bytes(state.syscall_entry_addr(), 1).unwrap()[0],
            BREAKPOINT
        );
        state.verify_invariants(&image).unwrap();
    }

    #[test]
    fn inject_munmap_releases_region() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        let mut driver = RepeatDriver::stdio_read(2);
        let area = injector
            .allocate_protected_area(&mut state, &mut image, &mut driver, GuestAddress(AREA), 4096)
            .unwrap();
        assert_eq!(area, GuestAddress(AREA));
        assert_eq!(image.region_count(), 1);
        injector.arm(&mut state, &mut image).unwrap();
        let outcome = injector
            .inject(
                &mut state,
                &mut image,
                &mut driver,
                &SyscallRequest::Munmap { addr: AREA, len: 4096 },
            )
            .unwrap();
        assert_eq!(outcome.injected_result, SyscallResult::Done);
        assert_eq!(image.region_count(), 0);
    }

    #[test]
    fn injection_times_out_on_idle_guest() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::new(50);
        injector.arm(&mut state, &mut image).unwrap();
        let err = injector
            .inject(
                &mut state,
                &mut image,
                &mut IdleDriver,
                &SyscallRequest::Mmap { addr: AREA, len: 4096 },
            )
            .unwrap_err();
        assert!(matches!(err, SimError::InjectionTimeout { bound: 50 }));
        assert_eq!(injector.phase(), Phase::Armed, "no trap, no transition");
    }

    #[test]
    fn inject_without_arming_is_a_phase_error() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        let err = injector
            .inject(
                &mut state,
                &mut image,
                &mut RepeatDriver::stdio_read(1),
                &SyscallRequest::Mmap { addr: AREA, len: 4096 },
            )
            .unwrap_err();
        assert!(matches!(err, SimError::InjectorPhase { op: "inject", .. }));
    }

    #[test]
    fn successive_allocations_do_not_overlap() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        let mut driver = RepeatDriver::stdio_read(1);
        let a = injector
            .allocate_protected_area(
                &mut state,
                &mut image,
                &mut driver,
                GuestAddress(AREA),
                128 * 1024,
            )
            .unwrap();
        let b = injector
            .allocate_protected_area(
                &mut state,
                &mut image,
                &mut driver,
                GuestAddress(AREA + 128 * 1024),
                128 * 1024,
            )
            .unwrap();
        assert_eq!(a, GuestAddress(AREA));
        assert_eq!(b, GuestAddress(AREA + 128 * 1024));
        assert_eq!(image.region_count(), 2);
        // A third allocation at an already-taken base surfaces the
        // guest-side failure.
        let err = injector
            .allocate_protected_area(
                &mut state,
                &mut image,
                &mut driver,
                GuestAddress(AREA),
                4096,
            )
            .unwrap_err();
        assert!(matches!(err, SimError::Config(_)));
        // The failed mmap still restored everything.
        assert_eq!(injector.phase(), Phase::Idle);
        assert_ne!(
            image.peek_bytes(state.syscall_entry_addr(), 1).unwrap()[0],
            BREAKPOINT
        );
    }

    #[test]
    fn failed_injection_still_replays_original() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        injector.arm(&mut state, &mut image).unwrap();
        let mut driver = ScriptDriver::new([(2, SyscallRequest::Open { path: "x.txt".into() })]);
        // Inject an mmap that collides with the dentry arena: the guest
        // rejects it, but the carried open must still succeed.
        let outcome = injector
            .inject(
                &mut state,
                &mut image,
                &mut driver,
                &SyscallRequest::Mmap { addr: crate::guest::layout::DENTRY_ARENA, len: 4096 },
            )
            .unwrap();
        assert_eq!(
            outcome.injected_result,
            SyscallResult::Failed(SyscallError::Overlap)
        );
        assert_eq!(outcome.original_result, SyscallResult::Fd(3));
        assert_eq!(injector.phase(), Phase::Idle);
        state.verify_invariants(&image).unwrap();
    }

    #[test]
    fn request_encoding_round_trips() {
        let (mut state, _image) = guest();
        let requests = [
            SyscallRequest::Open { path: "enc.txt".into() },
            SyscallRequest::Read { fd: 7, len: 123 },
            SyscallRequest::Write { fd: 3, len: 9 },
            SyscallRequest::Close { fd: 4 },
            SyscallRequest::Mmap { addr: AREA, len: 8192 },
            SyscallRequest::Munmap { addr: AREA, len: 8192 },
        ];
        for req in requests {
            let (number, args) = encode_request(&mut state, &req);
            let back = decode_request(&state, number, args).unwrap();
            assert_eq!(back, req);
        }
    }

    #[test]
    fn audit_log_records_full_cycle() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        injector.arm(&mut state, &mut image).unwrap();
        injector
            .inject(
                &mut state,
                &mut image,
                &mut RepeatDriver::stdio_read(1),
                &SyscallRequest::Mmap { addr: AREA, len: 4096 },
            )
            .unwrap();
        let phases: Vec<Phase> = injector.audit().iter().map(|r| r.to).collect();
        assert_eq!(
            phases,
            vec![
                Phase::Armed,
                Phase::EntryTrapped,
                Phase::InjectedExecuting,
                Phase::ExitTrapped,
                Phase::Restored,
                Phase::Idle,
            ]
        );
        let jsonl = injector.audit_jsonl();
        assert_eq!(jsonl.lines().count(), 6);
        let last: serde_json::Value =
            serde_json::from_str(jsonl.lines().last().unwrap()).unwrap();
        assert_eq!(last["restored"], serde_json::Value::Bool(true));
        assert!(last.get("injected").is_some());
    }

    #[test]
    fn saved_context_captures_overwritten_bytes() {
        let (mut state, mut image) = guest();
        let mut injector = SyscallInjector::default();
        injector.arm(&mut state, &mut image).unwrap();
        let outcome = injector
            .inject(
                &mut state,
                &mut image,
                &mut RepeatDriver::stdio_read(2),
                &SyscallRequest::Mmap { addr: AREA, len: 4096 },
            )
            .unwrap();
        let saved = &outcome.saved;
        assert_eq!(saved.ip, state.syscall_entry_addr().raw());
        assert_eq!(saved.overwritten_bytes.len(), 2);
        for (addr, byte) in &saved.overwritten_bytes {
            assert_eq!(image.peek_bytes(*addr, 1).unwrap()[0], *byte, "byte restored");
        }
        assert_eq!(saved.pending.0, 2);
    }
}
