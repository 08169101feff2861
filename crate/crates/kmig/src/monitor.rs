//! Page-level access monitor: the trap-exit consumer.
//!
//! The monitor owns the trap flags of its watched pages and receives one
//! [`MonitorEvent`] per trapped (access, page) pair. Events are recorded
//! raw while the guest runs; attribution to kernel objects happens after
//! the fact, when [`PageMonitor::resolve_attributions`] maps each event
//! offset to the object covering it. A declarative [`Policy`] decides
//! log-versus-alert per event; the monitor never blocks an access.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::memory::{
    AccessKind, GuestAddress, MemoryImage, PageFlags, Pid, TrapHit, TrapSink, PAGE_SIZE,
};
use crate::profile::{ObjectKind, ObjectRegistry};

/// Where an event landed, object-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Attribution {
    /// Inside a registered object's extent.
    Object { kind: ObjectKind, addr: GuestAddress },
    /// Inside an allocated protected region but not inside any object.
    ProtectedArea,
    Unknown,
}

/// Attribution relative to the monitored target set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttributionClass {
    /// A monitored object: the intended signal.
    Monitored,
    /// Some other object sharing a watched page: a false trigger.
    Foreign,
    ProtectedArea,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    Log,
    Alert,
}

/// Total mapping (access kind, attribution class) -> action, with a
/// default so unspecified cells stay defined.
#[derive(Debug, Clone)]
pub struct Policy {
    default: PolicyAction,
    rules: BTreeMap<(AccessKind, AttributionClass), PolicyAction>,
}

impl Policy {
    pub fn log_all() -> Self {
        Self { default: PolicyAction::Log, rules: BTreeMap::new() }
    }

    pub fn with_rule(
        mut self,
        kind: AccessKind,
        class: AttributionClass,
        action: PolicyAction,
    ) -> Self {
        self.rules.insert((kind, class), action);
        self
    }

    pub fn decide(&self, kind: AccessKind, class: AttributionClass) -> PolicyAction {
        self.rules.get(&(kind, class)).copied().unwrap_or(self.default)
    }
}

impl Default for Policy {
    fn default() -> Self {
        Self::log_all()
    }
}

/// One trapped access, the VMExit analog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub seq: u64,
    pub page: u32,
    pub offset: u16,
    pub kind: AccessKind,
    pub pid: Pid,
    pub attributed: Attribution,
}

impl MonitorEvent {
    pub fn addr(&self) -> GuestAddress {
        GuestAddress(self.page as u64 * PAGE_SIZE + self.offset as u64)
    }
}

/// Counter snapshot consistent with the event log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub total: u64,
    pub reads: u64,
    pub writes: u64,
    pub monitored: u64,
    pub foreign_objects: u64,
    pub protected_area: u64,
    pub unknown: u64,
    pub alerts: u64,
    pub by_page: BTreeMap<u32, u64>,
}

impl EventCounts {
    /// Events not attributable to a monitored target.
    pub fn false_triggers(&self) -> u64 {
        self.total - self.monitored
    }
}

struct MonitorCore {
    events: Vec<MonitorEvent>,
    next_seq: u64,
    watched: BTreeMap<u32, PageFlags>,
    targets: BTreeSet<u64>,
    policy: Policy,
}

/// Shared-handle monitor; clones observe the same core. A clone wrapped
/// in `Rc` serves as the image's trap sink.
#[derive(Clone)]
pub struct PageMonitor {
    core: Rc<RefCell<MonitorCore>>,
}

impl PageMonitor {
    pub fn new(policy: Policy) -> Self {
        Self {
            core: Rc::new(RefCell::new(MonitorCore {
                events: Vec::new(),
                next_seq: 0,
                watched: BTreeMap::new(),
                targets: BTreeSet::new(),
                policy,
            })),
        }
    }

    /// Wires this monitor into the image as its trap sink.
    pub fn install(&self, image: &mut MemoryImage) {
        image.set_trap_sink(Rc::new(self.clone()));
    }

    /// Sets trap flags on `pages`; re-registration is idempotent and
    /// unions the kinds.
    pub fn register_watch<I>(&self, image: &mut MemoryImage, pages: I, read: bool, write: bool)
    where
        I: IntoIterator<Item = u32>,
    {
        let mut core = self.core.borrow_mut();
        for page in pages {
            let entry = core.watched.entry(page).or_default();
            entry.trap_read |= read;
            entry.trap_write |= write;
            image.set_page_flags(page, *entry);
        }
    }

    /// Clears trap flags on `pages`; unknown pages are ignored.
    pub fn unregister_watch<I>(&self, image: &mut MemoryImage, pages: I)
    where
        I: IntoIterator<Item = u32>,
    {
        let mut core = self.core.borrow_mut();
        for page in pages {
            core.watched.remove(&page);
            image.set_page_flags(page, PageFlags::default());
        }
    }

    /// Snapshot of the registered watch set; the offline oracle replays
    /// traces against exactly this.
    pub fn watched_pages(&self) -> BTreeMap<u32, PageFlags> {
        self.core.borrow().watched.clone()
    }

    /// Declares which object base addresses count as monitored; events
    /// attributed elsewhere are false triggers.
    pub fn set_targets<I>(&self, targets: I)
    where
        I: IntoIterator<Item = GuestAddress>,
    {
        self.core.borrow_mut().targets = targets.into_iter().map(|a| a.raw()).collect();
    }

    /// Maps every event to the object now covering its address. Sound as
    /// long as objects did not move between the events and this call,
    /// which holds for the scenario phases: migration never runs while a
    /// workload is in flight.
    pub fn resolve_attributions(&self, registry: &dyn ObjectRegistry, image: &MemoryImage) {
        let mut core = self.core.borrow_mut();
        for event in &mut core.events {
            let addr = GuestAddress(event.page as u64 * PAGE_SIZE + event.offset as u64);
            event.attributed = match registry.object_at(addr) {
                Some((kind, base)) => Attribution::Object { kind, addr: base },
                None if image.region_containing(addr).is_some() => Attribution::ProtectedArea,
                None => Attribution::Unknown,
            };
        }
    }

    fn class_of(targets: &BTreeSet<u64>, attribution: Attribution) -> AttributionClass {
        match attribution {
            Attribution::Object { addr, .. } => {
                if targets.contains(&addr.raw()) {
                    AttributionClass::Monitored
                } else {
                    AttributionClass::Foreign
                }
            }
            Attribution::ProtectedArea => AttributionClass::ProtectedArea,
            Attribution::Unknown => AttributionClass::Unknown,
        }
    }

    pub fn counts(&self) -> EventCounts {
        let core = self.core.borrow();
        let mut counts = EventCounts::default();
        for event in &core.events {
            counts.total += 1;
            match event.kind {
                AccessKind::Read => counts.reads += 1,
                AccessKind::Write => counts.writes += 1,
            }
            match Self::class_of(&core.targets, event.attributed) {
                AttributionClass::Monitored => counts.monitored += 1,
                AttributionClass::Foreign => counts.foreign_objects += 1,
                AttributionClass::ProtectedArea => counts.protected_area += 1,
                AttributionClass::Unknown => counts.unknown += 1,
            }
            if core.policy.decide(
                event.kind,
                Self::class_of(&core.targets, event.attributed),
            ) == PolicyAction::Alert
            {
                counts.alerts += 1;
            }
            *counts.by_page.entry(event.page).or_default() += 1;
        }
        counts
    }

    pub fn events(&self) -> Vec<MonitorEvent> {
        self.core.borrow().events.clone()
    }

    pub fn event_total(&self) -> u64 {
        self.core.borrow().events.len() as u64
    }

    /// Drops recorded events (sequence numbers keep rising); the watch
    /// set and targets stay.
    pub fn clear_events(&self) {
        self.core.borrow_mut().events.clear();
    }

    pub fn export_jsonl(&self) -> String {
        let core = self.core.borrow();
        let mut out = String::new();
        for event in &core.events {
            out.push_str(&serde_json::to_string(event).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Compact little-endian trace records: seq u64, page u32, offset
    /// u16, kind u8 (0 read, 1 write), pid u32. 19 bytes per event.
    pub fn export_binary(&self) -> Vec<u8> {
        let core = self.core.borrow();
        let mut out = Vec::with_capacity(core.events.len() * 19);
        for event in &core.events {
            out.extend_from_slice(&event.seq.to_le_bytes());
            out.extend_from_slice(&event.page.to_le_bytes());
            out.extend_from_slice(&event.offset.to_le_bytes());
            out.push(match event.kind {
                AccessKind::Read => 0,
                AccessKind::Write => 1,
            });
            out.extend_from_slice(&event.pid.to_le_bytes());
        }
        out
    }

    /// Parses records written by `export_binary`. Attribution is not part
    /// of the wire format and comes back as unknown.
    pub fn parse_binary(bytes: &[u8]) -> Result<Vec<MonitorEvent>> {
        if !bytes.len().is_multiple_of(19) {
            return Err(SimError::Snapshot(format!(
                "binary trace length {} is not a multiple of 19",
                bytes.len()
            )));
        }
        let mut out = Vec::with_capacity(bytes.len() / 19);
        for rec in bytes.chunks_exact(19) {
            let kind = match rec[14] {
                0 => AccessKind::Read,
                1 => AccessKind::Write,
                other => {
                    return Err(SimError::Snapshot(format!("bad kind byte {other}")));
                }
            };
            out.push(MonitorEvent {
                seq: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
                page: u32::from_le_bytes(rec[8..12].try_into().unwrap()),
                offset: u16::from_le_bytes(rec[12..14].try_into().unwrap()),
                kind,
                pid: u32::from_le_bytes(rec[15..19].try_into().unwrap()),
                attributed: Attribution::Unknown,
            });
        }
        Ok(out)
    }
}

impl TrapSink for PageMonitor {
    fn trap(&self, hit: TrapHit) {
        let mut core = self.core.borrow_mut();
        debug_assert!(
            core.watched
                .get(&hit.page)
                .map(|f| f.traps(hit.kind))
                .unwrap_or(false),
            "event on page {} without a matching registration",
            hit.page
        );
        let seq = core.next_seq;
        core.next_seq += 1;
        core.events.push(MonitorEvent {
            seq,
            page: hit.page,
            offset: hit.offset,
            kind: hit.kind,
            pid: hit.pid,
            attributed: Attribution::Unknown,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{build_guest, initial_file_name, GuestSpec, SyscallRequest};
    use crate::memory::AccessContext;

    fn guest_pair() -> (crate::guest::GuestState, MemoryImage) {
        build_guest(&GuestSpec {
            num_files: 8,
            num_processes: 2,
            interleave: true,
            seed: 5,
            reclaim_period: 64,
            image_pages: 4096,
            churn_headroom: 8,
        })
        .unwrap()
    }

    #[test]
    fn no_watches_means_zero_events() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        state
            .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(0) })
            .unwrap();
        assert_eq!(monitor.counts().total, 0);
    }

    #[test]
    fn totals_match_event_log_length() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        let pages: Vec<u32> = state.cache_members().map(|a| a.page()).collect();
        monitor.register_watch(&mut image, pages, true, true);
        for i in 0..4 {
            state
                .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(i) })
                .unwrap();
        }
        let counts = monitor.counts();
        assert!(counts.total > 0);
        assert_eq!(counts.total, monitor.events().len() as u64);
        assert_eq!(counts.total, counts.reads + counts.writes);
        assert_eq!(counts.by_page.values().sum::<u64>(), counts.total);
    }

    #[test]
    fn unregister_stops_events_and_is_idempotent() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        let pages: Vec<u32> = state.cache_members().map(|a| a.page()).collect();
        monitor.register_watch(&mut image, pages.clone(), true, true);
        monitor.unregister_watch(&mut image, pages.clone());
        monitor.unregister_watch(&mut image, pages);
        state
            .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(1) })
            .unwrap();
        assert_eq!(monitor.counts().total, 0);
        assert!(monitor.watched_pages().is_empty());
    }

    #[test]
    fn unregister_subset_keeps_remaining_pages_trapping() {
        let (_state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        monitor.register_watch(&mut image, [100u32, 101], true, true);
        monitor.unregister_watch(&mut image, [100u32]);
        image
            .write_bytes(AccessContext::Guest(1), GuestAddress(101 * PAGE_SIZE), &[1])
            .unwrap();
        image
            .write_bytes(AccessContext::Guest(1), GuestAddress(100 * PAGE_SIZE), &[1])
            .unwrap();
        let events = monitor.events();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].page, 101);
    }

    #[test]
    fn hypervisor_activity_emits_nothing() {
        let (_state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        monitor.register_watch(&mut image, [50u32], true, true);
        image.poke_bytes(GuestAddress(50 * PAGE_SIZE), &[9, 9, 9]).unwrap();
        image.peek_bytes(GuestAddress(50 * PAGE_SIZE), 64).unwrap();
        assert_eq!(monitor.counts().total, 0);
    }

    #[test]
    fn attribution_separates_monitored_from_foreign() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        // Watch only the page of file 0's dentry; with interleaving the
        // same page hosts other dentries too.
        let target = state.dentry_of(&initial_file_name(0)).unwrap();
        monitor.register_watch(&mut image, [target.page()], true, true);
        monitor.set_targets([target]);
        for i in 0..8 {
            state
                .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(i) })
                .unwrap();
        }
        monitor.resolve_attributions(&state, &image);
        let counts = monitor.counts();
        assert!(counts.monitored > 0, "target dentry touched");
        assert!(counts.foreign_objects > 0, "cohabitant dentries touched");
        assert_eq!(counts.false_triggers(), counts.total - counts.monitored);
        assert_eq!(counts.unknown, 0);
    }

    #[test]
    fn policy_alerts_are_counted() {
        let (mut state, mut image) = guest_pair();
        let policy = Policy::log_all().with_rule(
            AccessKind::Write,
            AttributionClass::Monitored,
            PolicyAction::Alert,
        );
        let monitor = PageMonitor::new(policy);
        monitor.install(&mut image);
        let target = state.dentry_of(&initial_file_name(0)).unwrap();
        monitor.register_watch(&mut image, [target.page()], true, true);
        monitor.set_targets([target]);
        state
            .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(0) })
            .unwrap();
        monitor.resolve_attributions(&state, &image);
        let counts = monitor.counts();
        // The open of the target rewrites d_count: one monitored write.
        assert!(counts.alerts >= 1);
        assert!(counts.alerts <= counts.writes);
    }

    #[test]
    fn binary_trace_round_trips() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        let pages: Vec<u32> = state.cache_members().map(|a| a.page()).collect();
        monitor.register_watch(&mut image, pages, true, true);
        state
            .run_syscall(&mut image, 2, &SyscallRequest::Open { path: initial_file_name(3) })
            .unwrap();
        let events = monitor.events();
        assert!(!events.is_empty());
        let bytes = monitor.export_binary();
        assert_eq!(bytes.len(), events.len() * 19);
        let parsed = PageMonitor::parse_binary(&bytes).unwrap();
        for (a, b) in events.iter().zip(parsed.iter()) {
            assert_eq!((a.seq, a.page, a.offset, a.kind, a.pid), (b.seq, b.page, b.offset, b.kind, b.pid));
        }
        assert!(PageMonitor::parse_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn jsonl_export_has_one_line_per_event() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        let pages: Vec<u32> = state.cache_members().map(|a| a.page()).collect();
        monitor.register_watch(&mut image, pages, true, true);
        state
            .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(2) })
            .unwrap();
        monitor.resolve_attributions(&state, &image);
        let jsonl = monitor.export_jsonl();
        assert_eq!(jsonl.lines().count(), monitor.events().len());
        let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert!(first.get("seq").is_some());
        assert!(first.get("attributed").is_some());
    }

    #[test]
    fn clear_events_keeps_watches() {
        let (mut state, mut image) = guest_pair();
        let monitor = PageMonitor::new(Policy::log_all());
        monitor.install(&mut image);
        let pages: Vec<u32> = state.cache_members().map(|a| a.page()).collect();
        monitor.register_watch(&mut image, pages, true, true);
        state
            .run_syscall(&mut image, 1, &SyscallRequest::Open { path: initial_file_name(0) })
            .unwrap();
        assert!(monitor.counts().total > 0);
        monitor.clear_events();
        assert_eq!(monitor.counts().total, 0);
        assert!(!monitor.watched_pages().is_empty());
        state
            .run_syscall(&mut image, 1, &SyscallRequest::Read { fd: 3, len: 1 })
            .unwrap();
        assert!(monitor.counts().total > 0, "watches still live after clear");
    }
}
