//! Benchmark harness: effectiveness and overhead measurement.
//!
//! The harness reproduces a three-step protocol per monitored-object
//! count k: run a metadata-heavy workload with monitoring off (baseline),
//! with page watches on the objects where they naturally live (in-place,
//! false triggers included), and with the objects migrated into the
//! protected area (monitoring only what was asked for). Event counts are
//! the overhead unit; modeled time is an explicit linear function of
//! them, not a wall-clock claim. Every cell is independently checkable
//! by replaying its access trace against its watch set offline.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::guest::{
    build_guest, initial_file_name, GuestSpec, GuestState, SyscallRequest, SyscallResult,
};
use crate::injector::{RepeatDriver, SyscallInjector};
use crate::memory::{
    AccessKind, AccessRecord, GuestAddress, MemoryImage, PageFlags, PAGE_SIZE,
};
use crate::migration::{AreaSpan, MigrationEngine, MigrationReport};
use crate::monitor::{EventCounts, PageMonitor, Policy};
use crate::profile::dentry;

/// The object-count ladder a full sweep walks.
pub const DEFAULT_KS: [u32; 9] = [10, 50, 100, 150, 200, 250, 300, 350, 400];
pub const DEFAULT_REPEATS: u32 = 10;
/// Protected area size: 32 pages, 128 KiB.
pub const PROTECTED_AREA_PAGES: u64 = 32;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// No watches: the baseline measurement.
    Off,
    /// Watch the pages the monitored objects naturally occupy.
    InPlace,
    /// Objects migrated to the protected area; watch that area.
    Migrated,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Off => "off",
            Mode::InPlace => "in-place",
            Mode::Migrated => "migrated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessDistribution {
    /// Every process visits every file once.
    Uniform,
    /// A hot tenth of the files is visited three times per process.
    Skewed,
}

fn default_ops_per_file() -> u32 {
    2
}
fn default_process_count() -> u32 {
    2
}
fn default_distribution() -> AccessDistribution {
    AccessDistribution::Uniform
}
fn default_churn() -> u32 {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_ops_per_file")]
    pub ops_per_file: u32,
    #[serde(default = "default_process_count")]
    pub process_count: u32,
    #[serde(default = "default_distribution")]
    pub access_distribution: AccessDistribution,
    /// Defaults to the guest seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Fresh paths each process creates during the run; these dentries
    /// cohabit arena pages with initial files and keep false triggers
    /// alive even when every initial file is monitored.
    #[serde(default = "default_churn")]
    pub churn_per_process: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            ops_per_file: default_ops_per_file(),
            process_count: default_process_count(),
            access_distribution: default_distribution(),
            seed: None,
            churn_per_process: default_churn(),
        }
    }
}

fn default_t_base() -> u64 {
    1000
}
fn default_c_event() -> u64 {
    3
}

/// Declared linear cost model: modeled_time = t_base + c_event · events.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(default = "default_t_base")]
    pub t_base: u64,
    #[serde(default = "default_c_event")]
    pub c_event: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { t_base: default_t_base(), c_event: default_c_event() }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatchSpec {
    #[serde(default = "default_true")]
    pub read: bool,
    #[serde(default = "default_true")]
    pub write: bool,
}

impl Default for WatchSpec {
    fn default() -> Self {
        Self { read: true, write: true }
    }
}

fn default_k() -> u32 {
    10
}
fn default_mode() -> Mode {
    Mode::InPlace
}
fn default_protected_base() -> u64 {
    0xC0_0000
}

/// Everything one benchmark cell or scenario needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub guest: GuestSpec,
    /// Number of monitored objects (first k files in index order).
    #[serde(default = "default_k")]
    pub k: u32,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub watch: WatchSpec,
    #[serde(default = "default_protected_base")]
    pub protected_base: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            guest: GuestSpec::default(),
            k: default_k(),
            mode: default_mode(),
            workload: WorkloadSpec::default(),
            cost_model: CostModel::default(),
            watch: WatchSpec::default(),
            protected_base: default_protected_base(),
        }
    }
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text)
            .map_err(|e| SimError::Config(format!("bad scenario spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(SimError::Config(msg));
        if self.k > self.guest.num_files {
            return cfg(format!(
                "k {} exceeds num_files {}",
                self.k, self.guest.num_files
            ));
        }
        if self.workload.process_count == 0
            || self.workload.process_count > self.guest.num_processes
        {
            return cfg(format!(
                "workload process_count {} must be in 1..={}",
                self.workload.process_count, self.guest.num_processes
            ));
        }
        if self.workload.ops_per_file == 0 {
            return cfg("ops_per_file must be at least 1".into());
        }
        let churn_total = self.workload.churn_per_process * self.workload.process_count;
        if churn_total > self.guest.churn_headroom {
            return cfg(format!(
                "churn needs {churn_total} spare dentry slots, headroom is {}",
                self.guest.churn_headroom
            ));
        }
        if !self.protected_base.is_multiple_of(PAGE_SIZE) {
            return cfg(format!(
                "protected_base {:#x} is not page-aligned",
                self.protected_base
            ));
        }
        Ok(())
    }

    /// Per-repeat guest spec: the seed is shifted deterministically.
    pub fn guest_for_repeat(&self, repeat: u32) -> GuestSpec {
        GuestSpec {
            seed: self.guest.seed.wrapping_add((repeat as u64).wrapping_mul(GOLDEN)),
            ..self.guest.clone()
        }
    }

    fn workload_seed(&self, repeat: u32) -> u64 {
        self.workload
            .seed
            .unwrap_or(self.guest.seed)
            .wrapping_add((repeat as u64).wrapping_mul(GOLDEN))
    }
}

/// One dereferencing step of workload activity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanItem {
    pub pid: u32,
    pub path: String,
    pub ops: Vec<AccessKind>,
    pub churn: bool,
}

/// Deterministic workload plan: per process, a shuffled visit of every
/// file (hot files repeated when skewed) with churn creations spliced in
/// at seeded positions, then round-robin interleaved across processes.
pub fn build_plan(spec: &ScenarioSpec, repeat: u32) -> Vec<PlanItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.workload_seed(repeat));
    let mut per_pid: Vec<Vec<PlanItem>> = Vec::new();
    for p in 1..=spec.workload.process_count {
        let mut files: Vec<u32> = (0..spec.guest.num_files).collect();
        if spec.workload.access_distribution == AccessDistribution::Skewed {
            let hot = (spec.guest.num_files / 10).max(1);
            for _ in 0..2 {
                files.extend(0..hot);
            }
        }
        files.shuffle(&mut rng);
        let ops: Vec<AccessKind> = (0..spec.workload.ops_per_file)
            .map(|j| if j % 2 == 0 { AccessKind::Read } else { AccessKind::Write })
            .collect();
        let mut items: Vec<PlanItem> = files
            .into_iter()
            .map(|f| PlanItem {
                pid: p,
                path: initial_file_name(f),
                ops: ops.clone(),
                churn: false,
            })
            .collect();
        for n in 0..spec.workload.churn_per_process {
            let pos = rng.gen_range(0..=items.len());
            items.insert(
                pos,
                PlanItem {
                    pid: p,
                    path: format!("c_{p}_{n:04}.txt"),
                    ops: vec![AccessKind::Write],
                    churn: true,
                },
            );
        }
        per_pid.push(items);
    }

    let longest = per_pid.iter().map(Vec::len).max().unwrap_or(0);
    let mut plan = Vec::new();
    for i in 0..longest {
        for list in &mut per_pid {
            if i < list.len() {
                plan.push(std::mem::replace(
                    &mut list[i],
                    PlanItem { pid: 0, path: String::new(), ops: Vec::new(), churn: false },
                ));
            }
        }
    }
    plan
}

/// Runs the plan to completion: every item opens its path, performs its
/// reads/writes, closes, and kernel housekeeping reclaims the LRU every
/// `reclaim_period` syscalls.
pub fn run_plan(
    state: &mut GuestState,
    image: &mut MemoryImage,
    plan: &[PlanItem],
    reclaim_period: u32,
) -> Result<()> {
    let mut next_reclaim = state.syscalls_executed() + reclaim_period as u64;
    for item in plan {
        let fd = match state.run_syscall(
            image,
            item.pid,
            &SyscallRequest::Open { path: item.path.clone() },
        )? {
            SyscallResult::Fd(fd) => fd,
            other => {
                return Err(SimError::Invariant(format!(
                    "workload open of {:?} failed: {other:?}",
                    item.path
                )))
            }
        };
        for &op in &item.ops {
            let req = match op {
                AccessKind::Read => SyscallRequest::Read { fd, len: 8 },
                AccessKind::Write => SyscallRequest::Write { fd, len: 8 },
            };
            match state.run_syscall(image, item.pid, &req)? {
                SyscallResult::Bytes(_) => {}
                other => {
                    return Err(SimError::Invariant(format!(
                        "workload io on {:?} failed: {other:?}",
                        item.path
                    )))
                }
            }
        }
        match state.run_syscall(image, item.pid, &SyscallRequest::Close { fd })? {
            SyscallResult::Done => {}
            other => {
                return Err(SimError::Invariant(format!(
                    "workload close of {:?} failed: {other:?}",
                    item.path
                )))
            }
        }
        if state.syscalls_executed() >= next_reclaim {
            state.reclaim_lru(image)?;
            next_reclaim = state.syscalls_executed() + reclaim_period as u64;
        }
    }
    Ok(())
}

/// One sweep cell's measurable output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchRow {
    pub k: u32,
    pub mode: Mode,
    pub repeat: u32,
    pub events_total: u64,
    pub events_false: u64,
    pub modeled_time: u64,
    pub pages_used: u64,
}

/// Everything a cell run produces: the row, the raw guest access trace
/// for offline replay, the monitor counters, and the watch set in force.
pub struct CellOutcome {
    pub row: BenchRow,
    pub trace: Vec<AccessRecord>,
    pub counts: EventCounts,
    pub watched: BTreeMap<u32, PageFlags>,
}

/// The first-k monitored dentries in file-index order, at their current
/// addresses (arena slots before migration, area slots after).
pub fn monitored_targets(state: &GuestState, k: u32) -> Result<Vec<GuestAddress>> {
    (0..k)
        .map(|i| {
            state.dentry_of(&initial_file_name(i)).ok_or_else(|| {
                SimError::Config(format!("file {} has no cached dentry", initial_file_name(i)))
            })
        })
        .collect()
}

/// Runs the extraction workload in the given mode and returns the cell
/// outcome. The state must already be prepared for the mode (area
/// allocated and objects migrated for `migrated`).
pub fn run_extract_workload(
    state: &mut GuestState,
    image: &mut MemoryImage,
    spec: &ScenarioSpec,
    repeat: u32,
) -> Result<CellOutcome> {
    let targets = monitored_targets(state, spec.k)?;
    let monitor = PageMonitor::new(Policy::log_all());
    monitor.install(image);

    let pages: Vec<u32> = match spec.mode {
        Mode::Off => Vec::new(),
        Mode::InPlace => {
            let set: std::collections::BTreeSet<u32> =
                targets.iter().map(|a| a.page()).collect();
            set.into_iter().collect()
        }
        Mode::Migrated => {
            let (start, len) = image
                .region_containing(GuestAddress(spec.protected_base))
                .ok_or_else(|| {
                    SimError::Config(
                        "migrated mode requires an allocated protected area".into(),
                    )
                })?;
            (start.page()..GuestAddress(start.raw() + len - 1).page() + 1).collect()
        }
    };
    monitor.register_watch(image, pages, spec.watch.read, spec.watch.write);
    monitor.set_targets(targets);

    image.start_trace();
    let plan = build_plan(spec, repeat);
    run_plan(state, image, &plan, spec.guest.reclaim_period)?;
    let trace = image.stop_trace();

    monitor.resolve_attributions(state, image);
    let counts = monitor.counts();
    let watched = monitor.watched_pages();
    image.clear_trap_sink();

    let pages_used = match spec.mode {
        Mode::Migrated => (spec.k as u64 * dentry::SIZE).div_ceil(PAGE_SIZE),
        _ => 0,
    };
    let row = BenchRow {
        k: spec.k,
        mode: spec.mode,
        repeat,
        events_total: counts.total,
        events_false: counts.false_triggers(),
        modeled_time: spec.cost_model.t_base + spec.cost_model.c_event * counts.total,
        pages_used,
    };
    Ok(CellOutcome { row, trace, counts, watched })
}

/// Offline oracle: replays a recorded access trace against a watch-set
/// snapshot, counting one event per (access, trapped touched page). No
/// simulator state involved.
pub fn oracle_count(trace: &[AccessRecord], watched: &BTreeMap<u32, PageFlags>) -> u64 {
    let mut count = 0;
    for record in trace {
        if record.len == 0 {
            continue;
        }
        let first = record.addr.page();
        let last = GuestAddress(record.addr.raw() + record.len as u64 - 1).page();
        for page in first..=last {
            if watched.get(&page).is_some_and(|f| f.traps(record.kind)) {
                count += 1;
            }
        }
    }
    count
}

/// Per-(k, mode) mean over repeats.
#[derive(Debug, Clone, Serialize)]
pub struct AvgRow {
    pub k: u32,
    pub mode: Mode,
    pub events_total: f64,
    pub events_false: f64,
    pub modeled_time: f64,
    pub pages_used: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    /// One row per cell: the off baseline per repeat (k = 0), then
    /// in-place and migrated runs per k per repeat.
    pub rows: Vec<BenchRow>,
    /// Offline-oracle event totals aligned with `rows`.
    pub oracle_totals: Vec<u64>,
    pub averages: Vec<AvgRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mode,repeat,events_total,events_false,modeled_time,pages_used\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k, r.mode, r.repeat, r.events_total, r.events_false, r.modeled_time, r.pages_used
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }

    pub fn average_for(&self, k: u32, mode: Mode) -> Option<&AvgRow> {
        self.averages.iter().find(|a| a.k == k && a.mode == mode)
    }
}

/// The three-step sweep over the k ladder. Per repeat, one pristine
/// guest serves the off baseline and all in-place cells; a second copy
/// receives the injected protected area and incremental migrations as k
/// ascends (destinations are identical to a from-scratch batch, since
/// batch migration is a sequential per-object loop).
pub fn sweep(spec: &ScenarioSpec, ks: &[u32], repeats: u32) -> Result<SweepResult> {
    spec.validate()?;
    if ks.is_empty() {
        return Err(SimError::Config("sweep needs at least one k".into()));
    }
    let mut ladder: Vec<u32> = ks.to_vec();
    ladder.sort_unstable();
    ladder.dedup();
    for &k in &ladder {
        if k == 0 || k > spec.guest.num_files {
            return Err(SimError::Config(format!(
                "sweep k {k} must be in 1..={}",
                spec.guest.num_files
            )));
        }
    }
    if repeats == 0 {
        return Err(SimError::Config("sweep needs at least one repeat".into()));
    }
    let max_k = *ladder.last().expect("nonempty");
    let area_len = PROTECTED_AREA_PAGES * PAGE_SIZE;
    let engine = MigrationEngine::standard();

    let mut cells: Vec<(BenchRow, u64)> = Vec::new();
    for repeat in 0..repeats {
        let guest_spec = spec.guest_for_repeat(repeat);
        let (base_state, base_image) = build_guest(&guest_spec)?;

        let off_spec = ScenarioSpec {
            guest: guest_spec.clone(),
            k: 0,
            mode: Mode::Off,
            ..spec.clone()
        };
        let mut state = base_state.clone();
        let mut image = base_image.clone_image();
        let out = run_extract_workload(&mut state, &mut image, &off_spec, repeat)?;
        let oracle = oracle_count(&out.trace, &out.watched);
        cells.push((out.row, oracle));

        // Prepare the migrated twin: protected area via syscall
        // injection, then objects moved in as the ladder ascends.
        let mut mig_state = base_state.clone();
        let mut mig_image = base_image.clone_image();
        let carrier = mig_state.pids().into_iter().min().expect("guest has processes");
        let mut injector = SyscallInjector::default();
        let mut driver = RepeatDriver::stdio_read(carrier);
        let area_start = injector.allocate_protected_area(
            &mut mig_state,
            &mut mig_image,
            &mut driver,
            GuestAddress(spec.protected_base),
            area_len,
        )?;
        let sources = monitored_targets(&base_state, max_k)?;
        let mut migrated = 0usize;

        for &k in &ladder {
            let span = AreaSpan::new(
                GuestAddress(area_start.raw() + migrated as u64 * dentry::SIZE),
                area_len - migrated as u64 * dentry::SIZE,
            );
            engine.migrate_batch(
                &mut mig_state,
                &mut mig_image,
                &sources[migrated..k as usize],
                span,
            )?;
            migrated = k as usize;

            let cell_spec =
                ScenarioSpec { guest: guest_spec.clone(), k, mode: Mode::InPlace, ..spec.clone() };
            let mut state = base_state.clone();
            let mut image = base_image.clone_image();
            let out = run_extract_workload(&mut state, &mut image, &cell_spec, repeat)?;
            let oracle = oracle_count(&out.trace, &out.watched);
            cells.push((out.row, oracle));

            let cell_spec =
                ScenarioSpec { guest: guest_spec.clone(), k, mode: Mode::Migrated, ..spec.clone() };
            let mut state = mig_state.clone();
            let mut image = mig_image.clone_image();
            let out = run_extract_workload(&mut state, &mut image, &cell_spec, repeat)?;
            let oracle = oracle_count(&out.trace, &out.watched);
            cells.push((out.row, oracle));
        }
    }

    cells.sort_by_key(|(row, _)| (row.k, row.mode, row.repeat));

    #[derive(Default)]
    struct CellSums {
        events_total: u64,
        events_false: u64,
        modeled_time: u64,
        pages_used: u64,
        repeats: u32,
    }
    let mut sums: BTreeMap<(u32, Mode), CellSums> = BTreeMap::new();
    for (row, _) in &cells {
        let entry = sums.entry((row.k, row.mode)).or_default();
        entry.events_total += row.events_total;
        entry.events_false += row.events_false;
        entry.modeled_time += row.modeled_time;
        entry.pages_used = entry.pages_used.max(row.pages_used);
        entry.repeats += 1;
    }
    let averages = sums
        .into_iter()
        .map(|((k, mode), s)| AvgRow {
            k,
            mode,
            events_total: s.events_total as f64 / s.repeats as f64,
            events_false: s.events_false as f64 / s.repeats as f64,
            modeled_time: s.modeled_time as f64 / s.repeats as f64,
            pages_used: s.pages_used,
        })
        .collect();

    let (rows, oracle_totals) = cells.into_iter().unzip();
    Ok(SweepResult { rows, oracle_totals, averages })
}

/// Memory cost of a migration batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OverheadReport {
    pub bytes_used: u64,
    pub pages_used: u64,
    pub area_pages: u64,
    pub fits: bool,
}

pub fn overhead_report(area: AreaSpan, reports: &[MigrationReport]) -> OverheadReport {
    let profile = crate::profile::LayoutProfile::standard();
    let bytes_used: u64 = reports.iter().map(|r| profile.size_of(r.kind)).sum();
    OverheadReport {
        bytes_used,
        pages_used: bytes_used.div_ceil(PAGE_SIZE),
        area_pages: area.len / PAGE_SIZE,
        fits: bytes_used <= area.len,
    }
}
