//! Costed model of the kernel read path and the two resubmission hooks.
//!
//! Each hop of a chain is a CPU phase on the issuing worker's core followed
//! by a device phase. Completions run the chain's storage function; a
//! resubmission starts the next hop at the cost of the layer that issued it.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::blockdev::{
    BlockStore, ChainTag, Device, DeviceConfig, DeviceError, DeviceRequest, BLOCK_SIZE,
};
use crate::sfunc::{self, Action, ChainBudget, ExecError, VerifiedProgram};
use crate::xcache::{ExtentCache, ExtentError, ExtentMap, InvalidReason, Translation};

/// Per-layer costs of one 512-byte synchronous read, in ns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyProfile {
    pub crossing_ns: u64,
    pub syscall_ns: u64,
    pub fs_ns: u64,
    pub bio_ns: u64,
    pub driver_ns: u64,
    pub device_ns: u64,
    pub sfunc_exec_ns: u64,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            crossing_ns: 351,
            syscall_ns: 199,
            fs_ns: 2006,
            bio_ns: 379,
            driver_ns: 113,
            device_ns: 3224,
            sfunc_exec_ns: 100,
        }
    }
}

impl LatencyProfile {
    pub fn total_path_ns(&self) -> u64 {
        self.software_cpu_ns() + self.device_ns
    }

    pub fn software_cpu_ns(&self) -> u64 {
        self.crossing_ns + self.syscall_ns + self.fs_ns + self.bio_ns + self.driver_ns
    }

    /// Per-op CPU of a batched submission, excluding the shared crossing.
    pub fn batched_op_cpu_ns(&self) -> u64 {
        self.software_cpu_ns() - self.crossing_ns
    }

    /// `(layer, ns)` rows in path order.
    pub fn rows(&self) -> [(&'static str, u64); 6] {
        [
            ("kernel crossing", self.crossing_ns),
            ("read syscall", self.syscall_ns),
            ("ext4", self.fs_ns),
            ("bio", self.bio_ns),
            ("nvme driver", self.driver_ns),
            ("device", self.device_ns),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DispatchMode {
    Baseline,
    SyscallHook,
    DriverHook,
}

impl DispatchMode {
    pub const ALL: [DispatchMode; 3] = [
        DispatchMode::Baseline,
        DispatchMode::SyscallHook,
        DispatchMode::DriverHook,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DispatchMode::Baseline => "baseline",
            DispatchMode::SyscallHook => "syscall",
            DispatchMode::DriverHook => "driver",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for DispatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopCost {
    pub cpu_ns: u64,
    pub latency_ns: u64,
}

/// Cost of hop `hop` (1-based) of a chain in `mode`.
pub fn path_cost(profile: &LatencyProfile, mode: DispatchMode, hop: u32) -> HopCost {
    assert!(hop >= 1, "hops are numbered from 1");
    let p = profile;
    let cpu_ns = match (mode, hop) {
        (DispatchMode::Baseline, _) | (_, 1) => p.software_cpu_ns(),
        (DispatchMode::SyscallHook, _) => p.software_cpu_ns() - p.crossing_ns - p.syscall_ns,
        (DispatchMode::DriverHook, _) => p.driver_ns + p.sfunc_exec_ns,
    };
    HopCost {
        cpu_ns,
        latency_ns: cpu_ns + p.device_ns,
    }
}

/// Cores with FIFO reservations. Worker `w` runs on core `w % cores`.
#[derive(Debug, Clone)]
pub struct CpuModel {
    busy_until: Vec<u64>,
    busy_total: Vec<u64>,
    intervals: Vec<Vec<(u64, u64)>>,
}

impl CpuModel {
    pub const DEFAULT_CORES: usize = 6;

    pub fn new(cores: usize) -> Self {
        assert!(cores >= 1);
        Self {
            busy_until: vec![0; cores],
            busy_total: vec![0; cores],
            intervals: vec![Vec::new(); cores],
        }
    }

    pub fn cores(&self) -> usize {
        self.busy_until.len()
    }

    pub fn core_of(&self, worker: usize) -> usize {
        worker % self.cores()
    }

    /// Reserves `cost` ns on the worker's core no earlier than `at`;
    /// returns the finish time.
    pub fn reserve(&mut self, worker: usize, at: u64, cost: u64) -> u64 {
        let c = self.core_of(worker);
        let start = self.busy_until[c].max(at);
        let end = start + cost;
        if cost > 0 {
            self.busy_until[c] = end;
            self.busy_total[c] += cost;
            match self.intervals[c].last_mut() {
                Some(last) if last.1 == start => last.1 = end,
                _ => self.intervals[c].push((start, end)),
            }
        }
        end
    }

    pub fn busy_total(&self) -> u64 {
        self.busy_total.iter().sum()
    }

    pub fn per_core_busy(&self) -> &[u64] {
        &self.busy_total
    }

    /// Busy time of all cores that falls inside `[from, to)`.
    pub fn busy_in(&self, from: u64, to: u64) -> u64 {
        self.intervals
            .iter()
            .flatten()
            .map(|&(s, e)| e.min(to).saturating_sub(s.max(from)))
            .sum()
    }

    pub fn intervals(&self, core: usize) -> &[(u64, u64)] {
        &self.intervals[core]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IoError {
    #[error("EEXTENT: extent cache invalidated")]
    Extent,
    #[error("EBOUND: {0}")]
    Bound(ExecError),
    #[error("EFAULT: {0}")]
    Fault(ExecError),
    #[error("ERANGE: offset {offset} len {len} outside file")]
    Range { offset: u64, len: u64 },
    #[error("EBADF: no open file {0}")]
    BadFd(u32),
    #[error("ENOTINSTALLED: no valid installation on fd {0}")]
    NotInstalled(u32),
    #[error("EINVAL: {0}")]
    Invalid(String),
    #[error("install rejected: {0}")]
    Install(ExtentError),
    #[error("device: {0}")]
    Device(DeviceError),
}

impl IoError {
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Extent => "EEXTENT",
            IoError::Bound(_) => "EBOUND",
            IoError::Fault(_) => "EFAULT",
            IoError::Range { .. } => "ERANGE",
            IoError::BadFd(_) => "EBADF",
            IoError::NotInstalled(_) => "ENOTINSTALLED",
            IoError::Invalid(_) => "EINVAL",
            IoError::Install(_) => "EINSTALL",
            IoError::Device(_) => "EDEVICE",
        }
    }
}

impl From<DeviceError> for IoError {
    fn from(e: DeviceError) -> Self {
        IoError::Device(e)
    }
}

pub type ChainId = u64;
pub type BatchId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainOutput {
    Returned(Vec<u8>),
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainResult {
    pub id: ChainId,
    pub worker: usize,
    pub batch: Option<BatchId>,
    pub mode: DispatchMode,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Hops whose device phase completed.
    pub hops: u32,
    /// File offsets read, in order.
    pub pages: Vec<u64>,
    pub cpu_ns: u64,
    pub device_ios: u32,
    pub split_hops: u32,
    pub outcome: Result<ChainOutput, IoError>,
}

impl ChainResult {
    pub fn latency_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

/// A request to run a storage-function chain, or a plain read when
/// `program` is `None`.
#[derive(Debug, Clone)]
pub struct ChainRequest {
    pub fd: u32,
    pub program: Option<VerifiedProgram>,
    pub start_offset: u64,
    /// Bytes per hop; must equal the program's block size when one is set.
    pub len: u64,
    pub mode: DispatchMode,
    pub hop_limit: u32,
    pub worker: usize,
}

impl ChainRequest {
    pub fn lookup(fd: u32, program: VerifiedProgram, mode: DispatchMode) -> Self {
        let len = program.block_size as u64;
        Self {
            fd,
            program: Some(program),
            start_offset: 0,
            len,
            mode,
            hop_limit: ChainBudget::DEFAULT_HOP_LIMIT,
            worker: 0,
        }
    }

    pub fn read(fd: u32, offset: u64, len: u64) -> Self {
        Self {
            fd,
            program: None,
            start_offset: offset,
            len,
            mode: DispatchMode::Baseline,
            hop_limit: 0,
            worker: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstallHandle {
    pub fd: u32,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheEventKind {
    Install { generation: u64 },
    Invalidate { aborted: usize },
}

/// Install/invalidate history. `order` shares a counter with device
/// request ids so the two logs interleave exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEvent {
    pub order: u64,
    pub at_ns: u64,
    pub fd: u32,
    pub kind: CacheEventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StackCounters {
    pub resubmit_driver: u64,
    pub resubmit_syscall: u64,
    pub split_hops: u64,
    pub aborts: BTreeMap<&'static str, u64>,
    pub chains_started: u64,
    pub chains_finished: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub profile: LatencyProfile,
    pub device: DeviceConfig,
    pub cores: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            profile: LatencyProfile::default(),
            device: DeviceConfig::default(),
            cores: CpuModel::DEFAULT_CORES,
        }
    }
}

#[derive(Debug)]
struct FileState {
    map: ExtentMap,
    cache: Option<ExtentCache>,
    generation: u64,
    installed: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Cpu,
    Device,
    Parked,
}

#[derive(Debug)]
struct Chain {
    req: ChainRequest,
    batch: Option<BatchId>,
    generation: u64,
    budget: ChainBudget,
    start_ns: u64,
    hop: u32,
    offset: u64,
    phase: Phase,
    runs: Vec<(u64, u64)>,
    split: bool,
    outstanding: usize,
    buf: Vec<u8>,
    pages: Vec<u64>,
    cpu_ns: u64,
    device_ios: u32,
    split_hops: u32,
}

#[derive(Debug)]
struct Batch {
    worker: usize,
    live: usize,
    parked: Vec<ChainId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Invalidate { fd: u32 },
    Submit { chain: ChainId, hop: u32 },
}

/// The simulated stack: CPU, device, files, caches and chains in one
/// deterministic event loop.
#[derive(Debug)]
pub struct Stack {
    profile: LatencyProfile,
    cpu: CpuModel,
    device: Device,
    files: Vec<FileState>,
    chains: BTreeMap<ChainId, Chain>,
    batches: BTreeMap<BatchId, Batch>,
    events: BinaryHeap<Reverse<(u64, u8, u64, Event)>>,
    seq: u64,
    order: u64,
    now: u64,
    next_chain: ChainId,
    next_batch: BatchId,
    requests: HashMap<u64, (ChainId, u32, usize)>,
    finished: Vec<ChainResult>,
    cache_log: Vec<CacheEvent>,
    counters: StackCounters,
}

const PRIO_INVALIDATE: u8 = 0;
const PRIO_HOP: u8 = 2;

impl Stack {
    pub fn new(config: StackConfig, store: BlockStore) -> Result<Self, IoError> {
        let mut dev = config.device;
        dev.service_ns = config.profile.device_ns;
        if config.cores == 0 {
            return Err(IoError::Invalid("cores must be >= 1".into()));
        }
        Ok(Self {
            profile: config.profile,
            cpu: CpuModel::new(config.cores),
            device: Device::new(dev, store)?,
            files: Vec::new(),
            chains: BTreeMap::new(),
            batches: BTreeMap::new(),
            events: BinaryHeap::new(),
            seq: 0,
            order: 0,
            now: 0,
            next_chain: 0,
            next_batch: 0,
            requests: HashMap::new(),
            finished: Vec::new(),
            cache_log: Vec::new(),
            counters: StackCounters::default(),
        })
    }

    /// Stack over a single contiguous file holding `image`, opened as fd 0.
    pub fn with_image(config: StackConfig, image: &[u8]) -> Result<Self, IoError> {
        let map = ExtentMap::contiguous(0, image.len() as u64);
        let mut bytes = image.to_vec();
        bytes.resize(map.file_len() as usize, 0);
        let mut s = Self::new(config, BlockStore::from_bytes(bytes))?;
        s.open(map)?;
        Ok(s)
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.profile
    }

    pub fn cpu(&self) -> &CpuModel {
        &self.cpu
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn now_ns(&self) -> u64 {
        self.now
    }

    pub fn counters(&self) -> &StackCounters {
        &self.counters
    }

    pub fn cache_log(&self) -> &[CacheEvent] {
        &self.cache_log
    }

    pub fn in_flight(&self) -> usize {
        self.chains.len()
    }

    fn next_order(&mut self) -> u64 {
        self.order += 1;
        self.order
    }

    pub fn open(&mut self, map: ExtentMap) -> Result<u32, IoError> {
        let blocks = self.device.store().blocks();
        if map.extents().iter().any(|e| e.pba_end() > blocks) {
            return Err(IoError::Invalid("extent beyond device".into()));
        }
        self.files.push(FileState {
            map,
            cache: None,
            generation: 0,
            installed: None,
        });
        Ok(self.files.len() as u32 - 1)
    }

    fn file(&self, fd: u32) -> Result<&FileState, IoError> {
        self.files.get(fd as usize).ok_or(IoError::BadFd(fd))
    }

    pub fn extent_map(&self, fd: u32) -> Result<&ExtentMap, IoError> {
        Ok(&self.file(fd)?.map)
    }

    pub fn cache(&self, fd: u32) -> Option<&ExtentCache> {
        self.files.get(fd as usize)?.cache.as_ref()
    }

    pub fn is_installed(&self, fd: u32) -> bool {
        self.cache(fd).is_some_and(ExtentCache::is_valid)
    }

    /// Attaches a verified program to `fd` and snapshots its extents.
    /// Reinstalling over a live installation invalidates it first.
    pub fn install(&mut self, fd: u32, program: &VerifiedProgram) -> Result<InstallHandle, IoError> {
        let f = self.file(fd)?;
        let cache = ExtentCache::new(fd, &f.map, f.generation + 1).map_err(IoError::Install)?;
        if self.is_installed(fd) {
            self.invalidate(fd);
        }
        let f = &mut self.files[fd as usize];
        f.generation += 1;
        let generation = f.generation;
        f.cache = Some(cache);
        f.installed = Some(program.name.clone());
        let order = self.next_order();
        self.cache_log.push(CacheEvent {
            order,
            at_ns: self.now,
            fd,
            kind: CacheEventKind::Install { generation },
        });
        Ok(InstallHandle { fd, generation })
    }

    /// Drops the fd's extent cache and aborts its in-flight driver chains.
    pub fn invalidate(&mut self, fd: u32) -> usize {
        let Some(cache) = self.files.get_mut(fd as usize).and_then(|f| f.cache.as_mut()) else {
            return 0;
        };
        if !cache.is_valid() {
            return 0;
        }
        cache.invalidate();
        let victims: Vec<ChainId> = self
            .chains
            .iter()
            .filter(|(_, c)| c.req.fd == fd && c.req.mode == DispatchMode::DriverHook)
            .map(|(id, _)| *id)
            .collect();
        for id in &victims {
            self.abort(*id, IoError::Extent);
        }
        let order = self.next_order();
        self.cache_log.push(CacheEvent {
            order,
            at_ns: self.now,
            fd,
            kind: CacheEventKind::Invalidate {
                aborted: victims.len(),
            },
        });
        victims.len()
    }

    /// Queues invalidations of `fd` at the given virtual times.
    pub fn schedule_invalidations(&mut self, fd: u32, times: &[u64]) {
        for &t in times {
            self.push(t.max(self.now), PRIO_INVALIDATE, Event::Invalidate { fd });
        }
    }

    fn push(&mut self, at: u64, prio: u8, ev: Event) {
        self.seq += 1;
        self.events.push(Reverse((at, prio, self.seq, ev)));
    }

    fn check_request(&self, req: &ChainRequest) -> Result<(), IoError> {
        let f = self.file(req.fd)?;
        if req.len == 0 || !req.len.is_multiple_of(BLOCK_SIZE as u64) {
            return Err(IoError::Invalid(format!("length {} not block aligned", req.len)));
        }
        if let Some(p) = &req.program {
            if p.block_size as u64 != req.len {
                return Err(IoError::Invalid("hop length differs from program block size".into()));
            }
        } else if req.mode != DispatchMode::Baseline {
            return Err(IoError::Invalid("plain reads use the baseline path".into()));
        }
        if req.mode == DispatchMode::DriverHook && !f.cache.as_ref().is_some_and(|c| c.is_valid()) {
            return Err(IoError::NotInstalled(req.fd));
        }
        Ok(())
    }

    fn new_chain(&mut self, req: ChainRequest, batch: Option<BatchId>, at: u64) -> ChainId {
        let id = self.next_chain;
        self.next_chain += 1;
        self.counters.chains_started += 1;
        let generation = self.files[req.fd as usize].generation;
        self.chains.insert(id, Chain {
            budget: ChainBudget::new(req.hop_limit),
            offset: req.start_offset,
            req,
            batch,
            generation,
            start_ns: at,
            hop: 0,
            phase: Phase::Cpu,
            runs: Vec::new(),
            split: false,
            outstanding: 0,
            buf: Vec::new(),
            pages: Vec::new(),
            cpu_ns: 0,
            device_ios: 0,
            split_hops: 0,
        });
        id
    }

    /// Starts a synchronous chain at virtual time `at` (≥ now).
    pub fn start_chain(&mut self, req: ChainRequest, at: u64) -> Result<ChainId, IoError> {
        self.check_request(&req)?;
        let at = at.max(self.now);
        let id = self.new_chain(req, None, at);
        let cost = path_cost(&self.profile, self.chains[&id].req.mode, 1).cpu_ns;
        self.begin_hop(id, at, cost, false);
        Ok(id)
    }

    /// Submits `reqs` as one batch: a single crossing for the batch, then
    /// per-op submission work back to back on the worker's core.
    pub fn submit_batch(
        &mut self,
        worker: usize,
        reqs: Vec<ChainRequest>,
        at: u64,
    ) -> Result<(BatchId, Vec<ChainId>), IoError> {
        if reqs.is_empty() {
            return Err(IoError::Invalid("empty batch".into()));
        }
        for r in &reqs {
            self.check_request(r)?;
        }
        let at = at.max(self.now);
        let bid = self.next_batch;
        self.next_batch += 1;
        let ids: Vec<ChainId> = reqs
            .into_iter()
            .map(|mut r| {
                r.worker = worker;
                self.new_chain(r, Some(bid), at)
            })
            .collect();
        self.batches.insert(bid, Batch {
            worker,
            live: ids.len(),
            parked: Vec::new(),
        });
        self.issue_round(worker, &ids, at);
        Ok((bid, ids))
    }

    fn issue_round(&mut self, worker: usize, ids: &[ChainId], at: u64) {
        let crossing = self.profile.crossing_ns;
        let per_op = self.profile.batched_op_cpu_ns();
        let mut t = self.cpu.reserve(worker, at, crossing);
        for (i, id) in ids.iter().enumerate() {
            if i == 0 {
                self.chains.get_mut(id).unwrap().cpu_ns += crossing;
            }
            t = self.begin_hop(*id, t, per_op, false);
        }
    }

    /// Plans and charges the next hop; returns when its CPU phase ends.
    fn begin_hop(&mut self, id: ChainId, at: u64, cpu_cost: u64, split: bool) -> u64 {
        let worker = self.chains[&id].req.worker;
        let end = self.cpu.reserve(worker, at, cpu_cost);
        let c = self.chains.get_mut(&id).unwrap();
        c.hop += 1;
        c.cpu_ns += cpu_cost;
        c.phase = Phase::Cpu;
        c.split = split;
        let hop = c.hop;
        self.push(end, PRIO_HOP, Event::Submit { chain: id, hop });
        end
    }

    fn abort(&mut self, id: ChainId, err: IoError) {
        self.finish(id, Err(err));
    }

    fn finish(&mut self, id: ChainId, outcome: Result<ChainOutput, IoError>) {
        let Some(c) = self.chains.remove(&id) else {
            return;
        };
        if let Err(e) = &outcome {
            *self.counters.aborts.entry(e.code()).or_default() += 1;
        }
        self.counters.chains_finished += 1;
        let hops = c.pages.len() as u32;
        self.finished.push(ChainResult {
            id,
            worker: c.req.worker,
            batch: c.batch,
            mode: c.req.mode,
            start_ns: c.start_ns,
            end_ns: self.now,
            hops,
            pages: c.pages,
            cpu_ns: c.cpu_ns,
            device_ios: c.device_ios,
            split_hops: c.split_hops,
            outcome,
        });
        if let Some(bid) = c.batch {
            let b = self.batches.get_mut(&bid).unwrap();
            b.live -= 1;
            self.maybe_release_round(bid);
        }
    }

    fn maybe_release_round(&mut self, bid: BatchId) {
        let b = &self.batches[&bid];
        if b.live == 0 {
            self.batches.remove(&bid);
        } else if b.parked.len() == b.live {
            let worker = b.worker;
            let ids = std::mem::take(&mut self.batches.get_mut(&bid).unwrap().parked);
            let now = self.now;
            self.issue_round(worker, &ids, now);
        }
    }

    /// Physical runs for the hop at the chain's current offset. Hops other
    /// than driver resubmissions go through the file system's map.
    fn plan_runs(&self, c: &Chain) -> Result<(Vec<(u64, u64)>, bool), IoError> {
        let f = &self.files[c.req.fd as usize];
        let range = IoError::Range {
            offset: c.offset,
            len: c.req.len,
        };
        let via_cache = c.req.mode == DispatchMode::DriverHook && c.hop >= 2 && !c.split;
        if via_cache {
            let cache = f.cache.as_ref().ok_or(IoError::Extent)?;
            if cache.generation() != c.generation {
                return Err(IoError::Extent);
            }
            return match cache.translate(c.offset, c.req.len) {
                Translation::Single { pba } => Ok((vec![(pba, c.req.len)], true)),
                Translation::Split => unreachable!("split hops are demoted before submission"),
                Translation::Invalid(InvalidReason::CacheInvalid) => Err(IoError::Extent),
                Translation::Invalid(InvalidReason::OutOfBounds) => Err(range),
            };
        }
        let runs = f.map.map_range(c.offset, c.req.len).map_err(|_| range)?;
        Ok((runs, c.req.mode == DispatchMode::DriverHook))
    }

    fn submit_hop(&mut self, id: ChainId) {
        let (runs, tagged) = match self.plan_runs(&self.chains[&id]) {
            Ok(r) => r,
            Err(e) => return self.abort(id, e),
        };
        let c = &self.chains[&id];
        let tag = tagged.then_some(ChainTag {
            fd: c.req.fd,
            chain: id,
            generation: c.generation,
        });
        let hop = c.hop;
        for (i, &(pba, len)) in runs.iter().enumerate() {
            let request_id = self.next_order();
            let res = self.device.submit(DeviceRequest {
                request_id,
                pba,
                len: len as usize,
                tag,
                submit_ns: self.now,
            });
            if let Err(e) = res {
                return self.abort(id, e.into());
            }
            self.requests.insert(request_id, (id, hop, i));
        }
        let c = self.chains.get_mut(&id).unwrap();
        c.device_ios += runs.len() as u32;
        c.outstanding = runs.len();
        c.buf = vec![0; c.req.len as usize];
        c.runs = runs;
        c.phase = Phase::Device;
    }

    fn complete_io(&mut self, request_id: u64, data: Vec<u8>) {
        let Some((id, hop, run)) = self.requests.remove(&request_id) else {
            return;
        };
        let Some(c) = self.chains.get_mut(&id) else {
            return;
        };
        if c.hop != hop || c.phase != Phase::Device {
            return;
        }
        let at: u64 = c.runs[..run].iter().map(|r| r.1).sum();
        c.buf[at as usize..at as usize + data.len()].copy_from_slice(&data);
        c.outstanding -= 1;
        if c.outstanding > 0 {
            return;
        }
        c.pages.push(c.offset);
        if c.split {
            c.split_hops += 1;
        }
        let block = std::mem::take(&mut c.buf);
        let Some(program) = c.req.program.clone() else {
            return self.finish(id, Ok(ChainOutput::Returned(block)));
        };
        let exec = sfunc::execute(&program, &block, &mut c.budget, [0; 8]);
        debug_assert!(exec.as_ref().map_or(true, |o| o.executed <= program.insns.len()));
        match exec {
            Ok(out) => match out.action {
                Action::Return { buffer } => self.finish(id, Ok(ChainOutput::Returned(buffer))),
                Action::Drop => self.finish(id, Ok(ChainOutput::Dropped)),
                Action::Resubmit { file_offset } => self.resubmit(id, file_offset),
            },
            Err(e @ ExecError::HopLimit(_)) => self.abort(id, IoError::Bound(e)),
            Err(e) => self.abort(id, IoError::Fault(e)),
        }
    }

    fn resubmit(&mut self, id: ChainId, file_offset: u64) {
        let now = self.now;
        let c = self.chains.get_mut(&id).unwrap();
        c.offset = file_offset;
        let mode = c.req.mode;
        let next_hop = c.hop + 1;
        if let (Some(bid), DispatchMode::Baseline) = (c.batch, mode) {
            c.phase = Phase::Parked;
            self.batches.get_mut(&bid).unwrap().parked.push(id);
            return self.maybe_release_round(bid);
        }
        let mut split = false;
        if mode == DispatchMode::DriverHook {
            let f = &self.files[c.req.fd as usize];
            match f.cache.as_ref().map(|k| k.translate(file_offset, c.req.len)) {
                Some(Translation::Split) => split = true,
                Some(Translation::Single { .. }) | Some(Translation::Invalid(InvalidReason::OutOfBounds)) => {}
                _ => return self.abort(id, IoError::Extent),
            }
        }
        let cost = if split {
            self.counters.split_hops += 1;
            path_cost(&self.profile, DispatchMode::Baseline, next_hop).cpu_ns
        } else {
            match mode {
                DispatchMode::DriverHook => self.counters.resubmit_driver += 1,
                DispatchMode::SyscallHook => self.counters.resubmit_syscall += 1,
                DispatchMode::Baseline => {}
            }
            path_cost(&self.profile, mode, next_hop).cpu_ns
        };
        self.begin_hop(id, now, cost, split);
    }

    fn next_time(&self) -> Option<(u64, bool)> {
        let ev = self.events.peek().map(|Reverse((t, p, _, _))| (*t, *p));
        let dev = self.device.peek_next_ns();
        match (ev, dev) {
            (None, None) => None,
            (Some((t, _)), None) => Some((t, false)),
            (None, Some(d)) => Some((d, true)),
            (Some((t, p)), Some(d)) => {
                if t < d || (t == d && p == PRIO_INVALIDATE) {
                    Some((t, false))
                } else {
                    Some((d, true))
                }
            }
        }
    }

    /// Time of the next pending event, if any.
    pub fn peek_ns(&self) -> Option<u64> {
        self.next_time().map(|(t, _)| t)
    }

    /// Processes one event. Returns `false` when nothing is pending.
    pub fn step(&mut self) -> bool {
        let Some((t, device)) = self.next_time() else {
            return false;
        };
        debug_assert!(t >= self.now);
        self.now = t;
        if device {
            let c = self.device.step().expect("peeked completion");
            self.complete_io(c.request_id, c.data);
        } else {
            let Reverse((_, _, _, ev)) = self.events.pop().unwrap();
            match ev {
                Event::Invalidate { fd } => {
                    self.invalidate(fd);
                }
                Event::Submit { chain, hop } => {
                    if self.chains.get(&chain).is_some_and(|c| c.hop == hop && c.phase == Phase::Cpu) {
                        self.submit_hop(chain);
                    }
                }
            }
        }
        true
    }

    /// Runs until no chain is in flight and no event is pending before
    /// the next scheduled invalidation beyond the last chain.
    pub fn run_until_idle(&mut self) {
        while !self.chains.is_empty() && self.step() {}
    }

    /// Runs every pending event, including future invalidations.
    pub fn drain(&mut self) {
        while self.step() {}
    }

    pub fn take_finished(&mut self) -> Vec<ChainResult> {
        std::mem::take(&mut self.finished)
    }

    /// Runs one chain to completion on an otherwise idle stack.
    pub fn run_chain(&mut self, req: ChainRequest) -> Result<ChainResult, IoError> {
        let id = self.start_chain(req, self.now)?;
        self.run_until_idle();
        let mut done = self.take_finished();
        let pos = done.iter().position(|r| r.id == id).expect("chain finished");
        Ok(done.swap_remove(pos))
    }

    /// One baseline read through the file system.
    pub fn read_sync(&mut self, fd: u32, offset: u64, len: u64) -> Result<ChainResult, IoError> {
        let f = self.file(fd)?;
        f.map.map_range(offset, len).map_err(|_| IoError::Range { offset, len })?;
        let r = self.run_chain(ChainRequest::read(fd, offset, len))?;
        r.outcome.clone().map(|_| r)
    }

    /// Post-run safety audit over the device log: every tagged request
    /// lies inside the extents of the installation it was tagged with,
    /// and was issued while that installation was live.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let mut state: HashMap<u32, (u64, bool)> = HashMap::new();
        let mut snapshots: HashMap<(u32, u64), ExtentMap> = HashMap::new();
        for f in self.files.iter().enumerate() {
            if let Some(c) = &f.1.cache {
                snapshots.insert((f.0 as u32, c.generation()), c.snapshot().clone());
            }
        }
        let mut log = self.cache_log.iter().peekable();
        for ev in self.device.log() {
            while let Some(ce) = log.next_if(|ce| ce.order < ev.request_id) {
                let s = state.entry(ce.fd).or_insert((0, false));
                *s = match ce.kind {
                    CacheEventKind::Install { generation } => (generation, true),
                    CacheEventKind::Invalidate { .. } => (s.0, false),
                };
            }
            let Some(tag) = ev.tag else {
                continue;
            };
            report.tagged += 1;
            let live = state.get(&tag.fd).is_some_and(|&(g, v)| v && g == tag.generation);
            if !live {
                report.after_invalidation += 1;
            }
            // Maps never change in this model, so the live map stands in
            // for superseded snapshots.
            let map = snapshots
                .get(&(tag.fd, tag.generation))
                .unwrap_or(&self.files[tag.fd as usize].map);
            let inside = (ev.pba..ev.pba + ev.blocks)
                .all(|b| map.extents().iter().any(|e| e.contains_pba(b)));
            if !inside {
                report.outside_extents += 1;
            }
        }
        report
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub tagged: u64,
    pub outside_extents: u64,
    pub after_invalidation: u64,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.outside_extents == 0 && self.after_invalidation == 0
    }
}
