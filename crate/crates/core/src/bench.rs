//! Closed-loop lookup workloads over the simulated stack.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::btree::{self, TreeImage};
use crate::iostack::{
    AuditReport, CacheEventKind, ChainOutput, ChainRequest, ChainResult, DispatchMode, IoError,
    Stack, StackConfig,
};
use crate::sfunc::ChainBudget;
use crate::xcache::{invalidation_times, ExtentMap};

/// Worker counts used for thread sweeps.
pub const WORKER_SWEEP: [usize; 6] = [1, 2, 4, 6, 8, 12];
pub const MAX_DEPTH: u32 = 10;
pub const MAX_WORKERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submission {
    /// One `read()` per hop issued by each worker.
    Sync,
    /// Batched submission of `batch` lookups at a time.
    Uring { batch: usize },
}

impl Submission {
    pub fn batch(&self) -> usize {
        match self {
            Submission::Sync => 0,
            Submission::Uring { batch } => *batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub depth: u32,
    pub workers: usize,
    pub submission: Submission,
    pub mode: DispatchMode,
    pub duration_ns: u64,
    pub seed: u64,
    pub stack: StackConfig,
    pub hop_limit: u32,
    /// Mean seconds between extent remaps; `None` disables them.
    pub invalidation_mean_s: Option<f64>,
    /// Prebuilt image and extent layout; the standard tree for `depth`
    /// when absent.
    pub layout: Option<Arc<Layout>>,
}

/// A tree image stored through an explicit extent map.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub image: TreeImage,
    pub map: ExtentMap,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            workers: 1,
            submission: Submission::Sync,
            mode: DispatchMode::Baseline,
            duration_ns: 10_000_000,
            seed: 1,
            stack: StackConfig::default(),
            hop_limit: ChainBudget::DEFAULT_HOP_LIMIT,
            invalidation_mean_s: None,
            layout: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error("tree: {0}")]
    Tree(#[from] btree::BTreeError),
    #[error("stack: {0}")]
    Io(#[from] IoError),
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return bad(format!("depth {} outside 1..={MAX_DEPTH}", self.depth));
        }
        if !(1..=MAX_WORKERS).contains(&self.workers) {
            return bad(format!("workers {} outside 1..={MAX_WORKERS}", self.workers));
        }
        if self.submission.batch() == 0 && self.submission != Submission::Sync {
            return bad("batch size must be >= 1".into());
        }
        if self.duration_ns == 0 {
            return bad("duration must be > 0".into());
        }
        if self.hop_limit == 0 {
            return bad("hop_limit must be >= 1".into());
        }
        if let Some(m) = self.invalidation_mean_s {
            if m.is_nan() || m <= 0.0 {
                return bad(format!("invalidation interval {m} must be > 0"));
            }
        }
        if let Some(l) = &self.layout {
            if l.image.depth != self.depth {
                return bad(format!(
                    "depth {} does not match the image depth {}",
                    self.depth, l.image.depth
                ));
            }
        }
        if self.stack.cores == 0 {
            return bad("cores must be >= 1".into());
        }
        self.stack
            .device
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub lookups: u64,
    pub elapsed_ns: u64,
    pub lookups_per_sec: f64,
    pub mean_lat_ns: f64,
    pub p99_lat_ns: u64,
    pub device_ios: u64,
    pub device_iops: f64,
    pub cpu_util: f64,
    pub per_core_util: Vec<f64>,
    pub resubmit_driver: u64,
    pub resubmit_syscall: u64,
    pub split_hops: u64,
    pub aborts_extent: u64,
    pub aborts_bound: u64,
    pub aborts_other: u64,
    /// Lookups whose result disagreed with the key's stored value.
    pub wrong_results: u64,
    pub invalidations: u64,
    /// Chains aborted by invalidation events, per the cache log.
    pub invalidation_aborts: u64,
    pub pages_read_mismatch: u64,
    pub audit: AuditReport,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[u64], pct: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

struct Workload {
    image: TreeImage,
    map: Option<ExtentMap>,
    pairs: Vec<(u64, u64)>,
}

impl Workload {
    fn new(depth: u32) -> Result<Self, BenchError> {
        let image = btree::standard_tree(depth)?;
        let pairs = btree::standard_pairs(image.keys);
        Ok(Self {
            image,
            map: None,
            pairs,
        })
    }

    fn for_config(cfg: &BenchConfig) -> Result<Self, BenchError> {
        match &cfg.layout {
            None => Self::new(cfg.depth),
            Some(l) => Ok(Self {
                pairs: btree::collect_pairs(&l.image)?.into_iter().collect(),
                image: l.image.clone(),
                map: Some(l.map.clone()),
            }),
        }
    }

    fn stack(&self, cfg: StackConfig) -> Result<Stack, IoError> {
        match &self.map {
            None => Stack::with_image(cfg, &self.image.bytes),
            Some(map) => {
                let store = btree::physical_layout(&self.image.bytes, map);
                let mut s = Stack::new(cfg, store)?;
                s.open(map.clone())?;
                Ok(s)
            }
        }
    }
}

struct Driver<'a> {
    cfg: &'a BenchConfig,
    stack: Stack,
    rng: ChaCha8Rng,
    work: &'a Workload,
    expected: HashMap<u64, usize>,
    latencies: Vec<u64>,
    lookups: u64,
    last_end: u64,
    wrong: u64,
    pages_mismatch: u64,
    batch_left: HashMap<u64, usize>,
}

impl Driver<'_> {
    fn next_request(&mut self, worker: usize) -> (ChainRequest, usize) {
        let i = self.rng.random_range(0..self.work.pairs.len());
        let key = self.work.pairs[i].0;
        let prog = btree::compile_lookup_for(key, self.work.image.page_size);
        let mut req = ChainRequest::lookup(0, prog, self.cfg.mode);
        req.hop_limit = self.cfg.hop_limit;
        req.worker = worker;
        (req, i)
    }

    fn ensure_installed(&mut self) -> Result<(), BenchError> {
        if self.cfg.mode == DispatchMode::DriverHook && !self.stack.is_installed(0) {
            let prog = btree::compile_lookup_for(0, self.work.image.page_size);
            self.stack.install(0, &prog)?;
        }
        Ok(())
    }

    fn issue(&mut self, worker: usize, at: u64) -> Result<(), BenchError> {
        self.ensure_installed()?;
        match self.cfg.submission {
            Submission::Sync => {
                let (req, key) = self.next_request(worker);
                let id = self.stack.start_chain(req, at)?;
                self.expected.insert(id, key);
            }
            Submission::Uring { batch } => {
                let (reqs, keys): (Vec<_>, Vec<_>) =
                    (0..batch).map(|_| self.next_request(worker)).unzip();
                let (bid, ids) = self.stack.submit_batch(worker, reqs, at)?;
                for (id, key) in ids.into_iter().zip(keys) {
                    self.expected.insert(id, key);
                }
                self.batch_left.insert(bid, batch);
            }
        }
        Ok(())
    }

    fn record(&mut self, r: &ChainResult) {
        let idx = self.expected.remove(&r.id).expect("issued chain");
        self.last_end = self.last_end.max(r.end_ns);
        let Ok(out) = &r.outcome else {
            return;
        };
        let want = self.work.pairs[idx].1.to_le_bytes();
        if *out != ChainOutput::Returned(want.to_vec()) {
            self.wrong += 1;
        }
        if r.hops != self.work.image.depth {
            self.pages_mismatch += 1;
        }
        self.lookups += 1;
        self.latencies.push(r.latency_ns());
    }

    /// True when the worker that owned `r` should issue again.
    fn worker_free(&mut self, r: &ChainResult) -> bool {
        match r.batch {
            None => true,
            Some(bid) => {
                let left = self.batch_left.get_mut(&bid).expect("batch");
                *left -= 1;
                if *left == 0 {
                    self.batch_left.remove(&bid);
                    true
                } else {
                    false
                }
            }
        }
    }
}

/// Runs one closed-loop benchmark. Workers start lookups until the
/// virtual duration elapses; chains in flight at that point drain.
pub fn run(cfg: &BenchConfig) -> Result<Metrics, BenchError> {
    cfg.validate()?;
    let work = Workload::for_config(cfg)?;
    run_on(cfg, &work)
}

fn run_on(cfg: &BenchConfig, work: &Workload) -> Result<Metrics, BenchError> {
    let stack = work.stack(cfg.stack)?;
    let mut d = Driver {
        cfg,
        stack,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        work,
        expected: HashMap::new(),
        latencies: Vec::new(),
        lookups: 0,
        last_end: 0,
        wrong: 0,
        pages_mismatch: 0,
        batch_left: HashMap::new(),
    };
    if let Some(mean) = cfg.invalidation_mean_s {
        let times = invalidation_times(mean, cfg.duration_ns, cfg.seed ^ 0x1BAD_CAFE);
        d.stack.schedule_invalidations(0, &times);
    }
    for w in 0..cfg.workers {
        d.issue(w, 0)?;
    }
    while d.stack.in_flight() > 0 {
        d.stack.step();
        for r in d.stack.take_finished() {
            d.record(&r);
            if d.worker_free(&r) && d.stack.now_ns() < cfg.duration_ns {
                let now = d.stack.now_ns();
                d.issue(r.worker, now)?;
            }
        }
    }

    let elapsed = d.last_end.max(1);
    let secs = elapsed as f64 / 1e9;
    let stack = &d.stack;
    let counters = stack.counters();
    let device_ios = stack.device().log().len() as u64;
    let cpu = stack.cpu();
    let cores = cpu.cores();
    let per_core_util = (0..cores)
        .map(|c| {
            let busy: u64 = cpu
                .intervals(c)
                .iter()
                .map(|&(s, e)| e.min(elapsed).saturating_sub(s))
                .sum();
            busy as f64 / elapsed as f64
        })
        .collect::<Vec<_>>();
    let abort = |code: &str| counters.aborts.get(code).copied().unwrap_or(0);
    let aborts_extent = abort("EEXTENT");
    let aborts_bound = abort("EBOUND");
    let aborts_total: u64 = counters.aborts.values().sum();
    let (invalidations, invalidation_aborts) = stack
        .cache_log()
        .iter()
        .filter_map(|e| match e.kind {
            CacheEventKind::Invalidate { aborted } => Some(aborted as u64),
            _ => None,
        })
        .fold((0, 0), |(n, a), x| (n + 1, a + x));
    let mean = if d.latencies.is_empty() {
        0.0
    } else {
        d.latencies.iter().sum::<u64>() as f64 / d.latencies.len() as f64
    };
    Ok(Metrics {
        lookups: d.lookups,
        elapsed_ns: elapsed,
        lookups_per_sec: d.lookups as f64 / secs,
        mean_lat_ns: mean,
        p99_lat_ns: percentile(&d.latencies, 99.0),
        device_ios,
        device_iops: device_ios as f64 / secs,
        cpu_util: cpu.busy_in(0, elapsed) as f64 / (cores as f64 * elapsed as f64),
        per_core_util,
        resubmit_driver: counters.resubmit_driver,
        resubmit_syscall: counters.resubmit_syscall,
        split_hops: counters.split_hops,
        aborts_extent,
        aborts_bound,
        aborts_other: aborts_total - aborts_extent - aborts_bound,
        wrong_results: d.wrong,
        invalidations,
        invalidation_aborts,
        pages_read_mismatch: d.pages_mismatch,
        audit: stack.audit(),
    })
}

/// One benchmark run in CSV form.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub run_id: String,
    pub mode: DispatchMode,
    pub depth: u32,
    pub workers: usize,
    pub batch: usize,
    pub metrics: Metrics,
}

pub const CSV_HEADER: &str = "run_id,mode,depth,workers,batch,lookups_per_sec,mean_lat_ns,p99_lat_ns,device_iops,cpu_util,resubmit_driver,resubmit_syscall,aborts_extent,aborts_bound";

impl RunRow {
    pub fn new(run_id: impl Into<String>, cfg: &BenchConfig, metrics: Metrics) -> Self {
        Self {
            run_id: run_id.into(),
            mode: cfg.mode,
            depth: cfg.depth,
            workers: cfg.workers,
            batch: cfg.submission.batch(),
            metrics,
        }
    }

    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{:.3},{:.3},{},{:.3},{:.6},{},{},{},{}",
            self.run_id,
            self.mode.name(),
            self.depth,
            self.workers,
            self.batch,
            m.lookups_per_sec,
            m.mean_lat_ns,
            m.p99_lat_ns,
            m.device_iops,
            m.cpu_util,
            m.resubmit_driver,
            m.resubmit_syscall,
            m.aborts_extent,
            m.aborts_bound
        )
    }
}

pub fn to_csv(rows: &[RunRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// A hook run paired with the baseline run of the same cell and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub depth: u32,
    pub workers: usize,
    pub batch: usize,
    pub baseline: Metrics,
    pub hooked: Metrics,
}

impl SweepCell {
    pub fn ratio(&self) -> f64 {
        self.hooked.lookups_per_sec / self.baseline.lookups_per_sec
    }

    pub fn latency_reduction(&self) -> f64 {
        1.0 - self.hooked.mean_lat_ns / self.baseline.mean_lat_ns
    }
}

fn pair(base: &BenchConfig, mode: DispatchMode, work: &Workload) -> Result<SweepCell, BenchError> {
    let b = BenchConfig {
        mode: DispatchMode::Baseline,
        ..base.clone()
    };
    let h = BenchConfig { mode, ..base.clone() };
    b.validate()?;
    Ok(SweepCell {
        depth: base.depth,
        workers: base.workers,
        batch: base.submission.batch(),
        baseline: run_on(&b, work)?,
        hooked: run_on(&h, work)?,
    })
}

fn cells<F>(depths: &[u32], inner: &[usize], f: F) -> Result<Vec<SweepCell>, BenchError>
where
    F: Fn(u32, usize, &Workload) -> Result<SweepCell, BenchError> + Sync,
{
    let mut works = HashMap::new();
    for &d in depths {
        if let std::collections::hash_map::Entry::Vacant(e) = works.entry(d) {
            if !(1..=MAX_DEPTH).contains(&d) {
                return Err(BenchError::Config(format!("depth {d} outside 1..={MAX_DEPTH}")));
            }
            e.insert(Workload::new(d)?);
        }
    }
    let jobs: Vec<(u32, usize)> = depths
        .iter()
        .flat_map(|&d| inner.iter().map(move |&x| (d, x)))
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let mut out: Vec<Option<Result<SweepCell, BenchError>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(d, x)) = jobs.get(i) else {
                    break;
                };
                let r = f(d, x, &works[&d]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("job ran")).collect()
}

/// Throughput of `mode` against Baseline for every (depth, workers).
pub fn speedup_sweep(
    base: &BenchConfig,
    depths: &[u32],
    workers: &[usize],
    mode: DispatchMode,
) -> Result<Vec<SweepCell>, BenchError> {
    cells(depths, workers, |d, w, work| {
        let cfg = BenchConfig {
            depth: d,
            workers: w,
            submission: Submission::Sync,
            ..base.clone()
        };
        pair(&cfg, mode, work)
    })
}

/// Single-worker batched DriverHook against batched Baseline.
pub fn uring_sweep(
    base: &BenchConfig,
    depths: &[u32],
    batches: &[usize],
) -> Result<Vec<SweepCell>, BenchError> {
    cells(depths, batches, |d, k, work| {
        let cfg = BenchConfig {
            depth: d,
            workers: 1,
            submission: Submission::Uring { batch: k },
            ..base.clone()
        };
        pair(&cfg, DispatchMode::DriverHook, work)
    })
}

/// Single-worker mean latency per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub depth: u32,
    pub mode: DispatchMode,
    pub metrics: Metrics,
}

pub fn latency_sweep(base: &BenchConfig, depths: &[u32]) -> Result<Vec<LatencyRow>, BenchError> {
    let modes = [1usize, 2];
    let cells = cells(depths, &modes, |d, m, work| {
        let cfg = BenchConfig {
            depth: d,
            workers: 1,
            submission: Submission::Sync,
            ..base.clone()
        };
        pair(&cfg, DispatchMode::ALL[m], work)
    })?;
    let mut rows = Vec::new();
    for pair in cells.chunks(2) {
        let d = pair[0].depth;
        rows.push(LatencyRow {
            depth: d,
            mode: DispatchMode::Baseline,
            metrics: pair[0].baseline.clone(),
        });
        for (c, m) in pair.iter().zip([DispatchMode::SyscallHook, DispatchMode::DriverHook]) {
            rows.push(LatencyRow {
                depth: d,
                mode: m,
                metrics: c.hooked.clone(),
            });
        }
    }
    Ok(rows)
}

/// Rows for a set of sweep cells: baseline then hooked run per cell.
pub fn cell_rows(prefix: &str, base: &BenchConfig, mode: DispatchMode, cells: &[SweepCell]) -> Vec<RunRow> {
    let mut rows = Vec::new();
    for c in cells {
        for (m, metrics) in [(DispatchMode::Baseline, &c.baseline), (mode, &c.hooked)] {
            let cfg = BenchConfig {
                depth: c.depth,
                workers: c.workers,
                mode: m,
                submission: if c.batch == 0 {
                    Submission::Sync
                } else {
                    Submission::Uring { batch: c.batch }
                },
                ..base.clone()
            };
            let id = format!("{prefix}-{:04}", rows.len() + 1);
            rows.push(RunRow::new(id, &cfg, metrics.clone()));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: u32, workers: usize, mode: DispatchMode) -> BenchConfig {
        BenchConfig {
            depth,
            workers,
            mode,
            duration_ns: 2_000_000,
            ..Default::default()
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[5], 99.0), 5);
        assert_eq!(percentile(&[], 99.0), 0);
        let v: Vec<u64> = (1..=1000).rev().collect();
        assert_eq!(percentile(&v, 99.0), 990);
    }

    #[test]
    fn single_worker_latency_is_closed_form() {
        for mode in DispatchMode::ALL {
            let m = run(&cfg(5, 1, mode)).unwrap();
            let expect = match mode {
                DispatchMode::Baseline => 5 * 6272,
                DispatchMode::SyscallHook => 6272 + 4 * 5722,
                DispatchMode::DriverHook => 6272 + 4 * 3437,
            } as f64;
            assert_eq!(m.mean_lat_ns, expect);
            assert_eq!(m.p99_lat_ns, expect as u64);
            assert_eq!(m.wrong_results, 0);
            assert_eq!(m.device_ios, 5 * m.lookups);
        }
    }

    #[test]
    fn depth_one_has_no_speedup() {
        for mode in [DispatchMode::SyscallHook, DispatchMode::DriverHook] {
            let a = run(&cfg(1, 4, DispatchMode::Baseline)).unwrap();
            let b = run(&cfg(1, 4, mode)).unwrap();
            assert_eq!(a.lookups_per_sec, b.lookups_per_sec);
        }
    }

    #[test]
    fn three_level_single_worker_speedup() {
        let a = run(&cfg(3, 1, DispatchMode::Baseline)).unwrap();
        let b = run(&cfg(3, 1, DispatchMode::DriverHook)).unwrap();
        let r = b.lookups_per_sec / a.lookups_per_sec;
        assert!((r - 18816.0 / 13146.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn deterministic_per_seed() {
        let c = cfg(4, 6, DispatchMode::DriverHook);
        assert_eq!(run(&c).unwrap(), run(&c).unwrap());
        let other = BenchConfig { seed: 99, ..c.clone() };
        assert_eq!(run(&other).unwrap().lookups, run(&c).unwrap().lookups);
    }

    #[test]
    fn conservation_without_aborts() {
        for mode in DispatchMode::ALL {
            let m = run(&cfg(6, 12, mode)).unwrap();
            assert_eq!(m.device_ios, 6 * m.lookups);
            assert_eq!(m.aborts_extent + m.aborts_bound + m.aborts_other, 0);
            assert!(m.cpu_util <= 1.0);
        }
    }

    #[test]
    fn invalidations_only_abort() {
        let c = BenchConfig {
            invalidation_mean_s: Some(0.000_2),
            duration_ns: 5_000_000,
            ..cfg(6, 8, DispatchMode::DriverHook)
        };
        let m = run(&c).unwrap();
        assert!(m.invalidations > 5, "{}", m.invalidations);
        assert!(m.aborts_extent > 0);
        assert_eq!(m.aborts_extent, m.invalidation_aborts);
        assert_eq!(m.wrong_results, 0);
        assert!(m.audit.clean());
    }

    #[test]
    fn hop_limit_below_depth_aborts_everything() {
        let c = BenchConfig {
            hop_limit: 2,
            ..cfg(4, 2, DispatchMode::DriverHook)
        };
        let m = run(&c).unwrap();
        assert_eq!(m.lookups, 0);
        assert!(m.aborts_bound > 0);
    }

    #[test]
    fn uring_single_batch_matches_sync() {
        let a = run(&cfg(3, 1, DispatchMode::DriverHook)).unwrap();
        let b = run(&BenchConfig {
            submission: Submission::Uring { batch: 1 },
            ..cfg(3, 1, DispatchMode::DriverHook)
        })
        .unwrap();
        assert_eq!(a.mean_lat_ns, b.mean_lat_ns);
    }

    #[test]
    fn validation() {
        assert!(cfg(0, 1, DispatchMode::Baseline).validate().is_err());
        assert!(cfg(11, 1, DispatchMode::Baseline).validate().is_err());
        assert!(cfg(3, 13, DispatchMode::Baseline).validate().is_err());
        let z = BenchConfig {
            submission: Submission::Uring { batch: 0 },
            ..Default::default()
        };
        assert!(z.validate().is_err());
    }

    #[test]
    fn csv_shape() {
        let c = cfg(2, 1, DispatchMode::Baseline);
        let row = RunRow::new("r1", &c, run(&c).unwrap());
        let csv = to_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
        assert!(!csv.contains('"'));
        assert!(lines[1].starts_with("r1,baseline,2,1,0,"));
    }

    #[test]
    fn sweep_cells_share_seeds() {
        let base = BenchConfig {
            duration_ns: 1_000_000,
            ..Default::default()
        };
        let cells = speedup_sweep(&base, &[1, 2], &[1, 2], DispatchMode::DriverHook).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells[..2].iter().all(|c| c.depth == 1 && c.ratio() == 1.0));
        assert!(cells[2..].iter().all(|c| c.depth == 2 && c.ratio() > 1.0));
    }
}
