//! Discrete-event model of an NVMe device.
//!
//! The device has a fixed per-I/O service latency, a bounded number of
//! internal service slots, and a device-wide completion-rate cap. Reads are
//! served from a real block store so callers operate on genuine bytes.
//!
//! Completion times are decided at submission: a request starts service at
//! the earliest free slot (FIFO), finishes `service_ns` later, and is pushed
//! back if needed so that completions are spaced at least
//! `ceil(1e9 / max_iops)` ns apart.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const BLOCK_SIZE: usize = 512;

/// Simulated time in nanoseconds. Never moves backwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualClock {
    now_ns: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    /// Moves the clock forward to `t`.
    ///
    /// # Panics
    ///
    /// Panics if `t` is earlier than the current time.
    pub fn advance_to(&mut self, t: u64) {
        assert!(
            t >= self.now_ns,
            "clock moved backwards: now={} target={}",
            self.now_ns,
            t
        );
        self.now_ns = t;
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DeviceError {
    #[error("invalid device config: {0}")]
    InvalidConfig(String),
    #[error("request out of range: pba {pba} + {blocks} blocks exceeds capacity {capacity}")]
    OutOfRange { pba: u64, blocks: u64, capacity: u64 },
    #[error("request length {0} is not a positive multiple of 512")]
    BadLength(usize),
    #[error("submission queue full ({0} requests in flight)")]
    QueueFull(usize),
    #[error("submission at {submit_ns} ns is earlier than device time {now_ns} ns")]
    SubmitInPast { submit_ns: u64, now_ns: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub service_ns: u64,
    pub parallelism: usize,
    pub max_iops: u64,
    /// Bound on requests accepted but not yet completed.
    pub queue_bound: usize,
    pub seed: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            service_ns: 3224,
            parallelism: 64,
            max_iops: 5_000_000,
            queue_bound: 1024,
            seed: 0,
        }
    }
}

impl DeviceConfig {
    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> Result<(), DeviceError> {
        let mut problems = Vec::new();
        if self.service_ns == 0 {
            problems.push("service_ns must be > 0");
        }
        if self.parallelism == 0 {
            problems.push("parallelism must be >= 1");
        }
        if self.max_iops == 0 {
            problems.push("max_iops must be > 0");
        }
        if self.queue_bound == 0 {
            problems.push("queue_bound must be >= 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DeviceError::InvalidConfig(problems.join("; ")))
        }
    }

    /// Minimum gap between two consecutive completions.
    pub fn completion_spacing_ns(&self) -> u64 {
        1_000_000_000u64.div_ceil(self.max_iops)
    }
}

/// Identifies the chain a request belongs to when it was issued on a
/// descriptor with an installed storage function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainTag {
    pub fd: u32,
    pub chain: u64,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRequest {
    pub request_id: u64,
    pub pba: u64,
    pub len: usize,
    pub tag: Option<ChainTag>,
    pub submit_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub request_id: u64,
    pub data: Vec<u8>,
    pub tag: Option<ChainTag>,
    pub submit_ns: u64,
    pub complete_ns: u64,
}

/// One served request, as recorded in the device event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceEvent {
    pub seq: u64,
    pub request_id: u64,
    pub pba: u64,
    pub blocks: u64,
    pub tag: Option<ChainTag>,
    pub submit_ns: u64,
    pub start_ns: u64,
    pub complete_ns: u64,
}

/// Flat array of 512-byte blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockStore {
    bytes: Vec<u8>,
}

impl BlockStore {
    pub fn new(blocks: u64) -> Self {
        Self {
            bytes: vec![0; blocks as usize * BLOCK_SIZE],
        }
    }

    /// Wraps raw bytes, zero-padding to a whole number of blocks.
    pub fn from_bytes(mut bytes: Vec<u8>) -> Self {
        let rem = bytes.len() % BLOCK_SIZE;
        if rem != 0 {
            bytes.resize(bytes.len() + BLOCK_SIZE - rem, 0);
        }
        Self { bytes }
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self::from_bytes(fs::read(path)?))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, &self.bytes)
    }

    pub fn blocks(&self) -> u64 {
        (self.bytes.len() / BLOCK_SIZE) as u64
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn check(&self, pba: u64, len: usize) -> Result<(), DeviceError> {
        if len == 0 || !len.is_multiple_of(BLOCK_SIZE) {
            return Err(DeviceError::BadLength(len));
        }
        let blocks = (len / BLOCK_SIZE) as u64;
        if pba.checked_add(blocks).is_none_or(|end| end > self.blocks()) {
            return Err(DeviceError::OutOfRange {
                pba,
                blocks,
                capacity: self.blocks(),
            });
        }
        Ok(())
    }

    pub fn read(&self, pba: u64, len: usize) -> Result<Vec<u8>, DeviceError> {
        self.check(pba, len)?;
        let start = pba as usize * BLOCK_SIZE;
        Ok(self.bytes[start..start + len].to_vec())
    }

    /// Writes have no modeled latency; they exist for laying out images.
    pub fn write(&mut self, pba: u64, data: &[u8]) -> Result<(), DeviceError> {
        self.check(pba, data.len())?;
        let start = pba as usize * BLOCK_SIZE;
        self.bytes[start..start + data.len()].copy_from_slice(data);
        Ok(())
    }
}

#[derive(Debug)]
struct Pending {
    request_id: u64,
    pba: u64,
    len: usize,
    tag: Option<ChainTag>,
    submit_ns: u64,
}

#[derive(Debug)]
pub struct Device {
    config: DeviceConfig,
    store: BlockStore,
    clock: VirtualClock,
    /// Time at which each service slot becomes free.
    slots: BinaryHeap<Reverse<u64>>,
    last_complete_ns: Option<u64>,
    pending: BinaryHeap<Reverse<(u64, u64)>>,
    pending_reqs: std::collections::HashMap<u64, Pending>,
    next_seq: u64,
    log: Vec<DeviceEvent>,
}

impl Device {
    pub fn new(config: DeviceConfig, store: BlockStore) -> Result<Self, DeviceError> {
        config.validate()?;
        let slots = (0..config.parallelism).map(|_| Reverse(0)).collect();
        Ok(Self {
            config,
            store,
            clock: VirtualClock::new(),
            slots,
            last_complete_ns: None,
            pending: BinaryHeap::new(),
            pending_reqs: Default::default(),
            next_seq: 0,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn now_ns(&self) -> u64 {
        self.clock.now_ns()
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn log(&self) -> &[DeviceEvent] {
        &self.log
    }

    /// Accepts a request and schedules its completion.
    pub fn submit(&mut self, req: DeviceRequest) -> Result<u64, DeviceError> {
        if req.submit_ns < self.clock.now_ns() {
            return Err(DeviceError::SubmitInPast {
                submit_ns: req.submit_ns,
                now_ns: self.clock.now_ns(),
            });
        }
        self.store.check(req.pba, req.len)?;
        if self.pending.len() >= self.config.queue_bound {
            return Err(DeviceError::QueueFull(self.pending.len()));
        }
        self.clock.advance_to(req.submit_ns);

        let Reverse(slot_free) = self.slots.pop().expect("parallelism >= 1");
        let start = slot_free.max(req.submit_ns);
        let mut complete = start + self.config.service_ns;
        if let Some(last) = self.last_complete_ns {
            complete = complete.max(last + self.config.completion_spacing_ns());
        }
        self.slots.push(Reverse(complete));
        self.last_complete_ns = Some(complete);

        let seq = self.next_seq;
        self.next_seq += 1;
        self.log.push(DeviceEvent {
            seq,
            request_id: req.request_id,
            pba: req.pba,
            blocks: (req.len / BLOCK_SIZE) as u64,
            tag: req.tag,
            submit_ns: req.submit_ns,
            start_ns: start,
            complete_ns: complete,
        });
        self.pending.push(Reverse((complete, seq)));
        self.pending_reqs.insert(
            seq,
            Pending {
                request_id: req.request_id,
                pba: req.pba,
                len: req.len,
                tag: req.tag,
                submit_ns: req.submit_ns,
            },
        );
        Ok(complete)
    }

    /// Timestamp of the earliest pending completion.
    pub fn peek_next_ns(&self) -> Option<u64> {
        self.pending.peek().map(|Reverse((t, _))| *t)
    }

    /// Pops the earliest pending completion and advances the clock to it.
    pub fn step(&mut self) -> Option<Completion> {
        let Reverse((t, seq)) = self.pending.pop()?;
        self.clock.advance_to(t);
        let p = self.pending_reqs.remove(&seq).expect("pending entry");
        let data = self
            .store
            .read(p.pba, p.len)
            .expect("range checked at submission");
        Some(Completion {
            request_id: p.request_id,
            data,
            tag: p.tag,
            submit_ns: p.submit_ns,
            complete_ns: t,
        })
    }
}
