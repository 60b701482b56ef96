//! File extent maps and the NVMe-layer extent cache.
//!
//! The file system owns an [`ExtentMap`] per file. Installing a storage
//! function copies it into an [`ExtentCache`] that the driver layer uses to
//! turn file offsets produced by the function into physical blocks. Any
//! remap invalidates the whole cache; it stays unusable until reinstalled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::blockdev::BLOCK_SIZE;

const BS: u64 = BLOCK_SIZE as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    /// Byte offset in the file.
    pub file_off: u64,
    /// First physical block.
    pub pba: u64,
    /// Length in bytes.
    pub len: u64,
}

impl Extent {
    pub fn file_end(&self) -> u64 {
        self.file_off + self.len
    }

    pub fn pba_end(&self) -> u64 {
        self.pba + self.len / BS
    }

    pub fn contains_pba(&self, pba: u64) -> bool {
        pba >= self.pba && pba < self.pba_end()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExtentError {
    #[error("extent {0} is not 512-byte aligned or is empty")]
    Misaligned(usize),
    #[error("extent {0} overlaps or is out of order in file space")]
    FileOverlap(usize),
    #[error("extent {0} overlaps another extent in physical space")]
    PhysOverlap(usize),
    #[error("file has a hole at offset {0}")]
    Hole(u64),
    #[error("extent {0} extends past end of file")]
    PastEof(usize),
}

/// Sorted, non-overlapping file-offset to physical-block map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtentMap {
    extents: Vec<Extent>,
    file_len: u64,
}

impl ExtentMap {
    /// Builds a map, checking ordering and overlap. Holes are allowed here;
    /// [`ExtentMap::check_no_holes`] is enforced at install time.
    pub fn new(mut extents: Vec<Extent>, file_len: u64) -> Result<Self, ExtentError> {
        extents.sort_by_key(|e| e.file_off);
        for (i, e) in extents.iter().enumerate() {
            if e.len == 0 || e.len % BS != 0 || e.file_off % BS != 0 {
                return Err(ExtentError::Misaligned(i));
            }
            if e.file_end() > file_len {
                return Err(ExtentError::PastEof(i));
            }
            if i > 0 && extents[i - 1].file_end() > e.file_off {
                return Err(ExtentError::FileOverlap(i));
            }
        }
        let mut by_pba: Vec<(usize, &Extent)> = extents.iter().enumerate().collect();
        by_pba.sort_by_key(|(_, e)| e.pba);
        for w in by_pba.windows(2) {
            if w[0].1.pba_end() > w[1].1.pba {
                return Err(ExtentError::PhysOverlap(w[1].0));
            }
        }
        Ok(Self { extents, file_len })
    }

    /// A single extent covering the whole file.
    pub fn contiguous(pba: u64, file_len: u64) -> Self {
        let len = file_len.div_ceil(BS) * BS;
        let extents = if len == 0 {
            Vec::new()
        } else {
            vec![Extent {
                file_off: 0,
                pba,
                len,
            }]
        };
        Self {
            extents,
            file_len: len,
        }
    }

    pub fn extents(&self) -> &[Extent] {
        &self.extents
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn check_no_holes(&self) -> Result<(), ExtentError> {
        let mut pos = 0;
        for e in &self.extents {
            if e.file_off != pos {
                return Err(ExtentError::Hole(pos));
            }
            pos = e.file_end();
        }
        if pos != self.file_len {
            return Err(ExtentError::Hole(pos));
        }
        Ok(())
    }

    fn find(&self, file_off: u64) -> Option<&Extent> {
        let idx = self.extents.partition_point(|e| e.file_end() <= file_off);
        self.extents.get(idx).filter(|e| e.file_off <= file_off)
    }

    /// Physical runs backing `[file_off, file_off+len)`, merging physically
    /// contiguous neighbours. This is the file-system path; the BIO layer
    /// issues one device request per run.
    pub fn map_range(&self, file_off: u64, len: u64) -> Result<Vec<(u64, u64)>, MapError> {
        if len == 0 || !len.is_multiple_of(BS) || !file_off.is_multiple_of(BS) {
            return Err(MapError::Misaligned);
        }
        if file_off.checked_add(len).is_none_or(|end| end > self.file_len) {
            return Err(MapError::BeyondEof);
        }
        let mut runs: Vec<(u64, u64)> = Vec::new();
        let mut pos = file_off;
        let end = file_off + len;
        while pos < end {
            let e = self.find(pos).ok_or(MapError::Hole(pos))?;
            let take = (e.file_end() - pos).min(end - pos);
            let pba = e.pba + (pos - e.file_off) / BS;
            match runs.last_mut() {
                Some((p, l)) if *p + *l / BS == pba => *l += take,
                _ => runs.push((pba, take)),
            }
            pos += take;
        }
        Ok(runs)
    }
}

#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum MapError {
    #[error("offset or length not 512-byte aligned")]
    Misaligned,
    #[error("range extends beyond end of file")]
    BeyondEof,
    #[error("unmapped hole at offset {0}")]
    Hole(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    CacheInvalid,
    OutOfBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    Single { pba: u64 },
    Split,
    Invalid(InvalidReason),
}

/// NVMe-layer snapshot of one file's extents.
#[derive(Debug, Clone)]
pub struct ExtentCache {
    fd: u32,
    snapshot: ExtentMap,
    generation: u64,
    valid: bool,
}

impl ExtentCache {
    pub fn new(fd: u32, map: &ExtentMap, generation: u64) -> Result<Self, ExtentError> {
        map.check_no_holes()?;
        Ok(Self {
            fd,
            snapshot: map.clone(),
            generation,
            valid: true,
        })
    }

    pub fn fd(&self) -> u32 {
        self.fd
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn snapshot(&self) -> &ExtentMap {
        &self.snapshot
    }

    pub fn invalidate(&mut self) {
        self.valid = false;
    }

    pub fn translate(&self, file_offset: u64, len: u64) -> Translation {
        if !self.valid {
            return Translation::Invalid(InvalidReason::CacheInvalid);
        }
        match self.snapshot.map_range(file_offset, len) {
            Ok(runs) if runs.len() == 1 => Translation::Single { pba: runs[0].0 },
            Ok(_) => Translation::Split,
            Err(_) => Translation::Invalid(InvalidReason::OutOfBounds),
        }
    }

    /// True when every block of `[pba, pba+blocks)` lies inside the snapshot.
    pub fn covers(&self, pba: u64, blocks: u64) -> bool {
        (pba..pba + blocks).all(|b| self.snapshot.extents.iter().any(|e| e.contains_pba(b)))
    }
}

/// Remap times (ns) drawn with exponential gaps of the given mean, up to
/// `horizon_ns`. A non-finite or non-positive mean disables the stream.
pub fn invalidation_times(mean_interval_s: f64, horizon_ns: u64, seed: u64) -> Vec<u64> {
    if !mean_interval_s.is_finite() || mean_interval_s <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0 / (mean_interval_s * 1e9)).expect("positive rate");
    let mut t = 0.0f64;
    let mut out = Vec::new();
    loop {
        t += exp.sample(&mut rng);
        if t >= horizon_ns as f64 {
            return out;
        }
        out.push(t as u64);
    }
}
