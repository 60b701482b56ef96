//! On-disk B+-tree image with one node per page.
//!
//! Page layout (little-endian):
//!
//! ```text
//! 0   u16  magic 0xB7EE
//! 2   u8   kind (0 = internal, 1 = leaf)
//! 3   u8   level (leaves are 0)
//! 4   u16  count
//! 6   [u8; 10] reserved, zero
//! 16  internal: count keys (u64), then count+1 child file offsets (u64)
//!     leaf:     count (key u64, value u64) pairs
//! ```
//!
//! Pages are placed breadth-first with the root at file offset 0.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::blockdev::{BlockStore, BLOCK_SIZE};
use crate::sfunc::{self, Instruction, Opcode, Program, VerifiedProgram};
use crate::xcache::{Extent, ExtentMap};

pub const MAGIC: u16 = 0xB7EE;
pub const HEADER_LEN: usize = 16;
pub const DEFAULT_PAGE_SIZE: usize = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BTreeError {
    #[error("keys must be strictly increasing (index {0})")]
    Unsorted(usize),
    #[error("{keys} keys do not fit in a depth-{depth} tree of fanout {fanout}")]
    KeyOverflow { keys: usize, depth: u32, fanout: usize },
    #[error("infeasible shape: {0}")]
    Infeasible(String),
    #[error("corrupt page at offset {offset}: {msg}")]
    Corrupt { offset: u64, msg: &'static str },
    #[error("read failed at offset {0}")]
    Read(u64),
}

/// Largest fanout a page can hold: leaf pairs and internal children.
pub fn max_fanout(page_size: usize) -> usize {
    (page_size - HEADER_LEN) / 16
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Internal {
        level: u8,
        keys: Vec<u64>,
        children: Vec<u64>,
    },
    Leaf {
        pairs: Vec<(u64, u64)>,
    },
}

impl Node {
    pub fn encode(&self, page_size: usize) -> Vec<u8> {
        let mut page = vec![0u8; page_size];
        page[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        let mut put = |at: usize, v: u64| page[at..at + 8].copy_from_slice(&v.to_le_bytes());
        let (kind, level, count) = match self {
            Node::Internal {
                level,
                keys,
                children,
            } => {
                debug_assert_eq!(children.len(), keys.len() + 1);
                for (i, k) in keys.iter().enumerate() {
                    put(HEADER_LEN + 8 * i, *k);
                }
                let base = HEADER_LEN + 8 * keys.len();
                for (i, c) in children.iter().enumerate() {
                    put(base + 8 * i, *c);
                }
                (0u8, *level, keys.len())
            }
            Node::Leaf { pairs } => {
                for (i, (k, v)) in pairs.iter().enumerate() {
                    put(HEADER_LEN + 16 * i, *k);
                    put(HEADER_LEN + 16 * i + 8, *v);
                }
                (1u8, 0u8, pairs.len())
            }
        };
        page[2] = kind;
        page[3] = level;
        page[4..6].copy_from_slice(&(count as u16).to_le_bytes());
        page
    }

    pub fn parse(page: &[u8], offset: u64) -> Result<Node, BTreeError> {
        let corrupt = |msg| BTreeError::Corrupt { offset, msg };
        if page.len() < HEADER_LEN {
            return Err(corrupt("short page"));
        }
        if u16::from_le_bytes([page[0], page[1]]) != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let count = u16::from_le_bytes([page[4], page[5]]) as usize;
        let get = |at: usize| u64::from_le_bytes(page[at..at + 8].try_into().unwrap());
        match page[2] {
            0 => {
                if HEADER_LEN + 16 * count + 8 > page.len() {
                    return Err(corrupt("count too large"));
                }
                let keys = (0..count).map(|i| get(HEADER_LEN + 8 * i)).collect();
                let base = HEADER_LEN + 8 * count;
                let children = (0..=count).map(|i| get(base + 8 * i)).collect();
                Ok(Node::Internal {
                    level: page[3],
                    keys,
                    children,
                })
            }
            1 => {
                if HEADER_LEN + 16 * count > page.len() {
                    return Err(corrupt("count too large"));
                }
                let pairs = (0..count)
                    .map(|i| (get(HEADER_LEN + 16 * i), get(HEADER_LEN + 16 * i + 8)))
                    .collect();
                Ok(Node::Leaf { pairs })
            }
            _ => Err(corrupt("bad kind")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Maximum children per internal node and pairs per leaf.
    pub fanout: usize,
    /// Exact depth; the minimum depth for the key count when `None`.
    pub depth: Option<u32>,
    pub page_size: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            fanout: max_fanout(DEFAULT_PAGE_SIZE),
            depth: None,
            page_size: DEFAULT_PAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeImage {
    pub bytes: Vec<u8>,
    pub page_size: usize,
    pub root: u64,
    pub depth: u32,
    pub fanout: usize,
    pub keys: usize,
}

impl TreeImage {
    pub fn pages(&self) -> usize {
        self.bytes.len() / self.page_size
    }

    pub fn page(&self, offset: u64) -> Option<&[u8]> {
        let start = usize::try_from(offset).ok()?;
        self.bytes.get(start..start.checked_add(self.page_size)?)
    }

    /// Reopens a raw image, recovering depth from the root page.
    pub fn from_bytes(bytes: Vec<u8>, page_size: usize) -> Result<Self, BTreeError> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(page_size) {
            return Err(BTreeError::Corrupt {
                offset: 0,
                msg: "image is not a whole number of pages",
            });
        }
        let root = Node::parse(&bytes[..page_size], 0)?;
        let depth = match root {
            Node::Leaf { .. } => 1,
            Node::Internal { level, .. } => level as u32 + 1,
        };
        let pages = bytes.len() / page_size;
        let mut keys = 0;
        let mut fanout = 0;
        for p in 0..pages {
            let off = (p * page_size) as u64;
            match Node::parse(&bytes[p * page_size..(p + 1) * page_size], off)? {
                Node::Leaf { pairs } => {
                    keys += pairs.len();
                    fanout = fanout.max(pairs.len());
                }
                Node::Internal { children, .. } => fanout = fanout.max(children.len()),
            }
        }
        Ok(Self {
            bytes,
            page_size,
            root: 0,
            depth,
            fanout,
            keys,
        })
    }
}

fn split_even(total: usize, parts: usize) -> Vec<usize> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + usize::from(i < r)).collect()
}

/// Node count per level, leaves first.
fn level_sizes(n: usize, fanout: usize, depth: u32) -> Result<Vec<usize>, BTreeError> {
    let pow = |b: usize, e: u32| b.checked_pow(e).unwrap_or(usize::MAX);
    if depth == 1 {
        return Ok(vec![1]);
    }
    let leaves = n.div_ceil(fanout).max(pow(2, depth - 1));
    if leaves > n {
        return Err(BTreeError::Infeasible(format!(
            "depth {depth} needs at least {} keys, got {n}",
            pow(2, depth - 1)
        )));
    }
    let mut sizes = vec![leaves];
    let mut cur = leaves;
    for above in (1..depth).rev() {
        let parents = if above == 1 {
            1
        } else {
            let lo = cur.div_ceil(fanout).max(pow(2, above - 1));
            let hi = (cur / 2).min(pow(fanout, above - 1));
            if lo > hi {
                return Err(BTreeError::Infeasible(format!(
                    "no level of {cur} nodes can reach a single root in {above} levels"
                )));
            }
            let target = (cur as f64).powf((above - 1) as f64 / above as f64).round() as usize;
            target.clamp(lo, hi)
        };
        if cur > parents * fanout || cur < parents * 2 {
            return Err(BTreeError::Infeasible(format!(
                "{cur} nodes cannot hang under {parents} parents"
            )));
        }
        sizes.push(parents);
        cur = parents;
    }
    Ok(sizes)
}

/// Bulk-builds a tree from strictly increasing `(key, value)` pairs.
pub fn build(pairs: &[(u64, u64)], opts: BuildOptions) -> Result<TreeImage, BTreeError> {
    let BuildOptions {
        fanout,
        depth,
        page_size,
    } = opts;
    if page_size < BLOCK_SIZE || page_size % BLOCK_SIZE != 0 {
        return Err(BTreeError::Infeasible(format!("page size {page_size}")));
    }
    if fanout < 2 || fanout > max_fanout(page_size) {
        return Err(BTreeError::Infeasible(format!(
            "fanout {fanout} outside 2..={}",
            max_fanout(page_size)
        )));
    }
    if let Some(i) = pairs.windows(2).position(|w| w[0].0 >= w[1].0) {
        return Err(BTreeError::Unsorted(i + 1));
    }
    let n = pairs.len();
    let depth = match depth {
        Some(0) => return Err(BTreeError::Infeasible("depth 0".into())),
        Some(d) => d,
        None => {
            let mut d = 1u32;
            let mut cap = fanout;
            while cap < n {
                d += 1;
                cap = cap.saturating_mul(fanout);
            }
            d
        }
    };
    if depth > 255 || fanout.checked_pow(depth).is_some_and(|cap| n > cap) {
        return Err(BTreeError::KeyOverflow {
            keys: n,
            depth,
            fanout,
        });
    }
    let sizes = level_sizes(n, fanout, depth)?;

    // Page index of the first node on each level; the root level comes first.
    let mut first_page = vec![0usize; sizes.len()];
    let mut acc = 0;
    for lvl in (0..sizes.len()).rev() {
        first_page[lvl] = acc;
        acc += sizes[lvl];
    }
    let total_pages = acc;
    let mut bytes = vec![0u8; total_pages * page_size];
    let mut write = |page: usize, node: &Node| {
        bytes[page * page_size..(page + 1) * page_size].copy_from_slice(&node.encode(page_size));
    };

    // Leaves, remembering each node's minimum key for separators.
    let mut mins = Vec::with_capacity(sizes[0]);
    let mut at = 0;
    for (i, cnt) in split_even(n, sizes[0]).into_iter().enumerate() {
        let chunk = &pairs[at..at + cnt];
        at += cnt;
        mins.push(chunk.first().map_or(0, |p| p.0));
        write(first_page[0] + i, &Node::Leaf {
            pairs: chunk.to_vec(),
        });
    }
    for lvl in 1..sizes.len() {
        let mut next_mins = Vec::with_capacity(sizes[lvl]);
        let mut child = 0;
        for (i, cnt) in split_even(sizes[lvl - 1], sizes[lvl]).into_iter().enumerate() {
            let range = child..child + cnt;
            child += cnt;
            let children = range
                .clone()
                .map(|c| ((first_page[lvl - 1] + c) * page_size) as u64)
                .collect();
            let keys = range.clone().skip(1).map(|c| mins[c]).collect();
            next_mins.push(mins[range.start]);
            write(first_page[lvl] + i, &Node::Internal {
                level: lvl as u8,
                keys,
                children,
            });
        }
        mins = next_mins;
    }
    Ok(TreeImage {
        bytes,
        page_size,
        root: 0,
        depth,
        fanout,
        keys: n,
    })
}

/// Deterministic key/value corpus: odd keys, so even keys are absent.
pub fn standard_pairs(n: usize) -> Vec<(u64, u64)> {
    (0..n as u64)
        .map(|i| {
            let k = 2 * i + 1;
            (k, splitmix64(k))
        })
        .collect()
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key count used for the benchmark tree of a given depth.
pub fn standard_key_count(depth: u32, fanout: usize) -> usize {
    fanout.checked_pow(depth).map_or(4096, |cap| cap.min(4096))
}

/// Benchmark tree of exactly `depth` levels over [`standard_pairs`].
pub fn standard_tree(depth: u32) -> Result<TreeImage, BTreeError> {
    let fanout = max_fanout(DEFAULT_PAGE_SIZE);
    build(
        &standard_pairs(standard_key_count(depth, fanout)),
        BuildOptions {
            fanout,
            depth: Some(depth),
            page_size: DEFAULT_PAGE_SIZE,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserLookup {
    pub value: Option<u64>,
    pub pages_read: u32,
    /// File offsets visited, root first.
    pub trace: Vec<u64>,
}

/// Plain user-space traversal. `read_page` returns the page at a file offset.
pub fn lookup_with<F>(root: u64, key: u64, mut read_page: F) -> Result<UserLookup, BTreeError>
where
    F: FnMut(u64) -> Option<Vec<u8>>,
{
    let mut off = root;
    let mut trace = Vec::new();
    loop {
        if trace.len() > 255 {
            return Err(BTreeError::Corrupt {
                offset: off,
                msg: "cycle",
            });
        }
        let page = read_page(off).ok_or(BTreeError::Read(off))?;
        trace.push(off);
        match Node::parse(&page, off)? {
            Node::Internal { keys, children, .. } => {
                off = children[keys.partition_point(|k| *k <= key)];
            }
            Node::Leaf { pairs } => {
                let value = pairs
                    .binary_search_by_key(&key, |p| p.0)
                    .ok()
                    .map(|i| pairs[i].1);
                return Ok(UserLookup {
                    value,
                    pages_read: trace.len() as u32,
                    trace,
                });
            }
        }
    }
}

pub fn lookup_user(image: &TreeImage, key: u64) -> Result<UserLookup, BTreeError> {
    lookup_with(image.root, key, |off| image.page(off).map(<[u8]>::to_vec))
}

/// Map of every pair stored in the image, by scanning leaves.
pub fn collect_pairs(image: &TreeImage) -> Result<BTreeMap<u64, u64>, BTreeError> {
    let mut out = BTreeMap::new();
    for p in 0..image.pages() {
        let off = (p * image.page_size) as u64;
        if let Node::Leaf { pairs } = Node::parse(image.page(off).unwrap(), off)? {
            out.extend(pairs);
        }
    }
    Ok(out)
}

struct Emitter {
    insns: Vec<Instruction>,
    fixups: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
}

impl Emitter {
    fn new() -> Self {
        Self {
            insns: Vec::new(),
            fixups: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn label(&mut self) -> usize {
        self.labels.push(None);
        self.labels.len() - 1
    }

    fn bind(&mut self, l: usize) {
        self.labels[l] = Some(self.insns.len());
    }

    fn op(&mut self, op: Opcode, dst: Option<u8>, src: Option<u8>, imm: i64) {
        self.insns.push(Instruction::new(op, dst, src, imm));
    }

    fn jump(&mut self, op: Opcode, a: u8, b: u8, target: usize) {
        self.fixups.push((self.insns.len(), target));
        self.op(op, Some(a), Some(b), 0);
    }

    fn finish(mut self) -> Vec<Instruction> {
        for (at, l) in self.fixups {
            let target = self.labels[l].expect("bound label");
            self.insns[at].imm = (target - at - 1) as i64;
        }
        self.insns
    }
}

/// Lookup function for 512-byte pages.
pub fn compile_lookup(key: u64) -> VerifiedProgram {
    compile_lookup_for(key, DEFAULT_PAGE_SIZE)
}

/// Storage function that, per page: resubmits to the child covering `key`
/// on internal nodes; returns the 8-byte value (or nothing when absent) on
/// leaves; drops on a page that is not a tree node. Scans are unrolled.
pub fn compile_lookup_for(key: u64, page_size: usize) -> VerifiedProgram {
    use Opcode::*;
    const HDR: u8 = 0;
    const T1: u8 = 1;
    const T2: u8 = 2;
    const KIND: u8 = 3;
    const COUNT: u8 = 4;
    const IDX: u8 = 5;
    const VAL: u8 = 6;
    const KEY: u8 = 7;
    let max_keys = max_fanout(page_size) - 1;
    let max_pairs = max_fanout(page_size);
    let r = Some;

    let mut e = Emitter::new();
    let (drop, leaf, child, not_found, found) = (e.label(), e.label(), e.label(), e.label(), e.label());
    e.op(MovI, r(KEY), None, key as i64);
    e.op(LoadW, r(HDR), None, 0);
    e.op(Mov, r(T1), r(HDR), 0);
    e.op(And, r(T1), None, 0xFFFF);
    e.op(MovI, r(T2), None, MAGIC as i64);
    e.jump(Jne, T1, T2, drop);
    e.op(LoadW, r(COUNT), None, 4);
    e.op(And, r(COUNT), None, 0xFFFF);
    e.op(Mov, r(KIND), r(HDR), 0);
    e.op(Shr, r(KIND), None, 16);
    e.op(And, r(KIND), None, 0xFF);
    e.op(MovI, r(T2), None, 1);
    e.jump(Jeq, KIND, T2, leaf);
    e.op(MovI, r(T2), None, 0);
    e.jump(Jne, KIND, T2, drop);

    for j in 0..max_keys {
        e.op(MovI, r(IDX), None, j as i64);
        e.jump(Jge, IDX, COUNT, child);
        e.op(LoadQ, r(VAL), None, (HEADER_LEN + 8 * j) as i64);
        e.jump(Jlt, KEY, VAL, child);
    }
    e.op(MovI, r(IDX), None, max_keys as i64);
    e.bind(child);
    e.op(Mov, r(VAL), r(COUNT), 0);
    e.op(Add, r(VAL), r(IDX), 0);
    e.op(Shl, r(VAL), None, 3);
    e.op(LoadQ, r(VAL), r(VAL), HEADER_LEN as i64);
    e.op(Resubmit, r(VAL), None, 0);

    e.bind(leaf);
    for j in 0..max_pairs {
        e.op(MovI, r(IDX), None, j as i64);
        e.jump(Jge, IDX, COUNT, not_found);
        e.op(LoadQ, r(VAL), None, (HEADER_LEN + 16 * j) as i64);
        e.jump(Jeq, VAL, KEY, found);
    }
    e.bind(not_found);
    e.op(Return, None, None, 0);
    e.bind(found);
    e.op(Mov, r(VAL), r(IDX), 0);
    e.op(Shl, r(VAL), None, 4);
    e.op(LoadQ, r(VAL), r(VAL), (HEADER_LEN + 8) as i64);
    e.op(Emit, r(VAL), None, 8);
    e.op(Return, None, None, 0);
    e.bind(drop);
    e.op(Drop, None, None, 0);

    let mut prog = Program::new(format!("btree_lookup_{key}"), e.finish());
    prog.block_size = page_size;
    prog.max_return = 8;
    sfunc::verify(prog).expect("compiled lookup verifies")
}

/// Gap, in blocks, left between scattered extents.
pub const SCATTER_GAP_BLOCKS: u64 = 8;

/// Splits a file of `file_len` bytes into `pieces` physically discontiguous
/// extents. Boundaries sit on 512-byte multiples; for pages larger than a
/// block they are pushed off page boundaries so some pages straddle them.
pub fn scatter_extents(file_len: u64, pieces: usize, page_size: usize) -> ExtentMap {
    let bs = BLOCK_SIZE as u64;
    let blocks = file_len.div_ceil(bs);
    let pieces = (pieces.max(1) as u64).min(blocks.max(1));
    let mut cuts: Vec<u64> = (1..pieces)
        .map(|i| {
            let mut b = blocks * i / pieces;
            if page_size > BLOCK_SIZE && (b * bs).is_multiple_of(page_size as u64) && b + 1 < blocks {
                b += 1;
            }
            b
        })
        .collect();
    cuts.dedup();
    let mut bounds = vec![0];
    bounds.extend(cuts.into_iter().filter(|&b| b > 0 && b < blocks));
    bounds.push(blocks);
    bounds.dedup();
    let mut pba = SCATTER_GAP_BLOCKS;
    let extents = bounds
        .windows(2)
        .map(|w| {
            let e = Extent {
                file_off: w[0] * bs,
                pba,
                len: (w[1] - w[0]) * bs,
            };
            pba += w[1] - w[0] + SCATTER_GAP_BLOCKS;
            e
        })
        .collect();
    ExtentMap::new(extents, blocks * bs).expect("constructed extents are disjoint")
}

/// Physical device image for a file laid out by `map`. Gaps are filled with
/// a byte pattern that never parses as a tree page.
pub fn physical_layout(file: &[u8], map: &ExtentMap) -> BlockStore {
    let bs = BLOCK_SIZE as u64;
    let end = map.extents().iter().map(|e| e.pba_end()).max().unwrap_or(0) + SCATTER_GAP_BLOCKS;
    let mut store = BlockStore::from_bytes(vec![0xA5; (end * bs) as usize]);
    for e in map.extents() {
        let mut chunk = vec![0u8; e.len as usize];
        let from = e.file_off as usize;
        let avail = file.len().saturating_sub(from).min(chunk.len());
        chunk[..avail].copy_from_slice(&file[from..from + avail]);
        store.write(e.pba, &chunk).expect("layout fits");
    }
    store
}
