//! Extent translation checked block by block against a linear scan.

use iochain::xcache::{Extent, ExtentCache, ExtentMap, InvalidReason, Translation};
use proptest::prelude::*;

const BS: u64 = 512;

/// Hole-free map of up to 16 extents, physically shuffled with gaps.
fn arb_map() -> impl Strategy<Value = ExtentMap> {
    proptest::collection::vec((1u64..=6, 0u64..=3), 1..=16)
        .prop_flat_map(|sizes| {
            let n = sizes.len();
            (Just(sizes), Just((0..n).collect::<Vec<_>>()).prop_shuffle(), 0u64..64)
        })
        .prop_map(|(sizes, order, base)| {
            let mut pba = vec![0; sizes.len()];
            let mut next = base;
            for &i in &order {
                next += sizes[i].1;
                pba[i] = next;
                next += sizes[i].0;
            }
            let mut off = 0;
            let extents = sizes
                .iter()
                .zip(&pba)
                .map(|(&(blocks, _), &pba)| {
                    let e = Extent { file_off: off, pba, len: blocks * BS };
                    off += e.len;
                    e
                })
                .collect();
            ExtentMap::new(extents, off).unwrap()
        })
}

/// Physical block of each file block, by scanning every extent.
fn block_table(map: &ExtentMap) -> Vec<u64> {
    (0..map.file_len() / BS)
        .map(|b| {
            let off = b * BS;
            let hits: Vec<u64> = map
                .extents()
                .iter()
                .filter(|e| e.file_off <= off && off < e.file_off + e.len)
                .map(|e| e.pba + (off - e.file_off) / BS)
                .collect();
            assert_eq!(hits.len(), 1);
            hits[0]
        })
        .collect()
}

fn expected(table: &[u64], off_blocks: u64, len_blocks: u64) -> Translation {
    let end = off_blocks + len_blocks;
    if len_blocks == 0 || end > table.len() as u64 {
        return Translation::Invalid(InvalidReason::OutOfBounds);
    }
    let run = &table[off_blocks as usize..end as usize];
    if run.windows(2).all(|w| w[1] == w[0] + 1) {
        Translation::Single { pba: run[0] }
    } else {
        Translation::Split
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn every_aligned_range_matches_blockwise_lookup(map in arb_map()) {
        let table = block_table(&map);
        let cache = ExtentCache::new(3, &map, 1).unwrap();
        let blocks = table.len() as u64;
        for off in 0..=blocks + 1 {
            for len in 0..=blocks + 1 - off.min(blocks) {
                let got = cache.translate(off * BS, len * BS);
                prop_assert_eq!(got, expected(&table, off, len), "off {} len {}", off, len);
                if let Ok(runs) = map.map_range(off * BS, len * BS) {
                    let flat: Vec<u64> = runs.iter().flat_map(|&(p, l)| p..p + l / BS).collect();
                    prop_assert_eq!(&flat[..], &table[off as usize..(off + len) as usize]);
                    // Runs are maximal: neighbours are never physically adjacent.
                    for w in runs.windows(2) {
                        prop_assert_ne!(w[0].0 + w[0].1 / BS, w[1].0);
                    }
                }
            }
        }
    }

    #[test]
    fn unaligned_requests_never_translate(map in arb_map(), off in 0u64..8192, len in 1u64..4096) {
        prop_assume!(off % BS != 0 || len % BS != 0);
        let cache = ExtentCache::new(0, &map, 1).unwrap();
        prop_assert_eq!(cache.translate(off, len), Translation::Invalid(InvalidReason::OutOfBounds));
    }

    #[test]
    fn coverage_matches_block_set(map in arb_map(), pba in 0u64..200, blocks in 1u64..8) {
        let table = block_table(&map);
        let cache = ExtentCache::new(0, &map, 1).unwrap();
        let want = (pba..pba + blocks).all(|b| table.contains(&b));
        prop_assert_eq!(cache.covers(pba, blocks), want);
    }

    #[test]
    fn invalid_cache_refuses_everything(map in arb_map(), off in 0u64..16) {
        let mut cache = ExtentCache::new(0, &map, 7).unwrap();
        cache.invalidate();
        prop_assert!(!cache.is_valid());
        prop_assert_eq!(cache.generation(), 7);
        prop_assert_eq!(cache.translate(off * BS, BS), Translation::Invalid(InvalidReason::CacheInvalid));
    }
}
