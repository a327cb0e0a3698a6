//! Cache bookkeeping against a plain per-slot vector model.

use proptest::prelude::*;
use speckv_lab::kv_cache::Precision;
use speckv_lab::{Error, KVCache};

#[derive(Debug, Clone)]
enum Op {
    Append { slot: usize },
    Evict { slot: usize, mask: u64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0usize..4).prop_map(|slot| Op::Append { slot }),
        1 => (0usize..4, any::<u64>()).prop_map(|(slot, mask)| Op::Evict { slot, mask }),
    ]
}

proptest! {
    #[test]
    fn matches_reference_model(ops in prop::collection::vec(op(), 1..80)) {
        let d = 3;
        let mut cache = KVCache::new(2, 2, d);
        let mut model: Vec<Vec<usize>> = vec![Vec::new(); 4];
        let mut next_pos = [0usize; 4];
        let mut peak = 0u64;
        for o in ops {
            match o {
                Op::Append { slot } => {
                    let p = next_pos[slot];
                    next_pos[slot] += 1 + p % 2;
                    let k = vec![p as f64; d];
                    let v = vec![-(p as f64); d];
                    cache.append(slot / 2, slot % 2, &k, &v, p).unwrap();
                    model[slot].push(p);
                }
                Op::Evict { slot, mask } => {
                    let keep: Vec<usize> = (0..model[slot].len()).filter(|i| mask >> (i % 64) & 1 == 1).collect();
                    cache.evict_keep(slot / 2, slot % 2, &keep).unwrap();
                    model[slot] = keep.iter().map(|&i| model[slot][i]).collect();
                }
            }
            let entries: usize = model.iter().map(Vec::len).sum();
            peak = peak.max(entries as u64);
            prop_assert_eq!(cache.total_entries(), entries as u64);
            let costs = cache.snapshot_costs();
            prop_assert_eq!(costs.kv_bytes_final, entries as u64 * 2 * d as u64 * 8);
            prop_assert_eq!(costs.kv_bytes_peak, peak * 2 * d as u64 * 8);
        }
        for (s, want) in model.iter().enumerate() {
            prop_assert_eq!(cache.positions(s / 2, s % 2), &want[..]);
            let keys = cache.keys(s / 2, s % 2);
            for (i, &p) in want.iter().enumerate() {
                prop_assert_eq!(keys[i * d], p as f64);
                prop_assert_eq!(cache.values(s / 2, s % 2)[i * d], -(p as f64));
            }
        }
    }
}

#[test]
fn rejects_bad_operations() {
    let mut c = KVCache::new(1, 1, 2).with_capacity(Some(2));
    c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 5).unwrap();
    assert!(matches!(c.append(0, 0, &[0.0; 2], &[0.0; 2], 5), Err(Error::PositionOrder { .. })));
    assert!(matches!(c.append(0, 0, &[0.0; 3], &[0.0; 2], 6), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(c.append(1, 0, &[0.0; 2], &[0.0; 2], 6), Err(Error::OutOfRange { .. })));
    c.append(0, 0, &[0.0; 2], &[0.0; 2], 6).unwrap();
    assert!(matches!(c.append(0, 0, &[0.0; 2], &[0.0; 2], 7), Err(Error::CapacityExceeded { .. })));
    assert!(c.evict_keep(0, 0, &[1, 0]).is_err());
    assert!(c.evict_keep(0, 0, &[2]).is_err());
    c.keep_positions(0, 0, &[6]).unwrap();
    assert_eq!(c.positions(0, 0), &[6]);
    assert!(c.keep_positions(0, 0, &[5]).is_err());
}

#[test]
fn half_precision_halves_bytes_and_rounds() {
    let mut c = KVCache::new(1, 1, 1).with_precision(Precision::F32);
    c.append(0, 0, &[0.1], &[0.2], 0).unwrap();
    assert_eq!(c.snapshot_costs().kv_bytes_final, 8);
    assert_eq!(c.bytes_for_entries(10), 80);
    assert_eq!(c.keys(0, 0)[0], 0.1f32 as f64);
}
