//! Per-layer, per-KV-head key/value storage with analytic cost counters.
//!
//! Keys are stored already rotated, so eviction never renumbers positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelConfig};

/// Storage precision. `F32` rounds stored values and halves byte accounting;
/// it exists for cost realism only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Counted, not timed. Ops are q·k dot products summed over layers and query
/// heads; bytes cover keys and values of every slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub attention_score_ops: u64,
    pub kv_bytes_peak: u64,
    pub kv_bytes_final: u64,
    pub prefill_ops: u64,
    pub decode_ops: u64,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct KVCache {
    n_layers: usize,
    n_kv_heads: usize,
    d_head: usize,
    precision: Precision,
    capacity: Option<usize>,
    slots: Vec<Slot>,
    entries: u64,
    counters: CostCounters,
    step_ops: Vec<u64>,
}

impl KVCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            d_head,
            precision: Precision::F64,
            capacity: None,
            slots: vec![Slot::default(); n_layers * n_kv_heads],
            entries: 0,
            counters: CostCounters::default(),
            step_ops: Vec::new(),
        }
    }

    pub fn for_model(config: &ModelConfig) -> Self {
        Self::new(config.n_layers, config.n_kv_heads, config.d_head)
    }

    /// Cap every slot at `capacity` entries; appends beyond it fail.
    pub fn with_capacity(mut self, capacity: Option<usize>) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Dense cache holding rows `0..upto` of a prefill trace, with the trace's
    /// score ops booked as prefill work.
    pub fn from_trace(trace: &ForwardTrace, config: &ModelConfig, upto: usize) -> Result<Self> {
        let mut cache = Self::for_model(config);
        cache.fill_from_trace(trace, upto)?;
        cache.record_prefill_ops(trace.total_score_ops());
        Ok(cache)
    }

    /// Append rows `0..upto` of every layer's K/V from `trace`.
    pub fn fill_from_trace(&mut self, trace: &ForwardTrace, upto: usize) -> Result<()> {
        if trace.layers.len() != self.n_layers || upto > trace.len() {
            return Err(Error::ShapeMismatch {
                op: "fill_from_trace",
                left: vec![trace.layers.len(), trace.len()],
                right: vec![self.n_layers, upto],
            });
        }
        let dh = self.d_head;
        for (l, lt) in trace.layers.iter().enumerate() {
            for h in 0..self.n_kv_heads {
                for i in 0..upto {
                    let k = &lt.k.row(i)[h * dh..(h + 1) * dh];
                    let v = &lt.v.row(i)[h * dh..(h + 1) * dh];
                    self.append(l, h, k, v, i)?;
                }
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    fn slot_index(&self, layer: usize, kv_head: usize) -> Result<usize> {
        if layer >= self.n_layers {
            return Err(Error::OutOfRange {
                index: layer,
                len: self.n_layers,
            });
        }
        if kv_head >= self.n_kv_heads {
            return Err(Error::OutOfRange {
                index: kv_head,
                len: self.n_kv_heads,
            });
        }
        Ok(layer * self.n_kv_heads + kv_head)
    }

    fn slot(&self, layer: usize, kv_head: usize) -> &Slot {
        &self.slots[layer * self.n_kv_heads + kv_head]
    }

    fn entry_bytes(&self) -> u64 {
        2 * self.d_head as u64 * self.precision.bytes()
    }

    fn sync_bytes(&mut self) {
        self.counters.kv_bytes_final = self.entries * self.entry_bytes();
        self.counters.kv_bytes_peak = self.counters.kv_bytes_peak.max(self.counters.kv_bytes_final);
    }

    pub fn append(&mut self, layer: usize, kv_head: usize, k: &[f64], v: &[f64], position: usize) -> Result<()> {
        let idx = self.slot_index(layer, kv_head)?;
        if k.len() != self.d_head || v.len() != self.d_head {
            return Err(Error::ShapeMismatch {
                op: "KVCache::append",
                left: vec![k.len(), v.len()],
                right: vec![self.d_head],
            });
        }
        let round = self.precision == Precision::F32;
        let capacity = self.capacity;
        let slot = &mut self.slots[idx];
        if let Some(&last) = slot.positions.last() {
            if position <= last {
                return Err(Error::PositionOrder { position, last });
            }
        }
        if let Some(cap) = capacity {
            if slot.positions.len() >= cap {
                return Err(Error::CapacityExceeded {
                    len: slot.positions.len() + 1,
                    capacity: cap,
                });
            }
        }
        if round {
            slot.keys.extend(k.iter().map(|x| *x as f32 as f64));
            slot.values.extend(v.iter().map(|x| *x as f32 as f64));
        } else {
            slot.keys.extend_from_slice(k);
            slot.values.extend_from_slice(v);
        }
        slot.positions.push(position);
        self.entries += 1;
        self.sync_bytes();
        Ok(())
    }

    /// Keep only the entries at `keep` (ascending indices into the slot).
    pub fn evict_keep(&mut self, layer: usize, kv_head: usize, keep: &[usize]) -> Result<()> {
        let idx = self.slot_index(layer, kv_head)?;
        let dh = self.d_head;
        let slot = &mut self.slots[idx];
        let len = slot.positions.len();
        for w in keep.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("evict_keep indices must be strictly ascending"));
            }
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= len) {
            return Err(Error::OutOfRange { index: bad, len });
        }
        let mut next = Slot::default();
        for &i in keep {
            next.keys.extend_from_slice(&slot.keys[i * dh..(i + 1) * dh]);
            next.values.extend_from_slice(&slot.values[i * dh..(i + 1) * dh]);
            next.positions.push(slot.positions[i]);
        }
        *slot = next;
        self.entries -= (len - keep.len()) as u64;
        self.sync_bytes();
        Ok(())
    }

    /// Keep entries whose original position is in `positions` (ascending).
    pub fn keep_positions(&mut self, layer: usize, kv_head: usize, positions: &[usize]) -> Result<()> {
        let current = self.positions(layer, kv_head);
        let mut keep = Vec::with_capacity(positions.len());
        for p in positions {
            match current.binary_search(p) {
                Ok(i) => keep.push(i),
                Err(_) => {
                    return Err(Error::invalid(format!("position {p} not present in cache slot")));
                }
            }
        }
        self.evict_keep(layer, kv_head, &keep)
    }

    pub fn len(&self, layer: usize, kv_head: usize) -> usize {
        self.slot(layer, kv_head).positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    pub fn total_entries(&self) -> u64 {
        self.entries
    }

    pub fn keys(&self, layer: usize, kv_head: usize) -> &[f64] {
        &self.slot(layer, kv_head).keys
    }

    pub fn values(&self, layer: usize, kv_head: usize) -> &[f64] {
        &self.slot(layer, kv_head).values
    }

    pub fn positions(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.slot(layer, kv_head).positions
    }

    pub fn record_prefill_ops(&mut self, ops: u64) {
        self.counters.prefill_ops += ops;
        self.counters.attention_score_ops += ops;
    }

    /// Book one decode step's q·k products (all layers and heads).
    pub fn record_decode_step(&mut self, ops: u64) {
        self.counters.decode_ops += ops;
        self.counters.attention_score_ops += ops;
        self.step_ops.push(ops);
    }

    /// Ops of each decode step so far, in order.
    pub fn decode_step_ops(&self) -> &[u64] {
        &self.step_ops
    }

    pub fn snapshot_costs(&self) -> CostCounters {
        self.counters
    }

    /// Bytes for `entries` cached (layer, head, token) entries at this
    /// cache's head size and precision.
    pub fn bytes_for_entries(&self, entries: u64) -> u64 {
        entries * self.entry_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filled(n: usize) -> KVCache {
        let mut c = KVCache::new(1, 1, 3);
        for p in 0..n {
            c.append(0, 0, &[p as f64; 3], &[-(p as f64); 3], p).unwrap();
        }
        c
    }

    #[test]
    fn append_and_order() {
        let mut c = KVCache::new(1, 1, 2);
        c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 0).unwrap();
        assert_eq!(c.len(0, 0), 1);
        assert!(matches!(
            c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 0),
            Err(Error::PositionOrder { .. })
        ));
    }

    #[test]
    fn byte_accounting() {
        let c = filled(100);
        assert_eq!(c.snapshot_costs().kv_bytes_final, 100 * 2 * 3 * 8);
        assert_eq!(KVCache::new(2, 2, 4).snapshot_costs(), CostCounters::default());
    }

    #[test]
    fn eviction_examples() {
        let mut c = filled(10);
        c.evict_keep(0, 0, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(c.len(0, 0), 10);
        c.evict_keep(0, 0, &[0, 2, 4, 6, 8]).unwrap();
        assert_eq!(c.positions(0, 0), &[0, 2, 4, 6, 8]);
        assert_eq!(c.keys(0, 0)[3..6], [2.0; 3]);
        assert_eq!(c.snapshot_costs().kv_bytes_peak, 10 * 48);
        assert_eq!(c.snapshot_costs().kv_bytes_final, 5 * 48);
        assert!(matches!(c.evict_keep(0, 0, &[7]), Err(Error::OutOfRange { .. })));
        c.evict_keep(0, 0, &[]).unwrap();
        assert_eq!(c.len(0, 0), 0);
    }

    #[test]
    fn capacity_and_precision() {
        let mut c = KVCache::new(1, 1, 1).with_capacity(Some(1)).with_precision(Precision::F32);
        c.append(0, 0, &[0.1], &[0.2], 0).unwrap();
        assert_eq!(c.keys(0, 0)[0], 0.1f32 as f64);
        assert_eq!(c.snapshot_costs().kv_bytes_final, 8);
        assert!(matches!(
            c.append(0, 0, &[0.0], &[0.0], 1),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    proptest! {
        #[test]
        fn eviction_preserves_order(mask in proptest::collection::vec(any::<bool>(), 0..30)) {
            let mut c = filled(mask.len());
            let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
            c.evict_keep(0, 0, &keep).unwrap();
            prop_assert_eq!(c.positions(0, 0), &keep[..]);
            prop_assert!(c.snapshot_costs().kv_bytes_peak >= c.snapshot_costs().kv_bytes_final);
        }
    }
}
