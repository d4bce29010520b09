//! Writer-side batching: packets from co-located writers destined for the
//! same agent and partition are merged locally and forwarded as a single
//! aggregated transfer, trading a small delay for far fewer flows. Each
//! packet keeps its (writer, version, sequence) identity inside the
//! aggregate, so agent-side indexing is unaffected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::block::DataBlock;
use crate::ids::{JobId, NodeId, PartitionId};

pub const DEFAULT_FLUSH_BYTES: u64 = 1 << 20; // 1 MiB
pub const DEFAULT_FLUSH_INTERVAL_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotKey {
    pub target: NodeId,
    pub job: JobId,
    pub partition: PartitionId,
}

/// One aggregated transfer handed to the network layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlushBatch {
    pub key: SlotKey,
    pub blocks: Vec<DataBlock>,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    blocks: Vec<DataBlock>,
    bytes: u64,
    oldest_submit: f64,
}

/// The per-node proxy buffer. Submissions accumulate per (target agent,
/// job, partition); a slot flushes as soon as it reaches the byte threshold,
/// and stragglers are swept out by the periodic timer.
#[derive(Debug, Clone)]
pub struct ProxyBuffer {
    pub node: NodeId,
    flush_bytes: u64,
    slots: BTreeMap<SlotKey, Slot>,
    submitted_bytes: u64,
    flushed_bytes: u64,
    submit_count: u64,
    flush_count: u64,
}

impl ProxyBuffer {
    pub fn new(node: NodeId, flush_bytes: u64) -> Self {
        assert!(flush_bytes > 0);
        ProxyBuffer {
            node,
            flush_bytes,
            slots: BTreeMap::new(),
            submitted_bytes: 0,
            flushed_bytes: 0,
            submit_count: 0,
            flush_count: 0,
        }
    }

    /// Merge one packet into its slot; returns the aggregate when the slot
    /// just crossed the flush threshold.
    pub fn submit(&mut self, key: SlotKey, block: DataBlock, now: f64) -> Option<FlushBatch> {
        self.submitted_bytes += block.size_bytes;
        self.submit_count += 1;
        let slot = self.slots.entry(key).or_default();
        if slot.blocks.is_empty() {
            slot.oldest_submit = now;
        }
        slot.bytes += block.size_bytes;
        slot.blocks.push(block);
        if slot.bytes >= self.flush_bytes {
            self.take_slot(key)
        } else {
            None
        }
    }

    /// Flush every slot whose oldest packet has waited at least `interval`.
    pub fn due_flushes(&mut self, now: f64, interval: f64) -> Vec<FlushBatch> {
        let due: Vec<SlotKey> = self
            .slots
            .iter()
            .filter(|(_, s)| !s.blocks.is_empty() && now - s.oldest_submit >= interval)
            .map(|(k, _)| *k)
            .collect();
        due.into_iter().filter_map(|k| self.take_slot(k)).collect()
    }

    /// Flush everything pending, e.g. at writer completion.
    pub fn drain(&mut self) -> Vec<FlushBatch> {
        let keys: Vec<SlotKey> = self.slots.keys().copied().collect();
        keys.into_iter().filter_map(|k| self.take_slot(k)).collect()
    }

    /// Redirect pending data for a dead agent to its failover target. The
    /// moved packets keep their submission order.
    pub fn retarget(&mut self, from: NodeId, to: NodeId) {
        let moved: Vec<(SlotKey, Slot)> = {
            let keys: Vec<SlotKey> = self
                .slots
                .keys()
                .copied()
                .filter(|k| k.target == from)
                .collect();
            keys.into_iter()
                .map(|k| (k, self.slots.remove(&k).unwrap()))
                .collect()
        };
        for (old_key, slot) in moved {
            let new_key = SlotKey {
                target: to,
                ..old_key
            };
            let dest = self.slots.entry(new_key).or_default();
            if dest.blocks.is_empty() || slot.oldest_submit < dest.oldest_submit {
                dest.oldest_submit = slot.oldest_submit;
            }
            dest.bytes += slot.bytes;
            dest.blocks.extend(slot.blocks);
        }
    }

    /// Pull back everything buffered for one target without flushing it,
    /// e.g. when the target died and each block's writer must re-route
    /// individually. Counts the bytes as flushed (they left the buffer).
    pub fn remove_target(&mut self, target: NodeId) -> Vec<FlushBatch> {
        let keys: Vec<SlotKey> = self
            .slots
            .keys()
            .copied()
            .filter(|k| k.target == target)
            .collect();
        keys.into_iter().filter_map(|k| self.take_slot(k)).collect()
    }

    fn take_slot(&mut self, key: SlotKey) -> Option<FlushBatch> {
        let slot = self.slots.remove(&key)?;
        if slot.blocks.is_empty() {
            return None;
        }
        self.flushed_bytes += slot.bytes;
        self.flush_count += 1;
        Some(FlushBatch {
            key,
            blocks: slot.blocks,
            bytes: slot.bytes,
        })
    }

    /// Clear the buffer outright (node loss: the data died with the node).
    pub fn clear(&mut self) {
        for slot in std::mem::take(&mut self.slots).into_values() {
            self.flushed_bytes += slot.bytes;
        }
    }

    pub fn pending_bytes(&self) -> u64 {
        self.slots.values().map(|s| s.bytes).sum()
    }

    pub fn flush_count(&self) -> u64 {
        self.flush_count
    }

    pub fn submit_count(&self) -> u64 {
        self.submit_count
    }

    /// Byte conservation: everything submitted is either forwarded or still
    /// pending.
    pub fn conservation_holds(&self) -> bool {
        self.submitted_bytes == self.flushed_bytes + self.pending_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::ShuffleMode;
    use crate::checksum::Digest;
    use crate::ids::WriterId;
    use proptest::prelude::*;

    fn slot_key(target: u64, partition: u32) -> SlotKey {
        SlotKey {
            target: NodeId(target),
            job: JobId(1),
            partition: PartitionId(partition),
        }
    }

    fn packet(writer: u64, seq: u32, bytes: u64) -> DataBlock {
        DataBlock {
            job_id: JobId(1),
            writer_id: WriterId(writer),
            retry_idx: 0,
            partition_id: PartitionId(0),
            backup_seq: seq,
            size_bytes: bytes,
            priority: 0,
            checksum: Digest(0),
            mode: ShuffleMode::InMemory,
        }
    }

    #[test]
    fn below_threshold_accumulates_without_flushing() {
        let mut p = ProxyBuffer::new(NodeId(0), 4096);
        assert!(p.submit(slot_key(1, 0), packet(0, 0, 1024), 0.0).is_none());
        assert!(p.submit(slot_key(1, 0), packet(0, 1, 1024), 0.0).is_none());
        assert_eq!(p.pending_bytes(), 2048);
        assert!(p.conservation_holds());
    }

    #[test]
    fn reaching_threshold_flushes_one_aggregate() {
        let mut p = ProxyBuffer::new(NodeId(0), 4096);
        p.submit(slot_key(1, 0), packet(0, 0, 1024), 0.0);
        p.submit(slot_key(1, 0), packet(0, 1, 1024), 0.0);
        let batch = p
            .submit(slot_key(1, 0), packet(0, 2, 2048), 0.0)
            .expect("threshold reached");
        assert_eq!(batch.bytes, 4096);
        assert_eq!(batch.blocks.len(), 3);
        assert_eq!(p.pending_bytes(), 0);
        assert!(p.conservation_holds());
    }

    #[test]
    fn remove_target_pulls_back_only_that_agent() {
        let mut p = ProxyBuffer::new(NodeId(0), 1 << 20);
        p.submit(slot_key(1, 0), packet(0, 0, 1024), 0.0);
        p.submit(slot_key(1, 1), packet(1, 0, 256), 0.0);
        p.submit(slot_key(2, 0), packet(2, 0, 512), 0.0);
        let pulled = p.remove_target(NodeId(1));
        assert_eq!(pulled.len(), 2);
        assert_eq!(pulled.iter().map(|b| b.bytes).sum::<u64>(), 1280);
        assert_eq!(p.pending_bytes(), 512);
        assert!(p.conservation_holds());
        p.clear();
        assert_eq!(p.pending_bytes(), 0);
        assert!(p.conservation_holds());
    }

    #[test]
    fn timer_flush_sweeps_stale_slots() {
        let mut p = ProxyBuffer::new(NodeId(0), 1 << 20);
        p.submit(slot_key(1, 0), packet(0, 0, 1024), 0.0);
        p.submit(slot_key(1, 1), packet(0, 0, 512), 0.05);
        let batches = p.due_flushes(0.1, 0.1);
        assert_eq!(batches.len(), 1); // only the 0.0 slot is stale enough
        assert_eq!(batches[0].bytes, 1024);
        let rest = p.due_flushes(0.2, 0.1);
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].bytes, 512);
        assert!(p.conservation_holds());
    }

    #[test]
    fn retarget_moves_pending_data_to_failover_agent() {
        let mut p = ProxyBuffer::new(NodeId(0), 1 << 20);
        p.submit(slot_key(1, 0), packet(0, 0, 1024), 0.0);
        p.submit(slot_key(1, 1), packet(0, 0, 256), 0.0);
        p.submit(slot_key(2, 0), packet(1, 0, 128), 0.0);
        p.retarget(NodeId(1), NodeId(3));
        let batches = p.drain();
        let targets: Vec<u64> = batches.iter().map(|b| b.key.target.0).collect();
        assert_eq!(targets, vec![2, 3, 3]);
        assert_eq!(p.pending_bytes(), 0);
        assert!(p.conservation_holds());
    }

    #[test]
    fn per_stream_order_is_preserved() {
        let mut p = ProxyBuffer::new(NodeId(0), 10_000);
        for seq in 0..5 {
            p.submit(slot_key(1, 0), packet(7, seq, 100), 0.0);
        }
        let batches = p.drain();
        let seqs: Vec<u32> = batches[0].blocks.iter().map(|b| b.backup_seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batching_issues_fewer_transfers_than_packets() {
        let mut p = ProxyBuffer::new(NodeId(0), 4096);
        for seq in 0..100 {
            p.submit(slot_key(1, 0), packet(0, seq, 256), 0.0);
        }
        p.drain();
        assert!(p.flush_count() < p.submit_count());
        assert!(p.flush_count() <= 7); // 100 * 256 B / 4 KiB
    }

    proptest! {
        /// Conservation holds under arbitrary interleavings of submits,
        /// timer flushes, and retargets.
        #[test]
        fn conservation_under_random_traffic(
            ops in proptest::collection::vec(
                (0u64..4, 0u32..3, 1u64..3_000, 0u8..10),
                1..120,
            )
        ) {
            let mut p = ProxyBuffer::new(NodeId(0), 4096);
            let mut now = 0.0;
            for (target, partition, bytes, action) in ops {
                now += 0.01;
                match action {
                    0..=6 => {
                        p.submit(slot_key(target, partition), packet(0, 0, bytes), now);
                    }
                    7 => {
                        p.due_flushes(now, 0.05);
                    }
                    8 => p.retarget(NodeId(target), NodeId(target + 1)),
                    _ => {
                        p.drain();
                    }
                }
                prop_assert!(p.conservation_holds());
            }
        }
    }
}
