//! Back-streaming data plane: payload and metadata rings in host memory.
//!
//! Indexes are free-running `u64`s; the physical slot is `index % capacity`.
//! The device reserves slots against its own, possibly stale, copy of the host
//! heads. The host advances the metadata head as it fetches records into the
//! ready pool and the payload head over the longest consumed prefix, so
//! payload slots may be consumed out of order.

pub mod explore;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    /// Slots per ring; power of two. Large enough to hold any preset's
    /// whole result, so out-of-order streaming cannot wedge the ring.
    pub capacity: u64,
    /// Bytes per slot.
    pub slot_size: u64,
    /// Wire size of one metadata record.
    pub meta_record_bytes: u64,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            capacity: 65_536,
            slot_size: 32,
            meta_record_bytes: 8,
        }
    }
}

impl RingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.capacity == 0 || !self.capacity.is_power_of_two() {
            return Err(format!("ring.capacity: {} is not a power of two", self.capacity));
        }
        if self.slot_size == 0 {
            return Err("ring.slot_size: must be > 0".into());
        }
        if self.meta_record_bytes == 0 {
            return Err("ring.meta_record_bytes: must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub seq: u64,
    /// Physical slot in the payload ring.
    pub payload_slot: u64,
    /// Free-running payload index; lets the host detect wraparound reuse.
    pub payload_index: u64,
    /// Byte offset of the chunk in the kernel's result space.
    pub result_offset: u64,
    pub length: u64,
    pub kernel_id: u32,
    pub last: bool,
}

/// What the host learns when it consumes a payload slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadDescriptor {
    pub kernel_id: u32,
    pub result_offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingViolation {
    #[error("read of uncommitted payload index {index}")]
    UncommittedRead { index: u64 },
    #[error("read of unwritten metadata index {index}")]
    UnwrittenMetadata { index: u64 },
    #[error("{ring} ring: write to index {index} overwrites unconsumed index {previous}")]
    Overwrite {
        ring: &'static str,
        index: u64,
        previous: u64,
    },
    #[error("{ring} ring: occupancy {occupancy} exceeds capacity {capacity}")]
    Occupancy {
        ring: &'static str,
        occupancy: u64,
        capacity: u64,
    },
    #[error("{what} moved backwards: {from} -> {to}")]
    NonMonotonic { what: &'static str, from: u64, to: u64 },
    #[error("device head {local} ahead of host head {host} on {ring} ring")]
    StaleHeadAhead { ring: &'static str, local: u64, host: u64 },
    #[error("commit of unreserved {ring} index {index}")]
    Unreserved { ring: &'static str, index: u64 },
    #[error("payload index {index} consumed twice")]
    DoubleConsume { index: u64 },
}

impl RingViolation {
    /// Invariant family names used in reports.
    pub fn family(&self) -> &'static str {
        match self {
            RingViolation::UncommittedRead { .. } | RingViolation::UnwrittenMetadata { .. } => "partial-write",
            RingViolation::Overwrite { .. } => "overwrite",
            RingViolation::Occupancy { .. } => "occupancy",
            RingViolation::NonMonotonic { .. } | RingViolation::StaleHeadAhead { .. } => "monotonicity",
            RingViolation::Unreserved { .. } | RingViolation::DoubleConsume { .. } => "protocol",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct Slot {
    /// Free-running index whose data currently sits in this slot.
    written: Option<u64>,
    consumed: bool,
}

/// One host-resident ring as the host sees it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ring {
    name: &'static str,
    capacity: u64,
    head: u64,
    tail: u64,
    slots: Vec<Slot>,
}

impl Ring {
    pub fn new(name: &'static str, capacity: u64) -> Self {
        Ring {
            name,
            capacity,
            head: 0,
            tail: 0,
            slots: vec![Slot::default(); capacity as usize],
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }
    pub fn head(&self) -> u64 {
        self.head
    }
    /// Host-visible (published) tail.
    pub fn tail(&self) -> u64 {
        self.tail
    }

    fn slot(&self, index: u64) -> &Slot {
        &self.slots[(index % self.capacity) as usize]
    }

    fn slot_mut(&mut self, index: u64) -> &mut Slot {
        let cap = self.capacity;
        &mut self.slots[(index % cap) as usize]
    }

    pub fn is_committed(&self, index: u64) -> bool {
        self.slot(index).written == Some(index)
    }

    pub fn is_consumed(&self, index: u64) -> bool {
        let s = self.slot(index);
        s.written == Some(index) && s.consumed
    }

    /// Write data for `index`. The previous occupant of the slot must have
    /// been released by the host (index below head).
    fn write(&mut self, index: u64) -> Result<(), RingViolation> {
        let name = self.name;
        let head = self.head;
        if let Some(prev) = self.slot(index).written {
            if prev != index && prev >= head {
                return Err(RingViolation::Overwrite {
                    ring: name,
                    index,
                    previous: prev,
                });
            }
        }
        if index >= head + self.capacity {
            return Err(RingViolation::Occupancy {
                ring: name,
                occupancy: index + 1 - head,
                capacity: self.capacity,
            });
        }
        *self.slot_mut(index) = Slot {
            written: Some(index),
            consumed: false,
        };
        Ok(())
    }

    fn publish(&mut self, tail: u64) -> Result<(), RingViolation> {
        if tail < self.tail {
            return Err(RingViolation::NonMonotonic {
                what: self.name,
                from: self.tail,
                to: tail,
            });
        }
        self.tail = tail;
        Ok(())
    }

    /// Largest `h` with every index below `h` consumed, starting from the
    /// current head.
    fn contiguous_consumed(&self) -> u64 {
        let mut h = self.head;
        while h < self.tail && self.is_consumed(h) {
            h += 1;
        }
        h
    }
}

/// Host side of both rings plus the metadata contents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HostRings {
    pub slot_size: u64,
    payload: Ring,
    meta: Ring,
    records: Vec<Option<MetadataRecord>>,
    /// Metadata index the host has fetched up to (== meta head).
    fetched: u64,
}

impl HostRings {
    pub fn new(cfg: &RingConfig) -> Self {
        HostRings {
            slot_size: cfg.slot_size,
            payload: Ring::new("payload", cfg.capacity),
            meta: Ring::new("metadata", cfg.capacity),
            records: vec![None; cfg.capacity as usize],
            fetched: 0,
        }
    }

    pub fn payload(&self) -> &Ring {
        &self.payload
    }
    pub fn meta(&self) -> &Ring {
        &self.meta
    }

    pub fn heads(&self) -> (u64, u64) {
        (self.payload.head, self.meta.head)
    }

    /// Device DMA lands payload data for `index`.
    pub fn write_payload(&mut self, index: u64) -> Result<(), RingViolation> {
        self.payload.write(index)
    }

    /// Device DMA lands one metadata record at `index`.
    pub fn write_meta(&mut self, index: u64, record: MetadataRecord) -> Result<(), RingViolation> {
        self.meta.write(index)?;
        let cap = self.meta.capacity;
        self.records[(index % cap) as usize] = Some(record);
        Ok(())
    }

    pub fn publish_payload_tail(&mut self, tail: u64) -> Result<(), RingViolation> {
        self.payload.publish(tail)
    }

    pub fn publish_meta_tail(&mut self, tail: u64) -> Result<(), RingViolation> {
        self.meta.publish(tail)
    }

    /// One DMA's visibility step: payloads, then metadata, then tails.
    pub fn device_commit(
        &mut self,
        payload_indexes: &[u64],
        meta_indexes: &[u64],
        records: &[MetadataRecord],
    ) -> Result<(), RingViolation> {
        for &i in payload_indexes {
            self.write_payload(i)?;
        }
        for (&i, r) in meta_indexes.iter().zip(records) {
            if !self.payload.is_committed(r.payload_index) {
                return Err(RingViolation::UncommittedRead { index: r.payload_index });
            }
            self.write_meta(i, *r)?;
        }
        if let Some(&last) = payload_indexes.last() {
            self.publish_payload_tail(last + 1)?;
        }
        if let Some(&last) = meta_indexes.last() {
            self.publish_meta_tail(last + 1)?;
        }
        Ok(())
    }

    /// New metadata the host has not fetched yet: `[meta head, meta tail)`.
    pub fn host_poll_meta_tail(&self) -> std::ops::Range<u64> {
        self.fetched..self.meta.tail
    }

    /// Move the record at the metadata head into the caller's pool.
    pub fn fetch_meta(&mut self) -> Result<Option<MetadataRecord>, RingViolation> {
        let index = self.fetched;
        if index >= self.meta.tail {
            return Ok(None);
        }
        if !self.meta.is_committed(index) {
            return Err(RingViolation::UnwrittenMetadata { index });
        }
        let cap = self.meta.capacity;
        let rec = self.records[(index % cap) as usize].ok_or(RingViolation::UnwrittenMetadata { index })?;
        self.meta.slot_mut(index).consumed = true;
        self.fetched += 1;
        self.meta.head = self.fetched;
        Ok(Some(rec))
    }

    /// Fetch everything published so far.
    pub fn fetch_all(&mut self) -> Result<Vec<MetadataRecord>, RingViolation> {
        let mut out = Vec::with_capacity(self.host_poll_meta_tail().count());
        while let Some(r) = self.fetch_meta()? {
            out.push(r);
        }
        Ok(out)
    }

    pub fn host_consume_payload(&mut self, record: &MetadataRecord) -> Result<PayloadDescriptor, RingViolation> {
        let index = record.payload_index;
        if !self.payload.is_committed(index) {
            return Err(RingViolation::UncommittedRead { index });
        }
        let slot = self.payload.slot_mut(index);
        if slot.consumed {
            return Err(RingViolation::DoubleConsume { index });
        }
        slot.consumed = true;
        Ok(PayloadDescriptor {
            kernel_id: record.kernel_id,
            result_offset: record.result_offset,
            length: record.length,
        })
    }

    /// Recompute the payload head over the contiguous consumed prefix.
    /// Idempotent.
    pub fn advance_heads(&mut self) -> (u64, u64) {
        self.payload.head = self.payload.contiguous_consumed();
        (self.payload.head, self.meta.head)
    }
}

/// The device's view: its own tails and possibly stale copies of the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceRingView {
    pub capacity: u64,
    pub local_payload_head: u64,
    pub local_meta_head: u64,
    pub payload_tail: u64,
    pub meta_tail: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub payload: Vec<u64>,
    pub meta: Vec<u64>,
}

impl Reservation {
    pub fn payload_slots(&self, capacity: u64) -> Vec<u64> {
        self.payload.iter().map(|i| i % capacity).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReserveError {
    #[error("ring full against local head")]
    WouldBlock,
    #[error("request of {requested} slots exceeds ring capacity {capacity}")]
    TooLarge { requested: u64, capacity: u64 },
    #[error("reservation of zero slots")]
    Empty,
}

impl DeviceRingView {
    pub fn new(capacity: u64) -> Self {
        DeviceRingView {
            capacity,
            local_payload_head: 0,
            local_meta_head: 0,
            payload_tail: 0,
            meta_tail: 0,
        }
    }

    /// Reserve slots when both rings have room against the local heads.
    /// On `WouldBlock` nothing changes.
    pub fn device_reserve(&mut self, n_payload: u64, n_meta: u64) -> Result<Reservation, ReserveError> {
        if n_payload == 0 || n_meta == 0 {
            return Err(ReserveError::Empty);
        }
        let n = n_payload.max(n_meta);
        if n > self.capacity {
            return Err(ReserveError::TooLarge {
                requested: n,
                capacity: self.capacity,
            });
        }
        if self.payload_tail + n_payload - self.local_payload_head > self.capacity
            || self.meta_tail + n_meta - self.local_meta_head > self.capacity
        {
            return Err(ReserveError::WouldBlock);
        }
        let payload = (self.payload_tail..self.payload_tail + n_payload).collect();
        let meta = (self.meta_tail..self.meta_tail + n_meta).collect();
        self.payload_tail += n_payload;
        self.meta_tail += n_meta;
        Ok(Reservation { payload, meta })
    }

    /// Apply a flow-control message. Heads only move forward; a stale message
    /// is ignored.
    pub fn apply_flow_control(&mut self, payload_head: u64, meta_head: u64) {
        self.local_payload_head = self.local_payload_head.max(payload_head);
        self.local_meta_head = self.local_meta_head.max(meta_head);
    }

    /// Check the conservative-staleness invariant against the host's heads.
    pub fn check_against(&self, host: &HostRings) -> Result<(), RingViolation> {
        let (ph, mh) = host.heads();
        if self.local_payload_head > ph {
            return Err(RingViolation::StaleHeadAhead {
                ring: "payload",
                local: self.local_payload_head,
                host: ph,
            });
        }
        if self.local_meta_head > mh {
            return Err(RingViolation::StaleHeadAhead {
                ring: "metadata",
                local: self.local_meta_head,
                host: mh,
            });
        }
        for (ring, tail, head) in [("payload", self.payload_tail, ph), ("metadata", self.meta_tail, mh)] {
            if tail - head > self.capacity {
                return Err(RingViolation::Occupancy {
                    ring,
                    occupancy: tail - head,
                    capacity: self.capacity,
                });
            }
        }
        Ok(())
    }
}

/// Brute-force reference for the gap-aware head: the smallest index not in
/// `consumed`, scanning upward from zero.
pub fn contiguous_prefix(consumed: &[bool]) -> u64 {
    consumed.iter().take_while(|c| **c).count() as u64
}
