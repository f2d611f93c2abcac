//! Deterministic discrete-event message simulation.
//!
//! Virtual time is integer milliseconds; there is no real clock anywhere.
//! Events are ordered by `(deliver_at, insertion sequence)`, so two events at
//! the same instant replay in the order they were scheduled and a run's trace
//! is a pure function of its inputs.

use alloc::collections::BinaryHeap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Reverse;

use crate::error::{CoreError, CoreResult};
use crate::sign::EntityId;

/// A message in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<M> {
    pub deliver_at: u64,
    pub src: EntityId,
    pub dst: EntityId,
    pub message: M,
    /// Exact canonical encoding length of the message.
    pub size_bytes: u64,
}

/// One delivered message, as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_ms: u64,
    pub src: EntityId,
    pub dst: EntityId,
    pub msg_type: String,
    pub size_bytes: u64,
}

impl TraceRecord {
    /// CSV row matching the exported trace schema
    /// (`time_ms,src,dst,msg_type,size_bytes`).
    pub fn csv_row(&self) -> String {
        alloc::format!(
            "{},{},{},{},{}",
            self.time_ms,
            self.src,
            self.dst,
            self.msg_type,
            self.size_bytes
        )
    }
}

/// Link and consensus timing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Link throughput for worker↔infrastructure hops.
    pub bytes_per_ms: u64,
    /// Fixed per-message latency for worker↔infrastructure hops.
    pub base_latency_ms: u64,
    /// Flat per-round consensus time, applied once per committed PoV round.
    pub consensus_delay_ms: u64,
    /// Upper bound on seeded per-message latency jitter; zero disables it
    /// (the default, keeping transit times a pure function of size).
    pub jitter_ms: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { bytes_per_ms: 1_250, base_latency_ms: 5, consensus_delay_ms: 500, jitter_ms: 0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> CoreResult<()> {
        if self.bytes_per_ms == 0 {
            return Err(CoreError::InvalidConfig("bytes_per_ms must be positive".to_string()));
        }
        Ok(())
    }

    /// Transit time of one worker↔infrastructure message (ceil division, so
    /// any nonzero payload costs at least one millisecond of link time).
    pub fn transit_ms(&self, size_bytes: u64) -> u64 {
        self.base_latency_ms + size_bytes.div_ceil(self.bytes_per_ms)
    }
}

/// Priority queue of pending events with a monotone clock and a full
/// delivery trace.
#[derive(Debug)]
pub struct EventQueue<M> {
    heap: BinaryHeap<Reverse<QueuedEvent<M>>>,
    seq: u64,
    now: u64,
    trace: Vec<TraceRecord>,
    total_bytes: u64,
}

#[derive(Debug)]
struct QueuedEvent<M> {
    deliver_at: u64,
    seq: u64,
    event: SimEvent<M>,
}

impl<M> PartialEq for QueuedEvent<M> {
    fn eq(&self, other: &Self) -> bool {
        self.deliver_at == other.deliver_at && self.seq == other.seq
    }
}

impl<M> Eq for QueuedEvent<M> {}

impl<M> PartialOrd for QueuedEvent<M> {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for QueuedEvent<M> {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.deliver_at
            .cmp(&other.deliver_at)
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

impl<M> Default for EventQueue<M> {
    fn default() -> Self {
        Self::new()
    }
}

impl<M> EventQueue<M> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), seq: 0, now: 0, trace: Vec::new(), total_bytes: 0 }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    /// Schedules an event; its delivery time must not precede the clock.
    pub fn schedule(&mut self, event: SimEvent<M>) -> CoreResult<()> {
        if event.deliver_at < self.now {
            return Err(CoreError::TimeTravel { deliver_at: event.deliver_at, now: self.now });
        }
        self.heap.push(Reverse(QueuedEvent { deliver_at: event.deliver_at, seq: self.seq, event }));
        self.seq += 1;
        Ok(())
    }

    /// Pops the next event, advances the clock, and records the delivery.
    pub fn next_event(&mut self, msg_type: impl FnOnce(&M) -> &'static str) -> Option<SimEvent<M>> {
        let Reverse(q) = self.heap.pop()?;
        self.now = q.deliver_at;
        self.total_bytes += q.event.size_bytes;
        self.trace.push(TraceRecord {
            time_ms: q.deliver_at,
            src: q.event.src.clone(),
            dst: q.event.dst.clone(),
            msg_type: msg_type(&q.event.message).to_string(),
            size_bytes: q.event.size_bytes,
        });
        Some(q.event)
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceRecord> {
        self.trace
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }
}

/// Totals recomputed from a trace by [`communication_cost`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommunicationCost {
    pub total_time_ms: u64,
    pub total_bytes: u64,
    pub rounds: u64,
}

/// Recomputes round-trip time and byte totals from a finished trace.
///
/// Rounds alternate between an upload leg and a download leg: an upload-type
/// record arriving after any download-type record closes the previous round.
/// Per round the critical path is the slowest upload plus the slowest
/// download; consensus rounds add the flat consensus delay once each. All
/// other traffic is miner-backbone traffic that contributes bytes but no
/// critical-path time.
pub fn communication_cost(
    trace: &[TraceRecord],
    model: &CostModel,
    upload_types: &[&str],
    download_types: &[&str],
    with_consensus: bool,
) -> CommunicationCost {
    let mut total_bytes = 0u64;
    let mut total_time = 0u64;
    let mut rounds = 0u64;
    let mut upload_max = 0u64;
    let mut download_max = 0u64;
    let mut saw_download = false;
    let mut close_round = |upload_max: &mut u64, download_max: &mut u64, saw: &mut bool| {
        rounds += 1;
        total_time += *upload_max + *download_max;
        if with_consensus {
            total_time += model.consensus_delay_ms;
        }
        *upload_max = 0;
        *download_max = 0;
        *saw = false;
    };
    for rec in trace {
        total_bytes += rec.size_bytes;
        let t = rec.msg_type.as_str();
        if upload_types.contains(&t) {
            if saw_download {
                close_round(&mut upload_max, &mut download_max, &mut saw_download);
            }
            upload_max = upload_max.max(model.transit_ms(rec.size_bytes));
        } else if download_types.contains(&t) {
            saw_download = true;
            download_max = download_max.max(model.transit_ms(rec.size_bytes));
        }
    }
    if upload_max > 0 || download_max > 0 {
        close_round(&mut upload_max, &mut download_max, &mut saw_download);
    }
    CommunicationCost { total_time_ms: total_time, total_bytes, rounds }
}
